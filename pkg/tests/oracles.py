"""Independent reference computations used as test oracles.

Nothing here calls into the code paths under test beyond reading parameters.
"""
import itertools

import numpy as np
import torch
import torch.nn.functional as F


def brute_force_gap(x):
    """Per-channel mean by explicit summation over a (C, H, W) array."""
    c, h, w = x.shape
    out = np.zeros(c)
    for ch in range(c):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += float(x[ch, i, j])
        out[ch] = total / (h * w)
    return out


def dense_gate(v, w1, b1, w2, b2):
    """sigmoid(W2 relu(W1 v + b1) + b2) with explicit loops."""
    hidden = []
    for i in range(w1.shape[0]):
        s = b1[i] + sum(w1[i, j] * v[j] for j in range(len(v)))
        hidden.append(max(s, 0.0))
    out = []
    for i in range(w2.shape[0]):
        s = b2[i] + sum(w2[i, j] * hidden[j] for j in range(len(hidden)))
        out.append(1.0 / (1.0 + np.exp(-s)))
    return np.array(out)


def _bn_eval(x, bn):
    return F.batch_norm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias, False, 0.0, bn.eps)


def _conv(x, conv):
    return F.conv2d(x, conv.weight, conv.bias, padding=conv.kernel_size[0] // 2)


def replay_rdn(x, block):
    """Inference-mode RDN output rebuilt from its primitive parameters."""
    bn_h, _, conv_h, _ = block.dense
    y_d = torch.cat([_conv(F.relu(_bn_eval(x, bn_h)), conv_h), x], dim=1)
    f = y_d
    for layer in block.residual:
        conv, _, bn, _ = layer
        f = F.relu(_bn_eval(_conv(f, conv), bn))
    return F.relu(_bn_eval(f + y_d, block.bn))


def replay_rse(x, block):
    conv, _, bn = block.residual
    f = _bn_eval(_conv(x, conv), bn)
    v = x.mean(dim=(2, 3))
    g = block.gate
    u = torch.sigmoid(F.linear(F.relu(F.linear(v, g.fc1.weight, g.fc1.bias)), g.fc2.weight, g.fc2.bias))
    return F.relu(f + x * u[:, :, None, None])


def central_difference(fn, tensor, indices, h=1e-7):
    """Numerical d fn / d tensor[idx] for each flat index in ``indices``.

    The small default step keeps both evaluations on the same side of nearby
    ReLU and max-pool kinks in whole-network checks (double precision).
    """
    flat = tensor.data.view(-1)
    grads = []
    for idx in indices:
        orig = flat[idx].item()
        flat[idx] = orig + h
        plus = float(fn())
        flat[idx] = orig - h
        minus = float(fn())
        flat[idx] = orig
        grads.append((plus - minus) / (2 * h))
    return np.array(grads)


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def settle_batchnorm(model, x):
    """Set every batch-norm's running statistics to the exact batch statistics of ``x``."""
    bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
    model.train()
    for m in model.modules():
        if m.__class__.__name__ == "Dropout":
            m.eval()
    with torch.no_grad():
        model(x)
    model.eval()


def pixel_loop_confusion(pred, truth):
    tp = tn = fp = fn = 0
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(truth).ravel().tolist()):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def mann_whitney_auc(scores, truth):
    """P(score_pos > score_neg) + 0.5 P(tie) by enumerating all pairs."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    doubled = sum(2 if p > n else 1 if p == n else 0 for p, n in itertools.product(pos, neg))
    return doubled / (2 * len(pos) * len(neg))


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def bn_params(c):
    return 2 * c


def fc_params(cin, cout):
    return cin * cout + cout


def rdn_params(cin, growth, k=3):
    c = cin + growth
    dense = bn_params(cin) + conv_params(cin, growth, k)
    residual = 2 * (conv_params(c, c, k) + bn_params(c))
    return dense + residual + bn_params(c), c


def rse_params(c, r, k=3):
    return conv_params(c, c, k) + bn_params(c) + fc_params(c, c // r) + fc_params(c // r, c)


def level_params(cin, growth, r, up_from=None):
    n = 0
    if up_from is not None:
        n += up_from * (cin // 2) * 4 + cin // 2
    rdn, c = rdn_params(cin, growth)
    return n + rdn + rse_params(c, r), c


def audit_parameter_count(base, r=2, in_ch=3, tail=True):
    """Trainable parameters implied by the documented layer layout."""
    total = 0
    widths = [base * 2**k for k in range(4)]
    c = in_ch
    for w in widths:
        n, c = level_params(c, w - c, r)
        total += n
    below = c
    for w in reversed(widths[:3]):
        n, below = level_params(2 * w, w, r, up_from=below)
        total += n
    total += conv_params(below, 1, 1)
    if tail:
        n_a, a = level_params(in_ch, base - in_ch, r)
        n_b, b = level_params(1, base - 1, r)
        n_0, c0 = level_params(a + b, base, r)
        n_1, c1 = level_params(c0, base, r)
        total += n_a + n_b + n_0 + n_1 + conv_params(c1, 1, 1)
    return total
