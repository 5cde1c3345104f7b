"""
Two-phase training: the backbone alone first, then the tail on top of a
frozen backbone. Also owns the checkpoint archive format.
"""
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .data import augment, random_patch, to_tensors
from .exceptions import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    IncompatibleCheckpointError,
    InvalidInputError,
    InvariantViolation,
    NonFiniteLossError,
)
from .loss import LossWeights, loss_terms
from .network import DRVNet, ModelConfig, named_tensors

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "drvnet-checkpoint"
CHECKPOINT_VERSION = 1


class Phase(str, Enum):
    BACKBONE = "backbone"
    TAIL = "tail"


DEFAULT_EPOCHS = {Phase.BACKBONE: 150, Phase.TAIL: 100}


@dataclass
class TrainSchedule:
    phase: Phase = Phase.BACKBONE
    initial_lr: float = 1e-3
    decay_factor: float = 10.0
    decay_every: int = 50
    total_epochs: int = None
    batch_size: int = 2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        self.phase = Phase(self.phase)
        if self.total_epochs is None:
            self.total_epochs = DEFAULT_EPOCHS[self.phase]
        self.betas = tuple(self.betas)
        if self.total_epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("epochs, batch size and decay interval must be positive")
        if self.initial_lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("learning rate and decay factor must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["phase"] = self.phase.value
        d["betas"] = list(self.betas)
        return d


def lr_at(epoch, sched):
    """Step decay: ``initial_lr / decay_factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise InvalidInputError(f"epoch must be nonnegative, got {epoch}")
    if epoch >= sched.total_epochs:
        raise InvalidInputError(f"epoch {epoch} beyond schedule of {sched.total_epochs} epochs")
    return sched.initial_lr / sched.decay_factor ** (epoch // sched.decay_every)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    phase: str = Phase.BACKBONE.value
    epoch: int = 0
    schedule: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    optimizer_state: dict = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, optimizer=None, **kwargs):
        tensors = {k: v.detach().clone() for k, v in named_tensors(model).items()}
        opt_state = None
        if optimizer is not None:
            opt_state = _clone_state(optimizer.state_dict())
        return cls(model.config, tensors, optimizer_state=opt_state, **kwargs)

    def build_model(self, config=None):
        model = DRVNet(config or self.config)
        load_into(model, self)
        return model


def _clone_state(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_state(v) for v in obj]
    return obj


def _compatible(a, b):
    return dataclasses.replace(a, tail_enabled=True) == dataclasses.replace(b, tail_enabled=True)


def load_into(model, ckpt):
    """Copy checkpoint tensors into ``model``.

    Every checkpoint tensor must exist in the model with the same shape. Model
    tensors absent from the checkpoint must all sit under ``tail/`` (loading a
    backbone-only checkpoint into a full model); those keep their current values.
    """
    if not _compatible(model.config, ckpt.config):
        raise IncompatibleCheckpointError(
            f"checkpoint config {ckpt.config} does not match model config {model.config}"
        )
    own = named_tensors(model)
    unknown = sorted(set(ckpt.tensors) - set(own))
    if unknown:
        raise IncompatibleCheckpointError(f"checkpoint has tensors the model lacks: {unknown[:5]}")
    missing = sorted(n for n in set(own) - set(ckpt.tensors) if not n.startswith("tail/"))
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
    for name, t in ckpt.tensors.items():
        if own[name].shape != t.shape:
            raise IncompatibleCheckpointError(f"{name}: shape {tuple(t.shape)} vs {tuple(own[name].shape)}")
    state = {name.replace("/", "."): t for name, t in ckpt.tensors.items()}
    model.load_state_dict(state, strict=False)
    return model


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(ckpt, path):
    """Write a zip archive: ``manifest.json``, one ``.npy`` per tensor, optimizer state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    blobs = {}
    for i, (name, t) in enumerate(sorted(ckpt.tensors.items())):
        buf = io.BytesIO()
        np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
        fname = f"tensors/{i:05d}.npy"
        blobs[fname] = buf.getvalue()
        entries[name] = {"file": fname, "sha256": _sha256(blobs[fname])}
    optimizer = None
    if ckpt.optimizer_state is not None:
        buf = io.BytesIO()
        torch.save(ckpt.optimizer_state, buf)
        blobs["optimizer.pt"] = buf.getvalue()
        optimizer = {"file": "optimizer.pt", "sha256": _sha256(blobs["optimizer.pt"])}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "phase": ckpt.phase,
        "epoch": ckpt.epoch,
        "schedule": ckpt.schedule,
        "history": ckpt.history,
        "extra": ckpt.extra,
        "tensors": entries,
        "optimizer": optimizer,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, default=_json_default))
        for fname, data in blobs.items():
            zf.writestr(fname, data)
    os.replace(tmp, path)
    return path


def _json_default(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def load_checkpoint(path):
    """Read and fully verify an archive before returning anything."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointCorruptError(f"{path} is not a checkpoint archive")
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"{path} has version {manifest.get('version')}, expected {CHECKPOINT_VERSION}"
                )
            tensors = {}
            for name, entry in manifest["tensors"].items():
                data = zf.read(entry["file"])
                if _sha256(data) != entry["sha256"]:
                    raise CheckpointCorruptError(f"{path}: checksum mismatch for {name}")
                tensors[name] = torch.from_numpy(np.load(io.BytesIO(data), allow_pickle=False))
            opt_state = None
            if manifest.get("optimizer"):
                data = zf.read(manifest["optimizer"]["file"])
                if _sha256(data) != manifest["optimizer"]["sha256"]:
                    raise CheckpointCorruptError(f"{path}: checksum mismatch for optimizer state")
                opt_state = torch.load(io.BytesIO(data), weights_only=True)
            config = ModelConfig.from_dict(manifest["config"])
    except (CheckpointCorruptError, CheckpointVersionError):
        raise
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, TypeError, EOFError, OSError, RuntimeError) as exc:
        raise CheckpointCorruptError(f"{path} is corrupted: {exc}") from exc
    return Checkpoint(
        config,
        tensors,
        phase=manifest["phase"],
        epoch=manifest["epoch"],
        schedule=manifest["schedule"],
        history=manifest["history"],
        optimizer_state=opt_state,
        extra=manifest.get("extra", {}),
    )


def tensor_checksum(tensors, prefix=""):
    """SHA-256 over every tensor whose name starts with ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(tensors[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def backbone_checksum(model_or_ckpt):
    tensors = model_or_ckpt.tensors if isinstance(model_or_ckpt, Checkpoint) else named_tensors(model_or_ckpt)
    return tensor_checksum(tensors, "backbone/")


# -- training loop -----------------------------------------------------------


@dataclass
class TrainOptions:
    augment: bool = True
    arbitrary_rotation: bool = False
    patch: int = None
    log_path: str = None
    recalibrate_bn: bool = True


@dataclass
class PhaseResult:
    final: Checkpoint
    best: Checkpoint
    history: list


def _prepare(sample, rng, options):
    if options.augment:
        sample = augment(sample, rng, options.arbitrary_rotation)
    if options.patch:
        sample = random_patch(sample, options.patch, rng)
    return sample


def recalibrate_batchnorm(module, model, samples, rng=None, options=TrainOptions()):
    """Replace running statistics of the batch norms inside ``module`` by exact
    population averages over ``samples`` (dropout off, no gradients).

    Short runs leave the 0.99-decay moving averages dominated by their
    initial values; this closing pass makes inference-mode outputs usable.
    """
    bns = [m for m in module.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    if not bns or not samples:
        return
    rng = rng if rng is not None else np.random.default_rng(0)
    was_training = model.training
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
    model.eval()
    for bn in bns:
        bn.train()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for s in samples:
            if options.patch:
                s = random_patch(s, options.patch, rng)
            x, _ = to_tensors([s])
            model(x.to(dtype))
    for bn, m in zip(bns, saved):
        bn.momentum = m
    model.train(was_training)


def _validation_loss(model, samples, weights, output_index):
    if not samples:
        return None
    model.eval()
    total = 0.0
    with torch.no_grad():
        for s in samples:
            x, y = to_tensors([s])
            out = model(x)[output_index].to(y.dtype)
            total += float(loss_terms(out, y, weights)[0])
    return total / len(samples)


def _run_phase(model, params, train, val, sched, weights, options, output_index, frozen=()):
    if not train:
        raise InvalidInputError("no training samples")
    rng = np.random.default_rng(sched.seed)
    gen = torch.Generator().manual_seed(sched.seed)
    model.set_dropout_generator(gen)
    optimizer = torch.optim.Adam(params, lr=lr_at(0, sched), betas=sched.betas, eps=sched.adam_eps)
    dtype = next(model.parameters()).dtype
    history = []
    best, best_val = None, math.inf
    log_file = open(options.log_path, "a") if options.log_path else None
    try:
        for epoch in range(sched.total_epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, sched)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            order = rng.permutation(len(train))
            sums = np.zeros(3)
            n_batches = 0
            for b, start in enumerate(range(0, len(train), sched.batch_size)):
                batch = [_prepare(train[i], rng, options) for i in order[start : start + sched.batch_size]]
                x, y = to_tensors(batch)
                x, y = x.to(dtype), y.to(dtype)
                out = model(x)[output_index]
                total, bce, dice = loss_terms(out, y, weights)
                if not torch.isfinite(total):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, batch {b}",
                        {"epoch": epoch, "batch": b, "ids": [s.identifier for s in batch],
                         "loss": total.item(), "bce": bce.item(), "dice": dice.item()},
                    )
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                leaked = [i for i, p in enumerate(frozen) if p.grad is not None]
                if leaked:
                    raise InvariantViolation(
                        "gradients reached frozen backbone parameters", {"epoch": epoch, "params": leaked}
                    )
                optimizer.step()
                sums += (total.item(), bce.item(), dice.item())
                n_batches += 1
            val_loss = _validation_loss(model, val, weights, output_index)
            loss, bce, dice = sums / n_batches
            record = {
                "phase": sched.phase.value, "epoch": epoch, "lr": lr, "loss": loss, "bce": bce,
                "dice": dice, "val_loss": val_loss, "wall_time": time.perf_counter() - t0,
            }
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            log.info("%s epoch %d lr %.1e loss %.4f val %s", sched.phase.value, epoch, lr, loss, val_loss)
            score = val_loss if val_loss is not None else loss
            if score < best_val:
                best_val = score
                best = Checkpoint.from_model(model, phase=sched.phase.value, epoch=epoch, schedule=sched.to_dict())
    finally:
        if log_file:
            log_file.close()
    if options.recalibrate_bn:
        bn_scope = model.tail if frozen else model
        recal_rng = np.random.default_rng([sched.seed, 1])
        recalibrate_batchnorm(bn_scope, model, train, recal_rng, options)
        final_state = {k: v.clone() for k, v in model.state_dict().items()}
        model.load_state_dict({k.replace("/", "."): v for k, v in best.tensors.items()}, strict=False)
        recalibrate_batchnorm(bn_scope, model, train, np.random.default_rng([sched.seed, 1]), options)
        best = Checkpoint.from_model(model, phase=best.phase, epoch=best.epoch, schedule=best.schedule)
        model.load_state_dict(final_state)
    final = Checkpoint.from_model(
        model, optimizer, phase=sched.phase.value, epoch=sched.total_epochs - 1,
        schedule=sched.to_dict(), history=history,
    )
    best.history = history
    return PhaseResult(final, best, history)


def train_phase1(model, train, val, sched=None, weights=LossWeights(), options=TrainOptions()):
    """Optimise the backbone on its own output map."""
    sched = sched or TrainSchedule(Phase.BACKBONE)
    if sched.phase is not Phase.BACKBONE:
        raise ConfigError("phase-1 training needs a BACKBONE schedule")
    if model.tail is not None:
        raise ConfigError("phase-1 training expects a model with the tail disabled")
    return _run_phase(model, list(model.parameters()), train, val, sched, weights, options, output_index=0)


def train_phase2(model, backbone_ckpt, train, val, sched=None, weights=LossWeights(), options=TrainOptions()):
    """Train the tail with the backbone loaded from ``backbone_ckpt`` and frozen."""
    sched = sched or TrainSchedule(Phase.TAIL)
    if sched.phase is not Phase.TAIL:
        raise ConfigError("phase-2 training needs a TAIL schedule")
    if model.tail is None:
        raise ConfigError("phase-2 training needs a model with the tail enabled")
    backbone_only = {k: v for k, v in backbone_ckpt.tensors.items() if k.startswith("backbone/")}
    load_into(model, dataclasses.replace(backbone_ckpt, tensors=backbone_only))
    model.freeze_backbone()
    before = {k: v.clone() for k, v in named_tensors(model).items() if k.startswith("backbone/")}
    frozen = list(model.backbone.parameters())
    result = _run_phase(model, model.tail_parameters(), train, val, sched, weights, options,
                        output_index=1, frozen=frozen)
    after = named_tensors(model)
    drifted = [k for k, v in before.items() if not torch.equal(v, after[k])]
    if drifted:
        raise InvariantViolation("backbone tensors changed during phase 2", {"tensors": drifted[:10]})
    return result
