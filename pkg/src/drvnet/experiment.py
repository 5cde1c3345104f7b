"""
Run orchestration behind the CLI: multi-seed / k-fold training, evaluation
of trained runs, single-image prediction and the loss/tail ablation.

Output layout of a training run directory::

    <out>/manifest.json                 config, config hash, one record per run
    <out>/seed0[_fold0]/split.json
    <out>/seed0[_fold0]/log.jsonl       one record per epoch and phase
    <out>/seed0[_fold0]/phase1_{best,final}.ckpt
    <out>/seed0[_fold0]/phase2_{best,final}.ckpt   (tail variants only)
    <out>/seed0[_fold0]/training_history.png
"""
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as D
from .evaluation import (
    AggregationMode,
    aggregate,
    evaluate_map,
    format_table,
    summarize_run,
    write_jsonl,
    write_per_image_csv,
    write_table_csv,
)
from .exceptions import ConfigError, IncompatibleCheckpointError, InvalidInputError
from .loss import LossWeights
from .network import DRVNet, ModelConfig
from .plotting import plot_metric_bars, plot_roc, plot_training_history, save_mask_png, save_probability_png
from .training import (
    Phase,
    TrainOptions,
    TrainSchedule,
    backbone_checksum,
    load_checkpoint,
    save_checkpoint,
    train_phase1,
    train_phase2,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class Variant(str, Enum):
    BC = "bc"
    D = "d"
    BCD = "bcd"
    FULL_BCD = "full_bcd"

    @property
    def label(self):
        return {
            Variant.BC: "Backbone with BC",
            Variant.D: "Backbone with D",
            Variant.BCD: "Backbone with BC&D",
            Variant.FULL_BCD: "Full Net. with BC&D",
        }[self]

    @property
    def tail(self):
        return self is Variant.FULL_BCD

    def weights(self, lambda1=1.0, lambda2=0.5, smoothing=1.0):
        if self is Variant.BC:
            lambda2 = 0.0
        elif self is Variant.D:
            lambda1 = 0.0
        return LossWeights(lambda1, lambda2, smoothing)


@dataclass
class RunConfig:
    dataset: str = "drive"
    data_root: str = None
    out: str = "runs"
    seeds: list = None
    variant: str = Variant.FULL_BCD.value
    # model
    base_channels: int = 32
    reduction_ratio: int = 2
    dropout_rate: float = 0.1
    # loss
    lambda1: float = 1.0
    lambda2: float = 0.5
    dice_smoothing: float = 1.0
    # schedule
    epochs_backbone: int = 150
    epochs_tail: int = 100
    lr: float = 1e-3
    decay_every: int = 50
    decay_factor: float = 10.0
    batch_size: int = None
    # data handling
    pad_size: int = None
    patch: int = None
    augment: bool = True
    arbitrary_rotation: bool = False
    # misc
    recalibrate_bn: bool = True
    threshold: float = 0.5
    checkpoint: str = "best"
    deterministic: bool = False
    jobs: int = 1

    def __post_init__(self):
        self.dataset = D.DatasetName.parse(self.dataset).value
        try:
            self.variant = Variant(str(self.variant).lower()).value
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {[v.value for v in Variant]}") from None
        if self.seeds is None:
            self.seeds = [0] if self.dataset == D.DatasetName.STARE.value else list(range(5))
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.checkpoint not in ("best", "final"):
            raise ConfigError("checkpoint must be 'best' or 'final'")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.patch is not None and self.patch % 8:
            raise ConfigError(f"patch size must be divisible by 8, got {self.patch}")
        if self.pad_size is not None and self.pad_size % 8:
            raise ConfigError(f"pad size must be divisible by 8, got {self.pad_size}")
        # validate eagerly so a bad config fails before any training starts
        self.model_config()
        self.loss_weights()
        self.schedule(Phase.BACKBONE, self.seeds[0])
        self.schedule(Phase.TAIL, self.seeds[0])

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        """Load YAML/JSON; a training manifest is accepted and its ``config`` used."""
        try:
            d = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a mapping")
        if "config" in d and "runs" in d:
            d = d["config"]
        return d

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def dataset_name(self):
        return D.DatasetName.parse(self.dataset)

    @property
    def variant_enum(self):
        return Variant(self.variant)

    def model_config(self, tail=None):
        return ModelConfig(
            base_channels=self.base_channels,
            reduction_ratio=self.reduction_ratio,
            dropout_rate=self.dropout_rate,
            tail_enabled=self.variant_enum.tail if tail is None else tail,
        )

    def loss_weights(self, variant=None):
        return (variant or self.variant_enum).weights(self.lambda1, self.lambda2, self.dice_smoothing)

    def schedule(self, phase, seed):
        return TrainSchedule(
            phase=phase,
            initial_lr=self.lr,
            decay_factor=self.decay_factor,
            decay_every=self.decay_every,
            total_epochs=self.epochs_backbone if phase is Phase.BACKBONE else self.epochs_tail,
            batch_size=self.batch_size or D.BATCH_SIZE[self.dataset_name],
            seed=seed,
        )

    def pad(self):
        return D.padded_size_for(self.dataset, self.pad_size)

    def train_options(self, log_path=None):
        return TrainOptions(self.augment, self.arbitrary_rotation, self.patch, log_path, self.recalibrate_bn)


def merge_config(file_values=None, **flags):
    """Flags (non-None) override config-file values, which override defaults."""
    values = dict(file_values or {})
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig.from_dict(values)


def run_name(seed, fold):
    return f"seed{seed}" if fold is None else f"seed{seed}_fold{fold}"


def _load_padded(cfg):
    if not cfg.data_root:
        raise ConfigError("data_root is required")
    samples = D.load_dataset(cfg.data_root, cfg.dataset)
    size = cfg.pad()
    too_big = [s.identifier for s in samples if max(s.annotation.shape) > size]
    if too_big:
        raise InvalidInputError(f"images larger than pad size {size}: {too_big[:3]}")
    return samples, [D.zero_pad(s, size) for s in samples]


def _seed_everything(seed, deterministic):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _phase1(cfg, seed, train, val, weights, run_dir, log_path):
    gen = torch.Generator().manual_seed(seed)
    model = DRVNet(cfg.model_config(tail=False), gen)
    result = train_phase1(model, train, val, cfg.schedule(Phase.BACKBONE, seed), weights,
                          cfg.train_options(log_path))
    paths = {
        "phase1_best": save_checkpoint(result.best, run_dir / "phase1_best.ckpt"),
        "phase1_final": save_checkpoint(result.final, run_dir / "phase1_final.ckpt"),
    }
    return result, paths


def _phase2(cfg, seed, backbone_ckpt, train, val, weights, run_dir, log_path):
    gen = torch.Generator().manual_seed(seed + 10_000)
    model = DRVNet(cfg.model_config(tail=True), gen)
    result = train_phase2(model, backbone_ckpt, train, val, cfg.schedule(Phase.TAIL, seed), weights,
                          cfg.train_options(log_path))
    paths = {
        "phase2_best": save_checkpoint(result.best, run_dir / "phase2_best.ckpt"),
        "phase2_final": save_checkpoint(result.final, run_dir / "phase2_final.ckpt"),
    }
    return result, paths


def train_single(cfg, seed, fold):
    """One full protocol run (phase 1, then phase 2 for tail variants)."""
    if isinstance(cfg, dict):
        cfg = RunConfig.from_dict(cfg)
    _seed_everything(seed, cfg.deterministic)
    run_dir = Path(cfg.out) / run_name(seed, fold)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "log.jsonl"
    log_path.unlink(missing_ok=True)
    originals, padded = _load_padded(cfg)
    plan = D.make_split([s.identifier for s in originals], cfg.dataset, seed, fold=fold or 0)
    plan.save(run_dir / "split.json")
    train, val = D.select(padded, plan.train_ids), D.select(padded, plan.val_ids)
    weights = cfg.loss_weights()

    t0 = time.perf_counter()
    r1, paths = _phase1(cfg, seed, train, val, weights, run_dir, log_path)
    histories = {"backbone": r1.history}
    ckpt1 = r1.best if cfg.checkpoint == "best" else r1.final
    eval_ckpt = paths[f"phase1_{cfg.checkpoint}"]
    checksum = backbone_checksum(ckpt1)
    if cfg.variant_enum.tail:
        r2, p2 = _phase2(cfg, seed, ckpt1, train, val, weights, run_dir, log_path)
        paths.update(p2)
        histories["tail"] = r2.history
        eval_ckpt = paths[f"phase2_{cfg.checkpoint}"]
        checksum = backbone_checksum(r2.final)
    plot_training_history(histories, run_dir / "training_history.png")
    return {
        "seed": seed,
        "fold": fold,
        "dir": str(run_dir),
        "split": str(run_dir / "split.json"),
        "log": str(log_path),
        "checkpoints": {k: str(v) for k, v in paths.items()},
        "eval_checkpoint": str(eval_ckpt),
        "backbone_checksum": checksum,
        "train_seconds": time.perf_counter() - t0,
    }


def _write_manifest(cfg, runs, name="manifest.json"):
    manifest = {
        "version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "runs": runs,
        "notes": "metrics are computed on full original-size images without a field-of-view mask",
    }
    path = Path(cfg.out) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2))
    return manifest


def run_training(cfg):
    """Train every (seed, fold) combination and write ``manifest.json``."""
    jobs = [(seed, fold) for seed in cfg.seeds for fold in D.fold_indices(cfg.dataset)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(train_single, cfg.to_dict(), s, f) for s, f in jobs]
            runs = [f.result() for f in futures]
    else:
        runs = [train_single(cfg, s, f) for s, f in jobs]
    return _write_manifest(cfg, runs)


# -- evaluation --------------------------------------------------------------


class ModelPredictor:
    """Callable mapping a padded ``(H, W, 3)`` image to its final probability map."""

    def __init__(self, model):
        self.model = model.eval()

    @classmethod
    def from_checkpoint(cls, path, expected=None):
        ckpt = load_checkpoint(path)
        if expected is not None and dataclasses.replace(ckpt.config, tail_enabled=True) != dataclasses.replace(
            expected, tail_enabled=True
        ):
            raise IncompatibleCheckpointError(f"{path}: architecture {ckpt.config} does not match {expected}")
        return cls(ckpt.build_model())

    def __call__(self, image):
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
        dtype = next(self.model.parameters()).dtype
        with torch.no_grad():
            _, final = self.model(x.to(dtype))
        return final[0, 0].numpy().astype(np.float64)


def predict_sample(predictor, sample, pad_size):
    """Pad, predict, crop back; returns the probability map at original size."""
    padded = D.zero_pad(sample, pad_size)
    prob = predictor(padded.image)
    return D.crop_to_original(prob, padded.original_size, padded.pad_offsets)


def evaluate_samples(predictor, samples, pad_size, threshold=0.5, mask_dir=None):
    """Per-image metrics; also returns pooled ``(scores, truth)`` for ROC plots."""
    results, scores, truths = [], [], []
    for s in samples:
        prob = predict_sample(predictor, s, pad_size)
        m = evaluate_map(prob, s.annotation, threshold, s.identifier)
        results.append(m)
        scores.append(prob.ravel())
        truths.append(s.annotation.ravel())
        if mask_dir is not None:
            stem = s.identifier.replace("/", "_")
            save_probability_png(Path(mask_dir) / f"{stem}_prob.png", prob)
            save_mask_png(Path(mask_dir) / f"{stem}_mask.png", prob > threshold)
    return results, (np.concatenate(scores), np.concatenate(truths))


def read_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no manifest.json in {run_dir}")
    return json.loads(path.read_text())


def write_reports(out_dir, per_run, overall, curves, stderr_scale=None):
    out_dir = Path(out_dir)
    rows = [(r.label, m) for r in per_run for m in r.per_image]
    write_per_image_csv(out_dir / "per_image.csv", rows)
    write_table_csv(out_dir / "summary.csv", [overall], stderr_scale)
    records = [{"kind": "run", **_summary(r)} for r in per_run] + [{"kind": "aggregate", **_summary(overall)}]
    write_jsonl(out_dir / "metrics.jsonl", records)
    plot_roc(curves, out_dir / "roc.png")
    plot_metric_bars([overall], out_dir / "summary.png")


def _summary(report):
    d = report.to_dict()
    d.pop("per_image")
    return d


def run_evaluation(run_dir, threshold=None, which=None, data_root=None, predictor_factory=None,
                   write_masks=True):
    """Evaluate every run of a training manifest on its test split.

    ``predictor_factory(run_record, cfg)`` overrides checkpoint loading, which
    allows evaluating reference predictors through the same report path.
    """
    manifest = read_manifest(run_dir)
    values = dict(manifest["config"])
    if data_root:
        values["data_root"] = data_root
    cfg = RunConfig.from_dict(values)
    threshold = cfg.threshold if threshold is None else threshold
    which = which or cfg.checkpoint
    originals = D.load_dataset(cfg.data_root, cfg.dataset)
    out_dir = Path(run_dir) / "eval"
    per_run, curves = [], {}
    for run in manifest["runs"]:
        label = run_name(run["seed"], run["fold"])
        plan = D.SplitPlan.load(run["split"])
        if predictor_factory is not None:
            predictor = predictor_factory(run, cfg)
        else:
            phase = "phase2" if cfg.variant_enum.tail else "phase1"
            path = run["checkpoints"][f"{phase}_{which}"]
            predictor = ModelPredictor.from_checkpoint(path, cfg.model_config())
        mask_dir = out_dir / "masks" / label if write_masks else None
        images, curve = evaluate_samples(predictor, D.select(originals, plan.test_ids), cfg.pad(),
                                         threshold, mask_dir)
        per_run.append(summarize_run(images, label))
        curves[label] = curve
    mode = AggregationMode.FOLDS if cfg.dataset_name is D.DatasetName.STARE else AggregationMode.RUNS
    overall = aggregate(per_run, mode, label=cfg.variant_enum.label)
    write_reports(out_dir, per_run, overall, curves)
    return overall, per_run


def predict_image(checkpoint, image_path, out_dir, pad_size=None, dataset=None, threshold=0.5):
    """Segment one image file; writes ``<stem>_prob.png``, ``<stem>_prob.npy`` and ``<stem>_mask.png``."""
    image = D.read_image(image_path)
    h, w = image.shape[:2]
    if pad_size is None:
        pad_size = D.PADDED_SIZE[D.DatasetName.parse(dataset)] if dataset else D.ceil_to(max(h, w))
    sample = D.RetinalSample(image, np.zeros((h, w), np.uint8), Path(image_path).stem, None, (h, w))
    predictor = ModelPredictor.from_checkpoint(checkpoint)
    t0 = time.perf_counter()
    prob = predict_sample(predictor, sample, pad_size)
    seconds = time.perf_counter() - t0
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    np.save(out_dir / f"{stem}_prob.npy", prob.astype(np.float32))
    paths = {
        "probability": save_probability_png(out_dir / f"{stem}_prob.png", prob),
        "mask": save_mask_png(out_dir / f"{stem}_mask.png", prob > threshold),
    }
    return paths, seconds, prob


# -- ablation ----------------------------------------------------------------


def run_ablation(cfg, predictor_factory=None):
    """Train and evaluate the four loss/tail configurations under one seed and split.

    The full-network row trains only the tail, on top of the BC&D backbone.
    """
    seed = cfg.seeds[0]
    out = Path(cfg.out)
    originals, padded = _load_padded(cfg)
    plan = D.make_split([s.identifier for s in originals], cfg.dataset, seed)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "split.json")
    train, val = D.select(padded, plan.train_ids), D.select(padded, plan.val_ids)
    test = D.select(originals, plan.test_ids)
    _seed_everything(seed, cfg.deterministic)

    rows, reports, histories, backbones = [], [], {}, {}
    for variant in Variant:
        run_dir = out / variant.value
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "log.jsonl"
        log_path.unlink(missing_ok=True)
        weights = cfg.loss_weights(variant)
        if variant.tail:
            backbone = backbones[Variant.BCD]
            result, paths = _phase2(cfg, seed, backbone, train, val, weights, run_dir, log_path)
            ckpt_path = paths[f"phase2_{cfg.checkpoint}"]
        else:
            result, paths = _phase1(cfg, seed, train, val, weights, run_dir, log_path)
            backbones[variant] = result.best if cfg.checkpoint == "best" else result.final
            ckpt_path = paths[f"phase1_{cfg.checkpoint}"]
        histories[variant.label] = result.history
        if predictor_factory is not None:
            predictor = predictor_factory(variant, ckpt_path)
        else:
            predictor = ModelPredictor.from_checkpoint(ckpt_path)
        images, _ = evaluate_samples(predictor, test, cfg.pad(), cfg.threshold)
        report = summarize_run(images, variant.label)
        reports.append(report)
        rows.append({
            "variant": variant.value,
            "label": variant.label,
            "lambda1": weights.lambda1,
            "lambda2": weights.lambda2,
            "tail": variant.tail,
            "checkpoint": str(ckpt_path),
            "backbone_checksum": backbone_checksum(result.final if variant.tail else backbones[variant]),
            **report.values(),
        })
    write_table_csv(out / "ablation.csv", reports)
    write_jsonl(out / "ablation.jsonl", rows)
    plot_metric_bars(reports, out / "ablation.png")
    plot_training_history(histories, out / "training_history.png")
    _write_manifest(cfg, rows, "ablation_manifest.json")
    log.info("\n%s", format_table(reports))
    return rows, reports


def parse_seeds(value):
    """``"5"`` means seeds 0..4; ``"3,7"`` (any comma) lists seeds explicitly."""
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    text = str(value).strip()
    try:
        if "," in text:
            return [int(v) for v in text.split(",") if v.strip()]
        n = int(text)
    except ValueError:
        raise ConfigError(f"invalid --seeds value {value!r}") from None
    if n < 1:
        raise ConfigError("--seeds count must be positive")
    return list(range(n))

