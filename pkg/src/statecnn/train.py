"""Two-stage transfer-learning protocol.

Stage 1 freezes the whole backbone and trains the head (RMSprop by default).
Stage 2 reloads the selected stage-1 checkpoint, unfreezes the top ``k``
backbone units and continues with momentum SGD. Each epoch writes one
checkpoint; the best epoch is chosen by lowest validation loss, then highest
validation accuracy, then earliest epoch.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable
from xml.sax.saxutils import escape

import numpy as np

from . import checkpoint
from .data import AugmentConfig, Dataset, Preprocess, batches
from .errors import ConfigError, InputError, StateError
from .model import StateClassifier, check_unfreezable, set_trainable
from .optim import categorical_crossentropy, make_optimizer

log = logging.getLogger(__name__)

_SEED_PURPOSES = {"partition": 1, "init": 2, "shuffle": 3, "augment": 4, "dropout": 5}


def derive_seed(master: int, purpose: str, *extra: int) -> int:
    """Independent 32-bit seed for one consumer of the master seed."""
    ss = np.random.SeedSequence([master, _SEED_PURPOSES[purpose], *extra])
    return int(ss.generate_state(1)[0])


@dataclass
class StageConfig:
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    epochs: int = 100
    momentum: float | None = None  # sgd only
    decay: float | None = None  # sgd only
    unfreeze_top_k: int = 0
    init_from: str = "best"  # stage 2: which stage-1 checkpoint to start from

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.unfreeze_top_k < 0:
            raise ConfigError("unfreeze_top_k must be >= 0")
        if self.init_from not in ("best", "last"):
            raise ConfigError(f"init_from must be 'best' or 'last', got {self.init_from!r}")
        if self.optimizer != "sgd" and (self.momentum is not None or self.decay is not None):
            raise ConfigError("momentum and decay apply to the sgd optimizer only")

    def make_optimizer(self):
        hyper = {"lr": self.lr}
        if self.optimizer == "sgd":
            hyper["momentum"] = 0.9 if self.momentum is None else self.momentum
            hyper["decay"] = 1e-6 if self.decay is None else self.decay
        return make_optimizer(self.optimizer, **hyper)


def default_stage1() -> StageConfig:
    return StageConfig("rmsprop", 1e-3, 100)


def default_stage2() -> StageConfig:
    return StageConfig("sgd", 1e-4, 100, momentum=0.9, decay=1e-6, unfreeze_top_k=4)


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=default_stage1)
    stage2: StageConfig | None = field(default_factory=default_stage2)
    batch_size: int = 32
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    preprocess: Preprocess = field(default_factory=Preprocess)
    keep_checkpoints: str = "all"  # or "best"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.keep_checkpoints not in ("all", "best"):
            raise ConfigError("keep_checkpoints must be 'all' or 'best'")


@dataclass
class EpochMetrics:
    stage: int
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    checkpoint_path: str = ""


@dataclass
class StageResult:
    history: list[EpochMetrics]
    best: EpochMetrics

    @property
    def best_path(self) -> str:
        return self.best.checkpoint_path


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: np.ndarray  # (K, K): rows true class, columns predicted
    predictions: np.ndarray


def selection_key(m: EpochMetrics):
    return (m.val_loss, -m.val_acc, m.epoch)


def select_best(history: list[EpochMetrics]) -> EpochMetrics:
    """Lowest validation loss; ties broken by higher accuracy, then earlier epoch."""
    if not history:
        raise InputError("cannot select from an empty history")
    return min(history, key=selection_key)


def evaluate(model: StateClassifier, data: Dataset, batch_size: int = 32,
             preprocess: Preprocess | None = None) -> EvalResult:
    """Inference-mode loss, accuracy and confusion matrix over ``data``."""
    if not len(data):
        raise InputError("cannot evaluate on an empty dataset")
    if len(data.classes) != model.num_classes:
        raise ConfigError(f"dataset has {len(data.classes)} classes, model has {model.num_classes}")
    k = model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    preds = np.empty(len(data), dtype=np.int64)
    loss_sum = 0.0
    for batch in batches(data, batch_size, shuffle_seed=None, preprocess=preprocess):
        probs = model.forward(batch.images, training=False)
        loss, _ = categorical_crossentropy(probs, batch.labels_onehot)
        loss_sum += loss * len(batch.indices)
        p = probs.argmax(axis=1)
        preds[batch.indices] = p
        np.add.at(confusion, (batch.labels, p), 1)
    n = len(data)
    return EvalResult(loss_sum / n, float(np.trace(confusion)) / n, confusion, preds)


def checkpoint_name(stage: int, epoch: int) -> str:
    return f"stage{stage}_epoch{epoch:03d}.ckpt"


EpochCallback = Callable[[EpochMetrics], None]


def _run_stage(stage: int, scfg: StageConfig, cfg: TrainConfig, model: StateClassifier,
               train: Dataset, val: Dataset, out_dir, on_epoch: EpochCallback | None) -> StageResult:
    if len(train.classes) != model.num_classes or len(val.classes) != model.num_classes:
        raise ConfigError(f"data has {len(train.classes)} classes but the model predicts {model.num_classes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_trainable(model, scfg.unfreeze_top_k or "freeze_backbone_all")
    # fresh optimizer, dropout stream and shuffle/augment seeds per stage
    opt = scfg.make_optimizer()
    for d in model.dropout_layers:
        d.seed, d.step = derive_seed(cfg.seed, "dropout", stage), 0
    shuffle_seed = derive_seed(cfg.seed, "shuffle", stage)
    aug = cfg.augment
    if aug is not None:
        aug = replace(aug, seed=derive_seed(aug.seed, "augment", stage))
    params = model.trainable_params

    history = []
    for epoch in range(1, scfg.epochs + 1):
        loss_sum, correct, seen = 0.0, 0, 0
        for batch in batches(train, cfg.batch_size, shuffle_seed, epoch, cfg.preprocess, aug):
            probs = model.forward(batch.images, training=True)
            loss, dprobs = categorical_crossentropy(probs, batch.labels_onehot)
            model.backward(dprobs)
            opt.step(params)
            b = len(batch.indices)
            loss_sum += loss * b
            correct += int((probs.argmax(axis=1) == batch.labels).sum())
            seen += b
        ev = evaluate(model, val, cfg.batch_size, cfg.preprocess)
        path = out_dir / checkpoint_name(stage, epoch)
        m = EpochMetrics(stage, epoch, loss_sum / seen, correct / seen, ev.loss, ev.accuracy, str(path))
        record = {k: v for k, v in asdict(m).items() if k != "checkpoint_path"}
        checkpoint.save(model, path, epoch=epoch, stage=stage, metrics=record)
        history.append(m)
        log.info("stage %d epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 stage, epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc)
        if on_epoch:
            on_epoch(m)
    return StageResult(history, select_best(history))


def run_stage1(cfg: TrainConfig, model: StateClassifier, train: Dataset, val: Dataset, out_dir,
               on_epoch: EpochCallback | None = None) -> StageResult:
    """Train the head with the backbone frozen."""
    return _run_stage(1, cfg.stage1, cfg, model, train, val, out_dir, on_epoch)


def run_stage2(cfg: TrainConfig, model: StateClassifier, train: Dataset, val: Dataset, out_dir,
               stage1_checkpoint, on_epoch: EpochCallback | None = None) -> StageResult:
    """Fine-tune from a stage-1 checkpoint with the top backbone units unfrozen."""
    if cfg.stage2 is None:
        raise ConfigError("no stage-2 configuration")
    if not stage1_checkpoint or not Path(stage1_checkpoint).is_file():
        raise StateError(f"stage-1 checkpoint {stage1_checkpoint!r} not found; run stage 1 first")
    checkpoint.load(stage1_checkpoint, model)
    return _run_stage(2, cfg.stage2, cfg, model, train, val, out_dir, on_epoch)


def stage1_start_point(result: StageResult, init_from: str) -> str:
    return result.best_path if init_from == "best" else result.history[-1].checkpoint_path


def run_two_stage(cfg: TrainConfig, model: StateClassifier, train: Dataset, val: Dataset, out_dir,
                  on_epoch: EpochCallback | None = None) -> list[StageResult]:
    if cfg.stage2 is not None:
        check_unfreezable(model, cfg.stage2.unfreeze_top_k)
    results = [run_stage1(cfg, model, train, val, out_dir, on_epoch)]
    if cfg.stage2 is not None:
        start = stage1_start_point(results[0], cfg.stage2.init_from)
        results.append(run_stage2(cfg, model, train, val, out_dir, start, on_epoch))
    if cfg.keep_checkpoints == "best":
        prune_checkpoints(results)
    return results


def prune_checkpoints(results: list[StageResult]) -> None:
    keep = {r.best_path for r in results}
    for r in results:
        for m in r.history:
            if m.checkpoint_path not in keep:
                Path(m.checkpoint_path).unlink(missing_ok=True)


CSV_FIELDS = ("epoch", "stage", "train_loss", "train_acc", "val_loss", "val_acc")


def export_metrics(history: list[EpochMetrics], out_dir) -> dict[str, Path]:
    """Write ``metrics.csv`` plus ``accuracy.svg`` and ``loss.svg`` curves."""
    if not history:
        raise InputError("nothing to export: empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "metrics.csv", "accuracy": out_dir / "accuracy.svg",
             "loss": out_dir / "loss.svg"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for m in history:
            w.writerow([m.epoch, m.stage] + [f"{getattr(m, k):.6f}" for k in CSV_FIELDS[2:]])
    paths["accuracy"].write_text(_line_chart(history, "acc", "Accuracy"))
    paths["loss"].write_text(_line_chart(history, "loss", "Loss"))
    return paths


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        return [EpochMetrics(int(r["stage"]), int(r["epoch"]), float(r["train_loss"]),
                             float(r["train_acc"]), float(r["val_loss"]), float(r["val_acc"]))
                for r in csv.DictReader(fh)]


_COLOURS = {(1, "train"): "#1f77b4", (1, "val"): "#ff7f0e", (2, "train"): "#2ca02c", (2, "val"): "#d62728"}


def _line_chart(history: list[EpochMetrics], metric: str, title: str,
                width: int = 640, height: int = 400, margin: int = 50) -> str:
    ordered = sorted(history, key=lambda m: (m.stage, m.epoch))
    xs = {id(m): i + 1 for i, m in enumerate(ordered)}
    values = [getattr(m, f"{split}_{metric}") for m in ordered for split in ("train", "val")]
    ymax = max(max(values), 1e-12)
    xmax = max(len(ordered), 2)

    def point(m, v):
        x = margin + (xs[id(m)] - 1) / (xmax - 1) * (width - 2 * margin)
        y = height - margin - v / ymax * (height - 2 * margin)
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2}" y="{margin / 2}" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">epoch</text>',
        f'<text x="5" y="{margin}" font-size="10">{ymax:.3g}</text>',
    ]
    legend_y = margin
    for stage in sorted({m.stage for m in ordered}):
        rows = [m for m in ordered if m.stage == stage]
        for split in ("train", "val"):
            colour = _COLOURS.get((stage, split), "black")
            label = f"stage {stage} {'training' if split == 'train' else 'validation'}"
            pts = " ".join(point(m, getattr(m, f"{split}_{metric}")) for m in rows)
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                         f'points="{pts}"><title>{escape(label)}</title></polyline>')
            parts.append(f'<text x="{width - margin - 140}" y="{legend_y}" font-size="11" '
                         f'fill="{colour}">{escape(label)}</text>')
            legend_y += 14
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
