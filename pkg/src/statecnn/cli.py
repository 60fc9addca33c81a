"""``statecnn`` command line: prepare, train, evaluate, predict, inspect.

Exit codes: 0 success, 2 input/config error, 3 state error, 4 internal error.
Lines starting with ``# time:`` carry wall-clock timings and are the only
non-deterministic output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, data, train
from .config import SEED_ENV, RunConfig
from .errors import ConfigError, InputError, StateError
from .model import build, check_unfreezable, make_backbone, summarize

log = logging.getLogger("statecnn")

EXIT_OK, EXIT_INPUT, EXIT_STATE, EXIT_INTERNAL = 0, 2, 3, 4
MANIFEST_NAME = "split.json"


def _default_seed() -> int:
    try:
        return int(os.environ.get(SEED_ENV, "0"))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer") from None


def cmd_prepare(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    root = Path(args.data)
    if not root.exists():
        raise InputError(f"dataset root {root} does not exist")
    ds = data.scan_directory(root)
    tr, va = data.partition(ds, args.ratio, train.derive_seed(seed, "partition"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST_NAME
    data.write_manifest(path, tr, va, seed, args.ratio)
    print(f"classes: {len(ds.classes)}  samples: {len(ds)}  skipped: {ds.skipped}")
    width = max(len(c) for c in ds.classes)
    for name, a, b in zip(ds.classes, tr.class_counts(), va.class_counts()):
        print(f"  {name:<{width}}  train {a:5d}  val {b:5d}")
    print(f"manifest: {path}")
    return EXIT_OK


def _load_splits(cfg: RunConfig):
    ds_cfg = cfg.dataset
    if ds_cfg.get("manifest"):
        return data.read_manifest(ds_cfg["manifest"], ds_cfg.get("root"))
    if ds_cfg.get("root"):
        ds = data.scan_directory(ds_cfg["root"])
        return data.partition(ds, ds_cfg["ratio"], train.derive_seed(cfg.master_seed, "partition"))
    raise ConfigError("dataset.manifest or dataset.root must be set")


def _build_model(cfg: RunConfig, classes: list[str]):
    m = cfg.model
    if len(classes) != m["classes"]:
        raise ConfigError(f"model.classes is {m['classes']} but the dataset has {len(classes)} classes")
    model = build(classes, make_backbone(m["backbone"]), m["dropout"],
                  train.derive_seed(cfg.master_seed, "init"), cfg.dataset["image_side"], m["conv_blocks"],
                  bn_epsilon=m["bn_epsilon"], bn_momentum=m["bn_momentum"])
    p = cfg.preprocess()
    model.config["preprocess"] = {"side": p.side, "rescale": p.rescale, "standardize": p.standardize}
    return model


def _history_from_checkpoints(out_dir: Path, stage: int) -> list[train.EpochMetrics]:
    history = []
    for path in sorted(out_dir.glob(f"stage{stage}_epoch*.ckpt")):
        manifest, _ = checkpoint.read(path)
        history.append(train.EpochMetrics(**manifest["metrics"], checkpoint_path=str(path)))
    return history


def _metric_line(m: train.EpochMetrics) -> str:
    return (f"stage {m.stage} epoch {m.epoch:03d} train_loss={m.train_loss:.6f} train_acc={m.train_acc:.6f} "
            f"val_loss={m.val_loss:.6f} val_acc={m.val_acc:.6f}")


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = RunConfig.load(args.config, args.preset)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    tcfg = cfg.train_config()
    out = Path(cfg.output_dir)
    tr, va = _load_splits(cfg)
    model = _build_model(cfg, tr.classes)
    if args.stage in ("2", "all") and tcfg.stage2 is not None:
        check_unfreezable(model, tcfg.stage2.unfreeze_top_k)

    def on_epoch(m):
        print(_metric_line(m), flush=True)

    results = []
    if args.stage in ("1", "all"):
        results.append(train.run_stage1(tcfg, model, tr, va, out, on_epoch))
    if args.stage in ("2", "all") and tcfg.stage2 is not None:
        s1 = results[0] if results else None
        if s1 is None:
            hist = _history_from_checkpoints(out, 1)
            if not hist:
                raise StateError(f"no stage-1 checkpoints in {out}; run stage 1 first")
            s1 = train.StageResult(hist, train.select_best(hist))
            results.append(s1)
        start = train.stage1_start_point(s1, tcfg.stage2.init_from)
        results.append(train.run_stage2(tcfg, model, tr, va, out, start, on_epoch))
    elif args.stage == "2":
        raise ConfigError("the configuration has no stage2 section")
    if tcfg.keep_checkpoints == "best":
        train.prune_checkpoints(results)

    history = [m for r in results for m in r.history]
    paths = train.export_metrics(history, out)
    best = results[-1].best
    print(f"selected: {best.checkpoint_path}")
    print("best: " + _metric_line(best))
    print(f"metrics: {paths['csv']}")
    print(f"# time: {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


def _preprocess_from(manifest: dict) -> data.Preprocess:
    p = manifest["model"].get("preprocess") or {}
    return data.Preprocess(p.get("side", manifest["model"]["input_side"]),
                           p.get("rescale", data.RESCALE), p.get("standardize", False))


def _eval_data(source: str, split: str) -> data.Dataset:
    path = Path(source)
    if path.is_dir():
        return data.scan_directory(path)
    if not path.is_file():
        raise InputError(f"--data {source} is neither a manifest nor a directory")
    tr, va = data.read_manifest(path)
    if split == "train":
        return tr
    if split == "all":
        return data.Dataset(tr.classes, tr.samples + va.samples, tr.root)
    return va


def format_confusion(confusion: np.ndarray, classes: list[str]) -> str:
    width = max(max(len(c) for c in classes), len(str(int(confusion.max()))), 4)
    lines = [" " * width + " " + " ".join(f"{c:>{width}}" for c in classes)]
    for name, row in zip(classes, confusion):
        lines.append(f"{name:>{width}} " + " ".join(f"{int(v):>{width}d}" for v in row))
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    model, manifest = checkpoint.load_model(args.checkpoint)
    ds = _eval_data(args.data, args.split)
    if ds.classes != model.classes:
        raise InputError(f"checkpoint classes {model.classes} do not match data classes {ds.classes}")
    result = train.evaluate(model, ds, args.batch_size, _preprocess_from(manifest))
    print(f"samples: {len(ds)}")
    print(f"loss: {result.loss:.6f}")
    print(f"accuracy: {result.accuracy:.6f}")
    print("confusion (rows: true, columns: predicted):")
    print(format_confusion(result.confusion, model.classes))
    if args.json:
        doc = {"loss": result.loss, "accuracy": result.accuracy, "classes": model.classes,
               "confusion": result.confusion.tolist()}
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"# time: {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, manifest = checkpoint.load_model(args.checkpoint)
    img = data.decode_image(args.image)
    x = _preprocess_from(manifest)(img)[None]
    probs = model.forward(x)[0].astype(np.float64)
    order = sorted(range(len(probs)), key=lambda k: (-probs[k], k))
    top = order[0]
    print(f"predicted: {model.classes[top]} {probs[top]:.6f}")
    width = max(len(c) for c in model.classes)
    for k in order:
        print(f"  {model.classes[k]:<{width}}  {probs[k]:.6f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = RunConfig.load(args.config, args.preset)
    classes = [f"class_{i}" for i in range(cfg.model["classes"])]
    model = _build_model(cfg, classes)
    print(summarize(model).render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statecnn", description="Object-state CNN classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a class-per-directory tree and write a split manifest")
    p.add_argument("--data", required=True, help="dataset root: <root>/<class>/<images>")
    p.add_argument("--out", required=True, help="directory for split.json")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    p.add_argument("--ratio", type=float, default=0.8, help="training fraction per class")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the two-stage training protocol")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--preset", help="named preset to start from")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--output-dir", help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="loss, accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split manifest or dataset directory")
    p.add_argument("--split", choices=("train", "val", "all"), default="val",
                   help="which manifest split to use (default val)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--json", help="also write metrics to this JSON file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="print the model summary")
    p.add_argument("--config", help="run configuration JSON (defaults if omitted)")
    p.add_argument("--preset", help="named preset to start from")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
