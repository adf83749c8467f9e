"""Command-line entry point: ``sarseg <command> [--flags]``.

Every command that reports data prints exactly one JSON document on stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, TrainConfig, dump_config, load_config, preset
from .data import (DataError, SyntheticSpec, encode_image16, encode_image8, encode_mask, load_manifest,
                   load_split, minmax, read_image, synthetic_split, tile)
from .frequency import extract_low_frequency
from .trainer import CheckpointError, TrainingDiverged, load_predictor

log = logging.getLogger("sarseg")

CHECKPOINT_ENV = "SARSEG_CHECKPOINT_DIR"

EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_DIVERGED = 2, 3, 4, 5

ABLATIONS = {"no-adapters": "adapters_enabled", "no-tsi": "tsi_enabled", "no-fe": "feature_enhance_enabled"}

# class index -> RGB for colorized predictions; cycles past the end
PALETTE = [
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25), (128, 128, 128),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
]


def colorize(labels: np.ndarray) -> np.ndarray:
    pal = np.array(PALETTE, dtype=np.uint8)
    return pal[labels % len(pal)]


def emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


class Staging:
    """Collects outputs in a temp directory beside ``out`` and moves them in only on success."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out.mkdir(parents=True, exist_ok=True)
                for item in sorted(self.tmp.rglob("*")):
                    dest = self.out / item.relative_to(self.tmp)
                    if item.is_dir():
                        dest.mkdir(exist_ok=True)
                    else:
                        os.replace(item, dest)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _save_png(img, path: Path) -> None:
    """Atomic PNG write."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise ConfigError(f"--classes: num_classes must be >= 2, got {args.classes}")
    spec = SyntheticSpec.evenly_spaced(args.classes, size=args.size, looks=args.looks, n_sites=args.sites)
    entries = []
    with Staging(Path(args.out)) as tmp:
        for split, n in (("train", args.n), ("test", args.n_test)):
            for i, (image, mask) in enumerate(synthetic_split(spec, n, args.seed, split)):
                name = f"{split}_{i:05d}.png"
                encode_image16(image).save(_mkdir(tmp / "images") / name)
                encode_mask(mask).save(_mkdir(tmp / "masks") / name)
                entries.append({"image": f"images/{name}", "mask": f"masks/{name}", "split": split})
        (tmp / "manifest.json").write_text(json.dumps(entries, indent=2) + "\n")
    emit({"manifest": str(Path(args.out) / "manifest.json"), "records": len(entries)})
    return 0


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def _tiles(samples, size):
    out = []
    for image, mask in samples:
        out.extend(tile(image, mask, size, size) if image.shape != (size, size) else [(image, mask)])
    return out


def cmd_train(args) -> int:
    from .model import build_model
    from .trainer import run_dtype, train

    model_cfg, train_cfg = load_config(args.config)
    overrides = {ABLATIONS[a]: False for a in args.ablate or ()}
    if overrides:
        model_cfg = dataclasses.replace(model_cfg, **overrides).validate()
    train_overrides = {}
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    if args.max_steps is not None:
        train_overrides["max_steps"] = args.max_steps
    if train_overrides:
        train_cfg = dataclasses.replace(train_cfg, **train_overrides).validate(model_cfg)
    records = load_manifest(args.data)
    size = model_cfg.image_size
    train_set = _tiles(load_split(records, "train", train_cfg.input_normalization), size)
    test_set = _tiles(load_split(records, "test", train_cfg.input_normalization), size)
    if not train_set:
        raise DataError(f"{args.data}: no training records")
    out = Path(args.out or os.environ.get(CHECKPOINT_ENV) or train_cfg.checkpoint_dir)
    model, mask = build_model(model_cfg, seed=train_cfg.seed, dtype=run_dtype(train_cfg))
    with Staging(out) as tmp:
        (tmp / "config.json").write_text(dump_config(model_cfg, train_cfg) + "\n")
        result = train(model, mask, train_set, train_cfg, eval_set=test_set or train_set, out_dir=tmp)
        report = result.evaluations[-1]
        (tmp / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", out)
    emit(report)
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate

    expected = load_config(args.config)[0] if args.config else None
    ckpt, predictor = load_predictor(args.ckpt, expected)
    cfg = ckpt.model_config
    train_cfg = ckpt.train_config or TrainConfig()
    records = load_manifest(args.data)
    split = args.split
    samples = load_split(records, split, train_cfg.input_normalization)
    if ckpt.kind == "model":
        samples = _tiles(samples, cfg.image_size)
    if not samples:
        raise DataError(f"{args.data}: no records in split {split!r}")
    report = evaluate(predictor, samples, cfg.num_classes, train_cfg.ignore_index,
                      train_cfg.background_class, workers=args.workers, step=ckpt.step)
    emit(report.to_dict())
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    expected = load_config(args.config)[0] if args.config else None
    ckpt, predictor = load_predictor(args.ckpt, expected)
    train_cfg = ckpt.train_config or TrainConfig()
    image = _read(args.image, train_cfg.input_normalization)
    labels = predictor.predict_labels(image).astype(np.uint8)
    out = Path(args.out)
    _save_png(encode_mask(labels), out)
    written = [str(out)]
    if args.color:
        _save_png(Image.fromarray(colorize(labels)), Path(args.color))
        written.append(args.color)
    emit({"written": written, "classes": sorted(int(c) for c in np.unique(labels))})
    return 0


def cmd_params(args) -> int:
    import torch

    from .model import build_model, count_parameters
    from .trainer import Checkpoint

    if args.ckpt:
        ckpt = Checkpoint.load(args.ckpt)
        total = sum(int(v.size) for v in ckpt.params.values())
        trainable = sum(int(v.size) for k, v in ckpt.params.items() if ckpt.freeze_mask[k])
        name = args.ckpt
    else:
        if args.config:
            cfg = load_config(args.config)[0]
            name = args.config
        else:
            cfg = preset(args.preset, **({"num_classes": args.num_classes} if args.num_classes else {}))
            name = args.preset
        overrides = {ABLATIONS[a]: False for a in args.ablate or ()}
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides).validate()
        # shapes only; no memory is allocated on the meta device
        with torch.device("meta"):
            model, mask = build_model(cfg, seed=args.seed, dtype=torch.float32)
        total, trainable = count_parameters(model, mask)
    emit({"source": name, "total": total, "trainable": trainable, "frozen": total - trainable,
          "total_millions": round(total / 1e6, 4), "trainable_millions": round(trainable / 1e6, 4)})
    return 0


def _read(path, normalization="scale"):
    try:
        return read_image(path, normalization)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def cmd_extract_lf(args) -> int:
    image = _read(args.image)
    lf = extract_low_frequency(image, args.fraction)
    out = Path(args.out)
    _save_png(encode_image8(minmax(lf)), out)
    emit({"written": [str(out)], "fraction": args.fraction,
          "input_variance": float(image.var()), "output_variance": float(lf.var())})
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sarseg", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic speckled dataset and its manifest", allow_abbrev=False)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10, help="training pairs")
    g.add_argument("--n-test", type=int, default=0, help="test pairs (disjoint seeds)")
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--looks", type=int, default=4)
    g.add_argument("--sites", type=int, default=12)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config and manifest", allow_abbrev=False)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", help=f"output directory (default: ${CHECKPOINT_ENV}, then train.checkpoint_dir)")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split", allow_abbrev=False)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="reject the checkpoint unless it matches this config")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write a label PNG for one image", allow_abbrev=False)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--color", help="optional colorized PNG path")
    r.add_argument("--config")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("params", help="total/trainable parameter counts", allow_abbrev=False)
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--ckpt")
    src.add_argument("--preset")
    c.add_argument("--num-classes", type=int)
    c.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_params)

    x = sub.add_parser("extract-lf", help="low-frequency image as an 8-bit PNG", allow_abbrev=False)
    x.add_argument("--image", required=True)
    x.add_argument("--fraction", type=float, default=0.25)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract_lf)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
