"""Training loop (AdamW + cosine schedule), evaluation and bit-exact checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, fingerprint, parse_config, to_dict
from .model import SegmentationModel, apply_freeze_mask, build_model, predict
from .objectives import ConfusionMatrix, LossSpec, accumulate, metrics_report, weighted_loss

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + (lr0 - lr_min) * (1 + math.cos(math.pi * step / total_steps)) / 2


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    freeze_mask: dict[str, bool]
    train_config: Optional[TrainConfig] = None
    step: int = 0
    total_steps: int = 0
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    rng_state: Optional[np.ndarray] = None
    kind: str = "model"
    lookup: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.model_config)

    def save(self, path) -> Path:
        """Write ``<path>.npz`` (arrays) and ``<path>.json`` (metadata); returns the .npz path."""
        path = Path(path)
        base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
        arrays = {f"param/{k}": _le(v) for k, v in self.params.items()}
        for name, state in self.optimizer.items():
            for key, value in state.items():
                arrays[f"optim/{name}/{key}"] = _le(value)
        for digest, mask in self.lookup.items():
            arrays[f"lookup/{digest}"] = _le(mask)
        if self.rng_state is not None:
            arrays["rng_state"] = _le(self.rng_state)
        meta = {
            "kind": self.kind,
            "fingerprint": self.fingerprint,
            "model": to_dict(self.model_config),
            "train": to_dict(self.train_config) if self.train_config else None,
            "freeze_mask": self.freeze_mask,
            "step": self.step,
            "total_steps": self.total_steps,
            "dtypes": {k: str(v.dtype) for k, v in arrays.items()},
        }
        npz = base.with_name(base.name + ".npz")
        _atomic_write(npz, lambda f: np.savez(f, **arrays))
        _atomic_write(base.with_name(base.name + ".json"),
                      lambda f: f.write(json.dumps(meta, indent=2, sort_keys=True).encode()))
        return npz

    @classmethod
    def load(cls, path, expected: Optional[ModelConfig] = None) -> "Checkpoint":
        path = Path(path)
        base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
        npz, meta_path = base.with_name(base.name + ".npz"), base.with_name(base.name + ".json")
        for p in (npz, meta_path):
            if not p.is_file():
                raise CheckpointError(f"checkpoint file missing: {p}")
        meta = json.loads(meta_path.read_text())
        model_cfg, _ = parse_config({"model": meta["model"]})
        if fingerprint(model_cfg) != meta["fingerprint"]:
            raise CheckpointError(f"{meta_path}: stored fingerprint does not match its config")
        if expected is not None and fingerprint(expected) != meta["fingerprint"]:
            raise CheckpointError(f"{meta_path}: checkpoint was built for a different model config")
        train_cfg = parse_config({"model": meta["model"], "train": meta["train"]})[1] if meta["train"] else None
        params, optim, lookup, rng = {}, {}, {}, None
        with np.load(npz) as arrays:
            for key in arrays.files:
                value = arrays[key]
                if key.startswith("param/"):
                    params[key[6:]] = value
                elif key.startswith("optim/"):
                    name, slot = key[6:].rsplit("/", 1)
                    optim.setdefault(name, {})[slot] = value
                elif key.startswith("lookup/"):
                    lookup[key[7:]] = value
                elif key == "rng_state":
                    rng = value
        return cls(model_cfg, params, {k: bool(v) for k, v in meta["freeze_mask"].items()}, train_cfg,
                   meta["step"], meta.get("total_steps", 0), optim, rng, meta["kind"], lookup)

    def to_model(self, device=None) -> SegmentationModel:
        if self.kind != "model":
            raise CheckpointError(f"checkpoint of kind {self.kind!r} holds no network")
        dtype = torch.from_numpy(next(iter(self.params.values()))).dtype
        model, _ = build_model(self.model_config, dtype=dtype, device=device)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        missing = set(dict(model.named_parameters())) ^ set(state)
        if missing:
            raise CheckpointError(f"parameter names differ from the model: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(state[name])
        apply_freeze_mask(model, self.freeze_mask)
        return model


def _le(a) -> np.ndarray:
    a = np.asarray(a, order="C")  # ascontiguousarray would turn 0-d into shape (1,)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _atomic_write(path: Path, writer: Callable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def snapshot(model: SegmentationModel, mask: dict[str, bool], optimizer=None, step=0, total_steps=0,
             train_cfg: Optional[TrainConfig] = None) -> Checkpoint:
    params = {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
    optim = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            optim[names[id(p)]] = {k: (v.detach().cpu().numpy().copy() if torch.is_tensor(v) else np.asarray(v))
                                   for k, v in state.items()}
    return Checkpoint(model.cfg, params, dict(mask), train_cfg, step, total_steps, optim,
                      torch.random.get_rng_state().numpy().copy())


class LookupPredictor:
    """Predicts stored masks for images it has seen; a perfect-prediction stub for evaluation checks."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = table

    @staticmethod
    def digest(image) -> str:
        q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 65535).astype("<u2")
        return hashlib.sha256(q.tobytes() + str(q.shape).encode()).hexdigest()

    @classmethod
    def from_samples(cls, samples) -> "LookupPredictor":
        return cls({cls.digest(img): np.asarray(mask, dtype=np.int64) for img, mask in samples})

    def predict_labels(self, image) -> np.ndarray:
        try:
            return self.table[self.digest(image)]
        except KeyError:
            raise KeyError("image not in lookup table") from None

    def to_checkpoint(self, cfg: ModelConfig) -> Checkpoint:
        return Checkpoint(cfg, {}, {}, kind="lookup", lookup=dict(self.table))


class ModelPredictor:
    def __init__(self, model: SegmentationModel):
        self.model = model.eval()
        self.dtype = next(model.parameters()).dtype

    def predict_labels(self, image) -> np.ndarray:
        x = torch.as_tensor(np.asarray(image), dtype=self.dtype)
        return predict(self.model, x)[1].numpy()


def load_predictor(path, expected: Optional[ModelConfig] = None):
    ckpt = Checkpoint.load(path, expected)
    if ckpt.kind == "lookup":
        return ckpt, LookupPredictor(ckpt.lookup)
    return ckpt, ModelPredictor(ckpt.to_model())


# ---------------------------------------------------------------- evaluation

def confusion(predictor, dataset, k: int, ignore_index: int = 255, background=None) -> ConfusionMatrix:
    if isinstance(predictor, SegmentationModel):
        predictor = ModelPredictor(predictor)
    cm = ConfusionMatrix(k)
    exclude = () if background is None else (background,)
    for image, mask in dataset:
        cm = accumulate(predictor.predict_labels(image), mask, k, ignore_index, cm, exclude)
    return cm


def evaluate(predictor, dataset: Sequence, k: int, ignore_index: int = 255, background=None,
             workers: int = 1, step: int = 0):
    """Metrics over ``dataset`` (pairs of image, mask). ``workers > 1`` shards the set and merges counts."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    start = time.perf_counter()
    if workers > 1:
        shards = [dataset[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda s: confusion(predictor, s, k, ignore_index, background), shards))
        cm = sum(parts[1:], parts[0])
    else:
        cm = confusion(predictor, dataset, k, ignore_index, background)
    if cm.total == 0:
        raise ValueError("no labelled pixels to evaluate")
    return metrics_report(cm, background, step, time.perf_counter() - start)


# ---------------------------------------------------------------- training

def downsample_labels(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resample sampling each output cell at its center."""
    h, w = mask.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[np.ix_(rows, cols)]


def total_steps_for(cfg: TrainConfig, n_samples: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * math.ceil(n_samples / cfg.batch_size)


def make_optimizer(model, cfg: TrainConfig):
    params = [p for _, p in model.named_parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.initial_lr, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay, foreach=False)


def restore_optimizer(optimizer, model, state: dict[str, dict[str, np.ndarray]]) -> None:
    for name, p in model.named_parameters():
        if name in state:
            optimizer.state[p] = {k: torch.from_numpy(v.copy()) for k, v in state[name].items()}


class _Order:
    """Per-epoch shuffles derived from (seed, epoch) so any step can be resumed statelessly."""

    def __init__(self, seed, n):
        self.seed, self.n, self.cache = seed, n, {}

    def __call__(self, pos):
        epoch = pos // self.n
        if epoch not in self.cache:
            self.cache = {epoch: np.random.default_rng([self.seed, epoch]).permutation(self.n)}
        return int(self.cache[epoch][pos % self.n])


@dataclass
class TrainResult:
    model: SegmentationModel
    loss_log: list[dict]
    checkpoints: list[Path]
    evaluations: list[dict]
    final: Checkpoint


def train(model: SegmentationModel, freeze_mask: dict[str, bool], dataset: Sequence, cfg: TrainConfig, *,
          resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None, eval_set: Sequence = (),
          out_dir=None, on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize the trainable parameters of ``model`` in place.

    ``dataset`` holds (image, mask) numpy pairs at the model's image size. ``resume`` continues
    from a checkpoint taken by this function; ``stop_at`` ends the run early at that step count
    without changing the schedule.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    apply_freeze_mask(model, freeze_mask)
    mcfg = model.cfg
    dtype = next(model.parameters()).dtype
    images = torch.stack([torch.as_tensor(np.asarray(img), dtype=dtype) for img, _ in dataset])
    labels = torch.stack([torch.as_tensor(downsample_labels(np.asarray(m), mcfg.mask_size))
                          for _, m in dataset])
    spec = LossSpec(cfg.weights_for(mcfg.num_classes), cfg.ignore_index, cfg.loss)

    optimizer = make_optimizer(model, cfg)
    total = total_steps_for(cfg, len(dataset))
    step = 0
    if resume is not None:
        if resume.fingerprint != fingerprint(mcfg):
            raise CheckpointError("resume checkpoint was built for a different model config")
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(resume.params[name]))
        restore_optimizer(optimizer, model, resume.optimizer)
        if resume.rng_state is not None:
            torch.random.set_rng_state(torch.from_numpy(resume.rng_state.copy()))
        step = resume.step
    end = total if stop_at is None else min(stop_at, total)
    order = _Order(cfg.seed, len(dataset))
    out_dir = Path(out_dir) if out_dir else None
    log_file = (out_dir / "loss_log.jsonl").open("a") if out_dir else None
    loss_log, ckpts, evals = [], [], []
    model.train()
    try:
        while step < end:
            lr = cosine_lr(step, total, cfg.initial_lr, cfg.min_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = [order(step * cfg.batch_size + j) for j in range(cfg.batch_size)]
            optimizer.zero_grad(set_to_none=True)
            logits = model(images[idx])[:, 0]
            loss = weighted_loss(logits, labels[idx], spec)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            loss.backward()
            optimizer.step()
            entry = {"step": step, "lr": lr, "loss": value}
            step += 1
            loss_log.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
            if on_step:
                on_step(entry)
            if cfg.eval_interval and eval_set and step % cfg.eval_interval == 0 and step < end:
                evals.append(_eval(model, eval_set, mcfg, cfg, step))
            if out_dir and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0 and step < end:
                ckpts.append(snapshot(model, freeze_mask, optimizer, step, total, cfg).save(out_dir / f"step_{step:06d}"))
    finally:
        if log_file:
            log_file.close()
    final = snapshot(model, freeze_mask, optimizer, step, total, cfg)
    if out_dir:
        ckpts.append(final.save(out_dir / "final"))
    if eval_set:
        evals.append(_eval(model, eval_set, mcfg, cfg, step))
    return TrainResult(model, loss_log, ckpts, evals, final)


def _eval(model, eval_set, mcfg, cfg, step):
    report = evaluate(model, eval_set, mcfg.num_classes, cfg.ignore_index, cfg.background_class, step=step)
    model.train()
    log.info("step %d: mIoU %.4f OA %.4f", step, report.miou, report.oa)
    return report.to_dict()


def run_dtype(cfg: TrainConfig) -> torch.dtype:
    return DTYPES[cfg.dtype]
