"""Training loops for pretraining, both progressive stages and the two baselines."""
from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netspec as N
from . import tensor as T
from .errors import DivergenceError, ShapeError, UsageError, ValidationError
from .folds import RunPlan, check_no_leakage
from .seeding import derive_seed
from .slides import PatchRecord, load_patch_array, read_manifest

log = logging.getLogger(__name__)

BASELINE_KINDS = ("plain_highres", "stage2_random")

# fixed input standardization: pixel values in [0, 1] -> roughly [-2, 2]
INPUT_CENTER = 0.5
INPUT_SCALE = 4.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_at: float = 2 / 3
    lr_decay_factor: float = 0.1
    seed: int = 0
    level: int = 4
    patches_per_slide: int = 0  # 0 = every patch each epoch
    weighted_sampling: bool = False
    freeze_retained: bool = False
    select: str = "best_val"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError(f"epochs and batch_size must be positive: {self}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.select not in ("best_val", "last"):
            raise ValidationError(f"select must be 'best_val' or 'last', got {self.select!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay_factor if epoch >= round(self.lr_decay_at * self.epochs) else 1.0)

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class PatchPrediction:
    slide_id: str
    x: int
    y: int
    probs: np.ndarray
    label: int

    def to_json(self) -> str:
        probs = ", ".join(f"{float(p):.9g}" for p in self.probs)
        return (f'{{"slide_id": {json.dumps(self.slide_id)}, "x": {self.x}, "y": {self.y}, '
                f'"probs": [{probs}], "label": {self.label}}}')

    @classmethod
    def from_json(cls, line: str) -> "PatchPrediction":
        d = json.loads(line)
        return cls(d["slide_id"], int(d["x"]), int(d["y"]),
                   np.array(d["probs"], dtype=np.float32), int(d["label"]))


def write_predictions(preds: Sequence[PatchPrediction], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(p.to_json() + "\n" for p in preds), encoding="utf-8")
    return path


def read_predictions(path) -> list[PatchPrediction]:
    with open(path, encoding="utf-8") as fh:
        return [PatchPrediction.from_json(line) for line in fh if line.strip()]


class PatchDataset:
    """Manifest records plus lazily decoded pixel arrays, one per level."""

    def __init__(self, records: Sequence[PatchRecord], root):
        self.records = list(records)
        self.root = Path(root)
        self._arrays: dict[int, np.ndarray] = {}

    @classmethod
    def from_manifest(cls, path) -> "PatchDataset":
        return cls(read_manifest(path), Path(path).parent)

    def __len__(self) -> int:
        return len(self.records)

    def array(self, level: int) -> np.ndarray:
        if level not in self._arrays:
            self._arrays[level] = load_patch_array(self.records, level, self.root)
        return self._arrays[level]

    def inputs(self, level: int) -> np.ndarray:
        """Standardized network inputs at ``level``."""
        key = -level
        if key not in self._arrays:
            self._arrays[key] = (self.array(level) - np.float32(INPUT_CENTER)) * np.float32(INPUT_SCALE)
        return self._arrays[key]

    def side(self, level: int) -> int:
        return self.array(level).shape[-1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_label for r in self.records], dtype=np.int64)

    def indices(self, patients) -> np.ndarray:
        patients = set(patients)
        return np.array([i for i, r in enumerate(self.records) if r.patient_id in patients], dtype=np.int64)

    def slide_labels(self) -> dict:
        return {r.slide_id: r.class_label for r in self.records}


def _check_level(model: N.Model, data: PatchDataset, level: int) -> None:
    side = data.side(level)
    if side != model.spec.input_side:
        raise ShapeError(f"level {level} patches are {side}px but the model expects "
                         f"{model.spec.input_side}px input")


def _epoch_order(rng, data: PatchDataset, train_idx: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    idx = train_idx
    if cfg.patches_per_slide:
        by_slide: dict[str, list[int]] = {}
        for i in train_idx:
            by_slide.setdefault(data.records[i].slide_id, []).append(int(i))
        picked = []
        for sid in sorted(by_slide):
            members = np.array(by_slide[sid])
            k = min(cfg.patches_per_slide, len(members))
            picked.append(np.sort(rng.choice(members, size=k, replace=False)))
        idx = np.concatenate(picked)
    if cfg.weighted_sampling:
        labels = data.labels[idx]
        freq = np.bincount(labels)
        w = 1.0 / freq[labels]
        return rng.choice(idx, size=len(idx), replace=True, p=w / w.sum())
    return rng.permutation(idx)


def accuracy(model: N.Model, X: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(y) == 0:
        return float("nan")
    pred = np.concatenate([np.argmax(model.forward(X[i:i + batch_size]), axis=1)
                           for i in range(0, len(X), batch_size)])
    return float(np.mean(pred == y))


def fit(model: N.Model, data: PatchDataset, train_idx, val_sets: dict, cfg: TrainConfig):
    """SGD with momentum on ``train_idx``; per val set, keep the best-accuracy weights.

    Returns ``(selected, history)`` where ``selected`` maps each val-set name
    to a model (or ``{"last": model}`` when there is nothing to select on).
    """
    if len(train_idx) == 0:
        raise ValidationError("no training patches")
    _check_level(model, data, cfg.level)
    X, y = data.inputs(cfg.level), data.labels
    rng = np.random.default_rng(derive_seed("sampling", cfg.seed))
    params = model.parameters()
    names = model.parameter_names()
    trainable = [i for i in range(len(params)) if i not in model.frozen]
    selecting = cfg.select == "best_val" and val_sets
    best = {name: (-1.0, None) for name in val_sets} if selecting else {}
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = _epoch_order(rng, data, np.asarray(train_idx), cfg)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(X[b], y[b])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            T.sgd_momentum_step([params[i] for i in trainable], [grads[i] for i in trainable],
                                lr, cfg.momentum, [names[i] for i in trainable])
            losses.append(loss * len(b))
        entry = {"epoch": epoch, "lr": lr, "loss": float(np.sum(losses) / len(order))}
        for name, idx in val_sets.items():
            acc = accuracy(model, X[idx], y[idx])
            entry[f"val_acc/{name}"] = acc
            if selecting and acc > best[name][0]:
                best[name] = (acc, model.copy())
        entry["seconds"] = round(time.perf_counter() - t0, 3)
        history.append(entry)
        log.info("epoch %d %s", epoch, {k: v for k, v in entry.items() if k != "epoch"})
    if selecting:
        return {name: m for name, (_, m) in best.items()}, history
    return {"last": model}, history


def _checkpoint(model, stage, cfg, history, extra=None) -> N.Checkpoint:
    meta = {"stage": stage, "seed": cfg.seed, "config_digest": cfg.digest(), "created": N.creation_time()}
    meta.update(extra or {})
    return N.Checkpoint(model, meta, history)


def _as_runs(run) -> tuple[list[RunPlan], bool]:
    if isinstance(run, RunPlan):
        return [run], True
    runs = list(run)
    if not runs:
        raise ValidationError("no run plans given")
    if len({r.train_patients for r in runs}) != 1:
        raise ValidationError("runs trained together must share one training set")
    return runs, False


def _train_runs(model, data, runs, cfg, stage, extra=None):
    runs, single = _as_runs(runs)
    for r in runs:
        check_no_leakage(r, data.records)
    train_idx = data.indices(runs[0].train_patients)
    val_sets = {r.run_id: data.indices(r.val_patients) for r in runs}
    val_sets = {k: v for k, v in val_sets.items() if len(v)}
    selected, history = fit(model, data, train_idx, val_sets, cfg)
    out = []
    for r in runs:
        m = selected.get(r.run_id, selected.get("last", model))
        out.append(_checkpoint(m, stage, cfg, history, {"run_id": r.run_id, **(extra or {})}))
    return out[0] if single else out


def pretrain_backbone(spec: N.NetworkSpec, proxy: PatchDataset, cfg: TrainConfig) -> N.Checkpoint:
    """Supervised training on the proxy task; stands in for external pretrained weights."""
    if len(proxy) == 0:
        raise ValidationError("proxy manifest is empty")
    n_classes = int(proxy.labels.max()) + 1
    spec = replace(spec, num_classes=max(2, n_classes))
    model = N.build_network(spec, derive_seed("init", cfg.seed))
    cfg = replace(cfg, select="last")
    selected, history = fit(model, proxy, np.arange(len(proxy)), {}, cfg)
    losses = [h["loss"] for h in history[:3]]
    if len(losses) > 1 and not all(b < a for a, b in zip(losses, losses[1:])):
        warnings.warn(f"pretraining loss did not strictly decrease over the first epochs: {losses}")
    return _checkpoint(selected["last"], "pretrain", cfg, history)


def train_stage1(pretrained: N.Checkpoint, data: PatchDataset, run, cfg: TrainConfig,
                 num_classes: int = 5):
    """New ``num_classes`` head on the pretrained backbone, then fine-tune everything."""
    if pretrained.stage != "pretrain":
        raise ValidationError(f"stage 1 needs a pretrain checkpoint, got stage {pretrained.stage!r}")
    model = N.replace_head(pretrained.model, num_classes, derive_seed("head", cfg.seed))
    return _train_runs(model, data, run, cfg, "stage1")


def train_stage2(stage1: N.Checkpoint, data: PatchDataset, new_blocks, run, cfg: TrainConfig):
    """Surgery on a stage-1 model, then training on the higher-resolution patches."""
    if stage1.stage != "stage1":
        raise ValidationError(f"stage 2 needs a stage1 checkpoint, got stage {stage1.stage!r}")
    model = N.progressive_surgery(stage1.model, new_blocks, derive_seed("surgery", cfg.seed))
    if cfg.freeze_retained:
        model.frozen = set(range(sum(b.convs for b in new_blocks), len(model.parameters())))
    return _train_runs(model, data, run, cfg, "stage2")


def baseline_spec(kind: str, backbone: N.NetworkSpec, new_blocks, num_classes: int = 5) -> N.NetworkSpec:
    if kind == "plain_highres":
        return replace(backbone, num_classes=num_classes, input_side=2 * backbone.input_side)
    if kind == "stage2_random":
        return replace(backbone, num_classes=num_classes, blocks=tuple(new_blocks) + backbone.blocks[1:],
                       input_side=2 * backbone.input_side)
    raise UsageError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


def train_baseline(kind: str, data: PatchDataset, run, cfg: TrainConfig, backbone: N.NetworkSpec,
                   new_blocks, num_classes: int = 5):
    """``plain_highres``: the backbone from scratch on high-res patches.
    ``stage2_random``: the post-surgery topology with every weight random."""
    spec = baseline_spec(kind, backbone, new_blocks, num_classes)
    if kind == "stage2_random":
        first = new_blocks[-1].out_channels
        if first != backbone.blocks[0].out_channels:
            raise ValidationError(f"new blocks end with {first} channels; backbone block 1 has "
                                  f"{backbone.blocks[0].out_channels}")
    model = N.build_network(spec, derive_seed("init", cfg.seed))
    return _train_runs(model, data, run, cfg, kind)


def predict_patches(ckpt: N.Checkpoint | N.Model, data: PatchDataset, indices=None,
                    level: int | None = None, batch_size: int = 256) -> list[PatchPrediction]:
    model = ckpt.model if isinstance(ckpt, N.Checkpoint) else ckpt
    if level is None:
        matches = [lv for lv in sorted({int(k) for r in data.records[:1] for k in r.paths})
                   if data.side(lv) == model.spec.input_side]
        if not matches:
            raise ShapeError(f"no patch level matches the model input side {model.spec.input_side}")
        level = matches[0]
    _check_level(model, data, level)
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    probs = model.predict_proba(data.inputs(level)[idx], batch_size).astype(np.float32)
    out = []
    for i, p in zip(idx, probs):
        r = data.records[i]
        out.append(PatchPrediction(r.slide_id, r.x, r.y, p, int(np.argmax(p))))
    return out
