"""Patch-to-slide aggregation: label histograms, z-scoring and a random forest."""
from __future__ import annotations

import json
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .seeding import derive_seed

TIE_TOL = 1e-12


@dataclass
class SlideFeatureMatrix:
    slide_ids: list
    features: np.ndarray
    labels: np.ndarray

    def subset(self, slide_ids) -> "SlideFeatureMatrix":
        index = {s: i for i, s in enumerate(self.slide_ids)}
        rows = [index[s] for s in slide_ids]
        return SlideFeatureMatrix(list(slide_ids), self.features[rows], self.labels[rows])


def slide_histogram_features(preds, C: int = 5, slide_labels: dict | None = None,
                             slide_ids: Sequence[str] | None = None) -> SlideFeatureMatrix:
    """Count of patches predicted as each class, one row per slide (sorted by id).

    ``slide_ids`` lists slides that must be present; one without any
    prediction is an error. ``slide_labels`` supplies the ground truth.
    """
    counts = defaultdict(lambda: np.zeros(C, dtype=np.float64))
    for p in preds:
        if not 0 <= p.label < C:
            raise ValidationError(f"patch label {p.label} outside [0, {C})")
        counts[p.slide_id][p.label] += 1
    ids = sorted(slide_ids) if slide_ids is not None else sorted(counts)
    for s in ids:
        if s not in counts:
            raise ValidationError(f"slide {s} has no patch predictions")
    feats = np.array([counts[s] for s in ids]).reshape(len(ids), C)
    labels = np.array([slide_labels[s] if slide_labels else -1 for s in ids], dtype=np.int64)
    return SlideFeatureMatrix(ids, feats, labels)


@dataclass
class ZScoreParams:
    mean: np.ndarray
    sd: np.ndarray


def zscore_fit(train) -> ZScoreParams:
    """Column means and population standard deviations."""
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] < 2:
        raise ValidationError(f"z-score fit needs a matrix with >= 2 rows, got shape {train.shape}")
    return ZScoreParams(train.mean(axis=0), train.std(axis=0))


def zscore_apply(matrix, params: ZScoreParams) -> np.ndarray:
    """Constant training columns (sd == 0) map to 0."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != params.mean.shape[0]:
        raise ValidationError(f"matrix has shape {matrix.shape}; params expect {params.mean.shape[0]} columns")
    safe = np.where(params.sd > 0, params.sd, 1.0)
    return np.where(params.sd > 0, (matrix - params.mean) / safe, 0.0)


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------

def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    return 0.0 if n == 0 else float(1.0 - np.sum((counts / n) ** 2))


def best_split(X, y, features, n_classes: int):
    """Best (feature, threshold, gini_decrease) over midpoints of consecutive distinct values.

    Split sends ``x <= threshold`` left. Decreases within ``TIE_TOL`` tie and
    resolve to the lowest feature index, then the lowest threshold. Returns
    ``None`` when every candidate feature is constant.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    parent = 1.0 - np.sum((total / n) ** 2)
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = total - left
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        g_left = 1.0 - np.sum(left ** 2, axis=1) / n_left ** 2
        g_right = 1.0 - np.sum(right ** 2, axis=1) / n_right ** 2
        decrease = parent - (n_left * g_left + n_right * g_right) / n
        decrease[~valid] = -np.inf
        k = int(np.argmax(decrease))
        top = decrease[k]
        # lowest threshold among near-ties within this feature
        k = int(np.nonzero(decrease >= top - TIE_TOL)[0][0])
        cand = (f, float((xs[k] + xs[k + 1]) / 2), float(decrease[k]))
        if best is None or cand[2] > best[2] + TIE_TOL:
            best = cand
    return best


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def leaf_of(self, x) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def predict(self, X) -> np.ndarray:
        return np.array([int(np.argmax(self.counts[self.leaf_of(x)])) for x in np.asarray(X)],
                        dtype=np.int64)

    def to_dict(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"counts": [int(c) for c in self.counts[node]]}
        return {"feature": int(self.feature[node]), "threshold": float(self.threshold[node]),
                "left": self.to_dict(int(self.left[node])), "right": self.to_dict(int(self.right[node]))}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        feature, threshold, left, right, counts = [], [], [], [], []

        def visit(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            counts.append(None)
            if "counts" in node:
                counts[i] = node["counts"]
                return i
            feature[i], threshold[i] = node["feature"], node["threshold"]
            left[i] = visit(node["left"])
            right[i] = visit(node["right"])
            return i

        visit(d)
        C = len(next(c for c in counts if c is not None))
        counts = [c if c is not None else [0] * C for c in counts]
        return cls(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                   np.array(counts, dtype=np.int64))


def grow_tree(X, y, n_classes: int, max_features: int, rng) -> Tree:
    """CART grown to purity; each node draws ``max_features`` candidate features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    F = X.shape[1]
    feature, threshold, left, right, counts = [], [], [], [], []

    def build(idx):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        if np.count_nonzero(counts[node]) <= 1:
            return node
        order = rng.permutation(F)
        split = best_split(X[idx], y[idx], order[:max_features], n_classes)
        if split is None and max_features < F:
            split = best_split(X[idx], y[idx], order[max_features:], n_classes)
        if split is None:
            return node
        f, t, _ = split
        go_left = X[idx, f] <= t
        feature[node], threshold[node] = f, t
        left[node] = build(idx[go_left])
        right[node] = build(idx[~go_left])
        return node

    build(np.arange(len(y)))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(counts, dtype=np.int64))


@dataclass
class ForestModel:
    trees: list
    n_classes: int
    max_features: int
    seed: int
    bootstrap: bool = True
    norm: ZScoreParams | None = None
    n_features: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_json(self) -> str:
        d = {"n_trees": self.n_trees, "n_classes": self.n_classes, "n_features": self.n_features,
             "max_features": self.max_features,
             "seed": self.seed, "bootstrap": self.bootstrap,
             "norm": None if self.norm is None else {"mean": self.norm.mean.tolist(),
                                                     "sd": self.norm.sd.tolist()},
             "trees": [t.to_dict() for t in self.trees]}
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        d = json.loads(text)
        norm = d["norm"] and ZScoreParams(np.array(d["norm"]["mean"]), np.array(d["norm"]["sd"]))
        return cls([Tree.from_dict(t) for t in d["trees"]], d["n_classes"], d["max_features"],
                   d["seed"], d["bootstrap"], norm or None, d["n_features"])


def rf_train(features, labels, n_trees: int = 100, max_features: int = 2, seed: int = 0,
             n_classes: int = 5, bootstrap: bool = True, threads: int = 1) -> ForestModel:
    """Bootstrap-aggregated Gini trees; tree ``i`` draws from ``derive_seed(seed, i)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if n_trees < 1:
        raise ValidationError(f"n_trees must be >= 1, got {n_trees}")
    if not 1 <= max_features <= X.shape[1]:
        raise ValidationError(f"max_features must be in [1, {X.shape[1]}], got {max_features}")
    if len(y) == 0 or len(y) != len(X):
        raise ValidationError(f"need matching non-empty features/labels, got {len(X)} and {len(y)}")
    if np.unique(y).size == 1:
        warnings.warn(f"forest trained on a single class ({y[0]}); it will always predict it")

    def one(i):
        rng = np.random.default_rng(derive_seed("tree", seed, i))
        idx = rng.integers(0, len(y), size=len(y)) if bootstrap else np.arange(len(y))
        return grow_tree(X[idx], y[idx], n_classes, max_features, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(one, range(n_trees)))
    else:
        trees = [one(i) for i in range(n_trees)]
    return ForestModel(trees, n_classes, max_features, seed, bootstrap, n_features=X.shape[1])


def rf_predict(model: ForestModel, features):
    """Majority vote over trees (ties to the lowest class) and per-class vote fractions."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise ValidationError(f"feature width {X.shape[1]} != model width {model.n_features}")
    if model.norm is not None:
        X = zscore_apply(X, model.norm)
    votes = np.zeros((len(X), model.n_classes))
    for t in model.trees:
        votes[np.arange(len(X)), t.predict(X)] += 1
    fractions = votes / model.n_trees
    labels = np.argmax(votes, axis=1)
    return (int(labels[0]), fractions[0]) if single else (labels, fractions)


def fit_slide_forest(raw_counts, labels, n_trees=100, max_features=2, seed=0, n_classes=5,
                     threads: int = 1) -> ForestModel:
    """Z-score on the training rows, then a forest on the normalized features."""
    params = zscore_fit(raw_counts)
    model = rf_train(zscore_apply(raw_counts, params), labels, n_trees, max_features, seed,
                     n_classes, threads=threads)
    model.norm = params
    return model


def majority_vote_aggregate(preds) -> int:
    """Most frequent patch label; ties go to the higher mean probability, then the lower class."""
    preds = list(preds)
    if not preds:
        raise ValidationError("majority vote over zero patches")
    C = len(preds[0].probs)
    counts = np.bincount([p.label for p in preds], minlength=C)
    tied = np.nonzero(counts == counts.max())[0]
    if tied.size == 1:
        return int(tied[0])
    mean_prob = np.mean([p.probs for p in preds], axis=0)
    return int(tied[np.argmax(mean_prob[tied])])
