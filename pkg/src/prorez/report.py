"""Summary tables, ROC point files and figures over the evaluated classifiers."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from . import metrics as M

CLASSIFIER_ORDER = ("baseline1", "baseline2", "stage1", "stage2")
LEVELS = ("patch", "slide")
MODES = ("mean_over_runs", "pooled")
GAP = "missing"


def table_header(C: int = 5) -> list[str]:
    return ["classifier", "level"] + [f"class_{c}" for c in range(C)] + ["accuracy", "kappa", "auc", "f1"]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def table_rows(metrics: dict, mode: str, C: int = 5) -> list[list[str]]:
    """One row per classifier and level; absent classifiers get gap markers."""
    rows = []
    for clf in CLASSIFIER_ORDER:
        for level in LEVELS:
            m = metrics.get(clf)
            if m is None:
                rows.append([clf, level] + [GAP] * (C + 4))
                continue
            rep = M.MetricsReport.from_dict(m[level][mode])
            rows.append([clf, level] + [_fmt(v) for v in rep.per_class_accuracy]
                        + [_fmt(rep.overall_accuracy), _fmt(rep.kappa), _fmt(rep.auc_hand_till),
                           _fmt(rep.macro_f1)])
    return rows


def table_csv(metrics: dict, mode: str, C: int = 5) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table_header(C))
    w.writerows(table_rows(metrics, mode, C))
    return buf.getvalue()


def roc_csv(items: M.ScoredItems, cls: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr", "threshold"])
    for fpr, tpr, thr in M.roc_points(items.probs[:, cls], items.y_true == cls):
        w.writerow([repr(fpr), repr(tpr), repr(thr)])
    return buf.getvalue()


def _pooled(runs: list[M.ScoredItems]) -> M.ScoredItems:
    return M.ScoredItems([i for r in runs for i in r.ids], np.concatenate([r.y_true for r in runs]),
                         np.concatenate([r.y_pred for r in runs]), np.concatenate([r.probs for r in runs]))


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # no software/date metadata, so reruns give identical bytes
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    return path


def confusion_figure(cm, title: str, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(cm, cmap="Blues")
    C = cm.shape[0]
    for i in range(C):
        for j in range(C):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    color="white" if cm[i, j] > cm.max() / 2 else "black", fontsize=8)
    ax.set_xticks(range(C))
    ax.set_yticks(range(C))
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def per_class_figure(metrics: dict, mode: str, path: Path, C: int = 5) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    present = [c for c in CLASSIFIER_ORDER if c in metrics]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    width = 0.8 / max(1, len(present))
    for ax, level in zip(axes, LEVELS):
        for k, clf in enumerate(present):
            acc = metrics[clf][level][mode]["per_class_accuracy"]
            ax.bar(np.arange(C) + k * width, acc, width, label=clf)
        ax.set_xticks(np.arange(C) + width * (len(present) - 1) / 2)
        ax.set_xticklabels([f"class {c}" for c in range(C)])
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{level} level ({mode})", fontsize=9)
    axes[0].set_ylabel("per-class accuracy")
    axes[1].legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def write_report(pipe, present: list[str], C: int = 5) -> list[Path]:
    """Tables for both aggregation modes, pooled ROC points and figures under ``<run>/reports``."""
    metrics = {c: pipe.load_metrics(c) for c in present}
    out_dir = Path(pipe.reports)
    outs = []
    for mode in MODES:
        path = out_dir / f"table_{mode}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(table_csv(metrics, mode, C), encoding="utf-8")
        outs.append(path)
        outs.append(per_class_figure(metrics, mode, out_dir / "figures" / f"per_class_{mode}.png", C))
    for clf in present:
        for level in LEVELS:
            pooled = _pooled([it for _, it in pipe.scored_items(clf, level)])
            for c in range(C):
                if not (pooled.y_true == c).any():
                    continue
                path = out_dir / "roc" / f"{clf}_{level}_class_{c}.csv"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(roc_csv(pooled, c), encoding="utf-8")
                outs.append(path)
            cm = metrics[clf][level]["pooled"]["confusion"]
            outs.append(confusion_figure(cm, f"{clf}, {level} level, pooled test sets",
                                         out_dir / "figures" / f"confusion_{clf}_{level}.png"))
    return outs
