"""Patient-grouped k-fold splits with alternating validation/test halves."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import LeakageError, ValidationError
from .seeding import derive_seed


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    k: int
    fold_of_patient: dict

    def patients_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.fold_of_patient.items() if f == fold)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "k": self.k,
                           "fold_of_patient": dict(sorted(self.fold_of_patient.items()))},
                          indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(int(d["seed"]), int(d["k"]), {str(p): int(f) for p, f in d["fold_of_patient"].items()})


@dataclass(frozen=True)
class RunPlan:
    fold: int
    swap: int
    train_patients: frozenset
    val_patients: frozenset
    test_patients: frozenset

    @property
    def run_id(self) -> str:
        return f"f{self.fold}s{self.swap}"

    def role_of(self, patient_id: str) -> str | None:
        for role in ("train", "val", "test"):
            if patient_id in getattr(self, f"{role}_patients"):
                return role
        return None

    def check_disjoint(self) -> None:
        tr, va, te = self.train_patients, self.val_patients, self.test_patients
        overlap = (tr & va) | (tr & te) | (va & te)
        if overlap:
            raise LeakageError(f"run {self.run_id}: patients in more than one set: {sorted(overlap)[:5]}")

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "fold": self.fold, "swap": self.swap,
                "train": sorted(self.train_patients), "val": sorted(self.val_patients),
                "test": sorted(self.test_patients)}

    @classmethod
    def from_dict(cls, d) -> "RunPlan":
        return cls(int(d["fold"]), int(d["swap"]), frozenset(d["train"]),
                   frozenset(d["val"]), frozenset(d["test"]))


def assign_patient_folds(patient_ids: Iterable[str], k: int = 3, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of the sorted ids, then round-robin into ``k`` folds."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({p for p in ids if ids.count(p) > 1})
        raise ValidationError(f"duplicate patient ids: {dupes[:5]}")
    if k < 2:
        raise ValidationError(f"need k >= 2 folds, got {k}")
    if len(ids) < k:
        raise ValidationError(f"{len(ids)} patients cannot fill {k} folds")
    ordered = sorted(ids)
    perm = np.random.default_rng(derive_seed("folds", seed)).permutation(len(ordered))
    return FoldPlan(seed, k, {ordered[j]: pos % k for pos, j in enumerate(perm)})


def make_run_plans(plan: FoldPlan) -> list[RunPlan]:
    """Two runs per held-out fold; its halves trade the val and test roles.

    The first half is the larger one when the fold has an odd count, so swap 0
    gives validation the extra patient.
    """
    runs = []
    for f in range(plan.k):
        holdout = plan.patients_in(f)
        if len(holdout) < 2:
            raise ValidationError(f"fold {f} has {len(holdout)} patients; cannot split into val/test")
        train = frozenset(p for p, g in plan.fold_of_patient.items() if g != f)
        perm = np.random.default_rng(derive_seed("halves", plan.seed, f)).permutation(len(holdout))
        shuffled = [holdout[i] for i in perm]
        cut = (len(shuffled) + 1) // 2
        a, b = frozenset(shuffled[:cut]), frozenset(shuffled[cut:])
        runs.append(RunPlan(f, 0, train, a, b))
        runs.append(RunPlan(f, 1, train, b, a))
    for r in runs:
        r.check_disjoint()
    return runs


def save_run_plans(runs: Sequence[RunPlan], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in runs], indent=1) + "\n", encoding="utf-8")
    return path


def load_run_plans(path) -> list[RunPlan]:
    return [RunPlan.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def check_no_leakage(run: RunPlan, records) -> None:
    """Fail if the run's sets overlap or a slide is listed under two patients."""
    run.check_disjoint()
    owner = {}
    for r in records:
        prev = owner.setdefault(r.slide_id, r.patient_id)
        if prev != r.patient_id:
            raise LeakageError(f"slide {r.slide_id} belongs to both {prev} and {r.patient_id}")
