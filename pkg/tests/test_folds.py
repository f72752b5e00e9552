from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from prorez.errors import LeakageError, ValidationError
from prorez.folds import (FoldPlan, RunPlan, assign_patient_folds, check_no_leakage, load_run_plans,
                          make_run_plans, save_run_plans)
from prorez.slides import PatchRecord


def pids(n):
    return [f"P{i:04d}" for i in range(n)]


def test_159_patients_balanced():
    sizes = Counter(assign_patient_folds(pids(159), 3, seed=0).fold_of_patient.values())
    assert sorted(sizes.values()) == [53, 53, 53]


def test_deterministic_and_order_free():
    a = assign_patient_folds(pids(40), 3, seed=5)
    b = assign_patient_folds(list(reversed(pids(40))), 3, seed=5)
    assert a == b
    assert a != assign_patient_folds(pids(40), 3, seed=6)


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError, match="P0001"):
        assign_patient_folds(["P0000", "P0001", "P0001", "P0002"])


def test_too_few_patients():
    with pytest.raises(ValidationError):
        assign_patient_folds(pids(2), 3)


def test_fold_too_small_to_split():
    with pytest.raises(ValidationError):
        make_run_plans(assign_patient_folds(pids(3), 3))


def test_twelve_patient_enumeration():
    runs = make_run_plans(assign_patient_folds(pids(12), 3, seed=1))
    assert len(runs) == 6
    assert [r.run_id for r in runs] == ["f0s0", "f0s1", "f1s0", "f1s1", "f2s0", "f2s1"]
    for p in pids(12):
        roles = Counter(r.role_of(p) for r in runs)
        assert roles == {"train": 4, "val": 1, "test": 1}


def test_swap_exchanges_halves():
    runs = make_run_plans(assign_patient_folds(pids(13), 3, seed=2))
    for s0, s1 in zip(runs[::2], runs[1::2]):
        assert s0.val_patients == s1.test_patients and s0.test_patients == s1.val_patients
        assert s0.train_patients == s1.train_patients
        assert len(s0.val_patients) >= len(s0.test_patients)


def test_slides_inherit_patient_fold():
    plan = assign_patient_folds(pids(9), 3, seed=0)
    slides = {f"{p}-S{k}": p for p in pids(9) for k in range(3)}
    for sid, p in slides.items():
        assert plan.fold_of_patient[p] == plan.fold_of_patient[slides[sid]]


def test_plan_json_round_trip(tmp_path):
    plan = assign_patient_folds(pids(20), 3, seed=3)
    assert FoldPlan.from_json(plan.to_json()) == plan
    runs = make_run_plans(plan)
    assert load_run_plans(save_run_plans(runs, tmp_path / "runs.json")) == runs


def test_leakage_detected():
    run = RunPlan(0, 0, frozenset({"A", "B"}), frozenset({"B"}), frozenset({"C"}))
    with pytest.raises(LeakageError):
        run.check_disjoint()


def test_slide_shared_between_patients_detected():
    run = RunPlan(0, 0, frozenset({"A"}), frozenset({"B"}), frozenset({"C"}))
    recs = [PatchRecord("S1", "A", 0, 0, 0), PatchRecord("S1", "B", 0, 128, 0)]
    with pytest.raises(LeakageError, match="S1"):
        check_no_leakage(run, recs)


@settings(max_examples=150, deadline=None)
@given(st.integers(10, 200), st.integers(0, 2**32))
def test_cv_protocol_properties(n, seed):
    patients = pids(n)
    plan = assign_patient_folds(patients, 3, seed)
    sizes = Counter(plan.fold_of_patient.values())
    assert max(sizes.values()) - min(sizes.values()) <= 1
    runs = make_run_plans(plan)
    tested = Counter()
    for r in runs:
        assert not (r.train_patients & (r.val_patients | r.test_patients))
        assert not (r.val_patients & r.test_patients)
        assert r.train_patients | r.val_patients | r.test_patients == set(patients)
        assert abs(len(r.val_patients) - len(r.test_patients)) <= 1
        tested.update(r.test_patients)
    assert tested == Counter({p: 1 for p in patients})
