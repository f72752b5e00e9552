import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prorez import metrics as M
from prorez.errors import UndefinedMetricError, ValidationError

from oracles import brute_force_hand_till, kappa_formula, macro_f1_formula


def random_scores(rng, n, C):
    labels = rng.integers(0, C, n)
    while len(set(labels.tolist())) < 2:
        labels = rng.integers(0, C, n)
    # coarse grid so ties are frequent
    probs = rng.integers(0, 6, (n, C)).astype(float) + 1e-3
    return probs / probs.sum(axis=1, keepdims=True), labels


class TestConfusion:
    def test_identity(self):
        assert M.confusion_matrix([0, 1, 2], [0, 1, 2], 3).tolist() == np.eye(3, dtype=int).tolist()

    def test_counting(self):
        assert M.confusion_matrix([0, 0, 1], [0, 1, 1], 2).tolist() == [[1, 1], [0, 1]]

    def test_empty(self):
        cm = M.confusion_matrix([], [], 3)
        assert cm.sum() == 0
        with pytest.raises(UndefinedMetricError):
            M.kappa(cm)
        with pytest.raises(UndefinedMetricError):
            M.per_class_and_overall(cm)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            M.confusion_matrix([0, 3], [0, 1], 3)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            M.confusion_matrix([0, 1], [0], 3)

    def test_csv_round_trip_bit_identical_metrics(self):
        cm = np.random.default_rng(0).integers(0, 20, (5, 5))
        back = M.confusion_from_csv(M.confusion_to_csv(cm))
        assert np.array_equal(back, cm)
        assert M.report_from_confusion(back).to_json() == M.report_from_confusion(cm).to_json()


class TestKappa:
    def test_perfect(self):
        assert M.kappa([[50, 0], [0, 50]]) == 1.0

    def test_chance(self):
        assert M.kappa([[25, 25], [25, 25]]) == 0.0

    def test_hand_value(self):
        assert M.kappa([[30, 10], [20, 40]]) == pytest.approx(0.4, abs=1e-12)

    def test_degenerate_marginals(self):
        with pytest.raises(UndefinedMetricError):
            M.kappa([[10, 0], [0, 0]])

    def test_matches_formula_on_random_matrices(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cm = rng.integers(0, 30, (5, 5))
            assert M.kappa(cm) == pytest.approx(kappa_formula(cm), abs=1e-12)


class TestPerClass:
    def test_diagonal(self):
        recall, acc, f1, undefined = M.per_class_and_overall(np.diag([3, 4, 5]))
        assert recall.tolist() == [1, 1, 1] and acc == 1.0 and f1 == 1.0 and not undefined.any()

    def test_hand_values(self):
        recall, acc, f1, _ = M.per_class_and_overall([[30, 10], [20, 40]])
        assert recall == pytest.approx([0.75, 2 / 3])
        assert acc == pytest.approx(0.7)
        assert f1 == pytest.approx(np.mean([2 * .6 * .75 / 1.35, 2 * .8 * (2 / 3) / (.8 + 2 / 3)]), abs=1e-12)
        assert f1 == pytest.approx(0.6970, abs=1e-4)

    def test_absent_class_flagged(self):
        recall, _, _, undefined = M.per_class_and_overall([[5, 1, 0], [0, 0, 0], [1, 0, 3]])
        assert recall[1] == 0 and undefined.tolist() == [False, True, False]

    def test_macro_f1_matches_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            cm = rng.integers(0, 8, (5, 5)) * (rng.random((5, 5)) < 0.7)
            if cm.sum() == 0:
                continue
            assert M.per_class_and_overall(cm)[2] == pytest.approx(macro_f1_formula(cm), abs=1e-12)


class TestHandTill:
    def test_perfect_binary(self):
        probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]])
        assert M.hand_till_auc(probs, [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert M.hand_till_auc(np.full((6, 3), 1 / 3), [0, 1, 2, 0, 1, 2]) == 0.5

    def test_single_class_errors(self):
        with pytest.raises(UndefinedMetricError):
            M.hand_till_auc(np.full((3, 2), 0.5), [1, 1, 1])

    def test_three_class_nine_items(self):
        probs, labels = random_scores(np.random.default_rng(3), 9, 3)
        assert M.hand_till_auc(probs, labels) == pytest.approx(brute_force_hand_till(probs, labels), abs=1e-12)

    def test_absent_class_excluded(self):
        probs, labels = random_scores(np.random.default_rng(4), 20, 3)
        labels = np.where(labels == 2, 0, labels)
        probs5 = np.hstack([probs, np.full((20, 2), 0.0)])
        assert M.hand_till_auc(probs5, labels) == pytest.approx(brute_force_hand_till(probs5, labels), abs=1e-12)

    def test_binary_equals_mann_whitney(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p1 = rng.integers(0, 5, 15) / 4
            labels = rng.integers(0, 2, 15)
            if len(set(labels.tolist())) < 2:
                continue
            pos, neg = p1[labels == 1], p1[labels == 0]
            u = sum((a > b) + 0.5 * (a == b) for a in pos for b in neg)
            probs = np.stack([1 - p1, p1], axis=1)
            assert M.hand_till_auc(probs, labels) == pytest.approx(u / (len(pos) * len(neg)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 30), st.integers(2, 5))
def test_hand_till_matches_brute_force(seed, n, C):
    probs, labels = random_scores(np.random.default_rng(seed), n, C)
    assert M.hand_till_auc(probs, labels) == pytest.approx(brute_force_hand_till(probs, labels), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_hand_till_monotone_invariance(seed):
    # integer scores keep ties exact under the transforms
    rng = np.random.default_rng(seed)
    _, labels = random_scores(rng, 25, 4)
    probs = rng.integers(0, 8, (25, 4)).astype(float)
    transformed = np.exp(0.5 * probs) - 7.0
    transformed[:, 1] = probs[:, 1] ** 3
    assert M.hand_till_auc(transformed, labels) == M.hand_till_auc(probs, labels)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    probs, labels = random_scores(rng, 25, 5)
    pred = probs.argmax(axis=1)
    perm = rng.permutation(25)
    a = M.report_from_predictions(labels, pred, probs, 5)
    b = M.report_from_predictions(labels[perm], pred[perm], probs[perm], 5)
    assert a.overall_accuracy == b.overall_accuracy and a.kappa == b.kappa
    assert a.macro_f1 == b.macro_f1 and a.confusion == b.confusion
    assert a.auc_hand_till == pytest.approx(b.auc_hand_till, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_kappa_one_iff_diagonal(seed):
    rng = np.random.default_rng(seed)
    cm = np.diag(rng.integers(1, 10, 4))
    if rng.random() < 0.5:
        i, j = rng.choice(4, 2, replace=False)
        cm[i, j] += 1
    diagonal = np.count_nonzero(cm - np.diag(np.diag(cm))) == 0
    assert (M.kappa(cm) == pytest.approx(1.0, abs=1e-15)) == diagonal
    assert (M.per_class_and_overall(cm)[1] == 1.0) == diagonal


class TestAggregateRuns:
    def _run(self, rng, ids, C=3):
        probs, labels = random_scores(rng, len(ids), C)
        return M.ScoredItems(list(ids), labels, probs.argmax(axis=1), probs)

    def test_single_run_modes_agree(self):
        run = self._run(np.random.default_rng(0), range(20))
        rep = run.report(3)
        assert M.aggregate_runs([run], "pooled", 3) == rep
        mean = M.aggregate_runs([run], "mean_over_runs", 3)
        assert mean.kappa == rep.kappa and mean.overall_accuracy == rep.overall_accuracy
        assert mean.per_class_accuracy == rep.per_class_accuracy

    def test_mean_of_kappas(self):
        # two runs constructed with kappa 0.2 and 0.4
        def run_from_cm(cm, offset):
            y_true, y_pred = [], []
            for t in range(2):
                for p in range(2):
                    y_true += [t] * cm[t][p]
                    y_pred += [p] * cm[t][p]
            probs = np.eye(2)[y_pred]
            return M.ScoredItems([offset + i for i in range(len(y_true))], np.array(y_true),
                                 np.array(y_pred), probs)

        a = run_from_cm([[30, 20], [20, 30]], 0)
        b = run_from_cm([[35, 15], [15, 35]], 1000)
        assert a.report(2).kappa == pytest.approx(0.2) and b.report(2).kappa == pytest.approx(0.4)
        assert M.aggregate_runs([a, b], "mean_over_runs", 2).kappa == pytest.approx(0.3, abs=1e-12)

    def test_pooled_accuracy_is_count_ratio(self):
        rng = np.random.default_rng(1)
        runs = [self._run(rng, range(k * 10, k * 10 + 10)) for k in range(3)]
        correct = sum(int((r.y_true == r.y_pred).sum()) for r in runs)
        assert M.aggregate_runs(runs, "pooled", 3).overall_accuracy == correct / 30

    def test_pooled_rejects_duplicates(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValidationError):
            M.aggregate_runs([self._run(rng, range(5)), self._run(rng, range(4, 9))], "pooled", 3)

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            M.aggregate_runs([self._run(np.random.default_rng(0), range(5))], "median", 3)

    def test_report_json_round_trip(self):
        rep = self._run(np.random.default_rng(3), range(12)).report(3)
        assert M.MetricsReport.from_dict(json.loads(rep.to_json())) == rep


def test_roc_points_endpoints():
    pts = M.roc_points([0.9, 0.1, 0.5, 0.5], [True, False, True, False])
    assert pts[0][:2] == (0.0, 0.0) and pts[-1][:2] == (1.0, 1.0)
    fprs = [p[0] for p in pts]
    assert fprs == sorted(fprs)
