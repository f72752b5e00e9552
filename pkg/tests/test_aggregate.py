import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prorez import aggregate as A
from prorez.errors import ValidationError
from prorez.trainer import PatchPrediction

from oracles import brute_force_split, cart_oracle


def pred(slide, label, probs=None, C=5):
    probs = np.eye(C)[label] if probs is None else np.asarray(probs, dtype=np.float32)
    return PatchPrediction(slide, 0, 0, probs, label)


def tree_as_tuples(tree, node=0):
    if tree.feature[node] < 0:
        return tuple(int(c) for c in tree.counts[node])
    return (int(tree.feature[node]), float(tree.threshold[node]),
            tree_as_tuples(tree, int(tree.left[node])), tree_as_tuples(tree, int(tree.right[node])))


def small_dataset(rng, n_max=25, f_max=5, C=3):
    n = int(rng.integers(2, n_max + 1))
    F = int(rng.integers(1, f_max + 1))
    X = rng.integers(0, 6, (n, F)).astype(float)
    y = rng.integers(0, C, n)
    return X, y


class TestHistogramFeatures:
    def test_counts(self):
        fm = A.slide_histogram_features([pred("s", l) for l in (0, 0, 1, 4)])
        assert fm.features.tolist() == [[2, 1, 0, 0, 1]]

    def test_order_invariant(self):
        preds = [pred(f"s{i % 3}", i % 5) for i in range(20)]
        a = A.slide_histogram_features(preds)
        b = A.slide_histogram_features(preds[::-1])
        assert a.slide_ids == b.slide_ids and np.array_equal(a.features, b.features)

    def test_row_sums_are_patch_counts(self):
        preds = [pred(f"s{i % 4}", (i * 7) % 5) for i in range(37)]
        fm = A.slide_histogram_features(preds)
        expected = [sum(1 for p in preds if p.slide_id == s) for s in fm.slide_ids]
        assert fm.features.sum(axis=1).tolist() == expected

    def test_missing_slide_named(self):
        with pytest.raises(ValidationError, match="ghost"):
            A.slide_histogram_features([pred("s", 0)], slide_ids=["s", "ghost"])

    def test_labels_attached(self):
        fm = A.slide_histogram_features([pred("b", 1), pred("a", 2)], slide_labels={"a": 3, "b": 4})
        assert fm.slide_ids == ["a", "b"] and fm.labels.tolist() == [3, 4]


class TestZScore:
    def test_hand_column(self):
        params = A.zscore_fit(np.array([[2.0], [4.0], [6.0]]))
        assert params.mean[0] == 4.0
        assert params.sd[0] == pytest.approx(1.63299, abs=1e-5)
        out = A.zscore_apply(np.array([[2.0], [4.0], [6.0]]), params)
        np.testing.assert_allclose(out[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)

    def test_standardizes_training_matrix(self):
        X = np.random.default_rng(0).random((30, 5)) * 10
        Z = A.zscore_apply(X, A.zscore_fit(X))
        np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-10)
        np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-10)

    def test_constant_column_maps_to_zero(self):
        X = np.array([[1.0, 3.0], [2.0, 3.0], [5.0, 3.0]])
        assert np.all(A.zscore_apply(X, A.zscore_fit(X))[:, 1] == 0)

    def test_width_mismatch(self):
        with pytest.raises(ValidationError):
            A.zscore_apply(np.zeros((2, 3)), A.zscore_fit(np.zeros((2, 2))))

    def test_needs_two_rows(self):
        with pytest.raises(ValidationError):
            A.zscore_fit(np.zeros((1, 3)))

    def test_affine(self):
        rng = np.random.default_rng(1)
        X = rng.random((20, 3))
        a, b = 3.5, -2.0
        p, q = A.zscore_fit(X), A.zscore_fit(a * X + b)
        np.testing.assert_allclose(q.mean, a * p.mean + b, atol=1e-12)
        np.testing.assert_allclose(q.sd, a * p.sd, atol=1e-12)
        np.testing.assert_allclose(A.zscore_apply(a * X + b, q), A.zscore_apply(X, p), atol=1e-12)

    def test_test_rows_do_not_leak(self):
        rng = np.random.default_rng(2)
        counts = rng.integers(0, 20, (12, 5)).astype(float)
        labels = rng.integers(0, 5, 12)
        train = np.arange(8)
        m1 = A.fit_slide_forest(counts[train], labels[train], n_trees=5, seed=0)
        counts[8:] = 999
        m2 = A.fit_slide_forest(counts[train], labels[train], n_trees=5, seed=0)
        assert m1.norm.mean.tobytes() == m2.norm.mean.tobytes()
        assert m1.norm.sd.tobytes() == m2.norm.sd.tobytes()


class TestSplit:
    def test_separable_1d(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        f, t, dec = A.best_split(X, y, [0], 2)
        assert (f, t) == (0, 1.5) and dec == pytest.approx(0.5)
        forest = A.rf_train(X, y, n_trees=1, max_features=1, bootstrap=False, n_classes=2)
        tree = forest.trees[0]
        assert tree.threshold[0] == 1.5
        assert all(A.gini(tree.counts[n]) == 0 for n in (tree.left[0], tree.right[0]))
        assert A.rf_predict(forest, X)[0].tolist() == [0, 0, 1, 1]

    def test_constant_features_give_none(self):
        assert A.best_split(np.ones((4, 2)), np.array([0, 1, 0, 1]), [0, 1], 2) is None

    def test_gini_values(self):
        assert A.gini([5, 0]) == 0.0 and A.gini([1, 1]) == 0.5 and A.gini([]) == 0.0

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        X, y = small_dataset(rng)
        got = A.best_split(X, y, range(X.shape[1]), 3)
        want = brute_force_split(X, y, range(X.shape[1]), 3)
        if want is None:
            assert got is None
        else:
            assert got[:2] == want[:2] and got[2] == pytest.approx(want[2], abs=1e-12)

    @pytest.mark.parametrize("seed", range(30))
    def test_single_tree_equals_cart(self, seed):
        rng = np.random.default_rng(1000 + seed)
        X, y = small_dataset(rng, n_max=20, f_max=4)
        forest = A.rf_train(X, y, n_trees=1, max_features=X.shape[1], seed=seed, n_classes=3,
                            bootstrap=False)
        assert tree_as_tuples(forest.trees[0]) == cart_oracle(X, y, 3)


@pytest.mark.filterwarnings("ignore:forest trained on a single class")
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_tree_structure_invariants(seed):
    # without bootstrap the rows reaching each node are recoverable by routing
    rng = np.random.default_rng(seed)
    X, y = small_dataset(rng, n_max=30, f_max=5, C=4)
    forest = A.rf_train(X, y, n_trees=3, max_features=min(2, X.shape[1]), seed=seed, n_classes=4,
                        bootstrap=False)
    for tree in forest.trees:
        def check(node, rows):
            assert len(rows) > 0
            assert tree.counts[node].tolist() == np.bincount(y[rows], minlength=4).tolist()
            f = tree.feature[node]
            if f < 0:
                return
            vals = np.unique(X[rows, f])
            assert np.any((vals[:-1] + vals[1:]) / 2 == tree.threshold[node])
            go_left = X[rows, f] <= tree.threshold[node]
            check(tree.left[node], rows[go_left])
            check(tree.right[node], rows[~go_left])

        check(0, np.arange(len(y)))


class TestForest:
    def _data(self, seed=0, n=40):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 5, n)
        X = np.eye(5)[y] * rng.integers(5, 20, (n, 1)) + rng.integers(0, 4, (n, 5))
        return X.astype(float), y

    def test_seed_deterministic(self):
        X, y = self._data()
        a = A.rf_train(X, y, n_trees=10, seed=4)
        b = A.rf_train(X, y, n_trees=10, seed=4)
        assert a.to_json() == b.to_json()
        assert a.to_json() != A.rf_train(X, y, n_trees=10, seed=5).to_json()

    def test_thread_count_irrelevant(self):
        X, y = self._data(1)
        single = A.rf_train(X, y, n_trees=12, seed=3, threads=1)
        multi = A.rf_train(X, y, n_trees=12, seed=3, threads=4)
        assert single.to_json() == multi.to_json()

    def test_json_round_trip(self):
        X, y = self._data(2)
        model = A.fit_slide_forest(X, y, n_trees=7, seed=1)
        back = A.ForestModel.from_json(model.to_json())
        assert back.to_json() == model.to_json()
        l1, f1 = A.rf_predict(model, X)
        l2, f2 = A.rf_predict(back, X)
        assert np.array_equal(l1, l2) and np.array_equal(f1, f2)

    def test_fractions_sum_to_one(self):
        X, y = self._data(3)
        _, frac = A.rf_predict(A.rf_train(X, y, n_trees=9, seed=0), X)
        np.testing.assert_allclose(frac.sum(axis=1), 1.0)

    def test_vote_counting_and_tie_break(self):
        def const_tree(label, C=3):
            counts = np.zeros((1, C), dtype=np.int64)
            counts[0, label] = 1
            return A.Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), counts)

        forest = A.ForestModel([const_tree(0), const_tree(0), const_tree(1)], 3, 1, 0, n_features=2)
        label, frac = A.rf_predict(forest, np.zeros(2))
        assert label == 0 and frac.tolist() == pytest.approx([2 / 3, 1 / 3, 0])
        tied = A.ForestModel([const_tree(2), const_tree(1)], 3, 1, 0, n_features=2)
        assert A.rf_predict(tied, np.zeros(2))[0] == 1

    def test_single_tree_forest_matches_leaf_majority(self):
        X, y = self._data(4)
        forest = A.rf_train(X, y, n_trees=1, seed=2)
        labels, _ = A.rf_predict(forest, X)
        assert np.array_equal(labels, forest.trees[0].predict(X))

    def test_width_mismatch(self):
        X, y = self._data()
        with pytest.raises(ValidationError):
            A.rf_predict(A.rf_train(X, y, n_trees=2), np.zeros((1, 4)))

    def test_single_class_warns_and_predicts_it(self):
        X = np.random.default_rng(0).random((6, 5))
        with pytest.warns(UserWarning):
            forest = A.rf_train(X, np.full(6, 3), n_trees=3)
        assert set(A.rf_predict(forest, X)[0].tolist()) == {3}

    @pytest.mark.parametrize("kw", [{"n_trees": 0}, {"max_features": 0}, {"max_features": 6}])
    def test_bad_hyperparameters(self, kw):
        X, y = self._data()
        with pytest.raises(ValidationError):
            A.rf_train(X, y, **kw)

    def test_learns_separable_slides(self):
        X, y = self._data(5, n=100)
        forest = A.fit_slide_forest(X[:70], y[:70], n_trees=30, seed=0)
        assert np.mean(A.rf_predict(forest, X[70:])[0] == y[70:]) >= 0.9


class TestMajorityVote:
    def test_plain_majority(self):
        assert A.majority_vote_aggregate([pred("s", l) for l in (2, 2, 3)]) == 2

    def test_tie_goes_to_higher_mean_probability(self):
        preds = [pred("s", 1, [0, .7, .3, 0, 0]), pred("s", 1, [0, .5, .5, 0, 0]),
                 pred("s", 2, [0, .4, .6, 0, 0]), pred("s", 2, [0, .8, .2, 0, 0])]
        # mean prob(1) = 0.6, mean prob(2) = 0.4
        assert A.majority_vote_aggregate(preds) == 1

    def test_single_patch(self):
        assert A.majority_vote_aggregate([pred("s", 4)]) == 4

    def test_empty(self):
        with pytest.raises(ValidationError):
            A.majority_vote_aggregate([])
