import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eadmnc.data import Dataset, Schema
from eadmnc.detector import Thresholds
from eadmnc.evaluation import tree_mse
from eadmnc.tree import (
    ANOMALOUS_BAND, NORMAL_BAND, TRANSITION_BAND, Split, SurrogateTree, TreeConfig, TreeNode, build_full_tree,
    candidate_thresholds, classify_leaf, predict, predict_leaf_ids, predict_means, prune, quality, quality_value,
    weighted_variance,
)

TH = Thresholds(0.05, 0.5)


def hand_tree(root_var=1.0, child_var=0.9, n=10):
    schema = Schema(("x",))
    left = TreeNode(1, n // 2, 0.2, child_var, 1)
    right = TreeNode(2, n - n // 2, 0.4, child_var, 1)
    root = TreeNode(0, n, 0.3, root_var, 0, Split(0, "x", "continuous", 0.0), left, right)
    return SurrogateTree(root, TH, TreeConfig(), n, schema, None)


def test_prune_hand_example():
    # dE = -0.1 and dNV = 2, so the test is 0.1 - 2 * lam <= 0
    pruned = prune(hand_tree(), 0.05)
    assert pruned.root.is_leaf
    assert pruned.root.pruned is not None and pruned.root.pruned.left.node_id == 1
    kept = prune(hand_tree(), 0.04)
    assert not kept.root.is_leaf


def test_prune_leaves_input_untouched():
    t = hand_tree()
    prune(t, 1.0)
    assert not t.root.is_leaf


def test_prune_leaf_input_unchanged():
    leaf = SurrogateTree(TreeNode(0, 4, 0.1, 0.2, 0), TH, TreeConfig(), 4, Schema(("x",)), None)
    out = prune(leaf, 0.5)
    assert out.root.is_leaf and out.root.pruned is None and out.root.variance == 0.2


def _ds(x, levels=None, cat_cards=()):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    schema = Schema(tuple(f"x{i}" for i in range(d)), tuple(f"c{i}" for i in range(len(cat_cards))),
                    tuple(tuple(str(v) for v in range(c)) for c in cat_cards))
    lv = np.empty((n, 0), dtype=np.int64) if levels is None else np.asarray(levels, dtype=np.int64).reshape(n, -1)
    return Dataset(schema, x, lv)


def two_leaf_tree(a, b):
    """Root split into two hand-made leaves with target lists ``a`` and ``b``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    left = TreeNode(1, a.size, a.mean(), a.var(), 1)
    right = TreeNode(2, b.size, b.mean(), b.var(), 1)
    allv = np.concatenate([a, b])
    root = TreeNode(0, allv.size, allv.mean(), allv.var(), 0, Split(0, "x", "continuous", 0.0), left, right)
    return SurrogateTree(root, TH, TreeConfig(), allv.size, Schema(("x",)), None)


def test_weighted_variance_examples():
    assert weighted_variance(two_leaf_tree([0, 1], [0, 1])) == pytest.approx(0.25, abs=1e-15)
    assert weighted_variance(two_leaf_tree([0, 0], [1, 1])) == 0.0
    # no gain available, so the grower keeps one leaf with the same WV
    t = build_full_tree(_ds([0.0, 0.0, 1.0, 1.0]), np.array([0.0, 1.0, 0.0, 1.0]))
    assert t.root.is_leaf and weighted_variance(t) == pytest.approx(0.25)
    t2 = build_full_tree(_ds([0.0, 0.0, 1.0, 1.0]), np.array([0.0, 0.0, 1.0, 1.0]))
    assert quality(t2, 0.0).num_clusters == 2 and weighted_variance(t2) == 0.0


def test_constant_targets_give_single_leaf():
    ds = _ds(np.random.default_rng(0).normal(size=50))
    t = build_full_tree(ds, np.full(50, 0.3))
    assert t.root.is_leaf and t.root.variance == 0.0


def test_quality_examples():
    assert quality_value(0.012, 17, 1e-4) == pytest.approx(-0.0137, abs=1e-12)
    assert quality_value(0.010, 113, 1e-4) == pytest.approx(-0.0213, abs=1e-12)
    assert quality_value(0.3, 40, 0.0) == -0.3


def test_classify_leaf_boundaries():
    def leaf(m):
        return TreeNode(0, 1, m, 0.0, 0)
    assert classify_leaf(leaf(0.0), TH) == ANOMALOUS_BAND
    assert classify_leaf(leaf(0.05), TH) == TRANSITION_BAND
    assert classify_leaf(leaf(0.0499), TH) == ANOMALOUS_BAND
    assert classify_leaf(leaf(0.5), TH) == NORMAL_BAND
    assert classify_leaf(leaf(0.3), TH) == TRANSITION_BAND


def test_candidate_thresholds():
    np.testing.assert_allclose(candidate_thresholds(np.array([3.0, 1.0, 2.0, 2.0]), 40), [1.5, 2.5])
    assert candidate_thresholds(np.array([1.0, 1.0]), 40).size == 0
    c = candidate_thresholds(np.arange(1000.0), 40)
    assert 1 <= c.size <= 39
    # snapped to midpoints between distinct values
    np.testing.assert_allclose(c % 1.0, 0.5)


def brute_best_sse(x, lv, t, cards):
    """Exhaustive search over every threshold and every level subset."""
    best = np.inf
    for f in range(x.shape[1]):
        u = np.unique(x[:, f])
        for thr in 0.5 * (u[:-1] + u[1:]):
            m = x[:, f] <= thr
            best = min(best, t[m].var() * m.sum() + t[~m].var() * (~m).sum())
    for c, card in enumerate(cards):
        for r in range(1, card):
            for sub in itertools.combinations(range(card), r):
                m = np.isin(lv[:, c], sub)
                if m.all() or not m.any():
                    continue
                best = min(best, t[m].var() * m.sum() + t[~m].var() * (~m).sum())
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 100), st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_root_split_matches_exhaustive_search(n, n_cont, seed):
    rng = np.random.default_rng(seed)
    n_cat = 3 - n_cont if n_cont < 3 else 0
    cards = tuple(int(c) for c in rng.integers(2, 5, n_cat))
    x = np.round(rng.normal(size=(n, n_cont)), 1)
    lv = np.column_stack([rng.integers(0, c, n) for c in cards]) if cards else np.empty((n, 0), dtype=int)
    t = rng.random(n)
    ds = _ds(x, lv, cards)
    tree = build_full_tree(ds, t, TreeConfig(l_max=1, bins=1000))
    parent = t.var() * n
    oracle = brute_best_sse(x, lv, t, cards)
    if tree.root.is_leaf:
        assert not oracle < parent * (1 - 1e-12)
        return
    l, r = tree.root.children()
    got = l.variance * l.count + r.variance * r.count
    assert got == pytest.approx(oracle, rel=1e-9, abs=1e-12)
    assert got <= parent


def test_tie_break_prefers_lowest_feature_then_threshold():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    t = np.array([0.0, 0.0, 1.0, 1.0])
    tree = build_full_tree(_ds(x), t, TreeConfig(l_max=1))
    assert tree.root.split.feature == 0 and tree.root.split.threshold == 1.5


def test_unknown_level_routes_right():
    s = Split(1, "c0", "categorical", None, (0, 2))
    assert s.goes_left(np.zeros(1), np.array([2]), 1)
    assert not s.goes_left(np.zeros(1), np.array([-1]), 1)


def synth_tree(rng, n=2000, d=3, l_max=5):
    x = rng.normal(size=(n, d))
    t = np.clip(np.abs(x[:, 0] + 0.5 * x[:, 1] * x[:, 2] + 0.1 * rng.normal(size=n)) / 3, 0, 0.5)
    ds = _ds(x)
    return ds, t, build_full_tree(ds, t, TreeConfig(l_max=l_max))


def test_full_tree_shape_and_invariants():
    ds, t, tree = synth_tree(np.random.default_rng(0))
    m = quality(tree, 1e-4)
    assert tree.depth <= 5
    assert m.num_clusters == 32 and m.nv_total == 160  # complete: L * 2^L
    for node in tree.nodes():
        assert node.variance >= 0
        if not node.is_leaf:
            l, r = node.children()
            assert l.count + r.count == node.count
            assert l.num_vars == r.num_vars == node.num_vars + 1
            assert l.variance * l.count + r.variance * r.count <= node.variance * node.count + 1e-12
    assert sum(l.count for l in tree.leaves()) == len(ds)
    # leaves partition the data: routing reproduces the counts
    ids = predict_leaf_ids(tree, ds.x, ds.levels)
    for leaf in tree.leaves():
        assert int((ids == leaf.node_id).sum()) == leaf.count


@pytest.mark.parametrize("l_max", [1, 2, 3, 4])
def test_complete_tree_nv_identity(l_max):
    _, _, tree = synth_tree(np.random.default_rng(1), l_max=l_max)
    m = quality(tree, 0.0)
    assert m.num_clusters == 2**l_max and m.nv_total == l_max * 2**l_max


def test_tree_mse_equals_weighted_variance():
    ds, t, tree = synth_tree(np.random.default_rng(2))
    assert tree_mse(tree, ds, t) == pytest.approx(weighted_variance(tree), rel=1e-10, abs=1e-14)
    pruned = prune(tree, 1e-3)
    assert tree_mse(pruned, ds, t) == pytest.approx(weighted_variance(pruned), rel=1e-10, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.1]))
def test_pruning_laws(seed, lam):
    ds, t, tree = synth_tree(np.random.default_rng(seed), n=400)
    pruned = prune(tree, lam)
    qf, qp = quality(tree, lam), quality(pruned, lam)
    assert qp.nv_total <= qf.nv_total
    assert qp.wv >= qf.wv - 1e-12
    assert qp.q == -qp.wv - lam * qp.nv_total
    assert qp.q >= qf.q - 1e-12
    assert sum(l.count for l in pruned.leaves()) == len(ds)


def test_predict_examples():
    t = hand_tree()
    assert predict(t, np.array([-1.0]), np.empty(0, dtype=int)).node_id == 1
    assert predict(t, np.array([0.0]), np.empty(0, dtype=int)).node_id == 1
    assert predict(t, np.array([0.1]), np.empty(0, dtype=int)).node_id == 2
    single = SurrogateTree(TreeNode(0, 3, 0.1, 0.0, 0), TH, TreeConfig(), 3, Schema(("x",)), None)
    assert predict(single, np.array([5.0]), np.empty(0, dtype=int)) is single.root
    np.testing.assert_allclose(predict_means(t, np.array([[-1.0], [1.0]]), np.empty((2, 0), dtype=int)), [0.2, 0.4])


def test_tree_json_round_trip(tmp_path):
    ds, t, tree = synth_tree(np.random.default_rng(3), n=300, l_max=3)
    pruned = prune(tree, 1e-2)
    pruned.save(tmp_path / "t.json")
    back = SurrogateTree.load(tmp_path / "t.json")
    assert back.to_dict() == pruned.to_dict()
    np.testing.assert_array_equal(predict_means(back, ds.x, ds.levels), predict_means(pruned, ds.x, ds.levels))


def test_parallel_build_matches_serial():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(500, 3))
    lv = rng.integers(0, 4, (500, 2))
    t = rng.random(500)
    ds = _ds(x, lv, (4, 4))
    a = build_full_tree(ds, t, workers=1)
    b = build_full_tree(ds, t, workers=3)
    assert a.to_dict() == b.to_dict()


def test_build_errors():
    with pytest.raises(ValueError):
        build_full_tree(_ds(np.empty((0, 1))), np.empty(0))
    with pytest.raises(ValueError):
        build_full_tree(_ds([1.0, 2.0]), np.array([0.1]))
