"""Regression-tree surrogate over rank estimators.

The tree is grown greedily with variance impurity (CART), using binned
thresholds for continuous features and mean-ordered level subsets for
categorical ones.  Each leaf is one cluster of the induced clustering; its
``num_vars`` is the number of split conditions on the path from the root.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import Dataset, Schema, StandardizationStats, UNKNOWN_LEVEL
from .detector import Thresholds
from .parallel import map_items

ANOMALOUS_BAND = "anomalous"
TRANSITION_BAND = "transition"
NORMAL_BAND = "normal"

# relative slack used when testing a leaf mean against NDT, since the mean of
# clamped values equal to ndt can land a few ulps below it
_BAND_RTOL = 1e-12
# a split must beat the parent's sum of squares by more than rounding noise
_GAIN_RTOL = 1e-12


@dataclass(frozen=True)
class TreeConfig:
    l_max: int = 5
    bins: int = 40
    min_leaf: int = 1

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


@dataclass(frozen=True)
class Split:
    """``feature`` indexes continuous features first, then categorical ones."""

    feature: int
    name: str
    kind: str  # "continuous" or "categorical"
    threshold: float | None = None
    left_levels: tuple[int, ...] = ()

    def goes_left(self, x: np.ndarray, levels: np.ndarray, n_continuous: int) -> bool:
        if self.kind == "continuous":
            return bool(x[self.feature] <= self.threshold)
        return int(levels[self.feature - n_continuous]) in self.left_levels

    def left_mask(self, X: np.ndarray, L: np.ndarray, n_continuous: int) -> np.ndarray:
        if self.kind == "continuous":
            return X[:, self.feature] <= self.threshold
        # unknown levels (-1) are never in left_levels, so they route right
        return np.isin(L[:, self.feature - n_continuous], self.left_levels)

    def to_dict(self) -> dict:
        d = {"feature": self.feature, "name": self.name, "kind": self.kind}
        if self.kind == "continuous":
            d["threshold"] = self.threshold
        else:
            d["left_levels"] = list(self.left_levels)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "Split":
        return cls(
            int(obj["feature"]), obj["name"], obj["kind"],
            None if obj.get("threshold") is None else float(obj["threshold"]),
            tuple(int(v) for v in obj.get("left_levels", ())),
        )


@dataclass
class TreeNode:
    node_id: int
    count: int
    mean: float
    variance: float
    num_vars: int
    split: Split | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    # subtree removed by pruning, kept so renderers can shade it
    pruned: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))

    def children(self) -> tuple["TreeNode", "TreeNode"]:
        assert self.left is not None and self.right is not None
        return self.left, self.right

    def to_dict(self) -> dict:
        d = {
            "id": self.node_id, "count": self.count, "mean": self.mean,
            "variance": self.variance, "num_vars": self.num_vars,
        }
        if self.split is not None:
            d["split"] = self.split.to_dict()
            d["left"] = self.left.to_dict()
            d["right"] = self.right.to_dict()
        if self.pruned is not None:
            d["pruned"] = self.pruned.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeNode":
        node = cls(int(obj["id"]), int(obj["count"]), float(obj["mean"]), float(obj["variance"]), int(obj["num_vars"]))
        if "split" in obj:
            node.split = Split.from_dict(obj["split"])
            node.left = cls.from_dict(obj["left"])
            node.right = cls.from_dict(obj["right"])
        if "pruned" in obj:
            node.pruned = cls.from_dict(obj["pruned"])
        return node


@dataclass
class SurrogateTree:
    root: TreeNode
    thresholds: Thresholds
    config: TreeConfig
    total_count: int
    schema: Schema
    stats: StandardizationStats | None = None

    def nodes(self) -> Iterator[TreeNode]:
        """Pre-order walk of the live (unpruned) nodes."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes() if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.num_vars for n in self.leaves())

    def raw_value(self, split: Split) -> float:
        """A continuous split threshold in the original feature units."""
        if self.stats is None:
            return float(split.threshold)
        return self.stats.inverse_feature(split.feature, split.threshold)

    def to_dict(self) -> dict:
        return {
            "root": self.root.to_dict(),
            "thresholds": {"adt": self.thresholds.adt, "ndt": self.thresholds.ndt},
            "config": {"l_max": self.config.l_max, "bins": self.config.bins, "min_leaf": self.config.min_leaf},
            "total_count": self.total_count,
            "schema": self.schema.to_dict(),
            "stats": None if self.stats is None else self.stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SurrogateTree":
        return cls(
            TreeNode.from_dict(obj["root"]),
            Thresholds(**obj["thresholds"]),
            TreeConfig(**obj["config"]),
            int(obj["total_count"]),
            Schema.from_dict(obj["schema"]),
            None if obj["stats"] is None else StandardizationStats.from_dict(obj["stats"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SurrogateTree":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ComplexityMetrics:
    wv: float
    num_clusters: int
    nv_total: int
    q: float
    lam: float

    def to_dict(self) -> dict:
        return {"wv": self.wv, "num_clusters": self.num_clusters, "nv_total": self.nv_total, "q": self.q, "lambda": self.lam}


# -- candidate thresholds ---------------------------------------------------

def candidate_thresholds(values: np.ndarray, bins: int) -> np.ndarray:
    """Split points for one continuous feature.

    With at most ``bins`` distinct values every midpoint between neighbours is
    a candidate.  Otherwise the ``bins - 1`` interior quantiles are snapped to
    the midpoint of the distinct values around them.
    """
    u = np.unique(values)
    if u.size < 2:
        return np.empty(0)
    mids = 0.5 * (u[:-1] + u[1:])
    if u.size <= bins:
        return mids
    q = np.quantile(values, np.arange(1, bins) / bins)
    # index of the last distinct value <= q, clipped so a midpoint exists above it
    idx = np.clip(np.searchsorted(u, q, side="right") - 1, 0, u.size - 2)
    return np.unique(mids[idx])


@dataclass
class _Grower:
    X: np.ndarray
    L: np.ndarray
    t: np.ndarray
    schema: Schema
    cfg: TreeConfig
    workers: int
    cuts: list[np.ndarray] = field(default_factory=list)
    bin_ids: list[np.ndarray] = field(default_factory=list)
    next_id: int = 0

    def __post_init__(self):
        for f in range(self.X.shape[1]):
            cut = candidate_thresholds(self.X[:, f], self.cfg.bins)
            self.cuts.append(cut)
            # bin b holds values in (cut[b-1], cut[b]]; x <= cut[k] iff bin <= k
            self.bin_ids.append(np.searchsorted(cut, self.X[:, f], side="left"))

    def feature_name(self, f: int) -> str:
        d = self.schema.n_continuous
        return self.schema.continuous_names[f] if f < d else self.schema.categorical_names[f - d]

    # each search returns (sse, rank, split) with rank ordering ties by threshold
    def _best_continuous(self, f: int, rows: np.ndarray, tc: np.ndarray):
        cut = self.cuts[f]
        if cut.size == 0:
            return None
        b = self.bin_ids[f][rows]
        nb = cut.size + 1
        cnt = np.bincount(b, minlength=nb)[:-1].cumsum()
        s1 = np.bincount(b, weights=tc, minlength=nb)[:-1].cumsum()
        s2 = np.bincount(b, weights=tc * tc, minlength=nb)[:-1].cumsum()
        return self._scan(cnt, s1, s2, tc, lambda k: Split(f, self.feature_name(f), "continuous", float(cut[k])))

    def _best_categorical(self, f: int, rows: np.ndarray, tc: np.ndarray):
        c = f - self.schema.n_continuous
        card = self.schema.categorical_cardinalities[c]
        lv = self.L[rows, c]
        lv = np.where(lv == UNKNOWN_LEVEL, card, lv)
        cnt = np.bincount(lv, minlength=card + 1)[:card]
        s1 = np.bincount(lv, weights=tc, minlength=card + 1)[:card]
        s2 = np.bincount(lv, weights=tc * tc, minlength=card + 1)[:card]
        present = np.flatnonzero(cnt)
        if present.size < 2:
            return None
        means = s1[present] / cnt[present]
        order = present[np.lexsort((present, means))]
        # prefix k of the mean-ordered levels goes left; unknown and unseen go right
        return self._scan(
            cnt[order][:-1].cumsum(), s1[order][:-1].cumsum(), s2[order][:-1].cumsum(), tc,
            lambda k: Split(f, self.feature_name(f), "categorical", None, tuple(sorted(int(v) for v in order[: k + 1]))),
        )

    def _scan(self, cnt_l, s1_l, s2_l, tc, make):
        n = tc.size
        s1, s2 = tc.sum(), (tc * tc).sum()
        cnt_r = n - cnt_l
        ok = (cnt_l >= self.cfg.min_leaf) & (cnt_r >= self.cfg.min_leaf)
        if not ok.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            sse_l = s2_l - np.where(cnt_l > 0, s1_l * s1_l / cnt_l, 0.0)
            s1_r = s1 - s1_l
            sse_r = (s2 - s2_l) - np.where(cnt_r > 0, s1_r * s1_r / cnt_r, 0.0)
        sse = np.where(ok, np.maximum(sse_l, 0.0) + np.maximum(sse_r, 0.0), np.inf)
        k = int(np.argmin(sse))  # first minimum: lowest threshold wins ties
        return float(sse[k]), k, make(k)

    def best_split(self, rows: np.ndarray, parent_sse: float) -> Split | None:
        tc = self.t[rows] - self.t[rows].mean()
        d = self.schema.n_continuous
        n_feat = d + self.schema.n_categorical

        def search(f):
            if f < d:
                return self._best_continuous(f, rows, tc)
            return self._best_categorical(f, rows, tc)

        found = map_items(search, list(range(n_feat)), self.workers)
        best = None
        for res in found:  # feature order, so strict < keeps the lowest index on ties
            if res is not None and (best is None or res[0] < best[0]):
                best = res
        if best is None or not best[0] < parent_sse * (1.0 - _GAIN_RTOL):
            return None
        return best[2]

    def grow(self, rows: np.ndarray, depth: int) -> TreeNode:
        vals = self.t[rows]
        # np.var of equal floats can come out as rounding noise, not 0
        var = 0.0 if vals.min() == vals.max() else float(np.var(vals))
        node = TreeNode(self.next_id, int(rows.size), float(np.mean(vals)), var, depth)
        self.next_id += 1
        parent_sse = node.variance * rows.size
        if depth >= self.cfg.l_max or rows.size < 2 * self.cfg.min_leaf or parent_sse <= 0.0:
            return node
        split = self.best_split(rows, parent_sse)
        if split is None:
            return node
        go_left = split.left_mask(self.X[rows], self.L[rows], self.schema.n_continuous)
        node.split = split
        node.left = self.grow(rows[go_left], depth + 1)
        node.right = self.grow(rows[~go_left], depth + 1)
        return node


def build_full_tree(
    ds: Dataset,
    targets: np.ndarray,
    cfg: TreeConfig = TreeConfig(),
    thresholds: Thresholds | None = None,
    workers: int = 1,
) -> SurrogateTree:
    """Grow a depth-limited CART regression tree predicting ``targets`` from ``ds``.

    ``ds`` should already be in model units (standardized); its stats are kept
    so thresholds can be reported in original units.
    """
    t = np.asarray(targets, dtype=np.float64)
    if len(ds) == 0:
        raise ValueError("cannot build a tree on an empty dataset")
    if t.shape != (len(ds),):
        raise ValueError(f"got {t.size} targets for {len(ds)} records")
    if thresholds is None:
        thresholds = Thresholds(0.05, 1.0)
    grower = _Grower(ds.x, ds.levels, t, ds.schema, cfg, workers)
    root = grower.grow(np.arange(len(ds)), 0)
    return SurrogateTree(root, thresholds, cfg, len(ds), ds.schema, ds.standardization_stats)


def prune(tree: SurrogateTree, lam: float) -> SurrogateTree:
    """Bottom-up pruning by the local quality test.

    At each internal node (children first) the split is removed when
    ``-dE - lam * dNV <= 0`` with ``dE = splitVariance - node.variance`` and
    ``dNV = left.num_vars + right.num_vars - node.num_vars``.  The input tree
    is left untouched.
    """
    out = copy.deepcopy(tree)

    def visit(node: TreeNode) -> None:
        if node.is_leaf:
            return
        left, right = node.children()
        visit(left)
        visit(right)
        split_variance = (left.variance * left.count + right.variance * right.count) / node.count
        d_e = split_variance - node.variance
        d_nv = left.num_vars + right.num_vars - node.num_vars
        if -d_e - lam * d_nv <= 0:
            node.pruned = TreeNode(node.node_id, node.count, node.mean, node.variance, node.num_vars,
                                   node.split, left, right, None)
            node.split = node.left = node.right = None

    visit(out.root)
    return out


def weighted_variance(tree: SurrogateTree) -> float:
    leaves = tree.leaves()
    return float(sum(l.variance * l.count for l in leaves) / tree.total_count)


def quality(tree: SurrogateTree, lam: float) -> ComplexityMetrics:
    wv = weighted_variance(tree)
    leaves = tree.leaves()
    nv = int(sum(l.num_vars for l in leaves))
    return ComplexityMetrics(wv, len(leaves), nv, quality_value(wv, nv, lam), lam)


def quality_value(wv: float, nv_total: int, lam: float) -> float:
    return -wv - lam * nv_total


def classify_leaf(leaf: TreeNode, th: Thresholds) -> str:
    if leaf.mean < th.adt:
        return ANOMALOUS_BAND
    if leaf.mean >= th.ndt * (1.0 - _BAND_RTOL):
        return NORMAL_BAND
    return TRANSITION_BAND


def path_to_leaf(tree: SurrogateTree, x: np.ndarray, levels: np.ndarray) -> list[tuple[TreeNode, bool]]:
    """Internal nodes visited from the root, each with the branch taken (True = left)."""
    steps = []
    node = tree.root
    d = tree.schema.n_continuous
    while not node.is_leaf:
        left = node.split.goes_left(x, levels, d)
        steps.append((node, left))
        node = node.left if left else node.right
    return steps


def predict(tree: SurrogateTree, x: np.ndarray, levels: np.ndarray) -> TreeNode:
    """Leaf reached by one record; ``x`` in the tree's (standardized) units."""
    node = tree.root
    d = tree.schema.n_continuous
    while not node.is_leaf:
        node = node.left if node.split.goes_left(x, levels, d) else node.right
    return node


def predict_leaf_ids(tree: SurrogateTree, X: np.ndarray, L: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.int64)
    d = tree.schema.n_continuous

    def route(node: TreeNode, rows: np.ndarray) -> None:
        if node.is_leaf:
            out[rows] = node.node_id
            return
        m = node.split.left_mask(X[rows], L[rows], d)
        route(node.left, rows[m])
        route(node.right, rows[~m])

    route(tree.root, np.arange(X.shape[0]))
    return out


def predict_means(tree: SurrogateTree, X: np.ndarray, L: np.ndarray) -> np.ndarray:
    means = {n.node_id: n.mean for n in tree.leaves()}
    ids = predict_leaf_ids(tree, X, L)
    lut = np.zeros(max(means) + 1)
    for k, v in means.items():
        lut[k] = v
    return lut[ids]
