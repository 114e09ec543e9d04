"""CART random forest with Gini splits and probabilistic output.

Hot loops (split search, batch traversal) are numba kernels; tree growth
and all randomness stay in Python so each tree draws from its own
``numpy.random.Generator`` seeded by ``(rng_seed, tree_index)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence, Union

import numba
import numpy as np

from .errors import DimensionMismatch, EmptyInput, RaggedFeatures, SingleClassInput


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 50
    max_depth: int = 10
    min_samples_split: int = 2
    features_per_split: Union[int, str] = "sqrt"
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if isinstance(self.features_per_split, str) and self.features_per_split != "sqrt":
            raise ValueError("features_per_split must be an int or 'sqrt'")

    def split_features(self, feature_dim: int) -> int:
        if self.features_per_split == "sqrt":
            m = int(math.isqrt(feature_dim))
        else:
            m = int(self.features_per_split)
        return min(max(m, 1), feature_dim)

    def with_seed(self, seed: int) -> "ForestConfig":
        return ForestConfig(self.num_trees, self.max_depth, self.min_samples_split,
                            self.features_per_split, seed)


@dataclass(frozen=True, eq=False)
class Tree:
    """Node arrays of one tree; ``left == right == -1`` marks a leaf.

    ``value`` holds the class distribution of the training samples that
    reached each node (internal nodes included).
    """

    feature: np.ndarray    # uint32
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    value: np.ndarray      # float64, (n_nodes, num_classes)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.left[node] >= 0:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best

    def leaf_for(self, x: np.ndarray) -> int:
        node = 0
        while self.left[node] >= 0:
            if x[self.feature[node]] <= self.threshold[node]:
                node = int(self.left[node])
            else:
                node = int(self.right[node])
        return node

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("feature", "threshold", "left", "right", "value")
        )


@dataclass(frozen=True, eq=False)
class RandomForest:
    trees: tuple[Tree, ...]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        # flattened copy with global child indices for the traversal kernel
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        roots = offsets[:-1].astype(np.int64)
        feat = np.concatenate([t.feature for t in self.trees]).astype(np.int64)
        thr = np.concatenate([t.threshold for t in self.trees]).astype(np.float64)
        left = np.concatenate([np.where(t.left >= 0, t.left + o, -1)
                               for t, o in zip(self.trees, roots)]).astype(np.int64)
        right = np.concatenate([np.where(t.right >= 0, t.right + o, -1)
                                for t, o in zip(self.trees, roots)]).astype(np.int64)
        value = np.ascontiguousarray(np.concatenate([t.value for t in self.trees]), dtype=np.float64)
        object.__setattr__(self, "_packed", (feat, thr, left, right, value, roots))

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    def __eq__(self, other):
        if not isinstance(other, RandomForest):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.feature_dim == other.feature_dim
                and len(self.trees) == len(other.trees)
                and all(a == b for a, b in zip(self.trees, other.trees)))

    def predict_proba_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise DimensionMismatch(
                f"expected feature dimension {self.feature_dim}, got shape {X.shape}")
        feat, thr, left, right, value, roots = self._packed
        return _predict_kernel(X, feat, thr, left, right, value, roots)

    def proba_below(self, X: np.ndarray, class_index: int, threshold: float) -> np.ndarray:
        """Boolean mask of rows whose mean probability of ``class_index`` is < ``threshold``.

        Same decision as thresholding ``predict_proba_batch``; rows stop
        early once the remaining trees cannot change the outcome.
        """
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise DimensionMismatch(
                f"expected feature dimension {self.feature_dim}, got shape {X.shape}")
        if not 0 <= class_index < self.num_classes:
            raise ValueError(f"class index {class_index} out of range")
        feat, thr, left, right, value, roots = self._packed
        return _below_kernel(X, feat, thr, left, right, value, roots, class_index, float(threshold))


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, nogil=True)
def _predict_kernel(X, feat, thr, left, right, value, roots):
    n = X.shape[0]
    n_classes = value.shape[1]
    n_trees = roots.shape[0]
    out = np.zeros((n, n_classes))
    for t in range(n_trees):
        root = roots[t]
        for i in range(n):
            node = root
            while left[node] >= 0:
                if X[i, feat[node]] <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            for c in range(n_classes):
                out[i, c] += value[node, c]
    for i in range(n):
        for c in range(n_classes):
            out[i, c] /= n_trees
    return out


# early exits leave this much room so float round-off never flips a decision
_EARLY_EXIT_MARGIN = 1e-9


@numba.njit(cache=True, nogil=True)
def _below_kernel(X, feat, thr, left, right, value, roots, cls, threshold):
    n = X.shape[0]
    n_trees = roots.shape[0]
    out = np.empty(n, dtype=np.bool_)
    hi = (threshold + _EARLY_EXIT_MARGIN) * n_trees
    lo = (threshold - _EARLY_EXIT_MARGIN) * n_trees
    for i in range(n):
        total = 0.0
        decided = False
        for t in range(n_trees):
            node = roots[t]
            while left[node] >= 0:
                if X[i, feat[node]] <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            total += value[node, cls]
            # leaf probabilities lie in [0, 1]
            if total >= hi:
                out[i] = False
                decided = True
                break
            if total + (n_trees - 1 - t) < lo:
                out[i] = True
                decided = True
                break
        if not decided:
            out[i] = total / n_trees < threshold
    return out


@numba.njit(cache=True, nogil=True)
def _best_split(X, y, w, S, cand, n_classes):
    """Best Gini split of one node.

    ``S`` holds, per feature, the node's distinct sample indices sorted by
    that feature; ``w`` are bootstrap multiplicities. Returns
    (feature, threshold, score) with score = sum of n_child * gini_child,
    or feature == -1 when no split improves on the parent.
    """
    n_items = S.shape[1]
    total = np.zeros(n_classes)
    for i in range(n_items):
        s = S[0, i]
        total[y[s]] += w[s]
    n = 0.0
    sq = 0.0
    for c in range(n_classes):
        n += total[c]
        sq += total[c] * total[c]
    best_score = (n - sq / n) - 1e-9
    best_feat = -1
    best_thr = 0.0
    lc = np.zeros(n_classes)
    for fi in range(cand.shape[0]):
        f = cand[fi]
        for c in range(n_classes):
            lc[c] = 0.0
        sql = 0.0
        sqr = sq
        nl = 0.0
        for i in range(n_items - 1):
            s = S[f, i]
            c = y[s]
            wt = w[s]
            rc = total[c] - lc[c]
            sql += 2.0 * lc[c] * wt + wt * wt
            sqr -= 2.0 * rc * wt - wt * wt
            lc[c] += wt
            nl += wt
            v = X[s, f]
            vn = X[S[f, i + 1], f]
            if vn <= v:
                continue
            nr = n - nl
            score = (nl - sql / nl) + (nr - sqr / nr)
            if score < best_score:
                best_score = score
                best_feat = f
                thr = v + (vn - v) * 0.5
                if thr >= vn:
                    thr = v
                best_thr = thr
    return best_feat, best_thr, best_score


@numba.njit(cache=True, nogil=True)
def _partition(X, S, f, thr, flag):
    """Stable split of every sorted row of ``S`` by ``X[:, f] <= thr``.

    ``flag`` is a per-sample scratch buffer (kept small for cache locality).
    """
    d, n_items = S.shape
    n_left = 0
    for i in range(n_items):
        s = S[0, i]
        if X[s, f] <= thr:
            flag[s] = 1
            n_left += 1
        else:
            flag[s] = 0
    S_left = np.empty((d, n_left), S.dtype)
    S_right = np.empty((d, n_items - n_left), S.dtype)
    for j in range(d):
        a = 0
        b = 0
        for i in range(n_items):
            s = S[j, i]
            if flag[s]:
                S_left[j, a] = s
                a += 1
            else:
                S_right[j, b] = s
                b += 1
    return S_left, S_right


# ---------------------------------------------------------------------------
# training


def _as_training_arrays(features, labels):
    if isinstance(features, np.ndarray):
        X = features
    else:
        rows = list(features)
        if not rows:
            raise EmptyInput("no training samples")
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise RaggedFeatures(f"feature vectors have differing lengths {sorted(dims)}")
        X = np.asarray(rows)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInput("no training samples")
    if y.shape != (X.shape[0],):
        raise RaggedFeatures("label count does not match sample count")
    if y.min() < 0:
        raise ValueError("class indices must be non-negative")
    return X, y


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Permutation sorting samples lexicographically by feature vector, then label."""
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _grow_tree(X, y, presorted, n_classes, config: ForestConfig, tree_index: int) -> Tree:
    rng = np.random.default_rng([config.rng_seed, tree_index])
    n, d = X.shape
    m = config.split_features(d)
    w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
    in_bag = w > 0
    root = np.ascontiguousarray(presorted[in_bag[presorted]].reshape(d, -1))
    flag = np.zeros(n, dtype=np.uint8)

    feature, threshold, left, right, value = [], [], [], [], []

    def build(S: np.ndarray, depth: int) -> int:
        node = len(feature)
        members = S[0]
        counts = np.bincount(y[members], weights=w[members], minlength=n_classes)
        feature.append(0)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts / counts.sum())
        pure = np.count_nonzero(counts) <= 1
        if pure or depth >= config.max_depth or counts.sum() < config.min_samples_split:
            return node
        cand = rng.choice(d, size=m, replace=False).astype(np.int64)
        f, thr, _ = _best_split(X, y, w, S, cand, n_classes)
        if f < 0:
            return node
        S_left, S_right = _partition(X, S, f, thr, flag)
        feature[node] = f
        threshold[node] = thr
        left[node] = build(S_left, depth + 1)
        right[node] = build(S_right, depth + 1)
        return node

    build(root, 0)
    return Tree(
        feature=np.asarray(feature, dtype=np.uint32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64).reshape(-1, n_classes),
    )


def train(features, labels, config: ForestConfig = ForestConfig(), num_classes: int | None = None,
          jobs: int = 1) -> RandomForest:
    """Train a forest on ``features`` (n x d) and integer ``labels``.

    Samples are canonically re-ordered first, so the result depends only on
    the multiset of samples and the seed. ``jobs`` > 1 grows trees on a
    thread pool; the forest is identical either way.
    """
    X, y = _as_training_arrays(features, labels)
    if X.shape[0] < 2:
        raise EmptyInput("need at least 2 training samples")
    present = np.unique(y)
    if len(present) < 2:
        raise SingleClassInput(f"all samples belong to class {int(present[0])}")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    elif y.max() >= num_classes:
        raise ValueError("label exceeds num_classes")
    order = canonical_order(X, y)
    X = np.ascontiguousarray(X[order])
    y = np.ascontiguousarray(y[order])

    presorted = np.stack([np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])])

    def grow(t):
        return _grow_tree(X, y, presorted, num_classes, config, t)

    if jobs > 1 and config.num_trees > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(grow, range(config.num_trees)))
    else:
        trees = [grow(t) for t in range(config.num_trees)]
    return RandomForest(tuple(trees), num_classes, X.shape[1])


def predict_proba(forest: RandomForest, x: Sequence[float]) -> np.ndarray:
    """Mean of the leaf distributions reached by ``x`` in every tree."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict_proba takes a single feature vector")
    return forest.predict_proba_batch(x[None, :])[0]


def predict(forest: RandomForest, x: Sequence[float]) -> int:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(predict_proba(forest, x)))
