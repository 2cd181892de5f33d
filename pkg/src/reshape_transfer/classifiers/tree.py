"""CART classification tree (Gini) with reduced-error pruning."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, EmptyDataset, EmptyValidation

_FEATURE_BLOCK = 512


@dataclass
class TreeNode:
    counts: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def label(self) -> int:
        return int(np.argmax(self.counts))  # ties -> lowest class id

    def make_leaf(self) -> None:
        self.feature, self.threshold, self.left, self.right = -1, 0.0, None, None


@dataclass
class TreeModel:
    root: TreeNode
    n_features: int
    n_classes: int
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int | None = None
    pruned: bool = False

    def nodes(self) -> list[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            out.append(n)
            if not n.is_leaf:
                stack += [n.right, n.left]
        return out

    @property
    def depth(self) -> int:
        best, stack = 0, [(self.root, 0)]
        while stack:
            n, d = stack.pop()
            best = max(best, d)
            if not n.is_leaf:
                stack += [(n.left, d + 1), (n.right, d + 1)]
        return best

    @property
    def n_leaves(self) -> int:
        return sum(n.is_leaf for n in self.nodes())


def gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def best_split(x: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int = 1):
    """Return ``(feature, threshold, weighted_gini)`` minimising the weighted
    child impurity, or ``None`` when no valid split exists.

    Thresholds are midpoints between consecutive distinct sorted values; ties
    in impurity go to the lowest feature index, then the lowest threshold.
    """
    n, d = x.shape
    if n < 2 * min_leaf:
        return None
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    best = None
    for start in range(0, d, _FEATURE_BLOCK):
        xb = x[:, start:start + _FEATURE_BLOCK]
        order = np.argsort(xb, axis=0, kind="stable")
        xs = np.take_along_axis(xb, order, axis=0)
        ys = y[order]
        # n * weighted gini = nL - sum(cL^2)/nL + nR - sum(cR^2)/nR
        sq_left = np.zeros((n - 1, xb.shape[1]))
        sq_right = np.zeros_like(sq_left)
        for c in range(n_classes):
            cum = np.cumsum(ys == c, axis=0, dtype=np.float64)
            left = cum[:-1]
            right = cum[-1] - left
            sq_left += left * left
            sq_right += right * right
        score = (n_left - sq_left / n_left + n_right - sq_right / n_right) / n
        valid = xs[:-1] < xs[1:]
        if min_leaf > 1:
            valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
        score = np.where(valid, score, np.inf).T  # (features, positions)
        flat = int(np.argmin(score))
        f, pos = divmod(flat, n - 1)
        if not np.isfinite(score[f, pos]):
            continue
        if best is None or score[f, pos] < best[2]:
            thr = (xs[pos, f] + xs[pos + 1, f]) / 2.0
            best = (start + f, float(thr), float(score[f, pos]))
    return best


def tree_fit(features, labels, min_samples_split: int = 2, min_samples_leaf: int = 1,
             max_depth: int | None = None, n_classes: int | None = None) -> TreeModel:
    """Grow a CART tree until nodes are pure, too small, or at ``max_depth``."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch(f"features {x.shape} and labels {y.shape} disagree")
    if len(x) == 0:
        raise EmptyDataset("cannot grow a tree on no data")
    n_classes = n_classes or int(y.max()) + 1
    root = TreeNode(np.bincount(y, minlength=n_classes))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if (np.count_nonzero(node.counts) <= 1 or len(idx) < min_samples_split
                or (max_depth is not None and depth >= max_depth)):
            continue
        split = best_split(x[idx], y[idx], n_classes, min_samples_leaf)
        if split is None:
            continue
        node.feature, node.threshold, _ = split
        go_left = x[idx, node.feature] <= node.threshold
        li, ri = idx[go_left], idx[~go_left]
        node.left = TreeNode(np.bincount(y[li], minlength=n_classes))
        node.right = TreeNode(np.bincount(y[ri], minlength=n_classes))
        stack += [(node.right, ri, depth + 1), (node.left, li, depth + 1)]
    return TreeModel(root, x.shape[1], n_classes, min_samples_split, min_samples_leaf, max_depth)


def _leaf_for(node: TreeNode, row: np.ndarray) -> TreeNode:
    while not node.is_leaf:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node


def tree_predict(model: TreeModel, query) -> int | np.ndarray:
    """Root-to-leaf descent; a value equal to the threshold goes left."""
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != model.n_features:
        raise DimensionMismatch(f"query width {q.shape[1]} != tree width {model.n_features}")
    out = np.array([_leaf_for(model.root, row).label for row in q], dtype=np.int64)
    return int(out[0]) if single else out


def _postorder_internal(root: TreeNode) -> list[TreeNode]:
    out, stack = [], [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node.is_leaf:
            continue
        if expanded:
            out.append(node)
        else:
            stack += [(node, True), (node.right, False), (node.left, False)]
    return out


def _route(root: TreeNode, x: np.ndarray, y: np.ndarray):
    """Return ``(reach, correct)``: rows passing through each node (keyed by
    ``id``) and whether each row's leaf predicts it correctly."""
    reach = {}
    correct = np.zeros(len(x), dtype=bool)
    stack = [(root, np.arange(len(x)))]
    while stack:
        node, idx = stack.pop()
        reach[id(node)] = idx
        if node.is_leaf:
            correct[idx] = y[idx] == node.label
        else:
            go_left = x[idx, node.feature] <= node.threshold
            stack += [(node.left, idx[go_left]), (node.right, idx[~go_left])]
    return reach, correct


def tree_prune(model: TreeModel, val_features, val_labels) -> TreeModel:
    """Reduced-error pruning on a held-out set; returns a pruned copy.

    Each round collapses the internal node whose replacement by a majority
    leaf gains the most validation accuracy (a gain of zero still counts),
    earliest in post-order on ties. Stops when every candidate would lose
    accuracy, so validation accuracy never decreases.
    """
    x = np.asarray(val_features, dtype=np.float64)
    y = np.asarray(val_labels, dtype=np.int64)
    if len(x) == 0:
        raise EmptyValidation("pruning needs a non-empty validation set")
    if x.shape[1] != model.n_features:
        raise DimensionMismatch(f"validation width {x.shape[1]} != tree width {model.n_features}")
    pruned = copy.deepcopy(model)
    while True:
        reach, correct = _route(pruned.root, x, y)
        best, best_gain = None, -1
        for node in _postorder_internal(pruned.root):
            idx = reach[id(node)]
            gain = int(np.sum(y[idx] == node.label)) - int(correct[idx].sum())
            if gain > best_gain:
                best, best_gain = node, gain
        if best is None or best_gain < 0:
            break
        best.make_leaf()
    pruned.pruned = True
    return pruned
