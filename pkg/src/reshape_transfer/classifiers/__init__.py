"""Transfer-target classifiers operating on CNN feature vectors.

``fit_classifier`` wraps the three learners with the preprocessing they
expect: KNN and SVM see features standardised with train-set statistics,
the tree sees raw features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..binio import read_container, write_container
from ..errors import CorruptFile
from .knn import KnnModel, knn_fit, knn_predict
from .svm import BinarySvm, SvmModel, svm_fit, svm_predict
from .tree import TreeModel, TreeNode, tree_fit, tree_predict, tree_prune

__all__ = [
    "KnnModel", "knn_fit", "knn_predict",
    "SvmModel", "svm_fit", "svm_predict",
    "TreeModel", "TreeNode", "tree_fit", "tree_predict", "tree_prune",
    "Standardizer", "FittedClassifier", "fit_classifier", "save_classifier", "load_classifier",
    "METHODS",
]

METHODS = ("knn", "svm", "dt")
MODEL_MAGIC = b"RSCL0001"
MODEL_VERSION = 1


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


@dataclass
class FittedClassifier:
    method: str
    model: object
    params: dict = field(default_factory=dict)
    scaler: Standardizer | None = None

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.scaler is not None:
            x = self.scaler.transform(x)
        if self.method == "knn":
            return knn_predict(self.model, x)
        if self.method == "svm":
            return svm_predict(self.model, x)
        return tree_predict(self.model, x)


def _split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_classifier(method: str, features, labels, *, k: int = 3, kernel: str = "rbf", C: float = 1.0,
                   gamma: float | str = "scale", tol: float = 1e-3, prune: bool = False,
                   val_fraction: float = 0.2, seed: int = 0, n_classes: int = 3) -> FittedClassifier:
    """Fit ``knn``, ``svm`` or ``dt`` on a feature matrix.

    With ``prune`` the tree grows on a seeded ``1 - val_fraction`` slice of
    the data and is pruned against the remainder.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if method == "knn":
        scaler = Standardizer.fit(x)
        return FittedClassifier("knn", knn_fit(scaler.transform(x), y, k), {"k": k}, scaler)
    if method == "svm":
        scaler = Standardizer.fit(x)
        model = svm_fit(scaler.transform(x), y, kernel=kernel, C=C, gamma=gamma, tol=tol)
        params = {"kernel": kernel, "C": C, "gamma": model.gamma, "tol": tol, "converged": model.converged}
        return FittedClassifier("svm", model, params, scaler)
    if method == "dt":
        params = {"prune": prune}
        if prune:
            grow, val = _split_validation(len(x), val_fraction, seed)
            tree = tree_prune(tree_fit(x[grow], y[grow], n_classes=n_classes), x[val], y[val])
            params.update(val_fraction=val_fraction, seed=seed)
        else:
            tree = tree_fit(x, y, n_classes=n_classes)
        params.update(depth=tree.depth, leaves=tree.n_leaves)
        return FittedClassifier("dt", tree, params, None)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# -- persistence --------------------------------------------------------------

def _tree_to_list(root: TreeNode) -> list:
    rows, stack = [], [root]
    index = {}
    order = []
    while stack:
        node = stack.pop()
        index[id(node)] = len(order)
        order.append(node)
        if not node.is_leaf:
            stack += [node.right, node.left]
    for node in order:
        kids = (-1, -1) if node.is_leaf else (index[id(node.left)], index[id(node.right)])
        rows.append([node.feature, node.threshold, kids[0], kids[1], [int(c) for c in node.counts]])
    return rows


def _tree_from_list(rows: list) -> TreeNode:
    nodes = [TreeNode(np.array(r[4], dtype=np.int64), int(r[0]), float(r[1])) for r in rows]
    for node, r in zip(nodes, rows):
        if r[2] >= 0:
            node.left, node.right = nodes[r[2]], nodes[r[3]]
    return nodes[0]


def save_classifier(clf: FittedClassifier, path) -> None:
    meta = {"method": clf.method, "params": clf.params, "scaled": clf.scaler is not None}
    tensors = [clf.scaler.mean, clf.scaler.scale] if clf.scaler is not None else []
    m = clf.model
    if clf.method == "knn":
        meta["k"] = m.k
        tensors += [m.features, m.labels.astype(np.float64)]
    elif clf.method == "svm":
        meta.update(kernel=m.kernel, gamma=m.gamma, C=m.C, classes=[int(c) for c in m.classes],
                    pairs=[{"positive": p.positive, "negative": p.negative, "bias": p.bias,
                            "converged": p.converged, "iterations": p.iterations} for p in m.pairs])
        for p in m.pairs:
            tensors += [p.support, p.dual_coef]
    else:
        meta.update(n_features=m.n_features, n_classes=m.n_classes, pruned=m.pruned,
                    min_samples_split=m.min_samples_split, min_samples_leaf=m.min_samples_leaf,
                    max_depth=m.max_depth, nodes=_tree_to_list(m.root))
    write_container(path, MODEL_MAGIC, MODEL_VERSION, meta, tensors, dtype="<f8")


def load_classifier(path) -> FittedClassifier:
    _, meta, tensors = read_container(path, MODEL_MAGIC, MODEL_VERSION, CorruptFile, dtype="<f8")
    try:
        scaler = None
        if meta["scaled"]:
            scaler = Standardizer(tensors[0], tensors[1])
            tensors = tensors[2:]
        method = meta["method"]
        if method == "knn":
            model = KnnModel(tensors[0], tensors[1].astype(np.int64), meta["k"])
        elif method == "svm":
            pairs = [BinarySvm(p["positive"], p["negative"], tensors[2 * i], tensors[2 * i + 1], p["bias"],
                               converged=p["converged"], iterations=p["iterations"])
                     for i, p in enumerate(meta["pairs"])]
            model = SvmModel(np.array(meta["classes"]), pairs, meta["kernel"], meta["gamma"], meta["C"])
        elif method == "dt":
            model = TreeModel(_tree_from_list(meta["nodes"]), meta["n_features"], meta["n_classes"],
                              meta["min_samples_split"], meta["min_samples_leaf"], meta["max_depth"],
                              meta["pruned"])
        else:
            raise CorruptFile(f"unknown classifier type {method!r}")
    except (KeyError, IndexError) as e:
        raise CorruptFile(f"incomplete classifier payload: {e}") from e
    return FittedClassifier(method, model, meta["params"], scaler)
