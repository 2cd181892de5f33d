"""Soft-margin SVM trained by SMO, one-vs-one for more than two classes.

The binary solver follows the maximal-violating-pair scheme with
second-order working-set selection: it minimises

    1/2 a^T Q a - e^T a,   0 <= a_i <= C,   y^T a = 0,   Q_ij = y_i y_j K_ij

and stops when the KKT gap ``m(a) - M(a)`` drops below ``tol``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConvergenceWarning, DimensionMismatch, SingleClassError

_TAU = 1e-12


def kernel_matrix(a: np.ndarray, b: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-gamma * np.maximum(sq, 0.0))
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass
class BinarySvm:
    positive: int          # class mapped to y=+1
    negative: int          # class mapped to y=-1
    support: np.ndarray    # support vectors
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    alpha: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    converged: bool = True
    iterations: int = 0


@dataclass
class SvmModel:
    classes: np.ndarray
    pairs: list
    kernel: str
    gamma: float
    C: float

    @property
    def converged(self) -> bool:
        return all(p.converged for p in self.pairs)


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
              max_iter: int = 100_000) -> tuple[np.ndarray, float, bool, int]:
    """Solve the binary dual for labels ``y`` in {-1, +1}.

    Returns ``(alpha, bias, converged, iterations)``; the decision function
    is ``sum_i alpha_i y_i K(x_i, x) + bias``.
    """
    n = len(y)
    y = y.astype(np.float64)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    diag = np.diag(K).copy()
    converged = False
    it = 0
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        m_val = yg[i]
        big_m = yg[low].min()
        if m_val - big_m < tol:
            converged = True
            break
        # second-order choice of j among violators in I_low
        b = m_val - yg
        cand = low & (b > 0)
        quad = diag[i] + diag - 2.0 * K[i]
        quad = np.where(quad > 0, quad, _TAU)
        score = np.full(n, np.inf)
        score[cand] = -(b[cand] ** 2) / quad[cand]
        j = int(np.argmin(score))

        yi, yj = y[i], y[j]
        ai, aj = alpha[i], alpha[j]
        eta = max(diag[i] + diag[j] - 2.0 * K[i, j], _TAU)
        if yi != yj:
            delta = (-grad[i] - grad[j]) / eta
            diff = ai - aj
            new_i, new_j = ai + delta, aj + delta
            if diff > 0:
                if new_j < 0:
                    new_j, new_i = 0.0, diff
            elif new_i < 0:
                new_i, new_j = 0.0, -diff
            if diff > 0:
                if new_i > C:
                    new_i, new_j = C, C - diff
            elif new_j > C:
                new_j, new_i = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / eta
            total = ai + aj
            new_i, new_j = ai - delta, aj + delta
            if total > C:
                if new_i > C:
                    new_i, new_j = C, total - C
            elif new_j < 0:
                new_j, new_i = 0.0, total
            if total > C:
                if new_j > C:
                    new_j, new_i = C, total - C
            elif new_i < 0:
                new_i, new_j = 0.0, total
        new_i = min(max(new_i, 0.0), C)
        new_j = min(max(new_j, 0.0), C)
        d_i, d_j = new_i - ai, new_j - aj
        alpha[i], alpha[j] = new_i, new_j
        grad += y * (K[:, i] * (yi * d_i) + K[:, j] * (yj * d_j))
        it += 1

    return alpha, _bias(alpha, y, grad, C), converged, it


def _bias(alpha: np.ndarray, y: np.ndarray, grad: np.ndarray, C: float) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yg[free].mean()
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = (ub + lb) / 2 if np.isfinite(ub) and np.isfinite(lb) else (ub if np.isfinite(ub) else lb)
    return float(-rho)


def default_gamma(x: np.ndarray) -> float:
    var = float(x.var())
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0 / x.shape[1]


def svm_fit(features, labels, kernel: str = "rbf", C: float = 1.0, gamma: float | str = "scale",
            tol: float = 1e-3, max_iter: int = 100_000) -> SvmModel:
    """Train one binary SVM per class pair.

    ``gamma="scale"`` uses ``1 / (n_features * var(features))``. A pair that
    hits ``max_iter`` keeps its best-effort solution, is flagged
    ``converged=False`` and a ``ConvergenceWarning`` is issued.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch(f"features {x.shape} and labels {y.shape} disagree")
    if C <= 0:
        raise ValueError("C must be positive")
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassError("SVM needs at least two classes")
    g = default_gamma(x) if gamma == "scale" else float(gamma)

    pairs = []
    for a, b in itertools.combinations(classes, 2):
        mask = (y == a) | (y == b)
        xs = x[mask]
        ys = np.where(y[mask] == a, 1.0, -1.0)
        alpha, bias, ok, it = smo_solve(kernel_matrix(xs, xs, kernel, g), ys, C, tol, max_iter)
        if not ok:
            warnings.warn(f"SMO for classes ({a}, {b}) stopped after {it} iterations", ConvergenceWarning)
        sv = alpha > 0
        pairs.append(BinarySvm(int(a), int(b), xs[sv], alpha[sv] * ys[sv], bias, alpha, ok, it))
    return SvmModel(classes, pairs, kernel, g, float(C))


def decision_values(model: SvmModel, queries: np.ndarray) -> np.ndarray:
    """Decision value of every pair for every query, shape (n_queries, n_pairs)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    width = model.pairs[0].support.shape[1] if model.pairs and model.pairs[0].support.size else None
    if width is not None and q.shape[1] != width:
        raise DimensionMismatch(f"query width {q.shape[1]} != training width {width}")
    cols = []
    for p in model.pairs:
        if len(p.dual_coef):
            cols.append(kernel_matrix(q, p.support, model.kernel, model.gamma) @ p.dual_coef + p.bias)
        else:
            cols.append(np.full(len(q), p.bias))
    return np.stack(cols, axis=1)


def svm_predict(model: SvmModel, query) -> int | np.ndarray:
    """One-vs-one vote; vote ties go to the larger summed decision value
    oriented toward each class, then to the lower class id."""
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    dec = decision_values(model, q)
    index = {int(c): i for i, c in enumerate(model.classes)}
    votes = np.zeros((len(dec), len(model.classes)))
    margin = np.zeros_like(votes)
    for col, p in enumerate(model.pairs):
        f = dec[:, col]
        pos, neg = index[p.positive], index[p.negative]
        votes[:, pos] += f >= 0
        votes[:, neg] += f < 0
        margin[:, pos] += f
        margin[:, neg] -= f
    out = np.empty(len(dec), dtype=np.int64)
    for r in range(len(dec)):
        tied = np.flatnonzero(votes[r] == votes[r].max())
        best = tied[np.argmax(margin[r, tied])]
        out[r] = model.classes[best]
    return int(out[0]) if single else out
