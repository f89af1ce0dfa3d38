"""Split conformal calibration with an exact gradient.

The threshold is the k-th smallest of the calibration scores augmented with a
+inf sentinel, k = ceil((M+1) * beta). Because the thresholding selects a
single order statistic, its derivative with respect to the model parameters
is exactly the derivative of the selected score (zero on the sentinel
branch); no smoothing or soft sorting is needed. Ties are resolved by stable
sort on the original index, and — like the usual max-gradient convention —
uniqueness of the selected score is not checked.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

logger = logging.getLogger("cro.conformal")

# guards against float products like 10 * 0.9 = 9.000000000000002 pushing the
# rank past M and spuriously returning +inf
_CEIL_GUARD = 1e-12


@dataclass
class CalibrationRecord:
    """Outcome of one quantile computation over M calibration scores."""

    scores: np.ndarray
    alpha: float
    rank: int                  # k in {1, ..., M+1}; M+1 selects the sentinel
    q: float                   # +inf iff rank == M+1
    grad_index: int | None     # original index of the selected score, else None

    @property
    def is_finite(self) -> bool:
        return self.grad_index is not None


def quantile(scores, beta: float) -> tuple[float, int | None]:
    """Empirical beta-quantile of scores + {+inf}, with the selected index.

    Returns (q, grad_index); grad_index is None exactly when the sentinel is
    selected (beta too large for M), in which case q = +inf.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a nonempty 1-D array")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    M = scores.size
    k = max(1, math.ceil((M + 1) * beta - _CEIL_GUARD))
    if k > M:
        return math.inf, None
    order = np.argsort(scores, kind="stable")
    idx = int(order[k - 1])
    return float(scores[idx]), idx


def quantile_on_tape(scores: Tensor, beta: float, alpha: float | None = None):
    """Traced quantile: returns (q, record) with q a scalar Tensor when finite.

    The selection is a plain indexing op, so the backward pass routes the
    adjoint of q to the one calibration score that realizes the threshold.
    """
    vals = ad.value_of(scores)
    q, idx = quantile(vals, beta)
    record = CalibrationRecord(
        scores=np.asarray(vals, dtype=float).copy(),
        alpha=(1.0 - beta) if alpha is None else alpha,
        rank=_rank(vals.size, beta),
        q=q,
        grad_index=idx,
    )
    if idx is None:
        return math.inf, record
    if isinstance(scores, Tensor):
        return ad.take(scores, idx), record
    return q, record


def _rank(M: int, beta: float) -> int:
    return max(1, math.ceil((M + 1) * beta - _CEIL_GUARD))


def quantile_gradient(record: CalibrationRecord, score_grads) -> np.ndarray:
    """dq/dtheta given per-score parameter gradients.

    ``score_grads`` is a sequence whose i-th entry is d s_i / d theta. On the
    sentinel branch (q = +inf, constant in theta) the result is exactly zero.
    """
    if record.grad_index is None:
        return np.zeros_like(np.asarray(score_grads[0], dtype=float))
    return np.asarray(score_grads[record.grad_index], dtype=float)


def calibrate(model, X, Y_std, alpha: float) -> CalibrationRecord:
    """Split conformal calibration of a score model on held-out data.

    Scores are s(x_i, y_i) over the calibration set (standardized y); the
    threshold is their (1 - alpha) quantile with the +inf sentinel. For the
    resulting threshold to be finite, alpha must be at least 1/(M+1).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    scores = np.asarray(model.score_batch(X, Y_std))
    q, idx = quantile(scores, 1.0 - alpha)
    return CalibrationRecord(
        scores=scores, alpha=alpha, rank=_rank(scores.size, 1.0 - alpha),
        q=q, grad_index=idx,
    )


def min_score(model, x, restarts: int = 5, iters: int = 500, seed=0,
              grad_tol: float = 1e-4) -> tuple[float, np.ndarray]:
    """Approximate min_y s(x, y) by subgradient descent with restarts.

    Every iterate evaluates the true score, so the returned value is always
    an upper bound on the true minimum; using it as a threshold therefore
    guarantees the sublevel set is nonempty.
    """
    rng = np.random.default_rng(seed)
    n = model.n
    X_rep = np.tile(np.asarray(x, dtype=float)[None, :], (restarts, 1))
    Y = rng.normal(0.0, 2.0, size=(restarts, n))
    best_val = math.inf
    best_y = Y[0].copy()
    step0 = 0.5
    for t in range(iters):
        tape = Tape()
        Yt = tape.watch(Y)
        s = model.score_batch(X_rep, Yt, tape)
        total = ad.sum_(s)
        tape.backward(total)
        G = tape.grad_of(Yt)
        if G is None:  # score does not depend on y at all
            G = np.zeros_like(Y)
        vals = ad.value_of(s)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val = float(vals[i])
            best_y = Y[i].copy()
        Y = Y - (step0 / math.sqrt(1.0 + t)) * G
    # convergence report at the best iterate
    tape = Tape()
    yt = tape.watch(best_y)
    s = model.score_batch(np.asarray(x)[None, :], ad.reshape(yt, (1, n)), tape)
    tape.backward(ad.take(s, 0))
    g_best = tape.grad_of(yt)
    gnorm = 0.0 if g_best is None else float(np.linalg.norm(g_best))
    if gnorm > grad_tol:
        logger.warning(
            "score minimizer did not converge (subgradient norm %.2e); "
            "using best iterate", gnorm,
        )
    return best_val, best_y


def ensure_nonempty(model, x, q: float, slack: float = 1e-9, restarts: int = 5,
                    iters: int = 500, seed=0) -> float:
    """Raise q just enough that the sublevel set {y : s(x, y) <= q} is nonempty.

    Box and ellipsoid sets are nonempty for every q >= 0, so only the PICNN
    needs the guard. The returned threshold is treated as a constant in any
    gradient computation (callers must not trace through it).
    """
    if getattr(model, "kind", None) in ("box", "ellipsoid"):
        if q < 0:
            raise ValueError(
                f"{model.kind} threshold must be >= 0 for a nonempty set, got {q}"
            )
        return q
    smin, _ = min_score(model, x, restarts=restarts, iters=iters, seed=seed)
    return max(q, smin + slack)
