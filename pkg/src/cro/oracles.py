"""Brute-force inner-maximization oracles (independent of the dual route).

These deliberately avoid the duality machinery so they can certify it:
vertex enumeration for boxes, projected gradient ascent on the unit ball for
ellipsoids, and dense grid search with local refinement for PICNN sublevel
sets. Intended for small target dimensions (n <= 3).
"""

from __future__ import annotations

import itertools
import math

import numpy as np

Array = np.ndarray

EMPTY_SET = -math.inf


def box_vertex_max(lo: Array, hi: Array, c: Array) -> float:
    """max c'y over the box by enumerating all 2^n corners."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(hi < lo):
        return EMPTY_SET
    best = -math.inf
    for corner in itertools.product(*zip(lo, hi)):
        best = max(best, float(c @ np.asarray(corner)))
    return best


def ellipsoid_closed_form(mu: Array, L: Array, q: float, c: Array) -> float:
    """sqrt(q) ||Sigma^(1/2) c|| + mu'c with Sigma = L L'."""
    return math.sqrt(q) * float(np.linalg.norm(L.T @ np.asarray(c))) + float(mu @ c)


def ellipsoid_ascent_max(mu: Array, L: Array, q: float, c: Array,
                         iters: int = 3000, seed=0) -> float:
    """Projected gradient ascent on the reparametrized unit ball.

    With y = mu + sqrt(q) L u, ||u|| <= 1, the objective is linear in u; the
    ascent with renormalization projection converges to the boundary optimum
    without using the closed form.
    """
    rng = np.random.default_rng(seed)
    w = math.sqrt(q) * (L.T @ np.asarray(c, dtype=float))
    u = rng.normal(size=w.shape)
    u /= max(np.linalg.norm(u), 1.0)
    step = 0.5
    for _ in range(iters):
        u = u + step * w
        nrm = np.linalg.norm(u)
        if nrm > 1.0:
            u = u / nrm
    return float(w @ u) + float(mu @ c)


def picnn_grid_max(model, x: Array, q: float, c: Array, half_width: float = 10.0,
                   coarse: int = 400, refine_rounds: int = 6) -> tuple[float, Array | None]:
    """max c'y over {y : s(x, y) <= q} by dense grid + local refinement.

    The search box ||y||_inf <= half_width is the contract (standardized
    units). Returns (value, argmax); (-inf, None) when no grid point is
    feasible at threshold q.
    """
    n = model.n
    c = np.asarray(c, dtype=float)
    pts_per_dim = coarse if n <= 2 else 60
    center = np.zeros(n)
    hw = float(half_width)
    best_val, best_y = -math.inf, None
    for round_ in range(refine_rounds):
        axes = [np.linspace(center[i] - hw, center[i] + hw, pts_per_dim)
                for i in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        Y = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        S = model.score_batch(np.tile(np.asarray(x, dtype=float), (Y.shape[0], 1)), Y)
        feas = S <= q + 1e-12
        if not np.any(feas):
            return EMPTY_SET, None
        vals = Y[feas] @ c
        i = int(np.argmax(vals))
        cand_val, cand_y = float(vals[i]), Y[feas][i]
        if cand_val > best_val:
            best_val, best_y = cand_val, cand_y
        # shrink around the incumbent; keep a few cells of slack
        cell = 2.0 * hw / (pts_per_dim - 1)
        center = best_y.copy()
        hw = 3.0 * cell
        pts_per_dim = 61
    return best_val, best_y


def inner_max_oracle(kind: str, c: Array, *, lo=None, hi=None, mu=None, L=None,
                     q=None, model=None, x=None, half_width: float = 10.0) -> float:
    """Dispatch to the representation-specific oracle; -inf marks empty sets."""
    if kind == "box":
        return box_vertex_max(lo, hi, c)
    if kind == "ellipsoid":
        return ellipsoid_closed_form(mu, L, q, c)
    if kind == "picnn":
        val, _ = picnn_grid_max(model, x, q, c, half_width=half_width)
        return val
    raise ValueError(f"unknown uncertainty kind {kind!r}")
