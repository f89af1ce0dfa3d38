"""Robust reformulations: min-max to single minimization via LP/QCLP duality.

For a fixed decision z, the worst case over the uncertainty set is
max { c'y : y in Omega(x) } with c = F z. Each uncertainty representation
admits an exact dual of that inner maximization, which folds into the outer
minimization to give one convex program in (z, dual variables):

* box [lo - q, hi + q]: LP dual with multiplier nu in R^n,
  value (hi - lo + 2q)' nu + (lo - q)' c  s.t.  nu >= 0, nu >= c.
* ellipsoid (y - mu)' Sigma^-1 (y - mu) <= q: closed-form dual value
  sqrt(q) ||Sigma^(1/2) c|| + mu' c, a smoothed second-order-cone term.
* PICNN sublevel set: the set is the projection of a polyhedron
  { A [y; sigma] <= b } built from the gated layer matrices (the ReLU
  equalities relax exactly because the sigma-path weights are nonnegative),
  so the inner max is an LP with dual  min b' nu  s.t.  A' nu = (c; 0),
  nu >= 0.

Program data may be autodiff Tensors, so thresholds and network weights can
be trained through the solver.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .tasks import TaskSpec

logger = logging.getLogger("cro.reform")

Array = np.ndarray


@dataclass
class ConicProgram:
    """min 1/2 v'Pv + c_lin'v + c0 + t ||G v + h||  s.t. equalities/inequalities.

    The first ``z_dim`` entries of v are the decision z; the remainder are
    dual auxiliaries introduced by the reformulation. Fields may be autodiff
    Tensors while building training graphs; ``numeric()`` strips them.
    """

    P: object
    c_lin: object
    c0: float
    A_eq: object
    b_eq: object
    A_in: object
    b_in: object
    z_dim: int
    G: object = None
    h: object = None
    t: object = 0.0

    @property
    def dim(self) -> int:
        return np.asarray(ad.value_of(self.c_lin)).shape[0]

    def numeric(self) -> "ConicProgram":
        g = None if self.G is None else np.atleast_2d(ad.value_of(self.G))
        return ConicProgram(
            P=ad.value_of(self.P),
            c_lin=ad.value_of(self.c_lin),
            c0=float(ad.value_of(self.c0)),
            A_eq=np.atleast_2d(ad.value_of(self.A_eq)),
            b_eq=np.atleast_1d(ad.value_of(self.b_eq)),
            A_in=np.atleast_2d(ad.value_of(self.A_in)),
            b_in=np.atleast_1d(ad.value_of(self.b_in)),
            z_dim=self.z_dim,
            G=g,
            h=None if self.h is None else ad.value_of(self.h),
            t=float(ad.value_of(self.t)),
        )

    def validate(self) -> None:
        prog = self.numeric()
        d = prog.dim
        if prog.P.shape != (d, d):
            raise ValueError(f"P shape {prog.P.shape} != ({d}, {d})")
        np.linalg.cholesky(prog.P + 1e-10 * np.eye(d))  # PSD with jitter
        if prog.t < 0:
            raise ValueError("norm-term weight t must be >= 0")
        for A, b, kind in ((prog.A_eq, prog.b_eq, "eq"), (prog.A_in, prog.b_in, "in")):
            if A.size and (A.shape[1] != d or A.shape[0] != b.shape[0]):
                raise ValueError(f"{kind} block dims inconsistent: {A.shape} vs {b.shape}")
        if prog.G is not None and prog.G.shape[1] != d:
            raise ValueError("norm-term matrix G has wrong column count")


@dataclass
class Standardizer:
    """Elementwise affine transform y_std = (y - mu) / w with w > 0."""

    mu: Array
    w: Array

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if np.any(self.w <= 0):
            raise ValueError("standardizer scale must be positive")

    @classmethod
    def fit(cls, Y: Array, floor: float = 1e-8) -> "Standardizer":
        Y = np.asarray(Y, dtype=float)
        return cls(Y.mean(axis=0), np.maximum(Y.std(axis=0), floor))

    @classmethod
    def identity(cls, n: int) -> "Standardizer":
        return cls(np.zeros(n), np.ones(n))

    def transform(self, Y: Array) -> Array:
        return (np.asarray(Y, dtype=float) - self.mu) / self.w

    def inverse(self, Y_std: Array) -> Array:
        return np.asarray(Y_std, dtype=float) * self.w + self.mu


def standardized_task(task: TaskSpec, std: Standardizer) -> TaskSpec:
    """Rewrite the task so the inner maximization runs in standardized y units.

    With y = W y_std + mu (W = diag(w)), the worst case c'y over the raw set
    equals (W c)' y_std + mu'c over the transformed set; so the effective
    bilinear coupling becomes W F and mu'Fz moves into the linear cost. The
    program value stays the raw-unit robust value.
    """
    F_t = std.w[:, None] * task.F
    return TaskSpec(
        F=F_t,
        P=task.P,
        p_lin=task.p_lin + task.F.T @ std.mu,
        c0=task.c0,
        A_ub=task.A_ub,
        b_ub=task.b_ub,
        A_eq=task.A_eq,
        b_eq=task.b_eq,
        name=task.name,
    )


def _hstack_const(left: Array, width: int) -> Array:
    return np.hstack([left, np.zeros((left.shape[0], width))]) if left.size else np.zeros((0, left.shape[1] + width))


def reform_box(lo, hi, q, task: TaskSpec) -> ConicProgram:
    """Joint program for a box set widened to [lo - q, hi + q].

    Variables (z, nu in R^n); objective (hi - lo + 2q)'nu + (lo - q)'Fz + f(z)
    with constraints nu >= 0, nu - Fz >= 0 and the task constraints on z.
    """
    n, p = task.n, task.p
    y_lo = ad.sub(lo, q)
    y_hi = ad.add(hi, q)
    lo_v, hi_v = ad.value_of(y_lo), ad.value_of(y_hi)
    if np.any(hi_v < lo_v):
        raise ValueError(
            "box collapsed: upper bound below lower bound (threshold q too "
            f"negative: widths down to {float(np.min(hi_v - lo_v)):.3g})"
        )
    c_z = ad.add(task.p_lin, ad.matmul(task.F.T, y_lo))
    c_nu = ad.sub(y_hi, y_lo)
    c_lin = ad.concat([c_z, c_nu], axis=0)

    dim = p + n
    P = np.zeros((dim, dim))
    P[:p, :p] = task.P
    A_in = np.vstack([
        _hstack_const(task.A_ub, n),
        np.hstack([np.zeros((n, p)), -np.eye(n)]),   # nu >= 0
        np.hstack([task.F, -np.eye(n)]),             # Fz - nu <= 0
    ])
    b_in = np.concatenate([task.b_ub, np.zeros(2 * n)])
    A_eq = _hstack_const(task.A_eq, n)
    return ConicProgram(P=P, c_lin=c_lin, c0=task.c0, A_eq=A_eq, b_eq=task.b_eq,
                        A_in=A_in, b_in=b_in, z_dim=p)


def reform_ellipsoid(mu, L, q, task: TaskSpec) -> ConicProgram:
    """Program for an ellipsoidal set: norm term sqrt(q) ||L'Fz|| + mu'Fz + f(z).

    The inner maximization has the closed-form value above (its scalar dual
    multiplier is ||Sigma^(1/2)c|| / (2 sqrt(q))), so no auxiliary variables
    are needed.
    """
    q_val = float(ad.value_of(q))
    if q_val <= 0:
        logger.warning("ellipsoid threshold q=%.3g <= 0; flooring at 1e-12", q_val)
        q = 1e-12
    t = ad.sqrt(q) if isinstance(q, ad.Tensor) else math.sqrt(float(q))
    G = ad.matmul(ad.transpose(L), task.F)
    c_lin = ad.add(task.p_lin, ad.matmul(task.F.T, mu))
    return ConicProgram(P=task.P.copy(), c_lin=c_lin, c0=task.c0,
                        A_eq=task.A_eq, b_eq=task.b_eq,
                        A_in=task.A_ub, b_in=task.b_ub,
                        z_dim=task.p, G=G, h=np.zeros(task.n), t=t)


@dataclass
class PicnnDualData:
    """Matrix form A [y; sigma; (kappa)] <= b of the sublevel-set polyhedron.

    Unmodified output: A is (2Ld+1) x (n+Ld) and b has the threshold folded
    into its last entry. With the inf-norm penalty (eps > 0) an extra kappa
    column and 2n rows kappa >= +-y_i are appended.
    """

    A: object
    b: object
    n: int
    d: int
    depth: int
    eps: float = 0.0

    @property
    def rows(self) -> int:
        return np.asarray(ad.value_of(self.b)).shape[0]

    @property
    def cols(self) -> int:
        return self.n + self.depth * self.d + (1 if self.eps > 0 else 0)


def build_picnn_dual(model, x, q, tape=None) -> PicnnDualData:
    """Assemble the polyhedral lift of {y : s(x, y) <= q} at one input x.

    Row layout: Ld rows of -sigma_l <= 0; then for l = 0..L-1 the layer rows
    V_l y + W_l sigma_l - sigma_{l+1} <= -b_l (no W term at l = 0 since
    sigma_0 = 0); finally the threshold row V_L y + W_L sigma_L <= q - b_L.
    When the model output carries eps ||y||_inf (eps > 0), a kappa variable
    with rows y_i - kappa <= 0, -y_i - kappa <= 0 and coefficient eps in the
    threshold row is appended; for eps = 0 those dual variables are forced to
    zero by the kappa column, so the unmodified layout with a zero V_L row is
    equivalent and used directly.
    """
    Ws, Vs, bs = model.gated_at(x, tape)
    L, d, n = model.depth, model.d, model.n
    eps = model.eps_inf if (model.modified_output and model.eps_inf > 0) else 0.0
    extra = 1 if eps > 0 else 0
    rows = 2 * L * d + 1 + (2 * n if eps > 0 else 0)
    cols = n + L * d + extra

    base = np.zeros((rows, cols))
    for l in range(L):  # -sigma_{l+1} <= 0
        r0 = l * d
        c0 = n + l * d
        base[r0:r0 + d, c0:c0 + d] = -np.eye(d)
    for l in range(L):  # layer rows: -I on sigma_{l+1}
        r0 = L * d + l * d
        base[r0:r0 + d, n + l * d: n + (l + 1) * d] = -np.eye(d)
    if eps > 0:  # kappa rows: +-y_i - kappa <= 0
        r0 = 2 * L * d
        base[r0:r0 + n, :n] = np.eye(n)
        base[r0 + n:r0 + 2 * n, :n] = -np.eye(n)
        base[r0:r0 + 2 * n, -1] = -1.0
        base[-1, -1] = eps
    threshold_row = rows - 1 if eps == 0 else 2 * L * d + 2 * n

    blocks = []
    for l in range(L):
        r0 = L * d + l * d
        blocks.append((r0, 0, Vs[l]))
        if l >= 1:
            blocks.append((r0, n + (l - 1) * d, Ws[l]))
    if Vs[L] is not None:
        blocks.append((threshold_row, 0, ad.reshape(Vs[L], (1, n))))
    blocks.append((threshold_row, n + (L - 1) * d, ad.reshape(Ws[L], (1, d))))
    A = ad.place_blocks(base, blocks)

    parts = [np.zeros(L * d)]
    for l in range(L):
        parts.append(ad.mul(bs[l], -1.0))
    if eps > 0:
        parts.append(np.zeros(2 * n))
    qv = q if isinstance(q, ad.Tensor) else float(ad.value_of(q))
    parts.append(ad.reshape(ad.sub(qv, bs[L]), (1,)))
    b = ad.concat(parts, axis=0)
    return PicnnDualData(A=A, b=b, n=n, d=d, depth=L, eps=eps)


def reform_picnn(model, x, q, task: TaskSpec, tape=None) -> ConicProgram:
    """Joint program for a PICNN sublevel set.

    Variables (z, nu) with nu >= 0 one per polyhedron row; objective
    b'nu + f(z); coupling A'nu = (Fz; 0). An infeasible program here means
    the sublevel set is unbounded in a direction the task cannot avoid;
    enabling the modified output (compact sets) is the fix.
    """
    dd = build_picnn_dual(model, x, q, tape)
    p = task.p
    rows, cols = dd.rows, dd.cols
    dim = p + rows

    c_lin = ad.concat([np.asarray(task.p_lin, dtype=float), dd.b], axis=0)
    P = np.zeros((dim, dim))
    P[:p, :p] = task.P

    # A' nu - [F; 0] z = 0, stacked with the task equalities
    base_eq = np.zeros((cols, dim))
    base_eq[:task.n, :p] = -task.F
    A_couple = ad.place_blocks(base_eq, [(0, p, ad.transpose(dd.A))])
    task_eq = _hstack_const(task.A_eq, rows)
    A_eq = ad.concat([A_couple, task_eq], axis=0) if task_eq.size else A_couple
    b_eq = np.concatenate([np.zeros(cols), task.b_eq])

    A_in = np.vstack([
        _hstack_const(task.A_ub, rows),
        np.hstack([np.zeros((rows, p)), -np.eye(rows)]),
    ])
    b_in = np.concatenate([task.b_ub, np.zeros(rows)])
    return ConicProgram(P=P, c_lin=c_lin, c0=task.c0, A_eq=A_eq, b_eq=b_eq,
                        A_in=A_in, b_in=b_in, z_dim=p)


def picnn_primal_lp(dd: PicnnDualData, c: Array) -> ConicProgram:
    """The lifted inner maximization itself: max c'y s.t. A [y; sigma] <= b.

    Stated as minimization of -c'y for the solver; used by oracles and the
    relaxation-tightness checks.
    """
    cols = dd.cols
    c_full = np.zeros(cols)
    c_full[:dd.n] = -np.asarray(c, dtype=float)
    return ConicProgram(
        P=np.zeros((cols, cols)), c_lin=c_full, c0=0.0,
        A_eq=np.zeros((0, cols)), b_eq=np.zeros(0),
        A_in=ad.value_of(dd.A), b_in=ad.value_of(dd.b), z_dim=cols,
    )


def tighten_relaxed_solution(model, x, y: Array) -> tuple[list[Array], float]:
    """Coordinate-decrease recovery: shrink lifted activations onto the network.

    Given any feasible (y, sigma) of the polyhedral lift, lowering each sigma
    entry until a constraint binds reproduces the actual ReLU activations
    (nonnegative sigma-path weights mean lowering never hurts feasibility and
    never raises the output). Returns the recovered activations and the true
    score s(x, y).
    """
    Ws, Vs, bs = model.gated_at(x)
    sigma_hat: list[Array] = []
    prev = np.zeros(model.d)
    for l in range(model.depth):
        pre = Vs[l] @ np.asarray(y) + bs[l]
        if l >= 1:
            pre = pre + Ws[l] @ prev
        prev = np.maximum(pre, 0.0)
        sigma_hat.append(prev)
    score = float(model.score(x, y))
    return sigma_hat, score
