"""Primal-dual interior-point solver with implicit differentiation.

Solves the reformulated programs

    min 1/2 v'Pv + c'v + c0 + t * sqrt(||Gv + h||^2 + delta)
    s.t. A_eq v = b_eq,  A_in v <= b_in

with a Mehrotra-style predictor-corrector. The norm term is smoothed into
the objective (delta > 0) instead of being lifted to a second-order cone, so
the per-iteration system stays a symmetric quasidefinite matrix and the
optimality system can be linearized uniformly for all three uncertainty
representations.

Differentiation: at an optimal point the KKT conditions

    F1 = grad f(v) + A_eq' y + A_in' lam = 0
    F2 = A_eq v - b_eq = 0
    F3 = lam o (A_in v - b_in) = 0

define v implicitly as a function of the program data; both a JVP
(:func:`differentiate_solution`) and a VJP (:func:`solution_vjp`) against
the reduced, factorized KKT matrix are provided, and :func:`solve_on_tape`
exposes the solve as an autodiff primitive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import autodiff as ad
from .reform import ConicProgram

logger = logging.getLogger("cro.solver")

Array = np.ndarray

_D_CLIP = (1e-12, 1e12)


class SolverError(RuntimeError):
    """Solve did not reach an optimal point; carries the returned status."""

    def __init__(self, status: str, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 100
    delta_smooth: float = 1e-8        # replaces ||u|| by sqrt(||u||^2 + delta)
    rho_reg: float = 1e-6             # + rho ||z||^2, training only

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter <= 0 or self.delta_smooth <= 0:
            raise ValueError("tol, max_iter, delta_smooth must be positive")
        if self.rho_reg < 0:
            raise ValueError("rho_reg must be >= 0")

    @classmethod
    def for_eval(cls, **kw) -> "SolverOptions":
        kw.setdefault("rho_reg", 0.0)
        return cls(**kw)


@dataclass
class SolveResult:
    program: ConicProgram            # numeric copy the solve ran on
    options: SolverOptions
    v: Array                         # primal (z, auxiliaries)
    eq_mult: Array                   # equality multipliers
    lam: Array                       # inequality multipliers >= 0
    slack: Array                     # b_in - A_in v >= 0
    objective: float
    status: str                      # optimal | max_iter | infeasible | unbounded
    iterations: int
    _kkt: tuple | None = field(default=None, repr=False)

    @property
    def z(self) -> Array:
        return self.v[: self.program.z_dim]

    @property
    def nu(self) -> Array:
        return self.v[self.program.z_dim:]

    @property
    def complementarity_margin(self) -> float:
        """min_i max(lam_i, s_i); small values mean a degenerate active set."""
        if self.lam.size == 0:
            return np.inf
        return float(np.min(np.maximum(self.lam, self.slack)))


def _effective_quadratic(prog: ConicProgram, rho: float) -> Array:
    P = np.array(prog.P, dtype=float, copy=True)
    if rho > 0:
        idx = np.arange(prog.z_dim)
        P[idx, idx] += 2.0 * rho
    return P


def _norm_parts(prog: ConicProgram, v: Array, delta: float):
    """(value, gradient, hessian) of t * sqrt(||Gv+h||^2 + delta)."""
    t = float(prog.t)
    if prog.G is None or t == 0.0:
        return 0.0, 0.0, 0.0
    G = prog.G
    u = G @ v + (prog.h if prog.h is not None else 0.0)
    phi = np.sqrt(u @ u + delta)
    grad = (t / phi) * (G.T @ u)
    H = (t / phi) * (G.T @ G) - (t / phi**3) * np.outer(G.T @ u, G.T @ u)
    return t * phi, grad, H


def _objective(prog: ConicProgram, P_eff: Array, v: Array, delta: float) -> float:
    val = 0.5 * v @ P_eff @ v + prog.c_lin @ v + prog.c0
    nv, _, _ = _norm_parts(prog, v, delta)
    return float(val + nv)


def _factor(M: Array, jitter: float = 0.0):
    if jitter:
        M = M + jitter * np.eye(M.shape[0])
    return lu_factor(M, check_finite=False)


def _refine(fac, M: Array, rhs: Array, x: Array, rounds: int = 2) -> Array:
    """Iterative refinement: recovers accuracy lost to the wide dynamic
    range of the scaled-complementarity diagonal (condition ~ lam/s)."""
    for _ in range(rounds):
        r = rhs - M @ x
        if np.abs(r).max(initial=0.0) <= 1e-15 * (1.0 + np.abs(rhs).max(initial=0.0)):
            break
        x = x + lu_solve(fac, r, check_finite=False)
    return x


def _solve_kkt(M: Array, rhs: Array):
    """LU solve with refinement and escalating jitter on singular systems."""
    jitter = 0.0
    for _ in range(4):
        try:
            fac = _factor(M, jitter)
            x = lu_solve(fac, rhs, check_finite=False)
            if np.all(np.isfinite(x)):
                return _refine(fac, M, rhs, x), fac
        except np.linalg.LinAlgError:
            pass
        jitter = 1e-12 if jitter == 0.0 else jitter * 1e3
        logger.debug("KKT factorization retry with jitter %.1e", jitter)
    raise SolverError("singular", "KKT system could not be factorized")


def solve(program: ConicProgram, options: SolverOptions | None = None) -> SolveResult:
    """Mehrotra predictor-corrector on the smoothed program. Deterministic."""
    opts = options or SolverOptions()
    prog = program.numeric()
    prog.validate()
    P_eff = _effective_quadratic(prog, opts.rho_reg)
    dim = prog.dim
    A_eq, b_eq = prog.A_eq, prog.b_eq
    A_in, b_in = prog.A_in, prog.b_in
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]

    # presolve: an all-zero equality row with nonzero rhs is a certificate
    if m_eq:
        zero_rows = np.where(np.abs(A_eq).max(axis=1) < 1e-14)[0]
        bad = zero_rows[np.abs(b_eq[zero_rows]) > 1e-10]
        if bad.size:
            return SolveResult(prog, opts, np.zeros(dim), np.zeros(m_eq),
                               np.zeros(m_in), np.zeros(m_in), np.inf,
                               "infeasible", 0)
        keep = np.abs(A_eq).max(axis=1) >= 1e-14
        if not keep.all():
            A_eq, b_eq = A_eq[keep], b_eq[keep]
            m_eq = A_eq.shape[0]

    scale = 1.0 + max(
        np.abs(prog.c_lin).max(initial=0.0),
        np.abs(b_eq).max(initial=0.0),
        np.abs(b_in).max(initial=0.0),
    )

    v = (np.linalg.lstsq(A_eq, b_eq, rcond=None)[0] if m_eq else np.zeros(dim))
    if m_in == 0:
        return _solve_equality_newton(prog, opts, P_eff, A_eq, b_eq, v, scale)
    s = np.maximum(b_in - A_in @ v, 1.0)
    lam = np.ones(m_in)
    y = np.zeros(m_eq)

    status = "max_iter"
    it = 0
    for it in range(1, opts.max_iter + 1):
        _, ngrad, nhess = _norm_parts(prog, v, opts.delta_smooth)
        grad_f = P_eff @ v + prog.c_lin + ngrad
        H = P_eff + nhess

        r_d = grad_f + (A_eq.T @ y if m_eq else 0.0) + A_in.T @ lam
        r_eq = A_eq @ v - b_eq if m_eq else np.zeros(0)
        r_in = A_in @ v + s - b_in
        mu = float(lam @ s) / m_in
        res = max(np.abs(r_d).max(), np.abs(r_eq).max(initial=0.0),
                  np.abs(r_in).max())
        if res <= opts.tol * scale and mu <= opts.tol:
            status = "optimal"
            break
        if max(np.abs(lam).max(), np.abs(y).max(initial=0.0)) > 1e10:
            if res > 1e-6 * scale:
                status = "infeasible"
                break
        if np.abs(v).max() > 1e12:
            status = "unbounded"
            break

        D = lam / s
        M11 = H + (A_in.T * D) @ A_in
        if m_eq:
            M = np.block([[M11, A_eq.T], [A_eq, np.zeros((m_eq, m_eq))]])
        else:
            M = M11

        def newton(r_c):
            rhs_v = -r_d - A_in.T @ ((lam * r_in - r_c) / s)
            rhs = np.concatenate([rhs_v, -r_eq]) if m_eq else rhs_v
            sol, _ = _solve_kkt(M, rhs)
            dv = sol[:dim]
            dy = sol[dim:] if m_eq else np.zeros(0)
            ds = -r_in - A_in @ dv
            dlam = -(r_c + lam * ds) / s
            return dv, dy, dlam, ds

        def max_step(x, dx):
            neg = dx < 0
            if not np.any(neg):
                return 1.0
            return float(min(1.0, np.min(-x[neg] / dx[neg])))

        # predictor
        dv_a, dy_a, dlam_a, ds_a = newton(lam * s)
        ap = max_step(s, ds_a)
        adl = max_step(lam, dlam_a)
        mu_aff = float((lam + adl * dlam_a) @ (s + ap * ds_a)) / m_in
        sigma = min(1.0, max(1e-8, (mu_aff / mu) ** 3))

        # corrector
        r_c = lam * s - sigma * mu + dlam_a * ds_a
        dv, dy, dlam, ds = newton(r_c)
        eta = min(0.9999, max(0.99, 1.0 - 10.0 * mu))
        a_p = min(1.0, eta * max_step(s, ds))
        a_d = min(1.0, eta * max_step(lam, dlam))
        v = v + a_p * dv
        s = s + a_p * ds
        lam = lam + a_d * dlam
        if m_eq:
            y = y + a_d * dy

    obj = _objective(prog, P_eff, v, opts.delta_smooth)
    if status == "max_iter" and it == opts.max_iter:
        # distinguish a stalled-but-feasible run from an infeasible one
        r_eq = A_eq @ v - b_eq if m_eq else np.zeros(0)
        r_in = np.maximum(A_in @ v - b_in, 0.0)
        if max(np.abs(r_eq).max(initial=0.0), r_in.max(initial=0.0)) > 1e-6 * scale:
            status = "infeasible"
    result = SolveResult(prog, opts, v, y, lam, np.maximum(s, 0.0), obj, status, it)
    if status == "optimal" and result.complementarity_margin < 1e-10:
        logger.warning(
            "strict complementarity margin %.2e below 1e-10; implicit "
            "gradients are subgradients here", result.complementarity_margin,
        )
    return result


def _solve_equality_newton(prog, opts, P_eff, A_eq, b_eq, v, scale) -> SolveResult:
    """No inequalities: damped Newton on the equality KKT system."""
    m_eq = A_eq.shape[0]
    dim = prog.dim
    y = np.zeros(m_eq)
    status = "max_iter"
    for it in range(1, opts.max_iter + 1):
        _, ngrad, nhess = _norm_parts(prog, v, opts.delta_smooth)
        grad_f = P_eff @ v + prog.c_lin + ngrad
        r_d = grad_f + (A_eq.T @ y if m_eq else 0.0)
        r_eq = A_eq @ v - b_eq if m_eq else np.zeros(0)
        if max(np.abs(r_d).max(), np.abs(r_eq).max(initial=0.0)) <= opts.tol * scale:
            status = "optimal"
            break
        H = P_eff + nhess
        if m_eq:
            M = np.block([[H, A_eq.T], [A_eq, np.zeros((m_eq, m_eq))]])
            rhs = np.concatenate([-r_d, -r_eq])
        else:
            M, rhs = H, -r_d
        sol, _ = _solve_kkt(M, rhs)
        v = v + sol[:dim]
        y = y + sol[dim:] if m_eq else y
    obj = _objective(prog, P_eff, v, opts.delta_smooth)
    return SolveResult(prog, opts, v, y, np.zeros(0), np.zeros(0), obj, status, it)


# ---------------------------------------------------------------------------
# implicit differentiation


@dataclass
class ProgramPerturbation:
    """Directional perturbations of the program data (missing -> zero)."""

    dP: Array | None = None
    dc_lin: Array | None = None
    dA_eq: Array | None = None
    db_eq: Array | None = None
    dA_in: Array | None = None
    db_in: Array | None = None
    dG: Array | None = None
    dh: Array | None = None
    dt: float = 0.0


@dataclass
class ProgramGrads:
    """Adjoints of the program data for a scalar downstream loss."""

    dP: Array
    dc_lin: Array
    dA_eq: Array
    db_eq: Array
    dA_in: Array
    db_in: Array
    dG: Array | None
    dh: Array | None
    dt: float


def _kkt_pieces(result: SolveResult):
    """Build (and cache) the reduced KKT factorization at the solution."""
    if result._kkt is not None:
        return result._kkt
    if result.status != "optimal":
        raise SolverError(result.status, "cannot differentiate a non-optimal solve")
    prog = result.program
    opts = result.options
    P_eff = _effective_quadratic(prog, opts.rho_reg)
    _, _, nhess = _norm_parts(prog, result.v, opts.delta_smooth)
    H = P_eff + nhess
    A_in, A_eq = prog.A_in, prog.A_eq
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    lam = np.maximum(result.lam, _D_CLIP[0])
    s = np.maximum(result.slack, _D_CLIP[0])
    D = np.clip(lam / s, *_D_CLIP)
    M11 = H + ((A_in.T * D) @ A_in if m_in else 0.0)
    if m_eq:
        M = np.block([[M11, A_eq.T], [A_eq, np.zeros((m_eq, m_eq))]])
    else:
        M = np.atleast_2d(M11)
    try:
        fac = _factor(M)
        probe = lu_solve(fac, np.ones(M.shape[0]), check_finite=False)
        ok = np.all(np.isfinite(probe))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        logger.warning("singular KKT system; falling back to least squares")
        fac = ("lstsq",)
    result._kkt = (fac, D, s, lam, M)
    return result._kkt


def _kkt_solve(result: SolveResult, rhs: Array) -> Array:
    fac, _, _, _, M = _kkt_pieces(result)
    if isinstance(fac[0], str):  # least-squares fallback for singular systems
        return np.linalg.lstsq(M, rhs, rcond=None)[0]
    x = lu_solve(fac, rhs, check_finite=False)
    return _refine(fac, M, rhs, x)


def _norm_geometry(prog: ConicProgram, v: Array, delta: float):
    G = prog.G
    u = G @ v + (prog.h if prog.h is not None else 0.0)
    phi = float(np.sqrt(u @ u + delta))
    # M_mat = d(u/phi)/du, symmetric PSD
    M_mat = (np.eye(u.size) - np.outer(u, u) / phi**2) / phi
    return u, phi, M_mat


def differentiate_solution(result: SolveResult, pert: ProgramPerturbation) -> Array:
    """JVP: first-order response dv of the primal solution to a data change."""
    prog = result.program
    fac, D, s, lam, _ = _kkt_pieces(result)
    v, y = result.v, result.eq_mult
    dim = prog.dim
    m_eq, m_in = prog.A_eq.shape[0], prog.A_in.shape[0]

    rhs1 = np.zeros(dim)
    if pert.dP is not None:
        rhs1 -= pert.dP @ v
    if pert.dc_lin is not None:
        rhs1 -= pert.dc_lin
    if pert.dA_eq is not None and m_eq:
        rhs1 -= pert.dA_eq.T @ y
    if pert.dA_in is not None and m_in:
        rhs1 -= pert.dA_in.T @ lam
    if prog.G is not None and float(prog.t) != 0.0 and (
        pert.dt or pert.dG is not None or pert.dh is not None
    ):
        u, phi, M_mat = _norm_geometry(prog, v, result.options.delta_smooth)
        t = float(prog.t)
        if pert.dt:
            rhs1 -= pert.dt * (prog.G.T @ u) / phi
        if pert.dG is not None:
            rhs1 -= t * (pert.dG.T @ u) / phi
            rhs1 -= t * prog.G.T @ (M_mat @ (pert.dG @ v))
        if pert.dh is not None:
            rhs1 -= t * prog.G.T @ (M_mat @ pert.dh)

    rhs2 = np.zeros(m_eq)
    if m_eq:
        if pert.dA_eq is not None:
            rhs2 -= pert.dA_eq @ v
        if pert.db_eq is not None:
            rhs2 += pert.db_eq
    r3 = np.zeros(m_in)
    if m_in:
        if pert.dA_in is not None:
            r3 -= pert.dA_in @ v
        if pert.db_in is not None:
            r3 += pert.db_in

    top = rhs1 + (prog.A_in.T @ (D * r3) if m_in else 0.0)
    rhs = np.concatenate([top, rhs2]) if m_eq else top
    sol = _kkt_solve(result, rhs)
    return sol[:dim]


def solution_vjp(result: SolveResult, grad_v: Array) -> ProgramGrads:
    """VJP: adjoints of the program data given dL/dv. Reuses the factorization."""
    prog = result.program
    fac, D, s, lam, _ = _kkt_pieces(result)
    v, y = result.v, result.eq_mult
    dim = prog.dim
    m_eq, m_in = prog.A_eq.shape[0], prog.A_in.shape[0]

    rhs = np.concatenate([grad_v, np.zeros(m_eq)]) if m_eq else np.asarray(grad_v)
    sol = _kkt_solve(result, rhs)
    w_v = sol[:dim]
    w_y = sol[dim:] if m_eq else np.zeros(0)
    w_lam_t = D * (prog.A_in @ w_v) if m_in else np.zeros(0)  # Lambda * w_lam

    dP = -np.outer(w_v, v)
    dc = -w_v
    dA_eq = -(np.outer(y, w_v) + np.outer(w_y, v)) if m_eq else np.zeros((0, dim))
    db_eq = w_y.copy()
    dA_in = -(np.outer(lam, w_v) + np.outer(w_lam_t, v)) if m_in else np.zeros((0, dim))
    db_in = w_lam_t.copy()
    dG = dh = None
    dt = 0.0
    if prog.G is not None and float(prog.t) != 0.0:
        u, phi, M_mat = _norm_geometry(prog, v, result.options.delta_smooth)
        t = float(prog.t)
        mgw = M_mat @ (prog.G @ w_v)
        dt = -float(w_v @ (prog.G.T @ u)) / phi
        dh = -t * mgw
        dG = -t * (np.outer(u / phi, w_v) + np.outer(mgw, v))
    return ProgramGrads(dP=dP, dc_lin=dc, dA_eq=dA_eq, db_eq=db_eq,
                        dA_in=dA_in, db_in=db_in, dG=dG, dh=dh, dt=dt)


_TRACKABLE = ("P", "c_lin", "A_eq", "b_eq", "A_in", "b_in", "G", "h", "t")


def solve_on_tape(program: ConicProgram, options: SolverOptions | None = None):
    """Solve and expose z* as an autodiff primitive.

    Returns (z, result): z is a Tensor when any program field is traced, in
    which case its backward pass runs :func:`solution_vjp` against the stored
    factorization and routes adjoints into the traced fields.
    """
    result = solve(program, options)
    if result.status != "optimal":
        raise SolverError(
            result.status,
            f"solver returned status {result.status!r} after "
            f"{result.iterations} iterations",
        )
    tracked = [(name, getattr(program, name)) for name in _TRACKABLE
               if isinstance(getattr(program, name), ad.Tensor)]
    if not tracked:
        return result.z.copy(), result
    tape = tracked[0][1].tape
    z_dim = program.z_dim
    dim = result.program.dim

    grad_field = {"P": "dP", "c_lin": "dc_lin", "A_eq": "dA_eq", "b_eq": "db_eq",
                  "A_in": "dA_in", "b_in": "db_in", "G": "dG", "h": "dh", "t": "dt"}

    def backward(g):
        g_v = np.zeros(dim)
        g_v[:z_dim] = np.asarray(g)
        grads = solution_vjp(result, g_v)
        out = []
        for name, tensor in tracked:
            val = getattr(grads, grad_field[name])
            if val is None:
                out.append(None)
                continue
            val = np.asarray(val, dtype=float)
            out.append(val.reshape(tensor.data.shape))
        return out

    z_tensor = tape._record(result.z.copy(), tuple(t.index for _, t in tracked),
                            backward)
    return z_tensor, result
