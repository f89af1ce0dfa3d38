"""Downstream decision tasks.

A task is a tuple (F, f, g): the realized loss is y' F z + f(z) with
f(z) = 1/2 z' P z + p_lin' z + c0, subject to affine constraints
A_ub z <= b_ub and A_eq z = b_eq. Both benchmark tasks fit this template,
which keeps every robust reformulation an LP/QP with an optional smoothed
norm term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


@dataclass
class TaskSpec:
    """Bilinear-plus-convex-quadratic decision task with affine constraints."""

    F: Array                 # (n, p): couples the uncertain y to the decision
    P: Array                 # (p, p) PSD quadratic term of f
    p_lin: Array             # (p,)
    c0: float                # constant term of f (affects reported loss only)
    A_ub: Array              # (m_in, p)
    b_ub: Array              # (m_in,)
    A_eq: Array              # (m_eq, p)
    b_eq: Array              # (m_eq,)
    name: str = "task"

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        self.p_lin = np.asarray(self.p_lin, dtype=float)
        self.A_ub = np.atleast_2d(np.asarray(self.A_ub, dtype=float))
        self.b_ub = np.asarray(self.b_ub, dtype=float)
        self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        self.b_eq = np.asarray(self.b_eq, dtype=float)
        p = self.F.shape[1]
        if self.P.shape != (p, p) or self.p_lin.shape != (p,):
            raise ValueError("objective blocks inconsistent with decision dim")
        if not np.allclose(self.P, self.P.T):
            raise ValueError("P must be symmetric")
        # PSD check via Cholesky with a small jitter
        np.linalg.cholesky(self.P + 1e-10 * np.eye(p))

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def p(self) -> int:
        return self.F.shape[1]

    def f_tilde(self, z: Array) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.p_lin @ z + self.c0)

    def task_loss(self, y: Array, z: Array) -> float:
        """Realized loss once the true y is revealed."""
        return float(np.asarray(y) @ self.F @ np.asarray(z)) + self.f_tilde(z)

    def check_feasible(self, z: Array, tol: float = 1e-8) -> bool:
        z = np.asarray(z, dtype=float)
        ok = True
        if self.A_ub.size:
            ok &= bool(np.all(self.A_ub @ z - self.b_ub <= tol))
        if self.A_eq.size:
            ok &= bool(np.max(np.abs(self.A_eq @ z - self.b_eq), initial=0.0) <= tol)
        return ok


@dataclass
class BatteryParams:
    """Grid-battery arbitrage constants (24 h horizon)."""

    horizon: int = 24
    capacity: float = 1.0        # B
    efficiency: float = 0.9      # gamma, charge efficiency
    c_in: float = 0.5            # max charging rate
    c_out: float = 0.2           # max discharging rate
    lam: float = 0.1             # weight on keeping state of charge near B/2
    eps: float = 0.05            # weight discouraging fast cycling

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must be in (0, 1]")
        for name in ("c_in", "c_out", "lam", "eps", "capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def battery_taskspec(params: BatteryParams | None = None) -> TaskSpec:
    """Battery arbitrage: decide hourly charge/discharge against prices y.

    Decision z = (z_in, z_out, z_state) in R^{3T}. Loss:

        sum_t y_t (z_in - z_out)_t + lam ||z_state - B/2||^2
        + eps ||z_in||^2 + eps ||z_out||^2

    State recursion z_state_t = z_state_{t-1} - z_out_t + gamma z_in_t with
    z_state_0 = B/2, and box limits on all three blocks.
    """
    pr = params or BatteryParams()
    T, B, g = pr.horizon, pr.capacity, pr.efficiency
    p = 3 * T
    F = np.hstack([np.eye(T), -np.eye(T), np.zeros((T, T))])

    P = np.zeros((p, p))
    P[:T, :T] = 2.0 * pr.eps * np.eye(T)
    P[T:2 * T, T:2 * T] = 2.0 * pr.eps * np.eye(T)
    P[2 * T:, 2 * T:] = 2.0 * pr.lam * np.eye(T)
    p_lin = np.concatenate([np.zeros(2 * T), -pr.lam * B * np.ones(T)])
    c0 = pr.lam * T * (B / 2.0) ** 2

    # state recursion: z_state_t - z_state_{t-1} + z_out_t - gamma z_in_t = 0,
    # with z_state_0 = B/2 folded into the t = 1 right-hand side
    A_eq = np.zeros((T, p))
    b_eq = np.zeros(T)
    for t in range(T):
        A_eq[t, t] = -g              # z_in_t
        A_eq[t, T + t] = 1.0         # z_out_t
        A_eq[t, 2 * T + t] = 1.0     # z_state_t
        if t > 0:
            A_eq[t, 2 * T + t - 1] = -1.0
    b_eq[0] = B / 2.0

    eye = np.eye(p)
    A_ub = np.vstack([eye, -eye])
    ub = np.concatenate([pr.c_in * np.ones(T), pr.c_out * np.ones(T), B * np.ones(T)])
    b_ub = np.concatenate([ub, np.zeros(p)])  # z <= ub, -z <= 0

    return TaskSpec(F=F, P=P, p_lin=p_lin, c0=c0, A_ub=A_ub, b_ub=b_ub,
                    A_eq=A_eq, b_eq=b_eq, name="battery")


def portfolio_taskspec(n: int) -> TaskSpec:
    """Worst-case return portfolio: loss -y'z over the probability simplex."""
    if n < 1:
        raise ValueError("need at least one asset")
    return TaskSpec(
        F=-np.eye(n),
        P=np.zeros((n, n)),
        p_lin=np.zeros(n),
        c0=0.0,
        A_ub=-np.eye(n),
        b_ub=np.zeros(n),
        A_eq=np.ones((1, n)),
        b_eq=np.array([1.0]),
        name="portfolio",
    )
