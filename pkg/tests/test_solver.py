import numpy as np
import pytest

from cro import autodiff as ad
from cro.autodiff import Parameter, Tape
from cro.reform import ConicProgram
from cro.solver import (
    ProgramPerturbation,
    SolverError,
    SolverOptions,
    SolveResult,
    differentiate_solution,
    solution_vjp,
    solve,
    solve_on_tape,
)
from cro.tasks import battery_taskspec

EVAL = SolverOptions.for_eval()


def unconstrained(P, c):
    d = len(c)
    return ConicProgram(P=np.asarray(P, float), c_lin=np.asarray(c, float), c0=0.0,
                        A_eq=np.zeros((0, d)), b_eq=np.zeros(0),
                        A_in=np.zeros((0, d)), b_in=np.zeros(0), z_dim=d)


def simplex_lp(c):
    n = len(c)
    return ConicProgram(P=np.zeros((n, n)), c_lin=np.asarray(c, float), c0=0.0,
                        A_eq=np.ones((1, n)), b_eq=np.array([1.0]),
                        A_in=-np.eye(n), b_in=np.zeros(n), z_dim=n)


class TestSolve:
    def test_scalar_quadratic(self):
        res = solve(unconstrained([[1.0]], [-1.0]), EVAL)
        assert res.status == "optimal"
        assert res.v[0] == pytest.approx(1.0, abs=1e-9)
        assert res.objective == pytest.approx(-0.5, abs=1e-9)

    def test_simplex_vertex(self):
        res = solve(simplex_lp([-1.0, -2.0]), EVAL)
        assert res.status == "optimal"
        np.testing.assert_allclose(res.v, [0.0, 1.0], atol=1e-7)
        assert res.objective == pytest.approx(-2.0, abs=1e-8)

    def test_battery_qp_feasibility_audit(self):
        task = battery_taskspec()
        rng = np.random.default_rng(0)
        for _ in range(5):
            y = rng.normal(40.0, 15.0, size=task.n)
            prog = ConicProgram(
                P=task.P, c_lin=task.p_lin + task.F.T @ y, c0=task.c0,
                A_eq=task.A_eq, b_eq=task.b_eq, A_in=task.A_ub, b_in=task.b_ub,
                z_dim=task.p,
            )
            res = solve(prog, EVAL)
            assert res.status == "optimal"
            z = res.z
            assert np.max(task.A_ub @ z - task.b_ub) <= 1e-8
            assert np.max(np.abs(task.A_eq @ z - task.b_eq)) <= 1e-8

    def test_determinism(self):
        prog = simplex_lp([-1.0, 0.5, -0.2])
        r1 = solve(prog, EVAL)
        r2 = solve(prog, EVAL)
        assert np.array_equal(r1.v, r2.v)
        assert r1.objective == r2.objective
        assert r1.iterations == r2.iterations

    def test_infeasible_zero_row(self):
        prog = ConicProgram(P=np.eye(1), c_lin=np.zeros(1), c0=0.0,
                            A_eq=np.zeros((1, 1)), b_eq=np.array([1.0]),
                            A_in=-np.eye(1), b_in=np.zeros(1), z_dim=1)
        assert solve(prog, EVAL).status == "infeasible"

    def test_infeasible_contradictory_equalities(self):
        prog = ConicProgram(P=np.eye(1), c_lin=np.zeros(1), c0=0.0,
                            A_eq=np.array([[1.0], [1.0]]), b_eq=np.array([0.0, 1.0]),
                            A_in=-np.eye(1), b_in=np.ones(1), z_dim=1)
        res = solve(prog, EVAL)
        assert res.status in ("infeasible", "max_iter")
        assert res.status != "optimal"

    def test_regularizer_sweep_converges_to_lp(self):
        prog = simplex_lp([-1.0, -2.0, 0.3])
        exact = solve(prog, EVAL).objective
        gaps = []
        for rho in (1e-2, 1e-4, 1e-6, 1e-8):
            res = solve(prog, SolverOptions(rho_reg=rho))
            z = res.z
            gaps.append(abs(np.asarray([-1.0, -2.0, 0.3]) @ z - exact))
        assert all(g2 <= g1 + 1e-12 for g1, g2 in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-6

    def test_norm_term_against_closed_form(self):
        # min ||z - a|| has value 0; min c'z + t||G z|| over a box has a
        # closed form when G = I and the box keeps z away from the kink
        rng = np.random.default_rng(1)
        for _ in range(5):
            a = rng.normal(size=3) + 3.0
            prog = ConicProgram(
                P=np.zeros((3, 3)), c_lin=np.zeros(3), c0=0.0,
                A_eq=np.eye(3), b_eq=a,
                A_in=np.zeros((0, 3)), b_in=np.zeros(0),
                z_dim=3, G=np.eye(3), h=np.zeros(3), t=2.0,
            )
            res = solve(prog, EVAL)
            assert res.status == "optimal"
            assert res.objective == pytest.approx(2.0 * np.linalg.norm(a), abs=1e-6)


class TestImplicitDifferentiation:
    def test_linear_response_1d(self):
        # min 1/2 z^2 - theta z: z* = theta, so dz*/dtheta = 1
        res = solve(unconstrained([[1.0]], [-1.5]), EVAL)
        dv = differentiate_solution(res, ProgramPerturbation(dc_lin=np.array([-1.0])))
        assert dv[0] == pytest.approx(1.0, abs=1e-9)

    @staticmethod
    def _random_qp(rng, p):
        Q = rng.normal(size=(p, p))
        P = Q @ Q.T + np.eye(p)
        c = rng.normal(size=p)
        m_in = p + 2
        A_in = rng.normal(size=(m_in, p))
        z0 = rng.normal(size=p) * 0.3
        b_in = A_in @ z0 + rng.uniform(0.3, 1.5, size=m_in)  # z0 strictly feasible
        A_eq = rng.normal(size=(1, p))
        b_eq = A_eq @ z0
        return ConicProgram(P=P, c_lin=c, c0=0.0, A_eq=A_eq, b_eq=b_eq,
                            A_in=A_in, b_in=b_in, z_dim=p)

    def test_random_qps_match_finite_differences(self):
        rng = np.random.default_rng(2)
        checked = 0
        trial = 0
        while checked < 100:
            trial += 1
            p = int(rng.integers(2, 11))
            prog = self._random_qp(rng, p)
            res = solve(prog, EVAL)
            # the FD oracle is only valid away from active-set changes, so
            # require a healthy strict-complementarity margin
            if res.status != "optimal" or res.complementarity_margin < 1e-2:
                continue
            # one random direction through (P, c, A_in, b_in, A_eq, b_eq)
            pert = ProgramPerturbation(
                dP=_sym(rng.normal(size=prog.P.shape)),
                dc_lin=rng.normal(size=p),
                dA_eq=rng.normal(size=prog.A_eq.shape),
                db_eq=rng.normal(size=1),
                dA_in=rng.normal(size=prog.A_in.shape),
                db_in=rng.normal(size=prog.A_in.shape[0]),
            )
            dv = differentiate_solution(res, pert)
            # the FD stencil needs reference solves well below the step size
            tight = SolverOptions.for_eval(tol=1e-11)
            h = 1e-5
            zp = solve(_perturbed(prog, pert, h), tight).v
            zm = solve(_perturbed(prog, pert, -h), tight).v
            fd = (zp - zm) / (2 * h)
            denom = np.linalg.norm(fd) + 1e-8
            assert np.linalg.norm(dv - fd) / denom < 1e-4, f"trial {trial}"
            checked += 1

    def test_norm_term_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(3)
        p = 3
        Q = rng.normal(size=(p, p))
        prog = ConicProgram(
            P=Q @ Q.T + np.eye(p), c_lin=rng.normal(size=p), c0=0.0,
            A_eq=np.zeros((0, p)), b_eq=np.zeros(0),
            A_in=-np.eye(p), b_in=np.ones(p) * 5,
            z_dim=p, G=rng.normal(size=(2, p)), h=rng.normal(size=2), t=0.7,
        )
        res = solve(prog, EVAL)
        assert res.status == "optimal"
        pert = ProgramPerturbation(dG=rng.normal(size=(2, p)),
                                   dh=rng.normal(size=2), dt=0.3)
        dv = differentiate_solution(res, pert)
        h = 1e-6
        zp = solve(_perturbed(prog, pert, h), EVAL).v
        zm = solve(_perturbed(prog, pert, -h), EVAL).v
        fd = (zp - zm) / (2 * h)
        np.testing.assert_allclose(dv, fd, rtol=1e-4, atol=1e-7)

    def test_vjp_adjoint_of_jvp(self):
        # <g, JVP(dp)> must equal <VJP(g), dp> for arbitrary directions
        rng = np.random.default_rng(4)
        prog = self._random_qp(rng, 5)
        res = solve(prog, EVAL)
        assert res.status == "optimal"
        g = rng.normal(size=prog.dim)
        pert = ProgramPerturbation(
            dP=_sym(rng.normal(size=prog.P.shape)),
            dc_lin=rng.normal(size=5),
            dA_eq=rng.normal(size=prog.A_eq.shape),
            db_eq=rng.normal(size=1),
            dA_in=rng.normal(size=prog.A_in.shape),
            db_in=rng.normal(size=prog.A_in.shape[0]),
        )
        lhs = float(g @ differentiate_solution(res, pert))
        grads = solution_vjp(res, g)
        rhs = (np.sum(grads.dP * pert.dP) + grads.dc_lin @ pert.dc_lin
               + np.sum(grads.dA_eq * pert.dA_eq) + grads.db_eq @ pert.db_eq
               + np.sum(grads.dA_in * pert.dA_in) + grads.db_in @ pert.db_in)
        assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_solve_on_tape_backward(self):
        # traced linear cost: loss = w'z*, gradient vs finite differences
        rng = np.random.default_rng(5)
        p = 4
        theta = Parameter(rng.normal(size=p), "theta")
        w = rng.normal(size=p)
        Q = rng.normal(size=(p, p))
        P = Q @ Q.T + np.eye(p)

        def run(tape=None):
            c = tape.leaf(theta) if tape is not None else theta.value
            prog = ConicProgram(P=P, c_lin=c, c0=0.0,
                                A_eq=np.zeros((0, p)), b_eq=np.zeros(0),
                                A_in=-np.eye(p), b_in=np.ones(p) * 10,
                                z_dim=p)
            z, _ = solve_on_tape(prog, EVAL)
            return ad.dot(w, z) if tape is not None else float(w @ z)

        tape = Tape()
        tape.backward(run(tape))
        g = tape.grad(theta)

        def f(v):
            old = theta.value
            theta.value = v
            out = run()
            theta.value = old
            return out

        fd = ad.finite_difference_gradient(f, theta.value)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)

    def test_solve_on_tape_raises_on_failure(self):
        prog = ConicProgram(P=np.eye(1), c_lin=np.zeros(1), c0=0.0,
                            A_eq=np.zeros((1, 1)), b_eq=np.array([1.0]),
                            A_in=-np.eye(1), b_in=np.zeros(1), z_dim=1)
        with pytest.raises(SolverError):
            solve_on_tape(prog, EVAL)


def _sym(M):
    return (M + M.T) / 2


def _perturbed(prog: ConicProgram, pert: ProgramPerturbation, h: float) -> ConicProgram:
    def bump(base, d):
        return base if d is None else base + h * d

    return ConicProgram(
        P=bump(prog.P, pert.dP), c_lin=bump(prog.c_lin, pert.dc_lin), c0=prog.c0,
        A_eq=bump(prog.A_eq, pert.dA_eq), b_eq=bump(prog.b_eq, pert.db_eq),
        A_in=bump(prog.A_in, pert.dA_in), b_in=bump(prog.b_in, pert.db_in),
        z_dim=prog.z_dim,
        G=None if prog.G is None else bump(prog.G, pert.dG),
        h=None if prog.h is None else bump(prog.h, pert.dh),
        t=float(prog.t) + h * pert.dt,
    )
