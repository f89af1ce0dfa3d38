"""Training loops, losses, calibration-aware inference, and evaluation.

The end-to-end method threads gradients through the whole decision pipeline:
per minibatch, half the batch calibrates the score threshold (whose gradient
is the single selected score), the other half solves the robust program and
differentiates the realized task loss through the solver's optimality
system. Two-stage baselines fit the same score models with task-agnostic
losses (pinball, Gaussian likelihood, MCMC-approximated energy likelihood)
and rely on the shared conformal calibration for coverage.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import conformal
from .autodiff import ParamStore, Tape
from .data import Dataset
from .models import (
    BoxModel,
    DerivedBoxModel,
    DerivedEllipsoidModel,
    EllipsoidModel,
    MlpBackbone,
    PicnnModel,
)
from .reform import (
    Standardizer,
    reform_box,
    reform_ellipsoid,
    reform_picnn,
    standardized_task,
)
from .solver import SolverError, SolverOptions, solve, solve_on_tape
from .tasks import TaskSpec

logger = logging.getLogger("cro.training")

Array = np.ndarray

PROP1_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class MalaConfig:
    step: float = 0.05          # in standardized target units
    burn_in: int = 100
    chains: int = 16
    accept_band: tuple[float, float] = (0.2, 0.8)


@dataclass
class TrainConfig:
    method: str = "e2e"                  # e2e | eto | eto_sll | eto_jc
    representation: str = "ellipsoid"    # box | ellipsoid | picnn
    alpha: float = 0.1
    batch_size: int = 256
    epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.0
    w_task: float = 0.9                  # vs auxiliary pinball/likelihood loss
    w_zero: float = 1.0                  # energy-model anchor (two-stage picnn)
    w_q: float = 0.01                    # threshold regularizer (e2e picnn)
    cal_split: float = 0.5               # per-minibatch calibration fraction
    val_fraction: float = 0.2            # carved from the train part
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256, 256)
    picnn_width: int = 64
    picnn_depth: int = 2
    picnn_modified: bool = False
    picnn_eps_inf: float = 0.0
    mala: MalaConfig = field(default_factory=MalaConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    max_skip_rate: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 <= self.w_task <= 1.0:
            raise ValueError("w_task must be in [0, 1]")


# ---------------------------------------------------------------------------
# losses


def pinball_loss(y_hat, y, beta: float):
    """Quantile loss at level beta, summed over target dimensions.

    beta * (y - y_hat) when y > y_hat, else (1 - beta) * (y_hat - y); rows
    are averaged. Tape-capable in y_hat.
    """
    y = np.atleast_2d(ad.value_of(y))
    diff = ad.sub(y, y_hat)
    per = ad.maximum(ad.mul(diff, beta), ad.mul(diff, beta - 1.0))
    return ad.mean(ad.sum_(per, axis=1))


def gaussian_nll(mu, L, y):
    """Negative log density of N(mu, L L') at y, via triangular solves."""
    y = ad.value_of(y)
    n = y.shape[-1]
    w = ad.solve_triangular_lower(L, ad.sub(y, mu))
    idx = (np.arange(n), np.arange(n))
    logdet = ad.sum_(ad.log(ad.take(L, idx)))
    return ad.add(ad.add(ad.mul(ad.sum_(ad.square(w)), 0.5), logdet),
                  0.5 * n * math.log(2.0 * math.pi))


def mala_step(model, X_rep: Array, Y: Array, step: float, rng):
    """One Metropolis-adjusted Langevin move for every row of Y.

    Target density is exp(-s(x, y)); proposal y' = y - step * grad s +
    sqrt(2 step) xi with the exact Metropolis correction. Returns
    (Y_next, accept_mask, log_accept).
    """

    def score_and_grad(Yv):
        tape = Tape()
        Yt = tape.watch(Yv)
        s = model.score_batch(X_rep, Yt, tape)
        tape.backward(ad.sum_(s))
        G = tape.grad_of(Yt)
        return ad.value_of(s), (np.zeros_like(Yv) if G is None else G)

    s0, g0 = score_and_grad(Y)
    noise = rng.standard_normal(Y.shape)
    Yp = Y - step * g0 + math.sqrt(2.0 * step) * noise
    s1, g1 = score_and_grad(Yp)
    fwd = Yp - (Y - step * g0)
    bwd = Y - (Yp - step * g1)
    log_acc = (s0 - s1
               + (np.sum(fwd**2, axis=1) - np.sum(bwd**2, axis=1)) / (4.0 * step))
    accept = np.log(rng.uniform(size=Y.shape[0])) < log_acc
    Y_next = np.where(accept[:, None], Yp, Y)
    return Y_next, accept, log_acc


def mala_sample(model, X: Array, cfg: MalaConfig, rng, step_state: dict | None = None):
    """Draw cfg.chains approximate samples of exp(-s(x, y)) per input row."""
    X = np.atleast_2d(X)
    B = X.shape[0]
    n = model.n
    K = cfg.chains
    X_rep = np.repeat(X, K, axis=0)
    Y = rng.standard_normal((B * K, n))
    state = step_state if step_state is not None else {"step": cfg.step}
    accepted = 0
    proposals = 0
    for t in range(cfg.burn_in):
        Y, acc, _ = mala_step(model, X_rep, Y, state["step"], rng)
        accepted += int(acc.sum())
        proposals += acc.size
        if (t + 1) % 20 == 0:
            rate = accepted / proposals
            lo, hi = cfg.accept_band
            if rate < lo or rate > hi:
                new = state["step"] * (0.7 if rate < lo else 1.4)
                logger.info("MALA acceptance %.2f outside [%.1f, %.1f]; "
                            "step %.4g -> %.4g", rate, lo, hi, state["step"], new)
                state["step"] = new
            accepted = proposals = 0
    return Y.reshape(B, K, n)


def picnn_nll_mala(model: PicnnModel, X: Array, Y_std: Array, cfg: MalaConfig,
                   w_zero: float, rng, step_state: dict | None = None):
    """Contrastive energy-likelihood gradient for the convex score model.

    grad = E_data[grad s] - E_model[grad s] + w_zero * grad mean s^2, with
    the model expectation over MALA chains (treated as constants). Returns
    (surrogate loss value, parameter gradients).
    """
    X = np.atleast_2d(X)
    B, K = X.shape[0], cfg.chains
    samples = mala_sample(model, X, cfg, rng, step_state).reshape(B * K, -1)
    tape = Tape()
    s_data = model.score_batch(X, Y_std, tape)
    s_model = model.score_batch(np.repeat(X, K, axis=0), samples, tape)
    loss = ad.add(
        ad.sub(ad.mean(s_data), ad.mean(s_model)),
        ad.mul(ad.mean(ad.square(s_data)), w_zero),
    )
    tape.backward(loss)
    grads = tape.grads(model.parameters())
    surrogate = float(np.mean(ad.value_of(s_data))
                      + w_zero * np.mean(ad.value_of(s_data) ** 2))
    return surrogate, grads


# ---------------------------------------------------------------------------
# pipeline wrapper


@dataclass
class Decision:
    z: Array
    robust_value: float
    q: float
    solver_status: str


@dataclass
class RobustPredictor:
    """Trained score model + task + target standardizer + calibration state."""

    model: object
    task: TaskSpec
    y_std: Standardizer
    alpha: float
    record: conformal.CalibrationRecord | None = None

    def __post_init__(self):
        self._std_task = standardized_task(self.task, self.y_std)

    @property
    def kind(self) -> str:
        return self.model.kind

    def scores(self, X: Array, Y_raw: Array) -> Array:
        return np.asarray(self.model.score_batch(X, self.y_std.transform(Y_raw)))

    def calibrate(self, X: Array, Y_raw: Array) -> "RobustPredictor":
        self.record = conformal.calibrate(
            self.model, X, self.y_std.transform(Y_raw), self.alpha)
        return self

    def _require_finite_q(self) -> float:
        if self.record is None:
            raise TrainingError("calibration required before decisions")
        if not self.record.is_finite:
            M = self.record.scores.size
            raise TrainingError(
                f"alpha={self.alpha} is too small for M={M} calibration "
                f"points (needs alpha >= 1/(M+1)); threshold is infinite"
            )
        return self.record.q

    def program_at(self, x: Array, q: float):
        if self.kind == "box":
            lo, hi = self.model.bounds_batch(np.atleast_2d(x))
            return reform_box(np.asarray(lo)[0], np.asarray(hi)[0], q, self._std_task)
        if self.kind == "ellipsoid":
            mu, L = self.model.params_at(x)
            return reform_ellipsoid(mu, L, q, self._std_task)
        return reform_picnn(self.model, x, q, self._std_task)

    def decide(self, x: Array, options: SolverOptions | None = None) -> Decision:
        q = self._require_finite_q()
        if self.kind == "picnn":
            q = conformal.ensure_nonempty(self.model, x, q)
        opts = options or SolverOptions.for_eval()
        result = solve(self.program_at(x, q), opts)
        if result.status != "optimal":
            hint = ""
            if self.kind == "picnn":
                hint = ("; an unbounded sublevel set is the usual cause - "
                        "enable the modified (compact) picnn output")
            raise SolverError(result.status,
                              f"robust decision solve failed ({result.status}){hint}")
        return Decision(z=result.z.copy(), robust_value=result.objective, q=q,
                        solver_status=result.status)


# ---------------------------------------------------------------------------
# model construction and train/val plumbing


def build_model(representation: str, in_dim: int, target_dim: int,
                cfg: TrainConfig, seed):
    if representation == "box":
        return BoxModel(in_dim, target_dim, cfg.hidden, seed)
    if representation == "ellipsoid":
        return EllipsoidModel(in_dim, target_dim, cfg.hidden, seed)
    if representation == "picnn":
        return PicnnModel(in_dim, target_dim, width=cfg.picnn_width,
                          depth=cfg.picnn_depth,
                          modified_output=cfg.picnn_modified,
                          eps_inf=cfg.picnn_eps_inf, seed=seed)
    raise ValueError(f"unknown representation {representation!r}")


@dataclass
class _Prepared:
    X_fit: Array
    Y_fit: Array          # standardized
    X_val: Array
    Y_val: Array          # standardized
    Y_fit_raw: Array
    Y_val_raw: Array
    x_loc: Array
    x_scale: Array
    y_std: Standardizer


def _prepare(train: Dataset, cfg: TrainConfig) -> _Prepared:
    rng = np.random.default_rng(cfg.seed)
    n = len(train)
    n_val = max(1, int(round(n * cfg.val_fraction))) if n > 5 else 0
    order = rng.permutation(n)
    val_idx, fit_idx = order[:n_val], order[n_val:]
    X_fit, Y_fit_raw = train.X[fit_idx], train.Y[fit_idx]
    X_val, Y_val_raw = train.X[val_idx], train.Y[val_idx]
    x_loc = X_fit.mean(axis=0)
    x_scale = np.maximum(X_fit.std(axis=0), 1e-8)
    y_std = Standardizer.fit(Y_fit_raw)
    return _Prepared(X_fit, y_std.transform(Y_fit_raw), X_val,
                     y_std.transform(Y_val_raw), Y_fit_raw, Y_val_raw,
                     x_loc, x_scale, y_std)


def _set_standardization(model, prep: _Prepared) -> None:
    for backbone in _backbones_of(model):
        backbone.set_input_standardization(prep.x_loc, prep.x_scale)


def _backbones_of(model):
    if isinstance(model, (BoxModel, EllipsoidModel)):
        return [model.backbone]
    if isinstance(model, DerivedBoxModel):
        return [model.point, model.radius]
    if isinstance(model, DerivedEllipsoidModel):
        return [model.point] + ([model.scale] if model.scale is not None else [])
    if isinstance(model, PicnnModel):
        model_list = []
        return model_list  # picnn standardizes via its own x_loc/x_scale
    return []


def _snapshot(params: dict) -> dict:
    return {k: p.value.copy() for k, p in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for k, p in params.items():
        p.value = snap[k].copy()


class _EarlyStop:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_snap = None
        self.stale = 0

    def update(self, val: float, params: dict) -> bool:
        """Record an epoch; True when training should stop."""
        if val < self.best - 1e-12:
            self.best = val
            self.best_snap = _snapshot(params)
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    def finalize(self, params: dict) -> None:
        if self.best_snap is not None:
            _restore(params, self.best_snap)


def _batches(n: int, batch_size: int, rng) -> list[Array]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# two-stage (estimate-then-optimize) training


def _eto_loss(model, X, Y_std, alpha: float, tape=None):
    if model.kind == "box":
        lo, hi = model.bounds_batch(X, tape)
        return ad.add(pinball_loss(lo, Y_std, alpha / 2.0),
                      pinball_loss(hi, Y_std, 1.0 - alpha / 2.0))
    if model.kind == "ellipsoid":
        X2 = np.atleast_2d(X)
        raw = model.backbone.forward(X2, tape)
        terms = []
        for i in range(X2.shape[0]):
            mu, L = model._params_from_row(ad.take(raw, i))
            terms.append(ad.reshape(gaussian_nll(mu, L, Y_std[i]), (1,)))
        return ad.mean(ad.concat(terms, axis=0))
    raise ValueError("two-stage picnn training goes through picnn_nll_mala")


def train_eto(train: Dataset, cfg: TrainConfig, task: TaskSpec,
              model=None) -> tuple[object, Standardizer, dict]:
    """Fit a score model with its task-agnostic loss; early stop on validation."""
    prep = _prepare(train, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    if model is None:
        model = build_model(cfg.representation, train.X.shape[1],
                            train.Y.shape[1], cfg, cfg.seed)
    if isinstance(model, PicnnModel):
        model.x_loc, model.x_scale = prep.x_loc.copy(), prep.x_scale.copy()
        model.project_nonneg()
    else:
        _set_standardization(model, prep)
    params = model.parameters()
    store = ParamStore(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stop = _EarlyStop(cfg.patience)
    history = []
    step_state = {"step": cfg.mala.step}
    for epoch in range(cfg.epochs):
        for idx in _batches(len(prep.X_fit), cfg.batch_size, rng):
            if cfg.representation == "picnn":
                _, grads = picnn_nll_mala(model, prep.X_fit[idx], prep.Y_fit[idx],
                                          cfg.mala, cfg.w_zero, rng, step_state)
            else:
                tape = Tape()
                loss = _eto_loss(model, prep.X_fit[idx], prep.Y_fit[idx],
                                 cfg.alpha, tape)
                if not np.isfinite(ad.value_of(loss)):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                tape.backward(loss)
                grads = tape.grads(params)
            store.step(grads)
            if isinstance(model, PicnnModel):
                model.project_nonneg()
        val = _eto_validation(model, prep, cfg)
        history.append(val)
        if stop.update(val, params):
            break
    stop.finalize(params)
    return model, prep.y_std, {"val_history": history, "epochs_run": len(history)}


def _eto_validation(model, prep: _Prepared, cfg: TrainConfig) -> float:
    if len(prep.X_val) == 0:
        X, Y = prep.X_fit, prep.Y_fit
    else:
        X, Y = prep.X_val, prep.Y_val
    if cfg.representation == "picnn":
        s = np.asarray(model.score_batch(X, Y))
        return float(s.mean() + cfg.w_zero * np.mean(s**2))
    return float(ad.value_of(_eto_loss(model, X, Y, cfg.alpha)))


def _train_point_model(X, hidden, lr, weight_decay, epochs, patience,
                       batch_size, seed, prefix, out_dim, target_fn, rng_offset=0):
    """Shared MSE/pinball trainer for the two-stage baselines' sub-models."""
    rng = np.random.default_rng(seed + rng_offset)
    net = MlpBackbone(X.shape[1], hidden, out_dim, seed + rng_offset, prefix)
    net.set_input_standardization(X.mean(axis=0), np.maximum(X.std(axis=0), 1e-8))
    params = net.parameters()
    store = ParamStore(params, lr=lr, weight_decay=weight_decay)
    stop = _EarlyStop(patience)
    n = X.shape[0]
    n_val = max(1, n // 5)
    order = rng.permutation(n)
    vi, fi = order[:n_val], order[n_val:]
    for _ in range(epochs):
        for idx in _batches(len(fi), batch_size, rng):
            rows = fi[idx]
            tape = Tape()
            loss = target_fn(net, rows, tape)
            tape.backward(loss)
            store.step(tape.grads(params))
        val = float(ad.value_of(target_fn(net, vi, None)))
        if stop.update(val, params):
            break
    stop.finalize(params)
    return net


def train_eto_sll(train: Dataset, cfg: TrainConfig, task: TaskSpec):
    """Two-stage baseline: point predictor, then residual-quantile scaling.

    Box: per-dimension (1-alpha)-quantiles of absolute residuals. Ellipsoid:
    scalar (1-alpha)-quantile of the whitened-residual norm on top of one
    shared residual covariance.
    """
    prep = _prepare(train, cfg)
    X = np.vstack([prep.X_fit, prep.X_val]) if len(prep.X_val) else prep.X_fit
    Y = np.vstack([prep.Y_fit, prep.Y_val]) if len(prep.X_val) else prep.Y_fit
    n_out = Y.shape[1]

    def mse(net, rows, tape):
        pred = net.forward(X[rows], tape)
        return ad.mean(ad.sum_(ad.square(ad.sub(pred, Y[rows])), axis=1))

    point = _train_point_model(X, cfg.hidden, cfg.lr, cfg.weight_decay,
                               cfg.epochs, cfg.patience, cfg.batch_size,
                               cfg.seed, "pt", n_out, mse)
    residuals = Y - np.asarray(point.forward(X))
    if cfg.representation == "box":
        targets = np.abs(residuals)

        def qloss(net, rows, tape):
            rad = ad.softplus(net.forward(X[rows], tape))
            return pinball_loss(rad, targets[rows], 1.0 - cfg.alpha)

        radius = _train_point_model(X, cfg.hidden, cfg.lr,
                                    cfg.weight_decay, cfg.epochs, cfg.patience,
                                    cfg.batch_size, cfg.seed, "rad", n_out,
                                    qloss, rng_offset=101)
        model = DerivedBoxModel(point, radius)
    elif cfg.representation == "ellipsoid":
        cov = np.cov(residuals.T) + 1e-6 * np.eye(n_out)
        L_base = np.linalg.cholesky(np.atleast_2d(cov))
        from scipy.linalg import solve_triangular

        norms = np.linalg.norm(
            solve_triangular(L_base, residuals.T, lower=True), axis=0)
        targets = norms[:, None]

        def qloss(net, rows, tape):
            scale = ad.softplus(net.forward(X[rows], tape))
            return pinball_loss(scale, targets[rows], 1.0 - cfg.alpha)

        scale = _train_point_model(X, cfg.hidden, cfg.lr,
                                   cfg.weight_decay, cfg.epochs, cfg.patience,
                                   cfg.batch_size, cfg.seed, "sc", 1, qloss,
                                   rng_offset=202)
        model = DerivedEllipsoidModel(point, L_base, scale)
    else:
        raise ValueError("the residual-scaling baseline covers box and ellipsoid only")
    return model, prep.y_std, {}


def train_eto_jc(train: Dataset, cfg: TrainConfig, task: TaskSpec):
    """Two-stage baseline with one global residual covariance (no scale field)."""
    if cfg.representation != "ellipsoid":
        raise ValueError("the shared-covariance baseline is ellipsoid-only")
    prep = _prepare(train, cfg)
    X = np.vstack([prep.X_fit, prep.X_val]) if len(prep.X_val) else prep.X_fit
    Y = np.vstack([prep.Y_fit, prep.Y_val]) if len(prep.X_val) else prep.Y_fit
    n_out = Y.shape[1]

    def mse(net, rows, tape):
        pred = net.forward(X[rows], tape)
        return ad.mean(ad.sum_(ad.square(ad.sub(pred, Y[rows])), axis=1))

    point = _train_point_model(X, cfg.hidden, cfg.lr, cfg.weight_decay,
                               cfg.epochs, cfg.patience, cfg.batch_size,
                               cfg.seed, "pt", n_out, mse)
    residuals = Y - np.asarray(point.forward(X))
    cov = np.cov(residuals.T) + 1e-6 * np.eye(n_out)
    model = DerivedEllipsoidModel(point, np.linalg.cholesky(np.atleast_2d(cov)),
                                  scale=None)
    return model, prep.y_std, {}


# ---------------------------------------------------------------------------
# end-to-end training


def _sample_program(model, x, q, std_task, tape):
    if model.kind == "box":
        lo, hi = model.bounds_batch(np.atleast_2d(x), tape)
        return reform_box(ad.take(lo, 0), ad.take(hi, 0), q, std_task)
    if model.kind == "ellipsoid":
        mu, L = model.params_at(x, tape)
        return reform_ellipsoid(mu, L, q, std_task)
    return reform_picnn(model, x, q, std_task, tape)


def e2e_minibatch(model, X: Array, Y_std: Array, Y_raw: Array, cfg: TrainConfig,
                  task: TaskSpec, std_task: TaskSpec, rng):
    """One end-to-end step: split the batch, calibrate on one half, descend
    the task loss of the other half through the solver.

    Returns (total loss Tensor or None, tape, record, n_solved, n_skipped).
    """
    B = X.shape[0]
    order = rng.permutation(B)
    n_cal = max(1, int(round(B * cfg.cal_split)))
    cal, pred = order[:n_cal], order[n_cal:]
    if len(pred) == 0:
        raise TrainingError("batch too small to split for calibration")
    tape = Tape()
    scores_cal = model.score_batch(X[cal], Y_std[cal], tape)
    q, record = conformal.quantile_on_tape(scores_cal, 1.0 - cfg.alpha, cfg.alpha)
    if not record.is_finite:
        logger.warning("minibatch threshold infinite (batch too small for "
                       "alpha=%.3g); skipping batch", cfg.alpha)
        return None, tape, record, 0, len(pred)

    losses = []
    skipped = 0
    for i in pred:
        prog = _sample_program(model, X[i], q, std_task, tape)
        try:
            z, _ = solve_on_tape(prog, cfg.solver)
        except SolverError as exc:
            logger.warning("sample solve failed (%s); skipping", exc.status)
            skipped += 1
            continue
        c_real = task.F.T @ Y_raw[i]
        loss_i = ad.dot(c_real + task.p_lin, z)
        if np.any(task.P):
            loss_i = ad.add(loss_i, ad.mul(ad.dot(z, ad.matmul(task.P, z)), 0.5))
        losses.append(ad.reshape(ad.add(loss_i, task.c0), (1,)))
    if not losses:
        return None, tape, record, 0, skipped
    task_term = ad.mean(ad.concat(losses, axis=0))

    if model.kind == "picnn":
        total = ad.add(task_term, ad.mul(ad.square(q), cfg.w_q))
    else:
        aux = _eto_loss(model, X[pred], Y_std[pred], cfg.alpha, tape)
        total = ad.add(ad.mul(task_term, cfg.w_task),
                       ad.mul(aux, 1.0 - cfg.w_task))
    return total, tape, record, len(losses), skipped


def train_e2e(train: Dataset, cfg: TrainConfig, task: TaskSpec, model,
              y_std: Standardizer | None = None):
    """Task-loss training with per-minibatch conformal calibration.

    The model is expected to arrive pre-trained by its two-stage counterpart;
    its input standardization is kept as-is so the warm start stays valid.
    """
    prep = _prepare(train, cfg)
    if y_std is None:
        y_std = prep.y_std
    Y_fit_std = y_std.transform(prep.Y_fit_raw)
    Y_val_std = y_std.transform(prep.Y_val_raw)
    std_task = standardized_task(task, y_std)
    rng = np.random.default_rng(cfg.seed + 2)
    params = model.parameters()
    store = ParamStore(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stop = _EarlyStop(cfg.patience)
    q_history: list[float] = []
    val_history: list[float] = []
    for epoch in range(cfg.epochs):
        solved = skipped = 0
        for idx in _batches(len(prep.X_fit), cfg.batch_size, rng):
            total, tape, record, n_ok, n_skip = e2e_minibatch(
                model, prep.X_fit[idx], Y_fit_std[idx], prep.Y_fit_raw[idx],
                cfg, task, std_task, rng)
            solved += n_ok
            skipped += n_skip
            if total is None:
                continue
            if not np.isfinite(ad.value_of(total)):
                raise TrainingError(f"non-finite task loss at epoch {epoch}")
            if record.is_finite:
                q_history.append(record.q)
            tape.backward(total)
            store.step(tape.grads(params))
            if isinstance(model, PicnnModel):
                model.project_nonneg()
        if solved + skipped > 0 and skipped > cfg.max_skip_rate * (solved + skipped):
            raise TrainingError(
                f"solver skip rate {skipped}/{solved + skipped} exceeded "
                f"{cfg.max_skip_rate:.0%} in epoch {epoch}"
            )
        val = _e2e_validation(model, prep, Y_fit_std, Y_val_std, cfg, task, std_task)
        val_history.append(val)
        if stop.update(val, params):
            break
    stop.finalize(params)
    return model, y_std, {"q_history": q_history, "val_history": val_history,
                          "epochs_run": len(val_history)}


def _e2e_validation(model, prep: _Prepared, Y_fit_std, Y_val_std, cfg, task,
                    std_task) -> float:
    """Mean task loss on the held-out validation rows, with the threshold
    calibrated on the fit rows (no per-batch split at validation time)."""
    if len(prep.X_val) == 0:
        X, Y_raw = prep.X_fit, prep.Y_fit_raw
    else:
        X, Y_raw = prep.X_val, prep.Y_val_raw
    scores = np.asarray(model.score_batch(prep.X_fit, Y_fit_std))
    q, _ = conformal.quantile(scores, 1.0 - cfg.alpha)
    if math.isinf(q):
        return math.inf
    losses = []
    for i in range(X.shape[0]):
        prog = _sample_program(model, X[i], q, std_task, None)
        try:
            res = solve(prog, cfg.solver)
        except SolverError:
            continue
        if res.status != "optimal":
            continue
        losses.append(task.task_loss(Y_raw[i], res.z))
    return float(np.mean(losses)) if losses else math.inf


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsRow:
    seed: int
    alpha: float
    representation: str
    method: str
    task_loss_mean: float
    task_loss_std: float
    coverage: float
    robust_value_mean: float
    wall_time_s: float

    CSV_HEADER = ("seed,alpha,representation,method,task_loss_mean,"
                  "task_loss_std,coverage,robust_value_mean,wall_time_s")

    def csv_line(self) -> str:
        return (f"{self.seed},{self.alpha},{self.representation},{self.method},"
                f"{self.task_loss_mean!r},{self.task_loss_std!r},"
                f"{self.coverage!r},{self.robust_value_mean!r},"
                f"{self.wall_time_s!r}")


@dataclass
class EvalReport:
    metrics: MetricsRow
    losses: Array
    robust_values: Array
    covered: Array
    bound_violations: int   # covered points with loss > robust value + tol
    decisions: list


def _worker_count() -> int:
    env = os.environ.get("CRO_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def evaluate(predictor: RobustPredictor, test: Dataset, seed: int, method: str,
             options: SolverOptions | None = None) -> EvalReport:
    """Task loss, coverage, and the per-sample robust performance bound.

    On every covered test point the realized loss must not exceed the robust
    optimum (within tolerance); violations are counted and reported, never
    silently ignored.
    """
    opts = options or SolverOptions.for_eval()
    t0 = time.perf_counter()
    X, Y = test.X, test.Y
    q = predictor._require_finite_q()

    def one(i):
        return predictor.decide(X[i], opts)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            decisions = list(ex.map(one, range(len(test))))
    else:
        decisions = [one(i) for i in range(len(test))]

    scores = predictor.scores(X, Y)
    losses = np.array([predictor.task.task_loss(Y[i], d.z)
                       for i, d in enumerate(decisions)])
    values = np.array([d.robust_value for d in decisions])
    q_eff = np.array([d.q for d in decisions])
    covered = scores <= q_eff
    violations = int(np.sum(covered & (losses > values + PROP1_TOL)))
    if violations:
        logger.error("%d covered points violate the robust bound", violations)
    wall = time.perf_counter() - t0
    row = MetricsRow(
        seed=seed, alpha=predictor.alpha, representation=predictor.kind,
        method=method, task_loss_mean=float(losses.mean()),
        task_loss_std=float(losses.std()), coverage=float(covered.mean()),
        robust_value_mean=float(values.mean()), wall_time_s=wall,
    )
    return EvalReport(row, losses, values, covered, violations, decisions)


def train_method(method: str, train: Dataset, cfg: TrainConfig, task: TaskSpec):
    """Dispatch a full training run; e2e first fits its two-stage warm start."""
    cfg = replace(cfg, method=method)
    if method == "eto":
        return train_eto(train, cfg, task)
    if method == "eto_sll":
        return train_eto_sll(train, cfg, task)
    if method == "eto_jc":
        return train_eto_jc(train, cfg, task)
    if method == "e2e":
        model, y_std, _ = train_eto(train, cfg, task)
        return train_e2e(train, cfg, task, model, y_std)
    raise ValueError(f"unknown method {method!r}")
