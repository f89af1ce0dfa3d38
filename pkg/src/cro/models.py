"""Conditional nonconformity score models.

Each model maps an input ``x`` to a score function ``s(x, y)`` that is convex
in ``y``; the ``q``-sublevel set of the score is the uncertainty set handed to
the robust reformulation. Three families are provided:

* ``BoxModel`` — elementwise lower/upper bounds; the score is the largest
  signed face violation (a multivariate generalization of conformalized
  quantile regression).
* ``EllipsoidModel`` — predicted mean and Cholesky factor; the score is the
  squared Mahalanobis distance, computed with triangular solves.
* ``PicnnModel`` — a partially input-convex neural network whose hidden-path
  weight matrices are kept entrywise nonnegative by projection, so every
  sublevel set in ``y`` is convex by construction.

``DerivedBoxModel`` / ``DerivedEllipsoidModel`` wrap two-stage baselines
(point predictor plus residual-scale predictor) behind the same accessors so
the robust reformulation does not care where the bounds came from.

Scores are computed in *standardized* y units; the training layer owns the
transform between raw and standardized targets.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape

Array = np.ndarray


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _he(rng, fan_in: int, fan_out: int) -> Array:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


class MlpBackbone:
    """Plain ReLU MLP with a frozen input-standardization affine.

    The (x - loc) / scale transform is set once from training statistics and
    never trained; it stands in for batch normalization.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, seed=0,
                 prefix: str = "mlp"):
        rng = _rng(seed)
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        self.x_loc = np.zeros(in_dim)
        self.x_scale = np.ones(in_dim)
        dims = [in_dim, *hidden, out_dim]
        self.weights = [
            Parameter(_he(rng, dims[i], dims[i + 1]), f"{prefix}.W{i}")
            for i in range(len(dims) - 1)
        ]
        self.biases = [
            Parameter(np.zeros(dims[i + 1]), f"{prefix}.b{i}")
            for i in range(len(dims) - 1)
        ]

    def set_input_standardization(self, loc, scale) -> None:
        scale = np.asarray(scale, dtype=float)
        if np.any(scale <= 0):
            raise ValueError("input standardization scale must be positive")
        self.x_loc = np.asarray(loc, dtype=float).copy()
        self.x_scale = scale.copy()

    def parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in (*self.weights, *self.biases)}

    def forward(self, X, tape: Tape | None = None):
        """Rows of X are samples; returns an (N, out_dim) activation matrix."""
        h = (np.atleast_2d(ad.value_of(X)) - self.x_loc) / self.x_scale
        if tape is not None:
            h = tape.watch(h)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            Wv = tape.leaf(W) if tape is not None else W.value
            bv = tape.leaf(b) if tape is not None else b.value
            h = ad.add(ad.matmul(h, ad.transpose(Wv)), bv)
            if i < last:
                h = ad.relu(h)
        return h


class BoxModel:
    """Lower/upper bound head; the gap is softplus-parametrized so hi > lo."""

    kind = "box"

    def __init__(self, in_dim: int, target_dim: int, hidden=(256, 256, 256), seed=0):
        self.n = target_dim
        self.backbone = MlpBackbone(in_dim, hidden, 2 * target_dim, seed, "box")

    def parameters(self):
        return self.backbone.parameters()

    def bounds_batch(self, X, tape: Tape | None = None):
        raw = self.backbone.forward(X, tape)
        lo = ad.take(raw, (slice(None), slice(0, self.n)))
        gap = ad.softplus(ad.take(raw, (slice(None), slice(self.n, 2 * self.n))))
        return lo, ad.add(lo, gap)

    def score_batch(self, X, Y, tape: Tape | None = None):
        """max_i of max(lo_i - y_i, y_i - hi_i); negative strictly inside."""
        lo, hi = self.bounds_batch(X, tape)
        if not isinstance(Y, ad.Tensor):
            Y = np.atleast_2d(ad.value_of(Y))
        viol = ad.maximum(ad.sub(lo, Y), ad.sub(Y, hi))
        return ad.max_(viol, axis=1)


class EllipsoidModel:
    """Mean + lower-triangular Cholesky head; softplus keeps diag(L) > 0."""

    kind = "ellipsoid"

    def __init__(self, in_dim: int, target_dim: int, hidden=(256, 256, 256), seed=0):
        n = target_dim
        self.n = n
        self.backbone = MlpBackbone(in_dim, hidden, n + n * (n + 1) // 2, seed, "ell")
        tril = np.tril_indices(n)
        self._tril_flat = np.ravel_multi_index(tril, (n, n))
        self._diag_mask = (tril[0] == tril[1]).astype(float)

    def parameters(self):
        return self.backbone.parameters()

    def _params_from_row(self, row):
        mu = ad.take(row, slice(0, self.n))
        packed = ad.take(row, slice(self.n, self.n + self._tril_flat.size))
        soft = ad.softplus(packed)
        vals = ad.add(
            ad.mul(soft, self._diag_mask), ad.mul(packed, 1.0 - self._diag_mask)
        )
        L = ad.scatter(vals, (self.n, self.n), self._tril_flat)
        return mu, L

    def params_at(self, x, tape: Tape | None = None):
        """(mu, L) for one input row; Sigma = L L^T is positive definite."""
        raw = self.backbone.forward(np.atleast_2d(ad.value_of(x)), tape)
        return self._params_from_row(ad.take(raw, 0))

    def score_batch(self, X, Y, tape: Tape | None = None):
        X = np.atleast_2d(ad.value_of(X))
        if not isinstance(Y, ad.Tensor):
            Y = np.atleast_2d(ad.value_of(Y))
        raw = self.backbone.forward(X, tape)
        scores = []
        for i in range(X.shape[0]):
            mu, L = self._params_from_row(ad.take(raw, i))
            w = ad.solve_triangular_lower(L, ad.sub(Y[i], mu))
            scores.append(ad.reshape(ad.sum_(ad.square(w)), (1,)))
        if tape is None:
            return np.concatenate(scores)
        return ad.concat(scores, axis=0)


class PicnnModel:
    """Partially input-convex network: convex in y for every fixed x.

    Layer structure, with u the unconstrained x-path and sigma the convex
    y-path (sigma_0 = 0, u_0 = x):

        u_{l+1}     = relu(R_l u_l + r_l)
        sigma_{l+1} = relu(W_l sigma_l + V_l y + b_l)
        s(x, y)     = W_L sigma_L + V_L y + b_L

    where W_l = Wbar_l diag(relu(What_l u_l + w_l)) with Wbar_l >= 0
    entrywise, V_l = Vbar_l diag(Vhat_l u_l + v_l), b_l = Bbar_l u_l + bbar_l.
    Nonnegativity of Wbar is enforced by :meth:`project_nonneg` after every
    optimizer step rather than by reparametrization, because the dual
    reformulation consumes the literal gated matrices.

    ``modified_output=True`` drops the V_L y term and adds eps * ||y||_inf,
    which makes sublevel sets compact when eps > 0.
    """

    kind = "picnn"

    def __init__(self, in_dim: int, target_dim: int, width: int = 64, depth: int = 2,
                 u_width: int | None = None, modified_output: bool = False,
                 eps_inf: float = 0.0, seed=0):
        if eps_inf < 0:
            raise ValueError("eps_inf must be >= 0")
        rng = _rng(seed)
        m, n, d = in_dim, target_dim, width
        du = u_width if u_width is not None else width
        self.m, self.n, self.d, self.du = m, n, d, du
        self.depth = depth
        self.modified_output = modified_output
        self.eps_inf = eps_inf
        self.x_loc = np.zeros(m)
        self.x_scale = np.ones(m)

        def P(arr, name):
            return Parameter(arr, name)

        if depth < 1:
            raise ValueError("picnn needs at least one hidden layer")
        L = depth
        udim = lambda l: m if l == 0 else du  # u_0 = x, later u_l are du wide
        self.R = [P(_he(rng, udim(l), du), f"picnn.R{l}") for l in range(L)]
        self.r = [P(np.zeros(du), f"picnn.r{l}") for l in range(L)]
        # sigma-path: Wbar_l for l = 1..L (layer 0 multiplies sigma_0 = 0)
        self.Wbar = [None] + [
            P(rng.uniform(0.0, 1.0 / np.sqrt(d), size=(d if l < L else 1, d)),
              f"picnn.Wbar{l}")
            for l in range(1, L + 1)
        ]
        self.What = [None] + [
            P(_he(rng, udim(l), d) * 0.1, f"picnn.What{l}") for l in range(1, L + 1)
        ]
        self.w = [None] + [P(np.ones(d), f"picnn.w{l}") for l in range(1, L + 1)]
        # y-path for l = 0..L; Vbar_L omitted under the modified output
        self.Vbar = [
            P(_he(rng, n, d if l < L else 1), f"picnn.Vbar{l}") for l in range(L + 1)
        ]
        self.Vhat = [P(np.zeros((n, udim(l))), f"picnn.Vhat{l}") for l in range(L + 1)]
        self.v = [P(np.ones(n), f"picnn.v{l}") for l in range(L + 1)]
        self.Bbar = [
            P(np.zeros((d if l < L else 1, udim(l))), f"picnn.Bbar{l}")
            for l in range(L + 1)
        ]
        self.bbar = [
            P(np.zeros(d if l < L else 1), f"picnn.bbar{l}") for l in range(L + 1)
        ]
        if modified_output:
            self.Vbar[L].value[:] = 0.0

    def set_input_standardization(self, loc, scale) -> None:
        scale = np.asarray(scale, dtype=float)
        if np.any(scale <= 0):
            raise ValueError("input standardization scale must be positive")
        self.x_loc = np.asarray(loc, dtype=float).copy()
        self.x_scale = scale.copy()

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        groups = [self.R, self.r, self.Wbar[1:], self.What[1:], self.w[1:],
                  self.Vbar, self.Vhat, self.v, self.Bbar, self.bbar]
        if self.modified_output:
            groups[5] = self.Vbar[:-1]  # V_L is pinned to zero, not trained
        for group in groups:
            for p in group:
                out[p.name] = p
        return out

    def project_nonneg(self) -> None:
        """Clamp every Wbar entry to >= 0; idempotent; nothing else touched."""
        for p in self.Wbar[1:]:
            np.maximum(p.value, 0.0, out=p.value)

    def _check_nonneg(self) -> None:
        for p in self.Wbar[1:]:
            if p.value.min() < 0:
                raise ValueError(
                    f"{p.name} has negative entries; call project_nonneg after "
                    "parameter updates to preserve convexity"
                )

    def _leaf(self, tape, p):
        return tape.leaf(p) if tape is not None else p.value

    def _u_path(self, X, tape):
        """u_0..u_L as (N, .) matrices."""
        U = (np.atleast_2d(ad.value_of(X)) - self.x_loc) / self.x_scale
        if tape is not None:
            U = tape.watch(U)
        us = [U]
        for l in range(self.depth):
            R = self._leaf(tape, self.R[l])
            r = self._leaf(tape, self.r[l])
            us.append(ad.relu(ad.add(ad.matmul(us[-1], ad.transpose(R)), r)))
        return us

    def score_batch(self, X, Y, tape: Tape | None = None):
        self._check_nonneg()
        L = self.depth
        if not isinstance(Y, ad.Tensor):
            Y = np.atleast_2d(ad.value_of(Y))
        us = self._u_path(X, tape)

        def gates(l):
            u = us[l]
            gV = ad.add(ad.matmul(u, ad.transpose(self._leaf(tape, self.Vhat[l]))),
                        self._leaf(tape, self.v[l]))
            b = ad.add(ad.matmul(u, ad.transpose(self._leaf(tape, self.Bbar[l]))),
                       self._leaf(tape, self.bbar[l]))
            if l == 0:
                return None, gV, b
            gW = ad.relu(
                ad.add(ad.matmul(u, ad.transpose(self._leaf(tape, self.What[l]))),
                       self._leaf(tape, self.w[l])))
            return gW, gV, b

        _, gV0, b0 = gates(0)
        sigma = ad.relu(
            ad.add(ad.matmul(ad.mul(Y, gV0), ad.transpose(self._leaf(tape, self.Vbar[0]))), b0)
        )
        for l in range(1, L):
            gW, gV, b = gates(l)
            term = ad.add(
                ad.matmul(ad.mul(sigma, gW), ad.transpose(self._leaf(tape, self.Wbar[l]))),
                ad.matmul(ad.mul(Y, gV), ad.transpose(self._leaf(tape, self.Vbar[l]))),
            )
            sigma = ad.relu(ad.add(term, b))
        gW, gV, b = gates(L)
        out = ad.add(
            ad.matmul(ad.mul(sigma, gW), ad.transpose(self._leaf(tape, self.Wbar[L]))), b
        )
        if self.modified_output:
            if self.eps_inf:
                pen = ad.mul(ad.norm_inf(Y, axis=1), self.eps_inf)
                out = ad.add(out, ad.reshape(pen, (Y.shape[0], 1)))
        else:
            out = ad.add(
                out, ad.matmul(ad.mul(Y, gV), ad.transpose(self._leaf(tape, self.Vbar[L])))
            )
        return ad.reshape(out, (Y.shape[0],))

    def score(self, x, y, tape: Tape | None = None):
        X = np.atleast_2d(ad.value_of(x))
        if isinstance(y, ad.Tensor):
            Y = ad.reshape(y, (1, self.n))
        else:
            Y = np.atleast_2d(ad.value_of(y))
        s = self.score_batch(X, Y, tape)
        return ad.take(s, 0) if tape is not None else float(np.asarray(s)[0])

    def gated_at(self, x, tape: Tape | None = None):
        """Materialize the input-conditional affine data of every layer.

        Returns (Ws, Vs, bs) where Ws[l] is the gated sigma-path matrix for
        l = 1..depth (index 0 unused), Vs[l] / bs[l] for l = 0..depth. The
        final-layer V is None under the modified output. These are exactly
        the matrices the sublevel-set linear program is built from.
        """
        self._check_nonneg()
        L = self.depth
        us = self._u_path(np.atleast_2d(ad.value_of(x)), tape)
        us = [ad.take(u, 0) for u in us]
        Ws: list = [None]
        Vs: list = []
        bs: list = []
        for l in range(L + 1):
            u = us[l]
            if l >= 1:
                gW = ad.relu(
                    ad.add(ad.matmul(self._leaf(tape, self.What[l]), u),
                           self._leaf(tape, self.w[l])))
                Ws.append(ad.mul(self._leaf(tape, self.Wbar[l]), gW))
            gV = ad.add(ad.matmul(self._leaf(tape, self.Vhat[l]), u),
                        self._leaf(tape, self.v[l]))
            if l == L and self.modified_output:
                Vs.append(None)
            else:
                Vs.append(ad.mul(self._leaf(tape, self.Vbar[l]), gV))
            bs.append(ad.add(ad.matmul(self._leaf(tape, self.Bbar[l]), u),
                             self._leaf(tape, self.bbar[l])))
        return Ws, Vs, bs


class DerivedBoxModel:
    """Two-stage box: point predictor plus per-dimension residual radius."""

    kind = "box"

    def __init__(self, point: MlpBackbone, radius: MlpBackbone):
        if point.out_dim != radius.out_dim:
            raise ValueError("point and radius heads must share the target dim")
        self.n = point.out_dim
        self.point = point
        self.radius = radius

    def parameters(self):
        return {**self.point.parameters(), **self.radius.parameters()}

    def bounds_batch(self, X, tape: Tape | None = None):
        center = self.point.forward(X, tape)
        rad = ad.softplus(self.radius.forward(X, tape))
        return ad.sub(center, rad), ad.add(center, rad)

    score_batch = BoxModel.score_batch


class DerivedEllipsoidModel:
    """Two-stage ellipsoid: point predictor, shared residual shape L_base,
    and an optional scalar scale field r(x) (constant 1 when absent)."""

    kind = "ellipsoid"

    def __init__(self, point: MlpBackbone, L_base: Array,
                 scale: MlpBackbone | None = None):
        self.n = point.out_dim
        L_base = np.asarray(L_base, dtype=float)
        if L_base.shape != (self.n, self.n):
            raise ValueError("L_base must be n x n")
        if np.any(np.diag(L_base) <= 0):
            raise ValueError("L_base must have a positive diagonal")
        self.point = point
        self.L_base = L_base
        self.scale = scale

    def parameters(self):
        out = self.point.parameters()
        if self.scale is not None:
            out.update(self.scale.parameters())
        return out

    def _scale_at(self, X, tape):
        if self.scale is None:
            return np.ones(np.atleast_2d(ad.value_of(X)).shape[0])
        return ad.reshape(ad.softplus(self.scale.forward(X, tape)), (-1,))

    def params_at(self, x, tape: Tape | None = None):
        mu = ad.take(self.point.forward(np.atleast_2d(ad.value_of(x)), tape), 0)
        s = ad.take(self._scale_at(x, tape), 0)
        return mu, ad.mul(s, self.L_base)

    def score_batch(self, X, Y, tape: Tape | None = None):
        X = np.atleast_2d(ad.value_of(X))
        if not isinstance(Y, ad.Tensor):
            Y = np.atleast_2d(ad.value_of(Y))
        centers = self.point.forward(X, tape)
        scales = self._scale_at(X, tape)
        scores = []
        for i in range(X.shape[0]):
            L = ad.mul(ad.take(scales, i), self.L_base)
            w = ad.solve_triangular_lower(L, ad.sub(Y[i], ad.take(centers, i)))
            scores.append(ad.reshape(ad.sum_(ad.square(w)), (1,)))
        if tape is None:
            return np.concatenate(scores)
        return ad.concat(scores, axis=0)


def model_parameters(model) -> dict[str, Parameter]:
    return model.parameters()
