"""Per-worker loss families, exact and noisy gradient oracles.

Each objective holds ``m`` local losses ``g_i`` on ``R^N`` and the global
loss ``g = (1/m) sum_i g_i``. Gradient methods accept stacked iterates of
shape ``(..., m, N)`` so one call serves a whole batch of seeds.

Families
--------
quadratic_consensus
    ``g_i(x) = 1/2 (x - b_i)^T A_i (x - b_i)``; known minimiser.
logistic
    L2-regularised logistic regression on a synthetic per-worker dataset;
    minimiser found by Newton's method at construction.
soft_nonconvex
    ``g_i(x) = sum_j w_ij tanh(a_ij^T x - c_ij)^2``: non-negative, bounded
    gradient, many stationary points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import BadConfig, BadParam
from .streams import NoiseKind, NoiseStreams, unit_noise


class Family(str, enum.Enum):
    QUADRATIC = "quadratic_consensus"
    LOGISTIC = "logistic"
    SOFT_NONCONVEX = "soft_nonconvex"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind = NoiseKind.NONE
    scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.scale < 0:
            raise BadParam(f"noise scale must be >= 0, got {self.scale}")

    @property
    def silent(self) -> bool:
        return self.kind is NoiseKind.NONE or self.scale == 0.0


class Objective:
    """Common interface; subclasses implement ``grads`` and ``worker_losses``."""

    family: Family
    dim: int
    m: int
    box_radius: float = 1.0
    theta_star: np.ndarray | None = None
    g_star: float | None = None
    start_point: np.ndarray | None = None
    convex: bool = False

    def grads(self, X):
        """Row ``i`` of the result is ``grad g_i`` evaluated at row ``i`` of X."""
        raise NotImplementedError

    def worker_losses(self, X):
        raise NotImplementedError

    def _spread(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(x[..., None, :], x.shape[:-1] + (self.m, self.dim))

    def loss(self, x):
        """Global loss ``g(x)``; ``x`` has shape ``(..., N)``."""
        return self.worker_losses(self._spread(x)).mean(axis=-1)

    def grad(self, x):
        """Global gradient ``grad g(x)``."""
        return self.grads(self._spread(x)).mean(axis=-2)

    def worker_grads_at(self, x):
        """All local gradients at one common point: ``(..., m, N)``."""
        return self.grads(self._spread(x))

    def _finish(self, dataset_rng):
        self.start_point = dataset_rng.uniform(-self.box_radius, self.box_radius, self.dim)


class QuadraticConsensus(Objective):
    family = Family.QUADRATIC
    convex = True

    def __init__(self, A, b, box_radius=1.0):
        A = np.array(A, dtype=float)
        b = np.array(b, dtype=float)
        if A.ndim == 2:
            A = np.broadcast_to(A, (b.shape[0],) + A.shape).copy()
        if A.ndim != 3 or b.ndim != 2 or A.shape[:2] != b.shape or A.shape[1] != A.shape[2]:
            raise BadParam(f"incompatible shapes A{A.shape}, b{b.shape}")
        if np.max(np.abs(A - np.swapaxes(A, 1, 2))) > 1e-12:
            raise BadParam("curvature matrices must be symmetric")
        if np.min(np.linalg.eigvalsh(A)) < -1e-12:
            raise BadParam("curvature matrices must be positive semidefinite")
        self.A, self.b = A, b
        self.m, self.dim = b.shape
        self.box_radius = float(box_radius)
        self.hessian = A.mean(axis=0)
        self.L = float(np.linalg.eigvalsh(self.hessian)[-1])
        rhs = np.einsum("ijk,ik->j", A, b) / self.m
        try:
            self.theta_star = np.linalg.solve(self.hessian, rhs)
        except np.linalg.LinAlgError:
            self.theta_star = None
        self.g_star = None if self.theta_star is None else float(self.loss(self.theta_star))
        self.start_point = np.zeros(self.dim)

    def grads(self, X):
        D = np.asarray(X, dtype=float) - self.b
        return np.matmul(self.A, D[..., None])[..., 0]

    def worker_losses(self, X):
        D = np.asarray(X, dtype=float) - self.b
        return 0.5 * np.sum(D * np.matmul(self.A, D[..., None])[..., 0], axis=-1)


class Logistic(Objective):
    family = Family.LOGISTIC
    convex = True

    def __init__(self, features, labels, reg=0.1, box_radius=1.0, tol=1e-10):
        F = np.array(features, dtype=float)
        y = np.array(labels, dtype=float)
        if F.ndim != 3 or y.shape != F.shape[:2]:
            raise BadParam(f"incompatible shapes features{F.shape}, labels{y.shape}")
        if not np.all(np.abs(y) == 1.0):
            raise BadParam("labels must be +1 or -1")
        if reg <= 0:
            raise BadParam("logistic objective needs reg > 0 for a unique minimiser")
        self.F, self.y, self.reg = F, y, float(reg)
        self.m, self.samples, self.dim = F.shape
        self.box_radius = float(box_radius)
        self.theta_star, self.theta_star_grad_norm = self._newton(tol)
        self.g_star = float(self.loss(self.theta_star))
        self.start_point = np.zeros(self.dim)

    def _margins(self, X):
        X = np.asarray(X, dtype=float)
        return self.y * np.matmul(self.F, X[..., None])[..., 0]

    def grads(self, X):
        X = np.asarray(X, dtype=float)
        coef = -self.y * expit(-self._margins(X)) / self.samples
        return np.matmul(np.swapaxes(self.F, -1, -2), coef[..., None])[..., 0] + self.reg * X

    def worker_losses(self, X):
        X = np.asarray(X, dtype=float)
        z = self._margins(X)
        return np.logaddexp(0.0, -z).mean(axis=-1) + 0.5 * self.reg * np.sum(X * X, axis=-1)

    def hessian_at(self, x):
        z = self._margins(self._spread(x))
        s = expit(z) * expit(-z) / self.samples
        H = np.einsum("ij,ijk,ijl->kl", s, self.F, self.F) / self.m
        return H + self.reg * np.eye(self.dim)

    def _newton(self, tol, max_iter=100):
        x = np.zeros(self.dim)
        for _ in range(max_iter):
            g = self.grad(x)
            gn = float(np.linalg.norm(g))
            if gn <= tol:
                return x, gn
            x = x - np.linalg.solve(self.hessian_at(x), g)
        gn = float(np.linalg.norm(self.grad(x)))
        if gn > tol:
            raise BadParam(f"Newton solve for the minimiser stalled at |grad| = {gn:.3e}")
        return x, gn


class SoftNonconvex(Objective):
    family = Family.SOFT_NONCONVEX

    def __init__(self, a, c, w, box_radius=1.0):
        a = np.array(a, dtype=float)
        c = np.array(c, dtype=float)
        w = np.array(w, dtype=float)
        if a.ndim != 3 or c.shape != a.shape[:2] or w.shape != c.shape:
            raise BadParam(f"incompatible shapes a{a.shape}, c{c.shape}, w{w.shape}")
        if np.min(w) < 0:
            raise BadParam("ridge weights must be non-negative")
        self.a, self.c, self.w = a, c, w
        self.m, self.ridges, self.dim = a.shape
        self.box_radius = float(box_radius)
        # tanh^2 has curvature at most 2, so this bounds every local Hessian.
        self.L = float(np.max(np.sum(2.0 * w * np.sum(a * a, axis=-1), axis=-1)))
        self.start_point = np.zeros(self.dim)

    def _residuals(self, X):
        X = np.asarray(X, dtype=float)
        return np.matmul(self.a, X[..., None])[..., 0] - self.c

    def grads(self, X):
        t = np.tanh(self._residuals(X))
        coef = 2.0 * self.w * t * (1.0 - t * t)
        return np.matmul(np.swapaxes(self.a, -1, -2), coef[..., None])[..., 0]

    def worker_losses(self, X):
        t = np.tanh(self._residuals(X))
        return np.sum(self.w * t * t, axis=-1)


def _rotation(rng, n):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def build_objective(family, N, m, heterogeneity=0.0, box_radius=1.0, dataset_seed=0,
                    **params) -> Objective:
    """Synthetic objective of the given family, fully determined by ``dataset_seed``.

    ``heterogeneity`` scales the per-worker perturbations; at 0 every worker
    holds the same local loss.
    """
    family = Family(family)
    N, m = int(N), int(m)
    if N < 1 or m < 1:
        raise BadConfig(f"need N >= 1 and m >= 1, got N={N}, m={m}")
    h = float(heterogeneity)
    rng = np.random.default_rng(int(dataset_seed))

    def take(name, default):
        return params.pop(name, default)

    if family is Family.QUADRATIC:
        eig_min = float(take("eig_min", 1.0))
        eig_max = float(take("eig_max", 1.0))
        target_scale = float(take("target_scale", 1.0))
        if not 0 < eig_min <= eig_max:
            raise BadConfig(f"need 0 < eig_min <= eig_max, got {eig_min}, {eig_max}")
        if eig_min == eig_max:
            A = eig_min * np.eye(N)
        else:
            Q = _rotation(rng, N)
            A = (Q * np.geomspace(eig_min, eig_max, N)) @ Q.T
            A = 0.5 * (A + A.T)
        center = target_scale * rng.standard_normal(N)
        b = center + h * rng.standard_normal((m, N))
        obj = QuadraticConsensus(A, b, box_radius=box_radius)
    elif family is Family.LOGISTIC:
        samples = int(take("samples", 40))
        reg = float(take("reg", 0.1))
        truth = rng.standard_normal(N)
        shift = h * rng.standard_normal((m, 1, N))
        F = rng.standard_normal((m, samples, N)) + shift
        logits = F @ truth + 0.5 * rng.standard_normal((m, samples))
        y = np.where(logits >= 0, 1.0, -1.0)
        obj = Logistic(F, y, reg=reg, box_radius=box_radius)
    else:
        J = int(take("ridges", 4))
        ridge_norm = float(take("ridge_norm", 0.5))
        ridge_weight = float(take("ridge_weight", 8.0))
        a0 = rng.standard_normal((J, N))
        a0 *= ridge_norm / np.linalg.norm(a0, axis=1, keepdims=True)
        c0 = rng.uniform(-1.0, 1.0, J)
        w0 = ridge_weight * rng.uniform(0.5, 1.5, J)
        a = a0 + h * ridge_norm * rng.standard_normal((m, J, N)) / np.sqrt(N)
        c = c0 + h * rng.standard_normal((m, J))
        w = np.broadcast_to(w0, (m, J)).copy()
        obj = SoftNonconvex(a, c, w, box_radius=box_radius)

    if params:
        raise BadConfig(f"unknown {family.value} parameters: {sorted(params)}")
    obj._finish(rng)
    return obj


# ---------------------------------------------------------------------------
# operations


def eval_loss(obj: Objective, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != obj.dim:
        raise BadParam(f"expected a point of dimension {obj.dim}, got {x.shape}")
    return obj.loss(x)


def grad_exact(obj: Objective, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-2:] != (obj.m, obj.dim):
        raise BadParam(f"expected iterates of shape (..., {obj.m}, {obj.dim}), got {X.shape}")
    return obj.grads(X)


def grad_noisy(obj: Objective, noise: NoiseModel, X, streams: NoiseStreams) -> np.ndarray:
    """Exact gradient plus one step of per-worker noise from ``streams``.

    ``X`` is ``(m, N)`` for a single seed or ``(S, m, N)`` for ``S`` seeds.
    """
    G = grad_exact(obj, X)
    if noise.kind is NoiseKind.NONE:
        return G
    xi = streams.next()
    if G.ndim == 2:
        xi = xi[0]
    return G + noise.scale * xi


@dataclass(frozen=True)
class AssumptionReport:
    sigma0_sq_hat: float
    sigma1_sq_hat: float
    L_hat: float
    M_hat: float
    probes: int


def estimate_assumptions(obj: Objective, noise: NoiseModel, probe_count: int,
                         rng: np.random.Generator, box_radius=None) -> AssumptionReport:
    """Monte Carlo / probe-max estimates of the noise and regularity constants.

    Probes are drawn uniformly from the box ``[-r, r]^N`` (``r`` defaults to
    the objective's ``box_radius``).

    * ``sigma0_sq_hat`` -- mean over probes of one draw of
      ``sum_i |noisy_i - exact_i|^2`` (summed over workers, not averaged);
    * ``sigma1_sq_hat`` -- max over probes of ``(1/m) sum_i |grad g_i - grad g|^2``;
    * ``L_hat``         -- max ratio ``|G(X) - G(Y)| / |X - Y|`` over probe pairs;
    * ``M_hat``         -- max ``|G(X)|`` over probes.
    """
    if probe_count < 100:
        raise BadParam(f"probe_count must be >= 100, got {probe_count}")
    r = obj.box_radius if box_radius is None else float(box_radius)
    m, N = obj.m, obj.dim

    X = rng.uniform(-r, r, (probe_count, m, N))
    Y = rng.uniform(-r, r, (probe_count, m, N))
    x = rng.uniform(-r, r, (probe_count, N))

    if noise.silent:
        sigma0 = 0.0
    else:
        xi = noise.scale * unit_noise(noise.kind, rng, (probe_count, m, N))
        sigma0 = float(np.mean(np.sum(xi * xi, axis=(1, 2))))

    local = obj.worker_grads_at(x)
    dev = local - local.mean(axis=-2, keepdims=True)
    sigma1 = float(np.max(np.sum(dev * dev, axis=(1, 2)) / m))

    GX, GY = obj.grads(X), obj.grads(Y)
    dist = np.sqrt(np.sum((X - Y) ** 2, axis=(1, 2)))
    L_hat = float(np.max(np.sqrt(np.sum((GX - GY) ** 2, axis=(1, 2))) / dist))
    M_hat = float(np.max(np.sqrt(np.sum(GX * GX, axis=(1, 2)))))
    return AssumptionReport(sigma0, sigma1, L_hat, M_hat, int(probe_count))
