"""Independent reference computations used to check the engine.

Nothing here calls the engine: the recursions are re-coded from scratch so
a shared bug cannot hide in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import InitPolicy, RunConfig
from .errors import BadConfig, TooLarge
from .schedules import step_at
from .streams import INIT_POINT_KEY, INIT_ROW_KEY, NOISE_KEY, NoiseKind, substream, unit_noise
from .topology import MixingKind

ENUMERATION_LIMIT = 2 ** 24
ORACLE_SCHEMA = "dmsgd.oracle/1"


def _start_rows(cfg: RunConfig, obj, seed: int) -> np.ndarray:
    m, N, r = cfg.topology.m, obj.dim, obj.box_radius
    if cfg.init is InitPolicy.ZERO_CONSENSUS:
        rows = np.repeat(obj.start_point[None, :], m, axis=0)
    elif cfg.init is InitPolicy.RANDOM_BOX:
        rows = np.repeat(substream(seed, INIT_POINT_KEY).uniform(-r, r, N)[None, :], m, axis=0)
    else:
        rows = np.array([substream(seed, INIT_ROW_KEY, i).uniform(-r, r, N) for i in range(m)])
    if cfg.topology.kind is MixingKind.EASGD:
        rows = np.vstack([rows, rows.mean(axis=0)])
    return rows


def _dense(cfg: RunConfig):
    comm = cfg.topology.build()
    return comm, np.array(comm.matrix.entries)


@dataclass(frozen=True)
class ExactTable:
    """Exact expectations at ``n = 1 .. H+1`` over every noise sequence."""

    n: np.ndarray
    grad_norm_sq: np.ndarray
    loss_avg_iterate: np.ndarray
    consensus_err: np.ndarray
    sequences: int

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"# schema={ORACLE_SCHEMA} sequences={self.sequences}\n")
            fh.write("n,grad_norm_sq,loss_avg_iterate,consensus_err\n")
            for j in range(len(self.n)):
                vals = (self.grad_norm_sq[j], self.loss_avg_iterate[j], self.consensus_err[j])
                fh.write(f"{int(self.n[j])}," + ",".join(repr(float(v)) for v in vals) + "\n")

    @classmethod
    def read_csv(cls, path) -> "ExactTable":
        from .errors import SchemaError
        with open(path) as fh:
            head = fh.readline().strip()
            if not head.startswith(f"# schema={ORACLE_SCHEMA}"):
                raise SchemaError(f"{path}: unsupported header {head!r}")
            seqs = int(head.rsplit("sequences=", 1)[1])
            data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0].astype(np.int64), data[:, 1], data[:, 2], data[:, 3], seqs)


def exhaustive_expectation(cfg: RunConfig, horizon: int | None = None,
                           block: int = 2 ** 18) -> ExactTable:
    """Average the deterministic recursion over every equiprobable sign sequence.

    Needs Rademacher (or no) noise. With ``m`` workers in ``N`` dimensions each
    step has ``2**(m*N)`` outcomes, so ``H`` steps give ``2**(m*N*H)`` paths.
    """
    H = cfg.horizon if horizon is None else int(horizon)
    kind = cfg.objective.noise_kind
    scale = cfg.objective.noise_scale
    if kind not in (NoiseKind.RADEMACHER, NoiseKind.NONE):
        raise BadConfig(f"enumeration needs rademacher or no noise, got {kind.value}")
    if cfg.init is not InitPolicy.ZERO_CONSENSUS:
        raise BadConfig("enumeration needs a seed-free start (init = zero_consensus)")
    obj = cfg.objective.build(cfg.topology.m)
    m, N = obj.m, obj.dim
    bits = m * N * H if kind is NoiseKind.RADEMACHER and scale > 0 else 0
    if bits > 24 or 2 ** bits > ENUMERATION_LIMIT:
        raise TooLarge(f"2^{bits} noise sequences exceed the enumeration limit 2^24")
    total = 2 ** bits
    comm, W = _dense(cfg)
    anchor = comm.matrix.has_anchor
    X0 = _start_rows(cfg, obj, cfg.seed)
    sched = cfg.schedule.build(m)
    eps = [step_at(sched, n) for n in range(1, H + 1)]

    sums = {key: [[] for _ in range(H + 1)] for key in ("g", "l", "c")}
    for start in range(0, total, block):
        idx = np.arange(start, min(start + block, total), dtype=np.int64)
        B = len(idx)
        X = np.broadcast_to(X0, (B,) + X0.shape).copy()
        V = np.zeros_like(X)
        for n in range(1, H + 2):
            rows = X[:, :m, :]
            xbar = rows.mean(axis=1)
            gbar = obj.grad(xbar)
            sums["g"][n - 1].append(math.fsum(np.sum(gbar * gbar, axis=1)))
            sums["l"][n - 1].append(math.fsum(obj.loss(xbar)))
            dev = rows - xbar[:, None, :]
            sums["c"][n - 1].append(math.fsum(np.sum(dev * dev, axis=(1, 2))))
            if n == H + 1:
                break
            G = obj.grads(rows)
            if bits:
                shift = (n - 1) * m * N
                code = (idx[:, None] >> (shift + np.arange(m * N))) & 1
                G = G + scale * np.where(code == 1, 1.0, -1.0).reshape(B, m, N)
            if anchor:
                G = np.concatenate([G, np.zeros((B, 1, N))], axis=1)
            V = cfg.alpha * V + eps[n - 1] * G
            X = X - V
            if comm.communicates(n):
                X = np.einsum("ij,bjk->bik", W, X)
    mean = {key: np.array([math.fsum(v) / total for v in vals]) for key, vals in sums.items()}
    return ExactTable(np.arange(1, H + 2), mean["g"], mean["l"], mean["c"], total)


def _noise_rows(cfg: RunConfig, m: int, N: int, H: int) -> np.ndarray:
    """All noise draws of one seed, ``(H, m, N)``, straight from the substreams."""
    kind = cfg.objective.noise_kind
    if kind is NoiseKind.NONE:
        return np.zeros((H, m, N))
    out = np.empty((H, m, N))
    for i in range(m):
        out[:, i, :] = unit_noise(kind, substream(cfg.seed, NOISE_KEY, i), (H, N))
    return out


def dsgd_reference(cfg: RunConfig) -> np.ndarray:
    """Momentum-free decentralised SGD: ``X <- W_n (X - eps_n G)``.

    Returns the iterates ``X_1 .. X_{H+1}``.
    """
    obj = cfg.objective.build(cfg.topology.m)
    m, N, H = obj.m, obj.dim, cfg.horizon
    comm, W = _dense(cfg)
    xi = _noise_rows(cfg, m, N, H)
    scale = cfg.objective.noise_scale
    sched = cfg.schedule.build(m)
    X = _start_rows(cfg, obj, cfg.seed)
    out = [X]
    for n in range(1, H + 1):
        G = obj.grads(X[:m])
        if cfg.objective.noise_kind is not NoiseKind.NONE:
            G = G + scale * xi[n - 1]
        if comm.matrix.has_anchor:
            G = np.vstack([G, np.zeros((1, N))])
        X = X - step_at(sched, n) * G
        if comm.communicates(n) and comm.matrix.kind is not MixingKind.IDENTITY:
            X = np.matmul(W, X)
        out.append(X)
    return np.stack(out)


def heavy_ball_reference(cfg: RunConfig) -> np.ndarray:
    """Centralised heavy-ball on a single worker; returns ``x_1 .. x_{H+1}`` as ``(H+1, 1, N)``."""
    if cfg.topology.m != 1:
        raise BadConfig("heavy-ball reference is single-worker")
    obj = cfg.objective.build(1)
    N, H = obj.dim, cfg.horizon
    xi = _noise_rows(cfg, 1, N, H)[:, 0, :]
    scale = cfg.objective.noise_scale
    sched = cfg.schedule.build(1)
    x = _start_rows(cfg, obj, cfg.seed)[0]
    v = np.zeros(N)
    out = [x]
    for n in range(1, H + 1):
        g = obj.grads(x[None, :])[0]
        if cfg.objective.noise_kind is not NoiseKind.NONE:
            g = g + scale * xi[n - 1]
        v = cfg.alpha * v + step_at(sched, n) * g
        x = x - v
        out.append(x)
    return np.stack(out)[:, None, :]


def finite_difference_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_j) - f(x - h e_j)) / 2h``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        out.flat[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out
