"""The momentum iteration

    v_n     = alpha * v_{n-1} + eps_n * G(X_n, xi_n)
    X_{n+1} = W_n (X_n - v_n)

on a stack of worker rows (plus an anchor row for EASGD), for one seed or a
batch of seeds at once. Arrays carry an optional leading seed axis, so
``X`` is ``(d, N)`` or ``(S, d, N)``.
"""

from __future__ import annotations

import functools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GridKind, InitPolicy, ObjectiveConfig, RunConfig
from .errors import BadConfig, NumericalDivergence, SchemaError
from .objectives import grad_noisy
from .schedules import steps
from .streams import INIT_POINT_KEY, INIT_ROW_KEY, NoiseStreams, substream

RECORD_SCHEMA = "dmsgd.record/1"
FIELDS = ("n", "eps", "grad_norm_sq", "loss_avg_iterate", "consensus_err",
          "u_v_norm", "z_subopt", "wallclock_us")


@functools.lru_cache(maxsize=32)
def _objective(ocfg: ObjectiveConfig, m: int):
    return ocfg.build(m)


def record_grid(cfg: RunConfig) -> np.ndarray:
    """Iterations at which a run records a row; always starts at 1."""
    H = cfg.horizon
    if cfg.grid is GridKind.LINEAR:
        pts = set(range(cfg.record_every, H + 1, cfg.record_every))
    else:
        raw = np.rint(np.logspace(0.0, math.log10(H), cfg.grid_points)).astype(np.int64)
        pts = set(int(x) for x in raw)
        pts |= {10 ** j for j in range(int(math.log10(H)) + 1) if 10 ** j <= H}
        pts.add(H)
    pts.add(1)
    return np.array(sorted(p for p in pts if 1 <= p <= H), dtype=np.int64)


class RunContext:
    """Everything a run needs besides its state: built components and caches."""

    def __init__(self, cfg: RunConfig, seeds=None, chunk=256):
        self.cfg = cfg
        self.comm = cfg.topology.build()
        self.m = cfg.topology.m
        self.d = self.comm.matrix.dim
        self.anchor = self.comm.matrix.has_anchor
        self.objective = _objective(cfg.objective, self.m)
        if self.objective.m != self.m:
            raise BadConfig(f"objective has {self.objective.m} workers, topology has {self.m}")
        self.dim = self.objective.dim
        self.noise = cfg.objective.noise
        self.schedule = cfg.schedule.build(self.m)
        self.eps = steps(self.schedule, cfg.horizon)
        self.grid = record_grid(cfg)
        self.seeds = [cfg.seed] if seeds is None else [int(s) for s in seeds]
        self.streams = NoiseStreams(self.seeds, self.m, self.dim, self.noise.kind,
                                    chunk=min(chunk, cfg.horizon))


@dataclass
class SimState:
    X: np.ndarray
    v: np.ndarray
    m: int
    alpha: float
    n: int = 1
    uX_prev: np.ndarray | None = None
    max_u_norm: np.ndarray | float = 0.0
    G: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise BadConfig(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.uX_prev is None:
            self.uX_prev = self.X.mean(axis=-2)


def initial_rows(cfg: RunConfig, objective, seed: int) -> np.ndarray:
    """Worker rows ``X_1`` (shape ``(m, N)``) under the configured init policy."""
    m, N, r = cfg.topology.m, objective.dim, objective.box_radius
    if cfg.init is InitPolicy.ZERO_CONSENSUS:
        return np.tile(objective.start_point, (m, 1))
    if cfg.init is InitPolicy.RANDOM_BOX:
        point = substream(seed, INIT_POINT_KEY).uniform(-r, r, N)
        return np.tile(point, (m, 1))
    return np.stack([substream(seed, INIT_ROW_KEY, i).uniform(-r, r, N) for i in range(m)])


def _with_anchor(rows):
    return np.concatenate([rows, rows.mean(axis=-2, keepdims=True)], axis=-2)


def init_state(cfg: RunConfig, ctx: RunContext | None = None) -> SimState:
    """Single-seed state for ``cfg.seed``."""
    ctx = ctx or RunContext(cfg)
    X = initial_rows(cfg, ctx.objective, cfg.seed)
    if ctx.anchor:
        X = _with_anchor(X)
    if X.shape[-2] != ctx.d:
        raise BadConfig(f"initial state has {X.shape[-2]} rows, mixing matrix expects {ctx.d}")
    return SimState(X=X, v=np.zeros_like(X), m=ctx.m, alpha=cfg.alpha)


def init_batch(ctx: RunContext) -> SimState:
    X = np.stack([initial_rows(ctx.cfg, ctx.objective, s) for s in ctx.seeds])
    if ctx.anchor:
        X = _with_anchor(X)
    return SimState(X=X, v=np.zeros_like(X), m=ctx.m, alpha=ctx.cfg.alpha,
                    max_u_norm=np.zeros(len(ctx.seeds)))


def stochastic_gradient(state: SimState, ctx: RunContext) -> np.ndarray:
    G = grad_noisy(ctx.objective, ctx.noise, state.X[..., :ctx.m, :], ctx.streams)
    if ctx.anchor:
        G = np.concatenate([G, np.zeros_like(G[..., :1, :])], axis=-2)
    return G


def step(state: SimState, ctx: RunContext) -> SimState:
    """One iteration; returns the state at ``n + 1``."""
    n = state.n
    if n > ctx.cfg.horizon:
        raise BadConfig(f"step {n} is past the horizon {ctx.cfg.horizon}")
    G = stochastic_gradient(state, ctx)
    v = state.alpha * state.v + ctx.eps[n - 1] * G
    Y = state.X - v
    W = ctx.comm.matrix_at(n)
    X = Y if W is None else np.matmul(W, Y)

    uX = X.mean(axis=-2)
    unorm = np.sqrt(np.sum(uX * uX, axis=-1))
    bad = ~np.isfinite(unorm) | (unorm > ctx.cfg.guard)
    if np.any(bad):
        where = ""
        if np.ndim(bad):
            where = f"seed index {int(np.flatnonzero(bad)[0])}, "
        raise NumericalDivergence(n, f"{where}|u^T X| = {np.max(unorm)!r} "
                                     f"(guard {ctx.cfg.guard:g})")
    return SimState(X=X, v=v, m=state.m, alpha=state.alpha, n=n + 1,
                    uX_prev=state.X.mean(axis=-2),
                    max_u_norm=np.maximum(state.max_u_norm, unorm), G=G)


def average_iterate(state: SimState) -> np.ndarray:
    """Mean of the worker rows; an EASGD anchor row is not included."""
    return state.X[..., :state.m, :].mean(axis=-2)


def consensus_error(rows: np.ndarray) -> np.ndarray:
    """``sum_i |x_i - xbar|^2`` via the pairwise form, exactly 0 for equal rows."""
    D = rows[..., :, None, :] - rows[..., None, :, :]
    return np.sum(D * D, axis=(-3, -2, -1)) / (2.0 * rows.shape[-2])


@dataclass
class TrajectoryRecord:
    seed: int
    alpha: float
    n: np.ndarray
    eps: np.ndarray
    grad_norm_sq: np.ndarray
    loss_avg_iterate: np.ndarray
    consensus_err: np.ndarray
    u_v_norm: np.ndarray
    z_subopt: np.ndarray
    wallclock_us: np.ndarray
    worker_grad_norm_sq: np.ndarray | None = None
    uX: np.ndarray | None = None
    uG: np.ndarray | None = None
    max_u_norm: float = float("nan")
    horizon: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.n)

    def same_values(self, other: "TrajectoryRecord") -> bool:
        """Bitwise equality of every measured field except wall-clock time."""
        for name in FIELDS[:-1] + ("worker_grad_norm_sq", "uX", "uG"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape
                                  or a.tobytes() != b.tobytes()):
                return False
        return True

    def rows(self):
        for j in range(len(self.n)):
            row = {}
            for name in FIELDS:
                val = getattr(self, name)[j]
                if name == "n":
                    row[name] = int(val)
                elif name == "wallclock_us":
                    row[name] = int(val)
                else:
                    val = float(val)
                    row[name] = None if math.isnan(val) else val
            if self.worker_grad_norm_sq is not None:
                row["worker_grad_norm_sq"] = [float(x) for x in self.worker_grad_norm_sq[j]]
            if self.uX is not None:
                row["uX"] = [float(x) for x in self.uX[j]]
                row["uG"] = [float(x) for x in self.uG[j]]
            yield row

    def write_jsonl(self, path):
        meta = {"seed": self.seed, "alpha": self.alpha, "horizon": self.horizon}
        with open(path, "w") as fh:
            fh.write(f"# schema={RECORD_SCHEMA} {json.dumps(meta, sort_keys=True)}\n")
            for row in self.rows():
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrajectoryRecord":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# schema="):
            raise SchemaError(f"{path}: missing schema header")
        schema, _, meta = lines[0][len("# schema="):].partition(" ")
        if schema != RECORD_SCHEMA:
            raise SchemaError(f"{path}: unsupported schema {schema!r}")
        meta = json.loads(meta)
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
        cols = {}
        for name in FIELDS:
            vals = [r[name] for r in rows]
            if name in ("n", "wallclock_us"):
                cols[name] = np.array(vals, dtype=np.int64)
            else:
                cols[name] = np.array([np.nan if x is None else x for x in vals], dtype=float)
        opt = {}
        if rows and "worker_grad_norm_sq" in rows[0]:
            opt["worker_grad_norm_sq"] = np.array([r["worker_grad_norm_sq"] for r in rows])
        if rows and "uX" in rows[0]:
            opt["uX"] = np.array([r["uX"] for r in rows])
            opt["uG"] = np.array([r["uG"] for r in rows])
        return cls(seed=int(meta["seed"]), alpha=float(meta["alpha"]),
                   horizon=int(meta.get("horizon", 0)), **cols, **opt)


def _measure(ctx: RunContext, state: SimState) -> dict:
    obj = ctx.objective
    rows = state.X[..., :ctx.m, :]
    xbar = rows.mean(axis=-2)
    grad = obj.grad(xbar)
    out = {
        "grad_norm_sq": np.sum(grad * grad, axis=-1),
        "loss_avg_iterate": obj.loss(xbar),
        "consensus_err": consensus_error(rows),
    }
    uX = state.X.mean(axis=-2)
    a = state.alpha
    z = (uX - a * state.uX_prev) / (1.0 - a)
    if obj.g_star is None:
        out["z_subopt"] = np.full(np.shape(out["grad_norm_sq"]), np.nan)
    else:
        out["z_subopt"] = obj.loss(z) - obj.g_star
    if ctx.cfg.record_worker_grads:
        wg = obj.grads(rows)
        out["worker_grad_norm_sq"] = np.sum(wg * wg, axis=-1)
    if ctx.cfg.retain_snapshots:
        out["uX"] = uX
    return out


def run_batch(cfg: RunConfig, seeds) -> list[TrajectoryRecord]:
    """Run ``cfg`` once per seed, vectorised across seeds.

    Each seed's trajectory is a deterministic function of that seed alone.
    """
    ctx = RunContext(cfg, seeds)
    state = init_batch(ctx)
    S = len(ctx.seeds)
    grid = ctx.grid
    cols = {name: [] for name in ("grad_norm_sq", "loss_avg_iterate", "consensus_err",
                                  "z_subopt", "u_v_norm", "wallclock_us",
                                  "worker_grad_norm_sq", "uX", "uG")}
    t0 = time.perf_counter_ns()
    gi = 0
    for n in range(1, cfg.horizon + 1):
        pre = _measure(ctx, state) if gi < len(grid) and grid[gi] == n else None
        state = step(state, ctx)
        if pre is None:
            continue
        gi += 1
        uv = state.v.mean(axis=-2)
        pre["u_v_norm"] = np.sqrt(np.sum(uv * uv, axis=-1))
        if cfg.retain_snapshots:
            pre["uG"] = state.G.mean(axis=-2)
        pre["wallclock_us"] = np.full(S, (time.perf_counter_ns() - t0) // 1000)
        for name, val in pre.items():
            cols[name].append(val)

    stacked = {name: np.stack(vals, axis=1) for name, vals in cols.items() if vals}
    out = []
    for s, seed in enumerate(ctx.seeds):
        extra = {name: stacked[name][s] for name in ("worker_grad_norm_sq", "uX", "uG")
                 if name in stacked}
        out.append(TrajectoryRecord(
            seed=seed, alpha=cfg.alpha, n=grid.copy(),
            eps=ctx.eps[grid - 1].copy(),
            grad_norm_sq=stacked["grad_norm_sq"][s],
            loss_avg_iterate=stacked["loss_avg_iterate"][s],
            consensus_err=stacked["consensus_err"][s],
            u_v_norm=stacked["u_v_norm"][s],
            z_subopt=stacked["z_subopt"][s],
            wallclock_us=stacked["wallclock_us"][s].astype(np.int64),
            max_u_norm=float(state.max_u_norm[s]),
            horizon=cfg.horizon,
            **extra,
        ))
    return out


def run(cfg: RunConfig) -> TrajectoryRecord:
    return run_batch(cfg, [cfg.seed])[0]


def iterates(cfg: RunConfig) -> np.ndarray:
    """Full state history ``X_1 .. X_{horizon+1}`` of one seed, shape ``(H+1, d, N)``."""
    ctx = RunContext(cfg)
    state = init_state(cfg, ctx)
    out = [state.X]
    for _ in range(cfg.horizon):
        state = step(state, ctx)
        out.append(state.X)
    return np.stack(out)
