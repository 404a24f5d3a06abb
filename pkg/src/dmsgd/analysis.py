"""Ensemble statistics, hitting times, rate fits and the derived checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter
from scipy.stats import mannwhitneyu

from .errors import BadParam, BadRegime, GridMismatch, InsufficientSamples
from .schedules import ScheduleFamily, StepSchedule, partial_sum, steps

STATS = ("grad_norm_sq", "loss_avg_iterate", "consensus_err", "u_v_norm", "z_subopt")


def _fmean(col) -> float:
    return math.fsum(col) / len(col)


@dataclass
class EnsembleStats:
    grid: np.ndarray
    eps: np.ndarray
    seeds: int
    mean: dict
    stderr: dict
    tams: np.ndarray
    tams_err: np.ndarray
    tams_exact: bool

    @property
    def mean_grad_norm_sq(self):
        return self.mean["grad_norm_sq"]

    @property
    def mean_consensus(self):
        return self.mean["consensus_err"]

    def at(self, stat: str, n: int) -> float:
        j = np.searchsorted(self.grid, n)
        if j >= len(self.grid) or self.grid[j] != n:
            raise GridMismatch(f"n = {n} is not on the recorded grid")
        return float(self.mean[stat][j])


def running_average(grid, values):
    """Time average ``(1/n) sum_{k<=n} f(k)`` at every grid point.

    Exact when the grid is ``1..H``; otherwise ``f`` is linearly
    interpolated between grid points. Returns ``(avg, err, exact)``, where
    ``err`` bounds the gap between the linear and the step interpolant.
    """
    grid = np.asarray(grid, dtype=np.int64)
    f = np.asarray(values, dtype=float)
    if grid[0] != 1:
        raise GridMismatch("time averages need the grid to start at n = 1")
    exact = bool(np.all(np.diff(grid) == 1))
    total = np.empty(len(grid))
    err = np.zeros(len(grid))
    acc, slack = f[0], 0.0
    total[0] = acc
    for j in range(1, len(grid)):
        gap = int(grid[j] - grid[j - 1])
        acc += gap * f[j - 1] + (f[j] - f[j - 1]) * (gap + 1) / 2.0
        slack += 0.5 * abs(f[j] - f[j - 1]) * (gap - 1)
        total[j] = acc
        err[j] = slack
    return total / grid, err / grid, exact


def ensemble(records) -> EnsembleStats:
    records = list(records)
    if len(records) < 2:
        raise InsufficientSamples("an ensemble needs at least two records")
    grid = records[0].n
    for r in records[1:]:
        if r.n.shape != grid.shape or np.any(r.n != grid):
            raise GridMismatch(f"record for seed {r.seed} is on a different grid")
    S = len(records)
    mean, se = {}, {}
    for name in STATS:
        data = np.stack([getattr(r, name) for r in records])
        mean[name] = np.array([_fmean(data[:, j]) for j in range(data.shape[1])])
        se[name] = data.std(axis=0, ddof=1) / math.sqrt(S)
    tams, err, exact = running_average(grid, mean["grad_norm_sq"])
    return EnsembleStats(grid=grid.copy(), eps=records[0].eps.copy(), seeds=S, mean=mean,
                         stderr=se, tams=tams, tams_err=err, tams_exact=exact)


def tams_chain(stats: EnsembleStats, rtol: float = 1e-12) -> tuple[bool, float]:
    """If the mean stays below ``c`` from ``n0`` on, the time average at ``n``
    is at most ``c + (n0/n) * max earlier``. Checked for every ``n0`` on the
    grid; returns (holds, worst excess)."""
    f, g, tams = stats.mean_grad_norm_sq, stats.grid, stats.tams
    tail_max = np.maximum.accumulate(f[::-1])[::-1]
    worst = -np.inf
    for j0 in range(1, len(g)):
        c = tail_max[j0]
        early = np.max(f[:j0])
        bound = c + (g[j0] / g[j0:]) * early
        excess = tams[j0:] - bound
        worst = max(worst, float(np.max(excess / np.maximum(bound, 1e-300))))
    return worst <= rtol, worst


@dataclass(frozen=True)
class HittingTimeSample:
    a0: float
    tau: int | None
    censored: bool
    alpha: float
    partial_sum_at_tau: float
    seed: int = 0
    worker: int | None = None
    horizon: int = 0


def _first_below(n, values, a0):
    hit = np.flatnonzero(np.asarray(values) < a0)
    return None if hit.size == 0 else int(n[hit[0]])


def hitting_times(records, a0: float, schedule: StepSchedule | None = None,
                  per_worker: bool = False) -> list[HittingTimeSample]:
    """First recorded ``n`` with squared gradient norm below ``a0``.

    The default watches the global gradient at the averaged iterate. With
    ``per_worker`` each worker's local gradient at its own row is watched
    instead, giving one sample per (record, worker). Censored samples carry
    ``tau = None`` and the partial sum up to the horizon.
    """
    if not a0 > 0:
        raise BadParam(f"a0 must be positive, got {a0}")
    out = []
    for r in records:
        horizon = r.horizon or int(r.n[-1])
        if per_worker:
            if r.worker_grad_norm_sq is None:
                raise BadParam("per-worker hitting times need record_worker_grads = true")
            series = [(i, r.worker_grad_norm_sq[:, i]) for i in range(r.worker_grad_norm_sq.shape[1])]
        else:
            series = [(None, r.grad_norm_sq)]
        for worker, vals in series:
            tau = _first_below(r.n, vals, a0)
            upto = horizon if tau is None else tau
            if schedule is not None:
                ps = partial_sum(schedule, upto)
            else:
                ps = math.nan
            out.append(HittingTimeSample(a0=float(a0), tau=tau, censored=tau is None,
                                         alpha=float(r.alpha), partial_sum_at_tau=ps,
                                         seed=r.seed, worker=worker, horizon=horizon))
    return out


@dataclass(frozen=True)
class CCDFTable:
    n: np.ndarray
    partial_sum: np.ndarray
    ccdf: np.ndarray
    censored_fraction: float
    samples: int


def tail_ccdf(samples, grid, schedule: StepSchedule, min_uncensored: int = 50) -> CCDFTable:
    """Empirical ``P(tau >= n)`` on ``grid`` (up to the horizon) next to the
    partial sums of the step sizes."""
    samples = list(samples)
    done = np.array([s.tau for s in samples if not s.censored], dtype=float)
    cens = len(samples) - len(done)
    if len(done) < min_uncensored:
        raise InsufficientSamples(f"{len(done)} uncensored hitting times, need {min_uncensored}")
    if cens > 0.5 * len(samples):
        raise InsufficientSamples(f"{cens} of {len(samples)} samples are censored")
    horizon = min(s.horizon for s in samples) if samples else 0
    grid = np.asarray([g for g in grid if g <= horizon], dtype=np.int64)
    ccdf = np.array([(np.count_nonzero(done >= g) + cens) / len(samples) for g in grid])
    ps = np.array([partial_sum(schedule, int(g)) for g in grid])
    return CCDFTable(grid, ps, ccdf, cens / len(samples), len(samples))


def ccdf_slope(table: CCDFTable) -> float:
    """Least-squares slope of ``log P(tau >= n)`` against the step-size partial
    sum, over the decaying part of the curve (from the last ``n`` with
    probability one to the last with positive probability)."""
    p = table.ccdf
    pos = np.flatnonzero(p > 0)
    ones = np.flatnonzero(p >= 1.0)
    if pos.size == 0:
        return math.nan
    lo = int(ones[-1]) if ones.size else 0
    hi = int(pos[-1])
    if hi - lo < 1:
        return math.nan
    x = table.partial_sum[lo:hi + 1]
    y = np.log(p[lo:hi + 1])
    return float(np.polyfit(x, y, 1)[0])


@dataclass(frozen=True)
class RateFit:
    T_grid: np.ndarray
    subopt: np.ndarray
    slope: float
    intercept: float
    r2: float
    prefactor: float

    def consistent(self, band=(0.7, 1.3), min_r2=0.9) -> bool:
        return bool(band[0] <= self.slope <= band[1] and self.r2 >= min_r2)


def rate_abscissa(T):
    T = np.asarray(T, dtype=float)
    return np.log(T) / np.sqrt(T)


def rate_fit(T_grid, subopt, schedule: StepSchedule | None = None, objective=None) -> RateFit:
    """Regress ``log subopt`` on ``log(ln T / sqrt T)``; slope 1 matches the envelope."""
    if schedule is not None and schedule.family is not ScheduleFamily.RATE_LAW:
        raise BadRegime(f"rate fits need the rate-law schedule, got {schedule.family.value}")
    if objective is not None and (not objective.convex or objective.theta_star is None):
        raise BadRegime("rate fits need a convex objective with a known minimiser")
    T = np.asarray(T_grid, dtype=float)
    y = np.asarray(subopt, dtype=float)
    if len(T) < 2 or np.any(T <= 1):
        raise BadParam("rate fits need at least two horizons T > 1")
    if np.any(~(y > 0)):
        raise BadParam(f"suboptimality must be positive to take logs, got {y}")
    x = np.log(rate_abscissa(T))
    ly = np.log(y)
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    prefactor = float(np.exp(np.mean(ly - x)))
    return RateFit(T, y, float(slope), float(intercept), r2, prefactor)


def m_scaling_check(fits: dict) -> tuple[list, bool | None]:
    """Prefactor of the ``ln T / sqrt T`` envelope per worker count.

    Returns the table rows ``(m, prefactor, slope)`` and whether the
    prefactor is non-decreasing over ``m >= 4`` (None when fewer than two
    such ``m`` are present)."""
    rows = [(int(m), fits[m].prefactor, fits[m].slope) for m in sorted(fits)]
    big = [p for m, p, _ in rows if m >= 4]
    if len(big) < 2:
        return rows, None
    return rows, bool(all(b >= a for a, b in zip(big, big[1:])))


@dataclass(frozen=True)
class ZSequence:
    n: np.ndarray
    z: np.ndarray
    identity_error: float


def z_sequence(record, alpha: float) -> ZSequence:
    """``z_n = (uX_n - alpha uX_{n-1}) / (1 - alpha)`` with ``X_0 := X_1``.

    Needs ``uX`` snapshots on a contiguous grid. When gradient snapshots are
    present, ``identity_error`` is the largest deviation of
    ``z_{n+1} - z_n`` from ``-eps_n uG_n / (1 - alpha)``; otherwise NaN.
    """
    if record.uX is None:
        raise BadParam("z-sequence needs a record with retained snapshots")
    if np.any(np.diff(record.n) != 1) or record.n[0] != 1:
        raise GridMismatch("z-sequence needs every step recorded")
    uX = record.uX
    prev = np.vstack([uX[:1], uX[:-1]])
    if alpha == 0:
        z = uX.copy()
    else:
        z = (uX - alpha * prev) / (1.0 - alpha)
    err = math.nan
    if record.uG is not None and len(z) > 1:
        drift = z[1:] - z[:-1]
        pred = -record.eps[:-1, None] * record.uG[:-1] / (1.0 - alpha)
        err = float(np.max(np.abs(drift - pred)))
    return ZSequence(record.n.copy(), z, err)


@dataclass(frozen=True)
class BoundCheck:
    C: float
    rho: float
    fit_points: int
    test_points: int
    violations: int
    worst_excess: float

    def passed(self, max_fraction=0.05, max_excess=0.05) -> bool:
        if self.test_points == 0:
            return False
        return (self.violations <= max_fraction * self.test_points
                and self.worst_excess <= max_excess)


def consensus_envelope(eps: np.ndarray, rho: float) -> np.ndarray:
    """``b_j = sum_{t<=j} rho^(j-t) eps_t^2`` for ``j = 1..len(eps)``."""
    return lfilter([1.0], [1.0, -rho], np.asarray(eps) ** 2)


def consensus_bound_check(stats: EnsembleStats, schedule: StepSchedule, lambda0: float,
                          k: int, alpha: float, m: int) -> BoundCheck:
    """Fit ``C`` so that ``C * b_{n-1}`` covers the per-worker consensus error
    ``E|e_i^T X_n|^2 = consensus / m`` on the first third of the grid, then
    count where the remaining grid points exceed it.

    ``rho = max(lambda0^(1/k), (1 + alpha^2) / 2)``.
    """
    rho = max(lambda0 ** (1.0 / k), (1.0 + alpha * alpha) / 2.0)
    H = int(stats.grid[-1])
    b = consensus_envelope(steps(schedule, H), rho)
    keep = stats.grid >= 2
    n = stats.grid[keep]
    y = stats.mean_consensus[keep] / m
    bound = b[n - 2]
    cut = max(1, int(np.searchsorted(n, H // 3, side="right")))
    fit_y, fit_b = y[:cut], bound[:cut]
    C = float(np.max(fit_y / fit_b))
    test_y, test_b = y[cut:], C * bound[cut:]
    excess = (test_y - test_b) / test_b
    viol = excess > 0
    worst = float(np.max(excess)) if excess.size else 0.0
    return BoundCheck(C, rho, cut, len(test_y), int(np.count_nonzero(viol)), max(worst, 0.0))


@dataclass(frozen=True)
class OrderCheck:
    alphas: tuple
    medians: tuple
    pvalues: tuple
    slopes: tuple
    censored: tuple

    @property
    def medians_ordered(self) -> bool:
        return all(b < a for a, b in zip(self.medians, self.medians[1:]))

    def significant(self, level=0.01) -> bool:
        return all(p < level for p in self.pvalues)

    @property
    def slopes_ordered(self) -> bool:
        return all(b < a for a, b in zip(self.slopes, self.slopes[1:]))

    def passed(self, level=0.01) -> bool:
        return self.medians_ordered and self.significant(level) and self.slopes_ordered


def _taus(samples):
    # A censored sample is ranked just past the horizon.
    return np.array([s.horizon + 1 if s.censored else s.tau for s in samples], dtype=float)


def hitting_order_check(by_alpha: dict, grid, schedule: StepSchedule) -> OrderCheck:
    """More momentum should hit sooner: medians strictly decrease in alpha,
    each neighbouring gap is one-sided Mann-Whitney significant, and the
    log-CCDF slope against the step-size partial sum gets steeper."""
    alphas = tuple(sorted(by_alpha))
    taus = [_taus(by_alpha[a]) for a in alphas]
    medians = tuple(float(np.median(t)) for t in taus)
    pvals = tuple(float(mannwhitneyu(hi, lo, alternative="less").pvalue)
                  for lo, hi in zip(taus, taus[1:]))
    slopes = tuple(ccdf_slope(tail_ccdf(by_alpha[a], grid, schedule)) for a in alphas)
    cens = tuple(float(np.mean([s.censored for s in by_alpha[a]])) for a in alphas)
    return OrderCheck(alphas, medians, pvals, slopes, cens)


def decay_ratio(stats: EnsembleStats, stat: str, n_from: int, n_to: int | None = None) -> float:
    n_to = int(stats.grid[-1]) if n_to is None else n_to
    return stats.at(stat, n_to) / stats.at(stat, n_from)
