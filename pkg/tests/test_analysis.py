import math

import numpy as np
import pytest

from dmsgd.analysis import (ccdf_slope, consensus_bound_check, consensus_envelope, decay_ratio,
                            ensemble, hitting_order_check, hitting_times, m_scaling_check,
                            rate_fit, running_average, tail_ccdf, tams_chain, z_sequence)
from dmsgd.engine import TrajectoryRecord, run
from dmsgd.errors import BadParam, BadRegime, GridMismatch, InsufficientSamples
from dmsgd.schedules import StepSchedule

ConstantSchedule = StepSchedule.constant
PowerLaw = StepSchedule.power_law
RateLaw = StepSchedule.rate_law

from helpers import run_cfg


def make_record(grad, seed=0, n=None, alpha=0.0, eps=0.1, consensus=None, horizon=0):
    grad = np.asarray(grad, dtype=float)
    L = len(grad)
    n = np.arange(1, L + 1) if n is None else np.asarray(n)
    zeros = np.zeros(L)
    return TrajectoryRecord(
        seed=seed, alpha=alpha, n=n, eps=np.full(L, eps), grad_norm_sq=grad,
        loss_avg_iterate=zeros.copy(),
        consensus_err=zeros.copy() if consensus is None else np.asarray(consensus, float),
        u_v_norm=zeros.copy(), z_subopt=zeros.copy(), wallclock_us=zeros.copy(),
        horizon=horizon or int(n[-1]))


def test_ensemble_mean_and_stderr():
    st = ensemble([make_record([1.0] * 4, 0), make_record([3.0] * 4, 1)])
    assert np.all(st.mean_grad_norm_sq == 2.0)
    assert np.allclose(st.stderr["grad_norm_sq"], 1.0)


def test_constant_mean_has_constant_time_average():
    st = ensemble([make_record([2.0] * 10, s) for s in range(3)])
    assert np.allclose(st.tams, 2.0) and st.tams_exact


def test_time_average_exact_on_contiguous_grid():
    f = np.array([4.0, 2.0, 1.0, 1.0])
    avg, err, exact = running_average(np.arange(1, 5), f)
    assert exact and np.allclose(avg, np.cumsum(f) / np.arange(1, 5)) and not err.any()


def test_time_average_on_sparse_grid_is_bracketed():
    n = np.arange(1, 1001)
    f = 1.0 / n
    grid = np.array([1, 10, 100, 1000])
    avg, err, exact = running_average(grid, f[grid - 1])
    truth = np.cumsum(f)[grid - 1] / grid
    assert not exact
    assert np.all(np.abs(avg - truth) <= err + 1e-12)


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        ensemble([make_record([1.0] * 4), make_record([1.0] * 5, 1)])
    st = ensemble([make_record([1, 2], n=[1, 10]), make_record([1, 2], 1, n=[1, 10])])
    assert st.at("grad_norm_sq", 10) == 2.0
    with pytest.raises(GridMismatch):
        st.at("grad_norm_sq", 5)


def test_ensemble_needs_two_records():
    with pytest.raises(InsufficientSamples):
        ensemble([make_record([1.0])])


def test_tams_chain_on_simulated_ensemble():
    recs = [run(run_cfg(horizon=400, seed=s, alpha=0.5)) for s in range(4)]
    holds, worst = tams_chain(ensemble(recs))
    assert holds, worst


def test_hitting_time_examples():
    rec = make_record([5.0, 2.0, 0.5, 0.05])
    s = hitting_times([rec], 0.1)[0]
    assert s.tau == 4 and not s.censored
    s = hitting_times([make_record([5.0, 2.0, 0.5, 0.5])], 0.1)[0]
    assert s.tau is None and s.censored
    s = hitting_times([make_record([0.0, 2.0])], 0.1)[0]
    assert s.tau == 1


def test_hitting_time_partial_sum():
    sched = ConstantSchedule(0.1)
    s = hitting_times([make_record([5.0, 2.0, 0.5, 0.05])], 0.1, sched)[0]
    assert s.partial_sum_at_tau == pytest.approx(0.4)


def test_hitting_time_monotone_in_threshold():
    recs = [run(run_cfg(horizon=300, seed=s, alpha=0.5)) for s in range(5)]
    g0 = float(np.mean([r.grad_norm_sq[0] for r in recs]))
    big = 10 ** 9
    prev = None
    for frac in (0.9, 0.5, 0.2, 0.1):
        taus = [s.tau if s.tau is not None else big for s in hitting_times(recs, frac * g0)]
        if prev is not None:
            assert all(a >= b for a, b in zip(taus, prev))
        prev = taus


def test_per_worker_hitting_needs_worker_grads():
    rec = run(run_cfg(horizon=50, record_worker_grads=True))
    out = hitting_times([rec], 1e9, per_worker=True)
    assert [s.worker for s in out] == [0, 1, 2, 3] and all(s.tau == 1 for s in out)
    with pytest.raises(BadParam):
        hitting_times([make_record([1.0, 1.0])], 0.1, per_worker=True)


def test_degenerate_ccdf():
    samples = hitting_times([make_record([1, 1, 1, 1, 0.0], s) for s in range(60)], 0.5)
    t = tail_ccdf(samples, range(1, 6), ConstantSchedule(0.1))
    assert t.ccdf.tolist() == [1.0, 1.0, 1.0, 1.0, 1.0]


def test_ccdf_needs_uncensored_samples():
    samples = hitting_times([make_record([1, 1, 0.0], s) for s in range(10)], 0.5)
    with pytest.raises(InsufficientSamples):
        tail_ccdf(samples, range(1, 4), ConstantSchedule(0.1))
    samples = hitting_times([make_record([1, 1, 1.0], s) for s in range(60)]
                            + [make_record([1, 0, 0.0], s) for s in range(55)], 0.5)
    with pytest.raises(InsufficientSamples):
        tail_ccdf(samples, range(1, 4), ConstantSchedule(0.1))


def test_ccdf_slope_of_geometric_tail():
    rng = np.random.default_rng(0)
    taus = rng.geometric(0.2, size=4000)
    H = 200
    recs = [make_record(np.where(np.arange(1, H + 1) >= t, 0.0, 1.0), i) for i, t in enumerate(taus)]
    sched = ConstantSchedule(0.1)
    t = tail_ccdf(hitting_times(recs, 0.5), range(1, 20), sched)
    # P(tau >= n) = 0.8^(n-1) and the partial sum grows by 0.1 per step
    assert ccdf_slope(t) == pytest.approx(10 * math.log(0.8), rel=0.05)


def test_rate_fit_recovers_envelope():
    T = np.logspace(2, 5, 10)
    fit = rate_fit(T, 3.0 * np.log(T) / np.sqrt(T), RateLaw(1))
    assert fit.slope == pytest.approx(1.0, abs=1e-6)
    assert fit.prefactor == pytest.approx(3.0) and fit.consistent()


def test_rate_fit_flags_faster_decay():
    T = np.logspace(2, 5, 10)
    fit = rate_fit(T, 1.0 / T)
    assert 2.0 < fit.slope < 3.0
    assert not fit.consistent()


def test_rate_fit_regime_errors():
    T = np.logspace(2, 4, 5)
    with pytest.raises(BadRegime):
        rate_fit(T, 1 / T, PowerLaw(0.1, 0.6))
    with pytest.raises(BadParam):
        rate_fit(T, np.zeros(5))


def test_m_scaling():
    T = np.logspace(2, 5, 6)
    env = np.log(T) / np.sqrt(T)
    fits = {m: rate_fit(T, c * env) for m, c in ((1, 5.0), (4, 1.0), (8, 1.5), (16, 2.0))}
    rows, ok = m_scaling_check(fits)
    assert ok is True and [r[0] for r in rows] == [1, 4, 8, 16]
    fits[16] = rate_fit(T, 0.5 * env)
    assert m_scaling_check(fits)[1] is False
    assert m_scaling_check({1: fits[1], 4: fits[4]})[1] is None


def test_z_sequence_scalar_example():
    rec = make_record([0.0, 0.0, 0.0])
    rec.uX = np.array([[1.0], [0.5], [-0.2]])
    z = z_sequence(rec, 0.9)
    assert z.z[0, 0] == pytest.approx(1.0)
    assert z.z[1, 0] == pytest.approx((0.5 - 0.9) / 0.1)
    assert z.z[2, 0] == pytest.approx((-0.2 - 0.45) / 0.1)


def test_z_sequence_equals_average_at_zero_momentum():
    rec = run(run_cfg(horizon=30, retain_snapshots=True))
    assert np.array_equal(z_sequence(rec, 0.0).z, rec.uX)


def test_z_sequence_identity_noise_free():
    for kind, kw in (("gossip", {}), ("easgd", {"beta": 0.1}), ("uniform", {"k": 3})):
        cfg = run_cfg(kind=kind, noise="none", scale=0.0, alpha=0.9, horizon=1000,
                      retain_snapshots=True, **kw)
        z = z_sequence(run(cfg), 0.9)
        assert z.identity_error <= 1e-10


def test_z_sequence_needs_snapshots():
    with pytest.raises(BadParam):
        z_sequence(make_record([1.0, 1.0]), 0.5)


def test_envelope_recursion():
    eps = np.array([1.0, 0.5, 0.25])
    b = consensus_envelope(eps, 0.5)
    assert b.tolist() == [1.0, 0.75, 0.4375]


def test_consensus_bound_on_geometric_decay():
    H = 3000
    sched = PowerLaw(0.1, 0.6)
    eps = np.array([sched(n) for n in range(1, H + 1)])
    rho = 0.5
    b = consensus_envelope(eps, rho)
    n = np.arange(1, H + 1)
    cons = np.concatenate([[1.0], 2.0 * 4 * b[:-1]])  # exactly C=2 at m=4
    recs = [make_record(np.ones(H), s, eps=0.0, consensus=cons) for s in range(2)]
    for r in recs:
        r.eps = eps
    chk = consensus_bound_check(ensemble(recs), sched, lambda0=0.25, k=1, alpha=0.0, m=4)
    assert chk.C == pytest.approx(2.0) and chk.rho == pytest.approx(0.5)
    assert chk.violations == 0 and chk.passed()


def test_hitting_order_check():
    sched = ConstantSchedule(0.01)
    rng = np.random.default_rng(1)
    H = 400
    by_alpha = {}
    for alpha, p in ((0.0, 0.01), (0.5, 0.02), (0.9, 0.08)):
        taus = rng.geometric(p, size=200)
        by_alpha[alpha] = hitting_times(
            [make_record(np.where(np.arange(1, H + 1) >= t, 0.0, 1.0), i, alpha=alpha)
             for i, t in enumerate(taus)], 0.5, sched)
    chk = hitting_order_check(by_alpha, range(1, H + 1), sched)
    assert chk.medians_ordered and chk.significant() and chk.slopes_ordered and chk.passed()


def test_decay_ratio():
    st = ensemble([make_record([1.0, 0.5, 0.01], s) for s in range(2)])
    assert decay_ratio(st, "grad_norm_sq", 1) == pytest.approx(0.01)
