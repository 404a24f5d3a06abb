"""Small builders shared by the test modules."""

from dmsgd.config import (GridKind, InitPolicy, ObjectiveConfig, RunConfig, ScheduleConfig,
                          TopologyConfig)
from dmsgd.objectives import Family
from dmsgd.schedules import ScheduleFamily
from dmsgd.streams import NoiseKind
from dmsgd.topology import MixingKind


def run_cfg(kind="gossip", m=4, k=1, beta=None, nw=0.25, family="soft_nonconvex", N=3, h=0.5,
            noise="gaussian", scale=0.1, sched=("power_law", 0.1, 0.6), alpha=0.0,
            horizon=50, seed=0, init="per_worker_random", grid="linear", record_every=1,
            params=(), **kw):
    topo = TopologyConfig(MixingKind(kind), m, k=k, beta=beta,
                          neighbor_weight=nw if kind == "gossip" else None)
    obj = ObjectiveConfig(Family(family), N, heterogeneity=h, dataset_seed=3,
                          noise_kind=NoiseKind(noise), noise_scale=scale, params=tuple(params))
    fam, c, p = sched
    return RunConfig(topo, obj, ScheduleConfig(ScheduleFamily(fam), c, p), alpha=alpha,
                     horizon=horizon, seed=seed, init=InitPolicy(init), grid=GridKind(grid),
                     record_every=record_every, **kw)


def scalar_cfg(alpha, c, horizon=3):
    """One worker, g(x) = x^2 / 2, no noise, constant step."""
    return run_cfg(kind="identity", m=1, family="quadratic_consensus", N=1, h=0.0,
                   noise="none", scale=0.0, sched=("constant", c, 1.0), alpha=alpha,
                   horizon=horizon, init="zero_consensus", params=(("target_scale", 0.0),))
