"""Run and campaign configuration.

A configuration file is TOML with four sections::

    [topology]   kind, m, k, beta, neighbor_weight
    [objective]  family, N, m, heterogeneity, box_radius, dataset_seed,
                 family parameters, and a [objective.noise] table (kind, scale)
    [schedule]   family, c, p, regime
    [campaign]   run settings, sweeps and checks (see ``CAMPAIGN_KEYS``)

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
from dataclasses import dataclass, replace
from pathlib import Path

import tomli

from .errors import BadConfig
from .objectives import Family, NoiseModel, build_objective
from .schedules import Regime, ScheduleFamily, StepSchedule
from .streams import NoiseKind
from .topology import CommSchedule, MixingKind, build_mixing


class InitPolicy(str, enum.Enum):
    ZERO_CONSENSUS = "zero_consensus"
    RANDOM_BOX = "random_box"
    PER_WORKER_RANDOM = "per_worker_random"


class GridKind(str, enum.Enum):
    LINEAR = "linear"
    GEOMETRIC = "geometric"


FAMILY_PARAMS = {
    Family.QUADRATIC: {"eig_min", "eig_max", "target_scale"},
    Family.LOGISTIC: {"samples", "reg"},
    Family.SOFT_NONCONVEX: {"ridges", "ridge_norm", "ridge_weight"},
}


@dataclass(frozen=True)
class TopologyConfig:
    kind: MixingKind
    m: int
    k: int = 1
    beta: float | None = None
    neighbor_weight: float | None = None

    def build(self) -> CommSchedule:
        W = build_mixing(self.kind, self.m, beta=self.beta,
                         neighbor_weight=self.neighbor_weight)
        return CommSchedule(self.k, W)


@dataclass(frozen=True)
class ObjectiveConfig:
    family: Family
    N: int
    m: int | None = None
    heterogeneity: float = 0.0
    box_radius: float = 1.0
    dataset_seed: int = 0
    noise_kind: NoiseKind = NoiseKind.NONE
    noise_scale: float = 0.0
    params: tuple = ()

    def build(self, m):
        if self.m is not None and self.m != m:
            raise BadConfig(f"objective m={self.m} does not match topology m={m}")
        return build_objective(self.family, self.N, m, self.heterogeneity,
                               self.box_radius, self.dataset_seed, **dict(self.params))

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(self.noise_kind, self.noise_scale)


@dataclass(frozen=True)
class ScheduleConfig:
    family: ScheduleFamily
    c: float = 0.1
    p: float = 0.6
    regime: Regime = Regime.CONVERGENCE

    def build(self, m) -> StepSchedule:
        if self.family is ScheduleFamily.POWER_LAW:
            return StepSchedule.power_law(self.c, self.p)
        if self.family is ScheduleFamily.RATE_LAW:
            return StepSchedule.rate_law(m)
        return StepSchedule.constant(self.c)

    def label(self) -> str:
        if self.family is ScheduleFamily.POWER_LAW:
            return f"power_law(c={self.c:g},p={self.p:g})"
        if self.family is ScheduleFamily.RATE_LAW:
            return "rate_law"
        return f"constant(c={self.c:g})"


@dataclass(frozen=True)
class RunConfig:
    topology: TopologyConfig
    objective: ObjectiveConfig
    schedule: ScheduleConfig
    alpha: float = 0.0
    horizon: int = 1000
    seed: int = 0
    record_every: int = 1
    grid: GridKind = GridKind.LINEAR
    grid_points: int = 50
    init: InitPolicy = InitPolicy.ZERO_CONSENSUS
    guard: float = 1e6
    retain_snapshots: bool = False
    record_worker_grads: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise BadConfig(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.horizon < 1:
            raise BadConfig(f"horizon must be >= 1, got {self.horizon}")
        if not 1 <= self.record_every <= self.horizon:
            raise BadConfig(f"record_every must lie in [1, horizon], got {self.record_every}")
        if self.grid_points < 2:
            raise BadConfig("grid_points must be >= 2")
        if not self.guard > 0:
            raise BadConfig("guard must be positive")

    @property
    def m(self) -> int:
        return self.topology.m

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class CampaignConfig:
    base: RunConfig
    seeds: int = 10
    master_seed: int = 0
    sweep_alpha: tuple = ()
    sweep_m: tuple = ()
    sweep_schedule: tuple = ()
    a0: tuple = ()
    a0_fraction: tuple = ()
    parallelism: int = 0
    batch_size: int = 50
    output_dir: str = "out"
    write_records: bool = True
    checks: tuple = ()
    lims_window: tuple = (100, None)

    def __post_init__(self):
        if self.seeds < 1:
            raise BadConfig("campaign needs at least one seed")
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if self.parallelism < 0:
            raise BadConfig("parallelism must be >= 0 (0 means all cores)")
        unknown = set(self.checks) - set(CHECKS)
        if unknown:
            raise BadConfig(f"unknown checks: {sorted(unknown)}")

    def cells(self) -> list[RunConfig]:
        """Run configurations of the sweep grid, in a fixed order."""
        alphas = self.sweep_alpha or (self.base.alpha,)
        ms = self.sweep_m or (self.base.topology.m,)
        scheds = self.sweep_schedule or (self.base.schedule,)
        out = []
        for m, sched, alpha in itertools.product(ms, scheds, alphas):
            topo = replace(self.base.topology, m=int(m))
            obj = self.base.objective
            if obj.m is not None:
                obj = replace(obj, m=int(m))
            out.append(self.base.with_(topology=topo, objective=obj, schedule=sched,
                                       alpha=float(alpha)))
        return out


CHECKS = (
    "lims_decay",
    "consensus_decay",
    "consensus_bound",
    "tams_chain",
    "rate_envelope",
    "m_scaling",
    "hitting_order",
)

TOPOLOGY_KEYS = {"kind", "m", "k", "beta", "neighbor_weight"}
OBJECTIVE_KEYS = {"family", "N", "m", "heterogeneity", "box_radius", "dataset_seed", "noise"}
NOISE_KEYS = {"kind", "scale"}
SCHEDULE_KEYS = {"family", "c", "p", "regime"}
RUN_KEYS = {"alpha", "horizon", "seed", "record_every", "grid", "grid_points", "init",
            "guard", "retain_snapshots", "record_worker_grads"}
CAMPAIGN_KEYS = RUN_KEYS | {"seeds", "master_seed", "parallelism", "batch_size",
                            "output_dir", "checks", "a0", "a0_fraction", "lims_window",
                            "sweep", "write_records"}
SWEEP_KEYS = {"alpha", "m", "schedule", "a0"}


def _check_keys(section, table, allowed):
    if not isinstance(table, dict):
        raise BadConfig(f"[{section}] must be a table")
    unknown = set(table) - set(allowed)
    if unknown:
        raise BadConfig(f"unknown keys in [{section}]: {sorted(unknown)}")


def _enum(enum_cls, value, section):
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise BadConfig(f"[{section}] {value!r} is not one of: {choices}") from None


def _require(table, key, section):
    if key not in table:
        raise BadConfig(f"[{section}] missing required key {key!r}")
    return table[key]


def parse_topology(t) -> TopologyConfig:
    _check_keys("topology", t, TOPOLOGY_KEYS)
    return TopologyConfig(
        kind=_enum(MixingKind, _require(t, "kind", "topology"), "topology"),
        m=int(_require(t, "m", "topology")),
        k=int(t.get("k", 1)),
        beta=None if "beta" not in t else float(t["beta"]),
        neighbor_weight=None if "neighbor_weight" not in t else float(t["neighbor_weight"]),
    )


def parse_objective(t) -> ObjectiveConfig:
    family = _enum(Family, _require(t, "family", "objective"), "objective")
    _check_keys("objective", t, OBJECTIVE_KEYS | FAMILY_PARAMS[family])
    noise = t.get("noise", {})
    _check_keys("objective.noise", noise, NOISE_KEYS)
    params = tuple(sorted((k, t[k]) for k in FAMILY_PARAMS[family] if k in t))
    return ObjectiveConfig(
        family=family,
        N=int(_require(t, "N", "objective")),
        m=None if "m" not in t else int(t["m"]),
        heterogeneity=float(t.get("heterogeneity", 0.0)),
        box_radius=float(t.get("box_radius", 1.0)),
        dataset_seed=int(t.get("dataset_seed", 0)),
        noise_kind=_enum(NoiseKind, noise.get("kind", "none"), "objective.noise"),
        noise_scale=float(noise.get("scale", 0.0)),
        params=params,
    )


def parse_schedule(t, section="schedule") -> ScheduleConfig:
    _check_keys(section, t, SCHEDULE_KEYS)
    family = _enum(ScheduleFamily, _require(t, "family", section), section)
    kw = {}
    if "c" in t:
        kw["c"] = float(t["c"])
    if "p" in t:
        kw["p"] = float(t["p"])
    regime = t.get("regime")
    if regime is None:
        regime = {ScheduleFamily.RATE_LAW: "rate", ScheduleFamily.CONSTANT: "hitting"}.get(
            family, "convergence")
    return ScheduleConfig(family=family, regime=_enum(Regime, regime, section), **kw)


def _run_kwargs(c):
    kw = {}
    for key in ("alpha", "guard"):
        if key in c:
            kw[key] = float(c[key])
    for key in ("horizon", "seed", "record_every", "grid_points"):
        if key in c:
            kw[key] = int(c[key])
    for key in ("retain_snapshots", "record_worker_grads"):
        if key in c:
            kw[key] = bool(c[key])
    if "grid" in c:
        kw["grid"] = _enum(GridKind, c["grid"], "campaign")
    if "init" in c:
        kw["init"] = _enum(InitPolicy, c["init"], "campaign")
    return kw


def parse_config(doc: dict) -> CampaignConfig:
    _check_keys("<root>", doc, {"topology", "objective", "schedule", "campaign"})
    for section in ("topology", "objective", "schedule"):
        if section not in doc:
            raise BadConfig(f"missing section [{section}]")
    c = doc.get("campaign", {})
    _check_keys("campaign", c, CAMPAIGN_KEYS)
    base = RunConfig(
        topology=parse_topology(doc["topology"]),
        objective=parse_objective(doc["objective"]),
        schedule=parse_schedule(doc["schedule"]),
        **_run_kwargs(c),
    )
    sweep = c.get("sweep", {})
    _check_keys("campaign.sweep", sweep, SWEEP_KEYS)
    a0 = list(c.get("a0", [])) + list(sweep.get("a0", []))
    window = c.get("lims_window", [100, None])
    if not isinstance(window, list) or len(window) not in (1, 2):
        raise BadConfig("lims_window must be [from] or [from, to]")
    return CampaignConfig(
        base=base,
        seeds=int(c.get("seeds", 10)),
        master_seed=int(c.get("master_seed", 0)),
        sweep_alpha=tuple(float(a) for a in sweep.get("alpha", [])),
        sweep_m=tuple(int(m) for m in sweep.get("m", [])),
        sweep_schedule=tuple(parse_schedule(s, "campaign.sweep.schedule")
                             for s in sweep.get("schedule", [])),
        a0=tuple(float(x) for x in a0),
        a0_fraction=tuple(float(x) for x in c.get("a0_fraction", [])),
        parallelism=int(c.get("parallelism", 0)),
        batch_size=int(c.get("batch_size", 50)),
        output_dir=str(c.get("output_dir", "out")),
        write_records=bool(c.get("write_records", True)),
        checks=tuple(c.get("checks", [])),
        lims_window=(int(window[0]), None if len(window) < 2 or window[1] is None
                     else int(window[1])),
    )


def load_config(path) -> CampaignConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise BadConfig(f"{path}: {exc}") from None
    return parse_config(doc)


def to_dict(obj):
    """Plain-data view of a config dataclass (enums as their string values)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj

