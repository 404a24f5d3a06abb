"""Campaign orchestration: sweep cells x seed batches, analysis, output files.

Output layout under the campaign directory::

    records/cellCCC_seedSSSS.jsonl   one record stream per run (optional)
    ensemble.csv  hitting.csv  ratefit.csv  report.txt
    charts/*.svg
    manifest.json                    only when some cell failed

Seeds and batches depend only on the configuration, never on the level of
parallelism, so CSV outputs are byte-identical across reruns.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .config import CampaignConfig, RunConfig
from .engine import _objective, run_batch
from .errors import DmsgdError, SchemaError
from .schedules import Regime, ScheduleFamily
from .streams import derive_seeds

log = logging.getLogger(__name__)

SCHEMAS = {
    "ensemble": "dmsgd.ensemble/1",
    "hitting": "dmsgd.hitting/1",
    "ratefit": "dmsgd.ratefit/1",
    "report": "dmsgd.report/1",
}
SUMMARY_FILES = ("ensemble.csv", "hitting.csv", "ratefit.csv", "report.txt")

LIMS_RATIO = 1e-2
CONSENSUS_RATIO = 1e-3
RATE_BAND = (0.7, 1.3)
RATE_MIN_R2 = 0.9
RANK_LEVEL = 0.01

ENSEMBLE_HEADER = ["cell", "m", "alpha", "schedule", "n", "eps", "seeds"] + [
    f"{kind}_{stat}" for stat in analysis.STATS for kind in ("mean", "se")
] + ["tams", "tams_err"]
HITTING_HEADER = ["cell", "m", "alpha", "schedule", "a0", "seed", "worker", "tau",
                  "censored", "partial_sum_at_tau"]
RATEFIT_HEADER = ["cell", "m", "alpha", "schedule", "quantity", "T_grid", "subopt",
                  "slope", "r2", "prefactor", "consistent"]


@dataclass
class CellResult:
    index: int
    cfg: RunConfig
    seeds: list
    records: list = field(default_factory=list)
    error: str | None = None
    wallclock_s: float = 0.0
    stats: analysis.EnsembleStats | None = None
    rate_fits: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"cell {self.index} (m={self.cfg.m}, alpha={self.cfg.alpha:g}, {self.cfg.schedule.label()})"


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    scope: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} [{self.scope}] {self.detail}"


@dataclass
class CampaignResult:
    out_dir: Path
    cells: list
    checks: list
    hitting: list
    ratefits: list

    @property
    def failed_cells(self):
        return [c for c in self.cells if c.error is not None]

    @property
    def ok(self) -> bool:
        return not self.failed_cells and all(c.passed for c in self.checks)

    def check(self, name: str) -> list:
        return [c for c in self.checks if c.name == name]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_table(path: Path, schema: str, header, rows):
    buf = io.StringIO()
    buf.write(f"# schema={schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(Path(path), buf.getvalue())


def read_table(path, schema: str) -> list[dict]:
    """Rows of a summary CSV as dicts of strings; rejects other schema versions."""
    text = Path(path).read_text()
    head, _, body = text.partition("\n")
    if head.strip() != f"# schema={schema}":
        raise SchemaError(f"{path}: expected schema {schema}, found {head[:60]!r}")
    return list(csv.DictReader(io.StringIO(body)))


def _task(cfg: RunConfig, seeds):
    t0 = time.perf_counter()
    try:
        return run_batch(cfg, seeds), None, time.perf_counter() - t0
    except Exception as exc:  # isolated per cell, reported in the manifest
        return None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


def _workers(parallelism: int) -> int:
    return parallelism if parallelism > 0 else (os.cpu_count() or 1)


def execute(camp: CampaignConfig, parallelism: int | None = None) -> list[CellResult]:
    """Run every cell; a failing batch marks its cell failed and leaves the others alone."""
    cells = []
    tasks = []
    for i, cfg in enumerate(camp.cells()):
        seeds = derive_seeds(camp.master_seed, i, camp.seeds)
        cells.append(CellResult(i, cfg, seeds))
        for b in range(0, len(seeds), camp.batch_size):
            tasks.append((i, cfg, seeds[b:b + camp.batch_size]))

    workers = _workers(camp.parallelism if parallelism is None else parallelism)
    if workers == 1:
        results = [_task(cfg, seeds) for _, cfg, seeds in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_task, cfg, seeds) for _, cfg, seeds in tasks]
            results = [f.result() for f in futures]

    for (i, _, _), (recs, err, dt) in zip(tasks, results):
        cell = cells[i]
        cell.wallclock_s += dt
        if err is not None and cell.error is None:
            cell.error = err
        if cell.error is None:
            cell.records.extend(recs)
    for cell in cells:
        if cell.error is not None:
            cell.records = []
            log.warning("%s failed: %s", cell.label, cell.error)
    return cells


def _group(cells, key):
    out = defaultdict(list)
    for c in cells:
        out[key(c)].append(c)
    return out


def _rate_T(grid, horizon):
    return [int(t) for t in grid if t >= 100 and t <= horizon and math.log10(t).is_integer()]


def analyse(camp: CampaignConfig, cells: list[CellResult]):
    checks: list[CheckOutcome] = []
    hitting_rows = []
    rate_rows = []
    ok = [c for c in cells if c.error is None and len(c.records) >= 2]
    for c in ok:
        c.stats = analysis.ensemble(c.records)

    want = set(camp.checks)
    n_from, n_to = camp.lims_window
    for c in ok:
        st = c.stats
        scope = f"cell={c.index} m={c.cfg.m} alpha={c.cfg.alpha:g} {c.cfg.schedule.label()}"
        if "lims_decay" in want:
            r = analysis.decay_ratio(st, "grad_norm_sq", n_from, n_to)
            checks.append(CheckOutcome("lims_decay", scope, r <= LIMS_RATIO,
                                       f"ratio={r:.4g} threshold={LIMS_RATIO:g}"))
        if "consensus_decay" in want:
            r = analysis.decay_ratio(st, "consensus_err", n_from, n_to)
            checks.append(CheckOutcome("consensus_decay", scope, r <= CONSENSUS_RATIO,
                                       f"ratio={r:.4g} threshold={CONSENSUS_RATIO:g}"))
        if "consensus_bound" in want:
            W = c.cfg.topology.build().matrix
            bc = analysis.consensus_bound_check(st, c.cfg.schedule.build(c.cfg.m), W.lambda0,
                                                c.cfg.topology.k, c.cfg.alpha, c.cfg.m)
            checks.append(CheckOutcome(
                "consensus_bound", scope, bc.passed(),
                f"C={bc.C:.4g} rho={bc.rho:.4g} fit_points={bc.fit_points} "
                f"violations={bc.violations}/{bc.test_points} worst_excess={bc.worst_excess:.4g}"))
        if "tams_chain" in want:
            holds, worst = analysis.tams_chain(st)
            checks.append(CheckOutcome("tams_chain", scope, holds,
                                       f"worst_relative_excess={worst:.3g} exact={st.tams_exact}"))
        sched = c.cfg.schedule
        if sched.regime is Regime.RATE and sched.family is ScheduleFamily.RATE_LAW:
            obj = _objective(c.cfg.objective, c.cfg.m)
            T = _rate_T(st.grid, c.cfg.horizon)
            fits = {}
            for quantity, stat, offset in (("loss_avg_iterate", "loss_avg_iterate", obj.g_star),
                                           ("z", "z_subopt", 0.0)):
                if offset is None or len(T) < 2:
                    continue
                y = np.array([st.at(stat, t) for t in T]) - offset
                try:
                    fit = analysis.rate_fit(T, y, sched.build(c.cfg.m), obj)
                except DmsgdError as exc:
                    checks.append(CheckOutcome("rate_envelope", scope, False, f"{quantity}: {exc}"))
                    continue
                fits[quantity] = fit
                rate_rows.append([c.index, c.cfg.m, c.cfg.alpha, sched.label(), quantity,
                                  ";".join(str(t) for t in T), ";".join(repr(float(v)) for v in y),
                                  fit.slope, fit.r2, fit.prefactor,
                                  fit.consistent(RATE_BAND, RATE_MIN_R2)])
            c.rate_fits = fits
            if "rate_envelope" in want and "loss_avg_iterate" in fits:
                fit = fits["loss_avg_iterate"]
                z = fits.get("z")
                zs = "" if z is None else f" z_slope={z.slope:.4f} z_r2={z.r2:.4f}"
                checks.append(CheckOutcome(
                    "rate_envelope", scope, fit.consistent(RATE_BAND, RATE_MIN_R2),
                    f"slope={fit.slope:.4f} r2={fit.r2:.4f} band={list(RATE_BAND)}{zs}"))

    if "m_scaling" in want:
        groups = _group([c for c in ok if c.rate_fits],
                        lambda c: (c.cfg.alpha, c.cfg.schedule.label()))
        for (alpha, label), members in sorted(groups.items()):
            fits = {c.cfg.m: c.rate_fits["loss_avg_iterate"] for c in members
                    if "loss_avg_iterate" in c.rate_fits}
            rows, verdict = analysis.m_scaling_check(fits)
            table = " ".join(f"m={m}:{p:.4g}" for m, p, _ in rows)
            checks.append(CheckOutcome("m_scaling", f"alpha={alpha:g} {label}",
                                       verdict is not False,
                                       f"prefactors {table}" + (" (no assertion)" if verdict is None else "")))

    # hitting times: a0 from explicit values and fractions of the initial level
    by_group = _group(ok, lambda c: (c.cfg.m, c.cfg.schedule.label()))
    for (m, label), members in sorted(by_group.items()):
        init = math.fsum(r.grad_norm_sq[0] for c in members for r in c.records)
        init /= sum(len(c.records) for c in members)
        thresholds = list(camp.a0) + [f * init for f in camp.a0_fraction]
        for a0 in thresholds:
            per_alpha = {}
            for c in members:
                samples = analysis.hitting_times(c.records, a0, c.cfg.schedule.build(m))
                per_alpha[c.cfg.alpha] = samples
                for s in samples:
                    hitting_rows.append([c.index, m, c.cfg.alpha, label, a0, s.seed, s.worker,
                                         s.tau, s.censored, s.partial_sum_at_tau])
            if "hitting_order" in want and len(per_alpha) >= 2:
                first = members[0]
                scope = f"m={m} {label} a0={a0:.4g}"
                try:
                    oc = analysis.hitting_order_check(per_alpha, first.stats.grid,
                                                      first.cfg.schedule.build(m))
                except DmsgdError as exc:
                    checks.append(CheckOutcome("hitting_order", scope, False, str(exc)))
                    continue
                med = " > ".join(f"{md:g}" for md in oc.medians)
                checks.append(CheckOutcome(
                    "hitting_order", scope, oc.passed(RANK_LEVEL),
                    f"alphas={list(oc.alphas)} medians {med} "
                    f"p={[float(f'{p:.3g}') for p in oc.pvalues]} "
                    f"ccdf_slopes={[round(s, 4) for s in oc.slopes]} censored={list(oc.censored)}"))

    for c in cells:
        if c.error is not None:
            checks.append(CheckOutcome("cell", c.label, False, c.error))
    return checks, hitting_rows, rate_rows


def _ensemble_rows(cells):
    rows = []
    for c in cells:
        st = c.stats
        if st is None:
            continue
        for j, n in enumerate(st.grid):
            row = [c.index, c.cfg.m, c.cfg.alpha, c.cfg.schedule.label(), int(n), st.eps[j], st.seeds]
            for stat in analysis.STATS:
                row += [st.mean[stat][j], st.stderr[stat][j]]
            row += [st.tams[j], st.tams_err[j]]
            rows.append(row)
    return rows


def write_outputs(camp: CampaignConfig, out: Path, cells, checks, hitting_rows, rate_rows):
    out.mkdir(parents=True, exist_ok=True)
    if camp.write_records:
        rec_dir = out / "records"
        rec_dir.mkdir(exist_ok=True)
        for c in cells:
            for j, r in enumerate(c.records):
                path = rec_dir / f"cell{c.index:03d}_seed{j:04d}.jsonl"
                tmp = path.with_name(path.name + ".tmp")
                r.write_jsonl(tmp)
                os.replace(tmp, path)
    write_table(out / "ensemble.csv", SCHEMAS["ensemble"], ENSEMBLE_HEADER, _ensemble_rows(cells))
    write_table(out / "hitting.csv", SCHEMAS["hitting"], HITTING_HEADER, hitting_rows)
    write_table(out / "ratefit.csv", SCHEMAS["ratefit"], RATEFIT_HEADER, rate_rows)

    lines = [f"# schema={SCHEMAS['report']}"]
    lines += [c.line() for c in checks]
    lines.append("")
    for c in cells:
        status = "failed" if c.error else "ok"
        lines.append(f"{c.label}: {status}, seeds={len(c.seeds)}, wallclock_s={c.wallclock_s:.2f}")
    passed = sum(c.passed for c in checks)
    lines.append(f"summary: {passed}/{len(checks)} checks passed, "
                 f"{sum(c.error is not None for c in cells)} failed cells")
    _atomic_write(out / "report.txt", "\n".join(lines) + "\n")

    manifest = out / "manifest.json"
    failed = [{"cell": c.index, "label": c.label, "error": c.error} for c in cells if c.error]
    if failed:
        _atomic_write(manifest, json.dumps({"failed_cells": failed}, indent=2) + "\n")
    elif manifest.exists():
        manifest.unlink()


def run_campaign(camp: CampaignConfig, out_dir=None, parallelism: int | None = None,
                 charts: bool = True) -> CampaignResult:
    out = Path(out_dir if out_dir is not None else camp.output_dir)
    cells = execute(camp, parallelism)
    checks, hitting_rows, rate_rows = analyse(camp, cells)
    write_outputs(camp, out, cells, checks, hitting_rows, rate_rows)
    if charts:
        from .charts import render_charts
        render_charts(out)
    return CampaignResult(out, cells, checks, hitting_rows, rate_rows)
