"""Command-line entry point: ``dmsgd {validate,run,oracle,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import CampaignConfig, load_config, to_dict
from .errors import DmsgdError
from .objectives import estimate_assumptions
from .schedules import Regime, ScheduleFamily, robbins_monro_valid

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_INVALID = 2


def _error(code: str, message: str) -> dict:
    return {"code": code, "message": message}


def validate_campaign(camp: CampaignConfig, probes: int = 1000):
    """Build every component of every cell and run the preflight validators.

    Returns ``(lines, errors, waivers)``: human-readable report lines, a list
    of machine-readable errors, and regime-tagged waivers that do not fail.
    """
    lines, errors, waivers = [], [], []
    seen_topo, seen_obj, seen_sched = set(), set(), set()
    for cfg in camp.cells():
        topo = cfg.topology
        if topo not in seen_topo:
            seen_topo.add(topo)
            try:
                W = topo.build().matrix
                lines.append(f"topology {topo.kind.value} m={topo.m} k={topo.k}: "
                             f"lambda0 = {W.lambda0:.12g}")
            except DmsgdError as exc:
                errors.append(_error(type(exc).__name__, f"topology m={topo.m}: {exc}"))
        key = (cfg.objective, topo.m)
        if key not in seen_obj:
            seen_obj.add(key)
            try:
                obj = cfg.objective.build(topo.m)
                rep = estimate_assumptions(obj, cfg.objective.noise, probes,
                                           np.random.default_rng(cfg.objective.dataset_seed))
                lines.append(
                    f"objective {obj.family.value} N={obj.dim} m={obj.m}: "
                    f"sigma0_sq={rep.sigma0_sq_hat:.6g} sigma1_sq={rep.sigma1_sq_hat:.6g} "
                    f"L={rep.L_hat:.6g} M={rep.M_hat:.6g} probes={rep.probes}")
                probe = np.random.default_rng(0).uniform(-obj.box_radius, obj.box_radius,
                                                         (probes, obj.dim))
                low = float(np.min(obj.loss(probe)))
                if low < -1e-12:
                    errors.append(_error("NegativeLoss", f"loss reaches {low:g} inside the box"))
            except DmsgdError as exc:
                errors.append(_error(type(exc).__name__, f"objective: {exc}"))
        sc = cfg.schedule
        if sc not in seen_sched:
            seen_sched.add(sc)
            verdict = robbins_monro_valid(sc.build(topo.m))
            state = "valid" if verdict.valid else "invalid"
            lines.append(f"schedule {sc.label()} regime={sc.regime.value}: "
                         f"Robbins-Monro {state} ({verdict.reason})")
            if not verdict.valid:
                waived = ((sc.regime is Regime.RATE and sc.family is ScheduleFamily.RATE_LAW)
                          or (sc.regime is Regime.HITTING and sc.family is ScheduleFamily.CONSTANT))
                if waived:
                    waivers.append(f"{sc.label()}: {verdict.reason} (waived for regime "
                                   f"{sc.regime.value})")
                else:
                    errors.append(_error("RobbinsMonro", f"{sc.label()}: {verdict.reason}"))
            if sc.family is ScheduleFamily.RATE_LAW and sc.regime is not Regime.RATE:
                errors.append(_error("BadRegime", "rate-law schedule needs regime = \"rate\""))
    return lines, errors, waivers


def _load(path):
    try:
        return load_config(path), None
    except (OSError, DmsgdError) as exc:
        return None, _error(type(exc).__name__, str(exc))


def _fail(errors, code=EXIT_INVALID) -> int:
    for e in errors:
        print(f"error: {e['code']}: {e['message']}", file=sys.stderr)
    print(json.dumps({"errors": errors}), file=sys.stderr)
    return code


def cmd_validate(args) -> int:
    camp, err = _load(args.config)
    if err:
        return _fail([err])
    lines, errors, waivers = validate_campaign(camp)
    for line in lines:
        print(line)
    for w in waivers:
        print(f"waiver: {w}")
    if errors:
        print("validation: FAIL")
        return _fail(errors)
    print("validation: PASS")
    return EXIT_OK


def _campaign_with_overrides(args):
    camp, err = _load(args.config)
    if err:
        return None, err
    changes = {}
    if getattr(args, "master_seed", None) is not None:
        changes["master_seed"] = args.master_seed
    if getattr(args, "parallelism", None) is not None:
        changes["parallelism"] = args.parallelism
    if changes:
        from dataclasses import replace
        camp = replace(camp, **changes)
    return camp, None


def cmd_run(args) -> int:
    from .campaign import run_campaign
    camp, err = _campaign_with_overrides(args)
    if err:
        return _fail([err])
    _, errors, _ = validate_campaign(camp)
    if errors:
        return _fail(errors)
    out = Path(args.out or camp.output_dir)
    t0 = time.perf_counter()
    result = run_campaign(camp, out)
    for c in result.checks:
        print(c.line())
    print(f"{len(result.cells)} cells, {len(result.failed_cells)} failed, "
          f"{time.perf_counter() - t0:.1f} s; outputs in {out}")
    if result.failed_cells:
        print(f"failed cells listed in {out / 'manifest.json'}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_CHECKS_FAILED


def cmd_oracle(args) -> int:
    from .oracles import exhaustive_expectation
    camp, err = _load(args.config)
    if err:
        return _fail([err])
    cfg = camp.base
    H = args.horizon or cfg.horizon
    t0 = time.perf_counter()
    try:
        table = exhaustive_expectation(cfg, H)
    except DmsgdError as exc:
        return _fail([_error(type(exc).__name__, str(exc))])
    out = Path(args.out or "oracle.csv")
    if out.is_dir():
        out = out / "oracle.csv"
    table.write_csv(out)
    print(f"{table.sequences} sequences, H={H}, {time.perf_counter() - t0:.2f} s -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .campaign import SCHEMAS, read_table
    from .charts import render_charts
    out = Path(args.out)
    try:
        read_table(out / "ensemble.csv", SCHEMAS["ensemble"])
        made = render_charts(out)
    except (OSError, DmsgdError) as exc:
        return _fail([_error(type(exc).__name__, str(exc))])
    report = out / "report.txt"
    text = report.read_text() if report.exists() else ""
    print(text, end="")
    for p in made:
        print(f"chart: {p}")
    return EXIT_CHECKS_FAILED if any(l.startswith("FAIL") for l in text.splitlines()) else EXIT_OK


def cmd_show(args) -> int:
    camp, err = _load(args.config)
    if err:
        return _fail([err])
    print(json.dumps(to_dict(camp), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmsgd", description="Distributed momentum SGD campaigns")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    v = sub.add_parser("validate", help="build and check every component of a config")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run a campaign and write its outputs")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--parallelism", type=int)
    r.add_argument("--master-seed", type=int)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", help="exact expectations by enumerating every noise sequence")
    o.add_argument("--config", required=True)
    o.add_argument("--horizon", type=int)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    rep = sub.add_parser("report", help="re-render charts and print the report of a run")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("show", help="print the parsed configuration")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_show)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
