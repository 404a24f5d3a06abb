import json
from pathlib import Path

import pytest

from dmsgd.campaign import SCHEMAS, read_table, run_campaign
from dmsgd.cli import EXIT_CHECKS_FAILED, EXIT_INVALID, EXIT_OK, main
from dmsgd.config import load_config, parse_config
from dmsgd.errors import BadConfig, SchemaError

ROOT = Path(__file__).resolve().parents[1]

BASE = """
[topology]
kind = "{kind}"
m = {m}
{topo_extra}

[objective]
family = "quadratic_consensus"
N = 2
heterogeneity = 0.5
dataset_seed = 2
noise = {{ kind = "gaussian", scale = 0.1 }}

[schedule]
family = "power_law"
c = 0.1
p = {p}

[campaign]
horizon = 100
record_every = 10
seeds = 2
master_seed = 5
{campaign_extra}
"""


def write_cfg(tmp_path, name="c.toml", kind="uniform", m=3, topo_extra="", p=0.6,
              campaign_extra=""):
    path = tmp_path / name
    path.write_text(BASE.format(kind=kind, m=m, topo_extra=topo_extra, p=p,
                                campaign_extra=campaign_extra))
    return path


def test_shipped_configs_parse_and_validate(capsys):
    for path in sorted((ROOT / "configs").glob("*.toml")):
        assert main(["validate", "--config", str(path)]) == EXIT_OK, path
    assert "validation: PASS" in capsys.readouterr().out


def test_unknown_key_rejected(tmp_path, capsys):
    path = write_cfg(tmp_path, campaign_extra="horizn = 5")
    with pytest.raises(BadConfig, match="horizn"):
        load_config(path)
    assert main(["validate", "--config", str(path)]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert json.loads(err.strip().splitlines()[-1])["errors"][0]["code"] == "BadConfig"


def test_missing_section_rejected():
    with pytest.raises(BadConfig):
        parse_config({"topology": {"kind": "identity", "m": 1}})


def test_validate_uniform(tmp_path, capsys):
    assert main(["validate", "--config", str(write_cfg(tmp_path))]) == EXIT_OK
    out = capsys.readouterr().out
    lam = float(out.split("lambda0 = ")[1].split()[0])
    assert abs(lam) <= 1e-12 and "validation: PASS" in out


def test_validate_rejects_slow_decay(tmp_path, capsys):
    assert main(["validate", "--config", str(write_cfg(tmp_path, p=0.5))]) == EXIT_INVALID
    captured = capsys.readouterr()
    assert "validation: FAIL" in captured.out and "eps^2 diverges" in captured.err


def test_validate_rejects_easgd_beta(tmp_path, capsys):
    path = write_cfg(tmp_path, kind="easgd", m=4, topo_extra="beta = 0.6")
    assert main(["validate", "--config", str(path)]) == EXIT_INVALID
    assert "validation: FAIL" in capsys.readouterr().out


def test_show_prints_config(tmp_path, capsys):
    assert main(["show", "--config", str(write_cfg(tmp_path))]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["seeds"] == 2


def test_run_writes_expected_files(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path, campaign_extra='checks = ["tams_chain"]\nparallelism = 1')
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    records = sorted(p.name for p in (out / "records").iterdir())
    assert records == ["cell000_seed0000.jsonl", "cell000_seed0001.jsonl"]
    summaries = sorted(p.name for p in out.iterdir() if p.is_file())
    assert summaries == ["ensemble.csv", "hitting.csv", "ratefit.csv", "report.txt"]
    assert not (out / "manifest.json").exists()
    assert "PASS tams_chain" in capsys.readouterr().out
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert (out / "charts" / "loss.svg").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, campaign_extra="[campaign.sweep]\nalpha = [0.0, 0.5]")
    camp = load_config(cfg)
    a = run_campaign(camp, tmp_path / "a", parallelism=1)
    b = run_campaign(camp, tmp_path / "b", parallelism=2)
    for name in ("ensemble.csv", "hitting.csv", "ratefit.csv"):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()
    for rec in (a.out_dir / "records").iterdir():
        assert rec.read_bytes().count(b"\n") == (b.out_dir / "records" / rec.name).read_bytes().count(b"\n")


def test_master_seed_changes_outputs(tmp_path):
    camp = load_config(write_cfg(tmp_path))
    a = run_campaign(camp, tmp_path / "a", parallelism=1, charts=False)
    from dataclasses import replace
    b = run_campaign(replace(camp, master_seed=6), tmp_path / "b", parallelism=1, charts=False)
    assert (a.out_dir / "ensemble.csv").read_bytes() != (b.out_dir / "ensemble.csv").read_bytes()


def test_failed_cell_is_isolated(tmp_path, capsys):
    extra = ("[[campaign.sweep.schedule]]\nfamily = \"power_law\"\nc = 0.1\np = 0.6\n"
             "[[campaign.sweep.schedule]]\nfamily = \"constant\"\nc = 50.0\n")
    cfg = write_cfg(tmp_path, campaign_extra="parallelism = 1\n" + extra)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_CHECKS_FAILED
    manifest = json.loads((out / "manifest.json").read_text())
    assert [c["cell"] for c in manifest["failed_cells"]] == [1]
    assert "NumericalDivergence" in manifest["failed_cells"][0]["error"]
    rows = read_table(out / "ensemble.csv", SCHEMAS["ensemble"])
    assert rows and {r["cell"] for r in rows} == {"0"}
    assert "manifest.json" in capsys.readouterr().err


def test_table_schema_rejected(tmp_path):
    p = tmp_path / "ensemble.csv"
    p.write_text("# schema=dmsgd.ensemble/9\ncell\n")
    with pytest.raises(SchemaError):
        read_table(p, SCHEMAS["ensemble"])


def test_oracle_verb_rejects_gaussian(tmp_path, capsys):
    path = write_cfg(tmp_path, campaign_extra='init = "zero_consensus"')
    assert main(["oracle", "--config", str(path), "--out", str(tmp_path / "o.csv")]) == EXIT_INVALID
    assert "BadConfig" in capsys.readouterr().err
