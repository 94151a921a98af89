import csv
import json

import pytest

from lql import pipeline
from lql.cli import EXIT_ATTENTION, EXIT_CONFIG, EXIT_EMPTY, EXIT_OK, main, sha256
from lql.config import ExperimentConfig, parse_config, replicate_seed, splitmix64
from lql.errors import ConfigurationError
from lql.field import load_field

SMALL = """\
# smoke-sized run
grid_n = 513
spacing = 0.03125
min_inner_sites = 8
n_replicates = 2
base_seed = 11
diagnose_scale = 0.01
n_empirical = 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL)
    return p


# ------------------------------------------------------------------- config
def test_splitmix64_reference_values():
    # published splitmix64 outputs for state 0 and for state 1234567
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(1234567) == 6457827717110365317
    assert replicate_seed(5, 3) == splitmix64(8)


def test_config_roundtrip_and_defaults():
    cfg = parse_config(SMALL)
    assert cfg.grid_n == 513 and cfg.K == 2.0 and cfg.n_probe == 4
    back = parse_config(cfg.dumps())
    assert back == cfg
    t = parse_config("t_values = 0.5, 1.5\nshortcut_epsilons = 0.2")
    assert t.t_values == (0.5, 1.5) and t.shortcut_epsilons == (0.2,)


@pytest.mark.parametrize(
    "text",
    [
        "nonsense = 1",
        "K = 2\nK = 3",
        "grid_n",
        "grid_n = many",
        "K = 1",
        "n_replicates = 0",
        "delta = 1.5",
        "grid_n = 64",
        "gamma = 2.5",
        "chi = 0.5",
        "shortcut_epsilons = 0.3",
    ],
)
def test_config_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_overrides_keep_none():
    cfg = ExperimentConfig(grid_n=513).with_overrides(n_replicates=5, base_seed=None)
    assert cfg.n_replicates == 5 and cfg.base_seed == 0


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("LQL_WORKERS", "1")
    assert pipeline.worker_count() == 1
    monkeypatch.setenv("LQL_WORKERS", "0")
    assert pipeline.worker_count() == 1
    assert pipeline.pmap(abs, [-1, 2, -3]) == [1, 2, 3]


# ---------------------------------------------------------------------- CLI
def _manifest(out, stage):
    return json.loads((out / f"manifest_{stage}.json").read_text())


def test_sample_writes_fields_and_manifest(tmp_path, cfg_path):
    out = tmp_path / "a"
    assert main(["sample", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
    files = sorted((out / "fields").iterdir())
    assert [f.name for f in files] == ["field_0000.lqgf", "field_0001.lqgf"]
    man = _manifest(out, "sample")
    assert [r["seed"] for r in man["replicates"]] == [replicate_seed(11, 0), replicate_seed(11, 1)]
    for entry in man["files"]:
        assert entry["sha256"] == sha256(out / entry["path"])
    assert load_field(files[0]).grid.n_sites == 513

    again = tmp_path / "b"
    main(["sample", "--config", str(cfg_path), "--out", str(again)])
    for f in files:
        assert f.read_bytes() == (again / "fields" / f.name).read_bytes()
    assert (out / "manifest_sample.json").read_bytes() == (again / "manifest_sample.json").read_bytes()


def test_replicate_and_seed_overrides(tmp_path, cfg_path):
    out = tmp_path / "o"
    main(["sample", "--config", str(cfg_path), "--out", str(out), "--replicates", "1", "--seed", "4"])
    man = _manifest(out, "sample")
    assert len(man["replicates"]) == 1 and man["replicates"][0]["seed"] == replicate_seed(4, 0)


def test_pipeline_stages(tmp_path, cfg_path):
    out = tmp_path / "run"
    for stage in ("geodesic", "decompose", "empirical"):
        assert main([stage, "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        man = _manifest(out, stage)
        assert man["files"], stage
        for entry in man["files"]:
            assert entry["sha256"] == sha256(out / entry["path"])
    rows = list(csv.DictReader(open(out / "decompose" / "decomposition_0000.csv")))
    assert rows and set(rows[0]) == {"i", "P_i", "p_x", "p_y", "Y_i", "L_eta_i", "G_i", "D_i"}
    samples = [json.loads(x) for x in open(out / "empirical" / "samples_0000.jsonl")]
    assert len(samples) == 2 and samples[0]["metric"] is not None


def test_empty_renewal_exit_code(tmp_path, cfg_path):
    p = tmp_path / "empty.cfg"
    p.write_text(SMALL + "rho = 1e12\n")  # clearance can never reach rho
    assert main(["decompose", "--config", str(p), "--out", str(tmp_path / "e")]) == EXIT_EMPTY
    man = _manifest(tmp_path / "e", "decompose")
    assert all(r["status"] == "empty_renewal" for r in man["replicates"])


def test_config_error_exit_code(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("K = 0.5\n")
    assert main(["sample", "--config", str(p), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["sample", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["sample", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_diagnose_then_report(tmp_path, cfg_path, capsys):
    out = tmp_path / "d"
    assert main(["diagnose", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
    entries = json.loads((out / "diagnostics.json").read_text())
    names = {e["name"][:3] for e in entries}
    assert {f"c{k:02d}" for k in range(1, 14)} <= names
    for e in entries:
        assert set(e) >= {"name", "value", "ci_lo", "ci_hi", "tolerance", "pass", "n", "seeds"}
    code = main(["report", "--out", str(out)])
    assert code == (EXIT_OK if all(e["pass"] for e in entries) else EXIT_ATTENTION)
    with open(out / "report" / "entries.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(entries)
    assert "entries pass" in capsys.readouterr().out


def test_report_empty_and_failing(tmp_path, capsys):
    out = tmp_path / "r"
    out.mkdir()
    (out / "diagnostics.json").write_text("[]\n")
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert "0/0 entries pass" in capsys.readouterr().out
    row = {"name": "x", "value": 2.0, "tolerance": 1.0, "rule": "le", "ci_lo": None, "ci_hi": None, "n": 3, "seeds": [1], "note": "", "pass": False}
    (out / "diagnostics.json").write_text(json.dumps([row, dict(row, name="y", value=0.5, **{"pass": True})]))
    assert main(["report", "--out", str(out)]) == EXIT_ATTENTION
    with open(out / "report" / "entries.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_report_missing_stage(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "diagnose" in capsys.readouterr().err
