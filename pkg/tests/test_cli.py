import csv
import hashlib
import re
from pathlib import Path

import pytest

from traffic_lab import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_synth_cfg(path, n_recordings=4):
    path.write_text(f"""[synth]
n_lanes = 2
ramp = false
n_agents = 5
duration = 10.0
n_recordings = {n_recordings}

[split]
ratios = [0.5, 0.0, 0.5]
""")
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_synth_cfg(root / "synth.toml")
    assert cli.main(["synth", "--config", str(cfg), "--seed", "7", "--out", str(root / "d")]) == 0
    return root


def test_synth_is_deterministic(tmp_path, data_dir):
    cfg = data_dir / "synth.toml"
    assert cli.main(["synth", "--config", str(cfg), "--seed", "7", "--out",
                     str(tmp_path / "again")]) == 0
    assert tree_hash(data_dir / "d") == tree_hash(tmp_path / "again")
    assert cli.main(["synth", "--config", str(cfg), "--seed", "8", "--out",
                     str(tmp_path / "other")]) == 0
    assert tree_hash(tmp_path / "other") != tree_hash(tmp_path / "again")


def test_self_evaluation_reports_zeros(tmp_path, data_dir):
    d = data_dir / "d"
    assert cli.main(["rollout", "--checkpoint", str(_trained(tmp_path, d)), "--data", str(d),
                     "--control", "all", "--out", str(tmp_path / "gen")]) == 0
    assert cli.main(["eval", "--generated", str(d), "--gt", str(d), "--report",
                     str(tmp_path / "self.csv"), "--histograms", str(tmp_path / "h.csv")]) == 0
    row = next(csv.DictReader(open(tmp_path / "self.csv")))
    for k in ("col_pct", "ade_m", "jsd_speed", "jsd_accel", "jsd_nlc"):
        assert float(row[k]) == 0.0
    assert float(row["off_pct"]) == 0.0
    assert cli.main(["eval", "--generated", str(tmp_path / "gen"), "--gt", str(d), "--map", str(d),
                     "--report", str(tmp_path / "gen.csv")]) == 0
    assert float(next(csv.DictReader(open(tmp_path / "gen.csv")))["ade_m"]) >= 0


def _trained(tmp_path, d):
    cfg = tmp_path / "bc.toml"
    cfg.write_text("[train]\nmethod = 'bc_wmse_orient'\nepochs = 1\nbatch_size = 2\n"
                   "[train.policy]\nembed_dim = 16\nheads = 2\nlayers = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(d), "--out",
                     str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "train_log.csv").exists()
    return tmp_path / "run" / "checkpoint"


def test_baseline_command(tmp_path, data_dir):
    assert cli.main(["baseline", "--data", str(data_dir / "d"), "--report",
                     str(tmp_path / "b.csv")]) == 0
    row = next(csv.DictReader(open(tmp_path / "b.csv")))
    assert row["method"] == "idm_mobil"


def test_exit_codes(tmp_path, data_dir, capsys):
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["synth", "--out", str(tmp_path), "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nmethod = 'nope'\n")
    assert cli.main(["train", "--config", str(bad), "--data", str(data_dir / "d"),
                     "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["eval", "--generated", str(tmp_path / "missing"), "--gt",
                     str(data_dir / "d"), "--report", str(tmp_path / "r.csv")]) == 2


def test_matrix_report_layout(tmp_path, data_dir):
    out = tmp_path / "matrix.csv"
    assert cli.main(["matrix", "--configs-dir", str(CONFIGS), "--data", str(data_dir / "d"),
                     "--seeds", "2", "--report", str(out), "--methods", "bc_wmse_orient,ds_wmse",
                     "--epochs", "1", "--pretrain-epochs", "1", "--batch-size", "2"]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2 * 2
    assert {(r["method"], r["control_mode"]) for r in rows} == {
        (m, c) for m in ("bc_wmse_orient", "ds_wmse") for c in ("all_agents", "single_agent")}
    cell = re.compile(r"^-?\d+\.\d\d ± \d+\.\d\d$")
    for r in rows:
        for k in cli.METRIC_COLUMNS:
            assert cell.match(r[k]), r[k]
    runs = list(csv.DictReader(open(tmp_path / "matrix_runs.csv")))
    assert len(runs) == 2 * 2 * 2


def test_format_cell():
    assert cli.format_cell([0.4, 0.62]) == "0.51 ± 0.16"
    assert cli.format_cell([1.0]) == "1.00 ± 0.00"
