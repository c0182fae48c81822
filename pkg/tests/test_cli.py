import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from slfi.cli import main
from slfi.flows import FitConfig, fit_flow, make_flow, save_flow
from slfi.io import read_csv, read_table, write_csv
from slfi.simulators import get_simulator

from conftest import tiny_doc


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def diagnose_rows(capsys, argv):
    assert main(["diagnose", *argv]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("# config_hash=") and lines[1] == "metric,value"
    return dict(line.split(",") for line in lines[2:])


# ------------------------------------------------------------------ run


def test_missing_simulator_exits_nonzero(tmp_path, capsys):
    doc = tiny_doc()
    del doc["simulator"]
    cfg = write_config(tmp_path / "c.yaml", doc)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) != 0
    assert "simulator" in capsys.readouterr().err


def test_every_problem_reported(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", tiny_doc(budget=5, head="gp"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "budget" in err and "head" in err


def test_run_same_seed_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", tiny_doc())
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "7"]) == 0
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    assert "seed=7" in (tmp_path / "a" / "summary.csv").read_text().splitlines()[0]


def test_run_writes_one_record_per_round(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", tiny_doc())
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--rounds", "4"]) == 0
    rounds = {row["round"] for row in read_table(tmp_path / "o" / "summary.csv")}
    assert rounds == {"1", "2", "3", "4"}
    assert all((tmp_path / "o" / f"round_0{r}" / "COMPLETE").exists() for r in range(1, 5))


def test_run_reports_unreadable_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err


def test_repeat_run_byte_identical_across_thread_counts(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", tiny_doc(metrics={"names": ["missed_mode", "ess"]}))
    env = {**os.environ, "NUMBA_NUM_THREADS": "4"}
    for name, threads in (("one", "1"), ("four", "4")):
        subprocess.run([sys.executable, "-m", "slfi.cli", "run", "--config", str(cfg), "--out", str(tmp_path / name),
                        "--threads", threads], check=True, env=env)
    assert (tmp_path / "one" / "summary.csv").read_bytes() == (tmp_path / "four" / "summary.csv").read_bytes()


# ------------------------------------------------------------------ diagnose


def test_diagnose_mode_file(tmp_path, capsys):
    sim = get_simulator("slcp256")
    write_csv(tmp_path / "m.csv", [f"t{i}" for i in range(8)], sim.modes)
    rows = diagnose_rows(capsys, [str(tmp_path / "m.csv"), "--simulator", "slcp256"])
    assert rows == {"missed_mode": "0.0", "imbalance": "0.0"}


def test_diagnose_empty_file(tmp_path, capsys):
    write_csv(tmp_path / "e.csv", [f"t{i}" for i in range(8)], np.empty((0, 8)))
    rows = diagnose_rows(capsys, [str(tmp_path / "e.csv"), "--simulator", "slcp256",
                                  "--metrics", "missed_mode,imbalance,ess"])
    assert rows == {"missed_mode": "256.0", "imbalance": "NA", "ess": "NA"}


def test_diagnose_prior_draws_near_multinomial_expectation(tmp_path, capsys):
    sim = get_simulator("slcp256")
    missed = []
    for seed in range(5):
        write_csv(tmp_path / "p.csv", [f"t{i}" for i in range(8)], sim.sample_prior(1000, np.random.default_rng(seed)))
        missed.append(float(diagnose_rows(capsys, [str(tmp_path / "p.csv"), "--simulator", "slcp256"])["missed_mode"]))
    expected = 256 * (1 - 1 / 256) ** 1000
    assert abs(np.mean(missed) - expected) < 3 * np.sqrt(expected / 5)


def test_diagnose_dimension_mismatch(tmp_path, capsys):
    write_csv(tmp_path / "bad.csv", ["a", "b"], np.zeros((3, 2)))
    assert main(["diagnose", str(tmp_path / "bad.csv"), "--simulator", "slcp16"]) != 0
    assert "columns" in capsys.readouterr().err


def test_diagnose_unknown_metric(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b"], np.zeros((3, 2)))
    assert main(["diagnose", str(tmp_path / "x.csv"), "--simulator", "shubert", "--metrics", "fid"]) != 0


# ------------------------------------------------------------------ sample


@pytest.fixture(scope="module")
def four_mode_checkpoint(tmp_path_factory):
    rng = np.random.default_rng(5)
    centers = np.array([[2, 2], [2, -2], [-2, 2], [-2, -2]], dtype=float)
    data = centers[rng.integers(0, 4, 5000)] + 0.3 * rng.standard_normal((5000, 2))
    model = fit_flow(make_flow(2, data=data, hidden_dims=(32, 32)), data, cfg=FitConfig(max_epochs=30, patience_epochs=5))
    path = tmp_path_factory.mktemp("ckpt") / "surrogate.json"
    save_flow(model, path)
    return path


def test_sample_zero_is_header_only(tmp_path, four_mode_checkpoint):
    out = tmp_path / "s.csv"
    assert main(["sample", str(four_mode_checkpoint), "--n", "0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2 and lines[1] == "theta0,theta1,log_prob"


def test_sample_same_seed_identical(tmp_path, four_mode_checkpoint):
    for name in ("a.csv", "b.csv"):
        assert main(["sample", str(four_mode_checkpoint), "--n", "50", "--out", str(tmp_path / name), "--seed", "3"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sample_four_modes_each_orthant(tmp_path, four_mode_checkpoint):
    out = tmp_path / "s.csv"
    assert main(["sample", str(four_mode_checkpoint), "--n", "2000", "--out", str(out)]) == 0
    _, data = read_csv(out)
    codes = (data[:, 0] > 0) * 2 + (data[:, 1] > 0)
    assert np.bincount(codes.astype(int), minlength=4).min() >= 0.15 * 2000
    assert np.all(np.isfinite(data[:, 2]))


def test_sample_rejects_bad_checkpoints(tmp_path, capsys):
    assert main(["sample", str(tmp_path / "none.json"), "--n", "5", "--out", str(tmp_path / "o.csv")]) != 0
    save_flow(make_flow(2, 3), tmp_path / "cond.json")
    assert main(["sample", str(tmp_path / "cond.json"), "--n", "5", "--out", str(tmp_path / "o.csv")]) != 0
    assert "unconditional" in capsys.readouterr().err


# ------------------------------------------------------------------ bench-table1


def test_bench_table1_shape_small(tmp_path):
    argv = ["bench-table1", "--out", str(tmp_path), "--seeds", "0,1", "--n", "200",
            "--teacher-chains", "300", "--teacher-t", "50"]
    assert main(argv) == 0
    rows = read_table(tmp_path / "table1.csv")
    assert [r["metric"] for r in rows] == ["missed_mode", "imbalance", "ess"]
    samplers = [c[:-5] for c in rows[0] if c.endswith("_mean")]
    assert samplers == ["mh_1", "mh_10", "mh_100", "mh_1000", "isp_300"]
    missed = [float(rows[0][f"{s}_mean"]) for s in samplers[:4]]
    assert all(a > b for a, b in zip(missed, missed[1:]))
    assert len(read_table(tmp_path / "table1_seeds.csv")) == 2 * 5 * 3
    first = (tmp_path / "table1.csv").read_bytes()
    assert main(argv) == 0
    assert (tmp_path / "table1.csv").read_bytes() == first


def test_sample_version_mismatch_names_versions(tmp_path, capsys):
    import json

    save_flow(make_flow(2), tmp_path / "f.json")
    doc = json.loads((tmp_path / "f.json").read_text())
    doc["version"] = "flow-v0"
    (tmp_path / "f.json").write_text(json.dumps(doc))
    assert main(["sample", str(tmp_path / "f.json"), "--n", "5", "--out", str(tmp_path / "o.csv")]) != 0
    err = capsys.readouterr().err
    assert "flow-v0" in err and "flow-v1" in err
