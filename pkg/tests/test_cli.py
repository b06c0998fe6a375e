import csv
import math
from pathlib import Path

import pytest

from dsgdsim.cli import ExperimentPlan, execute_plan, main, parse_config
from dsgdsim.engine import ConfigError, ProblemConfig, RunConfig


def write_config(tmp_path, text):
    path = tmp_path / "exp.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


FAST_RUN = """
algorithm = aau
n_workers = 3
edge_prob = 0.6
problem = quadratic
d = 2
lr_schedule = constant
eta = 0.05
k_budget = 20
straggler_prob = 0.0
slowdown = 1.0
"""


def test_empty_config_applies_defaults():
    plan = parse_config(None, {})
    assert len(plan.runs) == 1
    cfg = plan.runs[0]
    assert cfg.batch_size == 128
    assert cfg.compute.straggler_prob == 0.1
    assert cfg.compute.slowdown == 10.0
    assert cfg.lr_schedule == "geometric"
    assert cfg.eta0 == 0.1 and cfg.delta == 0.95


def test_sweep_expansion_is_cartesian_and_ordered(tmp_path):
    path = write_config(tmp_path, FAST_RUN + "n_workers = 4,8,16\nseeds = 1,2\n")
    plan = parse_config(path, {})
    combos = [(c.n_workers, c.seed) for c in plan.runs]
    assert combos == [(4, 1), (4, 2), (8, 1), (8, 2), (16, 1), (16, 2)]


def test_plan_expansion_order_stable(tmp_path):
    path = write_config(tmp_path, FAST_RUN + "seeds = 5,3,9\n")
    first = [c.config_hash() for c in parse_config(path, {}).runs]
    second = [c.config_hash() for c in parse_config(path, {}).runs]
    assert first == second
    assert [c.seed for c in parse_config(path, {}).runs] == [5, 3, 9]


def test_out_of_range_value_names_the_key(tmp_path):
    path = write_config(tmp_path, "straggler_prob = 1.5\n")
    with pytest.raises(ConfigError, match="straggler_prob"):
        parse_config(path, {})


def test_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path, "stragler_prob = 0.1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config(path, {})


def test_flags_override_file_values(tmp_path):
    path = write_config(tmp_path, FAST_RUN)
    plan = parse_config(path, {"seeds": "7", "algorithm": "sync"})
    assert plan.runs[0].seed == 7
    assert plan.runs[0].algorithm == "sync"


def test_execute_trivial_plan_writes_files(tmp_path):
    path = write_config(tmp_path, FAST_RUN)
    plan = parse_config(path, {}, out_dir=str(tmp_path / "out"))
    assert execute_plan(plan) == 0
    out = tmp_path / "out"
    h = plan.runs[0].config_hash()
    assert (out / f"run_{h}.csv").exists()
    assert (out / f"run_{h}.summary.csv").exists()
    assert (out / "comparison.csv").exists()


def test_failing_run_keeps_others_alive(tmp_path):
    good = parse_config(write_config(tmp_path, FAST_RUN), {}).runs[0]
    bad = RunConfig(
        algorithm="aau",
        n_workers=3,
        topology_file=str(tmp_path / "missing.edges"),
        problem=ProblemConfig(kind="quadratic", d=2),
        lr_schedule="constant",
        eta=0.05,
        k_budget=5,
    )
    plan = ExperimentPlan(runs=(good, bad), out_dir=str(tmp_path / "out2"))
    assert execute_plan(plan) == 1
    assert (tmp_path / "out2" / f"run_{good.config_hash()}.csv").exists()
    assert not (tmp_path / "out2" / f"run_{bad.config_hash()}.csv").exists()


def test_rerun_is_byte_identical(tmp_path):
    path = write_config(tmp_path, FAST_RUN)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    plan_a = parse_config(path, {}, out_dir=str(out_a))
    plan_b = parse_config(path, {}, out_dir=str(out_b))
    execute_plan(plan_a)
    execute_plan(plan_b)
    h = plan_a.runs[0].config_hash()
    assert (out_a / f"run_{h}.csv").read_bytes() == (out_b / f"run_{h}.csv").read_bytes()


def test_aggregate_matches_recomputation_from_run_files(tmp_path):
    path = write_config(tmp_path, FAST_RUN + "seeds = 1,2,3\n")
    out = tmp_path / "agg"
    plan = parse_config(path, {}, out_dir=str(out))
    assert execute_plan(plan) == 0

    finals = []
    for cfg in plan.runs:
        with open(out / f"run_{cfg.config_hash()}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        finals.append(float(rows[-1]["loss"]))
    mean = sum(finals) / len(finals)
    std = math.sqrt(sum((v - mean) ** 2 for v in finals) / (len(finals) - 1))

    with open(out / "comparison.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 1
    assert float(table[0]["n_seeds"]) == 3
    assert float(table[0]["final_loss_mean"]) == pytest.approx(mean, rel=1e-12)
    assert float(table[0]["final_loss_std"]) == pytest.approx(std, rel=1e-12)


def test_duplicate_configs_rejected(tmp_path):
    path = write_config(tmp_path, FAST_RUN + "seeds = 1,1\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(path, {})


def test_main_run_subcommand(tmp_path):
    path = write_config(tmp_path, FAST_RUN)
    code = main(["run", "--config", path, "--out", str(tmp_path / "cli_out"), "--seed", "4"])
    assert code == 0
    assert list((tmp_path / "cli_out").glob("run_*.csv"))


def test_main_rejects_bad_config(tmp_path):
    path = write_config(tmp_path, "straggler_prob = 2.0\n")
    assert main(["run", "--config", path]) == 2


def test_main_theory_subcommand(capsys):
    code = main(["theory", "--beta", "0.5", "--workers", "2", "--b-window", "1"])
    assert code == 0
    out = capsys.readouterr().out
    assert "eta_max" in out and "c_proof" in out


def test_main_topology_subcommand(tmp_path):
    target = tmp_path / "graph.edges"
    code = main(["topology", "--workers", "6", "--edge-prob", "0.4", "--seed", "3",
                 "--out", str(target)])
    assert code == 0
    header = target.read_text().splitlines()[0].split()
    assert header[0] == "6"
