"""CLI contract: exit codes, defaults, reproducibility, output shapes."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from efficientmil.cli import main
from efficientmil.data import Bag, read_split, write_bag

runner = CliRunner()


def run(*args, env=None):
    return runner.invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    result = run("synth", "--out", root / "ds", "--bags", 24, "--instances", 8,
                 "--dim", 6, "--witnesses", "1,3", "--mu", 3.0, "--seed", 42)
    assert result.exit_code == 0, result.output
    return root / "ds"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    result = run("train", "--manifest", dataset / "manifest.json", "--out", out,
                 "--model", "gru", "--layers", 1, "--lambda", 4,
                 "--lr", 1e-3, "--epochs", 2, "--patience", 2, "--seed", 42)
    assert result.exit_code == 0, result.output
    return out


class TestSynth:
    def test_outputs_exist(self, dataset):
        assert (dataset / "manifest.json").exists()
        assert (dataset / "witness_indices.json").exists()
        assert (dataset / "config.json").exists()
        assert len(list(dataset.glob("*.emil"))) == 24

    def test_rerun_identical_bytes(self, dataset, tmp_path):
        result = run("synth", "--out", tmp_path / "ds2", "--bags", 24, "--instances", 8,
                     "--dim", 6, "--witnesses", "1,3", "--mu", 3.0, "--seed", 42)
        assert result.exit_code == 0
        for path in sorted(dataset.glob("*.emil")):
            assert (tmp_path / "ds2" / path.name).read_bytes() == path.read_bytes()


class TestSplit:
    def test_default_flags_are_seed42_fourtoone(self, dataset, tmp_path):
        result = run("split", "--manifest", dataset / "manifest.json",
                     "--out", tmp_path / "split.json")
        assert result.exit_code == 0
        spec = read_split(tmp_path / "split.json")
        assert spec.seed == 42 and spec.ratio == 0.8

    def test_missing_manifest_is_exit_2_with_path(self, tmp_path):
        result = run("split", "--manifest", tmp_path / "nope.json",
                     "--out", tmp_path / "s.json")
        assert result.exit_code == 2
        assert "nope.json" in result.output

    def test_rerun_identical_file(self, dataset, tmp_path):
        for name in ("a.json", "b.json"):
            assert run("split", "--manifest", dataset / "manifest.json",
                       "--out", tmp_path / name).exit_code == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_emil_seed_env_override_and_flag_priority(self, dataset, tmp_path):
        result = run("split", "--manifest", dataset / "manifest.json",
                     "--out", tmp_path / "env.json", env={"EMIL_SEED": "7"})
        assert result.exit_code == 0
        assert read_split(tmp_path / "env.json").seed == 7
        result = run("split", "--manifest", dataset / "manifest.json",
                     "--out", tmp_path / "flag.json", "--seed", 3, env={"EMIL_SEED": "7"})
        assert result.exit_code == 0
        assert read_split(tmp_path / "flag.json").seed == 3


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "checkpoint.emil").exists()
        assert (trained / "history.csv").exists()
        assert (trained / "split.json").exists()
        config = json.loads((trained / "config.json").read_text())
        assert config["command"] == "train"
        assert config["train"]["seed"] == 42

    def test_unknown_model_exit_2_lists_kinds(self, dataset, tmp_path):
        result = run("train", "--manifest", dataset / "manifest.json",
                     "--out", tmp_path / "x", "--model", "transformer")
        assert result.exit_code == 2
        assert "gru" in result.output and "mamba" in result.output

    def test_invalid_config_exit_2(self, dataset, tmp_path):
        result = run("train", "--manifest", dataset / "manifest.json",
                     "--out", tmp_path / "x", "--patience", 0)
        assert result.exit_code == 2

    def test_determinism_bitwise(self, dataset, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            result = run("train", "--manifest", dataset / "manifest.json",
                         "--out", tmp_path / name, "--model", "gru", "--layers", 1,
                         "--lambda", 4, "--lr", 1e-3, "--epochs", 2, "--patience", 2)
            assert result.exit_code == 0, result.output
            outs.append(tmp_path / name)
        assert (outs[0] / "checkpoint.emil").read_bytes() == (outs[1] / "checkpoint.emil").read_bytes()
        strip = lambda p: [",".join(l.split(",")[:-1]) for l in p.read_text().splitlines()]
        assert strip(outs[0] / "history.csv") == strip(outs[1] / "history.csv")


class TestEval:
    def test_reproduces_best_val_auc_exactly(self, dataset, trained, tmp_path):
        history = (trained / "history.csv").read_text().splitlines()[1:]
        best = max(float(line.split(",")[2]) for line in history)
        result = run("eval", "--checkpoint", trained / "checkpoint.emil",
                     "--manifest", dataset / "manifest.json",
                     "--split", trained / "split.json", "--subset", "val",
                     "--out", tmp_path / "ev")
        assert result.exit_code == 0, result.output
        reported = float(result.output.split("AUC ")[1].split()[0])
        assert reported == best

    def test_bench_emits_latency_stats(self, dataset, trained, tmp_path):
        result = run("eval", "--checkpoint", trained / "checkpoint.emil",
                     "--manifest", dataset / "manifest.json",
                     "--split", trained / "split.json", "--subset", "val",
                     "--out", tmp_path / "evb", "--bench", "--bench-runs", 10)
        assert result.exit_code == 0
        assert "p95" in result.output
        timing = json.loads((tmp_path / "evb" / "timing.json").read_text())
        assert timing["timing_runs"] == 10 and timing["mean_ms"] > 0

    def test_single_class_subset_exit_2(self, trained, tmp_path, rng):
        single = tmp_path / "single"
        single.mkdir()
        entries = []
        for i in range(3):
            bag = Bag(id=f"s{i}", features=rng.standard_normal((4, 6)).astype(np.float32),
                      label=1)
            write_bag(bag, single / f"s{i}.emil")
            entries.append([f"s{i}.emil", 1])
        (single / "manifest.json").write_text(json.dumps({
            "name": "single", "class_names": ["n", "p"], "entries": entries, "d": 6}))
        result = run("eval", "--checkpoint", trained / "checkpoint.emil",
                     "--manifest", single / "manifest.json", "--subset", "all",
                     "--out", tmp_path / "evs")
        assert result.exit_code == 2
        assert "one class" in result.output


class TestSelectCommand:
    def test_cardinality_and_flags(self, dataset, trained, tmp_path):
        bag_path = sorted(dataset.glob("*.emil"))[0]
        out_csv = tmp_path / "sel.csv"
        result = run("select", "--checkpoint", trained / "checkpoint.emil",
                     "--bag", bag_path, "--out", out_csv, "--strategy", "aps",
                     "--lambda", 2)
        assert result.exit_code == 0
        lines = out_csv.read_text().strip().splitlines()
        assert len(lines) == 9            # header + 8 instances
        assert sum(int(l.split(",")[-1]) for l in lines[1:]) == 2


class TestHeatmapCommand:
    def test_with_coords(self, dataset, trained, tmp_path):
        bag_path = sorted(dataset.glob("*.emil"))[0]
        result = run("heatmap", "--checkpoint", trained / "checkpoint.emil",
                     "--bag", bag_path, "--out", tmp_path / "hm.csv")
        assert result.exit_code == 0
        assert len((tmp_path / "hm.csv").read_text().strip().splitlines()) == 9

    def test_without_coords_exit_2_with_guidance(self, trained, tmp_path, rng):
        bag = Bag(id="nc", features=rng.standard_normal((4, 6)).astype(np.float32), label=0)
        write_bag(bag, tmp_path / "nc.emil")
        result = run("heatmap", "--checkpoint", trained / "checkpoint.emil",
                     "--bag", tmp_path / "nc.emil", "--out", tmp_path / "hm.csv")
        assert result.exit_code == 2
        assert "coordinate-free" in result.output


class TestAblateCommand:
    def test_row_count_three_by_four_by_five(self, tmp_path):
        # tiny bags keep the 60 training runs fast
        ds = tmp_path / "ds"
        result = run("synth", "--out", ds, "--bags", 10, "--instances", 3,
                     "--dim", 3, "--witnesses", "1,2", "--mu", 3.0, "--seed", 0)
        assert result.exit_code == 0
        result = run("ablate", "--manifest", ds / "manifest.json", "--out", tmp_path / "ab",
                     "--model", "gru", "--strategies", "aps,topk,random",
                     "--lambdas", "64,128,256,512", "--seeds", 5,
                     "--epochs", 1, "--patience", 1, "--lr", 1e-3)
        assert result.exit_code == 0, result.output
        lines = (tmp_path / "ab" / "ablation.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 3 * 4 * 5


class TestBenchCommand:
    def test_bench_outputs(self, tmp_path):
        result = run("bench", "--model", "gru", "--dim", 8, "--lambdas", "16,32",
                     "--runs", 5, "--out", tmp_path / "b")
        assert result.exit_code == 0
        fit = json.loads((tmp_path / "b" / "bench_fit.json").read_text())
        assert "r_squared" in fit
        lines = (tmp_path / "b" / "bench.csv").read_text().strip().splitlines()
        assert len(lines) == 3
