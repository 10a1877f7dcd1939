"""End-to-end command-line tests: every subcommand, exit codes, manifests."""

import json
import subprocess
import sys

import numpy as np
import pytest

from lmpcast.cli import main
from lmpcast.evaluation import read_matrix_csv
from lmpcast.grid import Edge, Generator, GridGraph, write_case_dir
from lmpcast.training import load_model_checkpoint

TOY_CASE = "data/cases/toy3"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    rc = run("gen-data", "--case", TOY_CASE, "--out", out,
             "--hours", 60, "--congested-lines", 1, "--seed", 3)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def gcn_ckpt(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "gcn"
    rc = run("train", "--data", dataset_dir, "--model", "gcn", "--out", out,
             "--epochs", 2, "--lr", 1e-3, "--channels", 8, "--mu-width", 4,
             "--seed", 1)
    assert rc == 0
    return out / "best.ckpt"


@pytest.fixture(scope="module")
def astgcn_ckpt(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ast"
    rc = run("train", "--data", dataset_dir, "--model", "astgcn", "--out", out,
             "--epochs", 1, "--lr", 1e-3, "--channels", 8, "--mu-width", 4,
             "--t-hist", 4, "--seed", 1)
    assert rc == 0
    return out / "best.ckpt"


@pytest.fixture(scope="module")
def eval_dir(dataset_dir, gcn_ckpt, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ev"
    rc = run("eval", "--data", dataset_dir, "--ckpt", gcn_ckpt, "--out", out)
    assert rc == 0
    return out


class TestGenData:
    def test_dataset_layout_and_manifest(self, dataset_dir):
        for name in ("loads.csv", "lambda.csv", "mu.csv", "s.csv", "lmp.csv",
                     "split.json", "genconfig.json", "manifest.json"):
            assert (dataset_dir / name).is_file(), name
        assert (dataset_dir / "case" / "edges.csv").is_file()
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["config"]["hours"] == 60
        assert manifest["config"]["seed"] == 3
        (case_hash,) = [v for k, v in manifest["inputs"].items()
                        if k.endswith("toy3")]
        assert len(case_hash) == 64 and int(case_hash, 16) >= 0
        assert manifest["started_utc"] <= manifest["finished_utc"]

    def test_rerun_is_byte_identical_except_manifest(self, dataset_dir,
                                                     tmp_path):
        out = tmp_path / "again"
        assert run("gen-data", "--case", TOY_CASE, "--out", out,
                   "--hours", 60, "--congested-lines", 1, "--seed", 3) == 0
        for p in sorted(out.rglob("*")):
            if not p.is_file() or p.name == "manifest.json":
                continue
            twin = dataset_dir / p.relative_to(out)
            assert twin.read_bytes() == p.read_bytes(), p.name

    def test_years_and_hours_conflict(self, tmp_path):
        assert run("gen-data", "--case", TOY_CASE, "--out", tmp_path / "x",
                   "--years", 1, "--hours", 10) == 2

    def test_refuses_nonempty_out_without_force(self, dataset_dir, capsys):
        before = sorted(p.name for p in dataset_dir.iterdir())
        assert run("gen-data", "--case", TOY_CASE, "--out", dataset_dir,
                   "--hours", 4) == 2
        assert "--force" in capsys.readouterr().err
        assert sorted(p.name for p in dataset_dir.iterdir()) == before

    def test_bad_case_dir(self, tmp_path):
        assert run("gen-data", "--case", tmp_path / "nope",
                   "--out", tmp_path / "x", "--hours", 4) == 2

    def test_env_caps_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LMPCAST_THREADS", "1")
        out = tmp_path / "thr"
        assert run("gen-data", "--case", TOY_CASE, "--out", out, "--hours", 8,
                   "--threads", 7, "--congested-lines", 1) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["threads"] == 1

    def test_env_cap_must_be_integer(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LMPCAST_THREADS", "many")
        assert run("gen-data", "--case", TOY_CASE, "--out", tmp_path / "x",
                   "--hours", 4) == 2

    def test_solver_failures_exit_three(self, tmp_path, capsys):
        starved = GridGraph(
            node_count=2,
            edges=(Edge(0, 1, susceptance=10.0, flow_limit=float("inf")),),
            generators=(Generator(node=0, g_min=0.0, g_max=1.0,
                                  c20=0.01, c10=10.0),),
            slack_node=0)
        case = write_case_dir(starved, tmp_path / "starved")
        assert run("gen-data", "--case", case, "--out", tmp_path / "out",
                   "--hours", 6, "--congested-lines", 0) == 3
        assert "failed to solve" in capsys.readouterr().err


class TestTrain:
    def test_outputs_and_manifest(self, gcn_ckpt):
        out = gcn_ckpt.parent
        for name in ("best.ckpt", "final.ckpt", "history.csv", "manifest.json"):
            assert (out / name).is_file(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["model"] == "gcn"
        assert manifest["config"]["epochs"] == 2
        assert manifest["config"]["lr"] == pytest.approx(1e-3)

    def test_retrain_reproduces_checkpoints(self, dataset_dir, gcn_ckpt,
                                            tmp_path):
        out = tmp_path / "re"
        assert run("train", "--data", dataset_dir, "--model", "gcn",
                   "--out", out, "--epochs", 2, "--lr", 1e-3,
                   "--channels", 8, "--mu-width", 4, "--seed", 1) == 0
        for name in ("best.ckpt", "final.ckpt", "history.csv"):
            assert ((out / name).read_bytes()
                    == (gcn_ckpt.parent / name).read_bytes()), name

    def test_config_file_precedence(self, dataset_dir, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("epochs = 5\nlr = 0.001  # comment\nchannels = 8\n"
                       "mu_width = 4\n\n# full-line comment\n")
        out = tmp_path / "out"
        assert run("train", "--data", dataset_dir, "--model", "gcn",
                   "--out", out, "--config", cfg, "--epochs", 1,
                   "--seed", 1) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 1      # flag beats file
        assert manifest["config"]["lr"] == 0.001      # file beats default
        assert manifest["config"]["channels"] == 8
        assert manifest["config"]["seed"] == 1

    def test_unknown_config_key(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_factor = 9\n")
        assert run("train", "--data", dataset_dir, "--model", "gcn",
                   "--out", tmp_path / "x", "--config", cfg) == 2
        assert "warp_factor" in capsys.readouterr().err

    def test_malformed_config_line(self, dataset_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs\n")
        assert run("train", "--data", dataset_dir, "--model", "gcn",
                   "--out", tmp_path / "x", "--config", cfg) == 2

    def test_mlp_needs_node(self, dataset_dir, tmp_path, capsys):
        assert run("train", "--data", dataset_dir, "--model", "mlp",
                   "--out", tmp_path / "x", "--epochs", 1) == 2
        assert "--node" in capsys.readouterr().err

    def test_mlp_trains_with_node(self, dataset_dir, tmp_path):
        out = tmp_path / "mlp"
        assert run("train", "--data", dataset_dir, "--model", "mlp",
                   "--out", out, "--epochs", 1, "--node", 2,
                   "--channels", 8, "--mu-width", 4, "--t-hist", 4,
                   "--seed", 1) == 0
        loaded = load_model_checkpoint(out / "best.ckpt")
        assert loaded.spec.kind == "mlp"
        assert loaded.spec.node == 2


class TestEval:
    def test_artifacts(self, eval_dir, dataset_dir):
        metrics = json.loads((eval_dir / "metrics.json").read_text())
        for key in ("mae", "rmse", "mape_pct", "s_accuracy_pct", "windows"):
            assert key in metrics, key
        assert metrics["part"] == "test"
        split = json.loads((dataset_dir / "split.json").read_text())
        expected = split["test"][1] - split["test"][0]
        assert metrics["windows"] == expected
        pred_lines = (eval_dir / "pred_lmp.csv").read_text().splitlines()
        assert pred_lines[0] == "hour,s_hat,0,1,2"
        assert len(pred_lines) == 1 + expected
        per_node = (eval_dir / "per_node.csv").read_text().splitlines()
        assert per_node[0] == "node,mae,rmse"
        assert len(per_node) == 1 + 3

    def test_stdout_summary(self, dataset_dir, gcn_ckpt, tmp_path, capsys):
        assert run("eval", "--data", dataset_dir, "--ckpt", gcn_ckpt,
                   "--out", tmp_path / "ev") == 0
        text = capsys.readouterr().out
        assert "MAE" in text and "RMSE" in text and "s-acc" in text

    def test_train_split_evaluation(self, dataset_dir, gcn_ckpt, tmp_path):
        out = tmp_path / "ev"
        assert run("eval", "--data", dataset_dir, "--ckpt", gcn_ckpt,
                   "--out", out, "--part", "train") == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["part"] == "train"

    def test_missing_checkpoint(self, dataset_dir, tmp_path):
        assert run("eval", "--data", dataset_dir,
                   "--ckpt", tmp_path / "missing.ckpt",
                   "--out", tmp_path / "x") == 2


class TestPredict:
    def test_forecast_rows(self, dataset_dir, gcn_ckpt, tmp_path):
        out = tmp_path / "pr"
        assert run("predict", "--ckpt", gcn_ckpt,
                   "--loads", dataset_dir / "loads.csv", "--out", out) == 0
        lines = (out / "predictions.csv").read_text().splitlines()
        # gcn history is one hour: rows 1..60 plus the one-step-ahead forecast
        assert lines[0] == "hour,s_hat,0,1,2"
        assert len(lines) == 1 + 60
        assert lines[1].split(",")[0] == "1"
        assert lines[-1].split(",")[0] == "60"

    def test_wrong_column_count(self, gcn_ckpt, tmp_path):
        bad = tmp_path / "loads.csv"
        bad.write_text("0,1\n5.0,6.0\n7.0,8.0\n")
        assert run("predict", "--ckpt", gcn_ckpt, "--loads", bad,
                   "--out", tmp_path / "x") == 2

    def test_too_little_history(self, astgcn_ckpt, tmp_path):
        bad = tmp_path / "loads.csv"
        bad.write_text("0,1,2\n5.0,6.0,7.0\n")  # astgcn needs 4 rows
        assert run("predict", "--ckpt", astgcn_ckpt, "--loads", bad,
                   "--out", tmp_path / "x") == 2


class TestExportAttention:
    def test_mask_files(self, dataset_dir, astgcn_ckpt, tmp_path):
        out = tmp_path / "att"
        assert run("export-attention", "--ckpt", astgcn_ckpt,
                   "--data", dataset_dir, "--sample", 2, "--out", out) == 0
        names = sorted(p.name for p in out.iterdir())
        expected = sorted(
            [f"{b}_{kind}_mask.{ext}" for b in ("lam", "s", "mu")
             for kind in ("temporal", "spatial") for ext in ("csv", "svg")]
            + ["manifest.json"])
        assert names == expected
        temporal = read_matrix_csv(out / "lam_temporal_mask.csv")
        assert temporal.shape == (4, 4)
        assert temporal.sum(axis=1) == pytest.approx(np.ones(4), abs=1e-12)
        spatial = read_matrix_csv(out / "mu_spatial_mask.csv")
        assert spatial.shape == (3, 3)
        assert spatial.sum(axis=1) == pytest.approx(np.ones(3), abs=1e-12)

    def test_gcn_checkpoint_refused(self, dataset_dir, gcn_ckpt, tmp_path,
                                    capsys):
        assert run("export-attention", "--ckpt", gcn_ckpt,
                   "--data", dataset_dir, "--out", tmp_path / "x") == 2
        assert "no attention" in capsys.readouterr().err

    def test_sample_out_of_range(self, dataset_dir, astgcn_ckpt, tmp_path):
        assert run("export-attention", "--ckpt", astgcn_ckpt,
                   "--data", dataset_dir, "--sample", 10_000,
                   "--out", tmp_path / "x") == 2


class TestPlot:
    def test_series_artifacts(self, eval_dir, tmp_path):
        out = tmp_path / "plt"
        assert run("plot", "--pred", eval_dir / "pred_lmp.csv",
                   "--gt", eval_dir / "gt_lmp.csv", "--node", 1,
                   "--out", out) == 0
        assert (out / "series_node1.csv").is_file()
        assert (out / "series_node1.svg").is_file()
        lines = (out / "series_node1.csv").read_text().splitlines()
        gt_rows = len((eval_dir / "gt_lmp.csv").read_text().splitlines()) - 1
        assert len(lines) == 1 + gt_rows

    def test_row_window(self, eval_dir, tmp_path):
        out = tmp_path / "plt"
        assert run("plot", "--pred", eval_dir / "pred_lmp.csv",
                   "--gt", eval_dir / "gt_lmp.csv", "--node", 0,
                   "--start", 2, "--end", 7, "--out", out) == 0
        lines = (out / "series_node0.csv").read_text().splitlines()
        assert len(lines) == 1 + 5

    def test_node_out_of_range(self, eval_dir, tmp_path):
        assert run("plot", "--pred", eval_dir / "pred_lmp.csv",
                   "--gt", eval_dir / "gt_lmp.csv", "--node", 7,
                   "--out", tmp_path / "x") == 2

    def test_mismatched_inputs(self, eval_dir, tmp_path):
        short = tmp_path / "short.csv"
        lines = (eval_dir / "pred_lmp.csv").read_text().splitlines()
        short.write_text("\n".join(lines[:-2]) + "\n")
        assert run("plot", "--pred", short, "--gt", eval_dir / "gt_lmp.csv",
                   "--node", 0, "--out", tmp_path / "x") == 2


class TestUsageErrors:
    def test_unknown_command(self):
        assert run("transmogrify") == 1

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 1
        assert "gen-data" in capsys.readouterr().err

    def test_missing_required_flag(self):
        assert run("train", "--data", "x") == 1

    def test_unknown_flag(self):
        assert run("gen-data", "--case", TOY_CASE, "--out", "x",
                   "--warp", 9) == 1

    def test_help_exits_zero(self):
        assert run("--help") == 0
        assert run("train", "--help") == 0

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "lmpcast.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout
