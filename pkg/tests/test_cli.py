import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qatlab.checkpoint import checkpoint_to_network, load_checkpoint
from qatlab.cli import main
from qatlab.training import evaluate


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_manifest(run_dir):
    with open(run_dir / "manifest.json") as fh:
        return json.load(fh)


TRAIN_ARGS = [
    "--set", "seeds=[0]",
    "--set", "epochs=2",
    "--set", "pretrain_epochs=2",
    "--set", "dataset.n=300",
]


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cliruns")
    assert main(["train", "--out", str(out)] + TRAIN_ARGS) == 0
    return out


class TestToy:
    def test_trace_schema(self, tmp_path):
        assert main(["toy", "--out", str(tmp_path), "--set", "toy.steps=200",
                     "--set", "seeds=[3]"]) == 0
        header, rows = read_csv(tmp_path / "toy-seed3" / "toy_trace.csv")
        assert header == ["iter", "w_0", "w_1", "w_2", "q_w_0", "q_w_1", "q_w_2",
                          "s_w", "s_x", "loss", "flips"]
        assert len(rows) == 200
        assert [r[0] for r in rows[:3]] == ["0", "1", "2"]
        flips = [int(r[-1]) for r in rows]
        assert flips == sorted(flips)  # cumulative count never decreases
        assert flips[-1] > 0  # the default problem oscillates

    def test_manifest(self, tmp_path):
        main(["toy", "--out", str(tmp_path), "--set", "toy.steps=100"])
        m = read_manifest(tmp_path / "toy-seed0")
        assert m["status"] == "ok"
        assert m["artifacts"] == ["toy_trace.csv"]
        assert 0.0 <= m["final"]["mean_flip_frequency"] <= 1.0
        assert m["config_hash"] == m["config_hash"].lower()
        assert len(m["config_hash"]) == 64


class TestTrain:
    def test_metrics_and_manifest(self, train_run):
        header, rows = read_csv(train_run / "train-seed0" / "metrics.csv")
        assert header == ["epoch", "train_loss", "eval_loss", "eval_accuracy",
                          "ema_eval_loss", "ema_eval_accuracy"]
        assert len(rows) == 2
        m = read_manifest(train_run / "train-seed0")
        assert m["status"] == "ok"
        assert m["method"] == "ema"
        assert m["bits_w"] == 4
        assert set(m["artifacts"]) == {"checkpoint.qat", "metrics.csv"}

    def test_checkpoint_loads(self, train_run):
        ckpt = load_checkpoint(train_run / "train-seed0" / "checkpoint.qat")
        net, ema = checkpoint_to_network(ckpt)
        assert ema is not None and ema.shadows
        assert ckpt.config["experiment"]["dataset"]["n"] == 300

    def test_multiple_seeds_get_own_dirs(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "seeds=[0,1]",
                     "--set", "epochs=1", "--set", "pretrain_epochs=1",
                     "--set", "dataset.n=200"]) == 0
        assert (tmp_path / "train-seed0" / "metrics.csv").exists()
        assert (tmp_path / "train-seed1" / "metrics.csv").exists()
        a = read_csv(tmp_path / "train-seed0" / "metrics.csv")[1]
        b = read_csv(tmp_path / "train-seed1" / "metrics.csv")[1]
        assert a != b  # different seed, different trajectory

    def test_rerun_is_byte_identical(self, train_run, tmp_path):
        """Same config and seed must reproduce the metrics file exactly."""
        assert main(["train", "--out", str(tmp_path)] + TRAIN_ARGS) == 0
        first = (train_run / "train-seed0" / "metrics.csv").read_bytes()
        again = (tmp_path / "train-seed0" / "metrics.csv").read_bytes()
        assert first == again

    def test_method_label_tracks_config(self, tmp_path):
        main(["train", "--out", str(tmp_path), "--set", "seeds=[0]",
              "--set", "epochs=1", "--set", "pretrain_epochs=0",
              "--set", "dataset.n=200", "--set", "ema.enabled=false",
              "--set", "dampening_lambda=0.1"])
        assert read_manifest(tmp_path / "train-seed0")["method"] == "dampening"


class TestEval:
    def test_matches_training_log(self, train_run, tmp_path):
        """Loading the checkpoint and evaluating reproduces the last
        logged eval metric exactly."""
        ckpt = str(train_run / "train-seed0" / "checkpoint.qat")
        assert main(["eval", "--out", str(tmp_path), "--set", f"checkpoint={ckpt}"]) == 0
        header, rows = read_csv(tmp_path / "eval-seed0" / "eval.csv")
        assert header == ["mode", "loss", "accuracy"]
        _, train_rows = read_csv(train_run / "train-seed0" / "metrics.csv")
        assert rows[0][1] == train_rows[-1][2]  # same repr, same float

    def test_ema_mode_matches_log(self, train_run, tmp_path):
        ckpt = str(train_run / "train-seed0" / "checkpoint.qat")
        main(["eval", "--out", str(tmp_path), "--set", f"checkpoint={ckpt}",
              "--set", "eval_mode=ema_quantized"])
        _, rows = read_csv(tmp_path / "eval-seed0" / "eval.csv")
        _, train_rows = read_csv(train_run / "train-seed0" / "metrics.csv")
        assert rows[0][1] == train_rows[-1][4]

    def test_ema_eval_without_shadows_fails(self, tmp_path):
        main(["train", "--out", str(tmp_path), "--set", "seeds=[0]",
              "--set", "epochs=1", "--set", "pretrain_epochs=0",
              "--set", "dataset.n=200", "--set", "ema.enabled=false"])
        ckpt = str(tmp_path / "train-seed0" / "checkpoint.qat")
        code = main(["eval", "--out", str(tmp_path), "--set", f"checkpoint={ckpt}",
                     "--set", "eval_mode=ema_quantized"])
        assert code == 3
        assert read_manifest(tmp_path / "eval-seed0")["status"] == "failed"


@pytest.fixture(scope="module")
def qc_run(train_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("qcruns")
    ckpt = str(train_run / "train-seed0" / "checkpoint.qat")
    assert main(["qc", "--out", str(out), "--set", f"checkpoint={ckpt}",
                 "--set", "qc.lr=0.001"]) == 0
    return out


class TestQcFold:
    def test_qc_metrics(self, qc_run):
        header, rows = read_csv(qc_run / "qc-seed0" / "qc_metrics.csv")
        assert header[:4] == ["calib_loss_before", "calib_loss_after",
                              "eval_loss_before", "eval_loss_after"]
        vals = [float(v) for v in rows[0]]
        assert all(np.isfinite(vals))
        assert read_manifest(qc_run / "qc-seed0")["method"] == "ema_qc"

    def test_qc_checkpoint_consistent(self, qc_run, train_run):
        ckpt = load_checkpoint(qc_run / "qc-seed0" / "qc_checkpoint.qat")
        net, _ = checkpoint_to_network(ckpt)
        assert any(l.qc_gamma is not None for l in net.layers)
        # dataset spec rides along so downstream tasks rebuild the same data
        assert ckpt.config["experiment"]["dataset"]["n"] == 300

    def test_fold_report(self, qc_run, tmp_path):
        ckpt = str(qc_run / "qc-seed0" / "qc_checkpoint.qat")
        assert main(["fold", "--out", str(tmp_path), "--set", f"checkpoint={ckpt}"]) == 0
        header, rows = read_csv(tmp_path / "fold-seed0" / "fold_report.csv")
        row = dict(zip(header, [float(v) for v in rows[0]]))
        assert row["max_abs_output_diff"] <= 1e-6
        assert abs(row["eval_loss_after"] - row["eval_loss_before"]) <= 1e-6
        folded, _ = checkpoint_to_network(
            load_checkpoint(tmp_path / "fold-seed0" / "folded_checkpoint.qat"))
        assert all(l.bn is None for l in folded.layers)


class TestAblate:
    def test_qc_grid(self, train_run, tmp_path):
        ckpt = str(train_run / "train-seed0" / "checkpoint.qat")
        assert main(["ablate", "--out", str(tmp_path), "--set", f"checkpoint={ckpt}"]) == 0
        header, rows = read_csv(tmp_path / "ablate-seed0" / "ablation.csv")
        assert header[:2] == ["granularity", "variant"]
        cells = {(r[0], r[1]) for r in rows}
        assert cells == {(g, v) for g in ("per_channel", "per_tensor")
                         for v in ("scale", "shift", "both")}

    def test_ema_decay_sweep(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--set", "ablate_kind=ema_decay",
                     "--set", "ema_alphas=[0.9,0.99]", "--set", "seeds=[0]",
                     "--set", "epochs=1", "--set", "pretrain_epochs=1",
                     "--set", "dataset.n=200"]) == 0
        header, rows = read_csv(tmp_path / "ablate-seed0" / "ema_decay.csv")
        assert header[0] == "alpha"
        assert [r[0] for r in rows] == ["0.9", "0.99"]
        # live result is alpha-independent; the shadows differ
        live = {r[2] for r in rows}
        shadow = {r[4] for r in rows}
        assert len(live) == 1 and len(shadow) == 2


class TestReport:
    def test_aggregates_mean_and_spread(self, tmp_path):
        for seed in (0, 1):
            main(["train", "--out", str(tmp_path), "--set", f"seeds=[{seed}]",
                  "--set", "epochs=1", "--set", "pretrain_epochs=1",
                  "--set", "dataset.n=200"])
        runs = [str(tmp_path / f"train-seed{s}") for s in (0, 1)]
        assert main(["report", "--out", str(tmp_path)] + runs) == 0
        header, rows = read_csv(tmp_path / "report" / "report.csv")
        assert header == ["method", "bits_w", "metric", "runs", "mean", "spread"]
        assert len(rows) == 1
        accs = [float(read_manifest(tmp_path / f"train-seed{s}")["final"]["eval_accuracy"])
                for s in (0, 1)]
        row = rows[0]
        assert row[:4] == ["ema", "4", "eval_accuracy", "2"]
        assert float(row[4]) == pytest.approx(np.mean(accs))
        assert float(row[5]) == pytest.approx(np.std(accs))

    def test_missing_runs_are_skipped(self, train_run, tmp_path):
        runs = [str(train_run / "train-seed0"), str(tmp_path / "never-ran")]
        assert main(["report", "--out", str(tmp_path)] + runs) == 0
        _, rows = read_csv(tmp_path / "report" / "report.csv")
        assert len(rows) == 1 and rows[0][3] == "1"

    def test_empty_input_gives_header_only(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == 0
        header, rows = read_csv(tmp_path / "report" / "report.csv")
        assert header[0] == "method" and rows == []


class TestErrors:
    def test_unknown_config_key(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "lernrate=0.1"]) == 2

    def test_bad_json_config_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{oops")
        assert main(["train", "--config", str(p)]) == 2

    def test_config_file_plus_override(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"toy": {"steps": 50}}))
        assert main(["toy", "--config", str(p), "--out", str(tmp_path),
                     "--set", "toy.steps=60"]) == 0
        _, rows = read_csv(tmp_path / "toy-seed0" / "toy_trace.csv")
        assert len(rows) == 60

    def test_bare_long_override(self, tmp_path):
        """--key=value without --set also lands in the config."""
        assert main(["toy", "--out", str(tmp_path), "--toy.steps=40"]) == 0
        _, rows = read_csv(tmp_path / "toy-seed0" / "toy_trace.csv")
        assert len(rows) == 40

    def test_stray_argument(self):
        assert main(["train", "oops"]) == 2

    def test_no_task(self):
        assert main([]) == 2

    def test_missing_checkpoint_path(self, tmp_path):
        assert main(["fold", "--out", str(tmp_path)]) == 2

    def test_cnn_needs_16_features(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "network=cnn",
                     "--set", "dataset.dim=4"]) == 2


def test_module_entry_point(tmp_path):
    """python -m qatlab.cli behaves like main()."""
    proc = subprocess.run(
        [sys.executable, "-m", "qatlab.cli", "toy", "--out", str(tmp_path),
         "--set", "toy.steps=30"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "toy-seed0" / "toy_trace.csv").exists()
