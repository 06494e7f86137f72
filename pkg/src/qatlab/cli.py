"""Command-line front end: runs experiments and writes self-describing
run directories (metrics CSV, checkpoints, manifest)."""

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (
    checkpoint_to_network,
    load_checkpoint,
    network_to_checkpoint,
    save_checkpoint,
)
from .config import (
    ExperimentConfig,
    config_hash,
    config_to_dict,
    resolve_config,
)
from .datasets import (
    Dataset,
    gen_classification,
    gen_regression,
    load_csv,
    load_idx,
    make_calibration,
)
from .ema import materialize_ema
from .network import build_cnn, build_mlp, forward
from .numeric import Rng
from .oscillation import ToyProblem, flip_frequency, run_toy
from .qc import QCConfig, absorb_corrections, fit_qc, fold_network, qc_ablation
from .training import (
    TrainConfig,
    attach_quantizers,
    evaluate,
    shape_inputs,
    train_latent,
    train_qat,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

OUT_ENV = "QATLAB_OUT"

# Canonical order for metrics columns and report method rows.
METRIC_COLUMNS = (
    "epoch",
    "train_loss",
    "eval_loss",
    "eval_accuracy",
    "ema_eval_loss",
    "ema_eval_accuracy",
)
METHOD_ORDER = ("plain", "dampening", "ema", "qc", "ema_qc")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                w.writerow([_fmt(row.get(col)) for col in header])
            else:
                w.writerow([_fmt(v) for v in row])


def out_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir or os.environ.get(OUT_ENV, "runs"))


def run_dir_for(cfg: ExperimentConfig, seed) -> Path:
    name = cfg.task if seed is None else f"{cfg.task}-seed{seed}"
    d = out_root(cfg) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(run_dir, cfg, seed, wall, artifacts, status="ok", error=None, **extra):
    manifest = {
        "package_version": __version__,
        "task": cfg.task,
        "seed": seed,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "status": status,
        "wall_time_s": wall,
        "artifacts": sorted(artifacts),
    }
    if error is not None:
        manifest["error"] = error
    manifest.update(extra)
    with open(Path(run_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def build_dataset(spec: dict) -> Dataset:
    kind = spec["kind"]
    seed = spec.get("seed", 0)
    frac = {
        "eval_fraction": spec.get("eval_fraction", 0.2),
        "calib_fraction": spec.get("calib_fraction", 0.1),
    }
    if kind in ("blobs", "spirals"):
        return gen_classification(
            seed=seed,
            n=spec.get("n", 1000),
            classes=spec.get("classes", 3),
            mode=kind,
            dim=spec.get("dim", 2),
            noise=spec.get("noise", 1.0),
            separation=spec.get("separation", 6.0),
            **frac,
        )
    if kind == "regression":
        return gen_regression(
            seed=seed,
            n=spec.get("n", 1000),
            dim=spec.get("dim", 8),
            teacher=tuple(spec.get("teacher", (16,))),
            noise=spec.get("noise", 0.05),
            **frac,
        )
    if kind == "idx":
        d = load_idx(
            spec["path"],
            spec.get("labels_path"),
            eval_fraction=frac["eval_fraction"],
            seed=seed,
        )
        return make_calibration(d, frac["calib_fraction"], seed)
    if kind == "csv":
        d = load_csv(
            spec["path"],
            {"target": spec.get("target", "target"), "task": spec.get("task", "regression")},
            eval_fraction=frac["eval_fraction"],
            seed=seed,
        )
        return make_calibration(d, frac["calib_fraction"], seed)
    raise ValueError(f"unknown dataset kind {kind!r}")


def build_network(cfg: ExperimentConfig, dataset: Dataset, seed: int):
    rng = Rng(seed).child("init")
    in_dim = dataset.inputs.shape[1]
    if dataset.task == "classification":
        out_dim = int(dataset.targets.max()) + 1
        loss = "softmax_ce"
    else:
        out_dim = dataset.targets.shape[1]
        loss = "mse"
    if cfg.network == "mlp":
        return build_mlp(in_dim, out_dim, rng=rng, loss=loss)
    if in_dim != 16:
        raise ValueError("the cnn network expects 16-feature rows shaped to 1x4x4")
    return build_cnn(in_shape=(1, 4, 4), out_dim=out_dim, rng=rng, loss=loss)


def method_name(cfg: ExperimentConfig) -> str:
    if cfg.dampening_lambda > 0:
        return "dampening"
    if cfg.ema.get("enabled", True):
        return "ema"
    return "plain"


def _history_columns(history):
    present = set()
    for row in history:
        present.update(row)
    return [c for c in METRIC_COLUMNS if c in present]


def flip_stats(tracker):
    if tracker.recorded < 2:
        return {"mean_flip_frequency": 0.0, "oscillating_fraction": 0.0}
    freq = flip_frequency(tracker)
    return {
        "mean_flip_frequency": float(freq.mean()),
        "oscillating_fraction": float((freq > 0.05).mean()),
    }


def _per_seed(cfg, work):
    """Run ``work(seed, run_dir)`` for every seed; a failing seed gets a
    flagged manifest over whatever partial artifacts it left, then the
    original error propagates so the exit code reflects its kind."""
    for seed in cfg.seeds:
        run_dir = run_dir_for(cfg, seed)
        start = time.perf_counter()
        try:
            work(seed, run_dir)
        except (ValueError, RuntimeError, OSError) as exc:
            wall = time.perf_counter() - start
            existing = [p.name for p in run_dir.iterdir() if p.name != "manifest.json"]
            write_manifest(
                run_dir, cfg, seed, wall, existing, status="failed", error=str(exc)
            )
            raise


def task_toy(cfg: ExperimentConfig):
    problem = ToyProblem(**cfg.toy)

    def work(seed, run_dir):
        start = time.perf_counter()
        trace, tracker = run_toy(problem, use_ema=True, rng=Rng(seed))
        n = trace["w"].shape[1]
        header = (
            ["iter"]
            + [f"w_{i}" for i in range(n)]
            + [f"q_w_{i}" for i in range(n)]
            + ["s_w", "s_x", "loss", "flips"]
        )
        codes = trace["codes"]
        per_step_flips = np.zeros(len(codes), dtype=np.int64)
        per_step_flips[1:] = (codes[1:] != codes[:-1]).sum(axis=1)
        cum_flips = np.cumsum(per_step_flips)
        rows = []
        for t in range(len(codes)):
            rows.append(
                [t]
                + list(trace["w"][t])
                + list(trace["q_w"][t])
                + [trace["s_w"][t], trace["s_x"][t], trace["loss"][t], cum_flips[t]]
            )
        write_csv(run_dir / "toy_trace.csv", header, rows)
        stats = flip_stats(tracker)
        write_manifest(
            run_dir,
            cfg,
            seed,
            time.perf_counter() - start,
            ["toy_trace.csv"],
            final={
                "final_loss": float(trace["loss"][-1]),
                "final_eval_loss": float(trace["final_eval_loss"]),
                "final_eval_loss_ema": float(trace["final_eval_loss_ema"]),
                **stats,
            },
        )

    _per_seed(cfg, work)


def task_train(cfg: ExperimentConfig):
    dataset = build_dataset(cfg.dataset)

    def work(seed, run_dir):
        start = time.perf_counter()
        net = build_network(cfg, dataset, seed)
        if cfg.pretrain_epochs:
            train_latent(net, dataset, cfg.pretrain_epochs, cfg.batch, cfg.lr, seed)
        qnet = attach_quantizers(
            net,
            dataset.calib_x,
            bits_w=cfg.bits_w,
            bits_a=cfg.bits_a,
            first_last_bits=cfg.first_last_bits,
            granularity=cfg.granularity,
        )
        tcfg = TrainConfig(
            epochs=cfg.epochs,
            batch=cfg.batch,
            lr=cfg.lr,
            ema_enabled=cfg.ema.get("enabled", True),
            ema_alpha=cfg.ema.get("alpha", 0.999),
            ema_warmup_frac=cfg.ema.get("warmup_frac", 0.01),
            dampening_lambda=cfg.dampening_lambda,
            seed=seed,
        )
        qnet, ema, tracker, history = train_qat(qnet, dataset, tcfg)
        write_csv(run_dir / "metrics.csv", _history_columns(history), history)
        save_checkpoint(
            run_dir / "checkpoint.qat",
            network_to_checkpoint(qnet, _snapshot(cfg, seed, cfg.dataset), ema),
        )
        final = dict(history[-1]) if history else {}
        final.update(flip_stats(tracker))
        write_manifest(
            run_dir,
            cfg,
            seed,
            time.perf_counter() - start,
            ["metrics.csv", "checkpoint.qat"],
            method=method_name(cfg),
            bits_w=cfg.bits_w,
            final=final,
        )

    _per_seed(cfg, work)


def _load_source_net(cfg: ExperimentConfig):
    """Load the checkpoint and pick the live or EMA-materialized network."""
    if not cfg.checkpoint:
        raise ValueError(f"the {cfg.task} task needs a checkpoint path")
    ckpt = load_checkpoint(cfg.checkpoint)
    net, ema = checkpoint_to_network(ckpt)
    source = cfg.qc.get("source", "ema")
    if cfg.task in ("qc", "ablate") and source == "ema":
        if ema is None or not ema.shadows:
            raise RuntimeError("checkpoint has no EMA shadows to correct from")
        net = materialize_ema(net, ema)
    return ckpt, net, ema


def _dataset_for_checkpoint(cfg: ExperimentConfig, ckpt):
    """The dataset the checkpoint was trained on, falling back to the
    current config.  Returns (spec, dataset) so the spec can be carried
    into checkpoints written downstream."""
    spec = ckpt.config.get("experiment", {}).get("dataset") or cfg.dataset
    return spec, build_dataset(spec)


def _snapshot(cfg: ExperimentConfig, seed, dataset_spec) -> dict:
    return {
        "experiment": {**config_to_dict(cfg), "dataset": dict(dataset_spec)},
        "seed": seed,
    }


def task_qc(cfg: ExperimentConfig):
    ckpt, net, _ = _load_source_net(cfg)
    dataset_spec, dataset = _dataset_for_checkpoint(cfg, ckpt)
    qcfg = QCConfig(
        lr=cfg.qc.get("lr", 1e-4),
        granularity=cfg.qc.get("granularity", "per_channel"),
        use_scale=cfg.qc.get("use_scale", True),
        use_shift=cfg.qc.get("use_shift", True),
        batch=cfg.qc.get("batch", 32),
    )

    def work(seed, run_dir):
        start = time.perf_counter()
        calib_before = evaluate(net, dataset.calib_x, dataset.calib_y)
        eval_before = evaluate(net, dataset.eval_x, dataset.eval_y)
        corrected, _params = fit_qc(net, dataset.calib_x, dataset.calib_y, qcfg, seed=seed)
        calib_after = evaluate(corrected, dataset.calib_x, dataset.calib_y)
        eval_after = evaluate(corrected, dataset.eval_x, dataset.eval_y)
        row = {
            "calib_loss_before": calib_before["loss"],
            "calib_loss_after": calib_after["loss"],
            "eval_loss_before": eval_before["loss"],
            "eval_loss_after": eval_after["loss"],
        }
        if "accuracy" in eval_after:
            row["eval_accuracy_before"] = eval_before["accuracy"]
            row["eval_accuracy_after"] = eval_after["accuracy"]
        write_csv(run_dir / "qc_metrics.csv", list(row), [row])
        save_checkpoint(
            run_dir / "qc_checkpoint.qat",
            network_to_checkpoint(corrected, _snapshot(cfg, seed, dataset_spec)),
        )
        source = cfg.qc.get("source", "ema")
        write_manifest(
            run_dir,
            cfg,
            seed,
            time.perf_counter() - start,
            ["qc_metrics.csv", "qc_checkpoint.qat"],
            method="ema_qc" if source == "ema" else "qc",
            bits_w=ckpt.config.get("experiment", {}).get("bits_w", cfg.bits_w),
            final=row,
        )

    _per_seed(cfg, work)


def task_fold(cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise ValueError("the fold task needs a checkpoint path")
    ckpt = load_checkpoint(cfg.checkpoint)
    net, _ = checkpoint_to_network(ckpt)
    dataset_spec, dataset = _dataset_for_checkpoint(cfg, ckpt)

    def work(seed, run_dir):
        start = time.perf_counter()
        frozen = net.copy()
        for layer in frozen.layers:
            if layer.bn is not None:
                layer.bn.mode = "eval"
        merged = absorb_corrections(frozen)
        folded = fold_network(merged)
        x = shape_inputs(dataset.eval_x, net.input_shape)
        diff = float(
            np.abs(
                forward(folded, x, "quantized") - forward(frozen, x, "quantized")
            ).max()
        )
        before = evaluate(frozen, dataset.eval_x, dataset.eval_y)
        after = evaluate(folded, dataset.eval_x, dataset.eval_y)
        row = {
            "max_abs_output_diff": diff,
            "eval_loss_before": before["loss"],
            "eval_loss_after": after["loss"],
        }
        if "accuracy" in after:
            row["eval_accuracy_before"] = before["accuracy"]
            row["eval_accuracy_after"] = after["accuracy"]
        write_csv(run_dir / "fold_report.csv", list(row), [row])
        save_checkpoint(
            run_dir / "folded_checkpoint.qat",
            network_to_checkpoint(folded, _snapshot(cfg, seed, dataset_spec)),
        )
        write_manifest(
            run_dir,
            cfg,
            seed,
            time.perf_counter() - start,
            ["fold_report.csv", "folded_checkpoint.qat"],
            final=row,
        )

    _per_seed(cfg, work)


def task_eval(cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise ValueError("the eval task needs a checkpoint path")
    ckpt = load_checkpoint(cfg.checkpoint)
    net, ema = checkpoint_to_network(ckpt)
    _, dataset = _dataset_for_checkpoint(cfg, ckpt)

    def work(seed, run_dir):
        start = time.perf_counter()
        target, mode = net, cfg.eval_mode
        if mode == "ema_quantized":
            if ema is None or not ema.shadows:
                raise RuntimeError("checkpoint has no EMA shadows to evaluate")
            target, mode = materialize_ema(net, ema), "quantized"
        result = evaluate(
            target, dataset.eval_x, dataset.eval_y, mode=mode, k=cfg.soft_round_k
        )
        row = {"mode": cfg.eval_mode, "loss": result["loss"]}
        if "accuracy" in result:
            row["accuracy"] = result["accuracy"]
        write_csv(run_dir / "eval.csv", list(row), [row])
        write_manifest(
            run_dir,
            cfg,
            seed,
            time.perf_counter() - start,
            ["eval.csv"],
            final=row,
        )

    _per_seed(cfg, work)


def task_ablate(cfg: ExperimentConfig):
    if cfg.ablate_kind == "qc":
        ckpt, net, _ = _load_source_net(cfg)
        _, dataset = _dataset_for_checkpoint(cfg, ckpt)

        def work(seed, run_dir):
            start = time.perf_counter()
            table = qc_ablation(
                net,
                dataset,
                lr=cfg.qc.get("lr", 1e-4),
                batch=cfg.qc.get("batch", 32),
                seed=seed,
            )
            header = [
                "granularity",
                "variant",
                "calib_loss_before",
                "calib_loss_after",
                "eval_loss",
                "eval_accuracy",
            ]
            rows = []
            for gran in sorted(table):
                for variant in ("scale", "shift", "both"):
                    cell = dict(table[gran][variant])
                    cell.update({"granularity": gran, "variant": variant})
                    rows.append(cell)
            write_csv(run_dir / "ablation.csv", header, rows)
            write_manifest(
                run_dir,
                cfg,
                seed,
                time.perf_counter() - start,
                ["ablation.csv"],
                final={"cells": len(rows)},
            )

        _per_seed(cfg, work)
        return

    dataset = build_dataset(cfg.dataset)

    def work(seed, run_dir):
        start = time.perf_counter()
        rows = []
        for alpha in cfg.ema_alphas:
            net = build_network(cfg, dataset, seed)
            if cfg.pretrain_epochs:
                train_latent(net, dataset, cfg.pretrain_epochs, cfg.batch, cfg.lr, seed)
            qnet = attach_quantizers(
                net,
                dataset.calib_x,
                bits_w=cfg.bits_w,
                bits_a=cfg.bits_a,
                first_last_bits=cfg.first_last_bits,
                granularity=cfg.granularity,
            )
            tcfg = TrainConfig(
                epochs=cfg.epochs,
                batch=cfg.batch,
                lr=cfg.lr,
                ema_alpha=alpha,
                ema_warmup_frac=cfg.ema.get("warmup_frac", 0.01),
                seed=seed,
            )
            _, _, _, history = train_qat(qnet, dataset, tcfg)
            row = {"alpha": alpha}
            row.update(history[-1])
            del row["epoch"]
            rows.append(row)
        header = ["alpha"] + [c for c in METRIC_COLUMNS if c != "epoch"]
        write_csv(run_dir / "ema_decay.csv", header, rows)
        write_manifest(
            run_dir,
            cfg,
            seed,
            time.perf_counter() - start,
            ["ema_decay.csv"],
            final={"alphas": list(cfg.ema_alphas)},
        )

    _per_seed(cfg, work)


def task_report(cfg: ExperimentConfig):
    groups = {}
    for run in cfg.runs:
        manifest_path = Path(run) / "manifest.json"
        if not manifest_path.exists():
            continue  # absent cell, not an error
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if manifest.get("status") != "ok" or "method" not in manifest:
            continue
        final = manifest.get("final", {})
        if "eval_accuracy" in final or "eval_accuracy_after" in final:
            metric = final.get("eval_accuracy_after", final.get("eval_accuracy"))
            metric_name = "eval_accuracy"
        else:
            metric = final.get("eval_loss_after", final.get("eval_loss"))
            metric_name = "eval_loss"
        if metric is None:
            continue
        key = (manifest["method"], manifest.get("bits_w"), metric_name)
        groups.setdefault(key, []).append(float(metric))

    header = ["method", "bits_w", "metric", "runs", "mean", "spread"]
    rows = []
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    for (method, bits, metric_name) in sorted(
        groups, key=lambda k: (order.get(k[0], 99), k[1] or 0, k[2])
    ):
        vals = np.asarray(groups[(method, bits, metric_name)])
        rows.append(
            {
                "method": method,
                "bits_w": bits,
                "metric": metric_name,
                "runs": len(vals),
                "mean": float(vals.mean()),
                "spread": float(vals.std()),
            }
        )
    run_dir = run_dir_for(cfg, None)
    start = time.perf_counter()
    write_csv(run_dir / "report.csv", header, rows)
    write_manifest(
        run_dir,
        cfg,
        None,
        time.perf_counter() - start,
        ["report.csv"],
        final={"rows": len(rows)},
    )


TASK_RUNNERS = {
    "toy": task_toy,
    "train": task_train,
    "qc": task_qc,
    "fold": task_fold,
    "ablate": task_ablate,
    "eval": task_eval,
    "report": task_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qatlab",
        description="Desk-scale laboratory for oscillation in quantization-aware training.",
    )
    sub = parser.add_subparsers(dest="task")
    for name in TASK_RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} task")
        p.add_argument("--config", help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (dotted paths allowed)",
        )
        p.add_argument("--out", help="output root directory")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to aggregate")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        ns, extra = parser.parse_known_args(argv)
    except SystemExit:
        return EXIT_CONFIG
    if ns.task is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    overrides = list(ns.set)
    for arg in extra:
        if arg.startswith("--") and "=" in arg:
            overrides.append(arg[2:])
        else:
            print(f"config error: unrecognized argument {arg!r}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        cfg = resolve_config(ns.config, overrides, forced_task=ns.task)
        if ns.out:
            cfg.out_dir = ns.out
        if ns.task == "report" and getattr(ns, "runs", None):
            cfg.runs = list(cfg.runs) + list(ns.runs)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        TASK_RUNNERS[cfg.task](cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
