"""Experiment runner: generate, train, evaluate, tune, gradcheck.

Every command is deterministic under ``--seed``: randomness flows from
that one root through named substreams (data, init, noise, tuning), so
re-running a pipeline reproduces datasets, weights and summary metrics
bit-identically.  Worker counts come from ``--threads`` (default: env
``DISTANA_THREADS``) and never change results, only wall time.

Exit codes: 0 success, 2 configuration error, 3 numeric error
(non-finite values), 4 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError
from . import autodiff as ad
from .config import PRESETS, ConfigError, ExperimentConfig, load_config, load_preset
from .core import (
    DistanaModel,
    full_model_gradcheck,
    load_weights,
    param_count,
)
from .rng import item_rng, substream
from .training import PAPER_MSE, evaluate, train, write_run_artifacts
from .tuning import (
    TuningConfig,
    evaluate_with_washin,
    export_context_csv,
    export_context_pgm,
    infer_context,
    ordering_report,
    train_with_parametric_bias,
)
from .wavegen import (
    TEST_SPEED_VALUES,
    TRAIN_SPEED_VALUES,
    ImpulseSpec,
    VelocityField,
    WaveDataset,
    add_noise,
    export_csv,
    generate_dataset,
    load_dataset,
    sample_velocity_field,
    save_dataset,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _default_threads() -> int:
    raw = os.environ.get("DISTANA_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        raise ConfigError(f"DISTANA_THREADS must be an integer, got {raw!r}")


def _file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _experiment_config(args, weights_path: Path | None = None) -> ExperimentConfig:
    """--config wins, then --preset, then the summary next to the
    weights (so evaluate/tune reuse the training run's settings), then
    schema defaults; --set overrides apply last."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = load_preset(args.preset)
    elif weights_path is not None and (weights_path.parent / "summary.json").exists():
        with open(weights_path.parent / "summary.json") as fh:
            cfg = ExperimentConfig.from_resolved(json.load(fh)["config"])
    else:
        cfg = ExperimentConfig.defaults()
    overrides = getattr(args, "set", None)
    if overrides:
        cfg.apply_overrides(overrides)
    return cfg


def _want_figures(cfg: ExperimentConfig) -> bool:
    return bool(cfg.values["output"]["figures"])


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.values["data"]
    h, w = d["height"], d["width"]
    if d["uniform_speed"] is not None:
        vel_train = VelocityField(np.full((h, w), d["uniform_speed"]))
        vel_test = VelocityField(np.full((h, w), d["uniform_speed"]))
    else:
        vel_train = sample_velocity_field(
            h, w, TRAIN_SPEED_VALUES, substream(args.seed, "data-train-map")
        )
        vel_test = sample_velocity_field(
            h, w, TEST_SPEED_VALUES, substream(args.seed, "data-test-map")
        )
    spec = ImpulseSpec(d["amplitude"], d["sigma2"])
    # training noise may differ from the test corruption level
    train_snr = d["train_snr"] if d["train_snr"] is not None else d["snr"]
    if not d["noisy_train"]:
        train_snr = None
    train_ds = generate_dataset(
        d["train_sequences"], d["train_length"], vel_train, args.seed,
        "data-train", snr=train_snr, spec=spec, threads=args.threads,
    )
    test_ds = generate_dataset(
        d["test_sequences"], d["test_length"], vel_test, args.seed,
        "data-test", snr=None, spec=spec, threads=args.threads,
    )
    files = {}
    save_dataset(train_ds, out / "train.dsta")
    files["train.dsta"] = _file_digest(out / "train.dsta")
    save_dataset(test_ds, out / "test.dsta")
    files["test.dsta"] = _file_digest(out / "test.dsta")
    if d["snr"] is not None:
        noisy_seqs = [
            add_noise(s, d["snr"], item_rng(args.seed, "noise", i))
            for i, s in enumerate(test_ds.sequences)
        ]
        noisy = WaveDataset(
            noisy_seqs, vel_test, test_ds.params,
            {**test_ds.meta, "snr": d["snr"]},
        )
        save_dataset(noisy, out / "test_noisy.dsta")
        files["test_noisy.dsta"] = _file_digest(out / "test_noisy.dsta")
    manifest = {
        "command": "generate",
        "seed": args.seed,
        "config": cfg.resolved(),
        "config_digest": cfg.digest(),
        "files": files,
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.export_csv:
        written = export_csv(test_ds, Path(args.export_csv))
        print(f"exported {len(written)} CSV fields to {args.export_csv}")
    for name, digest in files.items():
        print(f"wrote {out / name}  sha256={digest[:12]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_one(
    cfg: ExperimentConfig,
    train_ds: WaveDataset,
    data_digests: dict[str, str],
    seed: int,
    run_dir: Path,
    quiet: bool,
) -> None:
    ncfg = cfg.network_config()
    tcfg = cfg.train_config()
    started = time.perf_counter()
    model = DistanaModel.init_random(ncfg, substream(seed, "init"))
    infer = cfg.values["train"]["infer_context"]
    context_dir = run_dir / "context"

    def report(epoch: int, mse: float) -> None:
        if not quiet and (epoch % 10 == 0 or epoch == tcfg.epochs - 1):
            print(f"  epoch {epoch:4d}  train mse {mse:.6e}")

    if infer:
        context_dir.mkdir(parents=True, exist_ok=True)

        def report_ctx(epoch: int, mse: float, estimate) -> None:
            report(epoch, mse)
            export_context_pgm(
                estimate.values, context_dir / f"epoch{epoch:04d}.pgm"
            )

        result, est = train_with_parametric_bias(
            model, train_ds, tcfg, cfg.tuning_config(), progress=report_ctx
        )
    else:
        result = train(model, train_ds, tcfg, context=None, progress=report)
        est = None
    summary = {
        "command": "train",
        "seed": seed,
        "config": cfg.resolved(),
        "config_digest": cfg.digest(),
        "data": data_digests,
        "model": {"param_count": param_count(ncfg)},
        "metrics": {
            "final_train_mse": result.curve[-1],
            "best_train_mse": min(result.curve),
            "epochs": len(result.curve),
        },
        "wall_time_s": time.perf_counter() - started,
        "version": __version__,
    }
    write_run_artifacts(run_dir, result.weights, result.curve, summary)
    if est is not None:
        export_context_csv(est.values, run_dir / "context.csv")
        export_context_pgm(est.values, run_dir / "context.pgm")
    if _want_figures(cfg):
        from . import figures

        figures.render_curve(result.curve, run_dir / "curve.png")
        if est is not None:
            figures.render_context_maps(
                {"inferred context (final)": est.values}, run_dir / "context.png"
            )
    if not quiet:
        print(f"run {run_dir}: final train mse {result.curve[-1]:.6e}")


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    data_dir = Path(args.data)
    train_ds = load_dataset(data_dir / "train.dsta")
    d = cfg.values["data"]
    if (train_ds.velocity.height, train_ds.velocity.width) != (
        d["height"], d["width"]
    ):
        raise ConfigError(
            f"dataset grid {train_ds.velocity.height}x{train_ds.velocity.width}"
            f" does not match config {d['height']}x{d['width']}"
        )
    if cfg.values["model"]["s"] > 0 and not cfg.values["train"]["infer_context"]:
        raise ConfigError(
            "static path enabled without context inference; the true map is "
            "never fed to a model, set train.infer_context = true"
        )
    digests = {}
    for name in ("train.dsta", "test.dsta", "test_noisy.dsta"):
        if (data_dir / name).exists():
            digests[name] = _file_digest(data_dir / name)
    out = Path(args.out)
    for r in range(args.repeat):
        seed = args.seed + r
        run_dir = out if args.repeat == 1 else out / f"run-{seed:04d}"
        _train_one(cfg, train_ds, digests, seed, run_dir, args.quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _collect_weight_files(paths: list[str]) -> list[Path]:
    found: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            direct = p / "weights.dstw"
            if direct.exists():
                found.append(direct)
                continue
            nested = sorted(p.glob("run-*/weights.dstw"))
            if not nested:
                raise FileNotFoundError(f"no weights.dstw under {p}")
            found.extend(nested)
        else:
            if not p.exists():
                raise FileNotFoundError(f"{p} does not exist")
            found.append(p)
    return found


def cmd_evaluate(args) -> int:
    data_dir = Path(args.data)
    clean = load_dataset(data_dir / "test.dsta")
    noisy_path = data_dir / "test_noisy.dsta"
    noisy = load_dataset(noisy_path) if noisy_path.exists() else None
    weight_files = _collect_weight_files(args.weights)
    rows = []
    first_rollout = None
    for wf in weight_files:
        cfg = _experiment_config(args, weights_path=wf)
        tf, cl = args.tf, args.cl
        if tf is None:
            tf = cfg.values["train"]["tf_steps"]
        if cl is None:
            cl = cfg.values["train"]["cl_steps"]
        weights = load_weights(wf)
        model = DistanaModel(weights)
        context = None
        if model.cfg.static_path:
            tcfg = cfg.tuning_config()
            est, _ = infer_context(model, clean, tcfg, iterations=args.iters)
            context = est.values
        if args.washin == "at":
            if noisy is None:
                raise ConfigError("--washin at needs test_noisy.dsta (snr unset?)")
            tcfg = cfg.tuning_config()
            if tcfg.target != "dynamic-input":
                raise ConfigError(
                    "--washin at requires tuning.target = dynamic-input"
                )
            res = evaluate_with_washin(model, noisy, clean, tcfg, tf, cl)
        else:
            inputs = noisy if noisy is not None else clean
            res = evaluate(
                model, inputs, targets=clean, tf_steps=tf, cl_steps=cl,
                context=context, threads=args.threads,
            )
        rows.append((str(wf), res))
        if first_rollout is None:
            src = (noisy if (noisy is not None and args.washin != "at") else clean)
            roll = model.rollout(src.sequences[0].fields, context, tf, cl)
            first_rollout = (
                roll.predictions,
                clean.sequences[0].fields[tf : tf + cl],
                res.per_sequence,
            )
        print(
            f"{wf}: closed-loop mse {res.mean:.6e} +- {res.std:.6e} "
            f"({len(res.per_sequence)} sequences, tf={tf}, cl={cl})"
        )
    if len(rows) > 1:
        means = np.array([r.mean for _, r in rows])
        print(
            f"across {len(rows)} runs: mean {means.mean():.6e} "
            f"+- {means.std():.6e}"
        )
    print(
        "reference closed-loop mse (published means): "
        + ", ".join(f"{k}={v:.2e}" for k, v in PAPER_MSE.items())
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "evaluate.csv", "w") as fh:
            fh.write("weights,mean_mse,std_mse\n")
            for name, res in rows:
                fh.write(f"{name},{res.mean:.17g},{res.std:.17g}\n")
        payload = {
            "command": "evaluate",
            "washin": args.washin,
            "runs": [
                {"weights": name, "mean": res.mean, "std": res.std,
                 "per_sequence": res.per_sequence}
                for name, res in rows
            ],
            "reference": PAPER_MSE,
        }
        with open(out / "evaluate.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        cfg0 = _experiment_config(args, weights_path=weight_files[0])
        if _want_figures(cfg0) and first_rollout is not None:
            from . import figures

            preds, targets, per_seq = first_rollout
            figures.render_eval_rollout(
                preds, targets, per_seq, out / "evaluate.png"
            )
    return EXIT_OK


# ---------------------------------------------------------------------------
# tune


def cmd_tune(args) -> int:
    weights_path = Path(args.weights)
    weights = load_weights(weights_path)
    model = DistanaModel(weights)
    if not model.cfg.static_path:
        raise ConfigError("these weights have no static path; nothing to tune")
    cfg = _experiment_config(args, weights_path=weights_path)
    data_dir = Path(args.data)
    test_ds = load_dataset(data_dir / "test.dsta")
    tcfg = cfg.tuning_config()
    checkpoints = [c for c in cfg.checkpoints() if c <= args.iters]
    if args.iters not in checkpoints:
        checkpoints.append(args.iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    before = {n: a.copy() for n, a in weights.arrays.items()}
    est, snapshots = infer_context(
        model, test_ds, tcfg, iterations=args.iters,
        checkpoints=tuple(checkpoints),
    )
    assert all(
        np.array_equal(before[n], weights.arrays[n]) for n in before
    ), "tuning must not touch the weights"
    for it, values in sorted(snapshots.items()):
        export_context_pgm(values, out / f"context_iter{it:04d}.pgm")
        export_context_csv(values, out / f"context_iter{it:04d}.csv")
    truth = test_ds.velocity.s
    report = ordering_report(est.values, truth)
    report.update(
        {
            "command": "tune",
            "iterations": args.iters,
            "checkpoints": sorted(snapshots),
            "weights": str(weights_path),
        }
    )
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if _want_figures(cfg):
        from . import figures

        figures.render_context_maps(
            {f"iteration {it}": v for it, v in sorted(snapshots.items())},
            out / "context.png",
            truth=truth,
        )
    rho = report["spearman"]
    rho_text = "undefined" if rho is None else f"{rho:+.4f}"
    print(f"inferred context over {args.iters} iterations")
    print(f"spearman rho vs ground-truth speeds: {rho_text}")
    print(f"per-speed mean ordering monotone: {report['monotone']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _op_gradcheck_cases(seed: int) -> dict[str, float]:
    """Finite-difference spot checks per differentiable op."""
    rng = substream(seed, "gradcheck-ops")
    cases: dict[str, float] = {}

    def check(name, f, params):
        cases[name] = ad.grad_check(f, params)

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 3))
    x = rng.normal(size=(3, 4))
    t = rng.normal(size=(2, 4))
    check(
        "linear+mse",
        lambda p: ad.mse(ad.linear(p["w"], p["x"]), ad.constant(t)),
        {"w": w, "x": x},
    )
    check(
        "add/scale",
        lambda p: ad.mse(
            ad.add(ad.scale(p["a"], 1.7), p["b"]), ad.constant(np.zeros((3, 4)))
        ),
        {"a": a, "b": b},
    )
    check(
        "sigmoid/tanh/hadamard",
        lambda p: ad.mse(
            ad.hadamard(ad.sigmoid(p["a"]), ad.tanh(p["b"])),
            ad.constant(np.zeros((3, 4))),
        ),
        {"a": a, "b": b},
    )
    check(
        "concat/slice",
        lambda p: ad.mse(
            ad.slice_rows(ad.concat(p["a"], p["b"]), 1, 5),
            ad.constant(np.zeros((4, 4))),
        ),
        {"a": a, "b": b},
    )
    idx = np.array([[0, 2, 4, 1], [4, 4, 0, 3]])
    check(
        "gather_columns",
        lambda p: ad.mse(
            ad.gather_columns(p["x"], idx), ad.constant(np.zeros((6, 4)))
        ),
        {"x": rng.normal(size=(3, 4))},
    )
    return cases


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, err in _op_gradcheck_cases(args.seed).items():
        print(f"op {name:24s} max rel err {err:.3e}")
        worst = max(worst, err)
    started = time.perf_counter()
    full = full_model_gradcheck(seed=args.seed, steps=3)
    elapsed = time.perf_counter() - started
    print(f"full model (3x3, m=4, 3 steps) max rel err {full:.3e} [{elapsed:.2f}s]")
    worst = max(worst, full)
    print(f"overall max relative error {worst:.3e} (tolerance {args.tol:.0e})")
    if worst >= args.tol:
        raise NumericError(
            f"gradient check failed: {worst:.3e} >= tolerance {args.tol:.0e}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distana",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        p.add_argument("--seed", type=int, default=0, help="root random seed")
        p.add_argument(
            "--threads", type=int, default=None,
            help="worker cap (default: env DISTANA_THREADS or 1)",
        )
        if config:
            p.add_argument("--config", help="INI experiment config file")
            p.add_argument(
                "--preset", choices=sorted(PRESETS),
                help="named experiment preset",
            )
            p.add_argument(
                "--set", action="append", metavar="SECTION.KEY=VALUE",
                help="override a config value (repeatable)",
            )

    p = sub.add_parser("generate", help="build train/test wave datasets")
    add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--export-csv", metavar="DIR",
        help="also dump the test set as one CSV per time step",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a generated dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument(
        "--repeat", type=int, default=1,
        help="train N runs with consecutive seeds in run-* subdirectories",
    )
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="closed-loop test-set evaluation")
    add_common(p)
    p.add_argument(
        "--weights", required=True, nargs="+",
        help="checkpoint file(s) or run directory(ies)",
    )
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tf", type=int, default=None, help="teacher-forced steps")
    p.add_argument("--cl", type=int, default=None, help="closed-loop steps")
    p.add_argument(
        "--iters", type=int, default=500,
        help="context-inference iterations for static-path models",
    )
    p.add_argument(
        "--washin", choices=("tf", "at"), default="tf",
        help="wash-in mode: teacher forcing or Active Tuning",
    )
    p.add_argument("--out", help="directory for evaluate.csv/json/png")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tune", help="test-time static-context inference")
    add_common(p)
    p.add_argument("--weights", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    add_common(p, config=False)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if getattr(args, "threads", None) is None:
            args.threads = _default_threads()
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except ConfigError as err:
        print(f"distana: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"distana: numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as err:
        print(f"distana: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as err:
        print(f"distana: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
