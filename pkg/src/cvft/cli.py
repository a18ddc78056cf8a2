"""Command line entry point: ``cvft <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, bad files, bad
config), 2 runtime or numeric failure.  Human-readable output goes to
stderr; CSV, JSON and tensor outputs go to the paths given on the command
line (``-`` means stdout).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (CHECKPOINT_VERSION, MANIFEST_VERSION, TENSOR_VERSION, generate_synthetic,
                      load_manifest, load_tensor, save_tensor)
from .errors import CVFTError, ValidationError
from .sinkhorn import SinkhornConfig, sinkhorn_solve
from .training import CONFIG_NAME, RunConfig, load_model, orientation_sweep, train

log = logging.getLogger("cvft")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors are validation errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _open_out(path: str):
    if path == "-":
        return nullcontext(sys.stdout)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    m = generate_synthetic(args.out, count=args.count, input_shape=args.input_shape,
                           feature_shape=args.feature_shape, noise_sigma=args.noise_sigma,
                           seed=args.seed, mode=args.mode, permutation_seed=args.permutation_seed,
                           val_fraction=args.val_fraction, smooth=args.smooth, dtype=args.dtype)
    log.info("wrote %d pairs (%s) to %s", len(m.pairs),
             ", ".join(f"{k}={len(v)}" for k, v in sorted(m.splits.items())), args.out)
    return EXIT_OK


def _resolve_train_config(args) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if args.config else RunConfig().to_dict()
    overrides = {
        ("train", "epochs"): args.epochs, ("train", "learning_rate"): args.lr,
        ("train", "batch_size"): args.batch_size, ("train", "gamma"): args.gamma,
        ("train", "seed"): args.seed, ("train", "shift_augment_degrees"): args.shift_augment,
        ("sinkhorn", "lam"): args.lam, ("sinkhorn", "max_iterations"): args.iters,
        ("pooling",): args.pooling, ("scale_mode",): args.scale_mode,
        ("transport",): args.transport, ("dataset",): args.dataset,
    }
    for key, val in overrides.items():
        if val is None:
            continue
        d = base
        for k in key[:-1]:
            d = d[k]
        d[key[-1]] = val
    if base.get("dataset") is None:
        raise ValidationError("no dataset: pass --dataset or set it in the config file")
    base["dataset"] = str(Path(base["dataset"]).resolve())
    return RunConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    manifest = load_manifest(cfg.dataset)
    res = train(manifest, cfg, args.out, val_split=args.val_split)
    last = res.history[-1] if res.history else None
    if last:
        log.info("done: epoch %d loss %.5f val r@1 %.4f", last["epoch"], last["loss"], last["r1"])
    log.info("outputs in %s", args.out)
    return EXIT_OK


def _model_from(args):
    cfg_path = Path(args.config) if args.config else Path(args.checkpoint).parent / CONFIG_NAME
    if not cfg_path.exists():
        raise ValidationError(f"no run config at {cfg_path}; pass --config")
    cfg = RunConfig.load(cfg_path)
    model, _ = load_model(args.checkpoint, cfg)
    return cfg, model


def cmd_evaluate(args) -> int:
    cfg, model = _model_from(args)
    dataset = args.dataset or cfg.dataset
    if dataset is None:
        raise ValidationError("no dataset: pass --dataset")
    manifest = load_manifest(dataset)
    ground, aerial, recs = manifest.load_arrays(args.split)
    tags = np.array([r.geo_tag for r in recs], dtype=np.float64)
    seed = cfg.train.seed if args.seed is None else args.seed
    offsets = (0.0,) if args.orient_noise == 0 else (0.0, float(args.orient_noise))
    reports = orientation_sweep(model, ground, aerial, offsets, args.ks, seed, tags, args.geo_d)
    with _open_out(args.out_csv) as fh:
        fh.write("orient_max_deg,metric,k,value\n")
        for mx, rep in reports.items():
            for metric, k, v in rep.rows():
                fh.write(f"{mx:g},{metric},{k},{v:.10g}\n")
    summary = {
        "checkpoint": str(args.checkpoint), "dataset": str(dataset), "split": args.split,
        "queries": len(ground), "geo_d_meters": args.geo_d, "seed": seed,
        "reports": {f"{mx:g}": {f"{m}{'' if m == 'r@1%' else k}": v for m, k, v in rep.rows()}
                    for mx, rep in reports.items()},
    }
    if args.out_json:
        with _open_out(args.out_json) as fh:
            fh.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for mx, rep in reports.items():
        log.info("yaw ±%g°: r@1 %.4f  r@1%% %.4f", mx, rep.r_at.get(1, float("nan")), rep.top1_percent)
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    C = load_tensor(args.cost)
    mode = args.mode or ("tolerance" if args.tol is not None else "fixed")
    cfg = SinkhornConfig(lam=args.lam, max_iterations=args.iters,
                         tolerance=1e-6 if args.tol is None else args.tol, mode=mode)
    costs = C[None] if C.ndim == 2 else C
    if costs.ndim != 3:
        raise ValidationError(f"cost tensor must be (n, n) or (B, n, n), got {C.shape}")
    plans = []
    for k, c in enumerate(costs):
        plan = sinkhorn_solve(c, cfg)
        plans.append(plan.data)
        print(f"matrix={k} iterations_run={plan.iterations_run} row_residual={plan.row_residual:.3e} "
              f"col_residual={plan.col_residual:.3e} converged={str(plan.converged).lower()}",
              file=sys.stderr)
    save_tensor(args.out, plans[0] if C.ndim == 2 else np.stack(plans))
    return EXIT_OK


def cmd_transport(args) -> int:
    _, model = _model_from(args)
    if not model.transport:
        raise ValidationError("checkpoint config has the transport block disabled")
    g = load_tensor(args.ground)
    batch = g[None] if g.ndim == 3 else g
    if batch.ndim != 4 or batch.shape[1:] != tuple(model.encoder.input_shape):
        raise ValidationError(f"ground input {g.shape} does not match encoder input "
                              f"{tuple(model.encoder.input_shape)}")
    grid = model.transported_features(batch)
    plans = model.plans(batch)
    save_tensor(args.out_grid, grid[0] if g.ndim == 3 else grid)
    save_tensor(args.out_plan, plans[0] if g.ndim == 3 else plans)
    log.info("transported %d grid(s) of shape %s", len(batch), grid.shape[1:])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(args.seed, args.step, args.tol)
    with _open_out(args.out) as fh:
        fh.write("op_id,max_rel_err,tolerance,passed\n")
        for rep in reports:
            fh.write(rep.csv_row() + "\n")
    failed = [r.op_id for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_relative_error)
    log.info("%d/%d ops pass; worst %s at %.3e", len(reports) - len(failed), len(reports),
             worst.op_id, worst.max_relative_error)
    if failed:
        log.error("failing ops: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cvft", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"cvft {__version__} (tensor format v{TENSOR_VERSION}, checkpoint format "
                           f"v{CHECKPOINT_VERSION}, manifest v{MANIFEST_VERSION})")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread limit (default: available cores)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    g = sub.add_parser("generate-synthetic", help="write a synthetic cross-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--input-shape", type=_ints, default=(32, 32, 3), help="H,W,C")
    g.add_argument("--feature-shape", type=_ints, default=(8, 8), help="block lattice h,w")
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=("fixed-permutation", "per-pair-permutation"),
                   default="fixed-permutation")
    g.add_argument("--permutation-seed", type=int, default=None)
    g.add_argument("--val-fraction", type=float, default=0.1)
    g.add_argument("--smooth", type=int, default=4, help="pixel tile size of the aerial field")
    g.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model; flags override the config file")
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--dataset", help="manifest.json")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--val-split", default="val")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--iters", type=int)
    t.add_argument("--pooling", choices=("channel-mean", "full-flatten"))
    t.add_argument("--scale-mode", choices=("unit", "n-scaled"))
    t.add_argument("--shift-augment", type=float, help="training yaw augmentation, degrees")
    t.add_argument("--no-transport", dest="transport", action="store_const", const=False,
                   help="identity transport baseline")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="retrieval recall of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="RunConfig JSON (default: run_config.json beside checkpoint)")
    e.add_argument("--dataset")
    e.add_argument("--split", default="val")
    e.add_argument("--ks", type=_ints, default=(1, 5, 10))
    e.add_argument("--geo-d", type=float, default=25.0)
    e.add_argument("--orient-noise", type=float, default=0.0, help="max yaw, degrees")
    e.add_argument("--seed", type=int, default=None, help="yaw noise seed")
    e.add_argument("--out-csv", default="-")
    e.add_argument("--out-json", default=None)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sinkhorn", help="solve for the transport plan of a cost tensor")
    s.add_argument("--cost", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=10.0)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--mode", choices=("fixed", "tolerance"), default=None,
                   help="default: tolerance when --tol is given, else fixed")
    s.set_defaults(func=cmd_sinkhorn)

    r = sub.add_parser("transport", help="transported ground features and plans")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--config")
    r.add_argument("--ground", required=True, help="ground input tensor (H,W,C) or (N,H,W,C)")
    r.add_argument("--out-grid", required=True)
    r.add_argument("--out-plan", required=True)
    r.set_defaults(func=cmd_transport)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out", default="-")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print("cvft: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except ValidationError as exc:
        print(f"cvft: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"cvft: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CVFTError, OSError, FloatingPointError) as exc:
        print(f"cvft: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001 - anything else is a bug; still honour the exit code contract
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
