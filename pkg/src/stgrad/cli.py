"""Command-line entry point: train | eval | analyze | sweep-beta | verify.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data error.
Config values come from a flat key=value file, overridden by STGRAD_* env
vars, overridden by flags.
"""

from __future__ import annotations

import argparse
import os
import sys

from .analysis import beta_sweep, checkpoint_sweep, verify_identities
from .config import RunConfig, load_preset, load_run_config, parse_config_text, preset_names
from .data import MetricsWriter, load_checkpoint
from .errors import ConfigError, DataError, StgradError
from .training import load_datasets, run_training
from .vae import evaluate

DEFAULT_ESTIMATOR_SET = "exact,st,reinmax,reinmax_rao,reinmax_cv"


def _add_config_source(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", help=f"bundled preset name ({', '.join(preset_names())})")


def _add_override_flags(p: argparse.ArgumentParser):
    p.add_argument("--estimator")
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--optimizer")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--synth", action="store_const", const=True, default=None,
                   help="use the synthetic dataset instead of IDX files")
    p.add_argument("--synth-n", dest="synth_n", type=int)
    p.add_argument("--synth-pattern", dest="synth_pattern")
    p.add_argument("--train-images", dest="train_images")
    p.add_argument("--test-images", dest="test_images")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--run-id", dest="run_id")


_OVERRIDE_KEYS = (
    "estimator", "tau", "eta", "beta", "k", "n", "l", "optimizer", "lr", "epochs",
    "batch", "seed", "out", "synth", "synth_n", "synth_pattern", "train_images",
    "test_images", "checkpoint_every", "run_id",
)


def _config_from_args(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    path = args.config
    preset_values = {}
    if args.preset:
        preset_values = parse_config_text(load_preset(args.preset))
    overrides = dict(preset_values)
    overrides.update({k: getattr(args, k) for k in _OVERRIDE_KEYS if getattr(args, k) is not None})
    return load_run_config(path, overrides=overrides)


def _timing_enabled(args) -> bool:
    return bool(getattr(args, "timing", False) or os.environ.get("STGRAD_TIMING") == "1")


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = cfg.out
    if not out_dir:
        raise ConfigError("train needs an output directory (--out or out= in the config)")
    os.makedirs(out_dir, exist_ok=True)
    start = None
    if args.resume:
        model, opt, seed, epoch = load_checkpoint(args.resume)
        cfg.seed = seed
        start = (model, opt, epoch)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as f:
        f.write(cfg.to_text())
    train_data, test_data = load_datasets(cfg)
    with MetricsWriter(os.path.join(out_dir, "metrics.csv")) as metrics:
        result = run_training(
            cfg,
            train_data,
            test_data,
            out_dir=out_dir,
            metrics=metrics,
            start=start,
            timing=_timing_enabled(args),
        )
    final = result.history[-1] if result.history else (0, float("nan"))
    print(f"run {cfg.effective_run_id()}: {len(result.history)} epochs, "
          f"final train neg_elbo {final[1]:.4f}, {len(result.checkpoints)} checkpoints -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _, _, epoch = load_checkpoint(args.checkpoint)
    cfg = _config_from_args(args)
    train_data, test_data = load_datasets(cfg)
    if args.split == "train":
        data = train_data
    else:
        if test_data is None:
            raise ConfigError("no test split configured")
        data = test_data
    bd = evaluate(model, data.images, args.seed if args.seed is not None else cfg.seed)
    print(
        f"checkpoint epoch={epoch} split={args.split} "
        f"neg_elbo={bd.neg_elbo!r} recon_nll={bd.recon_nll!r} kl={bd.kl!r}"
    )
    return 0


def cmd_analyze(args) -> int:
    run_dir = args.run
    cfg_path = os.path.join(run_dir, "config.cfg")
    if not os.path.isdir(run_dir) or not os.path.exists(cfg_path):
        raise DataError(f"{run_dir} is not a run directory (missing config.cfg)")
    cfg = load_run_config(cfg_path)
    train_data, _ = load_datasets(cfg)
    names = [s.strip() for s in args.estimators.split(",") if s.strip()]
    seed = args.seed if args.seed is not None else cfg.seed
    rows = checkpoint_sweep(run_dir, names, args.m, seed, train_data, batch_size=args.batch_size)
    out_csv = args.out or os.path.join(run_dir, "analysis.csv")
    with MetricsWriter(out_csv) as w:
        for row in rows:
            w.write_row(row)
    print(f"wrote {len(rows)} rows -> {out_csv}")
    return 0


def _parse_grid(spec: str) -> list[float]:
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError("grid must be start:stop:step or a comma list")
        start, stop, step = (float(x) for x in parts)
        if step <= 0:
            raise ConfigError("grid step must be positive")
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(x) for x in spec.split(",") if x.strip()]


def cmd_sweep_beta(args) -> int:
    cfg = _config_from_args(args)
    betas = _parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    train_data, _ = load_datasets(cfg)
    rows = beta_sweep(cfg, betas, seeds, train_data, jobs=args.jobs)
    out_csv = args.out_csv or "beta_sweep.csv"
    with MetricsWriter(out_csv) as w:
        for row in rows:
            w.write_row(row)
    print(f"wrote {len(rows)} rows ({len(betas)} grid points x {len(seeds)} seeds) -> {out_csv}")
    return 0


def cmd_verify(args) -> int:
    report = verify_identities(
        trials=args.trials,
        tolerance=args.tol,
        seed=args.seed if args.seed is not None else 0,
        corruption=0.05 if args.mutation else 0.0,
    )
    print(report.table())
    if report.passed:
        print("verify: PASS")
        return 0
    print("verify: FAIL")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgrad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a discrete VAE")
    _add_config_source(p)
    _add_override_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--timing", action="store_true", help="fill wall_ms in metrics rows")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    _add_config_source(p)
    _add_override_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="bias/variance sweep over a run's checkpoints")
    p.add_argument("--run", required=True, help="run directory produced by train")
    p.add_argument("--estimators", default=DEFAULT_ESTIMATOR_SET)
    p.add_argument("--m", type=int, default=1024, help="replicates per estimate")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=100)
    p.add_argument("--out", help="output CSV (default RUN/analysis.csv)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-beta", help="train the rk2 family over a beta grid")
    _add_config_source(p)
    _add_override_flags(p)
    p.add_argument("--grid", default="-0.2:1.2:0.05", help="start:stop:step or comma list")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("verify", help="run the expectation-identity suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int)
    p.add_argument("--mutation", action="store_true",
                   help="corrupt the estimators to confirm the harness detects it")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except StgradError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
