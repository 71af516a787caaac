"""Command-line entry point.

Subcommands: data, train, sweep, fit, entropy, report. All outputs are
deterministic functions of flags and seeds; JSON artifacts are
byte-identical across repeated invocations.

Exit codes: 0 success, 2 usage error, 3 data/format error,
4 numeric or degenerate-fit error.

Relative output paths resolve under $EXPRSCALE_OUT when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from . import corpus as corpus_mod
from . import entropy as entropy_mod
from . import report as report_mod
from . import scaling as scaling_mod
from .autodiff import NumericError
from .corpus import CorpusError, SyntheticSpec
from .model import ModelConfig, PRESETS, param_count
from .trainer import TrainConfig, TrainerError, train
from .xmat import XmatFormatError, load_matrix, save_matrix

OUT_ROOT_ENV = "EXPRSCALE_OUT"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise UsageError(f"config file not found: {cfg_path}")
    with open(cfg_path, "rb") as fh:
        return tomllib.load(fh)


# train-config fields settable from flags or the [train] config table
_TRAIN_FIELDS = ("physical_batch", "grad_accum", "mask_rate",
                 "base_lr_reference", "weight_decay", "clip_norm",
                 "eval_every")


def _build_train_config(args, file_cfg: dict, total_steps: int,
                        seed: int) -> TrainConfig:
    """Precedence: explicit flag > config file [train] table > default."""
    merged: dict = {}
    table = file_cfg.get("train", {})
    for name in _TRAIN_FIELDS:
        if table.get(name) is not None:
            merged[name] = table[name]
        flag = getattr(args, name, None)
        if flag is not None:
            merged[name] = flag
    return TrainConfig(total_steps=total_steps, seed=seed, **merged)


def _model_config(args, vocab: int) -> ModelConfig:
    if args.preset != "custom":
        return ModelConfig.from_preset(args.preset, vocab)
    missing = [f for f in ("dim", "layers", "heads", "ffn_mult")
               if getattr(args, f) is None]
    if missing:
        raise UsageError(
            f"--preset custom requires --{', --'.join(m.replace('_', '-') for m in missing)}")
    return ModelConfig(vocab=vocab, dim=args.dim, layers=args.layers,
                       heads=args.heads, ffn_mult=args.ffn_mult)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--physical-batch", dest="physical_batch", type=int)
    parser.add_argument("--grad-accum", dest="grad_accum", type=int)
    parser.add_argument("--mask-rate", dest="mask_rate", type=float)
    parser.add_argument("--base-lr", dest="base_lr_reference", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--clip-norm", dest="clip_norm", type=float)
    parser.add_argument("--eval-every", dest="eval_every", type=int)
    parser.add_argument("--config", help="TOML config file with a [train] table")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", default="XS",
                        choices=sorted(PRESETS) + ["custom"])
    parser.add_argument("--dim", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--ffn-mult", dest="ffn_mult", type=int)


# ---------------------------------------------------------------------- data

def cmd_data(args) -> int:
    out = _resolve_out(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.synth:
        spec = SyntheticSpec(n_cells=args.cells, n_genes=args.genes,
                             latent_rank=args.latent_rank,
                             noise_sigma=args.noise_sigma, seed=args.seed)
        matrix = corpus_mod.synthesize(spec)
    else:
        if args.input is None:
            raise UsageError("data needs either --synth or --input")
        matrix = load_matrix(_resolve_out(args.input))
        if matrix.stage != corpus_mod.RAW:
            raise CorpusError("--input must be a raw-counts matrix")
        matrix = corpus_mod.filter_zero_library(matrix)
        if args.hvg is not None:
            keep = corpus_mod.select_hvg(matrix, args.hvg)
            keep_sorted = sorted(keep.tolist())
            matrix = corpus_mod.ExpressionMatrix(
                values=matrix.values[:, keep_sorted],
                gene_names=[matrix.gene_names[i] for i in keep_sorted],
                cell_labels=matrix.cell_labels, stage=corpus_mod.RAW,
                provenance=matrix.provenance + f" | hvg top {args.hvg}")
        matrix = corpus_mod.normalize_log1p(matrix, target_sum=args.target_sum)
    matrix.split = corpus_mod.split(matrix, seed=args.split_seed)
    save_matrix(matrix, out)
    counts = matrix.split.counts()
    print(f"wrote {out} ({matrix.n_cells} cells x {matrix.n_genes} genes, "
          f"train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    return EXIT_OK


# --------------------------------------------------------------------- train

def cmd_train(args) -> int:
    matrix = load_matrix(_resolve_out(args.corpus))
    file_cfg = _load_config_file(args.config)
    mc = _model_config(args, matrix.n_genes)
    tc = _build_train_config(args, file_cfg, total_steps=args.steps,
                             seed=args.seed)
    run_dir = _resolve_out(args.output)
    record = train(mc, matrix, tc, run_dir=run_dir)
    print(f"{mc.preset} seed {tc.seed}: P={record.param_count:,} "
          f"best val MSE {record.best_val_mse:.6f} at step {record.best_step}")
    return EXIT_OK


# --------------------------------------------------------------------- sweep

def _sweep_cell(task) -> tuple[str, float, float]:
    corpus_path, preset, seed, tc_dict, run_dir = task
    matrix = load_matrix(corpus_path)
    mc = ModelConfig.from_preset(preset, matrix.n_genes)
    tc = TrainConfig(seed=seed, **tc_dict)
    record = train(mc, matrix, tc, run_dir=run_dir)
    return preset, float(record.param_count), record.best_val_mse


def cmd_sweep(args) -> int:
    corpus_path = _resolve_out(args.corpus)
    matrix = load_matrix(corpus_path)  # fail early on format errors
    file_cfg = _load_config_file(args.config)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    if not presets or not seeds:
        raise UsageError("sweep needs non-empty --presets and --seeds")
    for preset in presets:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")

    out_dir = _resolve_out(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_tc = _build_train_config(args, file_cfg, total_steps=args.steps, seed=0)
    tc_dict = {k: getattr(base_tc, k) for k in (
        "total_steps", "physical_batch", "grad_accum", "mask_rate",
        "base_lr_reference", "weight_decay", "clip_norm", "eval_every")}

    tasks, done = [], []
    for preset in presets:
        for seed in seeds:
            run_dir = out_dir / f"{preset}_seed{seed}"
            if (run_dir / "metadata.json").exists():
                done.append(run_dir)  # idempotent skip
                continue
            tasks.append((corpus_path, preset, seed, tc_dict, run_dir))

    if tasks and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for preset, p, best in pool.map(_sweep_cell, tasks):
                print(f"{preset}: P={int(p):,} best val MSE {best:.6f}")
    else:
        for task in tasks:
            preset, p, best = _sweep_cell(task)
            print(f"{preset}: P={int(p):,} best val MSE {best:.6f}")
    if done:
        print(f"skipped {len(done)} completed run(s)")

    run_dirs = [out_dir / f"{preset}_seed{seed}"
                for preset in presets for seed in seeds]
    points = scaling_mod.collect_run_points(run_dirs)
    scaling_mod.save_points_csv(points, out_dir / "index.csv")
    print(f"index: {out_dir / 'index.csv'} ({len(points)} points)")
    return EXIT_OK


# ----------------------------------------------------------------------- fit

def _load_points(args) -> list:
    if args.points is not None:
        return scaling_mod.load_points_csv(_resolve_out(args.points))
    if args.runs is not None:
        sweep_dir = _resolve_out(args.runs)
        index = sweep_dir / "index.csv"
        if index.exists():
            return scaling_mod.load_points_csv(index)
        run_dirs = sorted(d for d in sweep_dir.iterdir()
                          if (d / "metadata.json").exists())
        if not run_dirs:
            raise CorpusError(f"no completed runs under {sweep_dir}")
        return scaling_mod.collect_run_points(run_dirs)
    raise UsageError("fit needs --points CSV or --runs sweep directory")


def cmd_fit(args) -> int:
    points = _load_points(args)
    fit = scaling_mod.fit_power_law(points, grid_size=args.grid)
    out = _resolve_out(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fit.to_dict(), sort_keys=True, indent=2) + "\n")
    if abs(fit.alpha) < 0.02 or fit.r2 < 0.1:
        print("warning: no scaling regime detected "
              f"(alpha={fit.alpha:.4f}, R^2={fit.r2:.4f}); the loss is "
              "effectively flat in this variable", file=sys.stderr)
    if args.plot is not None:
        plot_path = _resolve_out(args.plot)
        plot_path.parent.mkdir(parents=True, exist_ok=True)
        report_mod.render_scaling_plot(points, fit, plot_path)
        print(f"plot: {plot_path}")
    print(f"fit: alpha={fit.alpha:.4f} a={fit.a:.4f} c={fit.c:.4f} "
          f"R^2={fit.r2:.4f} n={fit.n} -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------- entropy

def cmd_entropy(args) -> int:
    mse_fit = json.loads(Path(_resolve_out(args.mse_fit)).read_text())
    nll_fit = None
    if args.points is not None or args.runs is not None:
        points = _load_points(args)
        nll_values = entropy_mod.nll_transform_runs([p.loss for p in points])
        nll_points = [scaling_mod.ScalingPoint(x=p.x, loss=d.value, tag=p.tag)
                      for p, d in zip(points, nll_values)]
        nll_fit = scaling_mod.fit_power_law(nll_points).to_dict()
    report = entropy_mod.entropy_report(mse_fit, nll_fit)
    out = _resolve_out(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"MSE floor {report['mse_floor']['floor_value']:.4f} -> "
          f"{report['mse_floor']['bits_per_position']:.3f} bits/masked position")
    if report["nll_floor"] is not None:
        print(f"NLL floor {report['nll_floor']['floor_value']:.4f} nats -> "
              f"{report['nll_floor']['bits_per_position']:.3f} bits/masked position "
              f"({report['nll_provenance']})")
    print(f"entropy report: {out}")
    return EXIT_OK


# -------------------------------------------------------------------- report

def cmd_report(args) -> int:
    sweep_dir = _resolve_out(args.sweep)
    index = sweep_dir / "index.csv"
    if index.exists():
        points = scaling_mod.load_points_csv(index)
    else:
        run_dirs = sorted(d for d in sweep_dir.iterdir()
                          if (d / "metadata.json").exists())
        if not run_dirs:
            raise CorpusError(f"no completed runs under {sweep_dir}")
        points = scaling_mod.collect_run_points(run_dirs)

    mse_fit = scaling_mod.fit_power_law(points, grid_size=args.grid)
    nll_fit = None
    if len(points) >= 3:
        nll_values = entropy_mod.nll_transform_runs([p.loss for p in points])
        nll_points = [scaling_mod.ScalingPoint(x=p.x, loss=d.value, tag=p.tag)
                      for p, d in zip(points, nll_values)]
        nll_fit = scaling_mod.fit_power_law(nll_points, grid_size=args.grid)

    out_dir = _resolve_out(args.output)
    report_mod.write_report(points, out_dir, mse_fit, nll_fit)
    print(f"report: {out_dir / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exprscale",
        description="Scaling-law experiments for masked expression reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="build or synthesize a corpus")
    p_data.add_argument("--synth", action="store_true",
                        help="generate a synthetic corpus")
    p_data.add_argument("--input", help="raw-counts XMAT file to preprocess")
    p_data.add_argument("--cells", type=int, default=2000)
    p_data.add_argument("--genes", type=int, default=64)
    p_data.add_argument("--latent-rank", dest="latent_rank", type=int, default=8)
    p_data.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.5)
    p_data.add_argument("--seed", type=int, default=1)
    p_data.add_argument("--hvg", type=int, help="keep the top-N variable genes")
    p_data.add_argument("--target-sum", dest="target_sum", type=float, default=1e4)
    p_data.add_argument("--split-seed", dest="split_seed", type=int, default=42)
    p_data.add_argument("-o", "--output", required=True)
    p_data.set_defaults(func=cmd_data)

    p_train = sub.add_parser("train", help="train one model")
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--steps", type=int, required=True)
    p_train.add_argument("--seed", type=int, default=7)
    _add_model_flags(p_train)
    _add_train_flags(p_train)
    p_train.add_argument("-o", "--output", required=True)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="train a preset x seed grid")
    p_sweep.add_argument("--corpus", required=True)
    p_sweep.add_argument("--presets", default="XXS,TINY,XS,S")
    p_sweep.add_argument("--seeds", default="7,8,9")
    p_sweep.add_argument("--steps", type=int, required=True)
    p_sweep.add_argument("--workers", type=int, default=1)
    _add_train_flags(p_sweep)
    p_sweep.add_argument("-o", "--output", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_fit = sub.add_parser("fit", help="fit the additive-offset power law")
    p_fit.add_argument("--points", help="CSV with x,loss header")
    p_fit.add_argument("--runs", help="sweep directory")
    p_fit.add_argument("--grid", type=int, default=scaling_mod.DEFAULT_GRID)
    p_fit.add_argument("--plot", help="write a log-log SVG here")
    p_fit.add_argument("-o", "--output", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_entropy = sub.add_parser("entropy", help="convert loss floors to bits")
    p_entropy.add_argument("--mse-fit", dest="mse_fit", required=True,
                           help="FitResult JSON from 'fit'")
    p_entropy.add_argument("--points", help="CSV for the NLL transform-refit")
    p_entropy.add_argument("--runs", help="sweep directory for the NLL refit")
    p_entropy.add_argument("-o", "--output", required=True)
    p_entropy.set_defaults(func=cmd_entropy)

    p_report = sub.add_parser("report", help="markdown report + figures")
    p_report.add_argument("--sweep", required=True)
    p_report.add_argument("--grid", type=int, default=scaling_mod.DEFAULT_GRID)
    p_report.add_argument("-o", "--output", required=True)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, XmatFormatError, FileNotFoundError, ValueError) as err:
        if isinstance(err, scaling_mod.DegenerateFitError):
            print(f"degenerate fit: {err}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainerError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
