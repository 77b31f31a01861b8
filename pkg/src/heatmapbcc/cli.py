"""Command-line interface: ``heatmapbcc {fit,predict,simulate,benchmark,export-confusion}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import evaluation
from . import model as hbcc
from .confusion import write_confusion_file
from .core import (
    ConfigError,
    GridSpec,
    ModelConfig,
    ReportError,
    ReportParseError,
    ReportSet,
    bin_reports,
    load_config,
    read_report_file,
    write_report_file,
)
from .gpc import NumericalError
from .synthetic import make_scenario

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2
EXIT_NOT_CONVERGED = 3

REPORT_FORMAT = """\
report file: CSV with header x,y,source_id,label; source_id is a 0-based
integer, label a 1-based integer."""

CONFIG_FORMAT = """\
config file: TOML with optional [grid] (width, height, origin, cell_size) and
[model] (num_classes, num_labels, alpha0 or alpha0_diag/alpha0_off,
[model.source_alpha0], nu0, a0, b0, length_scale, prior_mean,
max_iterations, convergence_tol, seed, n_samples, moment_samples,
inner_tol, inner_max_iter, optimize_length_scale, length_scale_bounds)."""

log = logging.getLogger("heatmapbcc")


def _thread_limit():
    n = os.environ.get("HEATMAPBCC_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _add_grid_args(p, required=False):
    p.add_argument("--width", type=int, required=required, help="grid width in cells")
    p.add_argument("--height", type=int, required=required, help="grid height in cells")
    p.add_argument("--origin", type=float, nargs=2, default=(0.0, 0.0), metavar=("X0", "Y0"),
                   help="coordinates of the grid's lower-left corner (default 0 0)")
    p.add_argument("--cell-size", type=float, nargs=2, default=(1.0, 1.0), metavar=("DX", "DY"),
                   help="cell width and height (default 1 1)")


def _grid_from_args(args, fallback=None):
    if args.width is None and args.height is None:
        return fallback
    if args.width is None or args.height is None:
        raise ConfigError("--width and --height must be given together")
    return GridSpec(args.width, args.height, tuple(args.origin), tuple(args.cell_size))


def _load_reports(path, grid, config: ModelConfig):
    raw = read_report_file(path)
    if not raw:
        raise ReportError(f"{path}: no reports")
    if grid is not None:
        return bin_reports(raw, grid, num_labels=config.num_labels)
    coords = np.array([c for c, _, _ in raw], dtype=float)
    return ReportSet.from_points(coords, [s for _, s, _ in raw], [l for _, _, l in raw],
                                 num_labels=config.num_labels)


def cmd_fit(args):
    grid, config = load_config(args.config) if args.config else (None, ModelConfig())
    grid = _grid_from_args(args, grid)
    if args.seed is not None:
        config = config.with_(rng_seed=args.seed)
    if args.max_iterations is not None:
        config = config.with_(max_iterations=args.max_iterations)
    reports = _load_reports(args.reports, grid, config)
    state = hbcc.fit(reports, config)
    hbcc.save_state(args.out, state)
    print(f"iterations: {state.n_iter}")
    print(f"lower bound: {state.lower_bounds[-1]:.6f}")
    print(f"wall time: {state.wall_time:.2f}s")
    print(f"converged: {'yes' if state.converged else 'no'}")
    return EXIT_OK if state.converged else EXIT_NOT_CONVERGED


def write_prediction_csv(path, hm):
    J = hm.state_probs.shape[-1]
    header = ["cell_x", "cell_y"] + [f"prob_{j + 1}" for j in range(J)]
    header += [f"latent_mean_{j + 1}" for j in range(J)] + [f"latent_var_{j + 1}" for j in range(J)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in range(hm.grid.height):
            for col in range(hm.grid.width):
                vals = np.concatenate([hm.state_probs[row, col], hm.latent_mean[row, col], hm.latent_var[row, col]])
                w.writerow([col, row] + [f"{v:.12g}" for v in vals])


def cmd_predict(args):
    state = hbcc.load_state(args.state)
    grid = _grid_from_args(args)
    if grid is None:
        raise ConfigError("predict needs --width and --height")
    hm = hbcc.predict(state, grid, n_samples=args.n_samples, seed=args.seed)
    prefix = args.out_prefix
    write_prediction_csv(f"{prefix}_probs.csv", hm)
    if args.render:
        from .plotting import render_heatmap_png, write_ppm

        positive = hm.state_probs[..., -1]
        write_ppm(f"{prefix}_heatmap.ppm", positive, scale=args.scale)
        if not args.no_png:
            render_heatmap_png(f"{prefix}_heatmap.png", positive, grid, title="P(positive class)")
    return EXIT_OK


def write_truth_file(path, truth):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_x", "cell_y", "latent", "rho", "true_class"])
        g = truth.grid
        for row in range(g.height):
            for col in range(g.width):
                k = g.flat_index(col, row)
                w.writerow([col, row, f"{truth.f[k]:.12g}", f"{truth.rho[k]:.12g}", int(truth.t[k])])


def read_truth_file(path):
    """``(t, rho)`` arrays in flat (row-major) cell order."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: (int(r["cell_y"]), int(r["cell_x"])))
    return np.array([int(r["true_class"]) for r in rows]), np.array([float(r["rho"]) for r in rows])


def _scenario_frac(args):
    fracs = {"noisy": args.noisy_frac, "biased": args.biased_frac, "continuous": args.noisy_frac}
    frac = fracs[args.scenario]
    if frac is None:
        frac = 0.5
    if not 0.0 <= frac <= 1.0:
        raise ConfigError(f"unreliable fraction must be within [0, 1], got {frac}")
    return frac


def _add_scenario_args(p):
    p.add_argument("--scenario", choices=["noisy", "biased", "continuous"], default="noisy",
                   help="reporter mix: noisy or biased unreliable reporters at cell centres, "
                        "or noisy reporters at continuous locations (default noisy)")
    p.add_argument("--noisy-frac", type=float, default=None,
                   help="fraction of noisy reporters for noisy/continuous scenarios (default 0.5)")
    p.add_argument("--biased-frac", type=float, default=None,
                   help="fraction of biased reporters for the biased scenario (default 0.5)")
    p.add_argument("--width", type=int, default=20, help="grid width in cells (default 20)")
    p.add_argument("--height", type=int, default=20, help="grid height in cells (default 20)")
    p.add_argument("--length-scale", type=float, default=10.0,
                   help="length-scale of the ground-truth field and the models (default 10)")
    p.add_argument("--inverse-scale", type=float, default=1.2,
                   help="inverse output scale of the ground-truth field (default 1.2)")
    p.add_argument("--n-reporters", type=int, default=10, help="number of reporters (default 10)")
    p.add_argument("--n-reports", type=int, default=800, help="number of reports (default 800)")


def cmd_simulate(args):
    frac = _scenario_frac(args)
    sc = make_scenario(args.scenario, args.width, args.height, args.length_scale, args.inverse_scale,
                       args.n_reporters, frac, args.n_reports, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_file(out / "reports.csv", sc.reports)
    write_truth_file(out / "truth.csv", sc.truth)
    with open(out / "reporters.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "kind", "true_class", "label", "probability"])
        for s, (spec, conf) in enumerate(zip(sc.specs, sc.confusions)):
            for j in range(conf.shape[0]):
                for l in range(conf.shape[1]):
                    w.writerow([s, spec.kind.value, j + 1, l + 1, f"{conf[j, l]:.12g}"])
    print(f"wrote {len(sc.reports)} reports to {out}")
    return EXIT_OK


def _parse_list(text, cast, what):
    try:
        vals = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"invalid {what}: {text!r}") from None
    if not vals:
        raise ConfigError(f"empty {what}")
    return vals


def _parse_seeds(text):
    if ":" in text:
        a, b = text.split(":", 1)
        try:
            return list(range(int(a), int(b)))
        except ValueError:
            raise ConfigError(f"invalid seed range {text!r}") from None
    return _parse_list(text, int, "seeds")


def cmd_benchmark(args):
    methods = _parse_list(args.methods, str, "method list")
    unknown = [m for m in methods if m not in evaluation.METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {', '.join(unknown)}; valid methods: {', '.join(evaluation.METHODS)}")
    if "heatmapbcc" not in methods:
        methods = ["heatmapbcc"] + methods
    schedule = _parse_list(args.schedule, int, "schedule")
    seeds = _parse_seeds(args.seeds)
    frac = _scenario_frac(args)
    if max(schedule) > args.n_reports:
        raise ConfigError(f"schedule size {max(schedule)} exceeds --n-reports {args.n_reports}")
    config = load_config(args.config)[1] if args.config else ModelConfig(length_scale=args.length_scale)
    rows = evaluation.synthetic_benchmark(
        args.scenario, methods, schedule, seeds, args.width, args.height, args.length_scale, args.inverse_scale,
        args.n_reporters, frac, args.n_reports, config=config, n_samples=args.n_samples,
    )
    evaluation.write_results(args.out, rows)
    if args.summary:
        evaluation.write_summary(args.summary, evaluation.summarize(rows))
    if args.plot:
        from .plotting import plot_improvements

        plot_improvements(args.plot, rows, metric="auc")
    print(f"wrote {len(rows)} result rows to {args.out}")
    return EXIT_OK


def cmd_export_confusion(args):
    state = hbcc.load_state(args.state)
    write_confusion_file(args.out, state.confusion)
    return EXIT_OK


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="heatmapbcc",
        description="Bayesian heatmaps from unreliable crowdsourced reports.",
        epilog="Set HEATMAPBCC_THREADS to cap the number of BLAS threads.",
        formatter_class=fmt,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model to a report file", formatter_class=fmt,
                       description="Fit the model and write a state snapshot.\n\n" + REPORT_FORMAT + "\n" + CONFIG_FORMAT
                       + "\n\nWhen a grid is given (config or flags) reports are snapped to cell centres."
                       "\nExit status: 0 ok, 1 bad input, 2 numerical failure, 3 not converged (state written).")
    p.add_argument("reports", help="report CSV file")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", required=True, help="output state snapshot (.npz)")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--max-iterations", type=int, default=None, help="VB iteration cap (overrides the config)")
    _add_grid_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict a heatmap from a fitted state", formatter_class=fmt,
                       description="Predict class probabilities at every cell centre.\n\n"
                       "Writes PREFIX_probs.csv with columns cell_x,cell_y,prob_j...,latent_mean_j...,latent_var_j...\n"
                       "(one row per cell, x fastest). --render adds PREFIX_heatmap.ppm (binary P6 pixmap,\n"
                       "ramp blue at 0, pale yellow at 0.5, red at 1; bottom image row is the lowest y)\n"
                       "and PREFIX_heatmap.png.")
    p.add_argument("state", help="state snapshot written by fit")
    p.add_argument("--out-prefix", required=True, help="prefix for output files")
    p.add_argument("--render", action="store_true", help="also write heatmap images of the positive class")
    p.add_argument("--no-png", action="store_true", help="with --render, skip the matplotlib PNG")
    p.add_argument("--scale", type=int, default=8, help="pixels per cell in the PPM (default 8)")
    p.add_argument("--n-samples", type=int, default=1000, help="samples for E[rho] (default 1000)")
    p.add_argument("--seed", type=int, default=0, help="random seed for sampling (default 0)")
    _add_grid_args(p, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="generate a synthetic dataset", formatter_class=fmt,
                       description="Draw a ground-truth field and simulated reports.\n\n"
                       "Writes OUT_DIR/reports.csv (report format), OUT_DIR/truth.csv\n"
                       "(cell_x,cell_y,latent,rho,true_class) and OUT_DIR/reporters.csv\n"
                       "(source_id,kind,true_class,label,probability).")
    _add_scenario_args(p)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="run the incremental comparison on synthetic data", formatter_class=fmt,
                       description="Train methods on nested random subsets of a fresh dataset per seed.\n\n"
                       "Writes a CSV with columns method,seed,n_labels,auc,cross_entropy,nlpd.\n"
                       f"Methods: {', '.join(evaluation.METHODS)}. heatmapbcc is always included.\n"
                       "--summary writes medians/IQRs of values and of improvements over heatmapbcc\n"
                       "(kind,metric,method,n_labels,median,q25,q75,n).")
    _add_scenario_args(p)
    p.add_argument("--methods", default="heatmapbcc,kde,gp,ibcc", help="comma-separated methods")
    p.add_argument("--schedule", default="100,200,400,800", help="comma-separated increasing subset sizes")
    p.add_argument("--seeds", default="0:10", help="comma-separated seeds or a range A:B (default 0:10)")
    p.add_argument("--n-samples", type=int, default=1000, help="samples for E[rho] (default 1000)")
    p.add_argument("--config", help="TOML config for the model hyperparameters")
    p.add_argument("--out", required=True, help="result CSV")
    p.add_argument("--summary", help="optional summary CSV")
    p.add_argument("--plot", help="optional PNG of median AUC improvement")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("export-confusion", help="write learned confusion matrices", formatter_class=fmt,
                       description="Writes source_id,true_class,label,alpha,posterior_mean (1-based classes and labels).")
    p.add_argument("state", help="state snapshot written by fit")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_export_confusion)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ReportParseError, ReportError, ConfigError, hbcc.SnapshotError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
