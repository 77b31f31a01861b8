"""Metrics and the incremental train/test harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import rankdata

from . import baselines
from . import model as hbcc
from .core import GridSpec, ModelConfig, ReportSet
from .synthetic import STREAM_SUBSETS, make_scenario, rng_for

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "seed", "n_labels", "auc", "cross_entropy", "nlpd"]


def auc(scores, labels):
    """Area under the ROC curve (Mann-Whitney U, ties count one half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def cross_entropy(probs, gold_probs, eps=1e-9):
    """Mean binary cross entropy in bits, predictions clipped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(probs, dtype=float), eps, 1 - eps)
    g = np.asarray(gold_probs, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    return float(np.mean(-(g * np.log2(p) + (1 - g) * np.log2(1 - p))))


def nlpd_rho(latent_mean, latent_var, true_rho):
    """-log density of ``true_rho`` under the logistic-normal of a binary latent
    function; elementwise."""
    m = np.asarray(latent_mean, dtype=float)
    v = np.asarray(latent_var, dtype=float)
    rho = np.asarray(true_rho, dtype=float)
    if np.any((rho <= 0) | (rho >= 1)):
        raise ValueError("true rho must lie strictly inside (0, 1)")
    if np.any(v <= 0):
        raise ValueError("latent variance must be positive")
    x = np.log(rho) - np.log1p(-rho)
    log_norm = -0.5 * np.log(2 * np.pi * v) - 0.5 * (x - m) ** 2 / v
    return -(log_norm - np.log(rho * (1 - rho)))


def nlpd_beta(a, b, true_rho):
    """-log Beta(a, b) density of ``true_rho``."""
    return -beta_dist.logpdf(np.asarray(true_rho, dtype=float), a, b)


@dataclass
class Prediction:
    """Positive-class score per cell plus whatever density over rho the method has."""

    prob: np.ndarray
    latent_mean: Optional[np.ndarray] = None
    latent_var: Optional[np.ndarray] = None
    beta: Optional[tuple] = None

    def nlpd(self, true_rho):
        if true_rho is None:
            return math.nan
        if self.latent_mean is not None:
            return float(np.mean(nlpd_rho(self.latent_mean, self.latent_var, true_rho)))
        if self.beta is not None:
            return float(np.mean(nlpd_beta(self.beta[0], self.beta[1], true_rho)))
        return math.nan


@dataclass
class MethodContext:
    config: ModelConfig
    ibcc_nu0: tuple = (1.0, 1.0)
    kde_bandwidth: Optional[float] = None
    nn_k: int = 5
    n_samples: int = 1000
    seed: int = 0


def _binary_latent(mean, var):
    # positive-class latent is f_2 - f_1 under independent class posteriors
    return mean[:, -1] - mean[:, 0], var[:, -1] + var[:, 0]


def run_heatmapbcc(reports, grid, ctx: MethodContext):
    state = hbcc.fit(reports, ctx.config.with_(rng_seed=ctx.seed))
    hm = hbcc.predict(state, grid, ctx.n_samples, ctx.seed)
    m, v = _binary_latent(hm.flat("latent_mean"), hm.flat("latent_var"))
    return Prediction(hm.flat("state_probs")[:, -1], m, v)


def run_ibcc(reports, grid, ctx: MethodContext):
    state = baselines.ibcc_fit(reports, ctx.config.alpha0_for(reports.num_sources), ctx.ibcc_nu0)
    probs = baselines.ibcc_predict(state, reports, grid)
    return Prediction(probs[:, -1], beta=(state.kappa_params[-1], state.kappa_params[:-1].sum()))


def _gp_prediction(p):
    m, v = _binary_latent(p.latent_mean, p.latent_var)
    return Prediction(p.prob[:, -1], m, v)


def run_gp(reports, grid, ctx: MethodContext):
    cfg = ctx.config
    return _gp_prediction(baselines.gp_only_fit_predict(reports, grid, cfg.length_scale, cfg.a0, cfg.b0, ctx.n_samples, ctx.seed))


def run_ibcc_gp(reports, grid, ctx: MethodContext):
    cfg = ctx.config
    p = baselines.ibcc_gp_pipeline(reports, grid, cfg.length_scale, cfg.alpha0_for(reports.num_sources), ctx.ibcc_nu0,
                                   cfg.a0, cfg.b0, ctx.n_samples, ctx.seed)
    return _gp_prediction(p)


def run_kde(reports, grid, ctx: MethodContext):
    bw = ctx.kde_bandwidth or ctx.config.length_scale
    return Prediction(baselines.kde_predict(reports, grid, bw))


def run_mv(reports, grid, ctx: MethodContext):
    return Prediction((baselines.majority_vote(reports, grid) == reports.num_labels).astype(float))


def run_nn(reports, grid, ctx: MethodContext):
    return Prediction(baselines.nearest_neighbour(reports, grid, ctx.nn_k))


METHODS: dict = {
    "heatmapbcc": run_heatmapbcc,
    "kde": run_kde,
    "gp": run_gp,
    "ibcc": run_ibcc,
    "ibcc+gp": run_ibcc_gp,
    "mv": run_mv,
    "nn": run_nn,
}


@dataclass
class Gold:
    t: np.ndarray  # true class per cell, positive class == max label
    rho: Optional[np.ndarray] = None  # true positive-class probability per cell
    num_labels: int = 2

    @property
    def positive(self):
        return (np.asarray(self.t) == self.num_labels).astype(float)


def nested_subsets(n_reports, schedule, seed):
    """Index arrays for each subset size; each is a prefix of one seeded permutation."""
    sizes = list(schedule)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("schedule must be strictly increasing")
    if sizes and (sizes[0] < 1 or sizes[-1] > n_reports):
        raise ValueError(f"schedule sizes must lie in [1, {n_reports}]")
    perm = rng_for(seed, STREAM_SUBSETS).permutation(n_reports)
    return [np.sort(perm[:k]) for k in sizes]


def evaluate(pred: Prediction, gold: Gold):
    y = gold.positive
    try:
        a = auc(pred.prob, y)
    except ValueError:
        a = math.nan
    return a, cross_entropy(pred.prob, y), pred.nlpd(gold.rho)


def incremental_experiment(methods, reports: ReportSet, grid: GridSpec, gold: Gold, schedule, seeds, ctx: MethodContext):
    """Train every method on nested random subsets and score each prediction.

    Returns result rows (dicts with RESULT_COLUMNS). A failing method yields a
    row of NaNs instead of aborting the sweep.
    """
    rows = []
    for seed in seeds:
        subsets = nested_subsets(len(reports), schedule, seed)
        for idx in subsets:
            sub = reports.subset(idx)
            for name in methods:
                fn = METHODS[name] if isinstance(name, str) else name
                label = name if isinstance(name, str) else getattr(fn, "__name__", str(fn))
                try:
                    pred = fn(sub, grid, MethodContext(**{**ctx.__dict__, "seed": seed}))
                    a, ce, nl = evaluate(pred, gold)
                except Exception as exc:  # recorded, sweep continues
                    log.warning("%s failed on seed %s with %d labels: %s", label, seed, len(idx), exc)
                    a = ce = nl = math.nan
                rows.append({"method": label, "seed": seed, "n_labels": len(idx), "auc": a, "cross_entropy": ce, "nlpd": nl})
    return rows


def synthetic_benchmark(kind, methods, schedule, seeds, width=20, height=20, length_scale=10.0, inverse_scale=1.2,
                        n_reporters=10, frac=0.5, n_reports=800, config: Optional[ModelConfig] = None,
                        n_samples=1000):
    """One fresh synthetic dataset per seed, then the incremental procedure on it."""
    config = config or ModelConfig(length_scale=length_scale)
    rows = []
    for seed in seeds:
        sc = make_scenario(kind, width, height, length_scale, inverse_scale, n_reporters, frac, n_reports, seed)
        gold = Gold(sc.truth.t, sc.truth.rho)
        ctx = MethodContext(config=config, n_samples=n_samples, seed=seed)
        rows += incremental_experiment(methods, sc.reports, sc.grid, gold, schedule, [seed], ctx)
    return rows


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.12g}"
    return str(v)


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def read_results(path):
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({
                "method": row["method"], "seed": int(row["seed"]), "n_labels": int(row["n_labels"]),
                "auc": float(row["auc"]), "cross_entropy": float(row["cross_entropy"]), "nlpd": float(row["nlpd"]),
            })
        return rows


# lower is better for these
_LOWER_BETTER = {"cross_entropy", "nlpd"}


def improvements(rows, reference="heatmapbcc", metric="auc"):
    """Per (method, n_labels): array over seeds of the reference's improvement.

    Positive always means the reference did better.
    """
    ref = {(r["seed"], r["n_labels"]): r[metric] for r in rows if r["method"] == reference}
    out = {}
    for r in rows:
        if r["method"] == reference or (r["seed"], r["n_labels"]) not in ref:
            continue
        d = ref[(r["seed"], r["n_labels"])] - r[metric]
        if metric in _LOWER_BETTER:
            d = -d
        out.setdefault((r["method"], r["n_labels"]), []).append(d)
    return {k: np.array(v) for k, v in out.items()}


def summarize(rows, reference="heatmapbcc"):
    """Median and inter-quartile range per method/size, and of improvements over the reference."""
    out = []
    keys = sorted({(r["method"], r["n_labels"]) for r in rows}, key=lambda k: (k[0], k[1]))
    for metric in ("auc", "cross_entropy", "nlpd"):
        for method, n in keys:
            vals = np.array([r[metric] for r in rows if r["method"] == method and r["n_labels"] == n], dtype=float)
            out.append(_summary_row("value", metric, method, n, vals))
        for (method, n), diffs in sorted(improvements(rows, reference, metric).items()):
            out.append(_summary_row("improvement", metric, method, n, diffs))
    return out


def _summary_row(kind, metric, method, n, vals):
    vals = vals[~np.isnan(vals)]
    if len(vals):
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
    else:
        q25 = med = q75 = math.nan
    return {"kind": kind, "metric": metric, "method": method, "n_labels": n, "median": med, "q25": q25, "q75": q75,
            "n": len(vals)}


SUMMARY_COLUMNS = ["kind", "metric", "method", "n_labels", "median", "q25", "q75", "n"]


def write_summary(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in summary:
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
