"""HeatmapBCC: joint variational inference over report confusion matrices,
true states at report locations, and GP-distributed state probabilities."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .confusion import ConfusionFactor, dirichlet_kl_terms, expected_log_confusion, update_confusion
from .core import GridSpec, ModelConfig, ReportError, ReportSet, grid_points
from .gpc import (
    InverseScaleFactor,
    LatentFactor,
    expected_log_softmax,
    gamma_kl_terms,
    gaussian_kl_terms,
    latent_factor_at_prior,
    prior_noise_params,
    robust_cho_factor,
    sample_state_probs,
    softmax,
    update_latent,
)
from .kernels import JITTER, gram, optimize_length_scale

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
STREAM_INIT = 0x1417


@dataclass
class FitState:
    reports: ReportSet
    config: ModelConfig
    r: np.ndarray
    confusion: ConfusionFactor
    latent: LatentFactor
    nu0: np.ndarray
    lower_bounds: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    @property
    def n_iter(self):
        return len(self.lower_bounds)

    @property
    def inv_scale(self):
        return self.latent.inv_scale


@dataclass
class HeatmapGrid:
    """Per-cell predictions, arrays shaped ``(height, width, J)`` (row = y index)."""

    grid: GridSpec
    state_probs: np.ndarray
    rho_mean: np.ndarray
    latent_mean: np.ndarray
    latent_var: np.ndarray

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape(-1, a.shape[-1])


def report_log_terms(e_log_pi, reports: ReportSet) -> np.ndarray:
    """Sum over reports at each location of E[log pi_{j, label}], shape ``(N, J)``."""
    J = e_log_pi.shape[1]
    out = np.zeros((reports.n_locations, J))
    if len(reports):
        contrib = e_log_pi[reports.sources, :, reports.labels - 1]
        for j in range(J):
            np.add.at(out[:, j], reports.loc_index, contrib[:, j])
    return out


def update_responsibilities(e_log_rho, e_log_pi, reports: ReportSet) -> np.ndarray:
    """q(t_i = j) proportional to exp(E[log rho_ij] + sum of the reporting sources' E[log pi])."""
    e_log_rho = np.asarray(e_log_rho, dtype=float)
    if not np.all(np.isfinite(e_log_rho)):
        raise ValueError("E[log rho] must be finite")
    logits = e_log_rho + report_log_terms(np.asarray(e_log_pi, dtype=float), reports)
    m = logits.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        i = int(np.flatnonzero(~np.isfinite(m[:, 0]))[0])
        raise ValueError(f"responsibilities at location {i} cannot be normalised")
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def _noise_prior(config: ModelConfig):
    if config.nu0 is not None:
        total = float(np.sum(config.nu0))
        return np.column_stack([config.nu0, total - config.nu0])
    return prior_noise_params(config.prior_mean, config.b0 / config.a0, config.moment_samples, config.rng_seed)


def _kernel_factors(points, length_scale):
    K = gram(points, points, length_scale)
    return K, robust_cho_factor(K + JITTER * np.eye(len(K)))


def _class_sum(a):
    # per-class sums added in class order keep label swaps exact
    return sum(float(np.sum(a[:, j])) for j in range(a.shape[1]))


def lower_bound(state: FitState, K_chol=None, terms=False):
    """Variational lower bound on the log evidence.

    E[log rho] in the target term is a Monte Carlo estimate under q(f) with a
    fixed seed, so the bound is deterministic for a given state.
    """
    reports, cfg, r = state.reports, state.config, state.r
    latent = state.latent
    if K_chol is None and reports.n_locations:
        _, K_chol = _kernel_factors(reports.locations, latent.length_scale)
    e_log_pi = expected_log_confusion(state.confusion)
    data = _class_sum(r * report_log_terms(e_log_pi, reports))
    if reports.n_locations:
        e_log_rho = expected_log_softmax(latent.f_hat, latent.marginal_var(), cfg.n_samples, cfg.rng_seed)
        with np.errstate(divide="ignore", invalid="ignore"):
            r_log_r = np.where(r > 0, r * np.log(r), 0.0)
        targets = _class_sum(r * e_log_rho) - _class_sum(r_log_r)
        latent_kl = gaussian_kl_terms(latent, K_chol)
    else:
        targets = latent_kl = 0.0
    scale_kl = gamma_kl_terms(latent.inv_scale, cfg.a0, cfg.b0)
    pi_kl = dirichlet_kl_terms(state.confusion.alpha, state.confusion.alpha0, e_log_pi)
    parts = {"data": data, "targets": targets, "latent": latent_kl, "scale": scale_kl, "confusion": pi_kl}
    total = data + targets + latent_kl + scale_kl + pi_kl
    return (total, parts) if terms else total


def _initial_state(reports, config, init: "FitState | None"):
    J = config.num_classes
    N = reports.n_locations
    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, STREAM_INIT]))
    r = 1.0 / J + rng.uniform(-0.01, 0.01, size=(N, J))
    r /= r.sum(axis=1, keepdims=True)
    alpha0 = config.alpha0_for(reports.num_sources)
    latent = latent_factor_at_prior(reports.locations, config.prior_mean, config.length_scale, config.a0, config.b0)
    alpha = alpha0.copy()
    if init is not None:
        if init.confusion.alpha.shape[0] > reports.num_sources:
            raise ReportError("previous state has more sources than the new reports")
        alpha[: init.confusion.alpha.shape[0]] = init.confusion.alpha
        prev = {tuple(c.tolist()): i for i, c in enumerate(init.reports.locations)}
        for i, c in enumerate(reports.locations):
            k = prev.get(tuple(c.tolist()))
            if k is not None:
                latent.f_hat[i] = init.latent.f_hat[k]
                r[i] = init.r[k]
        if init.latent.length_scale == config.length_scale:
            latent.inv_scale = list(init.latent.inv_scale)
    return r, ConfusionFactor(alpha, alpha0), latent


def fit(reports: ReportSet, config: ModelConfig, init: "FitState | None" = None) -> FitState:
    """Run the VB loop until the lower bound changes by less than the tolerance.

    ``init`` warm-starts from a previous state (confusion posteriors, latent
    means at shared locations and inverse scales). Hitting ``max_iterations``
    returns a state with ``converged=False``.
    """
    if len(reports) == 0:
        raise ReportError("fit needs at least one report")
    if reports.num_labels != config.num_labels:
        raise ReportError(f"reports have {reports.num_labels} labels, config expects {config.num_labels}")
    if config.optimize_length_scale:
        l_best = fit_length_scale(reports, config)
        config = config.with_(length_scale=l_best, optimize_length_scale=False)
    t0 = time.perf_counter()
    r, confusion, latent = _initial_state(reports, config, init)
    nu0 = _noise_prior(config)
    K, K_chol = _kernel_factors(reports.locations, config.length_scale)
    tol = config.tolerance_for(reports.n_locations)
    state = FitState(reports, config, r, confusion, latent, nu0)
    prev = -math.inf
    for it in range(1, config.max_iterations + 1):
        e_log_pi = expected_log_confusion(state.confusion)
        # the log-normaliser of E[log rho] is shared by all classes and cancels
        state.r = update_responsibilities(state.latent.f_hat, e_log_pi, reports)
        state.confusion = update_confusion(state.confusion.alpha0, state.r, reports)
        state.latent = update_latent(
            state.latent, state.r, nu0, config.a0, config.b0, K, K_chol,
            tol=config.inner_tol, max_iter=config.inner_max_iter,
        )
        lb = lower_bound(state, K_chol)
        state.lower_bounds.append(lb)
        log.debug("iteration %d: lower bound %.6f", it, lb)
        if it >= 3 and abs(lb - prev) < tol:
            state.converged = True
            break
        prev = lb
    state.wall_time = time.perf_counter() - t0
    return state


def fit_length_scale(reports: ReportSet, config: ModelConfig, bounds=None, xtol=0.05):
    """Maximum-likelihood-II length-scale: maximise the converged lower bound."""
    bounds = bounds or config.length_scale_bounds
    base = config.with_(optimize_length_scale=False)

    def objective(l):
        return fit(reports, base.with_(length_scale=l)).lower_bounds[-1]

    return optimize_length_scale(objective, bounds, xtol=xtol)


def _grid_report_terms(state: FitState, grid: GridSpec, points):
    """Report log-terms moved onto the grid cells whose centres are training locations."""
    e_log_pi = expected_log_confusion(state.confusion)
    terms = report_log_terms(e_log_pi, state.reports)
    out = np.zeros((len(points), state.config.num_classes))
    for i, loc in enumerate(state.reports.locations):
        if len(loc) != 2:
            continue
        cell = grid.cell_of(loc)
        if cell is None:
            continue
        k = grid.flat_index(*cell)
        if np.allclose(points[k], loc, rtol=0, atol=1e-9 * max(grid.cell_size)):
            out[k] += terms[i]
    return out


def predict(state: FitState, grid: GridSpec, n_samples=1000, seed=0, block=2000) -> HeatmapGrid:
    """Posterior state probabilities and E[rho] at every cell centre of ``grid``."""
    pts = grid_points(grid)
    cfg = state.config
    f_star, v_star = state.latent.predict(pts, cfg.prior_mean, state.r, block=block)
    rho = np.empty_like(f_star)
    for start in range(0, len(pts), block):
        sl = slice(start, start + block)
        rho[sl] = sample_state_probs(f_star[sl], v_star[sl], n_samples, seed + start)
    logits = f_star + _grid_report_terms(state, grid, pts)
    probs = softmax(logits, axis=1)
    shape = (grid.height, grid.width, cfg.num_classes)
    return HeatmapGrid(grid, probs.reshape(shape), rho.reshape(shape), f_star.reshape(shape), v_star.reshape(shape))


def incremental_update(state: FitState, new_reports: ReportSet) -> FitState:
    """Merge ``new_reports`` and restart the VB loop from the current factors."""
    if new_reports.num_sources > state.reports.num_sources or (
        len(new_reports) and int(new_reports.sources.max()) >= state.reports.num_sources
    ):
        raise ReportError(f"source id outside [0, {state.reports.num_sources})")
    merged = state.reports.merge(new_reports) if len(new_reports) else state.reports
    cfg = state.config.with_(optimize_length_scale=False)
    return fit(merged, cfg, init=state)


# --- snapshots ------------------------------------------------------------


def config_to_dict(cfg: ModelConfig):
    return {
        "num_classes": cfg.num_classes,
        "alpha0": cfg.alpha0.tolist(),
        "nu0": None if cfg.nu0 is None else cfg.nu0.tolist(),
        "a0": cfg.a0,
        "b0": cfg.b0,
        "length_scale": cfg.length_scale,
        "prior_mean": cfg.prior_mean.tolist(),
        "max_iterations": cfg.max_iterations,
        "convergence_tol": cfg.convergence_tol,
        "rng_seed": cfg.rng_seed,
        "source_alpha0": {str(k): v.tolist() for k, v in cfg.source_alpha0.items()},
        "n_samples": cfg.n_samples,
        "moment_samples": cfg.moment_samples,
        "inner_tol": cfg.inner_tol,
        "inner_max_iter": cfg.inner_max_iter,
        "optimize_length_scale": cfg.optimize_length_scale,
        "length_scale_bounds": list(cfg.length_scale_bounds),
    }


def config_from_json(d):
    d = dict(d)
    d["source_alpha0"] = {int(k): v for k, v in d.get("source_alpha0", {}).items()}
    d["length_scale_bounds"] = tuple(d["length_scale_bounds"])
    return ModelConfig(**d)


def save_state(path, state: FitState):
    """Write an uncompressed ``.npz`` snapshot (format version ``SNAPSHOT_VERSION``)."""
    rep, lat = state.reports, state.latent
    meta = {
        "format": "heatmapbcc-state",
        "version": SNAPSHOT_VERSION,
        "config": config_to_dict(state.config),
        "num_sources": rep.num_sources,
        "num_labels": rep.num_labels,
        "converged": bool(state.converged),
        "length_scale": lat.length_scale,
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            locations=rep.locations,
            loc_index=rep.loc_index,
            sources=rep.sources,
            labels=rep.labels,
            r=state.r,
            alpha=state.confusion.alpha,
            alpha0=state.confusion.alpha0,
            f_hat=lat.f_hat,
            sigma=lat.sigma,
            mu=lat.mu,
            G=lat.G,
            Q=lat.Q,
            scale_ab=np.array([[s.a, s.b] for s in lat.inv_scale], dtype=float),
            nu0=state.nu0,
            lower_bounds=np.array(state.lower_bounds, dtype=float),
            wall_time=np.array(state.wall_time),
        )


class SnapshotError(ValueError):
    pass


def load_state(path) -> FitState:
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(data["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise SnapshotError(f"{path}: not a state snapshot ({exc})") from exc
    if meta.get("format") != "heatmapbcc-state":
        raise SnapshotError(f"{path}: not a state snapshot")
    if meta.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"{path}: unsupported snapshot version {meta.get('version')}")
    reports = ReportSet(data["locations"], data["loc_index"], data["sources"], data["labels"],
                        meta["num_sources"], meta["num_labels"])
    latent = LatentFactor(
        points=reports.locations,
        f_hat=data["f_hat"],
        sigma=data["sigma"],
        mu=data["mu"],
        G=data["G"],
        Q=data["Q"],
        length_scale=meta["length_scale"],
        inv_scale=[InverseScaleFactor(float(a), float(b)) for a, b in data["scale_ab"]],
    )
    return FitState(
        reports=reports,
        config=config_from_json(meta["config"]),
        r=data["r"],
        confusion=ConfusionFactor(data["alpha"], data["alpha0"]),
        latent=latent,
        nu0=data["nu0"],
        lower_bounds=data["lower_bounds"].tolist(),
        converged=meta["converged"],
        wall_time=float(data["wall_time"]),
    )
