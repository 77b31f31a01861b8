"""Comparison methods: IBCC, KDE, GP classifier, IBCC+GP, majority vote, k-NN.

Binary methods treat label/class 2 as the positive class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import psi

from .confusion import ConfusionFactor, expected_log_confusion, update_confusion
from .core import GridSpec, ReportSet, grid_points
from .gpc import fit_latent, sample_state_probs
from .model import update_responsibilities


@dataclass
class IbccState:
    r: np.ndarray
    confusion: ConfusionFactor
    kappa_params: np.ndarray
    nu0: np.ndarray
    n_iter: int = 0
    converged: bool = False

    @property
    def kappa_mean(self):
        return self.kappa_params / self.kappa_params.sum()


def ibcc_fit(reports: ReportSet, alpha0, nu0, tol=1e-6, max_iter=500) -> IbccState:
    """Variational IBCC: global class proportions kappa instead of a spatial prior.

    Stops when no responsibility moves by more than ``tol``.
    """
    nu0 = np.asarray(nu0, dtype=float)
    J = len(nu0)
    alpha0 = np.asarray(alpha0, dtype=float)
    if alpha0.ndim == 2:
        alpha0 = np.repeat(alpha0[None], reports.num_sources, axis=0)
    N = reports.n_locations
    confusion = ConfusionFactor(alpha0.copy(), alpha0)
    nu = nu0.copy()
    r = np.full((N, J), 1.0 / J)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        e_log_kappa = psi(nu) - psi(nu.sum())
        r_new = update_responsibilities(np.broadcast_to(e_log_kappa, (N, J)), expected_log_confusion(confusion), reports)
        confusion = update_confusion(alpha0, r_new, reports)
        nu = nu0 + r_new.sum(axis=0)
        delta = float(np.max(np.abs(r_new - r))) if N else 0.0
        r = r_new
        if delta < tol:
            converged = True
            break
    return IbccState(r, confusion, nu, nu0, it, converged)


def _cell_lookup(reports: ReportSet, grid: GridSpec):
    """Flat grid index of each report location (-1 if it is not a cell centre)."""
    pts = grid_points(grid)
    out = np.full(reports.n_locations, -1)
    for i, loc in enumerate(reports.locations):
        cell = grid.cell_of(loc)
        if cell is not None:
            k = grid.flat_index(*cell)
            if np.allclose(pts[k], loc, rtol=0, atol=1e-9 * max(grid.cell_size)):
                out[i] = k
    return out


def ibcc_predict(state: IbccState, reports: ReportSet, grid: GridSpec):
    """Per-cell class probabilities ``(n_cells, J)``; cells without reports get E[kappa]."""
    probs = np.tile(state.kappa_mean, (grid.n_cells, 1))
    cells = _cell_lookup(reports, grid)
    has = cells >= 0
    probs[cells[has]] = state.r[has]
    return probs


def kde_predict(reports: ReportSet, grid: GridSpec, bandwidth, smoothing=1.0):
    """Ratio of Gaussian-kernel mass at positive reports to mass at all reports.

    ``smoothing`` pseudo-mass is added to each class, so cells far from every
    report tend to 0.5.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    pts = grid_points(grid)
    if len(reports) == 0:
        return np.full(len(pts), 0.5)
    locs = reports.locations[reports.loc_index]
    pos = (reports.labels == reports.num_labels).astype(float)
    d2 = ((pts[:, None, :] - locs[None, :, :]) ** 2).sum(axis=-1)
    k = np.exp(-0.5 * d2 / bandwidth**2)
    return (k @ pos + smoothing) / (k.sum(axis=1) + 2 * smoothing)


@dataclass
class GpPrediction:
    prob: np.ndarray  # (n_cells, J) E[rho*]
    latent_mean: np.ndarray
    latent_var: np.ndarray


def label_fractions(reports: ReportSet, num_classes=None):
    """Per-location fraction of reports with each label (duplicates averaged)."""
    counts = reports.label_counts()
    if num_classes is not None and num_classes != counts.shape[1]:
        raise ValueError("label fractions need num_labels == num_classes")
    return counts / counts.sum(axis=1, keepdims=True)


def _gp_on_targets(points, targets, grid, length_scale, a0, b0, n_samples, seed):
    J = targets.shape[1] if targets.ndim == 2 else 2
    latent = fit_latent(points, targets, length_scale, a0, b0, seed=seed)
    f_star, v_star = latent.predict(grid_points(grid), np.zeros(J), targets)
    prob = sample_state_probs(f_star, v_star, n_samples, seed)
    return GpPrediction(prob, f_star, v_star)


def gp_only_fit_predict(reports: ReportSet, grid: GridSpec, length_scale, a0=1.0, b0=1.0, n_samples=1000, seed=0):
    """GP classifier that treats every report as an equally reliable label."""
    if len(reports) == 0:
        return _gp_on_targets(np.zeros((0, 2)), np.zeros((0, reports.num_labels)), grid, length_scale, a0, b0, n_samples, seed)
    return _gp_on_targets(reports.locations, label_fractions(reports), grid, length_scale, a0, b0, n_samples, seed)


def ibcc_gp_pipeline(reports: ReportSet, grid: GridSpec, length_scale, alpha0, nu0, a0=1.0, b0=1.0, n_samples=1000,
                     seed=0):
    """IBCC posteriors at the report locations used as soft GP training targets."""
    if len(reports) == 0:
        return _gp_on_targets(np.zeros((0, 2)), np.zeros((0, len(nu0))), grid, length_scale, a0, b0, n_samples, seed)
    state = ibcc_fit(reports, alpha0, nu0)
    return _gp_on_targets(reports.locations, state.r, grid, length_scale, a0, b0, n_samples, seed)


def majority_vote(reports: ReportSet, grid: GridSpec):
    """Most frequent label per cell; ties and empty cells go to label 1."""
    out = np.ones(grid.n_cells, dtype=int)
    if len(reports) == 0:
        return out
    counts = reports.label_counts()
    cells = _cell_lookup(reports, grid)
    for i, k in enumerate(cells):
        if k < 0:
            continue
        c = counts[i]
        winners = np.flatnonzero(c == c.max())
        out[k] = winners[0] + 1 if len(winners) == 1 else 1
    return out


def nearest_neighbour(reports: ReportSet, grid: GridSpec, k=5):
    """Fraction of positive labels among the ``k`` nearest reports (stable on distance ties)."""
    pts = grid_points(grid)
    if len(reports) == 0:
        return np.full(len(pts), 0.5)
    locs = reports.locations[reports.loc_index]
    pos = (reports.labels == reports.num_labels).astype(float)
    k = min(k, len(reports))
    d2 = ((pts[:, None, :] - locs[None, :, :]) ** 2).sum(axis=-1)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return pos[idx].mean(axis=1)

