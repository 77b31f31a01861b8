"""Synthetic ground truth and simulated crowds of unreliable reporters.

All randomness comes from numpy's PCG64 seeded through
``SeedSequence([seed, stream])`` so every stream is reproducible on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import GridSpec, ReportSet, grid_points
from .gpc import robust_cho_factor
from .kernels import gram

STREAM_TRUTH = 1
STREAM_CROWD = 2
STREAM_REPORTS = 3
STREAM_SUBSETS = 4


def rng_for(seed, stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


class ReporterKind(str, Enum):
    RELIABLE = "reliable"
    NOISY = "noisy"
    BIASED = "biased"


_DEFAULT_PARAMS = {
    ReporterKind.RELIABLE: [[10.0, 1.0], [1.0, 10.0]],
    ReporterKind.NOISY: [[5.0, 5.0], [5.0, 5.0]],
    ReporterKind.BIASED: [[7.0, 1.0], [6.0, 2.0]],
}


@dataclass(frozen=True)
class ReporterSpec:
    kind: ReporterKind
    dirichlet_params: np.ndarray

    @classmethod
    def of(cls, kind, params=None):
        kind = ReporterKind(kind)
        p = np.array(_DEFAULT_PARAMS[kind] if params is None else params, dtype=float)
        if p.ndim != 2 or not np.all(p > 0):
            raise ValueError("dirichlet_params must be a positive J x L matrix")
        return cls(kind, p)


def crowd_specs(n_reporters, frac_unreliable, unreliable="noisy"):
    """Reliable reporters first, then ``round(frac * n)`` noisy or biased ones."""
    if not 0 <= frac_unreliable <= 1:
        raise ValueError(f"fraction must be within [0, 1], got {frac_unreliable}")
    n_bad = int(round(frac_unreliable * n_reporters))
    return [ReporterSpec.of("reliable")] * (n_reporters - n_bad) + [ReporterSpec.of(unreliable)] * n_bad


@dataclass(frozen=True)
class GroundTruth:
    grid: GridSpec
    f: np.ndarray
    rho: np.ndarray  # probability of the positive class (label 2)
    t: np.ndarray  # true class in {1, 2}


def draw_ground_truth(grid: GridSpec, length_scale=20.0, inverse_scale=1.2, seed=0) -> GroundTruth:
    """f ~ N(0, K / inverse_scale) over the cell centres, rho = sigmoid(f), t ~ Bernoulli(rho)."""
    pts = grid_points(grid)
    rng = rng_for(seed, STREAM_TRUTH)
    K = gram(pts, pts, length_scale) / inverse_scale
    # smallest workable jitter, so near-constant fields stay near-constant
    L = np.tril(robust_cho_factor(K, start=1e-12)[0])
    f = L @ rng.standard_normal(len(pts))
    rho = 1.0 / (1.0 + np.exp(-f))
    t = np.where(rng.uniform(size=len(pts)) < rho, 2, 1)
    return GroundTruth(grid, f, rho, t)


def simulate_crowd(specs, seed=0):
    """Draw each reporter's confusion matrix row by row from its Dirichlet parameters."""
    rng = rng_for(seed, STREAM_CROWD)
    return [np.array([rng.dirichlet(row) for row in spec.dirichlet_params]) for spec in specs]


def generate_reports(truth_t, confusions, n_reports, grid: GridSpec, location_mode="grid", seed=0) -> ReportSet:
    """Sample ``n_reports`` (reporter, location) pairs uniformly and draw each label
    from the reporter's confusion row for the true class.

    ``location_mode="grid"`` reports at cell centres (repeat visits share a
    target); ``"continuous"`` draws uniform coordinates, each report its own
    target, with the true class taken from the containing cell.
    """
    if n_reports < 1:
        raise ValueError("n_reports must be >= 1")
    truth_t = np.asarray(truth_t, dtype=int)
    rng = rng_for(seed, STREAM_REPORTS)
    S = len(confusions)
    L = confusions[0].shape[1]
    sources = rng.integers(0, S, size=n_reports)
    if location_mode == "grid":
        cells = rng.integers(0, grid.n_cells, size=n_reports)
        coords = grid_points(grid)[cells]
    elif location_mode == "continuous":
        u = rng.uniform(size=(n_reports, 2))
        coords = np.asarray(grid.origin) + u * np.array([grid.width * grid.cell_size[0], grid.height * grid.cell_size[1]])
        cells = np.array([grid.flat_index(*grid.cell_of(c)) for c in coords])
    else:
        raise ValueError(f"unknown location_mode {location_mode!r}")
    draws = rng.uniform(size=n_reports)
    labels = np.empty(n_reports, dtype=int)
    for k in range(n_reports):
        row = confusions[sources[k]][truth_t[cells[k]] - 1]
        labels[k] = min(int(np.searchsorted(np.cumsum(row), draws[k], side="right")), L - 1) + 1
    return ReportSet.from_points(coords, sources, labels, num_sources=S, num_labels=L)


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec
    truth: GroundTruth
    confusions: list
    reports: ReportSet
    specs: list


def make_scenario(kind="noisy", width=20, height=20, length_scale=10.0, inverse_scale=1.2, n_reporters=10,
                  frac=0.5, n_reports=800, seed=0) -> Scenario:
    """One dataset of the noisy / biased / continuous-location experiments."""
    grid = GridSpec(width, height)
    if kind == "continuous":
        specs, mode = crowd_specs(n_reporters, frac, "noisy"), "continuous"
    elif kind in ("noisy", "biased"):
        specs, mode = crowd_specs(n_reporters, frac, kind), "grid"
    else:
        raise ValueError(f"unknown scenario {kind!r}")
    truth = draw_ground_truth(grid, length_scale, inverse_scale, seed)
    confusions = simulate_crowd(specs, seed)
    reports = generate_reports(truth.t, confusions, n_reports, grid, mode, seed)
    return Scenario(grid, truth, confusions, reports, specs)
