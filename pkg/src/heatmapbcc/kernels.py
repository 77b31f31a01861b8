"""Matern 3/2 covariance, Gram matrices and length-scale search."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

JITTER = 1e-6
SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelSpec:
    length_scale: float
    inverse_scale: float = 1.0
    family: str = "matern32"

    def __post_init__(self):
        if self.family != "matern32":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if not (self.length_scale > 0 and math.isfinite(self.length_scale)):
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if not (self.inverse_scale > 0 and math.isfinite(self.inverse_scale)):
            raise ValueError(f"inverse_scale must be positive, got {self.inverse_scale}")


def matern32(distance, length_scale):
    """(1 + sqrt(3) d / l) exp(-sqrt(3) d / l); works elementwise on arrays."""
    d = np.asarray(distance, dtype=float)
    if not np.all(np.isfinite(d)) or not math.isfinite(length_scale):
        raise ValueError("matern32 needs finite inputs")
    if np.any(d < 0) or length_scale <= 0:
        raise ValueError("distance must be >= 0 and length_scale > 0")
    z = SQRT3 * d / length_scale
    out = (1.0 + z) * np.exp(-z)
    return float(out) if out.ndim == 0 else out


def _as_points(p):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p.reshape(-1, 1)
    return p


def gram(points_a, points_b, spec) -> np.ndarray:
    """Unscaled kernel matrix between two point sets (``spec`` may be a length-scale).

    No jitter and no ``1/inverse_scale`` factor is applied here.
    """
    length_scale = spec.length_scale if isinstance(spec, KernelSpec) else float(spec)
    a, b = _as_points(points_a), _as_points(points_b)
    if a.shape[1] != b.shape[1] and len(a) and len(b):
        raise ValueError(f"dimensionality mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return matern32(cdist(a, b), length_scale)


def jittered(K, jitter=JITTER):
    return K + jitter * np.eye(len(K))


class LengthScaleSearchError(RuntimeError):
    pass


INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def optimize_length_scale(objective, bounds, xtol=0.01, max_evals=60):
    """Maximise ``objective(l)`` over ``bounds`` by golden-section search on log(l).

    Non-finite objective values are treated as -inf. A flat objective returns the
    midpoint of the bounds. ``xtol`` is the stopping width in log space.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (0 < lo < hi):
        raise ValueError(f"need 0 < l_min < l_max, got {bounds}")
    cache = {}

    def f(u):
        if u not in cache:
            v = objective(math.exp(u))
            cache[u] = float(v) if v is not None and math.isfinite(v) else -math.inf
        return cache[u]

    a, b = math.log(lo), math.log(hi)
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol and len(cache) < max_evals:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = f(d)
    f(a), f(b)
    values = np.array(list(cache.values()))
    if not np.any(np.isfinite(values)):
        raise LengthScaleSearchError(f"objective non-finite everywhere in [{lo}, {hi}]")
    if np.all(values == values[0]):
        return 0.5 * (lo + hi)
    best = max(cache, key=lambda u: (cache[u], -abs(u - 0.5 * (a + b))))
    return min(max(math.exp(best), lo), hi)
