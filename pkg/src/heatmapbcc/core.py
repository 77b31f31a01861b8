"""Grid geometry, report containers, model configuration and their file formats."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional

import numpy as np

try:  # python < 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ReportError(ValueError):
    """A report cannot be placed on the grid or fails validation."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ReportParseError(ValueError):
    """A report file line could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid of ``width`` x ``height`` cells starting at ``origin``."""

    width: int
    height: int
    origin: tuple = (0.0, 0.0)
    cell_size: tuple = (1.0, 1.0)

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        origin = tuple(float(v) for v in np.broadcast_to(self.origin, (2,)))
        cell = tuple(float(v) for v in np.broadcast_to(self.cell_size, (2,)))
        if not all(math.isfinite(v) for v in origin):
            raise ValueError("grid origin must be finite")
        if not all(c > 0 and math.isfinite(c) for c in cell):
            raise ValueError(f"cell_size must be positive, got {cell}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell_size", cell)

    @property
    def n_cells(self):
        return self.width * self.height

    def cell_of(self, coords):
        """Return ``(col, row)`` of the cell containing ``coords``, or None if outside.

        Points on an interior boundary belong to the lower-index cell.
        """
        x, y = float(coords[0]), float(coords[1])
        if not (math.isfinite(x) and math.isfinite(y)):
            return None
        u = (x - self.origin[0]) / self.cell_size[0]
        v = (y - self.origin[1]) / self.cell_size[1]
        if u < 0 or v < 0 or u > self.width or v > self.height:
            return None
        col = max(math.ceil(u) - 1, 0)
        row = max(math.ceil(v) - 1, 0)
        return col, row

    def center(self, col, row):
        return (
            self.origin[0] + (col + 0.5) * self.cell_size[0],
            self.origin[1] + (row + 0.5) * self.cell_size[1],
        )

    def flat_index(self, col, row):
        return row * self.width + col


def grid_points(grid: GridSpec) -> np.ndarray:
    """Cell-centre coordinates, row-major (x varies fastest), shape ``(width*height, 2)``."""
    cols = np.arange(grid.width)
    rows = np.arange(grid.height)
    cc, rr = np.meshgrid(cols, rows)
    xs = grid.origin[0] + (cc.ravel() + 0.5) * grid.cell_size[0]
    ys = grid.origin[1] + (rr.ravel() + 0.5) * grid.cell_size[1]
    return np.column_stack([xs, ys])


@dataclass(frozen=True)
class ReportSet:
    """Sparse reports: entry ``k`` says source ``sources[k]`` gave label ``labels[k]``
    (1-based) about the target at ``locations[loc_index[k]]``."""

    locations: np.ndarray
    loc_index: np.ndarray
    sources: np.ndarray
    labels: np.ndarray
    num_sources: int
    num_labels: int

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=float)
        if locs.ndim == 1:
            locs = locs.reshape(-1, 1) if locs.size else locs.reshape(0, 2)
        object.__setattr__(self, "locations", _frozen(locs))
        object.__setattr__(self, "loc_index", _frozen(self.loc_index, int).reshape(-1))
        object.__setattr__(self, "sources", _frozen(self.sources, int).reshape(-1))
        object.__setattr__(self, "labels", _frozen(self.labels, int).reshape(-1))
        object.__setattr__(self, "num_sources", int(self.num_sources))
        object.__setattr__(self, "num_labels", int(self.num_labels))
        n = len(self.loc_index)
        if len(self.sources) != n or len(self.labels) != n:
            raise ReportError("loc_index, sources and labels must have equal length")
        if self.num_labels < 2:
            raise ReportError("num_labels must be >= 2")
        if self.num_sources < 1:
            raise ReportError("num_sources must be >= 1")
        if not np.all(np.isfinite(self.locations)):
            raise ReportError("location coordinates must be finite")
        for name, arr, lo, hi in (
            ("location index", self.loc_index, 0, len(self.locations) - 1),
            ("source id", self.sources, 0, self.num_sources - 1),
            ("label", self.labels, 1, self.num_labels),
        ):
            bad = np.flatnonzero((arr < lo) | (arr > hi))
            if bad.size:
                k = int(bad[0])
                raise ReportError(f"report {k}: {name} {arr[k]} outside [{lo}, {hi}]", index=k)

    @property
    def n_locations(self):
        return len(self.locations)

    def __len__(self):
        return len(self.loc_index)

    @classmethod
    def empty(cls, num_sources, num_labels, dim=2):
        return cls(np.zeros((0, dim)), [], [], [], num_sources, num_labels)

    @classmethod
    def from_points(cls, coords, sources, labels, num_sources=None, num_labels=2):
        """Build a report set treating identical coordinates as one target."""
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords.reshape(-1, 1)
        sources = np.asarray(sources, dtype=int)
        table = {}
        loc_index = np.empty(len(coords), dtype=int)
        for k, c in enumerate(coords):
            key = tuple(c.tolist())
            loc_index[k] = table.setdefault(key, len(table))
        locs = np.array(list(table.keys()), dtype=float).reshape(len(table), coords.shape[1])
        if num_sources is None:
            num_sources = int(sources.max()) + 1 if sources.size else 1
        return cls(locs, loc_index, sources, labels, num_sources, num_labels)

    def subset(self, idx):
        """Reports ``idx`` only; the location table is compacted, first-seen order."""
        idx = np.asarray(idx, dtype=int)
        used, new_index = np.unique(self.loc_index[idx], return_inverse=True)
        first = np.full(len(used), len(idx))
        np.minimum.at(first, new_index, np.arange(len(idx)))
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        return ReportSet(
            self.locations[used[order]],
            rank[new_index],
            self.sources[idx],
            self.labels[idx],
            self.num_sources,
            self.num_labels,
        )

    def merge(self, other: "ReportSet") -> "ReportSet":
        """Append ``other``; coincident locations are shared and existing indices kept."""
        if other.num_labels != self.num_labels:
            raise ReportError("cannot merge report sets with different label counts")
        if self.n_locations and other.n_locations and other.locations.shape[1] != self.locations.shape[1]:
            raise ReportError("cannot merge report sets of different dimensionality")
        if other.num_sources > self.num_sources or (len(other) and other.sources.max() >= self.num_sources):
            raise ReportError(
                f"new reports reference sources outside [0, {self.num_sources})",
                index=int(np.argmax(other.sources >= self.num_sources)) if len(other) else None,
            )
        table = {tuple(c.tolist()): i for i, c in enumerate(self.locations)}
        locs = [c for c in self.locations]
        remap = np.empty(other.n_locations, dtype=int)
        for i, c in enumerate(other.locations):
            key = tuple(c.tolist())
            if key not in table:
                table[key] = len(locs)
                locs.append(c)
            remap[i] = table[key]
        dim = self.locations.shape[1] if self.n_locations else other.locations.shape[1]
        return ReportSet(
            np.array(locs, dtype=float).reshape(len(locs), dim),
            np.concatenate([self.loc_index, remap[other.loc_index]]),
            np.concatenate([self.sources, other.sources]),
            np.concatenate([self.labels, other.labels]),
            self.num_sources,
            self.num_labels,
        )

    def label_counts(self):
        """``(n_locations, num_labels)`` array of report counts per location."""
        counts = np.zeros((self.n_locations, self.num_labels))
        np.add.at(counts, (self.loc_index, self.labels - 1), 1.0)
        return counts


def bin_reports(raw: Iterable, grid: GridSpec, num_sources=None, num_labels=2) -> ReportSet:
    """Snap ``(coords, source_id, label)`` reports to the cells of ``grid``.

    Only cells that receive a report appear in the location table, in order of
    first appearance; entries keep their input order.
    """
    cells = {}
    loc_index, sources, labels = [], [], []
    for k, (coords, source, label) in enumerate(raw):
        cell = grid.cell_of(coords)
        if cell is None:
            raise ReportError(f"report {k} at {tuple(coords)} lies outside the grid", index=k)
        loc_index.append(cells.setdefault(cell, len(cells)))
        sources.append(int(source))
        labels.append(int(label))
    locs = np.array([grid.center(c, r) for c, r in cells], dtype=float).reshape(len(cells), 2)
    if num_sources is None:
        num_sources = max(sources) + 1 if sources else 1
    return ReportSet(locs, loc_index, sources, labels, num_sources, num_labels)


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Hyperparameters of the heatmap model.

    ``alpha0`` is either a ``(J, L)`` matrix shared by every source or a
    ``(S, J, L)`` stack; ``source_alpha0`` overrides individual sources.
    ``nu0=None`` means the beta prior on the observation noise is moment-matched
    to the GP prior.
    """

    num_classes: int = 2
    alpha0: np.ndarray = field(default_factory=lambda: np.array([[2.0, 1.0], [1.0, 2.0]]))
    nu0: Optional[np.ndarray] = None
    a0: float = 1.0
    b0: float = 1.0
    length_scale: float = 20.0
    prior_mean: Optional[np.ndarray] = None
    max_iterations: int = 200
    convergence_tol: Optional[float] = None
    rng_seed: int = 0
    source_alpha0: dict = field(default_factory=dict)
    n_samples: int = 1000
    moment_samples: int = 10000
    inner_tol: float = 1e-4
    inner_max_iter: int = 20
    optimize_length_scale: bool = False
    length_scale_bounds: tuple = (1.0, 100.0)

    def __post_init__(self):
        J = int(self.num_classes)
        if J < 2:
            raise ConfigError("num_classes must be >= 2")
        object.__setattr__(self, "num_classes", J)
        alpha0 = _frozen(self.alpha0)
        if alpha0.ndim not in (2, 3) or alpha0.shape[-2] != J or alpha0.shape[-1] < 2:
            raise ConfigError(f"alpha0 must have {J} rows of >= 2 entries, got shape {alpha0.shape}")
        if not np.all(alpha0 > 0):
            raise ConfigError("alpha0 entries must be strictly positive")
        object.__setattr__(self, "alpha0", alpha0)
        overrides = {}
        for s, a in dict(self.source_alpha0).items():
            a = _frozen(a)
            if a.shape != alpha0.shape[-2:] or not np.all(a > 0):
                raise ConfigError(f"source_alpha0[{s}] must be a positive {alpha0.shape[-2:]} matrix")
            overrides[int(s)] = a
        object.__setattr__(self, "source_alpha0", overrides)
        if self.nu0 is not None:
            nu0 = _frozen(self.nu0)
            if nu0.shape != (J,) or not np.all(nu0 > 0):
                raise ConfigError(f"nu0 must be {J} positive values")
            object.__setattr__(self, "nu0", nu0)
        mean = np.zeros(J) if self.prior_mean is None else np.broadcast_to(self.prior_mean, (J,))
        if not np.all(np.isfinite(mean)):
            raise ConfigError("prior_mean must be finite")
        object.__setattr__(self, "prior_mean", _frozen(mean))
        for name in ("a0", "b0", "length_scale"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        if int(self.max_iterations) < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.convergence_tol is not None and not self.convergence_tol > 0:
            raise ConfigError("convergence_tol must be positive")
        lo, hi = (float(v) for v in self.length_scale_bounds)
        if not (0 < lo < hi):
            raise ConfigError("length_scale_bounds must satisfy 0 < low < high")
        object.__setattr__(self, "length_scale_bounds", (lo, hi))

    def __eq__(self, other):
        if not isinstance(other, ModelConfig):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name == "source_alpha0":
                if a.keys() != b.keys() or not all(np.array_equal(a[k], b[k]) for k in a):
                    return False
            elif isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None

    @property
    def num_labels(self):
        return self.alpha0.shape[-1]

    def alpha0_for(self, num_sources):
        """Prior pseudo-counts as a ``(num_sources, J, L)`` array."""
        if self.alpha0.ndim == 3:
            if self.alpha0.shape[0] < num_sources:
                raise ConfigError(f"alpha0 given for {self.alpha0.shape[0]} sources, need {num_sources}")
            out = np.array(self.alpha0[:num_sources])
        else:
            out = np.repeat(self.alpha0[None], num_sources, axis=0)
        for s, a in self.source_alpha0.items():
            if s < num_sources:
                out[s] = a
        return out

    def tolerance_for(self, n_locations):
        if self.convergence_tol is not None:
            return float(self.convergence_tol)
        return 1e-3 * max(n_locations, 1)

    def with_(self, **changes):
        return replace(self, **changes)


def diagonal_alpha0(num_classes, diag, off=1.0):
    a = np.full((num_classes, num_classes), float(off))
    np.fill_diagonal(a, float(diag))
    return a


# --- file formats ---------------------------------------------------------

REPORT_HEADER = ["x", "y", "source_id", "label"]


def read_report_file(path):
    """Parse ``x,y,source_id,label`` rows (one header line).

    Returns a list of ``((x, y), source_id, label)``; raises ReportParseError
    carrying the 1-based line number of the first bad row.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ReportParseError(f"{path}: empty report file", line=1)
        if [h.strip() for h in header] != REPORT_HEADER:
            raise ReportParseError(f"{path}:1: expected header {','.join(REPORT_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ReportParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}", line=lineno)
            try:
                x, y = float(row[0]), float(row[1])
                source, label = int(row[2]), int(row[3])
            except ValueError:
                raise ReportParseError(f"{path}:{lineno}: malformed row {row!r}", line=lineno) from None
            if not (math.isfinite(x) and math.isfinite(y)) or source < 0 or label < 1:
                raise ReportParseError(f"{path}:{lineno}: invalid values {row!r}", line=lineno)
            rows.append(((x, y), source, label))
    return rows


def write_report_file(path, reports: ReportSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for k in range(len(reports)):
            x, y = reports.locations[reports.loc_index[k]][:2]
            w.writerow([repr(float(x)), repr(float(y)), int(reports.sources[k]), int(reports.labels[k])])


def load_config(path):
    """Read a TOML config with optional ``[grid]`` and ``[model]`` tables.

    Returns ``(grid or None, ModelConfig)``. See README for the keys.
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def config_from_dict(doc):
    unknown = set(doc) - {"grid", "model"}
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    grid = None
    if "grid" in doc:
        g = dict(doc["grid"])
        try:
            grid = GridSpec(
                width=g.pop("width"),
                height=g.pop("height"),
                origin=tuple(g.pop("origin", (0.0, 0.0))),
                cell_size=tuple(np.broadcast_to(g.pop("cell_size", 1.0), (2,))),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid [grid]: {exc}") from exc
        if g:
            raise ConfigError(f"unknown [grid] keys: {sorted(g)}")
    m = dict(doc.get("model", {}))
    J = int(m.pop("num_classes", 2))
    L = int(m.pop("num_labels", J))
    if "alpha0" in m:
        alpha0 = np.asarray(m.pop("alpha0"), dtype=float)
        for k in ("alpha0_diag", "alpha0_off"):
            if k in m:
                raise ConfigError(f"give either alpha0 or {k}, not both")
    else:
        diag = float(m.pop("alpha0_diag", 2.0))
        off = float(m.pop("alpha0_off", 1.0))
        alpha0 = np.full((J, L), off)
        for j in range(min(J, L)):
            alpha0[j, j] = diag
    kwargs = {"num_classes": J, "alpha0": alpha0}
    if "source_alpha0" in m:
        kwargs["source_alpha0"] = {int(k): v for k, v in m.pop("source_alpha0").items()}
    simple = {
        "nu0", "a0", "b0", "length_scale", "prior_mean", "max_iterations", "convergence_tol",
        "rng_seed", "n_samples", "moment_samples", "inner_tol", "inner_max_iter",
        "optimize_length_scale", "length_scale_bounds",
    }
    for k in list(m):
        if k in simple:
            v = m.pop(k)
            kwargs[k] = tuple(v) if k == "length_scale_bounds" else v
    if "seed" in m:
        kwargs["rng_seed"] = int(m.pop("seed"))
    if m:
        raise ConfigError(f"unknown [model] keys: {sorted(m)}")
    try:
        return grid, ModelConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
