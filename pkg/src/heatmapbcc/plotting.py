"""Heatmap rasters (binary PPM and matplotlib PNG) and benchmark plots.

The colour ramp is fixed: probability 0 maps to blue (0, 0, 255), 0.5 to pale
yellow (255, 255, 191) and 1 to red (255, 0, 0), interpolated linearly in RGB
between those stops.
"""

from __future__ import annotations

import numpy as np

RAMP_STOPS = np.array([0.0, 0.5, 1.0])
RAMP_COLOURS = np.array([[0, 0, 255], [255, 255, 191], [255, 0, 0]], dtype=float)


def ramp(values):
    """Map probabilities to uint8 RGB; NaN is drawn black."""
    v = np.asarray(values, dtype=float)
    nan = np.isnan(v)
    v = np.clip(np.where(nan, 0.0, v), 0.0, 1.0)
    rgb = np.stack([np.interp(v, RAMP_STOPS, RAMP_COLOURS[:, c]) for c in range(3)], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[nan] = 0
    return rgb


def write_ppm(path, prob_map, scale=1):
    """Binary P6 pixmap of an ``(H, W)`` probability map.

    Row 0 of the map is the lowest y, so it is written as the bottom image row.
    Each cell becomes a ``scale`` x ``scale`` block of pixels.
    """
    p = np.asarray(prob_map, dtype=float)
    if p.ndim != 2:
        raise ValueError("prob_map must be 2-D (height, width)")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    img = ramp(p[::-1])
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path):
    """Inverse of :func:`write_ppm` for files it produced; returns ``(H, W, 3)`` uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _ramp_cmap():
    from matplotlib.colors import LinearSegmentedColormap

    return LinearSegmentedColormap.from_list("heatmap_ramp", list(zip(RAMP_STOPS, RAMP_COLOURS / 255)))


def render_heatmap_png(path, prob_map, grid=None, title=None, reports=None):
    """PNG heatmap with a colour bar; optional report locations overlaid."""
    plt = _pyplot()
    p = np.asarray(prob_map, dtype=float)
    extent = None
    if grid is not None:
        x0, y0 = grid.origin
        extent = (x0, x0 + grid.width * grid.cell_size[0], y0, y0 + grid.height * grid.cell_size[1])
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(p, origin="lower", cmap=_ramp_cmap(), vmin=0, vmax=1, extent=extent, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="probability")
    if reports is not None and len(reports):
        ax.scatter(reports.locations[:, 0], reports.locations[:, 1], s=4, c="k", alpha=0.4)
    if title:
        ax.set_title(title)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_improvements(path, rows, metric="auc", reference="heatmapbcc"):
    """Median improvement of ``reference`` over each method versus subset size, IQR shaded."""
    from .evaluation import improvements

    plt = _pyplot()
    diffs = improvements(rows, reference, metric)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({m for m, _ in diffs}):
        sizes = sorted(n for m, n in diffs if m == method)
        stats = []
        for n in sizes:
            d = diffs[(method, n)]
            d = d[~np.isnan(d)]
            stats.append(np.percentile(d, [25, 50, 75]) if len(d) else [np.nan] * 3)
        stats = np.array(stats)
        ax.plot(sizes, stats[:, 1], marker="o", label=method)
        ax.fill_between(sizes, stats[:, 0], stats[:, 2], alpha=0.2)
    ax.axhline(0, color="grey", lw=0.8)
    ax.set_xlabel("number of labels")
    ax.set_ylabel(f"{metric} improvement of {reference}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
