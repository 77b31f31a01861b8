import numpy as np
import pytest
from scipy.special import gammaln

from heatmapbcc import GridSpec, ModelConfig, ReportSet, fit, predict
from heatmapbcc.baselines import (
    gp_only_fit_predict,
    ibcc_fit,
    ibcc_gp_pipeline,
    ibcc_predict,
    kde_predict,
    majority_vote,
    nearest_neighbour,
)
from heatmapbcc.core import grid_points

STRONG = np.array([[[10.0, 1.0], [1.0, 10.0]]])


def log_dirmult(alpha, counts):
    return gammaln(alpha.sum()) - gammaln((alpha + counts).sum()) + np.sum(gammaln(alpha + counts) - gammaln(alpha))


class TestIbcc:
    def test_collapsed_single_point(self):
        rs = ReportSet.from_points([[0, 0]] * 3, [0] * 3, [2] * 3)
        st = ibcc_fit(rs, STRONG, [1.0, 1.0])
        counts = np.array([0.0, 3.0])
        # class proportions with a flat prior give 1/2 for a single point
        ev = np.array([log_dirmult(STRONG[0, j], counts) for j in range(2)])
        exact = np.exp(ev[1] - np.logaddexp(ev[0], ev[1]))
        assert exact == pytest.approx(220 / 221, abs=1e-12)
        assert st.r[0, 1] > 0.9
        assert st.r[0, 1] == pytest.approx(exact, abs=0.01)

    def test_balanced_conflict(self):
        rs = ReportSet.from_points([[0, 0]] * 2, [0, 1], [1, 2], num_sources=2)
        st = ibcc_fit(rs, np.repeat(STRONG, 2, 0), [1.0, 1.0])
        assert st.r[0] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_class_proportion_prior(self):
        grid = GridSpec(3, 1)
        rs = ReportSet.from_points([[0.5, 0.5]], [0], [1])
        st = ibcc_fit(rs, STRONG, [2000.0, 1000.0])
        probs = ibcc_predict(st, rs, grid)
        assert probs[2] == pytest.approx([2 / 3, 1 / 3], abs=1e-3)

    def test_ignores_geometry(self, rng):
        locs = rng.uniform(0, 10, size=(8, 2))
        idx = rng.integers(0, 8, 30)
        rs = ReportSet(locs, idx, rng.integers(0, 2, 30), rng.integers(1, 3, 30), 2, 2)
        moved = ReportSet(locs[rng.permutation(8)], idx, rs.sources, rs.labels, 2, 2)
        a = ibcc_fit(rs, np.repeat(STRONG, 2, 0), [1.0, 1.0])
        b = ibcc_fit(moved, np.repeat(STRONG, 2, 0), [1.0, 1.0])
        assert np.array_equal(a.r, b.r)


class TestKde:
    grid = GridSpec(5, 5)

    def test_single_positive(self):
        rs = ReportSet.from_points([[2.5, 2.5]], [0], [2])
        assert kde_predict(rs, self.grid, 1.0)[12] > 0.5

    def test_balanced(self):
        rs = ReportSet.from_points([[2.5, 2.5]] * 2, [0, 0], [1, 2])
        assert kde_predict(rs, self.grid, 1.0)[12] == pytest.approx(0.5)

    def test_far(self):
        rs = ReportSet.from_points([[0.5, 0.5]] * 4, [0] * 4, [2] * 4)
        p = kde_predict(rs, GridSpec(100, 1), 1.0)
        assert p[-1] == pytest.approx(0.5, abs=1e-9)

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            kde_predict(ReportSet.from_points([[0, 0]], [0], [1]), self.grid, 0.0)


class TestGp:
    grid = GridSpec(10, 10)

    def test_all_positive(self):
        pts = grid_points(self.grid)[[11, 44, 77]]
        rs = ReportSet.from_points(pts, [0, 0, 0], [2, 2, 2])
        p = gp_only_fit_predict(rs, self.grid, 3.0).prob[:, 1]
        assert np.all(p[[11, 44, 77]] >= 0.5)

    def test_contradictions_cancel(self):
        pts = grid_points(self.grid)[[44, 44]]
        rs = ReportSet.from_points(pts, [0, 1], [1, 2], num_sources=2)
        out = gp_only_fit_predict(rs, self.grid, 3.0)
        assert out.latent_mean[44] == pytest.approx([0.0, 0.0], abs=1e-9)
        assert out.prob[44] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_equals_model_with_perfect_reporters(self):
        pts = grid_points(self.grid)
        rng = np.random.default_rng(1)
        cells = rng.choice(100, 40, replace=False)
        labels = np.where(pts[cells, 0] + rng.normal(0, 2, 40) > 5, 2, 1)
        rs = ReportSet.from_points(pts[cells], [0] * 40, labels)
        gp = gp_only_fit_predict(rs, self.grid, 4.0)
        st = fit(rs, ModelConfig(length_scale=4.0, alpha0=[[1e6, 1e-6], [1e-6, 1e6]]))
        assert np.abs(gp.prob - predict(st, self.grid).flat("rho_mean")).max() < 0.05

    def test_empty_is_prior(self):
        out = ibcc_gp_pipeline(ReportSet.empty(1, 2), self.grid, 3.0, STRONG, [1.0, 1.0])
        assert np.array_equal(out.prob, np.full((100, 2), 0.5))

    def test_pipeline_single_uninformative(self):
        rs = ReportSet.from_points([[4.5, 4.5]], [0], [2])
        flat = np.ones((1, 2, 2))
        out = ibcc_gp_pipeline(rs, self.grid, 3.0, flat, [1.0, 1.0])
        assert out.prob[:, 1] == pytest.approx(np.full(100, 0.5), abs=1e-9)


class TestVoting:
    grid = GridSpec(3, 1)

    def _at(self, labels, x=0.5):
        return ReportSet.from_points([[x, 0.5]] * len(labels), [0] * len(labels), labels)

    def test_majority(self):
        assert majority_vote(self._at([2, 2, 1]), self.grid)[0] == 2

    def test_tie(self):
        assert majority_vote(self._at([1, 2]), self.grid)[0] == 1

    def test_empty_cells(self):
        assert majority_vote(self._at([2]), self.grid).tolist() == [2, 1, 1]

    def test_knn_single(self):
        rs = ReportSet.from_points([[0.5, 0.5], [2.5, 0.5]], [0, 0], [2, 1])
        assert nearest_neighbour(rs, self.grid, k=1)[0] == 1.0

    def test_knn_fraction(self):
        rs = ReportSet.from_points([[0.5, 0.5 + 0.01 * i] for i in range(5)] + [[30.0, 30.0]], [0] * 6,
                                   [2, 2, 2, 1, 1, 2])
        assert nearest_neighbour(rs, self.grid, k=5)[0] == pytest.approx(0.6)

    def test_knn_fewer_than_k(self):
        rs = ReportSet.from_points([[0.5, 0.5], [2.5, 0.5]], [0, 0], [2, 1])
        assert nearest_neighbour(rs, self.grid, k=5).tolist() == [0.5, 0.5, 0.5]


def test_outputs_in_range(small_scenario):
    rs, grid = small_scenario.reports, small_scenario.grid
    for p in (kde_predict(rs, grid, 5.0), nearest_neighbour(rs, grid), gp_only_fit_predict(rs, grid, 5.0).prob):
        assert np.all((p >= 0) & (p <= 1))
    assert set(np.unique(majority_vote(rs, grid))) <= {1, 2}
