import math

import numpy as np
import pytest

from heatmapbcc import GridSpec, ModelConfig, ReportSet, fit, load_state, lower_bound, predict, save_state
from heatmapbcc.baselines import ibcc_fit
from heatmapbcc.confusion import expected_log_confusion
from heatmapbcc.core import ReportError, grid_points
from heatmapbcc.evaluation import auc
from heatmapbcc.model import SnapshotError, fit_length_scale, incremental_update, update_responsibilities
from heatmapbcc.synthetic import make_scenario


def single_report(label=2, alpha0=((10.0, 1.0), (1.0, 10.0))):
    rs = ReportSet.from_points([[0.5, 0.5]], [0], [label])
    return rs, ModelConfig(alpha0=np.array(alpha0))


class TestResponsibilities:
    def test_no_reports_uniform(self):
        rs = ReportSet(np.array([[0.0, 0.0], [1.0, 1.0]]), [0], [0], [1], 1, 2)
        e_log_pi = expected_log_confusion(np.array([[[2.0, 1.0], [1.0, 2.0]]]))
        r = update_responsibilities(np.zeros((2, 2)), e_log_pi, rs)
        assert r[1].tolist() == [0.5, 0.5]

    def test_symmetric_confusion(self):
        rs = ReportSet.from_points([[0, 0]], [0], [1])
        r = update_responsibilities(np.zeros((1, 2)), np.zeros((1, 2, 2)), rs)
        assert r.tolist() == [[0.5, 0.5]]

    def test_two_term_softmax(self):
        rs = ReportSet.from_points([[0, 0]], [0], [2])
        e_log_pi = np.array([[[-1.5, -1.0], [-1.5, 0.0]]])
        r = update_responsibilities(np.log([[0.5, 0.5]]), e_log_pi, rs)
        assert r[0, 1] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
        assert r[0, 1] == pytest.approx(0.731, abs=5e-4)

    def test_nonfinite_rejected(self):
        rs = ReportSet.from_points([[0, 0]], [0], [2])
        with pytest.raises(ValueError):
            update_responsibilities(np.array([[np.nan, 0.0]]), np.zeros((1, 2, 2)), rs)


class TestFit:
    def test_single_report_favours_label(self):
        rs, cfg = single_report(label=2)
        st = fit(rs, cfg)
        assert st.r[0, 1] > 0.5
        rs, cfg = single_report(label=1)
        assert fit(rs, cfg).r[0, 0] > 0.5

    def test_empty_rejected(self):
        with pytest.raises(ReportError):
            fit(ReportSet.empty(1, 2), ModelConfig())

    def test_label_count_mismatch(self):
        rs = ReportSet.from_points([[0, 0]], [0], [1], num_labels=3)
        with pytest.raises(ReportError):
            fit(rs, ModelConfig())

    def test_normalised(self, small_state):
        assert small_state.r.sum(axis=1) == pytest.approx(np.ones(len(small_state.r)), abs=1e-12)

    def test_converges(self, small_state):
        assert small_state.converged and small_state.n_iter < 200

    def test_deterministic(self, small_scenario, small_state):
        again = fit(small_scenario.reports, ModelConfig(length_scale=5.0))
        assert np.array_equal(again.r, small_state.r)
        assert np.array_equal(again.latent.f_hat, small_state.latent.f_hat)
        assert np.array_equal(again.confusion.alpha, small_state.confusion.alpha)
        assert again.lower_bounds == small_state.lower_bounds

    def test_bound_near_monotone(self, small_state):
        lb = np.array(small_state.lower_bounds)
        drops = lb[:-1] - lb[1:]
        assert np.all(drops <= 1e-2 * np.abs(lb[:-1]))

    def test_max_iterations_reports_not_converged(self, small_scenario):
        st = fit(small_scenario.reports, ModelConfig(length_scale=5.0, max_iterations=1))
        assert not st.converged and st.n_iter == 1

    def test_label_swap_symmetry(self, small_scenario):
        rs, grid = small_scenario.reports, small_scenario.grid
        a0 = np.array([[3.0, 1.0], [1.5, 2.0]])
        hm = predict(fit(rs, ModelConfig(length_scale=5.0, alpha0=a0)), grid)
        swapped = ReportSet(rs.locations, rs.loc_index, rs.sources, 3 - rs.labels, rs.num_sources, 2)
        hm_s = predict(fit(swapped, ModelConfig(length_scale=5.0, alpha0=a0[::-1, ::-1])), grid)
        assert np.array_equal(hm.state_probs, hm_s.state_probs[..., ::-1])
        assert np.array_equal(hm.rho_mean, hm_s.rho_mean[..., ::-1])

    @pytest.mark.slow
    def test_full_size_synthetic_converges(self):
        sc = make_scenario("noisy", 40, 40, 20.0, n_reports=2400, seed=0)
        st = fit(sc.reports, ModelConfig(length_scale=20.0))
        assert st.converged and st.n_iter < 200


def test_matches_ibcc_without_spatial_correlation():
    """With a vanishing length-scale each point's class probability is independent.

    Compared against IBCC with its class proportions pinned at one half, at
    points whose reports are not close to a tie.
    """
    a0 = np.array([[10.0, 1.0], [1.0, 10.0]])
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n = 8
        locs = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
        t = rng.integers(1, 3, size=n)
        idx = np.repeat(np.arange(n), rng.integers(3, 7, size=n))
        src = rng.integers(0, 3, size=len(idx))
        lab = np.where(rng.random(len(idx)) < 0.85, t[idx], 3 - t[idx])
        rs = ReportSet(locs, idx, src, lab, 3, 2)
        st = fit(rs, ModelConfig(length_scale=1e-3, alpha0=a0))
        ib = ibcc_fit(rs, a0, [1000.0, 1000.0])
        counts = rs.label_counts()
        clear = np.abs(counts[:, 0] - counts[:, 1]) >= 2
        assert np.abs(st.r - ib.r)[clear].max() < 0.05, seed


class TestLowerBound:
    def test_extra_sweep_stable(self, small_scenario, small_state):
        cfg = small_state.config
        warm = fit(small_scenario.reports, cfg.with_(max_iterations=1), init=small_state)
        tol = cfg.tolerance_for(small_state.reports.n_locations)
        assert abs(warm.lower_bounds[-1] - small_state.lower_bounds[-1]) < tol

    def test_confusion_term_zero_without_reports(self, small_state):
        _, parts = lower_bound(small_state, terms=True)
        assert parts["confusion"] < 0
        rs = ReportSet(np.array([[0.0, 0.0]]), [0], [0], [1], 2, 2)
        st = fit(rs, ModelConfig())
        # source 1 made no reports, so its posterior equals its prior
        from heatmapbcc.confusion import dirichlet_kl_terms

        assert abs(dirichlet_kl_terms(st.confusion.alpha[1:], st.confusion.alpha0[1:])) < 1e-9

    def test_sensitive_to_prior(self, small_state):
        from heatmapbcc.confusion import update_confusion
        from heatmapbcc.core import diagonal_alpha0

        st = small_state
        alt = type(st)(**{**st.__dict__})
        a0 = np.repeat(diagonal_alpha0(2, 20.0)[None], st.reports.num_sources, 0)
        alt.confusion = update_confusion(a0, st.r, st.reports)
        assert abs(lower_bound(alt) - lower_bound(st)) > 0

    def test_parts_sum(self, small_state):
        total, parts = lower_bound(small_state, terms=True)
        assert total == pytest.approx(sum(parts.values()), rel=1e-12)


class TestPredict:
    def test_rows_sum_to_one(self, small_state, small_scenario):
        hm = predict(small_state, small_scenario.grid)
        assert hm.state_probs.sum(-1) == pytest.approx(np.ones((10, 10)), abs=1e-12)
        assert hm.rho_mean.sum(-1) == pytest.approx(np.ones((10, 10)), abs=1e-12)

    def test_consistent_reports(self):
        rs = ReportSet.from_points(np.tile([[2.5, 2.5]], (6, 1)), [0, 1, 2, 0, 1, 2], [2] * 6, num_sources=3)
        st = fit(rs, ModelConfig(length_scale=0.1, alpha0=[[10.0, 1.0], [1.0, 10.0]]))
        hm = predict(st, GridSpec(5, 5))
        assert hm.state_probs[2, 2, 1] > 0.9

    def test_far_cell_prior(self):
        rs = ReportSet.from_points([[0.5, 0.5]] * 3, [0, 0, 0], [2, 2, 2])
        st = fit(rs, ModelConfig(length_scale=1.0))
        hm = predict(st, GridSpec(200, 1), n_samples=4000)
        assert hm.rho_mean[0, -1] == pytest.approx([0.5, 0.5], abs=1e-9)
        assert hm.latent_mean[0, -1] == pytest.approx([0.0, 0.0], abs=1e-9)

    def test_block_size_irrelevant(self, small_state, small_scenario):
        a = predict(small_state, small_scenario.grid, n_samples=200, block=7)
        b = predict(small_state, small_scenario.grid, n_samples=200, block=2000)
        assert np.allclose(a.latent_mean, b.latent_mean, atol=1e-12)
        assert np.allclose(a.latent_var, b.latent_var, atol=1e-12)
        assert np.allclose(a.state_probs, b.state_probs, atol=1e-12)

    def test_beats_chance(self, small_state, small_scenario):
        hm = predict(small_state, small_scenario.grid)
        y = small_scenario.truth.t == 2
        assert auc(hm.flat("state_probs")[:, 1], y) > 0.7


class TestIncremental:
    def test_empty_update(self, small_state):
        st = incremental_update(small_state, ReportSet.empty(small_state.reports.num_sources, 2))
        tol = small_state.config.tolerance_for(small_state.reports.n_locations)
        # the first sweep of the restarted loop
        assert abs(st.lower_bounds[0] - small_state.lower_bounds[-1]) < tol
        assert np.array_equal(st.reports.locations, small_state.reports.locations)

    def test_unknown_source(self, small_state):
        new = ReportSet.from_points([[0.5, 0.5]], [99], [1], num_sources=100)
        with pytest.raises(ReportError):
            incremental_update(small_state, new)

    def test_warm_matches_cold(self):
        diffs = []
        for seed in range(10):
            sc = make_scenario("noisy", 10, 10, 5.0, n_reports=300, seed=seed)
            rs = sc.reports
            cfg = ModelConfig(length_scale=5.0)
            first = rs.subset(np.arange(150))
            rest = rs.subset(np.arange(150, 300))
            rest = ReportSet.from_points(rest.locations[rest.loc_index], rest.sources, rest.labels,
                                         num_sources=rs.num_sources)
            warm = incremental_update(fit(first, cfg), rest)
            cold = fit(rs, cfg)
            y = sc.truth.t == 2
            diffs.append(auc(predict(warm, sc.grid).flat("state_probs")[:, 1], y)
                         - auc(predict(cold, sc.grid).flat("state_probs")[:, 1], y))
        assert np.max(np.abs(diffs)) < 0.02

    def test_trusted_negative_report(self):
        grid = GridSpec(12, 12)
        pts = grid_points(grid)
        rng = np.random.default_rng(5)
        cells = rng.integers(0, grid.n_cells, 120)
        rs = ReportSet.from_points(pts[cells], rng.integers(0, 3, 120), np.full(120, 2), num_sources=4)
        cfg = ModelConfig(length_scale=4.0, source_alpha0={3: [[450.0, 1.0], [1.0, 450.0]]})
        before = fit(rs, cfg)
        target = grid.flat_index(6, 6)
        after = incremental_update(before, ReportSet.from_points(pts[[target]], [3], [1], num_sources=4))
        rho_before = predict(before, grid).rho_mean[6, 6, 1]
        hm = predict(after, grid)
        assert hm.rho_mean[6, 6, 1] < rho_before - 0.05
        assert hm.state_probs[6, 6, 0] > 0.9


class TestSnapshot:
    def test_round_trip(self, small_state, small_scenario, tmp_path):
        p = tmp_path / "s.npz"
        save_state(p, small_state)
        back = load_state(p)
        assert np.array_equal(back.r, small_state.r)
        assert back.config == small_state.config
        a = predict(small_state, small_scenario.grid, n_samples=100)
        b = predict(back, small_scenario.grid, n_samples=100)
        assert np.array_equal(a.state_probs, b.state_probs)

    def test_bytes_identical(self, small_state, tmp_path):
        save_state(tmp_path / "a.npz", small_state)
        save_state(tmp_path / "b.npz", small_state)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_garbage(self, tmp_path):
        p = tmp_path / "x.npz"
        p.write_bytes(b"not a snapshot")
        with pytest.raises(SnapshotError):
            load_state(p)


class TestLengthScaleSearch:
    def test_option_refits_with_selected_scale(self, small_scenario):
        rs = small_scenario.reports
        cfg = ModelConfig(length_scale=5.0, length_scale_bounds=(1.0, 50.0))
        chosen = fit_length_scale(rs, cfg)
        state = fit(rs, cfg.with_(optimize_length_scale=True))
        assert 1.0 <= chosen <= 50.0
        assert state.config.length_scale == pytest.approx(chosen)
        assert not state.config.optimize_length_scale

    @pytest.mark.slow
    def test_recovers_generating_scale(self):
        # generated at l=20; the bound's optimum lands within a factor of two
        found = []
        for seed in range(3):
            sc = make_scenario("noisy", 30, 30, 20.0, n_reports=1200, seed=seed)
            found.append(fit_length_scale(sc.reports, ModelConfig(length_scale=20.0), bounds=(2.0, 100.0)))
        assert 10.0 <= float(np.median(found)) <= 40.0
