import numpy as np
import pytest
from scipy.special import digamma

from heatmapbcc.confusion import (
    ConfusionFactor,
    dirichlet_kl_terms,
    expected_log_confusion,
    update_confusion,
    write_confusion_file,
)
from heatmapbcc.core import ReportSet


def one_source(locs, labels):
    return ReportSet.from_points(locs, [0] * len(labels), labels, num_sources=1, num_labels=2)


def test_no_reports_keeps_prior():
    a0 = np.array([[[2.0, 1.0], [1.0, 2.0]]])
    rs = ReportSet.empty(1, 2)
    assert np.array_equal(update_confusion(a0, np.zeros((0, 2)), rs).alpha, a0)


def test_hard_counts():
    a0 = np.array([[[2.0, 1.0], [1.0, 2.0]]])
    rs = one_source([[0, 0], [1, 0], [2, 0]], [1, 1, 1])
    r = np.tile([1.0, 0.0], (3, 1))
    assert update_confusion(a0, r, rs).alpha[0, 0].tolist() == [5.0, 1.0]


def test_fractional_count():
    a0 = np.array([[[2.0, 1.0], [1.0, 2.0]]])
    rs = one_source([[0, 0]], [2])
    out = update_confusion(a0, np.array([[0.75, 0.25]]), rs).alpha
    assert out[0, 1, 1] == pytest.approx(2.25)
    assert out[0, 0, 1] == pytest.approx(1.75)


def test_unnormalised_responsibilities_rejected():
    rs = one_source([[0, 0]], [2])
    with pytest.raises(ValueError):
        update_confusion(np.ones((1, 2, 2)), np.array([[0.5, 0.6]]), rs)


@pytest.mark.parametrize(
    "row,expected",
    [([1.0, 1.0], [-1.0, -1.0]), ([2.0, 1.0], [-0.5, -1.5])],
)
def test_digamma_recurrence_values(row, expected):
    assert expected_log_confusion(np.array([row])).ravel() == pytest.approx(expected, abs=1e-12)


def test_strong_diagonal():
    e = expected_log_confusion(np.array([[10.0, 1.0]]))
    assert np.all(np.isfinite(e)) and e[0, 0] > e[0, 1]
    assert e[0, 0] == pytest.approx(digamma(10) - digamma(11))


def test_jensen_gap_closes(rng):
    alpha = rng.uniform(1, 5, size=(3, 2, 2))
    assert np.all(np.exp(expected_log_confusion(alpha)).sum(-1) < 1)
    big = alpha * 1000
    mean = big / big.sum(-1, keepdims=True)
    assert np.exp(expected_log_confusion(big)) == pytest.approx(mean, abs=1e-3)


def test_permutation_invariant(rng):
    locs = rng.integers(0, 4, size=(20, 2)).astype(float)
    labels = rng.integers(1, 3, size=20)
    sources = rng.integers(0, 3, size=20)
    rs = ReportSet.from_points(locs, sources, labels, num_sources=3)
    r = rng.dirichlet([1, 1], size=rs.n_locations)
    perm = rng.permutation(20)
    a0 = np.full((3, 2, 2), 1.5)
    base = update_confusion(a0, r, rs).alpha
    # permuted entries reference the same location table
    rs_p = ReportSet(rs.locations, rs.loc_index[perm], rs.sources[perm], rs.labels[perm], 3, 2)
    assert np.allclose(update_confusion(a0, r, rs_p).alpha, base, rtol=0, atol=1e-12)


def test_kl_zero_at_prior():
    a = np.array([[[2.0, 1.0], [1.0, 2.0]]])
    assert abs(dirichlet_kl_terms(a, a)) < 1e-9


def test_kl_negative_away_from_prior():
    a0 = np.array([[[2.0, 1.0], [1.0, 2.0]]])
    assert dirichlet_kl_terms(a0 + [[[3, 0], [0, 1]]], a0) < 0


def test_posterior_mean_rows(rng):
    f = ConfusionFactor(rng.uniform(0.5, 4, size=(2, 2, 3)), np.ones((2, 2, 3)))
    assert f.posterior_mean().sum(-1) == pytest.approx(np.ones((2, 2)))


def test_export(tmp_path):
    f = ConfusionFactor(np.array([[[3.0, 1.0], [1.0, 3.0]]]), np.ones((1, 2, 2)))
    p = tmp_path / "c.csv"
    write_confusion_file(p, f)
    lines = p.read_text().splitlines()
    assert lines[0] == "source_id,true_class,label,alpha,posterior_mean"
    assert lines[1].startswith("0,1,1,3.0,0.75")
