"""Dirichlet posteriors over per-source confusion matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, psi


@dataclass(frozen=True)
class ConfusionFactor:
    """Posterior ``alpha`` and prior ``alpha0``, both ``(S, J, L)``."""

    alpha: np.ndarray
    alpha0: np.ndarray

    @property
    def num_sources(self):
        return self.alpha.shape[0]

    def posterior_mean(self):
        return self.alpha / self.alpha.sum(axis=-1, keepdims=True)


def pseudo_counts(r, reports, num_classes=None):
    """Responsibility-weighted label counts, shape ``(S, J, L)``."""
    r = np.asarray(r, dtype=float)
    J = r.shape[1] if num_classes is None else num_classes
    counts = np.zeros((reports.num_sources, J, reports.num_labels))
    if len(reports):
        # (entries, J) -> scatter into [source, :, label]
        w = r[reports.loc_index]
        for j in range(J):
            np.add.at(counts[:, j, :], (reports.sources, reports.labels - 1), w[:, j])
    return counts


def update_confusion(alpha0, r, reports, atol=1e-9) -> ConfusionFactor:
    """alpha = alpha0 + sum of responsibilities over each source's reports per label."""
    alpha0 = np.asarray(alpha0, dtype=float)
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != reports.n_locations:
        raise ValueError(f"responsibilities must be ({reports.n_locations}, J), got {r.shape}")
    sums = r.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise ValueError(f"responsibility row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    if alpha0.shape != (reports.num_sources, r.shape[1], reports.num_labels):
        raise ValueError(f"alpha0 shape {alpha0.shape} does not match reports/responsibilities")
    return ConfusionFactor(alpha0 + pseudo_counts(r, reports), alpha0)


def expected_log_confusion(factor) -> np.ndarray:
    """E[log pi_jl] = psi(alpha_jl) - psi(sum_l alpha_jl) under Dirichlet rows."""
    alpha = factor.alpha if isinstance(factor, ConfusionFactor) else np.asarray(factor, dtype=float)
    if not np.all(alpha > 0):
        raise ValueError("Dirichlet parameters must be strictly positive")
    return psi(alpha) - psi(alpha.sum(axis=-1, keepdims=True))


def dirichlet_kl_terms(alpha, alpha0, e_log_pi=None):
    """Sum over rows of E_q[log p(pi | alpha0) - log q(pi | alpha)]; zero when alpha == alpha0."""
    if e_log_pi is None:
        e_log_pi = psi(alpha) - psi(alpha.sum(axis=-1, keepdims=True))
    log_norm = lambda a: gammaln(a.sum(axis=-1)) - gammaln(a).sum(axis=-1)
    logp = log_norm(alpha0) + ((alpha0 - 1) * e_log_pi).sum(axis=-1)
    logq = log_norm(alpha) + ((alpha - 1) * e_log_pi).sum(axis=-1)
    return float(np.sum(logp - logq))


def write_confusion_file(path, factor: ConfusionFactor):
    """Rows ``source_id,true_class,label,alpha,posterior_mean`` (classes and labels 1-based)."""
    mean = factor.posterior_mean()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "true_class", "label", "alpha", "posterior_mean"])
        S, J, L = factor.alpha.shape
        for s in range(S):
            for j in range(J):
                for l in range(L):
                    w.writerow([s, j + 1, l + 1, repr(float(factor.alpha[s, j, l])), repr(float(mean[s, j, l]))])
