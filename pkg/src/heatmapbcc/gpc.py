"""Variational GP classification with an EKF-style Gaussian approximation.

Each class j has a latent function f_j with prior N(mu_j, K / s_j); the class
probabilities are softmax(f). Soft targets r (responsibilities in [0, 1]) are
treated as noisy observations of softmax(f) whose noise variance comes from a
beta posterior, and the sigmoid is linearised around the current mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.special import gammaln, psi

from .kernels import JITTER, KernelSpec, gram

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


def softmax(f, axis=-1):
    f = np.asarray(f, dtype=float)
    e = np.exp(f - f.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(f, axis=-1):
    f = np.asarray(f, dtype=float)
    m = f.max(axis=axis, keepdims=True)
    return f - m - np.log(np.exp(f - m).sum(axis=axis, keepdims=True))


def robust_cho_factor(B, start=1e-6, stop=1e-2):
    """Cholesky of a symmetric matrix, escalating diagonal jitter x10 on failure."""
    try:
        return cho_factor(B, lower=True, check_finite=False)
    except LinAlgError:
        pass
    jitter = start
    eye = np.eye(len(B))
    while jitter <= stop * (1 + 1e-9):
        try:
            return cho_factor(B + jitter * eye, lower=True, check_finite=False)
        except LinAlgError:
            jitter *= 10
    cond = np.linalg.cond(B) if np.all(np.isfinite(B)) else math.inf
    raise NumericalError(f"matrix factorisation failed after jitter {stop:g}; condition number {cond:.3g}")


# --- observation noise -----------------------------------------------------


@dataclass(frozen=True)
class BetaNoiseParams:
    nu_j: float
    nu_not_j: float

    def __post_init__(self):
        if not (self.nu_j > 0 and self.nu_not_j > 0):
            raise ValueError(f"beta parameters must be positive, got ({self.nu_j}, {self.nu_not_j})")

    @property
    def mean(self):
        return self.nu_j / (self.nu_j + self.nu_not_j)

    @property
    def var(self):
        t = self.nu_j + self.nu_not_j
        return self.nu_j * self.nu_not_j / (t * t * (t + 1))


def moment_match_beta(mean, variance) -> BetaNoiseParams:
    """Beta parameters with the given mean and variance."""
    mean, variance = float(mean), float(variance)
    if not 0 < mean < 1:
        raise ValueError(f"mean must lie in (0, 1), got {mean}")
    limit = mean * (1 - mean)
    if not 0 < variance < limit:
        raise ValueError(f"variance {variance} must lie in (0, mean*(1-mean) = {limit})")
    total = limit / variance - 1
    return BetaNoiseParams(total * mean, total * (1 - mean))


def expected_obs_variance(nu0, r):
    """E[rho - rho^2] under Beta(nu_j + r, nu_not_j + 1 - r); vectorised over ``r``.

    ``nu0`` is a BetaNoiseParams or an array whose last axis is (nu_j, nu_not_j).
    """
    if isinstance(nu0, BetaNoiseParams):
        a0, b0 = nu0.nu_j, nu0.nu_not_j
    else:
        nu0 = np.asarray(nu0, dtype=float)
        a0, b0 = nu0[..., 0], nu0[..., 1]
    r = np.asarray(r, dtype=float)
    a = a0 + r
    b = b0 + 1.0 - r
    t = a + b
    e_rho = a / t
    e_rho2 = e_rho**2 + a * b / (t * t * (t + 1))
    return e_rho - e_rho2


def _posterior_beta_mean(nu0, r):
    a = nu0[..., 0] + r
    return a / (nu0[..., 0] + nu0[..., 1] + 1.0)


# --- sampling --------------------------------------------------------------


def exchangeable_average(mean, var, z, fn, block=2000):
    """Monte Carlo E[fn(f)] for f ~ N(mean, diag var) over the last axis (classes).

    Every draw is reused under all cyclic shifts of the class axis, which makes
    the estimate exactly label-symmetric for two classes. ``mean``/``var`` are
    ``(P, J)``; ``z`` is ``(n, J)`` standard normal draws.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    P, J = mean.shape
    out = np.empty((P, J))
    shifts = [np.roll(z, k, axis=1) for k in range(J)]
    for start in range(0, P, block):
        sl = slice(start, start + block)
        m, s = mean[sl][None], std[sl][None]
        acc = fn(m + s * shifts[0][:, None, :])
        for zk in shifts[1:]:
            acc = acc + fn(m + s * zk[:, None, :])
        out[sl] = acc.mean(axis=0) / J
    return out


def standard_normals(n, J, seed):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A17])).standard_normal((n, J))


def sample_state_probs(f_star, var_star, n_samples=1000, seed=0):
    """E[softmax(f*)] by sampling independent per-point Gaussian marginals."""
    f_star = np.atleast_2d(np.asarray(f_star, dtype=float))
    var_star = np.broadcast_to(np.asarray(var_star, dtype=float), f_star.shape)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z = standard_normals(n_samples, f_star.shape[1], seed)
    p = exchangeable_average(f_star, var_star, z, softmax, block=max(1, 4_000_000 // (n_samples * f_star.shape[1])))
    return p / p.sum(axis=1, keepdims=True)


def expected_log_softmax(f_mean, f_var, n_samples=1000, seed=0):
    f_mean = np.atleast_2d(f_mean)
    z = standard_normals(n_samples, f_mean.shape[1], seed + 1)
    return exchangeable_average(f_mean, f_var, z, log_softmax, block=max(1, 4_000_000 // (n_samples * f_mean.shape[1])))


def prior_noise_params(prior_mean, prior_var, n_samples=10000, seed=0):
    """Beta priors over each class probability, moment-matched to the GP prior.

    Returns a ``(J, 2)`` array of (nu_j, nu_not_j).
    """
    prior_mean = np.asarray(prior_mean, dtype=float).reshape(1, -1)
    J = prior_mean.shape[1]
    z = standard_normals(n_samples, J, seed + 2)
    var = np.full_like(prior_mean, float(prior_var))
    rho_mean = exchangeable_average(prior_mean, var, z, softmax)[0]
    rho_sq = exchangeable_average(prior_mean, var, z, lambda f: softmax(f) ** 2)[0]
    out = np.empty((J, 2))
    for j in range(J):
        m = rho_mean[j]
        u = max(rho_sq[j] - m * m, 1e-12)
        u = min(u, 0.999 * m * (1 - m))
        p = moment_match_beta(m, u)
        out[j] = p.nu_j, p.nu_not_j
    return out


# --- latent updates --------------------------------------------------------


class EkfResult(NamedTuple):
    f_hat: np.ndarray  # (N, J)
    G: np.ndarray  # (N, J) diagonal Jacobians
    W: list  # per class Kalman gain (N, N)
    Q: np.ndarray  # (N, J) observation noise variances
    n_iter: int
    converged: bool


def _scaled_kernels(K_scaled, J):
    K_scaled = np.asarray(K_scaled, dtype=float)
    if K_scaled.ndim == 2:
        return [K_scaled] * J
    return list(K_scaled)


def _gain_factor(Kj, Gj, Qj):
    B = Gj[:, None] * Kj * Gj[None, :]
    B[np.diag_indices_from(B)] += Qj
    return robust_cho_factor(B)


def ekf_inner_loop(mu, K_scaled, r, nu0, tol=1e-4, max_iter=20, f_init=None, compute_gain=True):
    """Iterate the linearised mean update until the latent means settle.

    ``mu`` and ``r`` are ``(N, J)``; ``K_scaled`` is the prior covariance K/E[s]
    (one matrix or one per class); ``nu0`` is ``(J, 2)`` beta prior parameters.
    All classes are updated together; the step is relaxed by (J-1)/J because
    the diagonal Jacobian ignores the softmax coupling between classes, and
    halved again whenever the change grows.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    N, J = r.shape
    mu = np.broadcast_to(mu, (N, J))
    nu0 = np.broadcast_to(np.asarray(nu0, dtype=float), (J, 2))
    Ks = _scaled_kernels(K_scaled, J)
    Q = expected_obs_variance(nu0[None, :, :], r)
    f = np.array(mu if f_init is None else f_init, dtype=float)
    sig = _posterior_beta_mean(nu0[None, :, :], r)
    omega = (J - 1) / J
    prev = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        G = sig * (1 - sig)
        target = np.empty_like(f)
        for j in range(J):
            cf = _gain_factor(Ks[j], G[:, j], Q[:, j])
            y = r[:, j] - sig[:, j] + G[:, j] * (f[:, j] - mu[:, j])
            target[:, j] = mu[:, j] + Ks[j] @ (G[:, j] * cho_solve(cf, y, check_finite=False))
        step = omega * (target - f)
        diff = float(np.max(np.abs(step))) if step.size else 0.0
        f = f + step
        sig = softmax(f, axis=1)
        if diff < tol:
            converged = True
            break
        if diff > prev:
            omega = max(0.5 * omega, 0.05)
        prev = diff
    G = sig * (1 - sig)
    W = []
    if compute_gain:
        for j in range(J):
            cf = _gain_factor(Ks[j], G[:, j], Q[:, j])
            # W = K G B^-1, with B symmetric
            W.append(cho_solve(cf, G[:, j, None] * Ks[j], check_finite=False).T)
    return EkfResult(f, G, W, Q, it, converged)


def ekf_covariance(K_scaled, W, G):
    """Sigma = K - W G K, symmetrised."""
    K_scaled = np.asarray(K_scaled, dtype=float)
    G = np.asarray(G, dtype=float)
    S = K_scaled - np.asarray(W) @ (G[:, None] * K_scaled)
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class InverseScaleFactor:
    a: float
    b: float

    @property
    def expectation(self):
        return self.a / self.b

    @property
    def expected_log(self):
        return float(psi(self.a) - math.log(self.b))


def update_inverse_scale(a0, b0, f_hat, sigma, mu, K, K_chol=None) -> InverseScaleFactor:
    """Gamma posterior over the inverse output scale of one latent function.

    b = b0 + tr(K^-1 (Sigma + (f - mu)(f - mu)^T)) / 2, with K jittered.
    """
    f_hat = np.asarray(f_hat, dtype=float).reshape(-1)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), f_hat.shape)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    N = len(f_hat)
    if K_chol is None:
        K_chol = robust_cho_factor(np.atleast_2d(K) + JITTER * np.eye(N))
    dev = f_hat - mu
    quad = float(dev @ cho_solve(K_chol, dev, check_finite=False))
    tr = float(np.trace(cho_solve(K_chol, sigma, check_finite=False))) if N else 0.0
    a = float(a0) + 0.5 * N
    b = float(b0) + 0.5 * (tr + quad)
    if not b > 0:
        raise NumericalError(f"inverse-scale rate became non-positive ({b})")
    return InverseScaleFactor(a, b)


@dataclass
class LatentFactor:
    """Gaussian approximations q(f_j) = N(f_hat[:, j], sigma[j]) at the training points."""

    points: np.ndarray
    f_hat: np.ndarray
    sigma: np.ndarray  # (J, N, N)
    mu: np.ndarray  # (N, J)
    G: np.ndarray
    Q: np.ndarray
    length_scale: float
    inv_scale: list = field(default_factory=list)

    @property
    def num_classes(self):
        return self.f_hat.shape[1]

    @property
    def e_scale(self):
        return np.array([s.expectation for s in self.inv_scale])

    def marginal_var(self):
        return np.stack([np.diag(s) for s in self.sigma], axis=1) if len(self.points) else np.zeros((0, self.num_classes))

    def predict(self, test_points, prior_mean, r, block=2000):
        """Latent mean and marginal variance ``(P, J)`` at ``test_points``."""
        sig = softmax(self.f_hat, axis=1)
        P = len(np.atleast_2d(test_points)) if np.size(test_points) else 0
        means, vars_ = np.empty((P, self.num_classes)), np.empty((P, self.num_classes))
        for j in range(self.num_classes):
            kern = KernelSpec(self.length_scale, self.inv_scale[j].expectation)
            means[:, j], vars_[:, j] = predict_latent(
                self.points, test_points, kern, self.G[:, j], self.Q[:, j], self.f_hat[:, j], sig[:, j],
                self.mu[:, j], prior_mean[j], r[:, j], block=block,
            )
        return means, vars_


def predict_latent(train_points, test_points, kernel: KernelSpec, G, Q, f_hat, sig, mu, mu_star, r_col,
                   full_cov=False, block=2000):
    """Posterior latent mean and covariance at test points for one class.

    f* = mu* + W*(r - sigma(f) + G (f - mu)), Sigma* = K** - W* G K*^T with
    W* = K* G (G K G + Q)^-1; all kernels divided by ``kernel.inverse_scale``.
    Returns marginal variances unless ``full_cov``.
    """
    test = np.atleast_2d(np.asarray(test_points, dtype=float))
    train = np.asarray(train_points, dtype=float).reshape(len(np.atleast_1d(f_hat)), -1) if np.size(f_hat) else np.zeros((0, test.shape[1]))
    if len(train) and train.shape[1] != test.shape[1]:
        raise ValueError(f"test/train dimensionality mismatch: {test.shape[1]} vs {train.shape[1]}")
    P = len(test)
    scale = kernel.inverse_scale
    mu_star = np.broadcast_to(np.asarray(mu_star, dtype=float), (P,))
    if len(train) == 0:
        if full_cov:
            return mu_star.copy(), gram(test, test, kernel) / scale
        return mu_star.copy(), np.full(P, 1.0 / scale)
    G = np.asarray(G, dtype=float)
    K = gram(train, train, kernel) / scale
    cf = _gain_factor(K, G, np.asarray(Q, dtype=float))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), G.shape)
    y = np.asarray(r_col, dtype=float) - np.asarray(sig, dtype=float) + G * (np.asarray(f_hat, dtype=float) - mu)
    alpha = G * cho_solve(cf, y, check_finite=False)
    L = np.tril(cf[0])
    if full_cov:
        Ks = gram(test, train, kernel) / scale
        V = _lower_solve(L, G[:, None] * Ks.T)
        return mu_star + Ks @ alpha, gram(test, test, kernel) / scale - V.T @ V
    mean = np.empty(P)
    var = np.empty(P)
    for start in range(0, P, block):
        sl = slice(start, start + block)
        Ks = gram(test[sl], train, kernel) / scale
        mean[sl] = mu_star[sl] + Ks @ alpha
        V = _lower_solve(L, G[:, None] * Ks.T)
        var[sl] = 1.0 / scale - np.einsum("ij,ij->j", V, V)
    return mean, np.maximum(var, 1e-12 / scale)


def _lower_solve(L, B):
    return solve_triangular(L, B, lower=True, check_finite=False)


def latent_factor_at_prior(points, prior_mean, length_scale, a0, b0):
    points = np.asarray(points, dtype=float)
    N, J = len(points), len(prior_mean)
    K = gram(points, points, length_scale) if N else np.zeros((0, 0))
    inv = [InverseScaleFactor(a0, b0) for _ in range(J)]
    return LatentFactor(
        points=points,
        f_hat=np.tile(np.asarray(prior_mean, dtype=float), (N, 1)),
        sigma=np.stack([K * (b0 / a0)] * J) if N else np.zeros((J, 0, 0)),
        mu=np.tile(np.asarray(prior_mean, dtype=float), (N, 1)),
        G=np.zeros((N, J)),
        Q=np.zeros((N, J)),
        length_scale=float(length_scale),
        inv_scale=inv,
    )


def update_latent(latent: LatentFactor, r, nu0, a0, b0, K, K_chol, tol=1e-4, max_iter=20, update_scale=True):
    """One VB update of every q(f_j) followed by the inverse scales.

    ``K`` is the unjittered unit-variance Gram matrix, ``K_chol`` the factor of
    its jittered version. Returns a new LatentFactor.
    """
    J = latent.num_classes
    e_scale = latent.e_scale
    Ks = np.stack([K / e_scale[j] for j in range(J)])
    res = ekf_inner_loop(latent.mu, Ks, r, nu0, tol=tol, max_iter=max_iter, f_init=latent.f_hat)
    sigma = np.stack([ekf_covariance(Ks[j], res.W[j], res.G[:, j]) for j in range(J)])
    if update_scale:
        inv = [update_inverse_scale(a0, b0, res.f_hat[:, j], sigma[j], latent.mu[:, j], K, K_chol) for j in range(J)]
    else:
        inv = list(latent.inv_scale)
    return LatentFactor(latent.points, res.f_hat, sigma, latent.mu, res.G, res.Q, latent.length_scale, inv)


def gaussian_kl_terms(latent: LatentFactor, K_chol):
    """Sum over classes of E_q[log p(f_j | mu_j, K/s_j) - log q(f_j)]."""
    N = len(latent.points)
    if N == 0:
        return 0.0
    logdet_K = 2.0 * float(np.sum(np.log(np.diag(K_chol[0]))))
    total = 0.0
    for j in range(latent.num_classes):
        s = latent.inv_scale[j]
        dev = latent.f_hat[:, j] - latent.mu[:, j]
        tr = float(np.trace(cho_solve(K_chol, latent.sigma[j] + np.outer(dev, dev), check_finite=False)))
        logp = 0.5 * (N * s.expected_log - logdet_K - s.expectation * tr)
        cs = robust_cho_factor(latent.sigma[j])
        logdet_S = 2.0 * float(np.sum(np.log(np.diag(cs[0]))))
        # the 2*pi terms of p and q cancel
        total += logp + 0.5 * (logdet_S + N)
    return total


def gamma_kl_terms(inv_scale, a0, b0):
    """Sum of E_q[log p(s | a0, b0) - log q(s | a, b)] over classes."""
    total = 0.0
    for s in inv_scale:
        e, el = s.expectation, s.expected_log
        logp = a0 * math.log(b0) - gammaln(a0) + (a0 - 1) * el - b0 * e
        logq = s.a * math.log(s.b) - gammaln(s.a) + (s.a - 1) * el - s.b * e
        total += logp - logq
    return float(total)


def fit_latent(points, r, length_scale, a0=1.0, b0=1.0, prior_mean=None, nu0=None, tol=1e-4,
               max_iter=50, inner_max_iter=20, moment_samples=10000, seed=0):
    """GP classifier on soft targets ``r`` (no report noise model)."""
    points = np.asarray(points, dtype=float)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    J = r.shape[1]
    prior_mean = np.zeros(J) if prior_mean is None else np.broadcast_to(np.asarray(prior_mean, float), (J,))
    if nu0 is None:
        nu0 = prior_noise_params(prior_mean, b0 / a0, moment_samples, seed)
    latent = latent_factor_at_prior(points, prior_mean, length_scale, a0, b0)
    if len(points) == 0:
        return latent
    K = gram(points, points, length_scale)
    K_chol = robust_cho_factor(K + JITTER * np.eye(len(K)))
    for it in range(max_iter):
        new = update_latent(latent, r, nu0, a0, b0, K, K_chol, tol=tol, max_iter=inner_max_iter)
        df = float(np.max(np.abs(new.f_hat - latent.f_hat)))
        ds = float(np.max(np.abs(new.e_scale - latent.e_scale) / latent.e_scale))
        latent = new
        if it > 0 and df < 10 * tol and ds < 1e-3:
            break
    return latent
