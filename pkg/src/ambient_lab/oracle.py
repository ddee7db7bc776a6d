"""Closed-form conditional expectations E[x0 | A_tilde x_t, A_tilde].

Two data families are supported: Gaussian mixtures and finite-support
distributions.  Both posterior means accept a single operator or a batch of
operators and evaluate rows that share an operator and noise level together.
All likelihoods are combined in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .corruption import GaussianMeasurement, Mask, Operator
from .errors import NumericalError
from .schedule import score_from_denoiser

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GMMDistribution:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        K, n = mu.shape
        if w.shape != (K,) or cov.shape != (K, n, n):
            raise ValueError("weights (K,), means (K, n), covs (K, n, n) expected")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2)):
            raise ValueError("covariances must be symmetric")
        for c in cov:
            np.linalg.cholesky(c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def canonical(cls, radius: float = 1.0, std: float = 0.1) -> "GMMDistribution":
        """Three equal-weight components on an equilateral triangle around 0."""
        angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        covs = np.broadcast_to(std ** 2 * np.eye(2), (3, 2, 2)).copy()
        return cls(np.full(3, 1.0 / 3.0), means, covs)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.num_components, size=size, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((size, self.n))
        return self.means[comp] + np.einsum("bij,bj->bi", chol[comp], z)

    def log_density(self, x, sigma: float = 0.0) -> np.ndarray:
        """log p_sigma(x) of the mixture convolved with N(0, sigma^2 I)."""
        x = np.atleast_2d(x)
        covs = self.covs + sigma ** 2 * np.eye(self.n)
        terms = np.stack([_log_normal(x - mu, _cholesky(c))
                          for mu, c in zip(self.means, covs)], axis=1)
        return logsumexp(terms + np.log(self.weights), axis=1)

    def to_dict(self) -> dict:
        return {"family": "gmm", "weights": self.weights.tolist(),
                "means": self.means.tolist(), "covs": self.covs.tolist()}


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (atoms.shape[0],):
            raise ValueError("one probability per atom")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("atom probabilities must be nonnegative and sum to 1")
        if np.unique(atoms, axis=0).shape[0] != atoms.shape[0]:
            raise ValueError("atoms must be distinct")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @property
    def n(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.probs @ self.atoms

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return self.atoms[rng.choice(len(self.probs), size=size, p=self.probs)]

    def to_dict(self) -> dict:
        return {"family": "finite", "atoms": self.atoms.tolist(), "probs": self.probs.tolist()}


def distribution_from_dict(spec: dict):
    family = spec.get("family", "gmm")
    if family == "gmm":
        if spec.get("canonical"):
            return GMMDistribution.canonical(spec.get("radius", 1.0), spec.get("std", 0.1))
        return GMMDistribution(spec["weights"], spec["means"], spec["covs"])
    if family == "finite":
        return FiniteDistribution(spec["atoms"], spec["probs"])
    raise ValueError(f"unknown data family {family!r}")


# ---------------------------------------------------------------------------
# linear algebra helpers

def _cholesky(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        k = C.shape[0]
        jitter = 1e-9 * max(np.trace(C), 1e-300) / k
        try:
            return np.linalg.cholesky(C + jitter * np.eye(k))
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"reduced Gram matrix of size {k} is singular beyond jitter {jitter:.2e}") from None


def _log_normal(diff: np.ndarray, L: np.ndarray) -> np.ndarray:
    """log N(diff; 0, L L^T) for rows of ``diff``."""
    z = np.linalg.solve(L, diff.T)
    k = L.shape[0]
    return -0.5 * (np.sum(z * z, axis=0) + k * LOG_2PI) - np.sum(np.log(np.diag(L)))


def _reduced_operator(A: Operator):
    """Return (S, selector): S has only the informative rows of A."""
    if isinstance(A, Mask):
        obs = np.flatnonzero(A.diag)
        return np.eye(A.n)[obs], obs
    keep = np.flatnonzero(A.valid)
    return A.rows[keep], keep


def _groups(A: Operator, y: np.ndarray, sigma: np.ndarray):
    """Yield (single operator, row indices, sigma) over rows sharing both."""
    B = y.shape[0]
    if not A.batch_shape:
        for s in np.unique(sigma):
            yield A, np.flatnonzero(sigma == s), float(s)
        return
    if isinstance(A, Mask):
        keys = np.concatenate([A.diag.astype(np.float64), sigma[:, None]], axis=1)
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for g in range(inverse.max() + 1):
            rows = np.flatnonzero(inverse == g)
            yield A[rows[0]], rows, float(sigma[rows[0]])
        return
    for b in range(B):
        yield A[b], np.array([b]), float(sigma[b])


def _prepare(A: Operator, y, sigma):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y2 = y[None] if single else y
    if A.batch_shape and A.batch_shape[0] != y2.shape[0]:
        raise ValueError("operator batch and observation batch differ in length")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (y2.shape[0],))
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    return y2, sigma, single


# ---------------------------------------------------------------------------
# posterior means

def _gmm_group(dist: GMMDistribution, S, y_S, sigma):
    B = y_S.shape[0]
    if S.shape[0] == 0:
        return np.broadcast_to(dist.mean(), (B, dist.n)).copy()
    noise = sigma ** 2 * (S @ S.T)
    logits = np.empty((B, dist.num_components))
    post = np.empty((dist.num_components, B, dist.n))
    for k in range(dist.num_components):
        mu, cov = dist.means[k], dist.covs[k]
        cross = cov @ S.T
        L = _cholesky(S @ cross + noise)
        resid = y_S - S @ mu
        logits[:, k] = np.log(dist.weights[k]) + _log_normal(resid, L)
        gain = np.linalg.solve(L.T, np.linalg.solve(L, resid.T))
        post[k] = mu + (cross @ gain).T
    r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return np.einsum("bk,kbn->bn", r, post)


def gmm_posterior_mean(dist: GMMDistribution, A_tilde: Operator, y, sigma_t) -> np.ndarray:
    """E[x0 | A_tilde (x0 + sigma eta) = y, A_tilde] under a Gaussian mixture.

    Zero rows (erased pixels, dropped measurements) are removed before
    inference; with nothing observed the prior mean comes back.
    """
    y2, sigma, single = _prepare(A_tilde, y, sigma_t)
    out = np.empty((y2.shape[0], dist.n))
    for op, rows, s in _groups(A_tilde, y2, sigma):
        S, sel = _reduced_operator(op)
        out[rows] = _gmm_group(dist, S, y2[rows][:, sel], s)
    return out[0] if single else out


def _finite_group(dist: FiniteDistribution, S, y_S, sigma):
    B = y_S.shape[0]
    if S.shape[0] == 0:
        return np.broadcast_to(dist.mean(), (B, dist.n)).copy()
    if sigma == 0:
        raise NumericalError("finite posterior needs sigma > 0 to be a density")
    L = _cholesky(sigma ** 2 * (S @ S.T))
    proj = dist.atoms @ S.T
    logits = np.stack([_log_normal(y_S - a, L) for a in proj], axis=1) + np.log(dist.probs)
    r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return r @ dist.atoms


def finite_posterior_mean(dist: FiniteDistribution, A_tilde: Operator, y, sigma_t) -> np.ndarray:
    """E[x0 | A_tilde x_t = y, A_tilde] for a finite-support prior, by enumeration."""
    y2, sigma, single = _prepare(A_tilde, y, sigma_t)
    out = np.empty((y2.shape[0], dist.n))
    for op, rows, s in _groups(A_tilde, y2, sigma):
        S, sel = _reduced_operator(op)
        out[rows] = _finite_group(dist, S, y2[rows][:, sel], s)
    return out[0] if single else out


def posterior_mean(dist, A_tilde: Operator, y, sigma_t) -> np.ndarray:
    if isinstance(dist, GMMDistribution):
        return gmm_posterior_mean(dist, A_tilde, y, sigma_t)
    return finite_posterior_mean(dist, A_tilde, y, sigma_t)


def gmm_marginal_score(dist: GMMDistribution, x_t, sigma_t: float) -> np.ndarray:
    """Analytic grad log p_sigma(x_t) of the sigma-smoothed mixture."""
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    eye = np.eye(dist.n)
    logits = np.empty((x2.shape[0], dist.num_components))
    pulls = np.empty((dist.num_components,) + x2.shape)
    for k in range(dist.num_components):
        L = _cholesky(dist.covs[k] + sigma_t ** 2 * eye)
        diff = x2 - dist.means[k]
        logits[:, k] = np.log(dist.weights[k]) + _log_normal(diff, L)
        pulls[k] = -np.linalg.solve(L.T, np.linalg.solve(L, diff.T)).T
    r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    score = np.einsum("bk,kbn->bn", r, pulls)
    return score[0] if single else score


def restorer_for(dist) -> Callable:
    """Wrap an oracle as a restorer ``(A_tilde, y, sigma) -> x0_hat``."""
    def restorer(A_tilde, y, sigma):
        return posterior_mean(dist, A_tilde, y, sigma)
    restorer.oracle = dist
    return restorer


def tweedie_consistency(dist: GMMDistribution, points: np.ndarray, sigmas) -> float:
    """Max relative gap between the analytic score and (D - x) / sigma^2.

    ``D`` is the posterior mean under the identity operator, so the two
    sides are independent computations of the same quantity.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ident = Mask(np.ones((len(pts), dist.n), dtype=np.uint8))
    worst = 0.0
    for s in np.asarray(sigmas, dtype=np.float64):
        ref = gmm_marginal_score(dist, pts, float(s))
        via = score_from_denoiser(gmm_posterior_mean(dist, ident, pts, float(s)), pts, float(s))
        err = np.linalg.norm(via - ref, axis=1) / np.maximum(np.linalg.norm(ref, axis=1), 1e-300)
        worst = max(worst, float(err.max()))
    return worst
