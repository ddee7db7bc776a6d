"""Generation with a restorer: the fixed-mask sampler, the reconstruction
guidance sampler and single-call restoration.

A *restorer* is any callable ``(A_tilde, y, sigma) -> x0_hat`` that accepts a
batch of operators and the matching batch of masked observations.  Oracles
(:func:`ambient_lab.oracle.restorer_for`) and trained networks
(:class:`ambient_lab.denoiser.ModelRestorer`) both qualify.  A restorer that
also exposes ``vjp(A_tilde, y, sigma, v)`` (vector-Jacobian product with
respect to ``y``) can drive the guidance term without finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .corruption import CorruptionProcess, Mask, GaussianMeasurement, apply, further_corrupt, sample_corruption
from .errors import ConfigurationError, NumericalError
from .schedule import NoiseSchedule

KINDS = ("fixed_mask", "reconstruction_guidance")


@dataclass
class SamplerConfig:
    restorer: Callable
    kind: str = "fixed_mask"
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    guidance_weight: float = 5e-4
    num_guidance_masks: int = 4
    fd_step: float = 1e-3
    gradient: str = "fd"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown sampler kind {self.kind!r}")
        if self.guidance_weight < 0:
            raise ConfigurationError("guidance weight must be nonnegative")
        if self.kind == "reconstruction_guidance" and self.num_guidance_masks < 1:
            raise ConfigurationError("guidance needs at least one auxiliary mask")
        if self.gradient not in ("fd", "exact"):
            raise ConfigurationError("gradient must be 'fd' or 'exact'")


def draw_masks(proc: CorruptionProcess, rng: np.random.Generator, size: int):
    """A_tilde ~ p(A_tilde): corrupt, then corrupt further."""
    return further_corrupt(sample_corruption(proc, rng, size=size), proc, rng)


def _restore_checked(restorer, A_tilde, y, sigma, step):
    out = np.asarray(restorer(A_tilde, y, sigma), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"restorer returned non-finite values at step {step}")
    return out


def _init(config, proc, rng, num, A_tilde):
    sched = config.schedule
    x = sched.sigma_max * rng.standard_normal((num, proc.n))
    if A_tilde is None:
        A_tilde = draw_masks(proc, rng, num)
    elif not A_tilde.batch_shape:
        A_tilde = _tile(A_tilde, num)
    return x, A_tilde


def _tile(A, num):
    if isinstance(A, Mask):
        return Mask(np.broadcast_to(A.diag, (num, A.n)))
    return GaussianMeasurement(np.broadcast_to(A.rows, (num,) + A.rows.shape),
                               np.broadcast_to(A.valid, (num,) + A.valid.shape))


def fixed_mask_sample(config: SamplerConfig, proc: CorruptionProcess,
                      rng: np.random.Generator, num: Optional[int] = None, *,
                      A_tilde=None, callback=None) -> np.ndarray:
    """Draw samples with one mask held fixed along each trajectory.

    Each step blends the iterate with the restoration,
    ``x <- gamma x + (1 - gamma) r`` with ``gamma = sigma_next / sigma``.
    ``callback(step, gamma, x, r, x_next)`` sees every update.
    """
    single = num is None
    x, A_tilde = _init(config, proc, rng, 1 if single else num, A_tilde)
    sigmas = config.schedule.sigma_grid()
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        gamma = s_next / s
        r = _restore_checked(config.restorer, A_tilde, apply(A_tilde, x), s, i)
        x_next = gamma * x + (1.0 - gamma) * r
        if callback is not None:
            callback(i, gamma, x, r, x_next)
        x = x_next
    return x[0] if single else x


def discrepancy(restorer, A_tilde, aux_masks, x, sigma) -> np.ndarray:
    """Mean over auxiliary masks of ||r(A_tilde x) - r(A' x)||^2, per sample."""
    r0 = restorer(A_tilde, apply(A_tilde, x), sigma)
    total = np.zeros(x.shape[0])
    for Ap in aux_masks:
        total += np.sum((r0 - restorer(Ap, apply(Ap, x), sigma)) ** 2, axis=1)
    return total / len(aux_masks)


def guidance_gradient_fd(restorer, A_tilde, aux_masks, x, sigma, step) -> np.ndarray:
    """Central finite differences of :func:`discrepancy` in each coordinate."""
    h = step * sigma
    grad = np.empty_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        up = discrepancy(restorer, A_tilde, aux_masks, x + e, sigma)
        down = discrepancy(restorer, A_tilde, aux_masks, x - e, sigma)
        grad[:, j] = (up - down) / (2 * h)
    return grad


def _pullback(A, v):
    """A^T v for batched operators."""
    if isinstance(A, Mask):
        return v * A.diag
    return np.einsum("bmn,bm->bn", A.rows, v)


def guidance_gradient_exact(restorer, A_tilde, aux_masks, x, sigma) -> np.ndarray:
    """Same gradient through the restorer's input vector-Jacobian product."""
    y0 = apply(A_tilde, x)
    r0 = restorer(A_tilde, y0, sigma)
    grad = np.zeros_like(x)
    for Ap in aux_masks:
        yp = apply(Ap, x)
        diff = 2.0 * (r0 - restorer(Ap, yp, sigma))
        grad += _pullback(A_tilde, restorer.vjp(A_tilde, y0, sigma, diff))
        grad -= _pullback(Ap, restorer.vjp(Ap, yp, sigma, diff))
    return grad / len(aux_masks)


def guided_sample(config: SamplerConfig, proc: CorruptionProcess,
                  rng: np.random.Generator, num: Optional[int] = None, *,
                  A_tilde=None, draw_aux=None, callback=None) -> np.ndarray:
    """Fixed-mask update minus ``w * grad`` of the cross-mask discrepancy.

    Auxiliary masks are redrawn at every step from p(A_tilde) unless
    ``draw_aux(rng, num)`` is supplied.  RNG use before the loop matches
    :func:`fixed_mask_sample`, so ``w = 0`` reproduces it bit for bit.
    """
    single = num is None
    num = 1 if single else num
    x, A_tilde = _init(config, proc, rng, num, A_tilde)
    draw_aux = draw_aux or (lambda g, k: draw_masks(proc, g, k))
    restorer = config.restorer
    w = config.guidance_weight
    sigmas = config.schedule.sigma_grid()
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        gamma = s_next / s
        r = _restore_checked(restorer, A_tilde, apply(A_tilde, x), s, i)
        x_next = gamma * x + (1.0 - gamma) * r
        aux = [draw_aux(rng, num) for _ in range(config.num_guidance_masks)]
        if w > 0:
            if config.gradient == "exact":
                g = guidance_gradient_exact(restorer, A_tilde, aux, x, s)
            else:
                g = guidance_gradient_fd(restorer, A_tilde, aux, x, s, config.fd_step)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"guidance gradient non-finite at step {i}")
            x_next = x_next - w * g
        if callback is not None:
            callback(i, gamma, x, r, x_next)
        x = x_next
    return x[0] if single else x


def sample(config: SamplerConfig, proc: CorruptionProcess, rng, num=None, **kw):
    if config.kind == "fixed_mask":
        return fixed_mask_sample(config, proc, rng, num, **kw)
    return guided_sample(config, proc, rng, num, **kw)


def restore(restorer, A_tilde, y_t, sigma_t) -> np.ndarray:
    """One restorer call on measured data ``y_t = A_tilde (x0 + sigma eta)``."""
    return _restore_checked(restorer, A_tilde, y_t, sigma_t, 0)
