"""Objectives and the optimization loop.

Three objectives share one implementation:

* ``ambient`` -- feed the model a further-corrupted observation
  ``A_tilde x_t`` and score it on every pixel that ``A`` kept;
* ``naive``   -- feed ``A x_t`` and score on the same pixels;
* ``clean``   -- identity operators, i.e. plain denoising score matching.

Only the measurement ``y0 = A x0`` and the operator ``A`` ever reach the
loss, so coordinates erased by ``A`` cannot leak into training.

The second half of the module holds the finite-support machinery used to
check the population minimizer exactly: enumeration over masks and atoms,
Gauss-Hermite quadrature over the noise, and a tabular model fitted with
the same optimizer as the network.
"""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import corruption as C
from .corruption import CorruptionProcess, GaussianMeasurement, Mask
from .denoiser import Architecture, DenoiserModel, serialize
from .errors import ContractError
from .oracle import posterior_mean
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

OBJECTIVES = ("ambient", "naive", "clean")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``last_good`` holds the last sane model."""

    def __init__(self, step, last_good):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


# ---------------------------------------------------------------------------
# objectives

def _pullback(A, v):
    if isinstance(A, Mask):
        return v * A.diag
    return np.einsum("...mn,...m->...n", A.rows, v)


def _observe_further(y0, A_tilde):
    """A_tilde x0 from y0 = A x0 (valid because A_tilde only removes rows)."""
    if isinstance(A_tilde, Mask):
        return y0 * A_tilde.diag
    return y0 * A_tilde.valid


def _masked_loss(model, y0, A, A_tilde, sigma, eta, check=True):
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    if check:
        if not C.dominated(A_tilde, A):
            raise ContractError("A_tilde keeps coordinates that A erased")
        if isinstance(A, Mask) and np.any(y0[np.broadcast_to(A.diag, y0.shape) == 0] != 0):
            raise ContractError("measurement carries values where A erased the signal")
    y_t = _observe_further(y0, A_tilde) + np.asarray(sigma).reshape(-1, 1) * C.apply(A_tilde, eta)
    out, cache = model.forward(A_tilde, y_t, sigma, cache=True)
    resid = C.apply(A, out) - y0
    B = y0.shape[0]
    loss = 0.5 * float(np.sum(resid ** 2)) / B
    grad = model.backward(_pullback(A, resid) / B, cache)
    return loss, grad


def ambient_loss(model: DenoiserModel, y0, A, A_tilde, sigma, eta):
    """Further-corruption objective and its parameter gradient.

    ``0.5 * mean_b ||A (h(A_tilde, A_tilde x_t, sigma) - x0)||^2`` evaluated
    from ``y0 = A x0``; ``eta`` is the full-length noise draw.
    """
    return _masked_loss(model, y0, A, A_tilde, sigma, eta)


def naive_loss(model: DenoiserModel, y0, A, sigma, eta):
    """Ignore-the-missing-pixels objective: model input mask equals loss mask."""
    return _masked_loss(model, y0, A, A, sigma, eta)


def clean_loss(model: DenoiserModel, x0, sigma, eta):
    x0 = np.atleast_2d(x0)
    I = Mask(np.ones(x0.shape, dtype=np.uint8))
    return _masked_loss(model, x0, I, I, sigma, eta, check=False)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    """Adam moments plus clipping threshold."""

    lr: float = 1e-3
    clip_max_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def clip_gradient(grad: np.ndarray, max_norm: float):
    """Rescale ``grad`` onto the ball of radius ``max_norm``; returns (grad, norm)."""
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def adam_step(theta: np.ndarray, grad: np.ndarray, state: OptimizerState) -> float:
    """In-place Adam update with gradient clipping; returns the pre-clip norm."""
    grad, norm = clip_gradient(grad, state.clip_max_norm)
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.step += 1
    m, v = state.m, state.v
    m *= state.beta1
    m += (1 - state.beta1) * grad
    v *= state.beta2
    grad = grad * grad
    grad *= 1 - state.beta2
    v += grad
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    denom = np.sqrt(v, out=grad)
    denom /= np.sqrt(c2)
    denom += state.eps
    np.divide(m, denom, out=denom)
    denom *= state.lr / c1
    theta -= denom
    return norm


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainSettings:
    objective: str = "ambient"
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 1e-3
    clip_max_norm: float = 1.0
    log_every: int = 500
    checkpoint_every: int = 0
    seed: int = 0
    hidden: tuple = (256, 256, 256)
    sigma_data: float = 0.5
    lr_schedule: str = "cosine"
    lr_floor: float = 0.01

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; cosine decays to ``lr_floor * lr``."""
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = (step - 1) / (self.steps - 1)
        return self.lr * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))


@dataclass
class OracleProbe:
    """Fixed held-out (A_tilde, y, sigma) triples with oracle answers."""

    A_tilde: object
    y: np.ndarray
    sigma: np.ndarray
    target: np.ndarray

    @classmethod
    def build(cls, dist, proc: CorruptionProcess, sigmas, size: int, seed: int) -> "OracleProbe":
        rng = np.random.default_rng(seed)
        x0 = dist.sample(size, rng)
        A_tilde = C.further_corrupt(C.sample_corruption(proc, rng, size=size), proc, rng)
        sigma = np.asarray(sigmas, dtype=np.float64)[np.arange(size) % len(sigmas)]
        y = C.apply(A_tilde, x0 + sigma[:, None] * rng.standard_normal(x0.shape))
        return cls(A_tilde, y, sigma, posterior_mean(dist, A_tilde, y, sigma))

    def gap(self, restorer, by_sigma: bool = False):
        """Normalized error mean||h - o|| / mean||o|| (overall or per sigma)."""
        err = np.linalg.norm(restorer(self.A_tilde, self.y, self.sigma) - self.target, axis=1)
        ref = np.linalg.norm(self.target, axis=1)
        if not by_sigma:
            return float(err.mean() / ref.mean())
        return {float(s): float(err[self.sigma == s].mean() / ref[self.sigma == s].mean())
                for s in np.unique(self.sigma)}


@dataclass
class TrainResult:
    model: DenoiserModel
    metrics: list = field(default_factory=list)
    state: Optional[OptimizerState] = None


METRIC_COLUMNS = ("step", "loss", "grad_norm", "oracle_gap", "wall_ms")


def train(y0: np.ndarray, A, proc: CorruptionProcess, sched: NoiseSchedule,
          settings: TrainSettings, *, probe: Optional[OracleProbe] = None,
          config_digest: str = "", out_dir: Optional[Path] = None,
          model: Optional[DenoiserModel] = None) -> TrainResult:
    """Fit a denoiser on corrupted pairs ``(y0 = A x0, A)``.

    Each step draws a minibatch of records and fresh ``A_tilde``, noise
    level and noise.  The measurement pair of a record is never redrawn.
    With ``out_dir`` set, metrics go to ``metrics.csv`` and checkpoints to
    ``model_XXXXXXX.ckpt`` / ``model.ckpt``.
    """
    rng = np.random.default_rng(settings.seed)
    if model is None:
        arch = Architecture.for_process(proc, settings.hidden, settings.sigma_data)
        model = DenoiserModel(arch, rng=np.random.default_rng([settings.seed, 1]),
                              config_digest=config_digest)
    state = OptimizerState(lr=settings.lr, clip_max_norm=settings.clip_max_norm)
    y0 = np.asarray(y0, dtype=np.float64)
    N = y0.shape[0]
    if settings.objective == "clean" and not (isinstance(A, Mask) and np.all(A.diag == 1)):
        raise ContractError("the clean objective needs fully observed records (p = 0)")
    metrics = []
    last_good = model.copy()
    t0 = time.perf_counter()
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
    try:
        for step in range(1, settings.steps + 1):
            idx = rng.integers(N, size=min(settings.batch_size, N))
            A_b = A[idx]
            sigma = sched.sigma(sched.sample_time(rng, len(idx)))
            eta = rng.standard_normal((len(idx), proc.n))
            if settings.objective == "ambient":
                A_t = C.further_corrupt(A_b, proc, rng)
                loss, grad = _masked_loss(model, y0[idx], A_b, A_t, sigma, eta, check=False)
            elif settings.objective == "naive":
                loss, grad = _masked_loss(model, y0[idx], A_b, A_b, sigma, eta, check=False)
            else:
                I = Mask(np.ones((len(idx), proc.n), dtype=np.uint8))
                loss, grad = _masked_loss(model, y0[idx], I, I, sigma, eta, check=False)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                if out_dir is not None:
                    (out_dir / "model.ckpt").write_bytes(serialize(last_good))
                raise TrainingDiverged(step, last_good)
            state.lr = settings.lr_at(step)
            gnorm = adam_step(model.theta, grad, state)
            if step % settings.log_every == 0 or step == settings.steps:
                gap = probe.gap(model.forward) if probe is not None else float("nan")
                row = (step, loss, gnorm, gap, (time.perf_counter() - t0) * 1e3)
                metrics.append(dict(zip(METRIC_COLUMNS, row)))
                log.info("step %d loss %.5f |g| %.3f gap %.4f", step, loss, gnorm, gap)
                if writer is not None:
                    writer.writerow(row)
                last_good = model.copy()
            if out_dir is not None and settings.checkpoint_every and step % settings.checkpoint_every == 0:
                (out_dir / f"model_{step:07d}.ckpt").write_bytes(serialize(model))
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None:
        (out_dir / "model.ckpt").write_bytes(serialize(model))
    return TrainResult(model, metrics, state)


# ---------------------------------------------------------------------------
# finite-support population analysis (random inpainting)

def enumerate_masks(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.uint8)


def mask_prior(proc: CorruptionProcess, diag: np.ndarray) -> np.ndarray:
    """p(A) for each row of ``diag``."""
    d = np.atleast_2d(diag)
    return np.prod(np.where(d == 1, 1.0 - proc.p, proc.p), axis=-1)


def further_likelihood(proc: CorruptionProcess, tilde: np.ndarray, diag: np.ndarray) -> np.ndarray:
    """p(A_tilde | A), broadcasting over rows of ``diag``."""
    d = np.atleast_2d(diag)
    t = np.broadcast_to(tilde, d.shape)
    per = np.where(d == 1, np.where(t == 1, 1.0 - proc.delta, proc.delta),
                   np.where(t == 1, 0.0, 1.0))
    return np.prod(per, axis=-1)


def _noise_density(atoms, obs, y, sigma):
    """N(y_obs; atom_obs, sigma^2 I) for each atom (rows) and query (cols)."""
    diff = y[None, :, obs] - atoms[:, None, obs]
    k = obs.size
    return np.exp(-0.5 * np.sum(diff ** 2, axis=-1) / sigma ** 2) / (2 * np.pi * sigma ** 2) ** (k / 2)


def _cell_weights(dist, proc, input_mask, y, sigma, objective):
    """Joint weights w[j, a, q] over atoms j, true masks a and queries q."""
    masks = enumerate_masks(proc.n)
    if objective == "ambient":
        pa = mask_prior(proc, masks) * further_likelihood(proc, input_mask, masks)
    elif objective == "naive":
        pa = np.where(np.all(masks == input_mask, axis=1), mask_prior(proc, masks), 0.0)
    else:
        raise ValueError("objective must be 'ambient' or 'naive'")
    obs = np.flatnonzero(input_mask)
    like = _noise_density(dist.atoms, obs, np.atleast_2d(y), sigma)
    w = dist.probs[:, None, None] * pa[None, :, None] * like[:, None, :]
    return w, masks


def population_minimizer(dist, proc: CorruptionProcess, input_mask, y, sigma: float,
                         objective: str = "ambient"):
    """Exact minimizer of the population loss at queries ``(input_mask, y)``.

    Solves the per-coordinate normal equations of the conditional risk
    sum_{j, A} w * ||A (h - x_j)||^2 by enumerating atoms and masks.
    Returns ``(h, determined)``; coordinates with a zero normal-equation
    coefficient are undetermined and come back as NaN.
    """
    input_mask = np.asarray(input_mask, dtype=np.uint8)
    w, masks = _cell_weights(dist, proc, input_mask, y, sigma, objective)
    coef = np.einsum("jaq,ai->qi", w, masks.astype(float))
    rhs = np.einsum("jaq,ai,ji->qi", w, masks.astype(float), dist.atoms)
    scale = coef.max(axis=1, keepdims=True)
    determined = coef > 1e-300 + 1e-14 * scale
    h = np.full(coef.shape, np.nan)
    h[determined] = rhs[determined] / coef[determined]
    return h, determined


def _node_grid(nodes: int, k: int) -> np.ndarray:
    """All index tuples of a k-dimensional tensor grid (one empty tuple when k = 0)."""
    return np.array(list(itertools.product(range(nodes), repeat=k)), dtype=int).reshape(nodes ** k, k)


def gauss_hermite_queries(dist, input_mask, sigma: float, nodes: int = 7):
    """Queries y = mask * (atom + sigma * xi) over a tensor Gauss-Hermite grid.

    Returns ``(y, weights)``; the weights integrate against
    p(atom) N(xi; 0, I) on the observed coordinates.
    """
    xi, wq = np.polynomial.hermite_e.hermegauss(nodes)
    wq = wq / wq.sum()
    obs = np.flatnonzero(input_mask)
    grid = _node_grid(nodes, obs.size)
    ys, ws = [], []
    for j, atom in enumerate(dist.atoms):
        for g in grid:
            y = np.zeros(dist.n)
            y[obs] = atom[obs] + sigma * xi[g]
            ys.append(y)
            ws.append(dist.probs[j] * np.prod(wq[g]))
    return np.array(ys), np.array(ws)


def population_objective(h: Callable, dist, proc: CorruptionProcess, sigma: float,
                         objective: str = "ambient", nodes: int = 20) -> float:
    """Population loss of ``h(input_mask, y) -> R^n`` for finite data.

    Masks and atoms are enumerated; the noise on observed coordinates is
    integrated by Gauss-Hermite quadrature.
    """
    masks = enumerate_masks(proc.n)
    xi, wq = np.polynomial.hermite_e.hermegauss(nodes)
    wq = wq / wq.sum()
    total = 0.0
    for A in masks:
        pA = float(mask_prior(proc, A)[0])
        if pA == 0.0:
            continue
        tildes = masks if objective == "ambient" else A[None]
        for T in tildes:
            pT = float(further_likelihood(proc, T, A)[0]) if objective == "ambient" else 1.0
            if pT == 0.0:
                continue
            obs = np.flatnonzero(T)
            grid = _node_grid(nodes, obs.size)
            gw = np.prod(wq[grid], axis=1) if obs.size else np.ones(1)
            for j, atom in enumerate(dist.atoms):
                y = np.zeros((grid.shape[0], dist.n))
                y[:, obs] = atom[obs] + sigma * xi[grid]
                err = A * (h(T, y) - atom)
                total += pA * pT * dist.probs[j] * float(gw @ (0.5 * np.sum(err ** 2, axis=1)))
    return total


def fit_tabular(dist, proc: CorruptionProcess, input_mask, y, sigma: float,
                objective: str = "ambient", steps: int = 3000, lr: float = 0.05,
                rng: Optional[np.random.Generator] = None, init: Optional[np.ndarray] = None):
    """Fit one free output vector per query cell with the training optimizer.

    The loss of a cell is its normalized conditional risk; entries whose
    coordinate never carries weight receive zero gradient and keep ``init``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    input_mask = np.asarray(input_mask, dtype=np.uint8)
    w, masks = _cell_weights(dist, proc, input_mask, y, sigma, objective)
    w = w / w.sum(axis=(0, 1), keepdims=True)
    Af = masks.astype(float)
    Q = w.shape[2]
    table = rng.uniform(-3.0, -1.0, size=(Q, dist.n)) if init is None else np.array(init, dtype=float)
    state = OptimizerState(lr=lr, clip_max_norm=None)
    flat = table.reshape(-1)
    for _ in range(steps):
        t = flat.reshape(Q, dist.n)
        # d/dh of 0.5 sum_{j,a} w ||A (h - x_j)||^2 = sum w A (h - x_j)
        grad = np.einsum("jaq,ai,qi->qi", w, Af, t) - np.einsum("jaq,ai,ji->qi", w, Af, dist.atoms)
        adam_step(flat, grad.reshape(-1), state)
    return flat.reshape(Q, dist.n)
