"""Corruption operators: masks, Gaussian measurement matrices and the
further-corruption step that turns a measurement operator ``A`` into a
strictly less informative ``A_tilde``.

Operators may carry leading batch dimensions.  A :class:`Mask` stores only
the diagonal (one byte per pixel); the ``n x n`` matrix is never built unless
:meth:`Mask.matrix` is asked for it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ConditionalSamplingError, ConfigurationError, ContractError

KINDS = ("random_inpainting", "block_inpainting", "gaussian")


@dataclass(frozen=True, eq=False)
class Mask:
    """Diagonal 0/1 operator, ``diag[..., i] == 1`` where pixel ``i`` is kept."""

    diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag)
        if d.ndim == 0:
            raise ValueError("mask needs at least one dimension")
        if d.size and not np.all((d == 0) | (d == 1)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "diag", np.ascontiguousarray(d, dtype=np.uint8))

    @property
    def n(self) -> int:
        return self.diag.shape[-1]

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.diag.shape[:-1]

    def __len__(self):
        return self.diag.shape[0]

    def __getitem__(self, idx) -> "Mask":
        if not self.batch_shape:
            raise TypeError("unbatched mask is not indexable")
        return Mask(self.diag[idx])

    def observed(self) -> np.ndarray:
        return self.diag.astype(bool)

    def matrix(self) -> np.ndarray:
        if self.batch_shape:
            raise ValueError("matrix view only exists for a single mask")
        return np.diag(self.diag.astype(np.float64))

    def to_bytes(self) -> bytes:
        if self.batch_shape:
            raise ValueError("serialize masks one at a time")
        return struct.pack("<I", self.n) + self.diag.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mask":
        if len(data) < 4:
            raise ValueError("mask record shorter than its length prefix")
        (n,) = struct.unpack_from("<I", data)
        if len(data) != 4 + n:
            raise ValueError(f"mask record declares {n} pixels but carries {len(data) - 4}")
        return cls(np.frombuffer(data, dtype=np.uint8, offset=4).copy())


@dataclass(frozen=True, eq=False)
class GaussianMeasurement:
    """``m x n`` measurement matrix whose dropped rows are zero and flagged invalid."""

    rows: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.float64)
        if r.ndim < 2:
            raise ValueError("rows must be at least 2-D (m, n)")
        v = np.any(r != 0, axis=-1) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if v.shape != r.shape[:-1]:
            raise ValueError("valid flags must have shape rows.shape[:-1]")
        if np.any(r[~v] != 0):
            raise ValueError("rows flagged invalid must be all-zero")
        object.__setattr__(self, "rows", r)
        object.__setattr__(self, "valid", v)

    @property
    def m(self) -> int:
        return self.rows.shape[-2]

    @property
    def n(self) -> int:
        return self.rows.shape[-1]

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.rows.shape[:-2]

    def __len__(self):
        return self.rows.shape[0]

    def __getitem__(self, idx) -> "GaussianMeasurement":
        if not self.batch_shape:
            raise TypeError("unbatched measurement is not indexable")
        return GaussianMeasurement(self.rows[idx], self.valid[idx])

    def matrix(self) -> np.ndarray:
        return self.rows

    def to_bytes(self) -> bytes:
        if self.batch_shape:
            raise ValueError("serialize measurements one at a time")
        return struct.pack("<II", self.m, self.n) + self.rows.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GaussianMeasurement":
        if len(data) < 8:
            raise ValueError("measurement record shorter than its header")
        m, n = struct.unpack_from("<II", data)
        if len(data) != 8 + 4 * m * n:
            raise ValueError("measurement record size disagrees with its header")
        rows = np.frombuffer(data, dtype="<f4", offset=8).reshape(m, n)
        return cls(rows.astype(np.float64))


Operator = Union[Mask, GaussianMeasurement]


@dataclass(frozen=True)
class CorruptionProcess:
    """Distribution p(A) together with the further-corruption rule p(A_tilde | A).

    For the inpainting kinds ``p`` is the per-pixel erasure probability and
    ``delta`` the probability of erasing a surviving pixel again.  For the
    gaussian kind ``delta`` is the number of rows dropped (an integer, usually 1).
    ``image_shape`` is ``(h, w)`` or ``(h, w, c)`` and is required by the block
    kind, whose blocks cover every channel.
    """

    kind: str = "random_inpainting"
    n: int = 2
    p: float = 0.5
    delta: float = 0.1
    block_size: int = 0
    image_shape: Optional[Tuple[int, ...]] = None
    m: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown corruption kind {self.kind!r}")
        if self.n < 1:
            raise ConfigurationError("n must be positive")
        if self.image_shape is not None:
            shape = tuple(int(s) for s in self.image_shape)
            object.__setattr__(self, "image_shape", shape)
            if int(np.prod(shape)) != self.n:
                raise ConfigurationError(f"image_shape {shape} does not flatten to n={self.n}")
        if self.kind == "random_inpainting":
            if not 0.0 <= self.p < 1.0:
                raise ConfigurationError(f"p={self.p} outside [0, 1)")
            if not 0.0 <= self.delta < 1.0:
                raise ConfigurationError(f"delta={self.delta} outside [0, 1)")
        elif self.kind == "block_inpainting":
            if self.image_shape is None or len(self.image_shape) not in (2, 3):
                raise ConfigurationError("block inpainting needs image_shape (h, w[, c])")
            h, w = self.image_shape[:2]
            if not 1 <= self.block_size <= min(h, w):
                raise ConfigurationError(
                    f"block of side {self.block_size} does not fit a {h}x{w} image")
        else:
            if self.m < 1:
                raise ConfigurationError("gaussian kind needs m >= 1 rows")
            k = int(self.delta)
            if k != self.delta or not 0 <= k <= self.m:
                raise ConfigurationError(
                    f"gaussian delta counts dropped rows; got {self.delta} for m={self.m}")

    @property
    def measurement_dim(self) -> int:
        return self.m if self.kind == "gaussian" else self.n

    @property
    def rows_dropped(self) -> int:
        return int(self.delta)

    def survival_probability(self) -> float:
        """Probability that a pixel survives both A and A_tilde (random inpainting)."""
        return (1.0 - self.p) * (1.0 - self.delta)

    def posterior_observed_prob(self) -> float:
        return posterior_observed_prob(self.p, self.delta)


def posterior_observed_prob(p: float, delta: float) -> float:
    """q = Pr(A_ii = 1 | A_tilde_ii = 0) for random inpainting.

    With ``p == 0`` the operator A is always the identity, so q is 1 for any
    delta.
    """
    if p == 0.0:
        return 1.0
    num = (1.0 - p) * delta
    return num / (num + p)


# ---------------------------------------------------------------------------
# block geometry

def _grid(proc: CorruptionProcess) -> Tuple[int, int, int]:
    shape = proc.image_shape
    return shape[0], shape[1], (shape[2] if len(shape) == 3 else 1)


def _block_diag(proc: CorruptionProcess, corners) -> np.ndarray:
    h, w, c = _grid(proc)
    s = proc.block_size
    keep = np.ones((h, w, c), dtype=np.uint8)
    for r0, c0 in corners:
        keep[r0:r0 + s, c0:c0 + s, :] = 0
    return keep.reshape(-1)


def _overlaps(a, b, s) -> bool:
    return abs(a[0] - b[0]) < s and abs(a[1] - b[1]) < s


def _corners(proc: CorruptionProcess):
    h, w, _ = _grid(proc)
    s = proc.block_size
    return [(r, c) for r in range(h - s + 1) for c in range(w - s + 1)]


def _free_corners(proc: CorruptionProcess, taken):
    s = proc.block_size
    return [q for q in _corners(proc) if not any(_overlaps(q, t, s) for t in taken)]


def _block_corner_of(proc: CorruptionProcess, diag: np.ndarray):
    h, w, c = _grid(proc)
    hole = diag.reshape(h, w, c)[:, :, 0] == 0
    rows, cols = np.nonzero(hole)
    if rows.size != proc.block_size ** 2:
        raise ContractError("mask is not a single-block inpainting operator")
    return int(rows.min()), int(cols.min())


# ---------------------------------------------------------------------------
# sampling

def sample_corruption(proc: CorruptionProcess, rng: np.random.Generator,
                      size: Optional[int] = None) -> Operator:
    """Draw A ~ p(A); ``size`` adds one leading batch dimension."""
    shape = () if size is None else (size,)
    if proc.kind == "random_inpainting":
        return Mask((rng.random(shape + (proc.n,)) >= proc.p).astype(np.uint8))
    if proc.kind == "gaussian":
        return GaussianMeasurement(rng.standard_normal(shape + (proc.m, proc.n)))
    corners = _corners(proc)
    picks = rng.integers(len(corners), size=shape or None)
    if size is None:
        return Mask(_block_diag(proc, [corners[int(picks)]]))
    return Mask(np.stack([_block_diag(proc, [corners[int(i)]]) for i in picks]))


def further_corrupt(A: Operator, proc: CorruptionProcess,
                    rng: np.random.Generator) -> Operator:
    """Draw A_tilde ~ p(A_tilde | A).

    Random inpainting erases each surviving pixel with probability ``delta``;
    block inpainting adds one more non-overlapping block of the same size;
    the gaussian kind zeroes ``delta`` uniformly chosen surviving rows.
    """
    if proc.kind == "random_inpainting":
        keep = rng.random(A.diag.shape) >= proc.delta
        return Mask(A.diag * keep)
    if proc.kind == "gaussian":
        return _drop_rows(A, proc.rows_dropped, rng)
    diags = A.diag.reshape(-1, A.n)
    out = np.empty_like(diags)
    for b, d in enumerate(diags):
        first = _block_corner_of(proc, d)
        free = _free_corners(proc, [first])
        if not free:
            raise ConfigurationError(
                f"no room for a second non-overlapping {proc.block_size}-block")
        second = free[int(rng.integers(len(free)))]
        out[b] = d * _block_diag(proc, [second])
    return Mask(out.reshape(A.diag.shape))


def _drop_rows(A: GaussianMeasurement, k: int, rng) -> GaussianMeasurement:
    rows = A.rows.reshape(-1, A.m, A.n).copy()
    valid = A.valid.reshape(-1, A.m).copy()
    for b in range(rows.shape[0]):
        alive = np.flatnonzero(valid[b])
        if alive.size < k:
            raise ContractError("cannot drop more rows than survive")
        drop = rng.choice(alive, size=k, replace=False)
        rows[b, drop] = 0.0
        valid[b, drop] = False
    return GaussianMeasurement(rows.reshape(A.rows.shape), valid.reshape(A.valid.shape))


def apply(A: Operator, x: np.ndarray) -> np.ndarray:
    """Apply the operator to ``x`` (broadcasting over leading dimensions)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != A.n:
        raise ValueError(f"operator acts on R^{A.n}, got vectors of length {x.shape[-1]}")
    if isinstance(A, Mask):
        return x * A.diag
    return np.einsum("...mn,...n->...m", A.rows, x)


def dominated(A_tilde: Operator, A: Operator) -> bool:
    """True when A_tilde never keeps what A erased."""
    if isinstance(A, Mask):
        return bool(np.all(A_tilde.diag <= A.diag))
    same = np.all(A_tilde.rows == A.rows, axis=-1)
    return bool(np.all(~A_tilde.valid | (A.valid & same)))


# ---------------------------------------------------------------------------
# E_{A | A_tilde}[A^T A]

def conditional_second_moment(proc: CorruptionProcess, A_tilde: Operator, *,
                              rng: Optional[np.random.Generator] = None,
                              num_samples: int = 20_000) -> np.ndarray:
    """Closed-form E[A^T A | A_tilde] for a single operator.

    Random inpainting gives a diagonal with 1 on the kept pixels and q off
    them; the gaussian kind gives ``A_tilde^T A_tilde + k I``.  Block
    inpainting has no closed form and falls back to the Monte-Carlo estimate.
    """
    if proc.kind == "random_inpainting":
        q = proc.posterior_observed_prob()
        return np.diag(np.where(A_tilde.diag == 1, 1.0, q))
    if proc.kind == "gaussian":
        R = A_tilde.rows
        return R.T @ R + proc.rows_dropped * np.eye(proc.n)
    rng = np.random.default_rng() if rng is None else rng
    return estimate_second_moment(proc, A_tilde, num_samples, rng)[0]


def sample_conditional(proc: CorruptionProcess, A_tilde: Operator, num: int,
                       rng: np.random.Generator, *, method: str = "direct",
                       min_acceptance: float = 1e-3) -> Operator:
    """Draw ``num`` operators from p(A | A_tilde)."""
    if proc.kind == "random_inpainting":
        q = proc.posterior_observed_prob()
        revived = rng.random((num, proc.n)) < q
        return Mask(np.where(A_tilde.diag == 1, 1, revived).astype(np.uint8))
    if proc.kind == "gaussian":
        rows = np.broadcast_to(A_tilde.rows, (num, proc.m, proc.n)).copy()
        dead = ~A_tilde.valid
        rows[:, dead, :] = rng.standard_normal((num, int(dead.sum()), proc.n))
        return GaussianMeasurement(rows)
    if method == "rejection":
        return _block_conditional_rejection(proc, A_tilde, num, rng, min_acceptance)
    return _block_conditional_direct(proc, A_tilde, num, rng)


def _block_posterior(proc, A_tilde):
    """Candidate first blocks and their posterior weights given A_tilde."""
    target = A_tilde.diag
    cands, weights = [], []
    for first in _corners(proc):
        free = _free_corners(proc, [first])
        for second in free:
            if np.array_equal(_block_diag(proc, [first, second]), target):
                cands.append(first)
                weights.append(1.0 / len(free))
                break
    w = np.asarray(weights)
    return cands, (w / w.sum() if w.size else w)


def _block_conditional_direct(proc, A_tilde, num, rng):
    cands, w = _block_posterior(proc, A_tilde)
    if not cands:
        raise ConditionalSamplingError(
            "A_tilde is not a two-block mask of this process (acceptance rate 0)", rate=0.0)
    picks = rng.choice(len(cands), size=num, p=w)
    table = np.stack([_block_diag(proc, [c]) for c in cands])
    return Mask(table[picks])


def _block_conditional_rejection(proc, A_tilde, num, rng, min_acceptance):
    accepted = []
    trials = 0
    budget = int(np.ceil(num / min_acceptance))
    while len(accepted) < num:
        batch = max(num, 256)
        A = sample_corruption(proc, rng, size=batch)
        At = further_corrupt(A, proc, rng)
        hit = np.all(At.diag == A_tilde.diag, axis=-1)
        trials += batch
        accepted.extend(A.diag[hit])
        rate = len(accepted) / trials
        if trials >= budget and len(accepted) < num:
            raise ConditionalSamplingError(
                f"rejection sampling of A | A_tilde accepted at rate {rate:.2e}, "
                f"below the floor {min_acceptance:.1e}", rate=rate)
        if trials >= 4 * batch and rate < min_acceptance:
            raise ConditionalSamplingError(
                f"rejection sampling of A | A_tilde accepted at rate {rate:.2e}, "
                f"below the floor {min_acceptance:.1e}", rate=rate)
    return Mask(np.stack(accepted[:num]))


def estimate_second_moment(proc: CorruptionProcess, A_tilde: Operator,
                           num_samples: int, rng: np.random.Generator, *,
                           method: str = "direct", chunk: int = 4096):
    """Monte-Carlo E[A^T A | A_tilde] with per-entry standard errors.

    Returns ``(mean, stderr)``, both ``n x n``.
    """
    if num_samples < 100:
        raise ValueError("num_samples must be at least 100")
    n = proc.n
    total = np.zeros((n, n))
    total_sq = np.zeros((n, n))
    done = 0
    while done < num_samples:
        k = min(chunk, num_samples - done)
        A = sample_conditional(proc, A_tilde, k, rng, method=method)
        if isinstance(A, Mask):
            d = A.diag.astype(np.float64)
            s = d.sum(axis=0)
            idx = np.arange(n)
            total[idx, idx] += s
            total_sq[idx, idx] += s  # entries are 0/1
        else:
            gram = np.einsum("bmi,bmj->bij", A.rows, A.rows)
            total += gram.sum(axis=0)
            total_sq += (gram ** 2).sum(axis=0)
        done += k
    mean = total / num_samples
    var = np.maximum(total_sq / num_samples - mean ** 2, 0.0) * num_samples / (num_samples - 1)
    return mean, np.sqrt(var / num_samples)
