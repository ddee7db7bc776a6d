"""Mask-conditioned MLP restorer h(A_tilde, A_tilde x_t, sigma) in numpy.

The network sees the masked observation (scaled by ``1/sqrt(sigma^2 +
sigma_data^2)``), an encoding of the operator itself and a small embedding
of ``log sigma``, and predicts x0 on every coordinate.  Parameters live in
one flat float64 vector; layers are views into it, so optimizers and
checkpoints only ever deal with ``theta``.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .corruption import GaussianMeasurement, Mask, Operator
from .errors import CheckpointError, ContractError, NumericalError

MAGIC = b"AMBM"
FORMAT_VERSION = 1
EMBED_FREQS = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class Architecture:
    operator: str  # "mask" or "gaussian"
    n: int
    m: int = 0
    hidden: Tuple[int, ...] = (256, 256, 256)
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.operator not in ("mask", "gaussian"):
            raise ValueError("operator must be 'mask' or 'gaussian'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.operator == "mask":
            object.__setattr__(self, "m", self.n)

    @property
    def obs_dim(self) -> int:
        return self.m

    @property
    def encoding_dim(self) -> int:
        return self.n if self.operator == "mask" else self.m * self.n + self.m

    @property
    def embed_dim(self) -> int:
        return 1 + 2 * len(EMBED_FREQS)

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.encoding_dim + self.embed_dim

    def layer_shapes(self) -> List[Tuple[int, int]]:
        widths = (self.input_dim,) + self.hidden + (self.n,)
        return list(zip(widths[:-1], widths[1:]))

    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    @classmethod
    def for_process(cls, proc, hidden=(256, 256, 256), sigma_data=0.5) -> "Architecture":
        if proc.kind == "gaussian":
            return cls("gaussian", proc.n, proc.m, hidden, sigma_data)
        return cls("mask", proc.n, proc.n, hidden, sigma_data)


def noise_embedding(sigma: np.ndarray) -> np.ndarray:
    ls = np.log(sigma)[:, None]
    f = np.asarray(EMBED_FREQS)
    return np.concatenate([ls / 4.0, np.sin(ls * f), np.cos(ls * f)], axis=1)


def encode_operator(A: Operator, batch: int) -> np.ndarray:
    if isinstance(A, Mask):
        enc = A.diag.astype(np.float64)
    else:
        lead = A.rows.shape[:-2]
        enc = np.concatenate([A.rows.reshape(lead + (-1,)), A.valid.astype(np.float64)], axis=-1)
    return np.broadcast_to(enc, (batch, enc.shape[-1]))


def _silu(z):
    s = expit(z)
    return z * s, s


@dataclass
class Cache:
    inputs: list
    pre: list
    gates: list
    in_scale: np.ndarray


class DenoiserModel:
    """Fully connected restorer with SiLU hidden layers and a linear head.

    The head is zero-initialized, so a fresh model outputs zeros.
    """

    def __init__(self, arch: Architecture, theta: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None, config_digest: str = ""):
        self.arch = arch
        self.config_digest = config_digest
        if theta is None:
            theta = self._init_theta(np.random.default_rng(0) if rng is None else rng)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (arch.num_params(),):
            raise ValueError(f"theta has {theta.size} entries, architecture needs {arch.num_params()}")
        self.theta = theta

    def _init_theta(self, rng):
        chunks = []
        shapes = self.arch.layer_shapes()
        for k, (i, o) in enumerate(shapes):
            last = k == len(shapes) - 1
            W = np.zeros((i, o)) if last else rng.standard_normal((i, o)) / np.sqrt(i)
            chunks += [W.ravel(), np.zeros(o)]
        return np.concatenate(chunks)

    def layers(self, theta: Optional[np.ndarray] = None):
        """(W, b) views into ``theta``."""
        theta = self.theta if theta is None else theta
        out, k = [], 0
        for i, o in self.arch.layer_shapes():
            W = theta[k:k + i * o].reshape(i, o)
            k += i * o
            out.append((W, theta[k:k + o]))
            k += o
        return out

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.theta.copy(), config_digest=self.config_digest)

    # -- evaluation -------------------------------------------------------

    def _inputs(self, A_tilde, y, sigma):
        y = np.asarray(y, dtype=np.float64)
        y2 = y[None] if y.ndim == 1 else y
        B = y2.shape[0]
        if y2.shape[1] != self.arch.obs_dim:
            raise ValueError(f"observation has length {y2.shape[1]}, model expects {self.arch.obs_dim}")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
        if not (np.all(np.isfinite(y2)) and np.all(np.isfinite(sigma))):
            raise NumericalError("non-finite input to the denoiser")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        scale = 1.0 / np.sqrt(sigma ** 2 + self.arch.sigma_data ** 2)
        x = np.concatenate([y2 * scale[:, None], encode_operator(A_tilde, B),
                            noise_embedding(sigma)], axis=1)
        return x, scale, y.ndim == 1

    def forward(self, A_tilde: Operator, y, sigma, cache: bool = False):
        x, scale, single = self._inputs(A_tilde, y, sigma)
        layers = self.layers()
        inputs, pre, gates = [], [], []
        h = x
        for W, b in layers[:-1]:
            inputs.append(h)
            z = h @ W + b
            h, s = _silu(z)
            pre.append(z)
            gates.append(s)
        W, b = layers[-1]
        inputs.append(h)
        out = h @ W + b
        if single:
            out = out[0]
        if cache:
            return out, Cache(inputs, pre, gates, scale)
        return out

    def _backprop(self, grad_out, cache: Optional[Cache], want_theta=True):
        if cache is None:
            raise ContractError("backward needs the cache from forward(..., cache=True)")
        g = np.atleast_2d(grad_out)
        layers = self.layers()
        grad = np.zeros_like(self.theta) if want_theta else None
        views = self.layers(grad) if want_theta else None
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if want_theta:
                gW, gb = views[k]
                gW[...] = cache.inputs[k].T @ g
                gb[...] = g.sum(axis=0)
            g = g @ W.T
            if k > 0:
                z, s = cache.pre[k - 1], cache.gates[k - 1]
                g = g * (s * (1.0 + z * (1.0 - s)))
        return grad, g

    def backward(self, grad_out, cache: Optional[Cache]) -> np.ndarray:
        """Gradient over ``theta`` of sum(grad_out * output), summed over the batch."""
        return self._backprop(grad_out, cache)[0]

    def input_vjp(self, A_tilde: Operator, y, sigma, v) -> np.ndarray:
        """v^T d(output)/d(y) for each row."""
        _, cache = self.forward(A_tilde, y, sigma, cache=True)
        _, g_in = self._backprop(v, cache, want_theta=False)
        gy = g_in[:, :self.arch.obs_dim] * cache.in_scale[:, None]
        return gy[0] if np.ndim(y) == 1 else gy


def forward(model: DenoiserModel, A_tilde, y, sigma_t, cache=False):
    return model.forward(A_tilde, y, sigma_t, cache=cache)


def backward(model: DenoiserModel, loss_grad_at_output, cached_activations) -> np.ndarray:
    return model.backward(loss_grad_at_output, cached_activations)


class ModelRestorer:
    """Adapter exposing a model through the sampler's restorer contract."""

    def __init__(self, model: DenoiserModel):
        self.model = model

    def __call__(self, A_tilde, y, sigma):
        return self.model.forward(A_tilde, y, sigma)

    def vjp(self, A_tilde, y, sigma, v):
        return self.model.input_vjp(A_tilde, y, sigma, v)


# ---------------------------------------------------------------------------
# checkpoints: magic, version, dtype tag, arch json, digest, params, crc32

def serialize(model: DenoiserModel, dtype: str = "<f8") -> bytes:
    if dtype not in ("<f4", "<f8"):
        raise ValueError("parameter block must be <f4 or <f8")
    arch = json.dumps(asdict(model.arch), sort_keys=True).encode()
    digest = model.config_digest.encode()
    body = b"".join([
        MAGIC,
        struct.pack("<HB", FORMAT_VERSION, 4 if dtype == "<f4" else 8),
        struct.pack("<I", len(arch)), arch,
        struct.pack("<I", len(digest)), digest,
        struct.pack("<Q", model.theta.size),
        model.theta.astype(dtype).tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes, expected_digest: Optional[str] = None) -> DenoiserModel:
    """Inverse of :func:`serialize`; refuses anything damaged or foreign."""
    if len(data) < 4 + 3 + 4 or data[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if len(data) < 4 + 4:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint corrupt or truncated (checksum mismatch)")
    try:
        off = 4
        version, width = struct.unpack_from("<HB", body, off)
        off += 3
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        (alen,) = struct.unpack_from("<I", body, off)
        off += 4
        arch_d = json.loads(body[off:off + alen])
        off += alen
        (dlen,) = struct.unpack_from("<I", body, off)
        off += 4
        digest = body[off:off + dlen].decode()
        off += dlen
        (count,) = struct.unpack_from("<Q", body, off)
        off += 8
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from None
    dtype = "<f4" if width == 4 else "<f8"
    if len(body) - off != count * width:
        raise CheckpointError("checkpoint parameter block has the wrong size")
    theta = np.frombuffer(body, dtype=dtype, count=count, offset=off).astype(np.float64)
    model = DenoiserModel(Architecture(**arch_d), theta, config_digest=digest)
    if expected_digest is not None:
        check_digest(model, expected_digest)
    return model


def check_digest(model: DenoiserModel, digest: str) -> bool:
    """Warn when a model is used under a configuration it was not trained for."""
    if model.config_digest != digest:
        warnings.warn(f"checkpoint trained under config {model.config_digest[:12]!r} "
                      f"used with config {digest[:12]!r}", RuntimeWarning, stacklevel=2)
        return False
    return True
