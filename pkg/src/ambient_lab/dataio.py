"""Synthetic corrupted datasets and their binary files.

All three record files share one layout and differ in their magic:

``AMBD``  training measurements ``(A x0, A)`` -- the only file a trainer opens
``AMBR``  clean evaluation reference (identity operators, values = x0)
``AMBS``  generated samples (identity operators, values = samples)

Header (little-endian): magic[4], version u16, kind tag u8, n u64, m u64,
count u64, seed u64, h/w/c u32, digest length u32 + ascii digest.  Each
record is the operator encoding (``Mask.to_bytes`` or
``GaussianMeasurement.to_bytes``) followed by the measurement as float32,
so records have a fixed size and can be read at random.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .corruption import GaussianMeasurement, Mask, Operator, apply, sample_corruption
from .errors import DataFormatError

VERSION = 1
TRAIN_MAGIC = b"AMBD"
REFERENCE_MAGIC = b"AMBR"
SAMPLES_MAGIC = b"AMBS"
KIND_TAGS = {"random_inpainting": 0, "block_inpainting": 1, "gaussian": 2}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
_HEAD = struct.Struct("<4sHBQQQQIII")


@dataclass
class CorruptedDataset:
    kind: str
    y: np.ndarray
    operators: Operator
    digest: str = ""
    seed: int = 0
    image_shape: Optional[Tuple[int, ...]] = None

    @property
    def count(self) -> int:
        return self.y.shape[0]

    @property
    def n(self) -> int:
        return self.operators.n

    @property
    def m(self) -> int:
        return self.y.shape[1]


def generate_dataset(config, rng: Optional[np.random.Generator] = None):
    """Draw x0, corrupt it once, and split into (training set, clean reference).

    The clean array is returned separately and is meant for evaluation only.
    """
    if rng is None:
        rng = np.random.default_rng(int(config["seeds"]["data"]))
    dist = config.distribution()
    proc = config.process()
    N = int(config["data"]["num_train"])
    x0 = dist.sample(N, rng)
    A = sample_corruption(proc, rng, size=N)
    if isinstance(A, GaussianMeasurement):
        # the file stores float32 rows; measure with exactly those rows
        A = GaussianMeasurement(A.rows.astype(np.float32).astype(np.float64))
    y = apply(A, x0).astype(np.float32).astype(np.float64)
    ds = CorruptedDataset(proc.kind, y, A, config.digest(), int(config["seeds"]["data"]),
                          proc.image_shape)
    return ds, x0


def _identity(count, n):
    return Mask(np.ones((count, n), dtype=np.uint8))


def _encode(magic: bytes, ds: CorruptedDataset) -> bytes:
    shape = tuple(ds.image_shape or ()) + (0, 0, 0)
    digest = ds.digest.encode()
    m = ds.y.shape[1]
    parts = [_HEAD.pack(magic, VERSION, KIND_TAGS[ds.kind], ds.n, m, ds.count, ds.seed,
                        *shape[:3]),
             struct.pack("<I", len(digest)), digest]
    ops = ds.operators
    values = ds.y.astype("<f4")
    for i in range(ds.count):
        parts.append(ops[i].to_bytes())
        parts.append(values[i].tobytes())
    return b"".join(parts)


def _write(path, blob: bytes, overwrite: bool):
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} already exists")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def write_dataset(path, ds: CorruptedDataset, overwrite: bool = False):
    _write(path, _encode(TRAIN_MAGIC, ds), overwrite)


def write_reference(path, x0: np.ndarray, digest: str, seed: int = 0, overwrite: bool = False):
    ref = CorruptedDataset("random_inpainting", np.asarray(x0), _identity(len(x0), x0.shape[1]),
                           digest, seed)
    _write(path, _encode(REFERENCE_MAGIC, ref), overwrite)


def write_samples(path, samples: np.ndarray, digest: str, seed: int = 0, overwrite: bool = False):
    s = CorruptedDataset("random_inpainting", np.asarray(samples),
                         _identity(len(samples), samples.shape[1]), digest, seed)
    _write(path, _encode(SAMPLES_MAGIC, s), overwrite)


def _decode(blob: bytes, magic: bytes) -> CorruptedDataset:
    if len(blob) < _HEAD.size + 4:
        raise DataFormatError("file too short for a dataset header")
    got, version, tag, n, m, count, seed, h, w, c = _HEAD.unpack_from(blob)
    if got != magic:
        names = {TRAIN_MAGIC: "training dataset", REFERENCE_MAGIC: "evaluation reference",
                 SAMPLES_MAGIC: "sample batch"}
        raise DataFormatError(
            f"expected a {names.get(magic, magic)} file, found {names.get(got, repr(got))}")
    if version != VERSION:
        raise DataFormatError(f"dataset format version {version}, expected {VERSION}")
    if tag not in TAG_KINDS:
        raise DataFormatError(f"unknown corruption kind tag {tag}")
    kind = TAG_KINDS[tag]
    off = _HEAD.size
    (dlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    digest = blob[off:off + dlen].decode()
    off += dlen
    if kind == "gaussian":
        op_size, op_cls = 8 + 4 * m * n, GaussianMeasurement
    else:
        op_size, op_cls = 4 + n, Mask
    rec = op_size + 4 * m
    if len(blob) - off != count * rec:
        raise DataFormatError(f"dataset body has {len(blob) - off} bytes, header implies {count * rec}")
    body = np.frombuffer(blob, dtype=np.uint8, offset=off).reshape(count, rec)
    y = body[:, op_size:].copy().view("<f4").astype(np.float64)
    if op_cls is Mask:
        ops = Mask(body[:, 4:op_size].copy())
    else:
        rows = body[:, 8:op_size].copy().view("<f4").reshape(count, m, n)
        ops = GaussianMeasurement(rows.astype(np.float64))
    shape = tuple(s for s in (h, w, c) if s) or None
    return CorruptedDataset(kind, y, ops, digest, seed, shape)


def read_dataset(path) -> CorruptedDataset:
    """Open a training file; evaluation references are refused."""
    return _decode(Path(path).read_bytes(), TRAIN_MAGIC)


def read_reference(path) -> Tuple[np.ndarray, str]:
    ds = _decode(Path(path).read_bytes(), REFERENCE_MAGIC)
    return ds.y, ds.digest


def read_samples(path) -> Tuple[np.ndarray, str]:
    ds = _decode(Path(path).read_bytes(), SAMPLES_MAGIC)
    return ds.y, ds.digest
