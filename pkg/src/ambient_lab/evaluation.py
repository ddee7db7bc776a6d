"""Desk-scale sample-quality, restoration and memorization metrics.

FID and Inception scores need pretrained vision networks, so sliced
Wasserstein and energy distances stand in for them; cosine similarity in
mean-centered data space replaces the DINO embedding of the nearest-neighbor
memorization analysis.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

MIN_SAMPLES = 100
HIST_EDGES = np.linspace(-1.0, 1.0, 41)


def random_directions(dim: int, num: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((num, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _w2_1d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise 1-D 2-Wasserstein distance via matched quantiles."""
    a = np.sort(a, axis=0)
    b = np.sort(b, axis=0)
    if a.shape[0] != b.shape[0]:
        k = max(a.shape[0], b.shape[0])
        levels = (np.arange(k) + 0.5) / k
        a = np.quantile(a, levels, axis=0, method="inverted_cdf")
        b = np.quantile(b, levels, axis=0, method="inverted_cdf")
    return np.sqrt(np.mean((a - b) ** 2, axis=0))


def sliced_wasserstein(X, Y, num_projections: int = 128,
                       rng: Optional[np.random.Generator] = None,
                       directions: Optional[np.ndarray] = None) -> float:
    """Average over random unit directions of the projected W2 distance."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError("X and Y must be (samples, dim) with equal dim")
    if min(len(X), len(Y)) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples per set")
    if directions is None:
        rng = np.random.default_rng(0) if rng is None else rng
        directions = random_directions(X.shape[1], num_projections, rng)
    return float(np.mean(_w2_1d(X @ directions.T, Y @ directions.T)))


def energy_distance(X, Y) -> float:
    """Squared energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if min(len(X), len(Y)) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples per set")
    xy = cdist(X, Y).mean()
    xx = cdist(X, X).mean()
    yy = cdist(Y, Y).mean()
    return float(max(2 * xy - xx - yy, 0.0))


def psnr(x, ref, peak: float) -> float:
    """10 log10(peak^2 / MSE); ``inf`` when the inputs coincide."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError("psnr inputs differ in shape")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))


@dataclass
class MemorizationResult:
    similarities: np.ndarray
    quantiles: dict
    histogram: np.ndarray
    bin_edges: np.ndarray
    excluded: int


def memorization_stat(generated, train, center=None) -> MemorizationResult:
    """Top-1 cosine similarity of each generated sample to the training set.

    Both sets are centered on ``center`` (the training mean by default).
    Zero-norm vectors cannot be compared and are dropped; their count is
    reported as ``excluded``.
    """
    G = np.asarray(generated, dtype=np.float64)
    T = np.asarray(train, dtype=np.float64)
    if len(G) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} generated samples")
    c = T.mean(axis=0) if center is None else np.asarray(center)
    G = G - c
    T = T - c
    gn = np.linalg.norm(G, axis=1)
    tn = np.linalg.norm(T, axis=1)
    G, T = G[gn > 0], T[tn > 0]
    excluded = int(np.sum(gn == 0) + np.sum(tn == 0))
    Gu = G / gn[gn > 0, None]
    Tu = (T / tn[tn > 0, None]).T
    step = max(1, 2_000_000 // max(Tu.shape[1], 1))
    top = np.concatenate([(Gu[i:i + step] @ Tu).max(axis=1) for i in range(0, len(Gu), step)])
    top = np.clip(top, -1.0, 1.0)
    q = np.quantile(top, [0.5, 0.9, 0.99])
    hist, _ = np.histogram(top, bins=HIST_EDGES)
    return MemorizationResult(top, {"p50": float(q[0]), "p90": float(q[1]), "p99": float(q[2])},
                              hist, HIST_EDGES.copy(), excluded)


@dataclass
class MetricReport:
    sliced_wasserstein: float = float("nan")
    energy_distance: float = float("nan")
    psnr_db: float = float("nan")
    nn_similarity_quantiles: dict = field(default_factory=dict)
    n_generated: int = 0
    n_reference: int = 0
    config_digest: str = ""
    histogram: list = field(default_factory=list)
    bin_edges: list = field(default_factory=list)

    HEADER = ("# distances: sliced Wasserstein and energy distance replace FID; "
              "nearest-neighbor cosine similarity in data space replaces DINO")

    def csv_row(self) -> str:
        q = self.nn_similarity_quantiles
        cols = {
            "sliced_wasserstein": self.sliced_wasserstein,
            "energy_distance": self.energy_distance,
            "psnr_db": self.psnr_db,
            "nn_p50": q.get("p50", float("nan")),
            "nn_p90": q.get("p90", float("nan")),
            "nn_p99": q.get("p99", float("nan")),
            "n_generated": self.n_generated,
            "n_reference": self.n_reference,
            "config_digest": self.config_digest,
        }
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(cols))
        writer.writeheader()
        writer.writerow(cols)
        return buf.getvalue()

    def to_json(self) -> str:
        d = asdict(self)
        d["note"] = self.HEADER.lstrip("# ")
        return json.dumps(d, indent=2, allow_nan=True)

    def histogram_svg(self, width: int = 400, height: int = 200) -> str:
        """Bar chart of the nearest-neighbor similarity histogram."""
        counts = np.asarray(self.histogram, dtype=float)
        edges = np.asarray(self.bin_edges, dtype=float)
        top = counts.max() if counts.size and counts.max() > 0 else 1.0
        bw = width / max(len(counts), 1)
        bars = []
        for i, c in enumerate(counts):
            h = (height - 20) * c / top
            bars.append(f'<rect x="{i * bw:.2f}" y="{height - 20 - h:.2f}" '
                        f'width="{bw * 0.9:.2f}" height="{h:.2f}" fill="steelblue"/>')
        lo = edges[0] if edges.size else -1
        hi = edges[-1] if edges.size else 1
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
                + "".join(bars)
                + f'<text x="0" y="{height - 4}" font-size="10">{lo:g}</text>'
                + f'<text x="{width - 20}" y="{height - 4}" font-size="10">{hi:g}</text>'
                + "</svg>")
