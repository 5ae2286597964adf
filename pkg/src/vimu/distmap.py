"""Rank-transform distribution mapping and Frechet distribution distance.

Virtual-sensor samples are mapped onto a target real-sensor distribution by
x_r = G^{-1}(F(x_v)), with F the source empirical CDF and G^{-1} the target
empirical quantile function, both linearly interpolated between order
statistics at Hazen plotting positions (k - 0.5)/n. Distribution similarity
is quantified as the Frechet distance between Gaussians fitted to feature
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio

DMAP_SCHEMA = "dmap_v1"


@dataclass
class EmpiricalCDF:
    """Sorted sample values with Hazen plotting positions."""

    values: np.ndarray  # sorted ascending

    def __post_init__(self):
        self.values = np.sort(np.asarray(self.values, dtype=float).ravel())
        if self.values.size < 2:
            raise ValueError("need at least 2 samples per channel")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("samples must be finite")

    @property
    def n(self) -> int:
        return self.values.size

    def positions(self) -> np.ndarray:
        return (np.arange(1, self.n + 1) - 0.5) / self.n

    def cdf(self, x) -> np.ndarray:
        """F(x), linearly interpolated; saturates at the boundary positions."""
        return np.interp(x, self.values, self.positions())

    def quantile(self, p) -> np.ndarray:
        """G^{-1}(p); out-of-range probabilities clamp to the sample extremes."""
        return np.interp(p, self.positions(), self.values)


@dataclass
class DistributionMap:
    """Per-channel (source CDF from virtual data, target CDF from real data)."""

    channels: dict[str, tuple[EmpiricalCDF, EmpiricalCDF]]

    def channel_names(self) -> list[str]:
        return list(self.channels)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")


def fit_map(virtual_samples: dict[str, np.ndarray],
            real_samples: dict[str, np.ndarray]) -> DistributionMap:
    """Fit per-channel source/target empirical CDFs.

    Both sample dicts must cover the same channels with >= 2 samples each.
    """
    if set(virtual_samples) != set(real_samples):
        raise ValueError("virtual and real channel sets differ")
    if not virtual_samples:
        raise ValueError("no channels to fit")
    channels = {}
    for name in virtual_samples:
        channels[name] = (EmpiricalCDF(virtual_samples[name]),
                          EmpiricalCDF(real_samples[name]))
    return DistributionMap(channels)


def apply_map(dmap: DistributionMap, x, channel: str) -> np.ndarray:
    """Map virtual values onto the real distribution: G^{-1}(F(x))."""
    if channel not in dmap.channels:
        raise KeyError(f"channel {channel!r} not in map")
    F, G = dmap.channels[channel]
    return G.quantile(F.cdf(x))


def save_map(dmap: DistributionMap, path):
    obj = {
        "schema": DMAP_SCHEMA,
        "channels": {
            name: {"source": F.values.tolist(), "target": G.values.tolist()}
            for name, (F, G) in dmap.channels.items()
        },
    }
    fileio.write_json(path, obj)


def load_map(path) -> DistributionMap:
    obj = fileio.read_json(path)
    if obj.get("schema") != DMAP_SCHEMA:
        raise ValueError(f"{path}: unsupported distribution map schema {obj.get('schema')!r}")
    channels = {
        name: (EmpiricalCDF(np.asarray(ch["source"])), EmpiricalCDF(np.asarray(ch["target"])))
        for name, ch in obj["channels"].items()
    }
    return DistributionMap(channels)


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of feature vectors (n, dim)."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    n, dim = X.shape
    if n < dim + 1:
        raise ValueError(f"need at least dim+1={dim + 1} vectors, have {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    return GaussianStats(mean=mean, cov=cov)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The matrix square root is computed by eigendecomposition of the
    symmetrized product sqrt(S_a) S_b sqrt(S_a); tiny negative eigenvalues
    are clamped to zero.
    """
    if a.mean.size != b.mean.size:
        raise ValueError("dimension mismatch")
    diff = float(((a.mean - b.mean) ** 2).sum())
    va, Ua = np.linalg.eigh(a.cov)
    va = np.clip(va, 0.0, None)
    sqrt_a = (Ua * np.sqrt(va)) @ Ua.T
    prod = sqrt_a @ b.cov @ sqrt_a
    w = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    return diff + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_sqrt
