"""Adaptive weather augmentation for clean-weather training clouds.

Two stages mimic what bad weather does to a LiDAR sweep:

1. range reduction: keep only points with ``|x/x_m| <= dx``,
   ``|y/y_m| <= dy`` and ``|z/z_m| <= dz``, where the three thresholds are
   drawn uniformly from ``[phi_l, phi_u]``;
2. degradation: random dropout, then Gaussian jitter, then injection of
   spurious returns inside the reduced volume.

Both the reduced and the final cloud are returned.  The trust-region mask
needs the reduced one and the pillar alignment loss needs the final one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import InvalidParams
from .pointcloud import PointCloud

Triple = tuple[float, float, float]


@dataclass(frozen=True)
class AwaParams:
    phi_l: float = 0.5
    phi_u: float = 0.8
    bounds: Triple = (140.0, 40.0, 4.0)
    dropout_prob: float = 0.1
    jitter_sigma: float = 0.02
    noise_points_frac: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        if not 0.0 < self.phi_l <= self.phi_u <= 1.0:
            raise InvalidParams(f"need 0 < phi_l <= phi_u <= 1, got ({self.phi_l}, {self.phi_u})")
        if len(self.bounds) != 3 or min(self.bounds) <= 0:
            raise InvalidParams(f"bounds must be three positive extents, got {self.bounds}")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise InvalidParams("dropout_prob must lie in [0, 1]")
        if not self.jitter_sigma >= 0:
            raise InvalidParams("jitter_sigma must be >= 0")
        if not 0.0 <= self.noise_points_frac <= 1.0:
            raise InvalidParams("noise_points_frac must lie in [0, 1]")

    @classmethod
    def identity(cls, bounds: Triple = (140.0, 40.0, 4.0)) -> "AwaParams":
        """Configuration under which augmentation leaves in-bounds clouds untouched."""
        return cls(phi_l=1.0, phi_u=1.0, bounds=bounds, dropout_prob=0.0,
                   jitter_sigma=0.0, noise_points_frac=0.0)

    @classmethod
    def from_dict(cls, doc: dict) -> "AwaParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidParams(f"unknown AWA params: {sorted(unknown)}")
        doc = dict(doc)
        if "bounds" in doc:
            doc["bounds"] = tuple(doc["bounds"])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d


@dataclass(frozen=True, eq=False)
class AwaOutput:
    reduced: PointCloud
    augmented: PointCloud
    thresholds: Triple
    n_noise: int = 0


def sample_thresholds(p: AwaParams, seed) -> Triple:
    """Three independent draws from ``U(phi_l, phi_u)``."""
    if not isinstance(p, AwaParams):
        raise InvalidParams("sample_thresholds needs AwaParams")
    rng = np.random.default_rng(seed)
    d = rng.uniform(p.phi_l, p.phi_u, size=3)
    return (float(d[0]), float(d[1]), float(d[2]))


def range_mask(xyz: np.ndarray, thresholds: Triple, bounds: Triple) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if (b <= 0).any():
        raise InvalidParams("bounds must be positive")
    return (np.abs(xyz / b) <= t).all(axis=1)


def range_reduce(pc: PointCloud, thresholds: Triple, bounds: Triple) -> PointCloud:
    """Keep the points inside the normalized box ``|coord / bound| <= threshold``."""
    return PointCloud(pc.points[range_mask(pc.xyz, thresholds, bounds)])


def degrade(pc: PointCloud, p: AwaParams, seed, thresholds: Triple = (1.0, 1.0, 1.0)) -> PointCloud:
    """Dropout, then jitter, then spurious-point injection.

    Injected points are uniform in the box ``|coord| <= threshold * bound``
    with uniform intensity, and are appended after the surviving points.
    Their count is ``floor(noise_points_frac * len(pc))``.
    """
    return _degrade(pc, p, seed, thresholds)[0]


def _degrade(pc: PointCloud, p: AwaParams, seed, thresholds: Triple):
    rng = np.random.default_rng(seed)
    m = len(pc)
    keep = rng.random(m) >= p.dropout_prob
    pts = pc.points[keep].copy()

    if p.jitter_sigma > 0:
        pts[:, :3] += rng.normal(0.0, p.jitter_sigma, size=(pts.shape[0], 3))

    n_noise = math.floor(p.noise_points_frac * m)
    half = np.asarray(thresholds, dtype=np.float64) * np.asarray(p.bounds, dtype=np.float64)
    noise = np.empty((n_noise, 4))
    noise[:, :3] = rng.uniform(-half, half, size=(n_noise, 3))
    noise[:, 3] = rng.random(n_noise)
    return PointCloud(np.vstack([pts, noise])), n_noise


def awa(pc: PointCloud, p: AwaParams, seed, thresholds: Triple | None = None) -> AwaOutput:
    """Full augmentation of one cloud.

    ``thresholds`` overrides the sampled triple, which lets a caller share
    one draw across all agents of a scene.
    """
    ss = np.random.SeedSequence(seed)
    th_seed, deg_seed = ss.spawn(2)
    if thresholds is None:
        thresholds = sample_thresholds(p, th_seed)
    reduced = range_reduce(pc, thresholds, p.bounds)
    augmented, n_noise = _degrade(reduced, p, deg_seed, thresholds)
    return AwaOutput(reduced, augmented, tuple(float(t) for t in thresholds), n_noise)
