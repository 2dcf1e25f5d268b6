"""Fog, rain and snow corruption of LiDAR clouds.

All three conditions share one beam-attenuation model.  A return of
intensity ``i`` at range ``r`` comes back as ``i * exp(-2 * alpha * r)``
(two-way Beer-Lambert loss).  A return that attenuation pushes below the
receiver's detection threshold is lost.  The extinction coefficient
``alpha`` comes from the Koschmieder relation ``3.912 / visibility`` for fog
and from the power law ``a * rate ** b`` for rain and snow.

Condition-specific effects on top of attenuation:

* fog: a lost return is replaced, with probability ``scatter_prob``, by a
  backscatter return somewhere along the same ray;
* rain: surviving returns get Gaussian range noise along their ray;
* snow: Poisson-distributed clutter points appear close to the sensor.

Every function is pure.  Randomness comes from a ``numpy.random.Generator``
seeded by the caller, and each per-point draw is made for every point, so
the outputs for two parameter sets under one seed are directly comparable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Union

import numpy as np

from .errors import InvalidParams
from .pointcloud import PointCloud, SceneFrame

KOSCHMIEDER = 3.912
MIN_SCATTER_RANGE = 0.5


@dataclass(frozen=True)
class FogParams:
    visibility: float = 100.0
    detection_threshold: float = 0.05
    scatter_prob: float = 0.3
    scatter_range_max: float = 25.0

    def __post_init__(self) -> None:
        if not self.visibility > 0:
            raise InvalidParams(f"visibility must be > 0, got {self.visibility}")
        if not 0.0 < self.detection_threshold < 1.0:
            raise InvalidParams("detection_threshold must lie in (0, 1)")
        if not 0.0 <= self.scatter_prob <= 1.0:
            raise InvalidParams("scatter_prob must lie in [0, 1]")
        if not self.scatter_range_max > 0:
            raise InvalidParams("scatter_range_max must be > 0")

    @property
    def extinction(self) -> float:
        return fog_extinction(self.visibility)

    @classmethod
    def from_extinction(cls, alpha: float, **kw) -> "FogParams":
        """Fog whose visibility yields extinction ``alpha`` (``alpha = 0`` is clear air)."""
        if alpha < 0:
            raise InvalidParams("extinction must be >= 0")
        vis = math.inf if alpha == 0 else KOSCHMIEDER / alpha
        return cls(visibility=vis, **kw)


@dataclass(frozen=True)
class RainParams:
    rain_rate: float = 10.0
    extinction_coeff_a: float = 0.01
    extinction_exp_b: float = 0.6
    range_jitter_sigma_per_rate: float = 0.002
    detection_threshold: float = 0.05

    def __post_init__(self) -> None:
        if not self.rain_rate >= 0:
            raise InvalidParams("rain_rate must be >= 0")
        if not self.extinction_coeff_a >= 0:
            raise InvalidParams("extinction_coeff_a must be >= 0")
        if not self.extinction_exp_b > 0:
            raise InvalidParams("extinction_exp_b must be > 0")
        if not self.range_jitter_sigma_per_rate >= 0:
            raise InvalidParams("range_jitter_sigma_per_rate must be >= 0")
        if not 0.0 < self.detection_threshold < 1.0:
            raise InvalidParams("detection_threshold must lie in (0, 1)")

    @property
    def extinction(self) -> float:
        return power_law_extinction(self.rain_rate, self.extinction_coeff_a, self.extinction_exp_b)


@dataclass(frozen=True)
class SnowParams:
    snowfall_rate: float = 5.0
    extinction_coeff_a: float = 0.02
    extinction_exp_b: float = 0.7
    clutter_rate: float = 5.0
    clutter_radius: float = 10.0
    detection_threshold: float = 0.05

    def __post_init__(self) -> None:
        if not self.snowfall_rate >= 0:
            raise InvalidParams("snowfall_rate must be >= 0")
        if not self.extinction_coeff_a >= 0:
            raise InvalidParams("extinction_coeff_a must be >= 0")
        if not self.extinction_exp_b > 0:
            raise InvalidParams("extinction_exp_b must be > 0")
        if not self.clutter_rate >= 0:
            raise InvalidParams("clutter_rate must be >= 0")
        if not self.clutter_radius > 0:
            raise InvalidParams("clutter_radius must be > 0")
        if not 0.0 < self.detection_threshold < 1.0:
            raise InvalidParams("detection_threshold must lie in (0, 1)")

    @property
    def extinction(self) -> float:
        return power_law_extinction(self.snowfall_rate, self.extinction_coeff_a, self.extinction_exp_b)


WeatherParams = Union[FogParams, RainParams, SnowParams]
_PARAM_TYPES = {"fog": FogParams, "rain": RainParams, "snow": SnowParams}
CONDITIONS = ("clean", "fog", "rain", "snow")


@dataclass(frozen=True)
class WeatherConfig:
    condition: str = "clean"
    params: WeatherParams | None = None

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise InvalidParams(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if self.condition == "clean":
            if self.params is not None:
                raise InvalidParams("clean condition takes no params")
            return
        expected = _PARAM_TYPES[self.condition]
        if self.params is None:
            object.__setattr__(self, "params", expected())
        elif not isinstance(self.params, expected):
            raise InvalidParams(
                f"{self.condition} needs {expected.__name__}, got {type(self.params).__name__}"
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "WeatherConfig":
        if not isinstance(doc, dict) or "condition" not in doc:
            raise InvalidParams("weather config needs a 'condition' field")
        cond = doc["condition"]
        raw = doc.get("params")
        if cond == "clean":
            if raw:
                raise InvalidParams("clean condition takes no params")
            return cls("clean")
        if cond not in _PARAM_TYPES:
            raise InvalidParams(f"unknown condition {cond!r}")
        ptype = _PARAM_TYPES[cond]
        raw = raw or {}
        known = {f.name for f in fields(ptype)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidParams(f"unknown {cond} params: {sorted(unknown)}")
        return cls(cond, ptype(**raw))

    def to_dict(self) -> dict:
        """Canonical form with every default filled in."""
        return {
            "condition": self.condition,
            "params": None if self.params is None else asdict(self.params),
        }


def fog_extinction(visibility: float) -> float:
    """Koschmieder extinction coefficient (1/m) for a meteorological visibility (m)."""
    if not visibility > 0:
        raise InvalidParams(f"visibility must be > 0, got {visibility}")
    return 0.0 if math.isinf(visibility) else KOSCHMIEDER / visibility


def power_law_extinction(rate: float, a: float, b: float) -> float:
    """``a * rate ** b`` (1/m) for a precipitation rate in mm/h."""
    return 0.0 if rate == 0 else a * rate ** b


def attenuate(intensity: np.ndarray, ranges: np.ndarray, alpha: float) -> np.ndarray:
    """Two-way Beer-Lambert attenuation ``i * exp(-2 alpha r)``."""
    return intensity * np.exp(-2.0 * alpha * ranges)


def _attenuation_pass(pc: PointCloud, alpha: float, threshold: float):
    ranges = pc.ranges()
    inten = pc.intensity
    att = attenuate(inten, ranges, alpha)
    # A return that was already faint in clear air survives as long as the
    # medium did not weaken it; only attenuation itself can cause dropout.
    lost = (att < threshold) & (att < inten)
    return ranges, att, lost


def simulate_fog(pc: PointCloud, p: FogParams, seed: int) -> PointCloud:
    """Attenuate, drop and backscatter returns for fog.

    Output keeps input order; a scattered return takes the slot of the
    point it replaces.
    """
    rng = np.random.default_rng(seed)
    m = len(pc)
    ranges, att, lost = _attenuation_pass(pc, p.extinction, p.detection_threshold)
    u_scatter = rng.random(m)
    u_range = rng.random(m)

    hi = np.minimum(ranges, p.scatter_range_max)
    can_scatter = hi > MIN_SCATTER_RANGE
    scatter = lost & can_scatter & (u_scatter < p.scatter_prob)
    keep = ~lost | scatter

    out = pc.points.copy()
    out[:, 3] = att
    if scatter.any():
        r_s = MIN_SCATTER_RANGE + u_range[scatter] * (hi[scatter] - MIN_SCATTER_RANGE)
        out[scatter, :3] *= (r_s / ranges[scatter])[:, None]
        out[scatter, 3] = p.detection_threshold
    return PointCloud(out[keep])


def simulate_rain(pc: PointCloud, p: RainParams, seed: int) -> PointCloud:
    """Attenuate and drop returns, then jitter survivors along their rays."""
    rng = np.random.default_rng(seed)
    m = len(pc)
    ranges, att, lost = _attenuation_pass(pc, p.extinction, p.detection_threshold)
    noise = rng.standard_normal(m)

    out = pc.points.copy()
    out[:, 3] = att
    sigma = p.range_jitter_sigma_per_rate * p.rain_rate
    if sigma > 0:
        moved = ~lost & (ranges > 0)
        r_new = np.maximum(ranges[moved] + sigma * noise[moved], 0.0)
        out[moved, :3] *= (r_new / ranges[moved])[:, None]
    return PointCloud(out[~lost])


def sample_clutter(n: int, radius: float, intensity: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform inside the open ball of ``radius`` around the origin."""
    direction = rng.standard_normal((n, 3))
    norms = np.linalg.norm(direction, axis=1)
    norms[norms == 0] = 1.0
    r = radius * np.cbrt(rng.random(n))
    pts = np.empty((n, 4))
    pts[:, :3] = direction / norms[:, None] * r[:, None]
    pts[:, 3] = intensity
    return pts


def simulate_snow(pc: PointCloud, p: SnowParams, seed: int) -> PointCloud:
    """Attenuate and drop returns, then append near-sensor snow clutter."""
    rng = np.random.default_rng(seed)
    m = len(pc)
    _, att, lost = _attenuation_pass(pc, p.extinction, p.detection_threshold)

    out = pc.points.copy()
    out[:, 3] = att
    n_clutter = int(rng.poisson(p.clutter_rate * m / 1000.0)) if p.clutter_rate > 0 else 0
    clutter = sample_clutter(n_clutter, p.clutter_radius, p.detection_threshold, rng)
    return PointCloud(np.vstack([out[~lost], clutter]))


def simulate(pc: PointCloud, cfg: WeatherConfig, seed: int) -> PointCloud:
    if cfg.condition == "clean":
        return pc
    fn = {"fog": simulate_fog, "rain": simulate_rain, "snow": simulate_snow}[cfg.condition]
    return fn(pc, cfg.params, seed)


def derive_seed(seed: int, *keys: str) -> int:
    """Stable 64-bit sub-seed from a root seed and string keys."""
    payload = json.dumps([int(seed), *keys], separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def corrupt_scene(scene: SceneFrame, cfg: WeatherConfig, seed: int) -> SceneFrame:
    """Corrupt every agent's cloud independently.

    Each agent draws from ``derive_seed(seed, frame_id, agent_id)``, so the
    result does not depend on agent order or on how agents are scheduled.
    """
    if cfg.condition == "clean":
        return scene
    clouds = {
        a.agent_id: simulate(a.cloud, cfg, derive_seed(seed, scene.frame_id, a.agent_id))
        for a in scene.agents
    }
    return scene.with_clouds(clouds)
