"""Point-cloud and scene primitives: domain types, file I/O and rigid transforms.

A cloud is held as an ``(m, 4)`` float64 array of ``(x, y, z, intensity)``
rows.  On disk the binary form is the KITTI-style dump of consecutive
little-endian float32 quadruples (``.bin``); an ASCII form with one
whitespace-separated point per line is provided for hand-written fixtures.

Poses rotate intrinsically about z (yaw), then y' (pitch), then x'' (roll),
i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import jsonschema
import numpy as np

from .errors import (
    DegenerateBox,
    DuplicateAgentId,
    IntensityClampWarning,
    MalformedRecord,
    MissingEgo,
    NonFiniteValue,
    SchemaViolation,
)

BIN_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16
FORMATS = ("bin_f32", "ascii")


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


def _as_points_array(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"points must have shape (m, 4), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable ordered set of LiDAR returns.

    Args:
        points: array-like of shape ``(m, 4)`` holding ``x, y, z`` in meters
            and intensity in ``[0, 1]``.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_points_array(self.points)
        if arr is self.points:
            arr = arr.copy()
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise NonFiniteValue(int(np.flatnonzero(bad)[0]))
        inten = arr[:, 3]
        if ((inten < 0.0) | (inten > 1.0)).any():
            raise ValueError("intensity must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))

    @classmethod
    def from_points(cls, pts: Iterable[Point | Sequence[float]]) -> "PointCloud":
        return cls([tuple(p) for p in pts])

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        for row in self.points:
            yield Point(*map(float, row))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points)
        )

    def __repr__(self) -> str:
        return f"PointCloud(m={len(self)})"

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def ranges(self) -> np.ndarray:
        """Euclidean distance of every point from the sensor origin."""
        return np.sqrt(np.einsum("ij,ij->i", self.xyz, self.xyz))


def normalize_angle(a: float) -> float:
    """Wrap an angle into ``(-pi, pi]``."""
    a = float(a)
    wrapped = math.pi - math.fmod(math.pi - a, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    """Rigid agent-to-world transform (meters, radians)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "yaw", "pitch", "roll"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"pose field {name} must be finite")
            object.__setattr__(self, name, v)
        for name in ("yaw", "pitch", "roll"):
            object.__setattr__(self, name, normalize_angle(getattr(self, name)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation_matrix(self) -> np.ndarray:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        return rz @ ry @ rx

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        r = np.asarray(m, dtype=np.float64)[:3, :3]
        t = np.asarray(m, dtype=np.float64)[:3, 3]
        pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
        yaw = math.atan2(r[1, 0], r[0, 0])
        roll = math.atan2(r[2, 1], r[2, 2])
        return cls(t[0], t[1], t[2], yaw, pitch, roll)

    def inverse(self) -> "Pose":
        return Pose.from_matrix(np.linalg.inv(self.matrix()))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x", "y", "z", "yaw", "pitch", "roll")}


def transform_points(pc: PointCloud, pose: Pose | np.ndarray) -> PointCloud:
    """Apply ``p -> R p + t`` to every point; intensities are left untouched.

    ``pose`` may be a :class:`Pose` or a homogeneous 4x4 matrix.
    """
    m = pose.matrix() if isinstance(pose, Pose) else np.asarray(pose, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"transform must be 4x4, got {m.shape}")
    out = np.empty_like(pc.points)
    out[:, :3] = pc.xyz @ m[:3, :3].T + m[:3, 3]
    out[:, 3] = pc.intensity
    return PointCloud(out)


@dataclass(frozen=True)
class Box3D:
    """Oriented box: ``center`` (x, y, z), ``dims`` (length, width, height), ``yaw``."""

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        c = tuple(float(v) for v in self.center)
        d = tuple(float(v) for v in self.dims)
        if len(c) != 3 or len(d) != 3:
            raise ValueError("center and dims need three components")
        if not all(math.isfinite(v) for v in (*c, *d, float(self.yaw))):
            raise DegenerateBox("box fields must be finite")
        if min(d) <= 0.0:
            raise DegenerateBox(f"box dims must be positive, got {d}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", float(self.yaw))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "dims": list(self.dims), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(tuple(d["center"]), tuple(d["dims"]), d.get("yaw", 0.0))


@dataclass(frozen=True)
class AgentFrame:
    agent_id: str
    is_ego: bool
    pose: Pose
    cloud: PointCloud

    def __post_init__(self) -> None:
        if not self.agent_id:
            raise SchemaViolation("agent_id must be a nonempty string")


@dataclass(frozen=True)
class SceneFrame:
    """One timestamp of a cooperative scene: ego plus connected agents."""

    frame_id: str
    agents: tuple[AgentFrame, ...]
    gt_boxes: tuple[Box3D, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))
        if not agents:
            raise MissingEgo(f"frame {self.frame_id!r} has no agents")
        seen: set[str] = set()
        for a in agents:
            if a.agent_id in seen:
                raise DuplicateAgentId(f"agent id {a.agent_id!r} repeated in frame {self.frame_id!r}")
            seen.add(a.agent_id)
        n_ego = sum(1 for a in agents if a.is_ego)
        if n_ego != 1:
            raise MissingEgo(f"frame {self.frame_id!r} needs exactly one ego agent, found {n_ego}")

    @property
    def ego(self) -> AgentFrame:
        return next(a for a in self.agents if a.is_ego)

    def agent(self, agent_id: str) -> AgentFrame:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    def with_clouds(self, clouds: dict[str, PointCloud]) -> "SceneFrame":
        """Copy of the scene with some agents' clouds replaced."""
        agents = tuple(
            AgentFrame(a.agent_id, a.is_ego, a.pose, clouds.get(a.agent_id, a.cloud))
            for a in self.agents
        )
        return SceneFrame(self.frame_id, agents, self.gt_boxes)

    def to_ego_frame(self, agent: AgentFrame) -> np.ndarray:
        """4x4 transform taking ``agent``'s sensor frame into the ego sensor frame."""
        return np.linalg.inv(self.ego.pose.matrix()) @ agent.pose.matrix()


# ---------------------------------------------------------------------------
# cloud I/O
# ---------------------------------------------------------------------------


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "bin_f32" if path.suffix.lower() == ".bin" else "ascii"
    if fmt not in FORMATS:
        raise ValueError(f"unknown point-cloud format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _finalize_loaded(arr: np.ndarray, path: Path) -> PointCloud:
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteValue(idx, f"{path}: non-finite value in record {idx}")
    inten = arr[:, 3]
    out_of_range = (inten < 0.0) | (inten > 1.0)
    n_clamped = int(out_of_range.sum())
    if n_clamped:
        arr = arr.copy()
        np.clip(arr[:, 3], 0.0, 1.0, out=arr[:, 3])
        warnings.warn(IntensityClampWarning(n_clamped, str(path)), stacklevel=3)
    return PointCloud(arr)


def load_point_cloud(path: str | os.PathLike, format: str | None = None) -> PointCloud:
    """Read a cloud from disk.

    Args:
        path: File to read.
        format: ``"bin_f32"`` or ``"ascii"``; inferred from the extension
            (``.bin`` is binary, anything else ASCII) when omitted.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        MalformedRecord: trailing bytes or a non-numeric / wrong-arity line.
        NonFiniteValue: a record holds NaN or Inf (``.index`` names it).
    """
    path = Path(path)
    fmt = _format_for(path, format)
    if not path.is_file():
        raise FileNotFoundError(f"point cloud not found: {path}")
    if fmt == "bin_f32":
        raw = path.read_bytes()
        if len(raw) % RECORD_BYTES:
            raise MalformedRecord(
                f"{path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES} "
                f"({len(raw) % RECORD_BYTES} trailing bytes)"
            )
        arr = np.frombuffer(raw, dtype=BIN_DTYPE).reshape(-1, 4).astype(np.float64)
        return _finalize_loaded(arr, path)

    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 4:
                raise MalformedRecord(f"{path}:{lineno}: expected 4 values, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return _finalize_loaded(arr, path)


def encode_bin(pc: PointCloud) -> bytes:
    return pc.points.astype(BIN_DTYPE).tobytes()


def save_point_cloud(pc: PointCloud, path: str | os.PathLike, format: str | None = None) -> None:
    """Write a cloud to disk.

    The binary form stores float32, so a round trip is exact for clouds whose
    values are float32-representable (anything read from a ``.bin``).  The
    ASCII form writes 17 significant digits and round-trips any float64.
    """
    path = Path(path)
    fmt = _format_for(path, format)
    if fmt == "bin_f32":
        path.write_bytes(encode_bin(pc))
        return
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# x y z intensity\n")
        for row in pc.points:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# scene manifests
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "type": "object",
    "required": ["frame_id", "agents"],
    "properties": {
        "frame_id": {"type": "string"},
        "agents": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["agent_id", "is_ego", "pose", "cloud"],
                "properties": {
                    "agent_id": {"type": "string", "minLength": 1},
                    "is_ego": {"type": "boolean"},
                    "pose": {
                        "type": "object",
                        "required": ["x", "y", "z", "yaw", "pitch", "roll"],
                        "properties": {k: _NUM for k in ("x", "y", "z", "yaw", "pitch", "roll")},
                    },
                    "cloud": {"type": "string", "minLength": 1},
                },
            },
        },
        "gt_boxes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["center", "dims", "yaw"],
                "properties": {"center": _VEC3, "dims": _VEC3, "yaw": _NUM},
            },
        },
    },
}


def read_manifest(manifest_path: str | os.PathLike) -> dict:
    """Parse and schema-check a scene manifest without touching cloud files."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{manifest_path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"{manifest_path}: {where}: {exc.message}") from None
    return doc


def load_scene(manifest_path: str | os.PathLike) -> SceneFrame:
    """Load a scene manifest and every cloud it references.

    Cloud paths are resolved relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    base = manifest_path.parent
    agents = []
    for entry in doc["agents"]:
        cloud_path = base / entry["cloud"]
        try:
            cloud = load_point_cloud(cloud_path)
        except FileNotFoundError:
            raise FileNotFoundError(
                f"cloud for agent {entry['agent_id']!r} not found: {cloud_path}"
            ) from None
        agents.append(AgentFrame(entry["agent_id"], entry["is_ego"], Pose(**entry["pose"]), cloud))
    boxes = tuple(Box3D.from_dict(b) for b in doc.get("gt_boxes", []))
    return SceneFrame(doc["frame_id"], tuple(agents), boxes)


def scene_manifest(scene: SceneFrame, cloud_paths: dict[str, str]) -> dict:
    """Manifest document for ``scene`` with the given per-agent relative cloud paths."""
    return {
        "frame_id": scene.frame_id,
        "agents": [
            {
                "agent_id": a.agent_id,
                "is_ego": a.is_ego,
                "pose": a.pose.to_dict(),
                "cloud": cloud_paths[a.agent_id],
            }
            for a in scene.agents
        ],
        "gt_boxes": [b.to_dict() for b in scene.gt_boxes],
    }


def save_scene(scene: SceneFrame, manifest_path: str | os.PathLike) -> None:
    """Write ``scene`` as a manifest plus one ``<agent_id>.bin`` per agent beside it."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    paths = {}
    for a in scene.agents:
        rel = f"{manifest_path.stem}_{a.agent_id}.bin"
        save_point_cloud(a.cloud, manifest_path.parent / rel)
        paths[a.agent_id] = rel
    manifest_path.write_text(json.dumps(scene_manifest(scene, paths), indent=2), encoding="utf-8")
