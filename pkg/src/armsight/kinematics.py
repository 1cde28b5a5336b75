"""Arm models for the UR3/UR5/UR10 family and classic-DH forward kinematics."""

from __future__ import annotations

import configparser
import enum
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

ANGLE_LIMIT = 2.0 * math.pi
N_JOINTS = 6


class RobotType(enum.Enum):
    UR3 = "UR3"
    UR5 = "UR5"
    UR10 = "UR10"

    @property
    def index(self) -> int:
        return ROBOT_TYPES.index(self)

    @classmethod
    def parse(cls, name: str) -> "RobotType":
        try:
            return cls(name.upper())
        except ValueError:
            raise ValueError(f"unknown robot type {name!r}; expected one of UR3, UR5, UR10") from None


ROBOT_TYPES = (RobotType.UR3, RobotType.UR5, RobotType.UR10)


@dataclass(frozen=True)
class DHParams:
    a: float
    d: float
    alpha: float
    theta0: float = 0.0


@dataclass(frozen=True)
class PrimitiveShape:
    """A sphere centred on a frame origin, or a cylinder spanning two frame origins."""

    kind: str
    attachment: int
    radius: float
    end_attachment: int | None = None

    def __post_init__(self):
        if self.kind not in ("sphere", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("primitive radius must be positive")
        if self.kind == "cylinder":
            if self.end_attachment is None or abs(self.end_attachment - self.attachment) != 1:
                raise ValueError("cylinder endpoints must be attached to consecutive frames")


@dataclass(frozen=True)
class FramePose:
    """Rigid transform x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "FramePose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "FramePose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or an array of points (..., 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "FramePose") -> "FramePose":
        """self ∘ other: apply `other` first."""
        return FramePose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "FramePose":
        Rt = self.rotation.T
        return FramePose(Rt, -Rt @ self.translation)

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0)))


@dataclass(frozen=True)
class RobotModel:
    type: RobotType
    dh: tuple[DHParams, ...]
    geometry: tuple[PrimitiveShape, ...] = ()
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)

    def __post_init__(self):
        if len(self.dh) != N_JOINTS:
            raise ValueError(f"expected {N_JOINTS} DH entries, got {len(self.dh)}")
        for i, p in enumerate(self.dh, 1):
            vals = (p.a, p.d, p.alpha, p.theta0)
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"joint {i}: non-finite DH parameter")
            if p.a < 0:
                raise ValueError(f"joint {i}: link length a must be nonnegative")
            if abs(p.d) > 2.0:
                raise ValueError(f"joint {i}: |d| exceeds 2.0 m")

    @property
    def reach(self) -> float:
        """Upper bound on the distance from joint 1 to the flange."""
        return float(sum(math.hypot(p.a, p.d) for p in self.dh[1:]))

    def with_geometry(self, geometry: Sequence[PrimitiveShape]) -> "RobotModel":
        return RobotModel(self.type, self.dh, tuple(geometry), self.color)


@dataclass(frozen=True)
class JointConfig:
    angles: tuple[float, ...] = field(default=(0.0,) * N_JOINTS)

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if len(angles) != N_JOINTS:
            raise ValueError(f"expected {N_JOINTS} joint angles, got {len(angles)}")
        for i, a in enumerate(angles, 1):
            if not (-ANGLE_LIMIT <= a <= ANGLE_LIMIT):
                raise ValueError(f"joint {i} angle {a} outside [-2pi, 2pi]")


def default_geometry(n_frames: int = N_JOINTS + 1, *, joint_radius: float,
                     link_radius: float, base_radius: float) -> tuple[PrimitiveShape, ...]:
    shapes = [PrimitiveShape("sphere", 0, base_radius)]
    for i in range(1, n_frames):
        shapes.append(PrimitiveShape("cylinder", i - 1, link_radius, end_attachment=i))
        shapes.append(PrimitiveShape("sphere", i, joint_radius))
    return tuple(shapes)


DEFAULT_PARAMS = "ur_dh.ini"


def load_robot_models(path: str | Path | None = None) -> dict[RobotType, RobotModel]:
    """Read the DH/geometry table; `path=None` uses the packaged table."""
    parser = configparser.ConfigParser()
    if path is None:
        text = resources.files("armsight.data").joinpath(DEFAULT_PARAMS).read_text()
        parser.read_string(text, source=DEFAULT_PARAMS)
    else:
        with open(path) as fh:
            parser.read_file(fh)

    models = {}
    for rtype in ROBOT_TYPES:
        name = rtype.value
        if name not in parser:
            raise ValueError(f"parameter table has no [{name}] section")
        sec = parser[name]
        dh = []
        for j in range(1, N_JOINTS + 1):
            js = parser[f"{name}.joint{j}"]
            dh.append(DHParams(js.getfloat("a"), js.getfloat("d"), js.getfloat("alpha"),
                               js.getfloat("theta0", 0.0)))
        geometry = default_geometry(joint_radius=sec.getfloat("joint_radius"),
                                    link_radius=sec.getfloat("link_radius"),
                                    base_radius=sec.getfloat("base_radius"))
        color = tuple(float(c) for c in sec.get("color", "0.7, 0.7, 0.7").split(","))
        models[rtype] = RobotModel(rtype, tuple(dh), geometry, color)
    return models


_MODELS: dict[RobotType, RobotModel] | None = None


def robot_model(rtype: RobotType | str) -> RobotModel:
    global _MODELS
    if isinstance(rtype, str):
        rtype = RobotType.parse(rtype)
    if _MODELS is None:
        _MODELS = load_robot_models()
    return _MODELS[rtype]


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(alpha: float) -> np.ndarray:
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def forward_kinematics(model: RobotModel, config: JointConfig) -> list[FramePose]:
    """Base frame followed by the six joint frames, all in the base frame.

    Each joint applies rot_z(theta) · trans_z(d) · trans_x(a) · rot_x(alpha).
    """
    if not isinstance(config, JointConfig):
        config = JointConfig(tuple(config))
    R = np.eye(3)
    p = np.zeros(3)
    frames = [FramePose(R.copy(), p.copy())]
    for q, prm in zip(config.angles, model.dh):
        Rz = _rot_z(q + prm.theta0)
        p = p + R @ (Rz @ np.array([prm.a, 0.0, 0.0]) + np.array([0.0, 0.0, prm.d]))
        R = R @ Rz @ _rot_x(prm.alpha)
        frames.append(FramePose(R, p))
    return frames


def joint_positions(model: RobotModel, config: JointConfig) -> np.ndarray:
    """(6, 3) origins of frames 1..6 in metres, base frame."""
    frames = forward_kinematics(model, config)
    return np.stack([f.translation for f in frames[1:]])


# Sub-ranges used for data collection sweeps. The wrist joints are kept within
# one turn; the shoulder is restricted to keep the arm above the mounting plane.
DEFAULT_SWEEP_RANGES = (
    (-math.pi, math.pi),
    (-math.pi, 0.0),
    (-2.6, 2.6),
    (-math.pi, math.pi),
    (-math.pi, math.pi),
    (-math.pi, math.pi),
)


def positions_per_joint(step, ranges) -> list[int]:
    steps = np.broadcast_to(np.asarray(step, dtype=float), (len(ranges),))
    counts = []
    for s, (lo, hi) in zip(steps, ranges):
        if not s > 0:
            raise ValueError("sweep step must be positive")
        if hi < lo:
            counts.append(0)
            continue
        # tolerance keeps e.g. a range of exactly 2 steps from losing its endpoint
        counts.append(int(math.floor((hi - lo) / s + 1e-9)) + 1)
    return counts


def sweep_trajectory(model: RobotModel, step, ranges=DEFAULT_SWEEP_RANGES,
                     max_count: int | None = None) -> list[JointConfig]:
    """Grid sweep over joint angles.

    `step` is a scalar or per-joint sequence in radians. Each joint visits
    lo, lo + step, ... up to hi. The grid is the Cartesian product with the
    last joint varying fastest; if `max_count` is smaller than the grid,
    `max_count` evenly spaced grid entries are kept.
    """
    del model  # sweeps are defined in joint space; kept for API symmetry
    ranges = [tuple(r) for r in ranges]
    if len(ranges) != N_JOINTS:
        raise ValueError(f"expected {N_JOINTS} joint ranges")
    for lo, hi in ranges:
        if lo < -ANGLE_LIMIT or hi > ANGLE_LIMIT:
            raise ValueError("sweep range outside joint limits")
    counts = positions_per_joint(step, ranges)
    if 0 in counts:
        return []
    steps = np.broadcast_to(np.asarray(step, dtype=float), (N_JOINTS,))
    axes = [[lo + k * s for k in range(n)] for (lo, _), s, n in zip(ranges, steps, counts)]
    total = math.prod(counts)
    if max_count is not None and max_count < total:
        keep = np.linspace(0, total - 1, max_count).round().astype(int) if max_count > 0 else []
    else:
        keep = range(total)

    out = []
    for flat in keep:
        idx = np.unravel_index(int(flat), counts)
        out.append(JointConfig(tuple(axes[j][i] for j, i in enumerate(idx))))
    return out


def step_for_count(count: int, ranges=DEFAULT_SWEEP_RANGES) -> float:
    """Largest uniform step whose grid holds at least `count` configurations."""
    if count < 1:
        raise ValueError("count must be >= 1")
    widths = [hi - lo for lo, hi in ranges]
    step = max(widths) + 1.0
    # grid size is a non-increasing function of the step; shrink geometrically
    while math.prod(positions_per_joint(step, ranges)) < count:
        step *= 0.97
    return step

