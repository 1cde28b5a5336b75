"""Synthetic camera scenes of the arm models with exact ground truth.

The mask is defined analytically: a pixel is foreground iff the ray through
its centre meets any posed primitive (sphere or solid capped cylinder) at
positive depth. Pixel centres sit on integer (u, v) coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .kinematics import (FramePose, JointConfig, RobotModel, RobotType,
                         forward_kinematics, joint_positions)

DEFAULT_RESOLUTION = (64, 53)
# focal length in pixels per pixel of image width (fx = 100 at 64 px)
FOCAL_PER_WIDTH = 1.5625
CALIBRATION_ERROR_BOUND = 0.0052
ROTATION_ERROR_BOUND_DEG = 0.5
FG_BAND = (0.04, 0.20)

LIGHT_DIR = np.array([-0.35, -0.55, -0.76]) / np.linalg.norm([-0.35, -0.55, -0.76])
AMBIENT = 0.45
DIFFUSE = 0.55


class NotProjectableError(ValueError):
    """Point lies on or behind the camera plane."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: FramePose = field(default_factory=FramePose.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.pose.orthonormality_error() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def default(cls, width: int = DEFAULT_RESOLUTION[0], height: int = DEFAULT_RESOLUTION[1],
                pose: FramePose | None = None) -> "CameraModel":
        f = FOCAL_PER_WIDTH * width
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                   pose if pose is not None else FramePose.identity())

    def with_pose(self, pose: FramePose) -> "CameraModel":
        return replace(self, pose=pose)

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) unnormalised camera-frame directions with z = 1."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                         np.ones_like(uu)], axis=-1)


def project_point(camera: CameraModel, point) -> tuple[float, float, float]:
    x, y, z = camera.pose.apply(np.asarray(point, dtype=float))
    if z <= 0:
        raise NotProjectableError(f"point has non-positive camera depth {z}")
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z


def project_points(camera: CameraModel, points) -> np.ndarray:
    """(N, 3) base-frame points -> (N, 3) of (u, v, depth); NaN where depth <= 0."""
    pc = camera.pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    out = np.full_like(pc, np.nan)
    ok = pc[:, 2] > 0
    z = pc[ok, 2]
    out[ok, 0] = camera.fx * pc[ok, 0] / z + camera.cx
    out[ok, 1] = camera.fy * pc[ok, 1] / z + camera.cy
    out[ok, 2] = z
    return out


def posed_primitives(camera: CameraModel, model: RobotModel, config: JointConfig):
    """Primitives in the camera frame: ('sphere', centre, r) / ('cylinder', a, b, r)."""
    frames = forward_kinematics(model, config)
    origins = camera.pose.apply(np.stack([f.translation for f in frames]))
    out = []
    for shape in model.geometry:
        if shape.kind == "sphere":
            out.append(("sphere", origins[shape.attachment], shape.radius))
        else:
            out.append(("cylinder", origins[shape.attachment], origins[shape.end_attachment],
                        shape.radius))
    return out


def _sphere_hits(d, centre, r):
    """Entry depth (inf where missed) and outward normal at entry."""
    a = np.einsum("...k,...k->...", d, d)
    b = -2.0 * (d @ centre)
    c = centre @ centre - r * r
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    hit &= t1 > 0
    t = np.where(t0 > 0, t0, t1)
    normal = (np.where(hit, t, 0.0)[..., None] * d - centre) / r
    return np.where(hit, t, np.inf), normal


def _cylinder_hits(d, pa, pb, r):
    """Solid capped cylinder: intersect radial, axial and t > 0 intervals."""
    axis = pb - pa
    length = np.linalg.norm(axis)
    w = axis / length
    dw = d @ w
    dp = d - dw[..., None] * w
    o = -pa
    ow = o @ w
    op = o - ow * w

    alpha = np.einsum("...k,...k->...", dp, dp)
    beta = 2.0 * (dp @ op)
    gamma = op @ op - r * r
    parallel = alpha <= 1e-300
    disc = beta * beta - 4.0 * alpha * gamma
    safe_alpha = np.where(parallel, 1.0, alpha)
    sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
    r_lo = np.where(parallel, -np.inf, (-beta - sq) / (2.0 * safe_alpha))
    r_hi = np.where(parallel, np.inf, (-beta + sq) / (2.0 * safe_alpha))
    radial_ok = np.where(parallel, gamma <= 0, disc >= 0)

    # axial coordinate s(t) = ow + t * dw must lie in [0, length]
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = (0.0 - ow) / dw
        s1 = (length - ow) / dw
    flat = dw == 0
    a_lo = np.where(flat, -np.inf, np.minimum(s0, s1))
    a_hi = np.where(flat, np.inf, np.maximum(s0, s1))
    axial_ok = np.where(flat, (ow >= 0) & (ow <= length), True)

    lo = np.maximum(r_lo, a_lo)
    hi = np.minimum(r_hi, a_hi)
    hit = radial_ok & axial_ok & (lo <= hi) & (hi > 0)

    t = np.where(lo > 0, lo, hi)
    q = np.where(hit, t, 0.0)[..., None] * d - pa
    t = np.where(hit, t, np.inf)
    side = q - (q @ w)[..., None] * w
    cap_sign = np.where(dw > 0, -1.0, 1.0)
    on_cap = (a_lo >= r_lo)[..., None]
    normal = np.where(on_cap, cap_sign[..., None] * w, side / r)
    return t, normal


def raycast(camera: CameraModel, model: RobotModel, config: JointConfig):
    """Nearest positive hit depth (inf on miss) and surface normal per pixel."""
    d = camera.ray_directions()
    depth = np.full(d.shape[:2], np.inf)
    normal = np.zeros(d.shape)
    for prim in posed_primitives(camera, model, config):
        if prim[0] == "sphere":
            t, n = _sphere_hits(d, prim[1], prim[2])
        else:
            t, n = _cylinder_hits(d, prim[1], prim[2], prim[3])
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal = np.where(closer[..., None], n, normal)
    return depth, normal


def render_mask(camera: CameraModel, model: RobotModel, config: JointConfig) -> np.ndarray:
    depth, _ = raycast(camera, model, config)
    return np.isfinite(depth).astype(np.uint8)


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str = "flat"  # flat | gradient | noise
    color_a: tuple[float, float, float] = (0.5, 0.5, 0.5)
    color_b: tuple[float, float, float] = (0.5, 0.5, 0.5)
    vertical: bool = True
    noise_amplitude: float = 0.15

    @classmethod
    def random(cls, rng_seed) -> "BackgroundSpec":
        rng = np.random.default_rng(rng_seed)

        def muted():
            g = rng.uniform(0.12, 0.88)
            return tuple(float(c) for c in np.clip(g + rng.uniform(-0.05, 0.05, 3), 0, 1))

        kind = ("flat", "gradient", "noise")[int(rng.integers(3))]
        return cls(kind, muted(), muted(), bool(rng.integers(2)), float(rng.uniform(0.05, 0.2)))


def render_background(spec: BackgroundSpec, width: int, height: int, rng_seed) -> np.ndarray:
    a = np.asarray(spec.color_a, dtype=float)
    if spec.kind == "flat":
        img = np.broadcast_to(a, (height, width, 3)).copy()
    elif spec.kind == "gradient":
        b = np.asarray(spec.color_b, dtype=float)
        n = height if spec.vertical else width
        ramp = np.linspace(0.0, 1.0, n)
        ramp = ramp[:, None] if spec.vertical else ramp[None, :]
        img = a + (b - a) * ramp[..., None]
        img = np.broadcast_to(img, (height, width, 3)).copy()
    elif spec.kind == "noise":
        rng = np.random.default_rng(rng_seed)
        coarse = rng.uniform(-1.0, 1.0, size=(max(2, height // 8), max(2, width // 8)))
        smooth = np.asarray(Image.fromarray(coarse.astype(np.float32), mode="F")
                            .resize((width, height), Image.BILINEAR), dtype=float)
        fine = rng.uniform(-0.2, 0.2, size=(height, width))
        img = a + spec.noise_amplitude * (smooth + fine)[..., None]
    else:
        raise ValueError(f"unknown background kind {spec.kind!r}")
    return np.clip(img, 0.0, 1.0)


def shade(depth: np.ndarray, normal: np.ndarray, color) -> np.ndarray:
    """Lambertian term plus ambient, attenuated slightly with depth."""
    lambert = np.clip(-(normal @ LIGHT_DIR), 0.0, 1.0)
    fade = 1.0 - 0.15 * np.clip((np.where(np.isfinite(depth), depth, 0.0) - 1.0) / 3.0, 0.0, 1.0)
    intensity = (AMBIENT + DIFFUSE * lambert) * fade
    return np.asarray(color, dtype=float) * intensity[..., None]


def render_color(camera: CameraModel, model: RobotModel, config: JointConfig,
                 background: BackgroundSpec, rng_seed) -> np.ndarray:
    depth, normal = raycast(camera, model, config)
    img = render_background(background, camera.width, camera.height, rng_seed)
    fg = np.isfinite(depth)
    img[fg] = shade(depth, normal, model.color)[fg]
    return np.clip(img, 0.0, 1.0)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> FramePose:
    """Pose mapping base-frame points into a camera at `position` looking at `target`.

    Camera axes: x right, y down, z forward.
    """
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return FramePose(R, -R @ position)


def sample_camera_pose(rng_seed, workspace_radius: float, distance_band=(1.0, 3.0),
                       elevation_deg=(8.0, 55.0), target_jitter: float = 0.1) -> FramePose:
    """Camera on a spherical shell around the base, aimed near the workspace centre.

    The workspace centre sits at 0.2 * workspace_radius above the base; the aim
    point is jittered within `target_jitter * workspace_radius` of it.
    """
    if not workspace_radius > 0:
        raise ValueError("workspace_radius must be positive")
    rng = np.random.default_rng(rng_seed)
    dist = rng.uniform(*distance_band)
    azim = rng.uniform(-math.pi, math.pi)
    elev = math.radians(rng.uniform(*elevation_deg))
    position = dist * np.array([math.cos(elev) * math.cos(azim),
                                math.cos(elev) * math.sin(azim),
                                math.sin(elev)])
    centre = np.array([0.0, 0.0, 0.2 * workspace_radius])
    jitter = rng.normal(size=3)
    jitter *= target_jitter * workspace_radius * rng.uniform() / np.linalg.norm(jitter)
    return look_at(position, centre + jitter)


def _axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def perturb_calibration(pose: FramePose, sigma_t: float, rng_seed,
                        max_translation: float = CALIBRATION_ERROR_BOUND,
                        max_rotation_deg: float = ROTATION_ERROR_BOUND_DEG) -> FramePose:
    """Simulated hand-eye error: R' = dR R, t' = t + dt.

    dt is Gaussian with per-axis sigma `sigma_t`, resampled until
    |dt| <= max_translation. The rotation angle is Gaussian with a sigma scaled
    in proportion (sigma_t / max_translation * max_rotation), truncated the same way.
    """
    if sigma_t < 0:
        raise ValueError("sigma_t must be nonnegative")
    if sigma_t == 0:
        return FramePose(pose.rotation.copy(), pose.translation.copy())
    rng = np.random.default_rng(rng_seed)
    for _ in range(1000):
        dt = rng.normal(0.0, sigma_t, size=3)
        if np.linalg.norm(dt) <= max_translation:
            break
    else:
        dt = dt * (max_translation / np.linalg.norm(dt))
    max_rot = math.radians(max_rotation_deg)
    sigma_r = sigma_t / max_translation * max_rot
    for _ in range(1000):
        angle = rng.normal(0.0, sigma_r)
        if abs(angle) <= max_rot:
            break
    else:
        angle = math.copysign(max_rot, angle)
    dR = _axis_angle(rng.normal(size=3), angle)
    return FramePose(dR @ pose.rotation, pose.translation + dt)


@dataclass
class Sample:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    mask: np.ndarray           # (H, W) uint8 in {0, 1}
    base_xyz: np.ndarray       # (3,) metres, camera frame
    joints_xyz: np.ndarray     # (6, 3) metres, camera frame
    robot_type: RobotType
    camera: CameraModel
    config: JointConfig
    label_pose: FramePose | None = None
    out_of_view: bool = False

    @property
    def fg_fraction(self) -> float:
        return float(self.mask.mean())


def labels_for(pose: FramePose, model: RobotModel, config: JointConfig):
    """Base and joint positions in the frame defined by `pose`."""
    return pose.apply(np.zeros(3)), pose.apply(joint_positions(model, config))


def make_sample(model: RobotModel, config: JointConfig, camera: CameraModel,
                background: BackgroundSpec, seed, calibration_sigma: float = 0.0) -> Sample:
    """Render image + mask through the true pose; labels use the (perturbed) calibration."""
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [seed])
    bg_seed, calib_seed = ss.spawn(2)
    depth, normal = raycast(camera, model, config)
    fg = np.isfinite(depth)
    image = render_background(background, camera.width, camera.height, bg_seed)
    image[fg] = shade(depth, normal, model.color)[fg]
    image = np.clip(image, 0.0, 1.0)

    label_pose = perturb_calibration(camera.pose, calibration_sigma, calib_seed)
    base, joints = labels_for(label_pose, model, config)
    return Sample(image, fg.astype(np.uint8), base, joints, model.type, camera, config,
                  label_pose=label_pose, out_of_view=not fg.any())


def fg_in_band(mask: np.ndarray, band=FG_BAND) -> bool:
    f = float(mask.mean())
    return band[0] <= f <= band[1]
