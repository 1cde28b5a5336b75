"""Independent reference implementations used by the unit and acceptance tests.

The raster oracle takes the posed primitives from the library but decides
every pixel by direct minimisation, without the analytic ray intersections.
The kinematics oracle composes textbook DH matrices on its own.
"""

import math

import numpy as np

from armsight.kinematics import ROBOT_TYPES, JointConfig, robot_model
from armsight.scene import CameraModel, posed_primitives, sample_camera_pose


def dh_matrix(a, d, alpha, theta):
    """Textbook classic-DH link transform, written out element by element."""
    ct, st_, ca, sa = math.cos(theta), math.sin(theta), math.cos(alpha), math.sin(alpha)
    return np.array([
        [ct, -st_ * ca, st_ * sa, a * ct],
        [st_, ct * ca, -ct * sa, a * st_],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def oracle_frames(model, angles):
    T = np.eye(4)
    out = [T.copy()]
    for q, p in zip(angles, model.dh):
        T = T @ dh_matrix(p.a, p.d, p.alpha, q + p.theta0)
        out.append(T.copy())
    return out


GOLDEN = (math.sqrt(5) - 1) / 2


def _convex_min(f, hi, iters=160):
    """Golden-section minimum over t in [0, hi] of a convex function, per pixel."""
    lo = np.zeros_like(hi)
    a = hi - GOLDEN * (hi - lo)
    b = lo + GOLDEN * (hi - lo)
    fa, fb = f(a), f(b)
    for _ in range(iters):
        left = fa < fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        a_new = hi - GOLDEN * (hi - lo)
        b_new = lo + GOLDEN * (hi - lo)
        a, b = a_new, b_new
        fa, fb = f(a), f(b)
    return np.minimum(np.minimum(fa, fb), f(np.zeros_like(hi)))


def oracle_mask(camera, model, config):
    """Brute force: a primitive is a convex solid, so the ray through a pixel centre
    meets it iff min over t >= 0 of its signed excess function is <= 0.

    Returns (mask, ambiguous) where ambiguous marks pixels whose minimum is within
    1e-9 of zero and therefore cannot be decided by this method."""
    H, W = camera.height, camera.width
    v, u = np.mgrid[0:H, 0:W].astype(float)
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], -1)
    d = d.reshape(-1, 3)
    best = np.full(len(d), np.inf)
    for prim in posed_primitives(camera, model, config):
        if prim[0] == "sphere":
            _, c, r = prim
            f = lambda t, c=c, r=r: np.linalg.norm(t[:, None] * d - c, axis=1) - r
            extent = np.linalg.norm(c) + r
        else:
            _, pa, pb, r = prim
            L = np.linalg.norm(pb - pa)
            w = (pb - pa) / L

            def f(t, pa=pa, w=w, r=r, L=L):
                rel = t[:, None] * d - pa
                s = rel @ w
                radial = np.linalg.norm(rel - s[:, None] * w, axis=1) - r
                return np.maximum(radial, np.maximum(-s, s - L))
            extent = np.linalg.norm(pa) + L + r
        # |d| >= 1 since its z component is 1, so t <= 2 * extent covers the primitive
        best = np.minimum(best, _convex_min(f, np.full(len(d), 2.0 * extent)))
    return (best <= 0).reshape(H, W), (np.abs(best) < 1e-9).reshape(H, W)


def random_scene(seed):
    rng = np.random.default_rng(seed)
    rtype = ROBOT_TYPES[seed % 3]
    model = robot_model(rtype)
    config = JointConfig(tuple(rng.uniform(-math.pi, math.pi, 6)))
    pose = sample_camera_pose(seed, model.reach, distance_band=(model.reach + 0.3,
                                                                2.2 * model.reach + 0.5))
    return CameraModel.default(64, 53, pose), model, config
