"""Finite-difference verification of every layer, every loss and the full network.

All checks run in float64. Inputs to piecewise-linear ops are drawn away from
their kinks (ReLU inputs with |x| >= 0.1, max-pool inputs with distinct values)
so central differences are valid. Smooth ops are held to a tighter tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, nn
from .model import check_model_gradients, toy_config

SMOOTH_TOL = 1e-6
KINK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    worst_block: str | None

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _projected(forward, rng):
    """Scalar loss sum(R * f(params)) with a fixed random R, so every output matters."""
    holder = {}

    def loss_and_grads():
        out, backward = forward()
        if "R" not in holder:
            holder["R"] = rng.normal(size=out.shape)
        return float((holder["R"] * out).sum()), backward(holder["R"])

    return loss_and_grads


def _run(name, params, loss_and_grads, tol, h=1e-5, max_coords=60, seed=0):
    report = nn.gradient_check(params, loss_and_grads, h=h, tolerance=tol,
                               max_coords=max_coords, seed=seed)
    err = report.max_error if report.failure is None else float("inf")
    return CheckResult(name, err, tol, report.worst_block())


def check_conv(seed=0, stride=1, padding=1, dilation=1, k=3):
    rng = np.random.default_rng(seed)
    p = {"x": rng.normal(size=(2, 3, 9, 8)), "w": rng.normal(size=(4, 3, k, k)),
         "b": rng.normal(size=4)}

    def fwd():
        out = nn.conv2d_forward(p["x"], p["w"], p["b"], stride, padding, dilation)

        def back(g):
            gx, gw, gb = nn.conv2d_backward(p["x"], p["w"], g, stride, padding, dilation)
            return {"x": gx, "w": gw, "b": gb}
        return out, back

    return _run(f"conv2d(s={stride},p={padding},d={dilation})", p, _projected(fwd, rng),
                SMOOTH_TOL, seed=seed)


def check_dense(seed=0):
    rng = np.random.default_rng(seed)
    p = {"x": rng.normal(size=(4, 7)), "w": rng.normal(size=(7, 5)), "b": rng.normal(size=5)}

    def fwd():
        out = nn.dense_forward(p["x"], p["w"], p["b"])

        def back(g):
            gx, gw, gb = nn.dense_backward(p["x"], p["w"], g)
            return {"x": gx, "w": gw, "b": gb}
        return out, back

    return _run("dense", p, _projected(fwd, rng), SMOOTH_TOL, seed=seed)


def check_maxpool(seed=0, k=2):
    rng = np.random.default_rng(seed)
    # distinct values spaced far beyond the finite-difference step
    p = {"x": rng.permutation(2 * 3 * 8 * 9).reshape(2, 3, 8, 9) * 0.01}

    def fwd():
        out, arg = nn.maxpool_forward(p["x"], k)
        return out, lambda g: {"x": nn.maxpool_backward(g, arg, p["x"].shape, k)}

    return _run(f"maxpool(k={k})", p, _projected(fwd, rng), KINK_TOL, seed=seed)


def check_relu(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 1.0, size=(3, 20)) * rng.choice([-1.0, 1.0], size=(3, 20))
    p = {"x": x}

    def fwd():
        return nn.relu_forward(p["x"]), lambda g: {"x": nn.relu_backward(p["x"], g)}

    return _run("relu", p, _projected(fwd, rng), KINK_TOL, seed=seed)


def check_sigmoid(seed=0):
    rng = np.random.default_rng(seed)
    p = {"x": rng.normal(scale=3.0, size=(3, 20))}

    def fwd():
        y = nn.sigmoid_forward(p["x"])
        return y, lambda g: {"x": nn.sigmoid_backward(y, g)}

    return _run("sigmoid", p, _projected(fwd, rng), SMOOTH_TOL, seed=seed)


def check_softmax(seed=0):
    rng = np.random.default_rng(seed)
    p = {"x": rng.normal(scale=2.0, size=(4, 3))}

    def fwd():
        y = nn.softmax_forward(p["x"])
        return y, lambda g: {"x": nn.softmax_backward(y, g)}

    return _run("softmax", p, _projected(fwd, rng), SMOOTH_TOL, seed=seed)


def check_add(seed=0):
    rng = np.random.default_rng(seed)
    p = {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=(3, 5))}

    def fwd():
        def back(g):
            ga, gb = nn.add_backward(g)
            return {"a": ga, "b": gb}
        return nn.add_forward(p["a"], p["b"]), back

    return _run("add", p, _projected(fwd, rng), SMOOTH_TOL, seed=seed)


def _loss_check(name, fn, p, seed, tol=SMOOTH_TOL):
    def lg():
        value, grad = fn()
        return float(np.sum(value)), {"est": grad}
    return _run(name, p, lg, tol, h=1e-6, seed=seed)


def _type_through_softmax(logits, gt):
    q = nn.softmax_forward(logits)
    value, grad = losses.type_loss(q, gt)
    return value, nn.softmax_backward(q, grad)


def check_losses(seed=0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    gt_mask = (rng.uniform(size=(12, 11)) < 0.2).astype(float)
    weights = losses.class_weights(gt_mask)
    pm = {"est": rng.uniform(0.05, 0.95, size=(12, 11))}
    pj = {"est": rng.normal(size=(6, 3))}
    gj = rng.normal(size=(6, 3))
    pb = {"est": rng.normal(size=3)}
    gb = rng.normal(size=3)
    pt = {"est": rng.normal(size=(2, 3))}
    gt_t = np.eye(3)[[1, 2]]
    return [
        _loss_check("mask_loss", lambda: losses.mask_loss(pm["est"], gt_mask, weights), pm, seed),
        _loss_check("mask_loss(literal)",
                    lambda: losses.mask_loss(pm["est"], gt_mask, weights, literal=True), pm, seed),
        _loss_check("joint_coord_loss", lambda: losses.joint_coord_loss(pj["est"], gj), pj, seed),
        _loss_check("base_coord_loss", lambda: losses.base_coord_loss(pb["est"], gb), pb, seed),
        # perturbed through softmax logits so the prediction stays a distribution
        _loss_check("softmax+type_loss", lambda: _type_through_softmax(pt["est"], gt_t), pt, seed),
    ]


def check_model(seed=0, config=None) -> CheckResult:
    report = check_model_gradients(config or toy_config(), seed=seed, tolerance=KINK_TOL)
    err = report.max_error if report.failure is None else float("inf")
    return CheckResult("model(toy)+combined_loss", err, KINK_TOL, report.worst_block())


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    results = [
        check_conv(seed),
        check_conv(seed, stride=2, padding=0),
        check_conv(seed, dilation=2, padding=2),
        check_conv(seed, k=1, padding=0),
        check_dense(seed),
        check_maxpool(seed),
        check_maxpool(seed, k=4),
        check_relu(seed),
        check_sigmoid(seed),
        check_softmax(seed),
        check_add(seed),
    ]
    results += check_losses(seed)
    if include_model:
        results.append(check_model(seed))
    return results
