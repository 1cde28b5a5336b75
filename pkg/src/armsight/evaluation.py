"""Test-set metrics and report files.

Distances are computed in metres and reported in centimetres.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import ROBOT_TYPES

# Reference figures from the real-camera setup, shown next to measured values.
REFERENCE_ROW = {"mask_accuracy": 0.98, "type_accuracy": 0.983,
                 "joint_error_mean": 3.16, "base_error_mean": 2.74}
N_JOINTS = 6


def _binary(a, threshold):
    return np.asarray(a, dtype=float) >= threshold


def mask_accuracy(pred_prob, gt, threshold: float = 0.5) -> float:
    """Fraction of pixels where pred >= threshold agrees with gt, pooled over all pixels."""
    pred_prob, gt = np.asarray(pred_prob), np.asarray(gt)
    if pred_prob.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred_prob.shape} vs {gt.shape}")
    return float(np.mean(_binary(pred_prob, threshold) == _binary(gt, 0.5)))


def mask_accuracy_per_image(pred_prob, gt, threshold: float = 0.5) -> np.ndarray:
    pred_prob, gt = np.asarray(pred_prob), np.asarray(gt)
    if pred_prob.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred_prob.shape} vs {gt.shape}")
    match = _binary(pred_prob, threshold) == _binary(gt, 0.5)
    return match.reshape(len(match), -1).mean(axis=1)


def joint_errors(pred, gt) -> np.ndarray:
    """Per-joint Euclidean distance in cm; (..., 6, 3) -> (..., 6)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"joint shapes differ: {pred.shape} vs {gt.shape}")
    return 100.0 * np.linalg.norm(pred - gt, axis=-1)


def base_error(pred, gt):
    """Euclidean distance in cm; (..., 3) -> (...)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"base shapes differ: {pred.shape} vs {gt.shape}")
    d = 100.0 * np.linalg.norm(pred - gt, axis=-1)
    return float(d) if d.ndim == 0 else d


def predicted_types(probs) -> np.ndarray:
    """argmax with ties resolved to the lowest class index."""
    return np.argmax(np.asarray(probs, dtype=float), axis=-1)


def type_accuracy(preds, gts) -> float:
    """`preds` are (N, 3) probabilities; `gts` are class indices or one-hot rows."""
    gts = np.asarray(gts)
    if gts.ndim == 2:
        gts = np.argmax(gts, axis=-1)
    if len(gts) == 0:
        raise ValueError("no samples")
    return float(np.mean(predicted_types(preds) == gts))


@dataclass
class JointStats:
    joint: int
    mean: float
    q1: float
    median: float
    q3: float
    minimum: float
    maximum: float


def per_joint_breakdown(errors) -> list[JointStats]:
    """Quartiles per joint from an (N, 6) table of distances in cm."""
    errors = np.asarray(errors, dtype=float)
    if errors.ndim != 2 or errors.shape[1] != N_JOINTS:
        raise ValueError(f"expected (N, {N_JOINTS}) errors, got {errors.shape}")
    if len(errors) < 4:
        raise ValueError("quartiles need at least 4 samples")
    q1, med, q3 = np.percentile(errors, [25, 50, 75], axis=0)
    return [JointStats(j + 1, float(errors[:, j].mean()), float(q1[j]), float(med[j]),
                       float(q3[j]), float(errors[:, j].min()), float(errors[:, j].max()))
            for j in range(N_JOINTS)]


@dataclass
class SampleResult:
    index: int
    robot_type: str
    predicted_type: str
    mask_accuracy: float
    joint_errors: list[float]
    base_error: float


@dataclass
class EvalReport:
    n_samples: int
    mask_accuracy: float
    mask_accuracy_per_image: float
    majority_baseline: float
    type_accuracy: float
    joint_error_mean: float
    joint_error_per_joint: list[JointStats]
    base_error_mean: float
    threshold: float = 0.5
    per_joint_medians_increasing: bool = False
    samples: list[SampleResult] = field(default_factory=list)
    loss_curve: list[list] = field(default_factory=list)  # [iteration, lr, l_final, test_l_final]
    reference: dict = field(default_factory=lambda: dict(REFERENCE_ROW))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["joint_error_per_joint"] = [JointStats(**j) for j in d["joint_error_per_joint"]]
        d["samples"] = [SampleResult(**s) for s in d["samples"]]
        return cls(**d)


def loss_curve_rows(train_log) -> list[list]:
    return [[r.iteration, r.lr, r.l_final, r.test_l_final] for r in train_log.records]


def evaluate(outputs, data, threshold: float = 0.5, train_log=None) -> EvalReport:
    """Score predictions against a labelled set.

    `outputs` is a ModelOutput (or anything with mask_prob, joints, base and
    type_prob arrays) aligned with `data` (a SampleArrays).
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty test set")
    masks = np.asarray(data.masks)
    per_image = mask_accuracy_per_image(outputs.mask_prob, masks, threshold)
    j_err = joint_errors(np.reshape(outputs.joints, (n, N_JOINTS, 3)), data.joints)
    b_err = base_error(outputs.base, data.bases)
    pred_t = predicted_types(outputs.type_prob)
    samples = [SampleResult(i, ROBOT_TYPES[data.types[i]].value, ROBOT_TYPES[pred_t[i]].value,
                            float(per_image[i]), [float(v) for v in j_err[i]], float(b_err[i]))
               for i in range(n)]
    stats = per_joint_breakdown(j_err) if n >= 4 else []
    medians = [s.median for s in stats]
    return EvalReport(
        n_samples=n,
        mask_accuracy=mask_accuracy(outputs.mask_prob, masks, threshold),
        mask_accuracy_per_image=float(np.mean(per_image)),
        majority_baseline=float(1.0 - np.mean(masks > 0)),
        type_accuracy=type_accuracy(outputs.type_prob, data.types),
        joint_error_mean=float(j_err.mean()),
        joint_error_per_joint=stats,
        base_error_mean=float(np.mean(b_err)),
        threshold=threshold,
        per_joint_medians_increasing=bool(medians) and all(
            a <= b for a, b in zip(medians, medians[1:])),
        samples=samples,
        loss_curve=loss_curve_rows(train_log) if train_log is not None else [])


def evaluate_model(model, data, threshold: float = 0.5, train_log=None,
                   batch_size: int = 64) -> EvalReport:
    images = np.ascontiguousarray(np.asarray(data.images).transpose(0, 3, 1, 2))
    return evaluate(model.predict(images, batch_size), data, threshold, train_log)


# -- files --------------------------------------------------------------------------

def _fmt(v, pct=False):
    return f"{100 * v:.2f}%" if pct else f"{v:.2f}"


def report_markdown(report: EvalReport) -> str:
    ref = report.reference
    lines = [
        "# Evaluation summary",
        "",
        f"Test samples: {report.n_samples}. Mask threshold: {report.threshold}.",
        "",
        "| row | mask accuracy | type accuracy | joint error (cm) | base error (cm) |",
        "|---|---|---|---|---|",
        f"| measured | {_fmt(report.mask_accuracy, True)} | {_fmt(report.type_accuracy, True)} "
        f"| {_fmt(report.joint_error_mean)} | {_fmt(report.base_error_mean)} |",
        f"| reference (real camera data, full-scale training) | {_fmt(ref['mask_accuracy'], True)} "
        f"| {_fmt(ref['type_accuracy'], True)} | {_fmt(ref['joint_error_mean'])} "
        f"| {_fmt(ref['base_error_mean'])} |",
        f"| majority-class mask baseline | {_fmt(report.majority_baseline, True)} | - | - | - |",
        "",
        f"Per-image mean mask accuracy: {_fmt(report.mask_accuracy_per_image, True)}.",
        "",
        "## Joint error by joint (cm)",
        "",
        "| joint | mean | q1 | median | q3 |",
        "|---|---|---|---|---|",
    ]
    lines += [f"| {s.joint} | {_fmt(s.mean)} | {_fmt(s.q1)} | {_fmt(s.median)} | {_fmt(s.q3)} |"
              for s in report.joint_error_per_joint]
    trend = "yes" if report.per_joint_medians_increasing else "no"
    lines += ["", f"Medians non-decreasing from joint 1 to 6: {trend}.", ""]
    return "\n".join(lines)


def emit_report(report: EvalReport, directory) -> dict[str, Path]:
    """Write report.json, report.md, per_joint.csv and loss_curve.csv."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {name: d / name for name in ("report.json", "report.md", "per_joint.csv",
                                         "loss_curve.csv")}
    paths["report.json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    paths["report.md"].write_text(report_markdown(report))
    with open(paths["per_joint.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["joint", "mean_cm", "q1_cm", "median_cm", "q3_cm", "min_cm", "max_cm"])
        for s in report.joint_error_per_joint:
            w.writerow([s.joint] + [repr(v) for v in (s.mean, s.q1, s.median, s.q3,
                                                       s.minimum, s.maximum)])
    with open(paths["loss_curve.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "l_final", "test_l_final"])
        for it, lr, lf, tl in report.loss_curve:
            w.writerow([it, repr(lr), repr(lf), "" if tl is None else repr(tl)])
    return paths


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text()))
