"""Dataset generation, on-disk layout, splitting, resizing and minibatching.

Layout of a dataset directory::

    dataset.json        seed, resolution, per-type counts, recordings
    manifest.jsonl      one JSON object per sample (labels + file paths)
    images/NNNNNN.png   24-bit RGB
    masks/NNNNNN.png    8-bit, 0 or 255
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .kinematics import (ROBOT_TYPES, FramePose, RobotModel, RobotType,
                         robot_model, step_for_count, sweep_trajectory)
from .scene import (FG_BAND, BackgroundSpec, CameraModel, Sample, make_sample,
                    sample_camera_pose)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MASK_EPS = 1e-7
DEFAULT_BATCH_SIZE = 64
DEFAULT_SPLIT_RATIO = 0.8

# Table I of the source data collection: (robot type, number of samples).
PAPER_ANALOG_RECORDINGS = (
    (RobotType.UR3, 211), (RobotType.UR3, 252), (RobotType.UR3, 463),
    (RobotType.UR5, 252), (RobotType.UR5, 756), (RobotType.UR5, 1512),
    (RobotType.UR10, 112), (RobotType.UR10, 278), (RobotType.UR10, 514),
)


class DatasetError(Exception):
    """Missing files or a malformed manifest."""


class GenerationError(RuntimeError):
    pass


# -- generation ---------------------------------------------------------------

def distance_band_for(model: RobotModel) -> tuple[float, float]:
    """Camera distance band scaled with the arm's reach."""
    return (model.reach + 0.3, 2.2 * model.reach + 0.5)


@dataclass(frozen=True)
class RecordingSpec:
    robot_type: RobotType
    count: int
    recording: int = 0


@dataclass(frozen=True)
class GenerationConfig:
    resolution: tuple[int, int] = (64, 53)
    fg_band: tuple[float, float] = FG_BAND
    calibration_sigma: float = 0.0
    max_attempts: int = 60
    params_path: str | None = None


def _models(params_path):
    if params_path is None:
        return {t: robot_model(t) for t in ROBOT_TYPES}
    from .kinematics import load_robot_models
    return load_robot_models(params_path)


def _generate_one(args) -> Sample:
    model, config, seed, recording, index, gen = args
    width, height = gen.resolution
    band = distance_band_for(model)
    for attempt in range(gen.max_attempts):
        key = [seed, recording, index, attempt]
        cam_seed, bg_seed = np.random.SeedSequence(key).spawn(2)
        pose = sample_camera_pose(cam_seed, model.reach, distance_band=band)
        camera = CameraModel.default(width, height, pose)
        sample = make_sample(model, config, camera, BackgroundSpec.random(bg_seed),
                             key + [1],
                             calibration_sigma=gen.calibration_sigma)
        f = sample.fg_fraction
        if not sample.out_of_view and gen.fg_band[0] <= f <= gen.fg_band[1]:
            return sample
    raise GenerationError(f"recording {recording} sample {index}: no camera pose gave a "
                          f"foreground fraction in {gen.fg_band} after {gen.max_attempts} tries")


def generate_samples(recordings: Sequence[RecordingSpec], seed: int,
                     gen: GenerationConfig = GenerationConfig(), workers: int = 1):
    """Render every recording; returns (samples, recording index per sample).

    Each recording sweeps joint space with the step that yields at least
    `count` configurations, keeping `count` evenly spaced ones. Camera pose and
    background are drawn per sample from a seed derived from
    (seed, recording, index, attempt), so output does not depend on `workers`.
    """
    models = _models(gen.params_path)
    jobs = []
    for rec in recordings:
        model = models[rec.robot_type]
        configs = sweep_trajectory(model, step_for_count(rec.count), max_count=rec.count)
        jobs += [(model, c, seed, rec.recording, i, gen) for i, c in enumerate(configs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_generate_one, jobs, chunksize=16))
    else:
        samples = [_generate_one(j) for j in jobs]
    return samples, [j[3] for j in jobs]


def type_recordings(types: Sequence[RobotType], count: int) -> list[RecordingSpec]:
    return [RecordingSpec(t, count, i) for i, t in enumerate(types)]


def paper_analog_recordings() -> list[RecordingSpec]:
    return [RecordingSpec(t, n, i) for i, (t, n) in enumerate(PAPER_ANALOG_RECORDINGS)]


# -- manifest -----------------------------------------------------------------

@dataclass
class ManifestEntry:
    index: int
    image: str
    mask: str
    robot_type: RobotType
    base_xyz: list[float]
    joints_xyz: list[list[float]]
    camera: dict
    joint_angles: list[float]
    recording: int = 0
    fg_fraction: float = 0.0

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["robot_type"] = self.robot_type.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        d = dict(d)
        d["robot_type"] = RobotType.parse(d["robot_type"])
        return cls(**d)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    resolution: tuple[int, int]
    root: Path | None = None
    recordings: list[dict] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        out = {t.value: 0 for t in ROBOT_TYPES}
        for e in self.entries:
            out[e.robot_type.value] += 1
        return out

    def __len__(self):
        return len(self.entries)

    def subset(self, positions: Sequence[int]) -> "DatasetManifest":
        return replace(self, entries=[self.entries[i] for i in positions])


def camera_to_json(camera: CameraModel) -> dict:
    return {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
            "width": camera.width, "height": camera.height,
            "rotation": camera.pose.rotation.tolist(),
            "translation": camera.pose.translation.tolist()}


def camera_from_json(d: dict) -> CameraModel:
    pose = FramePose(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))
    return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]), pose)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(samples: Sequence[Sample], directory, seed: int,
                 recording_ids: Sequence[int] | None = None,
                 recordings: Sequence[RecordingSpec] = ()) -> DatasetManifest:
    """Write PNGs, manifest.jsonl and dataset.json; returns the manifest."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("no samples to save")
    height, width = samples[0].mask.shape
    entries = []
    for i, s in enumerate(samples):
        img_rel, mask_rel = f"images/{i:06d}.png", f"masks/{i:06d}.png"
        Image.fromarray(to_uint8(s.image), mode="RGB").save(root / img_rel)
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(root / mask_rel)
        entries.append(ManifestEntry(
            index=i, image=img_rel, mask=mask_rel, robot_type=s.robot_type,
            base_xyz=[float(v) for v in s.base_xyz],
            joints_xyz=[[float(v) for v in row] for row in s.joints_xyz],
            camera=camera_to_json(s.camera), joint_angles=list(s.config.angles),
            recording=int(recording_ids[i]) if recording_ids is not None else 0,
            fg_fraction=s.fg_fraction))
    manifest = DatasetManifest(entries, seed, (width, height), root,
                               [{"recording": r.recording, "robot_type": r.robot_type.value,
                                 "count": r.count} for r in recordings])
    write_manifest(manifest, root)
    return manifest


def write_manifest(manifest: DatasetManifest, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    # json emits shortest round-trip reprs (17 significant digits at most)
    with open(root / "manifest.jsonl", "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json()) + "\n")
    meta = {"format_version": FORMAT_VERSION, "seed": manifest.seed,
            "resolution": list(manifest.resolution), "counts": manifest.counts,
            "total": len(manifest.entries), "recordings": manifest.recordings}
    with open(root / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_dataset(directory) -> DatasetManifest:
    root = Path(directory)
    meta_path, manifest_path = root / "dataset.json", root / "manifest.jsonl"
    for p in (meta_path, manifest_path):
        if not p.exists():
            raise DatasetError(f"missing dataset file: {p}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: malformed JSON ({exc})") from None

    entries = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_json(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                raise DatasetError(f"{manifest_path}:{lineno}: malformed entry ({exc})") from None

    manifest = DatasetManifest(entries, int(meta["seed"]), tuple(meta["resolution"]), root,
                               list(meta.get("recordings", [])))
    if manifest.counts != meta.get("counts", manifest.counts) or len(entries) != meta.get("total", len(entries)):
        raise DatasetError(f"{meta_path}: counts {meta.get('counts')} disagree with manifest "
                           f"{manifest.counts}")
    for e in entries:
        for rel in (e.image, e.mask):
            if not (root / rel).exists():
                raise DatasetError(f"missing file referenced by manifest: {root / rel}")
    return manifest


# -- in-memory arrays ---------------------------------------------------------

@dataclass
class SampleArrays:
    images: np.ndarray      # (N, H, W, 3) float32 in [0, 1]
    masks: np.ndarray       # (N, H, W) uint8 in {0, 1}
    joints: np.ndarray      # (N, 6, 3) float64, metres
    bases: np.ndarray       # (N, 3) float64, metres
    types: np.ndarray       # (N,) int class index
    cameras: list[CameraModel] = field(default_factory=list)

    def __len__(self):
        return len(self.types)

    def take(self, idx) -> "SampleArrays":
        idx = np.asarray(idx, dtype=int)
        return SampleArrays(self.images[idx], self.masks[idx], self.joints[idx],
                            self.bases[idx], self.types[idx],
                            [self.cameras[i] for i in idx] if self.cameras else [])


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def load_arrays(manifest: DatasetManifest, resolution: tuple[int, int] | None = None) -> SampleArrays:
    if manifest.root is None:
        raise DatasetError("manifest has no root directory")
    images, masks, cams = [], [], []
    for e in manifest.entries:
        img = read_image(manifest.root / e.image)
        mask = read_mask(manifest.root / e.mask)
        cam = camera_from_json(e.camera)
        if resolution is not None and (img.shape[1], img.shape[0]) != tuple(resolution):
            img, mask, cam = resize_arrays(img, mask, cam, resolution)
        images.append(img)
        masks.append(mask)
        cams.append(cam)
    n = len(manifest.entries)
    return SampleArrays(
        np.stack(images).astype(np.float32) if n else np.zeros((0, 1, 1, 3), np.float32),
        np.stack(masks) if n else np.zeros((0, 1, 1), np.uint8),
        np.array([e.joints_xyz for e in manifest.entries], dtype=float).reshape(n, 6, 3),
        np.array([e.base_xyz for e in manifest.entries], dtype=float).reshape(n, 3),
        np.array([e.robot_type.index for e in manifest.entries], dtype=int),
        cams)


# -- split --------------------------------------------------------------------

def split_sizes(n: int, ratio: float) -> tuple[int, int]:
    """Train size is round-half-up(ratio * n)."""
    n_train = int(math.floor(ratio * n + 0.5))
    return n_train, n - n_train


def split_dataset(manifest: DatasetManifest, ratio: float = DEFAULT_SPLIT_RATIO, seed: int = 0,
                  stratify: bool = False) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded random partition. With `stratify`, each robot type is split on its own
    (round-half-up per type), so the total may differ from the unstratified size by
    at most one per type."""
    if not 0 < ratio < 1:
        raise ValueError("split ratio must be in (0, 1)")
    n = len(manifest.entries)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    rng = np.random.default_rng(seed)
    if stratify:
        train, test = [], []
        for t in ROBOT_TYPES:
            pos = [i for i, e in enumerate(manifest.entries) if e.robot_type is t]
            perm = [pos[i] for i in rng.permutation(len(pos))]
            k, _ = split_sizes(len(pos), ratio)
            train += perm[:k]
            test += perm[k:]
    else:
        perm = rng.permutation(n)
        k, _ = split_sizes(n, ratio)
        train, test = list(perm[:k]), list(perm[k:])
    return manifest.subset(sorted(train)), manifest.subset(sorted(test))


# -- resize / normalise ---------------------------------------------------------

def _resize_channels(image: np.ndarray, size, resample) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32),
                                        mode="F").resize(size, resample), dtype=float)
             for c in range(image.shape[-1])]
    return np.stack(chans, axis=-1)


def resize_arrays(image, mask, camera, resolution):
    w, h = resolution
    if w < 8 or h < 8:
        raise ValueError("target resolution must be at least 8x8")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    src_h, src_w = mask.shape
    if (src_w, src_h) == (w, h):
        return np.clip(image, 0.0, 1.0), mask, camera
    image = np.clip(_resize_channels(image, (w, h), Image.BILINEAR), 0.0, 1.0)
    mask = np.asarray(Image.fromarray((mask > 0).astype(np.uint8)).resize((w, h), Image.NEAREST))
    if camera is not None:
        sx, sy = w / src_w, h / src_h
        camera = CameraModel(camera.fx * sx, camera.fy * sy, (camera.cx + 0.5) * sx - 0.5,
                             (camera.cy + 0.5) * sy - 0.5, w, h, camera.pose)
    return image, mask, camera


def normalize_and_resize(sample: Sample, target_resolution: tuple[int, int]) -> Sample:
    """Bilinear image resize clamped to [0, 1], nearest-neighbour mask. Metric
    labels are left untouched; camera intrinsics follow the new pixel grid."""
    image, mask, camera = resize_arrays(sample.image, sample.mask, sample.camera, target_resolution)
    return replace(sample, image=image, mask=mask.astype(np.uint8), camera=camera)


# -- batching -----------------------------------------------------------------

@dataclass
class Minibatch:
    images: np.ndarray   # (B, H, W, 3)
    masks: np.ndarray    # (B, H, W) ground truth clipped to [eps, 1 - eps]
    joints: np.ndarray   # (B, 18)
    bases: np.ndarray    # (B, 3)
    types: np.ndarray    # (B, 3) one-hot
    indices: np.ndarray  # positions in the source arrays

    def __len__(self):
        return len(self.indices)

    @property
    def binary_masks(self) -> np.ndarray:
        return (self.masks > 0.5).astype(np.uint8)

    def nchw(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.images.transpose(0, 3, 1, 2), dtype=dtype)


def one_hot(labels, n_classes: int = 3) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def make_minibatch(data: SampleArrays, idx) -> Minibatch:
    idx = np.asarray(idx, dtype=int)
    masks = np.clip(data.masks[idx].astype(float), MASK_EPS, 1.0 - MASK_EPS)
    return Minibatch(data.images[idx], masks, data.joints[idx].reshape(len(idx), 18),
                     data.bases[idx], one_hot(data.types[idx]), idx)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def minibatches(data: SampleArrays, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0,
                epoch: int = 0) -> Iterator[Minibatch]:
    """Per-epoch seeded shuffle; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield make_minibatch(data, order[start:start + batch_size])


def scan_counts(directory) -> dict[str, int]:
    """Count PNGs on disk, independent of the manifest."""
    root = Path(directory)
    return {sub: sum(1 for f in os.listdir(root / sub) if f.endswith(".png"))
            for sub in ("images", "masks")}
