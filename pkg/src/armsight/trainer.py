"""Minibatch SGD training with an exponential learning-rate schedule.

The minibatch for iteration t is a pure function of (seed, t): epoch t // k of a
per-epoch seeded shuffle, slot t % k, where k is the number of batches per
epoch. Together with checkpointed parameters and velocities this makes a
resumed run reproduce an uninterrupted one bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_params, save_params
from .dataset import SampleArrays, batches_per_epoch, epoch_order, make_minibatch, Minibatch
from .losses import ClassWeights, LossBreakdown, LossWeights, class_weights, combined_loss
from .model import Model, ModelConfig
from .nn import NonFiniteError

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum")
CLASS_WEIGHTING = ("image", "dataset")
LOG_FIELDS = ("iteration", "lr", "l_final", "l_mask", "l_jcoords", "l_bcoords", "l_type",
              "test_l_final")

PARAMS_FILE = "model.rpnn"
VELOCITY_FILE = "velocity.rpnn"
STATE_FILE = "train_state.json"
LOG_FILE = "train_log.csv"
MODEL_CONFIG_FILE = "model_config.json"


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    total_iterations: int = 2000
    seed: int = 0
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    checkpoint_every: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    literal_mask_loss: bool = False
    class_weighting: str = "image"  # mask class weights per image or from the whole train set

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self) -> None:
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("learning rates must satisfy lr_start >= lr_end > 0")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.class_weighting not in CLASS_WEIGHTING:
            raise ValueError(f"class_weighting must be one of {CLASS_WEIGHTING}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @property
    def effective_momentum(self) -> float:
        return self.momentum if self.optimizer == "sgd_momentum" else 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """lr_start * (lr_end / lr_start) ** (t / (T - 1)); both endpoints exact."""
    T = config.total_iterations
    if not 0 <= iteration < T:
        raise ValueError(f"iteration {iteration} outside [0, {T})")
    if iteration == 0:
        return float(config.lr_start)
    if iteration == T - 1:
        return float(config.lr_end)
    return float(config.lr_start * (config.lr_end / config.lr_start) ** (iteration / (T - 1)))


# -- optimiser ------------------------------------------------------------------

@dataclass
class OptimizerState:
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0  # next iteration to run

    @classmethod
    def fresh(cls, model: Model, momentum: float) -> "OptimizerState":
        return cls(momentum, {k: np.zeros_like(v) for k, v in model.params.items()}, 0)


def _check_finite_grads(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name, "non-finite gradient")


def batch_labels(batch: Minibatch) -> dict:
    return {"masks": batch.masks, "joints": batch.joints, "bases": batch.bases,
            "types": batch.types}


def train_step(model: Model, batch: Minibatch, lr: float, state: OptimizerState,
               weights: LossWeights = LossWeights(), literal: bool = False,
               mask_weights: ClassWeights | None = None):
    """One forward/backward pass and in-place update; returns (state, pre-update loss).

    Update rule: v <- mu * v - lr * g; p <- p + v. With mu = 0 this is exactly
    p <- p - lr * g.
    """
    out = model.forward(batch.nchw(model.dtype))
    for name, arr in out.as_dict().items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"output.{name}")
    breakdown, grads = combined_loss(out.as_dict(), batch_labels(batch), weights, literal,
                                     mask_weights)
    if not math.isfinite(breakdown.l_final):
        raise NonFiniteError("loss", f"non-finite loss {breakdown.as_dict()}")
    model.backward(grads)
    _check_finite_grads(model.grads)
    mu = model.dtype.type(state.momentum)
    step = model.dtype.type(lr)
    for name, p in model.params.items():
        v = state.velocity[name]
        v *= mu
        with np.errstate(over="ignore", invalid="ignore"):
            v -= step * model.grads[name]
            p += v
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(name, "parameter overflowed in the update")
    state.iteration += 1
    return state, breakdown


def dataset_loss(model: Model, data: SampleArrays, weights: LossWeights = LossWeights(),
                 literal: bool = False, batch_size: int = 64,
                 mask_weights: ClassWeights | None = None) -> LossBreakdown:
    """Sample-weighted mean of the combined loss over a whole dataset, in fixed order."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    totals = np.zeros(5)
    for start in range(0, len(data), batch_size):
        batch = make_minibatch(data, np.arange(start, min(start + batch_size, len(data))))
        out = model.forward(batch.nchw(model.dtype))
        b, _ = combined_loss(out.as_dict(), batch_labels(batch), weights, literal, mask_weights)
        totals += len(batch) * np.array([b.l_mask, b.l_jcoords, b.l_bcoords, b.l_type, b.l_final])
    m = totals / len(data)
    return LossBreakdown(*(float(v) for v in m))


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    k = batches_per_epoch(n, batch_size)
    order = epoch_order(n, seed, iteration // k)
    slot = iteration % k
    return order[slot * batch_size:(slot + 1) * batch_size]


# -- log --------------------------------------------------------------------------

@dataclass
class TrainRecord:
    iteration: int
    lr: float
    l_final: float
    l_mask: float
    l_jcoords: float
    l_bcoords: float
    l_type: float
    test_l_final: float | None = None


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        if self.records:
            last = self.records[-1]
            if rec.iteration <= last.iteration:
                raise ValueError("iterations must be strictly increasing")
            if rec.lr > last.lr:
                raise ValueError("learning rate must be non-increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def test_curve(self) -> list[tuple[int, float]]:
        return [(r.iteration, r.test_l_final) for r in self.records if r.test_l_final is not None]

    def truncate(self, next_iteration: int) -> "TrainLog":
        return TrainLog([r for r in self.records if r.iteration < next_iteration])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.records:
                row = asdict(r)
                w.writerow([r.iteration] + [repr(row[f]) for f in LOG_FIELDS[1:-1]]
                           + ["" if r.test_l_final is None else repr(r.test_l_final)])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != LOG_FIELDS:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                test = row["test_l_final"]
                out.append(TrainRecord(int(row["iteration"]),
                                       *(float(row[f]) for f in LOG_FIELDS[1:-1]),
                                       float(test) if test else None))
        return out


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(directory, model: Model, state: OptimizerState, config: TrainConfig,
                    train_log: TrainLog) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / PARAMS_FILE, model.params)
    save_params(d / VELOCITY_FILE, state.velocity)
    model.config.save(d / MODEL_CONFIG_FILE)
    train_log.write_csv(d / LOG_FILE)
    (d / STATE_FILE).write_text(json.dumps(
        {"next_iteration": state.iteration, "dtype": model.dtype.str,
         "train_config": config.to_json()}, indent=2, sort_keys=True))


def load_model(directory, dtype=None) -> Model:
    d = Path(directory)
    if not (d / PARAMS_FILE).exists():
        raise FileNotFoundError(f"no checkpoint at {d / PARAMS_FILE}")
    config = ModelConfig.load(d / MODEL_CONFIG_FILE)
    params = load_params(d / PARAMS_FILE)
    if dtype is None:
        dtype = next(iter(params.values())).dtype
    return Model(config, params, dtype=dtype)


def load_checkpoint(directory):
    """Returns (model, optimizer state, train config, log truncated to the checkpoint)."""
    d = Path(directory)
    if not (d / STATE_FILE).exists():
        raise FileNotFoundError(f"no resume state at {d / STATE_FILE}")
    meta = json.loads((d / STATE_FILE).read_text())
    config = TrainConfig.from_json(meta["train_config"])
    model = load_model(d, np.dtype(meta["dtype"]))
    velocity = {k: v.astype(model.dtype) for k, v in load_params(d / VELOCITY_FILE).items()}
    state = OptimizerState(config.effective_momentum, velocity, int(meta["next_iteration"]))
    train_log = TrainLog.read_csv(d / LOG_FILE).truncate(state.iteration)
    return model, state, config, train_log


# -- training loop ---------------------------------------------------------------

def train(model: Model, train_set: SampleArrays, test_set: SampleArrays, config: TrainConfig,
          out_dir=None, resume: bool = False, progress=None):
    """Run config.total_iterations steps; returns (model, TrainLog).

    Test-set L_final is evaluated before the update at every multiple of
    `checkpoint_every` and at the last iteration. When `out_dir` is set, a
    checkpoint is written after every `checkpoint_every` updates and at the
    end; with `resume`, training continues from the checkpoint found there.
    """
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("training and test sets must be non-empty")
    config.validate()
    if resume:
        if out_dir is None:
            raise ValueError("resume needs an output directory")
        model, state, saved, train_log = load_checkpoint(out_dir)
        if saved.to_json() != config.to_json():
            raise ValueError("resume config differs from the checkpointed config")
    else:
        state = OptimizerState.fresh(model, config.effective_momentum)
        train_log = TrainLog()
    T = config.total_iterations
    n = len(train_set)
    mask_weights = class_weights(train_set.masks) if config.class_weighting == "dataset" else None
    for t in range(state.iteration, T):
        lr = lr_at(t, config)
        test_loss = None
        if t % config.checkpoint_every == 0 or t == T - 1:
            test_loss = dataset_loss(model, test_set, config.weights, config.literal_mask_loss,
                                     config.batch_size, mask_weights).l_final
        batch = make_minibatch(train_set, batch_indices(n, config.batch_size, config.seed, t))
        state, b = train_step(model, batch, lr, state, config.weights, config.literal_mask_loss,
                              mask_weights)
        train_log.append(TrainRecord(t, lr, b.l_final, b.l_mask, b.l_jcoords, b.l_bcoords,
                                     b.l_type, test_loss))
        if progress is not None:
            progress(train_log.records[-1])
        if out_dir is not None and (state.iteration % config.checkpoint_every == 0
                                    or state.iteration == T):
            save_checkpoint(out_dir, model, state, config, train_log)
    return model, train_log
