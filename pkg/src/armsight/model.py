"""Two-branch multi-objective CNN.

    image -> trunk convs -> (A) dilated mask convs -> 1x1 conv -> sigmoid mask
                         -> (B) [maxpool, dilated conv]* -> flatten -> fc_reg --+
    mask conv #tap -> maxpool -> flatten -> fc_skip ------------------------(sum)
    sum -> relu -> fc_hidden -> relu -> joints (18) | base (3) | softmax type (3)
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import Conv2D, Dense, LayerSpec, MaxPool2D, ReLU, Sigmoid, Softmax, ShapeError

N_JOINT_COORDS = 18
N_BASE_COORDS = 3
N_TYPES = 3


@dataclass
class ModelConfig:
    resolution: tuple[int, int] = (64, 53)  # (W, H)
    trunk_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    mask_channels: int = 16
    mask_dilations: tuple[int, ...] = (1, 2, 4, 8)
    reg_convs: tuple[tuple[int, int], ...] = ((16, 2), (32, 1))  # (channels, dilation)
    reg_pool: int = 2
    reg_fc: int = 128
    skip_tap: int = 4
    skip_pool: int = 4
    skip_fc: int = 128
    hidden_fc: int = 64

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        self.mask_dilations = tuple(int(d) for d in self.mask_dilations)
        self.reg_convs = tuple((int(c), int(d)) for c, d in self.reg_convs)

    def validate(self) -> None:
        if len(self.mask_dilations) < 4:
            raise ValueError("mask branch needs at least 4 convolutional layers")
        if not 1 <= self.skip_tap <= len(self.mask_dilations):
            raise ValueError(f"skip tap index {self.skip_tap} does not exist in the mask branch")
        if self.skip_tap != 4:
            raise ValueError("skip tap index must be 4")
        if not self.trunk_channels:
            raise ValueError("trunk needs at least one convolution")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if any(d < 1 for d in self.mask_dilations):
            raise ValueError("dilation must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass
class ModelOutput:
    mask_prob: np.ndarray   # (B, H, W)
    joints: np.ndarray      # (B, 18)
    base: np.ndarray        # (B, 3)
    type_prob: np.ndarray   # (B, 3)

    def as_dict(self) -> dict:
        return {"mask_prob": self.mask_prob, "joints": self.joints,
                "base": self.base, "type_prob": self.type_prob}

    def take(self, idx) -> "ModelOutput":
        return ModelOutput(self.mask_prob[idx], self.joints[idx], self.base[idx],
                           self.type_prob[idx])


def layer_specs(config: ModelConfig) -> tuple[list[LayerSpec], dict]:
    """All parameterised layer specs plus the shapes they see, checked at build time."""
    config.validate()
    W, H = config.resolution
    k = config.kernel
    specs = []
    shapes = {"input": (3, H, W)}

    def pooled(h, w, p):
        h2, w2 = (h - p) // p + 1, (w - p) // p + 1
        if h2 < 1 or w2 < 1:
            raise ShapeError(f"pooling {p} leaves no spatial extent at {h}x{w}")
        return h2, w2

    c = 3
    for i, out in enumerate(config.trunk_channels, 1):
        specs.append(LayerSpec("conv", f"trunk.conv{i}", c, out, k))
        c = out
    shapes["trunk"] = (c, H, W)
    trunk_c = c

    for i, d in enumerate(config.mask_dilations, 1):
        specs.append(LayerSpec("conv", f"mask.conv{i}", c, config.mask_channels, k, dilation=d))
        c = config.mask_channels
    specs.append(LayerSpec("conv", "mask.out", c, 1, 1))
    shapes["mask"] = (1, H, W)

    c, h, w = trunk_c, H, W
    for i, (out, d) in enumerate(config.reg_convs, 1):
        h, w = pooled(h, w, config.reg_pool)
        specs.append(LayerSpec("conv", f"reg.conv{i}", c, out, k, dilation=d))
        c = out
    reg_flat = c * h * w
    shapes["reg"] = (c, h, w)
    specs.append(LayerSpec("dense", "reg.fc", units_in=reg_flat, units_out=config.reg_fc))

    sh, sw = pooled(H, W, config.skip_pool)
    skip_flat = config.mask_channels * sh * sw
    shapes["skip"] = (config.mask_channels, sh, sw)
    specs.append(LayerSpec("dense", "skip.fc", units_in=skip_flat, units_out=config.skip_fc))
    if config.skip_fc != config.reg_fc:
        raise ShapeError("summed fully connected layers must have equal width")

    specs.append(LayerSpec("dense", "head.hidden", units_in=config.reg_fc, units_out=config.hidden_fc))
    specs.append(LayerSpec("dense", "head.joints", units_in=config.hidden_fc, units_out=N_JOINT_COORDS))
    specs.append(LayerSpec("dense", "head.base", units_in=config.hidden_fc, units_out=N_BASE_COORDS))
    specs.append(LayerSpec("dense", "head.type", units_in=config.hidden_fc, units_out=N_TYPES))
    return specs, shapes


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.specs, self.shapes = layer_specs(config)
        expected = {f"{s.name}.{p}": shp for s in self.specs for p, shp in s.param_shapes().items()}
        if set(params) != set(expected):
            raise ValueError(f"parameter blocks {sorted(params)} do not match the config")
        for name, shp in expected.items():
            if params[name].shape != shp:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shp}")
        self.params = {name: np.ascontiguousarray(params[name], dtype=self.dtype) for name in expected}
        self.grads: dict[str, np.ndarray] = {}
        self._build_layers()

    def _build_layers(self):
        by_name = {s.name: s for s in self.specs}
        p, g = self.params, self.grads
        cfg = self.config
        self.trunk = []
        for i in range(1, len(cfg.trunk_channels) + 1):
            self.trunk += [Conv2D(by_name[f"trunk.conv{i}"], p, g, need_input_grad=i > 1), ReLU()]
        self.mask_layers = []
        for i in range(1, len(cfg.mask_dilations) + 1):
            self.mask_layers.append((Conv2D(by_name[f"mask.conv{i}"], p, g), ReLU()))
        self.mask_out = Conv2D(by_name["mask.out"], p, g)
        self.mask_sigmoid = Sigmoid()
        pool = LayerSpec("maxpool", "pool", kernel=cfg.reg_pool, stride=cfg.reg_pool)
        self.reg_layers = []
        for i in range(1, len(cfg.reg_convs) + 1):
            self.reg_layers.append((MaxPool2D(pool), Conv2D(by_name[f"reg.conv{i}"], p, g), ReLU()))
        self.reg_fc = Dense(by_name["reg.fc"], p, g)
        self.skip_pool = MaxPool2D(LayerSpec("maxpool", "skip.pool", kernel=cfg.skip_pool,
                                             stride=cfg.skip_pool))
        self.skip_fc = Dense(by_name["skip.fc"], p, g)
        self.sum_relu = ReLU()
        self.hidden = Dense(by_name["head.hidden"], p, g)
        self.hidden_relu = ReLU()
        self.head_joints = Dense(by_name["head.joints"], p, g)
        self.head_base = Dense(by_name["head.base"], p, g)
        self.head_type = Dense(by_name["head.type"], p, g)
        self.type_softmax = Softmax()

    def regime(self) -> list[np.ndarray]:
        """ReLU signs and pooling winners of the last forward pass."""
        layers = [l for l in self.trunk if isinstance(l, ReLU)]
        layers += [act for _, act in self.mask_layers]
        for pool, _, act in self.reg_layers:
            layers += [pool, act]
        layers += [self.skip_pool, self.sum_relu, self.hidden_relu]
        return [l.regime() for l in layers]

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, images) -> ModelOutput:
        images = np.asarray(images)
        W, H = self.config.resolution
        if images.ndim != 4 or images.shape[1:] != (3, H, W):
            raise ShapeError(f"expected images of shape (B, 3, {H}, {W}), got {images.shape}")
        x = images.astype(self.dtype, copy=False)
        for layer in self.trunk:
            x = layer.forward(x)
        trunk = x

        m = trunk
        tap = None
        for i, (conv, act) in enumerate(self.mask_layers, 1):
            m = act.forward(conv.forward(m))
            if i == self.config.skip_tap:
                tap = m
        mask_prob = self.mask_sigmoid.forward(self.mask_out.forward(m))[:, 0]

        r = trunk
        for pool, conv, act in self.reg_layers:
            r = act.forward(conv.forward(pool.forward(r)))
        self._reg_shape = r.shape
        reg = self.reg_fc.forward(r.reshape(len(r), -1))

        s = self.skip_pool.forward(tap)
        self._skip_shape = s.shape
        skip = self.skip_fc.forward(s.reshape(len(s), -1))

        h = self.sum_relu.forward(nn.add_forward(reg, skip))
        h = self.hidden_relu.forward(self.hidden.forward(h))
        joints = self.head_joints.forward(h)
        base = self.head_base.forward(h)
        type_prob = self.type_softmax.forward(self.head_type.forward(h))
        return ModelOutput(mask_prob, joints, base, type_prob)

    def backward(self, grads: dict) -> dict[str, np.ndarray]:
        """Backpropagate d loss / d outputs; fills and returns `self.grads`."""
        dt = self.dtype
        g_type = self.type_softmax.backward(np.asarray(grads["type_prob"], dtype=dt))
        g_h = self.head_type.backward(g_type)
        g_h = g_h + self.head_base.backward(np.asarray(grads["base"], dtype=dt))
        g_h = g_h + self.head_joints.backward(np.asarray(grads["joints"], dtype=dt))
        g_h = self.hidden.backward(self.hidden_relu.backward(g_h))
        g_sum = self.sum_relu.backward(g_h)
        g_reg, g_skip = nn.add_backward(g_sum)

        g_s = self.skip_fc.backward(g_skip).reshape(self._skip_shape)
        g_tap = self.skip_pool.backward(g_s)

        g_r = self.reg_fc.backward(g_reg).reshape(self._reg_shape)
        for pool, conv, act in reversed(self.reg_layers):
            g_r = pool.backward(conv.backward(act.backward(g_r)))

        g_m = np.asarray(grads["mask_prob"], dtype=dt)[:, None]
        g_m = self.mask_out.backward(self.mask_sigmoid.backward(g_m))
        for i in range(len(self.mask_layers), 0, -1):
            conv, act = self.mask_layers[i - 1]
            if i == self.config.skip_tap:
                g_m = g_m + g_tap
            g_m = conv.backward(act.backward(g_m))

        g_t = g_m + g_r
        for layer in reversed(self.trunk):
            g_t = layer.backward(g_t)
        return self.grads

    def forward_timed(self, image):
        """Single forward pass with its wall-clock duration in seconds."""
        image = np.asarray(image)
        if image.ndim == 3:
            image = image[None]
        start = time.perf_counter()
        out = self.forward(image)
        return out, time.perf_counter() - start

    def predict(self, images, batch_size: int = 64) -> ModelOutput:
        """Forward in chunks; returns concatenated outputs."""
        parts = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return ModelOutput(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                             ("mask_prob", "joints", "base", "type_prob")))


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    config = config or ModelConfig()
    specs, _ = layer_specs(config)
    return Model(config, nn.init_parameters(specs, seed, dtype=np.float64), dtype=dtype)


def toy_config(resolution=(16, 13), **overrides) -> ModelConfig:
    """A very small network with every structural element, for gradient checks."""
    kw = dict(resolution=resolution, trunk_channels=(3, 4), mask_channels=4,
              mask_dilations=(1, 2, 1, 2), reg_convs=((4, 2), (5, 1)), reg_fc=6,
              skip_pool=4, skip_fc=6, hidden_fc=5)
    kw.update(overrides)
    return ModelConfig(**kw)


def check_model_gradients(config: ModelConfig | None = None, seed: int = 0, batch: int = 2,
                          h: float = 1e-4, tolerance: float = 1e-4, max_coords: int = 50,
                          bias_jitter: float = 0.1, literal: bool = False) -> nn.GradCheckReport:
    """Finite-difference check of the whole network plus combined loss in float64.

    Biases start at zero, which puts units with an all-zero receptive field
    exactly on a ReLU kink where central differences are meaningless; they are
    jittered to small random values first. Probes whose finite-difference
    step still crosses a ReLU or pooling boundary are refined or skipped.
    """
    from .losses import combined_loss  # local import: losses does not depend on the model

    config = config or toy_config()
    model = build_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    for name, p in model.params.items():
        if name.endswith(".b"):
            p[:] = rng.uniform(-bias_jitter, bias_jitter, p.shape)
    W, H = config.resolution
    x = rng.uniform(0.0, 1.0, (batch, 3, H, W))
    masks = np.clip((rng.uniform(size=(batch, H, W)) < 0.2).astype(float), 1e-7, 1 - 1e-7)
    labels = {"masks": masks,
              "joints": rng.normal(0.0, 0.5, (batch, N_JOINT_COORDS)),
              "bases": rng.normal(0.0, 0.5, (batch, N_BASE_COORDS)),
              "types": np.eye(N_TYPES)[rng.integers(0, N_TYPES, batch)]}

    def loss_and_grads():
        out = model.forward(x)
        breakdown, g = combined_loss(out.as_dict(), labels, literal=literal)
        model.backward(g)
        return breakdown.l_final, model.grads

    def loss_only():
        return combined_loss(model.forward(x).as_dict(), labels, literal=literal)[0].l_final

    return nn.gradient_check(model.params, loss_and_grads, h=h, tolerance=tolerance,
                             max_coords=max_coords, seed=seed, loss_only=loss_only,
                             regime=model.regime)
