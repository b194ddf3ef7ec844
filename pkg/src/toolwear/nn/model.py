"""Run-number regression CNN: four conv blocks, then FC(10) -> ReLU -> FC(1)."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class Architecture:
    input_bins: int = 513  # frequency bins of the stored spectrogram
    input_frames: int = 128
    freq_pool: int = 4  # average-pool factor on the frequency axis; 1 = full resolution
    channels: tuple[int, ...] = (8, 16, 32, 32)
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: int = 2
    pool_kind: str = "max"  # max | avg
    norm_kind: str = "layer"  # layer | batch
    fc_hidden: int = 10
    leaky_slope: float = 0.01
    dropout: float = 0.1
    n_total: int = 350

    def __post_init__(self):
        if self.pool_kind not in ("max", "avg"):
            raise ValueError(f"pool_kind must be 'max' or 'avg', got {self.pool_kind!r}")
        if self.norm_kind not in ("layer", "batch"):
            raise ValueError(f"norm_kind must be 'layer' or 'batch', got {self.norm_kind!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.fc_hidden < 1 or len(self.channels) < 1:
            raise ValueError("empty layer")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.feature_shapes()  # raises if the input collapses

    @property
    def net_input(self) -> tuple[int, int]:
        return self.input_bins // self.freq_pool, self.input_frames

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) after each conv block."""
        h, w = self.net_input
        shapes = []
        for c in self.channels:
            h = L.conv_output_size(h, self.kernel, self.stride, self.pad)
            w = L.conv_output_size(w, self.kernel, self.stride, self.pad)
            if h < self.pool or w < self.pool:
                raise ValueError(f"input {self.net_input} too small for {len(self.channels)} blocks")
            h, w = h // self.pool, w // self.pool
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_features(self) -> int:
        c, h, w = self.feature_shapes()[-1]
        return c * h * w

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        shapes = OrderedDict()
        c_in = 1
        for i, c in enumerate(self.channels):
            shapes[f"conv{i}.w"] = (c, c_in, self.kernel, self.kernel)
            shapes[f"conv{i}.b"] = (c,)
            shapes[f"norm{i}.gain"] = (c,)
            shapes[f"norm{i}.shift"] = (c,)
            c_in = c
        shapes["fc1.w"] = (self.fc_hidden, self.flat_features)
        shapes["fc1.b"] = (self.fc_hidden,)
        shapes["fc2.w"] = (1, self.fc_hidden)
        shapes["fc2.b"] = (1,)
        return shapes

    def buffer_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        shapes = OrderedDict()
        if self.norm_kind == "batch":
            for i, c in enumerate(self.channels):
                shapes[f"norm{i}.running_mean"] = (c,)
                shapes[f"norm{i}.running_var"] = (c,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ModelParams:
    arch: Architecture
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch,
                           OrderedDict((k, v.copy()) for k, v in self.params.items()),
                           OrderedDict((k, v.copy()) for k, v in self.buffers.items()))

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def init_params(arch: Architecture, seed: int = 0) -> ModelParams:
    """He-normal weights, zero conv biases, unit norm gains, except:

    * the last block's norm gain starts at 0.1, so that Adam's fixed-size
      steps on the wide FC1 layer cannot push every hidden ReLU negative at
      once (with gain 1 they all die within the first epoch at lr 0.01);
    * FC1 biases start at 0.1 to keep the hidden units active;
    * the FC2 bias starts at 0.5, the middle of the normalized target range.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in arch.param_shapes().items():
        kind = name.split(".")[-1]
        if kind == "w":
            fan_in = int(np.prod(shape[1:]))
            gain = 2.0 / (1 + arch.leaky_slope**2) if name.startswith("conv") else 2.0
            params[name] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        elif kind == "gain":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    params[f"norm{len(arch.channels) - 1}.gain"][:] = 0.1
    params["fc1.b"][:] = 0.1
    params["fc2.b"][:] = 0.5
    buffers = OrderedDict()
    for name, shape in arch.buffer_shapes().items():
        buffers[name] = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
    return ModelParams(arch, params, buffers)


def prepare_input(values: np.ndarray, arch: Architecture) -> np.ndarray:
    """Spectrogram(s) in dB -> network input (B, H, W, 1) scaled to [0, 1].

    The frequency axis is average-pooled by ``arch.freq_pool``; leftover top
    bins (the Nyquist bin for 513) are dropped.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.shape[1:] != (arch.input_bins, arch.input_frames):
        raise L.ShapeError(f"spectrogram shape {v.shape[1:]} does not match model input "
                           f"({arch.input_bins}, {arch.input_frames})")
    h = arch.input_bins // arch.freq_pool
    v = v[:, :h * arch.freq_pool].reshape(v.shape[0], h, arch.freq_pool, v.shape[2]).mean(axis=2)
    return (v / 90.0)[..., None]


def forward(model: ModelParams, x: np.ndarray, mode: str = "eval", rng=None):
    """Network output (B,) for prepared input ``x`` plus the backward cache."""
    a = model.arch
    p = model.params
    if x.ndim != 4 or x.shape[1:] != a.net_input + (1,):
        raise L.ShapeError(f"network input must be (B, {a.net_input[0]}, {a.net_input[1]}, 1), got {x.shape}")
    rng = np.random.default_rng(rng) if mode == "train" else None
    caches = []
    h = x
    for i in range(len(a.channels)):
        h, c_conv = L.conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"], a.stride, a.pad)
        h, c_act = L.leaky_relu_forward(h, a.leaky_slope)
        if a.pool_kind == "max":
            h, c_pool = L.max_pool2d_forward(h, a.pool)
        else:
            h, c_pool = L.avg_pool2d_forward(h, a.pool)
        if a.norm_kind == "layer":
            h, c_norm = L.layer_norm_forward(h, p[f"norm{i}.gain"], p[f"norm{i}.shift"])
        else:
            h, c_norm = L.batch_norm_forward(h, p[f"norm{i}.gain"], p[f"norm{i}.shift"],
                                             model.buffers[f"norm{i}.running_mean"],
                                             model.buffers[f"norm{i}.running_var"], mode)
        h, c_drop = L.dropout_forward(h, a.dropout, mode, rng)
        caches.append((c_conv, c_act, c_pool, c_norm, c_drop))
    flat_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    h, c_fc1 = L.linear_forward(h, p["fc1.w"], p["fc1.b"])
    h, c_relu = L.relu_forward(h)
    out, c_fc2 = L.linear_forward(h, p["fc2.w"], p["fc2.b"])
    return out[:, 0], (caches, flat_shape, c_fc1, c_relu, c_fc2)


def backward(model: ModelParams, cache, dout: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Gradients of every parameter given d(loss)/d(output), ``dout`` shape (B,)."""
    a = model.arch
    caches, flat_shape, c_fc1, c_relu, c_fc2 = cache
    g = OrderedDict()
    dh, g["fc2.w"], g["fc2.b"] = L.linear_backward(dout[:, None], c_fc2)
    dh = L.relu_backward(dh, c_relu)
    dh, g["fc1.w"], g["fc1.b"] = L.linear_backward(dh, c_fc1)
    dh = dh.reshape(flat_shape)
    for i in reversed(range(len(a.channels))):
        c_conv, c_act, c_pool, c_norm, c_drop = caches[i]
        dh = L.dropout_backward(dh, c_drop)
        if a.norm_kind == "layer":
            dh, g[f"norm{i}.gain"], g[f"norm{i}.shift"] = L.layer_norm_backward(dh, c_norm)
        else:
            dh, g[f"norm{i}.gain"], g[f"norm{i}.shift"] = L.batch_norm_backward(dh, c_norm)
        if a.pool_kind == "max":
            dh = L.max_pool2d_backward(dh, c_pool)
        else:
            dh = L.avg_pool2d_backward(dh, c_pool)
        dh = L.leaky_relu_backward(dh, c_act)
        dh, g[f"conv{i}.w"], g[f"conv{i}.b"] = L.conv2d_backward(dh, c_conv, need_dx=i > 0)
    return OrderedDict((k, g[k]) for k in model.params)


def predict(model: ModelParams, values: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode normalized outputs for a stack of spectrograms (B, bins, frames)."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None]
    out = []
    for start in range(0, len(values), batch_size):
        y, _ = forward(model, prepare_input(values[start:start + batch_size], model.arch), "eval")
        out.append(y)
    return np.concatenate(out)
