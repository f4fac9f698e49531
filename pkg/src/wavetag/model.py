"""Two-stage residual network over raw waveforms with multi-level attention.

Front end: a 1D residual feature extractor (stem conv k=80 s=4 + maxpool,
four stages of basic blocks) whose output (B, C, 1, T) is relabelled as a
2D frequency-like map (B, 1, C, T). Back end: a bottleneck residual
classifier; prediction heads tap the outputs of stages 2, 3 and 4. Each
head pools frames over the height axis, runs two attention modules (one
on the raw frame embeddings, one after a two-layer FC transform), and
maps their concatenated outputs through a final sigmoid layer to class
probabilities. The network output is the arithmetic mean of the three
level predictions.

``width_scale`` shrinks every channel width (rounded, floor of 4) so the
identical topology runs at desk scale; the full-scale defaults map a
1 x 160000 waveform to a 128 x 1 x 2500 front-end output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import diffops as F
from .diffops import Tensor

FULL_SCALE_CLIP_LEN = 160_000


class ConfigError(ValueError):
    """Model configuration that cannot produce a valid network."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrontEndConfig:
    """1D residual feature extractor (about 18 weighted layers)."""

    stem_kernel: int = 80
    stem_stride: int = 4
    stem_channels: int = 32
    pool_kernel: int = 4
    pool_stride: int = 4
    stage_channels: tuple[int, ...] = (32, 64, 128, 128)
    # Stage strides multiply with the stem and pool strides to a cumulative
    # stride of 64, which lands clip_len=160000 exactly on T=2500.
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    blocks_per_stage: int = 2

    @property
    def cumulative_stride(self) -> int:
        return self.stem_stride * self.pool_stride * int(np.prod(self.stage_strides))


@dataclass(frozen=True)
class BackEndConfig:
    """2D bottleneck residual classifier (ResNet-50-style stage plan)."""

    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pad: int = 3
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_pad: int = 1
    blocks_per_stage: tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: tuple[int, ...] = (256, 512, 1024, 2048)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)


@dataclass(frozen=True)
class AttentionHeadConfig:
    hidden: int = 600


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    clip_len: int = FULL_SCALE_CLIP_LEN
    width_scale: float = 1.0
    frontend: FrontEndConfig = field(default_factory=FrontEndConfig)
    backend: BackEndConfig = field(default_factory=BackEndConfig)
    attention: AttentionHeadConfig = field(default_factory=AttentionHeadConfig)

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.attention.hidden < 1:
            raise ConfigError(f"attention hidden size must be >= 1, got {self.attention.hidden}")
        if self.width_scale <= 0:
            raise ConfigError(f"width_scale must be positive, got {self.width_scale}")
        stride = self.frontend.cumulative_stride
        if self.clip_len <= 0 or self.clip_len % stride != 0:
            raise ConfigError(
                f"clip_len {self.clip_len} not divisible by the cumulative front-end stride {stride}"
            )

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "clip_len": self.clip_len,
            "width_scale": self.width_scale,
            "frontend": {
                "stem_kernel": self.frontend.stem_kernel,
                "stem_stride": self.frontend.stem_stride,
                "stem_channels": self.frontend.stem_channels,
                "pool_kernel": self.frontend.pool_kernel,
                "pool_stride": self.frontend.pool_stride,
                "stage_channels": list(self.frontend.stage_channels),
                "stage_strides": list(self.frontend.stage_strides),
                "blocks_per_stage": self.frontend.blocks_per_stage,
            },
            "backend": {
                "stem_channels": self.backend.stem_channels,
                "stem_kernel": self.backend.stem_kernel,
                "stem_stride": self.backend.stem_stride,
                "stem_pad": self.backend.stem_pad,
                "pool_kernel": self.backend.pool_kernel,
                "pool_stride": self.backend.pool_stride,
                "pool_pad": self.backend.pool_pad,
                "blocks_per_stage": list(self.backend.blocks_per_stage),
                "stage_channels": list(self.backend.stage_channels),
                "stage_strides": list(self.backend.stage_strides),
            },
            "attention": {"hidden": self.attention.hidden},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fe = d.get("frontend", {})
        be = d.get("backend", {})
        att = d.get("attention", {})
        return cls(
            n_classes=d["n_classes"],
            clip_len=d.get("clip_len", FULL_SCALE_CLIP_LEN),
            width_scale=d.get("width_scale", 1.0),
            frontend=FrontEndConfig(
                stem_kernel=fe.get("stem_kernel", 80),
                stem_stride=fe.get("stem_stride", 4),
                stem_channels=fe.get("stem_channels", 32),
                pool_kernel=fe.get("pool_kernel", 4),
                pool_stride=fe.get("pool_stride", 4),
                stage_channels=tuple(fe.get("stage_channels", (32, 64, 128, 128))),
                stage_strides=tuple(fe.get("stage_strides", (1, 2, 2, 1))),
                blocks_per_stage=fe.get("blocks_per_stage", 2),
            ),
            backend=BackEndConfig(
                stem_channels=be.get("stem_channels", 64),
                stem_kernel=be.get("stem_kernel", 7),
                stem_stride=be.get("stem_stride", 2),
                stem_pad=be.get("stem_pad", 3),
                pool_kernel=be.get("pool_kernel", 3),
                pool_stride=be.get("pool_stride", 2),
                pool_pad=be.get("pool_pad", 1),
                blocks_per_stage=tuple(be.get("blocks_per_stage", (3, 4, 6, 3))),
                stage_channels=tuple(be.get("stage_channels", (256, 512, 1024, 2048))),
                stage_strides=tuple(be.get("stage_strides", (1, 2, 2, 2))),
            ),
            attention=AttentionHeadConfig(hidden=att.get("hidden", 600)),
        )


def toy_config(n_classes: int = 8, clip_len: int = 16_000, width_scale: float = 0.25,
               attention_hidden: int = 128) -> ModelConfig:
    """Desk-scale preset: same topology, narrower channels, shorter clips."""
    return ModelConfig(
        n_classes=n_classes,
        clip_len=clip_len,
        width_scale=width_scale,
        attention=AttentionHeadConfig(hidden=attention_hidden),
    )


def scaled_channels(base: int, width_scale: float) -> int:
    return max(4, int(round(base * width_scale)))


# ---------------------------------------------------------------------------
# shape plan
# ---------------------------------------------------------------------------

def conv_out_len(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ShapePlan:
    """Expected activation shapes, asserted against runtime shapes."""

    frontend: tuple[int, int, int]  # (C, 1, T)
    stages: tuple[tuple[int, int, int], ...]  # (C, H, W) for stages 1..4


def plan_shapes(cfg: ModelConfig) -> ShapePlan:
    fe, be, w = cfg.frontend, cfg.backend, cfg.width_scale
    stem_pad = (fe.stem_kernel - fe.stem_stride) // 2
    length = conv_out_len(cfg.clip_len, fe.stem_kernel, fe.stem_stride, stem_pad)
    length = conv_out_len(length, fe.pool_kernel, fe.pool_stride, 0)
    for stride in fe.stage_strides:
        length = conv_out_len(length, 3, stride, 1)
    if length < 1:
        raise ConfigError(f"clip_len {cfg.clip_len} collapses the front-end time axis")
    c_front = scaled_channels(fe.stage_channels[-1], w)

    height, width = c_front, length
    height = conv_out_len(height, be.stem_kernel, be.stem_stride, be.stem_pad)
    width = conv_out_len(width, be.stem_kernel, be.stem_stride, be.stem_pad)
    height = conv_out_len(height, be.pool_kernel, be.pool_stride, be.pool_pad)
    width = conv_out_len(width, be.pool_kernel, be.pool_stride, be.pool_pad)
    stages = []
    for channels, stride in zip(be.stage_channels, be.stage_strides):
        height = conv_out_len(height, 3, stride, 1)
        width = conv_out_len(width, 3, stride, 1)
        if height < 1 or width < 1:
            raise ConfigError("back-end spatial extent collapsed; clip_len or widths too small")
        stages.append((scaled_channels(channels, w), height, width))
    return ShapePlan(frontend=(c_front, 1, length), stages=tuple(stages))


# ---------------------------------------------------------------------------
# parameter store and layers
# ---------------------------------------------------------------------------

class _Store:
    """Named trainable params plus named non-trainable buffers."""

    def __init__(self, rng: np.random.Generator, dtype: np.dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def weight(self, name: str, shape: tuple[int, ...]) -> Tensor:
        # He-style uniform: bound sqrt(6 / fan_in), fan_in = prod(shape[1:])
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self._register(name, Tensor(data, requires_grad=True))

    def zeros_param(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._register(name, Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True))

    def ones_param(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._register(name, Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True))

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers or name in self.params:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self.buffers[name] = value
        return value

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self.params[name] = t
        return t


class _Conv1d:
    def __init__(self, store: _Store, name: str, cin: int, cout: int, kernel: int,
                 stride: int = 1, pad: int = 0):
        self.stride, self.pad = stride, pad
        self.weight = store.weight(f"{name}.weight", (cout, cin, kernel))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, None, stride=self.stride, pad=self.pad)


class _Conv2d:
    def __init__(self, store: _Store, name: str, cin: int, cout: int, kernel: int,
                 stride: int = 1, pad: int = 0):
        self.stride, self.pad = (stride, stride), (pad, pad)
        self.weight = store.weight(f"{name}.weight", (cout, cin, kernel, kernel))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, None, stride=self.stride, pad=self.pad)


class _BatchNorm:
    def __init__(self, store: _Store, name: str, channels: int):
        self.gamma = store.ones_param(f"{name}.gamma", (channels,))
        self.beta = store.zeros_param(f"{name}.beta", (channels,))
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(channels, dtype=store.dtype))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(channels, dtype=store.dtype))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, train)


class _Linear:
    def __init__(self, store: _Store, name: str, din: int, dout: int):
        self.weight = store.weight(f"{name}.weight", (dout, din))
        self.bias = store.zeros_param(f"{name}.bias", (dout,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class _BasicBlock1d:
    """conv3-BN-ReLU-conv3-BN with identity or strided 1x1 projection."""

    def __init__(self, store: _Store, name: str, cin: int, cout: int, stride: int):
        self.conv1 = _Conv1d(store, f"{name}.conv1", cin, cout, 3, stride=stride, pad=1)
        self.bn1 = _BatchNorm(store, f"{name}.bn1", cout)
        self.conv2 = _Conv1d(store, f"{name}.conv2", cout, cout, 3, stride=1, pad=1)
        self.bn2 = _BatchNorm(store, f"{name}.bn2", cout)
        self.project = None
        if stride != 1 or cin != cout:
            self.project = (
                _Conv1d(store, f"{name}.down.conv", cin, cout, 1, stride=stride, pad=0),
                _BatchNorm(store, f"{name}.down.bn", cout),
            )

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x), train))
        out = self.bn2(self.conv2(out), train)
        shortcut = x if self.project is None else self.project[1](self.project[0](x), train)
        return F.relu(F.add(out, shortcut))


class _Bottleneck2d:
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand; projection shortcut."""

    def __init__(self, store: _Store, name: str, cin: int, cmid: int, cout: int, stride: int):
        self.conv1 = _Conv2d(store, f"{name}.conv1", cin, cmid, 1)
        self.bn1 = _BatchNorm(store, f"{name}.bn1", cmid)
        self.conv2 = _Conv2d(store, f"{name}.conv2", cmid, cmid, 3, stride=stride, pad=1)
        self.bn2 = _BatchNorm(store, f"{name}.bn2", cmid)
        self.conv3 = _Conv2d(store, f"{name}.conv3", cmid, cout, 1)
        self.bn3 = _BatchNorm(store, f"{name}.bn3", cout)
        self.project = None
        if stride != 1 or cin != cout:
            self.project = (
                _Conv2d(store, f"{name}.down.conv", cin, cout, 1, stride=stride),
                _BatchNorm(store, f"{name}.down.bn", cout),
            )

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x), train))
        out = F.relu(self.bn2(self.conv2(out), train))
        out = self.bn3(self.conv3(out), train)
        shortcut = x if self.project is None else self.project[1](self.project[0](x), train)
        return F.relu(F.add(out, shortcut))


class _AttentionHead:
    """Two attention modules over time frames, fused by concat + sigmoid FC.

    Module 1 attends over the raw frame embeddings; module 2 attends over
    the frames after two ReLU FC layers. Each module weights per-frame
    class probabilities (sigmoid value branch) by a per-class softmax over
    time (score branch).
    """

    def __init__(self, store: _Store, name: str, dim: int, hidden: int, n_classes: int):
        self.att1_value = _Linear(store, f"{name}.att1.value", dim, n_classes)
        self.att1_score = _Linear(store, f"{name}.att1.score", dim, n_classes)
        self.fc1 = _Linear(store, f"{name}.fc1", dim, hidden)
        self.fc2 = _Linear(store, f"{name}.fc2", hidden, hidden)
        self.att2_value = _Linear(store, f"{name}.att2.value", hidden, n_classes)
        self.att2_score = _Linear(store, f"{name}.att2.score", hidden, n_classes)
        self.out_fc = _Linear(store, f"{name}.out", 2 * n_classes, n_classes)
        self.n_classes = n_classes
        self.hidden = hidden

    @staticmethod
    def _attend(frames: Tensor, value_fc: _Linear, score_fc: _Linear, n_classes: int) -> Tensor:
        b, t, d = frames.shape
        flat = F.reshape(frames, (b * t, d))
        value = F.sigmoid(F.reshape(value_fc(flat), (b, t, n_classes)))
        weights = F.softmax(F.reshape(score_fc(flat), (b, t, n_classes)), axis=1)
        return F.sum_over_axis(F.mul(weights, value), axis=1)

    def __call__(self, stage_map: Tensor) -> Tensor:
        # (B, C, H, W) -> frames (B, W, C): average the height (frequency)
        # axis, keep the width axis as time.
        frames = F.permute(F.mean_over_axis(stage_map, 2), (0, 2, 1))
        b, t, d = frames.shape
        y1 = self._attend(frames, self.att1_value, self.att1_score, self.n_classes)
        flat = F.reshape(frames, (b * t, d))
        g = F.relu(self.fc2(F.relu(self.fc1(flat))))
        y2 = self._attend(F.reshape(g, (b, t, self.hidden)), self.att2_value, self.att2_score,
                          self.n_classes)
        return F.sigmoid(self.out_fc(F.concat([y1, y2], axis=1)))


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

@dataclass
class LevelPredictions:
    """Per-level class probabilities (stages 2, 3, 4) and their mean."""

    p2: Tensor
    p3: Tensor
    p4: Tensor
    fused: Tensor

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.p2, self.p3, self.p4


class WaveTagModel:
    """Assembled network; owns named parameters and BN running buffers."""

    HEAD_STAGES = (2, 3, 4)

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        self.plan = plan_shapes(cfg)
        dtype = np.dtype(dtype) if dtype is not None else F.default_dtype()
        store = _Store(np.random.Generator(np.random.PCG64(seed)), dtype)
        self._store = store
        w = cfg.width_scale
        fe, be = cfg.frontend, cfg.backend

        # front end
        c_stem = scaled_channels(fe.stem_channels, w)
        stem_pad = (fe.stem_kernel - fe.stem_stride) // 2
        self.fe_stem_conv = _Conv1d(store, "frontend.stem.conv", 1, c_stem, fe.stem_kernel,
                                    stride=fe.stem_stride, pad=stem_pad)
        self.fe_stem_bn = _BatchNorm(store, "frontend.stem.bn", c_stem)
        self.fe_stages: list[list[_BasicBlock1d]] = []
        cin = c_stem
        for s, (channels, stride) in enumerate(zip(fe.stage_channels, fe.stage_strides), start=1):
            cout = scaled_channels(channels, w)
            blocks = []
            for b in range(1, fe.blocks_per_stage + 1):
                blocks.append(_BasicBlock1d(store, f"frontend.stage{s}.block{b}", cin, cout,
                                            stride if b == 1 else 1))
                cin = cout
            self.fe_stages.append(blocks)

        # back end
        be_stem = scaled_channels(be.stem_channels, w)
        self.be_stem_conv = _Conv2d(store, "backend.stem.conv", 1, be_stem, be.stem_kernel,
                                    stride=be.stem_stride, pad=be.stem_pad)
        self.be_stem_bn = _BatchNorm(store, "backend.stem.bn", be_stem)
        self.be_stages: list[list[_Bottleneck2d]] = []
        cin = be_stem
        for s, (n_blocks, channels, stride) in enumerate(
            zip(be.blocks_per_stage, be.stage_channels, be.stage_strides), start=1
        ):
            cout = scaled_channels(channels, w)
            cmid = scaled_channels(channels // 4, w)
            blocks = []
            for b in range(1, n_blocks + 1):
                blocks.append(_Bottleneck2d(store, f"backend.stage{s}.block{b}", cin, cmid, cout,
                                            stride if b == 1 else 1))
                cin = cout
            self.be_stages.append(blocks)

        # heads for stages 2, 3, 4
        self.heads: dict[int, _AttentionHead] = {}
        for stage in self.HEAD_STAGES:
            dim = self.plan.stages[stage - 1][0]
            self.heads[stage] = _AttentionHead(store, f"head{stage}", dim,
                                               cfg.attention.hidden, cfg.n_classes)

    # -- parameter access ---------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        return self._store.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._store.buffers

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Trainable params then buffers, in stable construction order."""
        for name, p in self._store.params.items():
            yield name, p.data
        for name, b in self._store.buffers.items():
            yield name, b

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Install a name->array mapping; names and shapes must match exactly."""
        expected = dict(self.named_tensors())
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in state.items():
            target = expected[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {target.shape}")
        for name, p in self._store.params.items():
            p.data = np.ascontiguousarray(state[name], dtype=p.data.dtype)
            p.grad = None
        for name in self._store.buffers:
            self._store.buffers[name][...] = state[name]

    def zero_grads(self) -> None:
        F.zero_grads(self._store.params)

    # -- forward ------------------------------------------------------------

    def frontend_forward(self, x: Tensor, train: bool) -> Tensor:
        """(B, 1, clip_len) -> (B, C, 1, T) frequency-like features."""
        h = F.relu(self.fe_stem_bn(self.fe_stem_conv(x), train))
        h = F.maxpool1d(h, self.cfg.frontend.pool_kernel, self.cfg.frontend.pool_stride)
        for blocks in self.fe_stages:
            for block in blocks:
                h = block(h, train)
        b, c, t = h.shape
        expected = self.plan.frontend
        assert (c, 1, t) == expected, f"front-end shape {(c, 1, t)} != planned {expected}"
        return F.reshape(h, (b, c, 1, t))

    def backend_forward(self, fmap: Tensor, train: bool) -> dict[int, Tensor]:
        """(B, 1, C, T) -> stage feature maps for the head taps (2, 3, 4)."""
        be = self.cfg.backend
        h = F.relu(self.be_stem_bn(self.be_stem_conv(fmap), train))
        h = F.maxpool2d(h, (be.pool_kernel, be.pool_kernel),
                        (be.pool_stride, be.pool_stride), (be.pool_pad, be.pool_pad))
        taps: dict[int, Tensor] = {}
        for stage_idx, blocks in enumerate(self.be_stages, start=1):
            for block in blocks:
                h = block(h, train)
            expected = self.plan.stages[stage_idx - 1]
            assert h.shape[1:] == expected, (
                f"stage {stage_idx} shape {h.shape[1:]} != planned {expected}"
            )
            if stage_idx in self.HEAD_STAGES:
                taps[stage_idx] = h
        return taps

    def forward(self, x, train: bool = False) -> LevelPredictions:
        x = self._as_input(x)
        fmap = F.transpose_c1t_to_1ct(self.frontend_forward(x, train))
        taps = self.backend_forward(fmap, train)
        p2 = self.heads[2](taps[2])
        p3 = self.heads[3](taps[3])
        p4 = self.heads[4](taps[4])
        fused = F.scale(F.add(F.add(p2, p3), p4), 1.0 / 3.0)
        return LevelPredictions(p2=p2, p3=p3, p4=p4, fused=fused)

    def predict_proba(self, x) -> np.ndarray:
        """Fused eval-mode probabilities, no graph construction."""
        with F.no_grad():
            return self.forward(x, train=False).fused.data.copy()

    def _as_input(self, x) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.ndim == 2:
            arr = arr[:, None, :]
        if arr.ndim != 3 or arr.shape[1] != 1:
            raise F.ShapeError(f"model input must be (B, 1, clip_len), got {arr.shape}")
        if arr.shape[2] != self.cfg.clip_len:
            raise F.ShapeError(
                f"model input length {arr.shape[2]} != configured clip_len {self.cfg.clip_len}"
            )
        dtype = self._store.dtype
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        return Tensor(arr)
