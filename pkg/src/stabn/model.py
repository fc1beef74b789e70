"""Spatio-temporal attention branch network.

Dataflow for a clip ``x`` of shape [N, C_in, T, H, W]::

    f      = extractor(x)                                  [N, C, T, H', W']
    k_maps = att_conv1(dropout(trunk(f)))                  [N, K, T, H', W']
    att_logits = gap3d(att_conv2(k_maps))                  [N, K]
    M_s    = sigmoid(spatial_conv(k_maps))                 [N, 1, T, H', W']
    M_t    = temporal_gate(k_maps)                         [N, T]
    f'     = fusion_conv(concat[(1 + M_s) * f, M_t * f])   [N, C, T, H', W']
    per_logits = linear(dropout(gap3d(perception(f'))))    [N, K]
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import functional as F
from .errors import ConfigurationError, InputError
from .functional import ConvSpec
from .nn import BatchNorm, Conv, Linear, Module, Stage, StageStack
from .tensor import Tensor, as_tensor, concat, no_grad, reshape

SPATIAL_STRIDE = (1, 2, 2)


@dataclass
class ModelConfig:
    num_classes: int = 4
    frames: int = 8
    input_channels: int = 1
    spatial_size: Tuple[int, int] = (32, 32)
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: Tuple[int, ...] = (1, 1, 1)
    split_stage: Optional[int] = None
    se_reduction: int = 2
    dropout_rate: float = 0.5
    batchnorm: bool = True

    def __post_init__(self):
        self.spatial_size = tuple(int(v) for v in self.spatial_size)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.blocks_per_stage = tuple(int(v) for v in self.blocks_per_stage)
        if self.split_stage is None:
            self.split_stage = len(self.stage_channels) - 1

    def violations(self) -> list:
        out = []
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.frames < 1:
            out.append(f"frames must be >= 1 (got {self.frames})")
        if self.input_channels < 1:
            out.append("input_channels must be >= 1")
        if len(self.spatial_size) != 2 or min(self.spatial_size) < 1:
            out.append(f"spatial_size must be two positive extents (got {self.spatial_size})")
        n = len(self.stage_channels)
        if n == 0 or min(self.stage_channels, default=0) < 1:
            out.append("stage_channels must be a non-empty list of positive widths")
        if len(self.blocks_per_stage) != n or min(self.blocks_per_stage, default=0) < 1:
            out.append("blocks_per_stage must give a positive block count for every stage")
        if not 0 <= self.split_stage < max(n, 1):
            out.append(f"split_stage must lie in [0, {n}) (got {self.split_stage})")
        elif len(self.spatial_size) == 2:
            stride = 2 ** self.split_stage
            for axis, extent in zip("HW", self.spatial_size):
                if extent % stride:
                    out.append(f"{axis}={extent} is not divisible by the cumulative stride {stride}")
        if self.se_reduction < 1:
            out.append("se_reduction must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append("dropout_rate must lie in [0, 1)")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def feature_channels(self) -> int:
        """Width of the extractor output (the tensor both branches consume)."""
        return self.stage_channels[self.split_stage - 1] if self.split_stage > 0 else self.stage_channels[0]

    @property
    def feature_size(self) -> Tuple[int, int]:
        s = 2 ** self.split_stage
        return (self.spatial_size[0] // s, self.spatial_size[1] // s)

    @property
    def gate_width(self) -> int:
        return math.ceil(self.frames / self.se_reduction)

    def to_dict(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "ModelConfig":
        def ints(s):
            return tuple(int(x) for x in s.split(",") if x)

        return cls(
            num_classes=int(d["num_classes"]),
            frames=int(d["frames"]),
            input_channels=int(d["input_channels"]),
            spatial_size=ints(d["spatial_size"]),
            stage_channels=ints(d["stage_channels"]),
            blocks_per_stage=ints(d["blocks_per_stage"]),
            split_stage=int(d["split_stage"]),
            se_reduction=int(d["se_reduction"]),
            dropout_rate=float(d["dropout_rate"]),
            batchnorm=d["batchnorm"] == "True",
        )


@dataclass
class AttentionPair:
    spatial: Tensor  # [N, 1, T, H', W']
    temporal: Tensor  # [N, T]


@dataclass
class ForwardOutput:
    att_logits: Tensor
    per_logits: Tensor
    attention: AttentionPair


AttentionMode = Union[str, float]


@dataclass(frozen=True)
class AttentionOverride:
    """Per-attention transform applied between the heads and the fusion step.

    Each field is ``"computed"``, ``"inverted"`` (``1 - M``) or a constant in [0, 1].
    """

    spatial: AttentionMode = "computed"
    temporal: AttentionMode = "computed"

    def __post_init__(self):
        for name in ("spatial", "temporal"):
            mode = getattr(self, name)
            if isinstance(mode, str):
                if mode not in ("computed", "inverted"):
                    raise InputError(f"{name} override must be 'computed', 'inverted' or a constant, got {mode!r}")
            elif not 0.0 <= float(mode) <= 1.0:
                raise InputError(f"{name} override constant must lie in [0, 1], got {mode}")

    def apply(self, spatial: Tensor, temporal: Tensor) -> Tuple[Tensor, Tensor]:
        return _transform(spatial, self.spatial), _transform(temporal, self.temporal)


def _transform(m: Tensor, mode: AttentionMode) -> Tensor:
    if mode == "computed":
        return m
    if mode == "inverted":
        return 1.0 - m
    return Tensor(np.full(m.shape, float(mode)))


class TemporalGate(Module):
    """Frame-wise gate: aggregate K maps per frame, mix frames, squeeze space, excite."""

    def __init__(self, k: int, frames: int, hidden: int, rng):
        super().__init__()
        self.frame_conv = Conv(ConvSpec(1, k, (1, 3, 3), 1, (0, 1, 1)), rng)
        self.mix = Conv(ConvSpec(frames, frames, (1, 1), 1, 0), rng)
        self.squeeze = Linear(frames, hidden, rng)
        self.excite = Linear(hidden, frames, rng)

    def __call__(self, k_maps: Tensor) -> Tensor:
        n, _, t, h, w = k_maps.shape
        x = reshape(self.frame_conv(k_maps), (n, t, h, w))
        x = F.gap2d_spatial(self.mix(x))
        x = F.relu(self.squeeze(x))
        return F.sigmoid(self.excite(x))


class StAbnModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        cfg = config
        bn = cfg.batchnorm
        k = cfg.num_classes
        widths = cfg.stage_channels
        split = cfg.split_stage

        self.stem = Conv(ConvSpec(widths[0], cfg.input_channels, (3, 3, 3), 1, 1, not bn), rng)
        if bn:
            self.stem_bn = BatchNorm(widths[0])
        c_prev = widths[0]
        stages = []
        for i in range(split):
            stages.append(Stage(c_prev, widths[i], cfg.blocks_per_stage[i], SPATIAL_STRIDE, bn, rng))
            c_prev = widths[i]
        self.extractor = StageStack(stages)
        c_feat = c_prev

        trunk, c = [], c_feat
        for i in range(split, len(widths)):
            trunk.append(Stage(c, widths[i], cfg.blocks_per_stage[i], (1, 1, 1), bn, rng))
            c = widths[i]
        self.trunk = StageStack(trunk)
        self.att_conv1 = Conv(ConvSpec(k, c, (1, 1, 1)), rng)
        self.att_conv2 = Conv(ConvSpec(k, k, (1, 1, 1)), rng)
        self.spatial_conv = Conv(ConvSpec(1, k, (1, 1, 1)), rng)
        self.temporal_gate = TemporalGate(k, cfg.frames, cfg.gate_width, rng)

        self.fusion_conv = Conv(ConvSpec(c_feat, 2 * c_feat, (1, 1, 1)), rng)

        perception, c = [], c_feat
        for i in range(split, len(widths)):
            perception.append(Stage(c, widths[i], cfg.blocks_per_stage[i], SPATIAL_STRIDE, bn, rng))
            c = widths[i]
        self.perception = StageStack(perception)
        self.classifier = Linear(c, k, rng)

    # -- pieces ------------------------------------------------------------

    def extract(self, video: Tensor, training: bool) -> Tensor:
        x = self.stem(video)
        if self.config.batchnorm:
            x = self.stem_bn(x, training)
        return self.extractor(F.relu(x), training)

    def attention_branch(self, features: Tensor, training: bool, rng=None) -> Tuple[Tensor, Tensor]:
        """Return ``(att_logits, k_maps)``; ``k_maps`` feed both attention heads."""
        x = self.trunk(features, training)
        x = F.dropout(x, self.config.dropout_rate, training, rng)
        k_maps = self.att_conv1(x)
        return F.gap3d(self.att_conv2(k_maps)), k_maps

    def spatial_attention(self, k_maps: Tensor) -> Tensor:
        return F.sigmoid(self.spatial_conv(k_maps))

    def temporal_attention(self, k_maps: Tensor) -> Tensor:
        return self.temporal_gate(k_maps)

    def fuse(self, features: Tensor, spatial: Tensor, temporal: Tensor) -> Tensor:
        return fuse_attention(features, spatial, temporal, self.fusion_conv)

    def perceive(self, fused: Tensor, training: bool, rng=None) -> Tensor:
        x = F.gap3d(self.perception(fused, training))
        x = F.dropout(x, self.config.dropout_rate, training, rng)
        return self.classifier(x)

    # -- full pass ---------------------------------------------------------

    def check_input(self, video: Tensor) -> None:
        cfg = self.config
        expected = (cfg.input_channels, cfg.frames) + tuple(cfg.spatial_size)
        if video.ndim != 5 or tuple(video.shape[1:]) != expected:
            raise InputError(
                f"video shape {tuple(video.shape)} does not match expected [N, {', '.join(map(str, expected))}]"
            )

    def forward(
        self,
        video,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        override: Optional[AttentionOverride] = None,
    ) -> ForwardOutput:
        video = as_tensor(video)
        self.check_input(video)
        if training and self.config.dropout_rate > 0 and rng is None:
            raise InputError("training-mode forward with dropout needs an rng")
        features = self.extract(video, training)
        att_logits, k_maps = self.attention_branch(features, training, rng)
        spatial = self.spatial_attention(k_maps)
        temporal = self.temporal_attention(k_maps)
        used_s, used_t = (override.apply(spatial, temporal) if override else (spatial, temporal))
        per_logits = self.perceive(self.fuse(features, used_s, used_t), training, rng)
        return ForwardOutput(att_logits, per_logits, AttentionPair(spatial, temporal))

    __call__ = forward

    def infer(self, video, override: Optional[AttentionOverride] = None) -> ForwardOutput:
        """Evaluation-mode forward without graph recording."""
        with no_grad():
            return self.forward(video, training=False, override=override)


def fuse_attention(features: Tensor, spatial: Tensor, temporal: Tensor, fusion_conv: Conv) -> Tensor:
    """Residual spatial weighting, plain temporal gating, channel concat, 1x1x1 reduction."""
    n, c, t, h, w = features.shape
    if spatial.shape != (n, 1, t, h, w) or temporal.shape != (n, t):
        raise RuntimeError(
            f"attention shapes {spatial.shape}, {temporal.shape} do not fit features {features.shape}"
        )
    f_spatial = (1.0 + spatial) * features
    f_temporal = reshape(temporal, (n, 1, t, 1, 1)) * features
    return fusion_conv(concat([f_spatial, f_temporal], axis=1))


def build_model(config: ModelConfig, rng: Union[np.random.Generator, int]) -> StAbnModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return StAbnModel(config, rng)


def forward(model: StAbnModel, video, training: bool = False, rng=None) -> ForwardOutput:
    return model.forward(video, training, rng)


def forward_with_override(model: StAbnModel, video, override: AttentionOverride, training: bool = False, rng=None) -> ForwardOutput:
    return model.forward(video, training, rng, override)
