"""Multi-task quality network: VGG-style backbone, two feature taps, and the
six head wirings used in the architecture study.

The backbone is five stages of 3x3 convolutions, each conv followed by
non-affine instance normalization and ReLU, each stage closed by a 2x2
max-pool.  An input of side S therefore yields a stage-4 tap of spatial side
S/16 and a stage-5 tap of side S/32.

Head variants:

    a   quality only, two fully-connected layers on flattened tap-5
    b   quality only, 1x1 conv + global average pooling on tap-5
    c   distortion and quality heads both on tap-5, no fusion
    d   distortion head on tap-4, quality head on tap-5, no fusion
    e   both heads on tap-5; two coarse quality maps from tap-5, fused
    f   distortion head on tap-4; coarse quality maps from tap-4 and
        tap-5, concatenated and fused by a final 1x1 conv (the proposed
        wiring)

Variants a and b emit no distortion logits; c-f emit both outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

VARIANTS = ("a", "b", "c", "d", "e", "f")
MULTI_TASK_VARIANTS = ("c", "d", "e", "f")

FULL_STAGE_CHANNELS = [64, 128, 256, 512, 512]
TINY_STAGE_CHANNELS = [8, 16, 32, 64, 64]
DEFAULT_CONVS_PER_STAGE = [2, 2, 3, 3, 3]


class ConfigError(ValueError):
    """Invalid model or backbone configuration."""


@dataclass
class BackboneConfig:
    """Five-stage convolutional backbone description."""

    stage_channels: list[int] = field(default_factory=lambda: list(FULL_STAGE_CHANNELS))
    convs_per_stage: list[int] = field(default_factory=lambda: list(DEFAULT_CONVS_PER_STAGE))
    kernel_size: int = 3
    in_epsilon: float = 1e-5

    def validate(self) -> None:
        if len(self.stage_channels) != 5 or len(self.convs_per_stage) != 5:
            raise ConfigError("backbone must have exactly 5 stages")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channel counts must be >= 1")
        if any(n < 1 for n in self.convs_per_stage):
            raise ConfigError("each stage needs at least one conv")
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ConfigError("kernel size must be odd and positive")
        if not self.in_epsilon > 0:
            raise ConfigError("instance-norm epsilon must be > 0")


def tiny_backbone(**overrides) -> BackboneConfig:
    cfg = BackboneConfig(stage_channels=list(TINY_STAGE_CHANNELS))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def full_backbone(**overrides) -> BackboneConfig:
    cfg = BackboneConfig()
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: str = "f"
    num_distortions: int = 4
    patch_side: int = 128
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown head variant {self.variant!r}; expected one of {VARIANTS}")
        if self.patch_side % 32 != 0 or self.patch_side <= 0:
            raise ConfigError(f"patch_side must be a positive multiple of 32, got {self.patch_side}")
        if self.variant in MULTI_TASK_VARIANTS and self.num_distortions < 1:
            raise ConfigError(
                f"variant {self.variant!r} needs num_distortions >= 1, got {self.num_distortions}"
            )

    @property
    def has_distortion_head(self) -> bool:
        return self.variant in MULTI_TASK_VARIANTS

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "stage_channels": list(self.backbone.stage_channels),
                "convs_per_stage": list(self.backbone.convs_per_stage),
                "kernel_size": self.backbone.kernel_size,
                "in_epsilon": self.backbone.in_epsilon,
            },
            "variant": self.variant,
            "num_distortions": self.num_distortions,
            "patch_side": self.patch_side,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        backbone = BackboneConfig(
            stage_channels=list(data["backbone"]["stage_channels"]),
            convs_per_stage=list(data["backbone"]["convs_per_stage"]),
            kernel_size=int(data["backbone"]["kernel_size"]),
            in_epsilon=float(data["backbone"]["in_epsilon"]),
        )
        return cls(
            backbone=backbone,
            variant=data["variant"],
            num_distortions=int(data["num_distortions"]),
            patch_side=int(data["patch_side"]),
            seed=int(data["seed"]),
        )


@dataclass
class FeatureTaps:
    """Post-pool stage-4 and stage-5 feature maps."""

    t4: torch.Tensor
    t5: torch.Tensor


@dataclass
class ForwardOutput:
    """Per-patch prediction: distortion logits (None for variants a/b) and
    the scalar quality score."""

    d_logits: Optional[torch.Tensor]
    s: float


def instance_normalize(x: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel standardization with no learned affine.

    Accepts (C, H, W) or (N, C, H, W).  Each channel of each sample is
    shifted and scaled to (x - mean) / sqrt(var + epsilon) using the biased
    (population) variance over the spatial dimensions.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if x.dim() == 3:
        return F.instance_norm(x.unsqueeze(0), eps=epsilon).squeeze(0)
    if x.dim() == 4:
        return F.instance_norm(x, eps=epsilon)
    raise ValueError(f"expected a 3D or 4D feature map, got shape {tuple(x.shape)}")


def gap(x: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the two trailing spatial dimensions."""
    return x.mean(dim=(-2, -1))


class MultiTaskIQANet(nn.Module):
    """Joint distortion-type classifier and quality-score regressor."""

    def __init__(self, config: ModelConfig):
        config.validate()
        super().__init__()
        self.config = config
        bb = config.backbone
        k = bb.kernel_size
        pad = k // 2

        stages = []
        in_ch = 3
        for out_ch, n_convs in zip(bb.stage_channels, bb.convs_per_stage):
            convs = nn.ModuleList(
                nn.Conv2d(in_ch if j == 0 else out_ch, out_ch, k, padding=pad)
                for j in range(n_convs)
            )
            stages.append(convs)
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

        c4 = bb.stage_channels[3]
        c5 = bb.stage_channels[4]
        m = config.num_distortions
        v = config.variant
        side5 = config.patch_side // 32

        if v in ("c", "e"):
            self.dist_conv = nn.Conv2d(c5, m, 1)
        elif v in ("d", "f"):
            self.dist_conv = nn.Conv2d(c4, m, 1)

        if v == "a":
            self.fc1 = nn.Linear(c5 * side5 * side5, 512)
            self.fc2 = nn.Linear(512, 1)
        elif v in ("b", "c", "d"):
            self.q_conv = nn.Conv2d(c5, 1, 1)
        elif v == "e":
            self.q_conv_a = nn.Conv2d(c5, 1, 1)
            self.q_conv_b = nn.Conv2d(c5, 1, 1)
            self.fuse_conv = nn.Conv2d(2, 1, 1)
        elif v == "f":
            self.q_conv_t4 = nn.Conv2d(c4, 1, 1)
            self.q_conv_t5 = nn.Conv2d(c5, 1, 1)
            self.fuse_conv = nn.Conv2d(2, 1, 1)

        self._init_parameters(config.seed)

    # -- initialization ----------------------------------------------------

    def _init_parameters(self, seed: int) -> None:
        # Fan-in-scaled zero-mean normals, biases zero.  Backbone convs and
        # the hidden FC feed ReLUs and get the sqrt(2) gain; output layers
        # are linear maps and use gain 1.  Draw order follows
        # named_parameters(), so identical (config, seed) gives bit-identical
        # values.
        gen = torch.Generator().manual_seed(seed)
        relu_weights = {"fc1.weight"}
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
                continue
            if p.dim() == 4:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                gain = math.sqrt(2.0) if name.startswith("stages") else 1.0
            else:
                fan_in = p.shape[1]
                gain = math.sqrt(2.0) if name in relu_weights else 1.0
            std = gain / math.sqrt(fan_in)
            with torch.no_grad():
                p.normal_(0.0, std, generator=gen)

    # -- forward pieces ----------------------------------------------------

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        s = self.config.patch_side
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(
                f"expected input of shape (N, 3, {s}, {s}), got {tuple(x.shape)}"
            )
        return x

    def forward_taps(self, x: torch.Tensor) -> FeatureTaps:
        """Run the backbone; return post-pool stage-4 and stage-5 maps.

        Input values are expected in [0, 1].
        """
        x = self._check_input(x)
        eps = self.config.backbone.in_epsilon
        t4 = None
        for i, convs in enumerate(self.stages):
            for conv in convs:
                x = torch.relu(instance_normalize(conv(x), eps))
            x = torch.max_pool2d(x, 2, 2)
            if i == 3:
                t4 = x
        return FeatureTaps(t4=t4, t5=x)

    def distortion_head(self, tap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """1x1 conv to m channels plus GAP.

        Returns (logit_map, d_logits); argmax of d_logits is the predicted
        distortion class (0-based here; dataset class indices are 1-based).
        """
        if not self.config.has_distortion_head:
            raise ConfigError(f"variant {self.config.variant!r} has no distortion head")
        logit_map = self.dist_conv(tap)
        return logit_map, gap(logit_map)

    def quality_head(self, taps: FeatureTaps) -> torch.Tensor:
        """Regress the scalar quality score from the tap(s) the variant uses."""
        v = self.config.variant
        if v == "a":
            if taps.t5 is None:
                raise ConfigError("variant a needs tap-5")
            h = torch.relu(self.fc1(taps.t5.flatten(1)))
            return self.fc2(h).squeeze(1)
        if v in ("b", "c", "d"):
            if taps.t5 is None:
                raise ConfigError(f"variant {v} needs tap-5")
            return gap(self.q_conv(taps.t5)).squeeze(1)
        if v == "e":
            if taps.t5 is None:
                raise ConfigError("variant e needs tap-5")
            coarse = torch.cat(
                [self.q_conv_a(taps.t5), self.q_conv_b(taps.t5)], dim=1
            )
            return gap(self.fuse_conv(coarse)).squeeze(1)
        # variant f: tap-4 coarse map is pooled down to the tap-5 grid, then
        # the two 1-channel maps are concatenated and fused.
        if taps.t4 is None or taps.t5 is None:
            raise ConfigError("variant f needs both tap-4 and tap-5")
        coarse4 = F.avg_pool2d(self.q_conv_t4(taps.t4), 2, 2)
        coarse5 = self.q_conv_t5(taps.t5)
        fused = self.fuse_conv(torch.cat([coarse4, coarse5], dim=1))
        return gap(fused).squeeze(1)

    def forward(self, x: torch.Tensor) -> tuple[Optional[torch.Tensor], torch.Tensor]:
        """Full forward pass on a (N, 3, S, S) batch.

        Returns (d_logits, s) where d_logits is (N, m) or None for the
        single-task variants, and s is (N,).
        """
        taps = self.forward_taps(x)
        v = self.config.variant
        d = None
        if v in ("c", "e"):
            _, d = self.distortion_head(taps.t5)
        elif v in ("d", "f"):
            _, d = self.distortion_head(taps.t4)
        s = self.quality_head(taps)
        return d, s

    def backbone_parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters() if name.startswith("stages.")]


def build_model(config: ModelConfig) -> MultiTaskIQANet:
    """Instantiate the network with deterministic, seed-derived parameters."""
    return MultiTaskIQANet(config)


def predict_patch(model: MultiTaskIQANet, patch: torch.Tensor) -> ForwardOutput:
    """Deterministic single-patch inference; patch is (3, S, S) in [0, 1]."""
    if patch.dim() != 3:
        raise ValueError(f"expected a single (3, S, S) patch, got shape {tuple(patch.shape)}")
    with torch.no_grad():
        d, s = model(patch.unsqueeze(0))
    return ForwardOutput(
        d_logits=None if d is None else d[0].detach().clone(),
        s=float(s[0]),
    )

def predict_patches(model: MultiTaskIQANet, patches: torch.Tensor) -> list[ForwardOutput]:
    """Batched inference over (N, 3, S, S); equivalent to per-patch calls
    because every normalization in the network is per-sample."""
    with torch.no_grad():
        d, s = model(patches)
    out = []
    for i in range(patches.shape[0]):
        out.append(
            ForwardOutput(
                d_logits=None if d is None else d[i].detach().clone(),
                s=float(s[i]),
            )
        )
    return out


def parameter_census(model: MultiTaskIQANet) -> list[tuple[str, tuple[int, ...], int]]:
    """Every trainable tensor: (name, shape, element count).

    Instance normalization carries no parameters, so only conv and linear
    tensors appear.
    """
    return [(name, tuple(p.shape), p.numel()) for name, p in model.named_parameters()]


def total_parameter_count(model: MultiTaskIQANet) -> int:
    return sum(count for _, _, count in parameter_census(model))
