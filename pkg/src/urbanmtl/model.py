"""Multi-task CNN for HSE density regression and LCZ classification.

Layout (h, w = patch size, f = base feature count)::

    image [bands, h, w]
      -> ConvBlock(f) -> ConvBlock(2f) -> PoolBlock(max || avg)      [4f, h/2]
      -> ConvBlock(4f) -> ConvBlock(4f)                              backbone features
    HSE: CBAM -> SepConv -> dropout -> 1x1 conv -> sigmoid          [1, h/2]
    LCZ: CBAM -> SepConv -> dropout -> maxpool -> SepConv -> dropout
         -> 1x1 conv -> softmax                                      [K, h/4]
         auxiliary 1x1 heads on backbone, CBAM and post-pool features
         optional P2F head on CBAM features multiplied by an HSE prior
         every head upsampled bilinearly to [K, h, w] and averaged
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    ConfigError,
    MissingReferenceError,
    ModelConfig,
    RangeError,
    SampleBatch,
    ShapeError,
    validate_config,
)

BN_EPS = 1e-5
# running = 0.9 * running + 0.1 * batch
BN_MOMENTUM = 0.1

PARAM_GROUPS = ("shared", "hse_branch", "lcz_branch", "task_weights")


def open_sigmoid(z: torch.Tensor) -> torch.Tensor:
    """Sigmoid kept strictly inside (0, 1).

    Large logits round to exactly 0 or 1 in floating point; clamp to the
    nearest representable values inside the interval instead.
    """
    fi = torch.finfo(z.dtype)
    return torch.sigmoid(z).clamp(fi.tiny, 1.0 - fi.eps / 2)


class PriorSource(enum.Enum):
    REFERENCE = "reference"
    PREDICTION = "prediction"


def separable_conv_forward(
    x: torch.Tensor,
    depthwise_k: torch.Tensor,
    pointwise_k: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Depthwise 3x3 (zero 'same' padding) followed by a pointwise 1x1 projection.

    ``depthwise_k`` is [C, 3, 3], ``pointwise_k`` is [C_out, C], ``bias`` is [C_out].
    """
    if x.dim() != 4:
        raise ShapeError(f"expected [N, C, H, W], got {tuple(x.shape)}")
    c = x.shape[1]
    if depthwise_k.shape[0] != c or pointwise_k.shape[1] != c:
        raise ShapeError(
            f"channel mismatch: input {c}, depthwise {depthwise_k.shape[0]}, "
            f"pointwise {pointwise_k.shape[1]}"
        )
    y = F.conv2d(x, depthwise_k.unsqueeze(1), padding=1, groups=c)
    return F.conv2d(y, pointwise_k[:, :, None, None], bias)


class SeparableConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.depthwise = nn.Parameter(torch.empty(in_ch, 3, 3))
        self.pointwise = nn.Parameter(torch.empty(out_ch, in_ch))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        return separable_conv_forward(x, self.depthwise, self.pointwise, self.bias)


class ConvBNReLU(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = SeparableConv2d(in_ch, out_ch)
        self.bn = nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ConvBlock(nn.Sequential):
    """Two separable conv + BN + ReLU layers."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(ConvBNReLU(in_ch, out_ch), ConvBNReLU(out_ch, out_ch))


class PoolBlock(nn.Module):
    """Parallel 2x2/2 max and average pooling, concatenated along channels."""

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeError(f"pooling needs even spatial dims, got {tuple(x.shape[-2:])}")
        return torch.cat([F.max_pool2d(x, 2, 2), F.avg_pool2d(x, 2, 2)], dim=1)


class CBAM(nn.Module):
    """Channel attention followed by spatial attention.

    y = x' * Ms(x'),  x' = x * Mc(x)
    """

    def __init__(self, channels: int, ratio: int = 8, spatial_kernel: int = 7):
        super().__init__()
        if channels < ratio:
            raise ConfigError(f"CBAM needs channels >= ratio ({channels} < {ratio})")
        hidden = channels // ratio
        self.fc1 = nn.Parameter(torch.empty(hidden, channels))
        self.fc2 = nn.Parameter(torch.empty(channels, hidden))
        self.spatial = nn.Parameter(torch.empty(1, 2, spatial_kernel, spatial_kernel))
        self.pad = spatial_kernel // 2

    def channel_attention(self, x):
        def mlp(v):
            return F.linear(F.relu(F.linear(v, self.fc1)), self.fc2)

        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return open_sigmoid(mlp(avg) + mlp(mx))[:, :, None, None]

    def spatial_attention(self, x):
        stacked = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return open_sigmoid(F.conv2d(stacked, self.spatial, padding=self.pad))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.fc1.shape[1]:
            raise ShapeError(f"CBAM expects [N, {self.fc1.shape[1]}, H, W], got {tuple(x.shape)}")
        x = x * self.channel_attention(x)
        return x * self.spatial_attention(x)


def cbam_forward(x: torch.Tensor, module: CBAM) -> torch.Tensor:
    return module(x)


class Backbone(nn.Module):
    def __init__(self, bands: int, f: int):
        super().__init__()
        self.block1 = ConvBlock(bands, f)
        self.block2 = ConvBlock(f, 2 * f)
        self.pool = PoolBlock()
        self.block3 = ConvBlock(4 * f, 4 * f)
        self.block4 = ConvBlock(4 * f, 4 * f)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeError(f"backbone needs even spatial dims, got {tuple(x.shape[-2:])}")
        x = self.block2(self.block1(x))
        return self.block4(self.block3(self.pool(x)))


def _attention(channels: int, cfg: ModelConfig) -> nn.Module:
    return CBAM(channels, cfg.cbam_ratio) if cfg.cbam_enabled else nn.Identity()


class HseBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = 4 * cfg.base_features
        self.attention = _attention(c, cfg)
        self.conv = ConvBNReLU(c, c)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.head = nn.Conv2d(c, 1, kernel_size=1)

    def forward(self, feat):
        x = self.dropout(self.conv(self.attention(feat)))
        return open_sigmoid(self.head(x))


class LczBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, k = 4 * cfg.base_features, cfg.num_classes
        self.attention = _attention(c, cfg)
        self.conv1 = ConvBNReLU(c, c)
        self.dropout1 = nn.Dropout(cfg.dropout_rate)
        self.conv2 = ConvBNReLU(c, c)
        self.dropout2 = nn.Dropout(cfg.dropout_rate)
        self.head_final = nn.Conv2d(c, k, kernel_size=1)
        self.head_backbone = nn.Conv2d(c, k, kernel_size=1)
        self.head_attention = nn.Conv2d(c, k, kernel_size=1)
        self.head_pooled = nn.Conv2d(c, k, kernel_size=1)

    def forward(self, feat):
        """Return (attended features, list of head probabilities at native resolution)."""
        att = self.attention(feat)
        t = self.dropout1(self.conv1(att))
        if t.shape[-2] % 2 or t.shape[-1] % 2:
            raise ShapeError("LCZ branch needs h, w divisible by 4")
        pooled = F.max_pool2d(t, 2, 2)
        t = self.dropout2(self.conv2(pooled))
        heads = [
            torch.softmax(self.head_final(t), dim=1),
            torch.softmax(self.head_backbone(feat), dim=1),
            torch.softmax(self.head_attention(att), dim=1),
            torch.softmax(self.head_pooled(pooled), dim=1),
        ]
        return att, heads


class P2F(nn.Module):
    """LCZ head on attended features multiplied by an HSE density prior."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.head = nn.Conv2d(4 * cfg.base_features, cfg.num_classes, kernel_size=1)

    def condition(self, prior, feat):
        prior = prior.detach()
        if prior.dim() == 3:
            prior = prior.unsqueeze(1)
        if prior.shape[1] != 1:
            raise ShapeError(f"prior must have one channel, got {tuple(prior.shape)}")
        if prior.numel() and (prior.min() < 0 or prior.max() > 1):
            raise RangeError("P2F prior outside [0, 1]")
        if prior.shape[-2:] != feat.shape[-2:]:
            prior = F.interpolate(prior, size=feat.shape[-2:], mode="nearest")
        return feat * prior.to(feat.dtype)

    def forward(self, prior, feat):
        return torch.softmax(self.head(self.condition(prior, feat)), dim=1)


def p2f_forward(prior: torch.Tensor, lcz_cbam_feat: torch.Tensor, module: P2F) -> torch.Tensor:
    return module(prior, lcz_cbam_feat)


class TaskWeightParams(nn.Module):
    def __init__(self):
        super().__init__()
        self.s_hse = nn.Parameter(torch.zeros(()))
        self.s_lcz = nn.Parameter(torch.zeros(()))


def upsample_probs(p: torch.Tensor, size) -> torch.Tensor:
    if tuple(p.shape[-2:]) == tuple(size):
        return p
    return F.interpolate(p, size=size, mode="bilinear", align_corners=False)


@dataclass
class ModelOutput:
    hse: Optional[torch.Tensor]  # [N, 1, h/2, w/2]
    lcz_heads: list  # probabilities at native head resolution
    lcz_avg: Optional[torch.Tensor]  # [N, K, h, w]
    p2f_head: Optional[torch.Tensor] = None


class MTLNet(nn.Module):
    """Shared backbone with an HSE and an LCZ branch (either may be dropped for single-task runs)."""

    def __init__(self, cfg: ModelConfig, seed: Optional[int] = 0):
        super().__init__()
        validate_config(cfg)
        self.cfg = cfg
        self.backbone = Backbone(cfg.bands, cfg.base_features)
        self.hse = HseBranch(cfg) if cfg.task in ("multi", "hse") else None
        self.lcz = LczBranch(cfg) if cfg.task in ("multi", "lcz") else None
        self.p2f = P2F(cfg) if cfg.p2f_enabled else None
        self.task_weights = TaskWeightParams()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: Optional[int] = 0):
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        for name, p in self.named_parameters():
            if name.startswith("task_weights.") or name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".bn." in name:
                nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
            else:
                _kaiming_uniform(p, gen)
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()

    def forward(self, images: torch.Tensor, prior: Optional[torch.Tensor] = None) -> ModelOutput:
        """Run all heads. With P2F enabled and ``prior`` None, the HSE prediction is the prior."""
        if images.dim() != 4 or images.shape[1] != self.cfg.bands:
            raise ShapeError(f"expected [N, {self.cfg.bands}, h, w], got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"patch dims must be divisible by 4, got {(h, w)}")
        feat = self.backbone(images)
        hse = self.hse(feat) if self.hse is not None else None
        if self.lcz is None:
            return ModelOutput(hse=hse, lcz_heads=[], lcz_avg=None)
        att, heads = self.lcz(feat)
        p2f_head = None
        if self.p2f is not None:
            if prior is None:
                prior = hse
            p2f_head = self.p2f(prior, att)
            heads.append(p2f_head)
        avg = torch.stack([upsample_probs(p, (h, w)) for p in heads]).mean(dim=0)
        return ModelOutput(hse=hse, lcz_heads=heads, lcz_avg=avg, p2f_head=p2f_head)


def _kaiming_uniform(p: torch.Tensor, gen: Optional[torch.Generator]):
    # fan-in: depthwise [C,3,3] -> 9, pointwise/linear [out,in] -> in, conv [o,i,k,k] -> i*k*k
    if p.dim() == 3:
        fan_in = p.shape[1] * p.shape[2]
    else:
        fan_in = int(np.prod(p.shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        p.uniform_(-bound, bound, generator=gen)


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    return {
        "backbone": "shared",
        "hse": "hse_branch",
        "lcz": "lcz_branch",
        "p2f": "lcz_branch",
        "task_weights": "task_weights",
    }[head]


def parameter_groups(model: MTLNet) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Named parameters partitioned by group, sorted by name within each group."""
    groups: dict[str, list] = {g: [] for g in PARAM_GROUPS}
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        groups[param_group(name)].append((name, p))
    return groups


def model_forward(
    model: MTLNet,
    batch: SampleBatch,
    train_mode: bool = False,
    prior_source: PriorSource = PriorSource.PREDICTION,
    device: Optional[torch.device] = None,
) -> ModelOutput:
    """Forward a SampleBatch, taking the P2F prior from the reference or the HSE prediction."""
    model.train(train_mode)
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(batch.images, dtype=dtype, device=device)
    prior = None
    if model.p2f is not None and prior_source is PriorSource.REFERENCE:
        if batch.hse_ref is None:
            raise MissingReferenceError("REFERENCE prior requested but batch has no hse_ref")
        prior = torch.as_tensor(batch.hse_ref, dtype=dtype, device=device).unsqueeze(1)
    return model(images, prior=prior)
