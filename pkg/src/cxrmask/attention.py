"""Multi-scale spatial attention gate applied to the image before the backbone.

Three parallel views of the input (identity plus one learned convolution per
configured kernel size) each contribute a channel-max and channel-mean map.
The stacked statistics are fused by a single wide convolution and squashed
with a sigmoid into a one-channel gate that multiplies the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class AttentionConfig:
    scale_kernels: tuple[int, ...] = (5, 9)
    gate_kernel: int = 7

    def __post_init__(self):
        if len(self.scale_kernels) < 1:
            raise ValueError("need at least one learned scale branch")
        for k in (*self.scale_kernels, self.gate_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernels must be odd and >= 1, got {k}")


def channel_pool(feature: torch.Tensor) -> torch.Tensor:
    """Stack the per-position channel maximum and channel mean.

    Accepts (c, h, w) or (batch, c, h, w); the channel axis collapses to 2
    (max first, mean second) and spatial dims are preserved.
    """
    if feature.dim() not in (3, 4):
        raise ValueError(f"expected (c,h,w) or (b,c,h,w), got {tuple(feature.shape)}")
    dim = feature.dim() - 3
    maxmap = feature.max(dim=dim, keepdim=True).values
    meanmap = feature.mean(dim=dim, keepdim=True)
    return torch.cat([maxmap, meanmap], dim=dim)


class MultiScaleAttention(nn.Module):
    """Spatial gate from channel statistics of the image at several scales.

    forward(image) returns (gated_image, gate); the gate is a single-channel
    sigmoid map broadcast-multiplied over the image channels, so the output
    never exceeds the input in magnitude and shapes are preserved.
    """

    def __init__(self, config: AttentionConfig = AttentionConfig(), in_channels: int = 3):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        # each learned branch keeps the image width so channel statistics are
        # comparable across scales; the identity branch has no weights
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, in_channels, k, stride=1, padding=k // 2)
            for k in config.scale_kernels
        )
        pooled_channels = 2 * (1 + len(config.scale_kernels))
        self.fuse = nn.Conv2d(
            pooled_channels, 1, config.gate_kernel, stride=1,
            padding=config.gate_kernel // 2,
        )

    def forward(self, image: torch.Tensor):
        squeeze = image.dim() == 3
        x = image[None] if squeeze else image
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected ({self.in_channels},H,W) or (B,{self.in_channels},H,W), "
                f"got {tuple(image.shape)}"
            )
        features = [x] + [branch(x) for branch in self.branches]
        pooled = torch.cat([channel_pool(f) for f in features], dim=1)
        gate = torch.sigmoid(self.fuse(pooled))
        gated = x * gate
        if squeeze:
            return gated[0], gate[0]
        return gated, gate
