"""Feature-map backbones behind a single interface: forward(image) returns
the last convolutional feature map, and .out_channels names its width."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class DenseNetBackbone(nn.Module):
    """121-layer densely-connected backbone; 224 input -> 1024 x 7 x 7."""

    out_channels = 1024

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision import models

        weights = models.DenseNet121_Weights.DEFAULT if pretrained else None
        self.features = models.densenet121(weights=weights).features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.features(x))


class TinyBackbone(nn.Module):
    """Four stride-2 conv blocks for desk-scale runs; 64 input -> 64 x 4 x 4."""

    out_channels = 64

    def __init__(self, pretrained: bool = False):
        super().__init__()
        del pretrained  # nothing to load
        widths = [16, 32, 64, 64]
        layers: list[nn.Module] = []
        ch = 3
        for w in widths:
            layers += [
                nn.Conv2d(ch, w, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(8 if w % 8 == 0 else 1, w),
                nn.ReLU(inplace=True),
            ]
            ch = w
        self.features = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


BACKBONES = {
    "densenet121": DenseNetBackbone,
    "tiny": TinyBackbone,
}


def build_backbone(name: str, pretrained: bool = False) -> nn.Module:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; options: {sorted(BACKBONES)}")
    return BACKBONES[name](pretrained=pretrained)
