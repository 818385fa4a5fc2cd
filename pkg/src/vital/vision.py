"""Small residual convnet backbone producing a g x g x d feature map."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class BackboneOutput:
    feature_map: torch.Tensor  # B x d x g x g
    pooled: torch.Tensor  # B x d


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        return F.relu(self.conv2(h) + self.skip(x))


class Backbone(nn.Module):
    """Three stride-2 residual blocks: ``size -> size / 8`` spatially, ``d`` channels out."""

    def __init__(self, in_size=32, widths=(16, 32, 64), d=None):
        super().__init__()
        widths = list(widths)
        if d is not None:
            widths[-1] = d
        self.in_size = in_size
        self.d = widths[-1]
        chans = [3] + widths
        self.blocks = nn.Sequential(*(ResidualBlock(a, b) for a, b in zip(chans, chans[1:])))

    def forward(self, images) -> BackboneOutput:
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-1] != self.in_size or images.shape[-2] != self.in_size:
            raise ValueError(f"backbone expects B x 3 x {self.in_size} x {self.in_size}, got {tuple(images.shape)}")
        fmap = self.blocks(images)
        return BackboneOutput(fmap, fmap.mean(dim=(2, 3)))


def extract_real_feature(x, backbone: Backbone):
    return backbone(x).pooled
