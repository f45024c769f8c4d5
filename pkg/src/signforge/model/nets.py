"""Compact classifier architectures for desk-scale sign recognition."""

from __future__ import annotations

import torch
import torch.nn as nn

ARCHITECTURES = ("small_conv", "resnet_like", "mobilenet_like")


class Classifier(nn.Module):
    """Base class: maps (B, 3, H, W) images in [0, 1] to (B, n_classes) logits."""

    arch = "base"

    def __init__(self, n_classes: int, image_size: int):
        super().__init__()
        self.n_classes = n_classes
        self.image_size = image_size
        self.history: list[dict] = []

    def forward(self, x):
        return self.body((x - 0.5) / 0.25)


def _conv_bn(c_in, c_out, stride, groups=1, act=nn.ReLU):
    return [
        nn.Conv2d(c_in, c_out, 3, stride, 1, groups=groups, bias=False),
        nn.BatchNorm2d(c_out),
        act(),
    ]


class SmallConv(Classifier):
    """Three stride-2 conv blocks (32/64/128 channels) and two dense layers."""

    arch = "small_conv"

    def __init__(self, n_classes, image_size, channels=(32, 64, 128), hidden=128):
        super().__init__(n_classes, image_size)
        layers, c_in = [], 3
        for c in channels:
            layers += _conv_bn(c_in, c, 2)
            c_in = c
        self.body = nn.Sequential(
            *layers,
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(c_in * 16, hidden),
            nn.ReLU(),
            nn.Linear(hidden, n_classes),
        )


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv = nn.Sequential(
            *_conv_bn(c_in, c_out, stride),
            nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False),
            nn.BatchNorm2d(c_out),
        )
        self.skip = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.conv(x) + self.skip(x))


class ResNetLike(Classifier):
    arch = "resnet_like"

    def __init__(self, n_classes, image_size, widths=(32, 64, 128)):
        super().__init__(n_classes, image_size)
        blocks, c_in = [], widths[0]
        for k, c in enumerate(widths):
            blocks.append(_BasicBlock(c_in, c, 1 if k == 0 else 2))
            c_in = c
        self.body = nn.Sequential(
            *_conv_bn(3, widths[0], 2),
            *blocks,
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(c_in, n_classes),
        )


class _InvertedResidual(nn.Module):
    def __init__(self, c_in, c_out, stride, expand=4):
        super().__init__()
        mid = c_in * expand
        self.block = nn.Sequential(
            nn.Conv2d(c_in, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU6(),
            *_conv_bn(mid, mid, stride, groups=mid, act=nn.ReLU6),
            nn.Conv2d(mid, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out),
        )
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x):
        out = self.block(x)
        return x + out if self.residual else out


class MobileNetLike(Classifier):
    arch = "mobilenet_like"

    def __init__(self, n_classes, image_size, widths=(16, 24, 32, 64)):
        super().__init__(n_classes, image_size)
        layers = _conv_bn(3, widths[0], 2, act=nn.ReLU6)
        c_in = widths[0]
        for c, s in zip(widths[1:], (2, 1, 2)):
            layers.append(_InvertedResidual(c_in, c, s))
            c_in = c
        self.body = nn.Sequential(
            *layers,
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(c_in, n_classes),
        )


_BUILDERS = {"small_conv": SmallConv, "resnet_like": ResNetLike, "mobilenet_like": MobileNetLike}


def build_model(arch: str, n_classes: int, image_size: int, seed: int = 0) -> Classifier:
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _BUILDERS[arch](n_classes, image_size)
    return model


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
