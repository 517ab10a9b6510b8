"""Backbones, projection head, and the combined target model.

Each backbone declares its stage channel widths; the entropy predictor taps
exactly those stages. Embeddings are the backbone output before projection;
the projector only feeds the contrastive branch.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x C float array in [0,1] -> N x C x H x W float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class MLPBackbone(nn.Module):
    """Two hidden layers on flattened pixels; both act as predictor stages."""

    def __init__(self, resolution, channels, embed_dim=32, hidden=64):
        super().__init__()
        in_dim = resolution * resolution * channels
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, embed_dim)
        self.embed_dim = embed_dim
        self.stage_channels = [hidden, hidden]

    def forward(self, x, return_stages=False):
        h1 = F.relu(self.fc1(x.flatten(1)))
        h2 = F.relu(self.fc2(h1))
        z = self.fc3(h2)
        if return_stages:
            return z, [h1, h2]
        return z


class ConvBackbone(nn.Module):
    """Three conv blocks with pooling; block outputs are the stages."""

    def __init__(self, channels, embed_dim=64, widths=(32, 64, 128)):
        super().__init__()
        blocks = []
        c_in = channels
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ))
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(widths[-1], embed_dim)
        self.embed_dim = embed_dim
        self.stage_channels = list(widths)

    def forward(self, x, return_stages=False):
        stages = []
        h = x
        for block in self.blocks:
            h = block(h)
            stages.append(h)
        z = self.head(h.mean(dim=(2, 3)))
        if return_stages:
            return z, stages
        return z


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetBackbone(nn.Module):
    """Small residual nets: depth 20 (3 stages) or 18 (4 stages)."""

    def __init__(self, channels, arch="resnet20"):
        super().__init__()
        if arch == "resnet20":
            widths, blocks, strides = (16, 32, 64), (3, 3, 3), (1, 2, 2)
            stem_width, stem_stride = 16, 1
        elif arch == "resnet18":
            widths, blocks, strides = (64, 128, 256, 512), (2, 2, 2, 2), (1, 2, 2, 2)
            stem_width, stem_stride = 64, 2
        else:
            raise ValueError(f"unknown resnet arch {arch!r}")
        self.stem = nn.Sequential(
            nn.Conv2d(channels, stem_width, 3, stride=stem_stride, padding=1, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(inplace=True),
        )
        groups = []
        c_in = stem_width
        for w, n, s in zip(widths, blocks, strides):
            layers = [BasicBlock(c_in, w, s)] + [BasicBlock(w, w) for _ in range(n - 1)]
            groups.append(nn.Sequential(*layers))
            c_in = w
        self.groups = nn.ModuleList(groups)
        self.embed_dim = widths[-1]
        self.stage_channels = list(widths)

    def forward(self, x, return_stages=False):
        h = self.stem(x)
        stages = []
        for group in self.groups:
            h = group(h)
            stages.append(h)
        z = h.mean(dim=(2, 3))
        if return_stages:
            return z, stages
        return z


class Projector(nn.Module):
    """Two-layer map to the contrastive space; callers L2-normalize."""

    def __init__(self, embed_dim, proj_dim=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, embed_dim),
            nn.ReLU(inplace=True),
            nn.Linear(embed_dim, proj_dim),
        )

    def forward(self, z):
        return self.net(z)


def build_backbone(name: str, resolution: int, channels: int, embed_dim: int):
    if name == "mlp":
        return MLPBackbone(resolution, channels, embed_dim)
    if name == "convnet":
        return ConvBackbone(channels, embed_dim)
    if name in ("resnet20", "resnet18"):
        return ResNetBackbone(channels, name)
    raise ValueError(f"unknown backbone {name!r}")


class TargetModel(nn.Module):
    """Backbone + projector + the two multi-task heads (class, transform)."""

    def __init__(self, backbone, proj_dim, total_classes, num_transforms):
        super().__init__()
        self.backbone = backbone
        self.projector = Projector(backbone.embed_dim, proj_dim)
        self.class_head = nn.Linear(backbone.embed_dim, total_classes)
        self.transform_head = nn.Linear(backbone.embed_dim, num_transforms)

    def embed(self, x, return_stages=False):
        return self.backbone(x, return_stages=return_stages)

    def project(self, z):
        return F.normalize(self.projector(z), dim=-1, eps=1e-12)


def clone_model(model: nn.Module) -> nn.Module:
    """Detached deep copy used to start a momentum (key) network."""
    twin = copy.deepcopy(model)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin
