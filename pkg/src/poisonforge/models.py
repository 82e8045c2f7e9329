"""Backbones and the dual-head model shared by attacks and victims.

A DualHeadModel is one backbone feeding (a) a linear classification head and
(b) a two-layer projection head whose output is unit-normalized for the
contrastive losses. Linear probes read the pre-projection backbone features.
"""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("small_cnn", "resnet18_like")


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class SmallCNN(nn.Module):
    """Four conv blocks with global average pooling, ~0.3M parameters."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        widths = (32, 64, 128, 128)
        blocks = []
        prev = in_channels
        for w in widths:
            blocks.append(_conv_block(prev, w))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = prev

    def forward(self, x):
        h = self.blocks(x)
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18Backbone(nn.Module):
    """ResNet-18 with a 3x3 stride-1 stem and no initial pooling (32x32 inputs)."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        stages = []
        c_in = 64
        for c_out, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            stages.append(BasicBlock(c_in, c_out, stride))
            stages.append(BasicBlock(c_out, c_out, 1))
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.feature_dim = c_in

    def forward(self, x):
        h = self.stages(self.stem(x))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


class DualHeadModel(nn.Module):
    def __init__(self, backbone: nn.Module, class_count: int, embed_dim: int, arch: str):
        super().__init__()
        self.backbone = backbone
        self.sup_head = nn.Linear(backbone.feature_dim, class_count)
        self.proj_head = nn.Sequential(
            nn.Linear(backbone.feature_dim, backbone.feature_dim),
            nn.ReLU(inplace=True),
            nn.Linear(backbone.feature_dim, embed_dim),
        )
        self.arch = arch
        self.class_count = class_count
        self.embed_dim = embed_dim

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def features(self, x):
        return self.backbone(x)

    def logits(self, x):
        return self.sup_head(self.backbone(x))

    def embed(self, x):
        return F.normalize(self.proj_head(self.backbone(x)), dim=1)

    def sup_parameters(self):
        return list(self.backbone.parameters()) + list(self.sup_head.parameters())

    def cl_parameters(self):
        return list(self.backbone.parameters()) + list(self.proj_head.parameters())


def _init_parameters(model: nn.Module, gen: torch.Generator):
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def build_model(
    arch: str,
    class_count: int,
    embed_dim: int = 128,
    gen: torch.Generator | None = None,
    in_channels: int = 3,
) -> DualHeadModel:
    if arch == "small_cnn":
        backbone = SmallCNN(in_channels)
    elif arch == "resnet18_like":
        backbone = ResNet18Backbone(in_channels)
    else:
        raise ValueError(f"unknown arch {arch!r}, expected one of {ARCHS}")
    model = DualHeadModel(backbone, class_count, embed_dim, arch)
    if gen is None:
        gen = torch.Generator().manual_seed(0)
    _init_parameters(model, gen)
    return model


class MomentumSGD:
    """SGD with momentum and decoupled-from-nothing weight decay:

        v <- momentum * v + grad + weight_decay * theta
        theta <- theta - lr * v

    Matches torch.optim.SGD semantics; kept explicit so velocity buffers can
    be primed and inspected directly.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        if not self.params:
            raise ValueError("no parameters to optimize")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: list[torch.Tensor | None] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("grads must align with params")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(
                    f"grad shape {tuple(g.shape)} does not match param shape {tuple(p.shape)}"
                )
            g = g + self.weight_decay * p
            v = self.velocity[i]
            if v is None:
                v = torch.zeros_like(p)
                self.velocity[i] = v
            v.mul_(self.momentum).add_(g)
            p.add_(v, alpha=-self.lr)


def state_checksum(model: nn.Module) -> str:
    """sha256 over all parameters and buffers, order-stable by name."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: DualHeadModel, path, extra: dict | None = None):
    payload = {
        "arch": model.arch,
        "class_count": model.class_count,
        "embed_dim": model.embed_dim,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DualHeadModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = build_model(payload["arch"], payload["class_count"], payload["embed_dim"])
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
