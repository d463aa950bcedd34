"""Turn a genome into a fully convolutional encoder-decoder network."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError
from .genome import DEFAULT_SKELETON, ArchGenome, Skeleton


class ConvOp(nn.Sequential):
    def __init__(self, cin, cout, k, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class PoolOp(nn.Module):
    """Size-4 pooling; stride 2 halves the grid, stride 1 keeps it."""

    def __init__(self, kind, stride):
        super().__init__()
        self.kind, self.stride = kind, stride

    def forward(self, x):
        if self.stride == 2:
            x = F.pad(x, (1, 1, 1, 1), mode="replicate")
        else:
            x = F.pad(x, (1, 2, 1, 2), mode="replicate")
        pool = F.max_pool2d if self.kind == "maxpool4" else F.avg_pool2d
        return pool(x, 4, self.stride)


def make_op(name, cin, cout, stride=1):
    if name.startswith("conv"):
        return ConvOp(cin, cout, int(name[4:]), stride)
    if cin != cout:
        raise ConfigError(f"{name} cannot change width {cin}->{cout}")
    return PoolOp(name, stride)


class SearchedUNet(nn.Module):
    def __init__(self, genome: ArchGenome, in_channels, skeleton: Skeleton = DEFAULT_SKELETON):
        super().__init__()
        genome.validate(skeleton)
        if in_channels < 1:
            raise ConfigError("model needs at least one input channel")
        self.genome, self.skeleton, self.in_channels = genome, skeleton, in_channels
        ops = dict(zip(skeleton.slots, genome.genes))
        w = skeleton.widths
        d = skeleton.depth
        self.enc, self.down = nn.ModuleList(), nn.ModuleList()
        c = in_channels
        for i in range(d):
            self.enc.append(make_op(ops[f"enc{i}"], c, w[i]))
            self.down.append(make_op(ops[f"down{i}"], w[i], w[i], stride=2))
            c = w[i]
        self.mid = make_op(ops["mid"], c, c)
        self.up, self.dec = nn.ModuleList(), nn.ModuleList()
        for i in reversed(range(d)):
            self.up.append(make_op(ops[f"up{i}"], c, c))
            self.dec.append(make_op(ops[f"dec{i}"], c + w[i], w[i]))
            c = w[i]
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        f = self.skeleton.downsample
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ConfigError(f"input {tuple(x.shape[-2:])} is not divisible by {f}")
        skips = []
        for enc, down in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.mid(x)
        for up, dec in zip(self.up, self.dec):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)[:, 0]


def build_model(genome: ArchGenome, in_channels, skeleton: Skeleton = DEFAULT_SKELETON):
    return SearchedUNet(genome, in_channels, skeleton)


def describe(model: SearchedUNet):
    """Node list (slot, op, input) of the built DAG; every node has one input."""
    sk = model.skeleton
    nodes, prev = [], "input"
    ops = dict(zip(sk.slots, model.genome.genes))
    for i in range(sk.depth):
        nodes.append((f"enc{i}", ops[f"enc{i}"], prev))
        nodes.append((f"down{i}", ops[f"down{i}"], f"enc{i}"))
        prev = f"down{i}"
    nodes.append(("mid", ops["mid"], prev))
    prev = "mid"
    for i in reversed(range(sk.depth)):
        nodes.append((f"up{i}", ops[f"up{i}"], prev))
        # the decoder's single input is the concatenation node merging the skip
        nodes.append((f"dec{i}", ops[f"dec{i}"], f"cat(up{i},enc{i})"))
        prev = f"dec{i}"
    nodes.append(("head", "conv1", prev))
    return nodes
