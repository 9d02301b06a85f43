"""Continuously relaxed multi-branch supernet and the building blocks it shares
with derived (discrete) networks.

Branch ``b`` (1-based) runs at scale ``2**(b+1)``: its feature maps are
``ceil(H / 2**(b+1)) x ceil(W / 2**(b+1))``.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchConfig, SupernetConfig
from .genotype import (
    AGGREGATION,
    OPS,
    aggregation_branch_edges,
    aggregation_intra_edges,
    cell_key,
    cell_keys,
    cell_num_nodes,
    individual_edges,
    num_edges,
)

MODES = ("gumbel", "softmax", "argmax")


class ShapeError(ValueError):
    pass


def branch_size(size: tuple[int, int], branch: int) -> tuple[int, int]:
    s = 2 ** (branch + 1)
    return (math.ceil(size[0] / s), math.ceil(size[1] / s))


def check_input_size(h: int, w: int) -> None:
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"input size {h}x{w} must be even in both dimensions")


def make_op(name: str, channels: int, track_stats: bool = False,
            preactivation: bool = False) -> nn.Module:
    if name.startswith("conv"):
        k = int(name[4])
        conv = nn.Conv2d(channels, channels, k, padding=k // 2, bias=False)
        bn = nn.BatchNorm2d(channels, track_running_stats=track_stats)
        if preactivation:
            return nn.Sequential(nn.ReLU(), conv, bn)
        return nn.Sequential(conv, bn, nn.ReLU())
    if name == "avgpool3x3":
        return nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    if name == "maxpool3x3":
        return nn.MaxPool2d(3, stride=1, padding=1)
    if name == "skip":
        return nn.Identity()
    raise ValueError(f"unknown op {name!r}")


def sample_gumbel(shape, generator: torch.Generator | None = None,
                  dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))


def mixing_weights(alpha: torch.Tensor, temperature: float,
                   noise: torch.Tensor | None = None) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = alpha if noise is None else alpha + noise
    return F.softmax(logits / temperature, dim=-1)


def gumbel_softmax_mix(alpha_edge: torch.Tensor, inputs_per_op: Sequence[torch.Tensor],
                       temperature: float, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Mix one output per op with weights softmax((alpha + noise) / temperature)."""
    if len(inputs_per_op) != alpha_edge.shape[-1]:
        raise ShapeError(f"{len(inputs_per_op)} inputs for {alpha_edge.shape[-1]} logits")
    shape = inputs_per_op[0].shape
    if any(t.shape != shape for t in inputs_per_op):
        raise ShapeError("all op outputs must share one shape")
    w = mixing_weights(alpha_edge, temperature, noise)
    return sum(w[k] * t for k, t in enumerate(inputs_per_op))


def alpha_entropy(alphas) -> float:
    """Sum over edges of the Shannon entropy (nats) of softmax(alpha_edge)."""
    if isinstance(alphas, torch.Tensor):
        alphas = [alphas]
    elif isinstance(alphas, dict) or hasattr(alphas, "values"):
        alphas = list(alphas.values())
    total = 0.0
    with torch.no_grad():
        for a in alphas:
            logp = F.log_softmax(a.double(), dim=-1)
            total += float(-(logp.exp() * logp).sum())
    return total


class MixedOp(nn.Module):
    """All six candidate ops on one edge; ``forward`` takes mixing weights or an op index."""

    def __init__(self, channels: int, track_stats: bool = False, preactivation: bool = False):
        super().__init__()
        self.ops = nn.ModuleList(make_op(name, channels, track_stats, preactivation)
                                 for name in OPS)

    def forward(self, x, weights):
        if isinstance(weights, int):
            return self.ops[weights](x)
        return sum(w * op(x) for w, op in zip(weights, self.ops))


class FixedOp(nn.Module):
    def __init__(self, name: str, channels: int, track_stats: bool = True,
                 preactivation: bool = False):
        super().__init__()
        self.name = name
        self.op = make_op(name, channels, track_stats, preactivation)

    def forward(self, x, weights=None):
        return self.op(x)


EdgeFactory = Callable[[int, int], nn.Module]  # (edge index, channels) -> edge module


class IndividualCell(nn.Module):
    def __init__(self, channels: int, num_nodes: int, edge_factory: EdgeFactory):
        super().__init__()
        self.channels = channels
        self.num_nodes = num_nodes
        self.edges = nn.ModuleList(edge_factory(e, channels)
                                   for e in range(len(individual_edges(num_nodes))))
        self.out = nn.Conv2d(num_nodes * channels, channels, 1, bias=False)

    def forward(self, x, weights=None):
        if x.shape[1] != self.channels:
            raise ShapeError(f"cell expects {self.channels} channels, got {x.shape[1]}")
        nodes = [x]
        e = 0
        for i in range(1, self.num_nodes + 1):
            acc = 0
            for j in range(i):
                acc = acc + self.edges[e](nodes[j], _w(weights, e))
                e += 1
            nodes.append(acc)
        return self.out(torch.cat(nodes[1:], dim=1))


def _w(weights, e):
    if weights is None:
        return None
    if isinstance(weights, (list, tuple)):
        return weights[e]
    return weights[e]


class Resample(nn.Module):
    """Bring branch ``src`` to the scale and width of branch ``dst``."""

    def __init__(self, c_in: int, c_out: int, src: int, dst: int, track_stats: bool = False):
        super().__init__()
        self.src, self.dst = src, dst
        stride = 2 ** (dst - src) if dst > src else 1
        self.proj = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)
        self.bn = nn.BatchNorm2d(c_out, track_running_stats=track_stats)

    def forward(self, x, size):
        if self.src > self.dst:
            x = F.interpolate(x, size=size, mode="nearest")
        return self.bn(self.proj(x))


class AggregationCell(nn.Module):
    def __init__(self, branch: int, channels: Sequence[int], num_nodes: int,
                 edge_factory: EdgeFactory, track_stats: bool = False):
        super().__init__()
        self.branch = branch
        self.num_nodes = num_nodes
        c = channels[branch - 1]
        self.channels = c
        self.resample = nn.ModuleList(
            Resample(channels[s - 1], c, s, branch, track_stats)
            for s in range(1, len(channels) + 1))
        n_intra = len(aggregation_intra_edges(num_nodes))
        n_cross = len(aggregation_branch_edges(num_nodes, len(channels)))
        self.intra = nn.ModuleList(edge_factory(e, c) for e in range(n_intra))
        self.cross = nn.ModuleList(edge_factory(n_intra + e, c) for e in range(n_cross))
        self.out = nn.Conv2d(num_nodes * c, c, 1, bias=False)
        # test hook: drop every branch-edge contribution
        self.mask_branch_edges = False

    def forward(self, inputs: Sequence[torch.Tensor], size, weights=None):
        if len(inputs) != len(self.resample):
            raise ShapeError(f"aggregation cell needs {len(self.resample)} branch inputs, "
                             f"got {len(inputs)}")
        xs = [r(x, size) for r, x in zip(self.resample, inputs)]
        n_intra = len(self.intra)
        nodes = [None]
        e_intra = e_cross = 0
        for i in range(1, self.num_nodes + 1):
            acc = 0
            for j in range(1, i):
                acc = acc + self.intra[e_intra](nodes[j], _w(weights, e_intra))
                e_intra += 1
            for b in range(len(xs)):
                if not self.mask_branch_edges:
                    acc = acc + self.cross[e_cross](xs[b], _w(weights, n_intra + e_cross))
                e_cross += 1
            if isinstance(acc, int):
                acc = torch.zeros_like(xs[self.branch - 1])
            nodes.append(acc)
        return self.out(torch.cat(nodes[1:], dim=1))


class ConcatFusion(nn.Module):
    """Aggregation replacement for the no-aggregation ablation: resample, concatenate, 1x1 conv."""

    def __init__(self, branch: int, channels: Sequence[int], track_stats: bool = False):
        super().__init__()
        self.branch = branch
        c = channels[branch - 1]
        self.resample = nn.ModuleList(
            Resample(channels[s - 1], c, s, branch, track_stats)
            for s in range(1, len(channels) + 1))
        self.out = nn.Conv2d(len(channels) * c, c, 1, bias=False)

    def forward(self, inputs, size, weights=None):
        return self.out(torch.cat([r(x, size) for r, x in zip(self.resample, inputs)], dim=1))


class BranchCells(nn.Module):
    def __init__(self, i1: nn.Module, i2: nn.Module, m: nn.Module):
        super().__init__()
        self.i1, self.i2, self.m = i1, i2, m


class MultiScaleModule(nn.Module):
    """B parallel branches; active branches run I1 -> I2 -> aggregation, inactive ones skip."""

    def __init__(self, arch: ArchConfig, channels: Sequence[int],
                 edge_factory: Callable[[int, str], EdgeFactory],
                 active: Sequence[int] | None = None, track_stats: bool = False):
        super().__init__()
        self.arch = arch
        self.branches = len(channels)
        active = range(1, self.branches + 1) if active is None else active
        self.cells = nn.ModuleDict()
        for b in active:
            c = channels[b - 1]
            i1 = IndividualCell(c, arch.nodes_individual, edge_factory(b, "I1"))
            i2 = IndividualCell(c, arch.nodes_individual, edge_factory(b, "I2"))
            if arch.has_aggregation_cells:
                m = AggregationCell(b, channels, arch.nodes_aggregation, edge_factory(b, "M"),
                                    track_stats)
            else:
                m = ConcatFusion(b, channels, track_stats)
            self.cells[str(b)] = BranchCells(i1, i2, m)

    def forward(self, xs: Sequence[torch.Tensor], beta: Sequence[int],
                weights_for: Callable[[int, str], object] = lambda b, p: None):
        if len(beta) != self.branches:
            raise ShapeError(f"scale vector of length {len(beta)} for {self.branches} branches")
        hs = []
        for b, x in enumerate(xs, start=1):
            if beta[b - 1]:
                cells = self.cells[str(b)]
                h = cells.i1(x, weights_for(b, "I1"))
                hs.append(cells.i2(h, weights_for(b, "I2")))
            else:
                hs.append(x)
        out = []
        for b, x in enumerate(xs, start=1):
            if beta[b - 1]:
                out.append(self.cells[str(b)].m(hs, x.shape[-2:], weights_for(b, "M")))
            else:
                out.append(x)
        return out


def conv_bn_relu(c_in, c_out, k=3, stride=1, track_stats=False):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(c_out, track_running_stats=track_stats),
        nn.ReLU(),
    )


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, c_in: int, c_out: int, track_stats: bool = False):
        super().__init__()
        mid = max(1, c_out // self.expansion)
        self.conv1 = conv_bn_relu(c_in, mid, 1, track_stats=track_stats)
        self.conv2 = conv_bn_relu(mid, mid, 3, track_stats=track_stats)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c_out, track_running_stats=track_stats)
        self.downsample = None
        if c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, bias=False),
                nn.BatchNorm2d(c_out, track_running_stats=track_stats))

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = self.bn3(self.conv3(self.conv2(self.conv1(x))))
        return F.relu(out + residual)


class Stem(nn.Module):
    """Two stride-2 3x3 convs and a bottleneck give the 4x map; stride-2 convs give the rest."""

    def __init__(self, channels: Sequence[int], width: int, track_stats: bool = False):
        super().__init__()
        self.conv1 = conv_bn_relu(3, width, 3, 2, track_stats)
        self.conv2 = conv_bn_relu(width, width, 3, 2, track_stats)
        self.bottleneck = Bottleneck(width, channels[0], track_stats)
        self.down = nn.ModuleList(conv_bn_relu(channels[b], channels[b + 1], 3, 2, track_stats)
                                  for b in range(len(channels) - 1))

    def forward(self, image):
        check_input_size(image.shape[-2], image.shape[-1])
        x = self.bottleneck(self.conv2(self.conv1(image)))
        out = [x]
        for down in self.down:
            out.append(down(out[-1]))
        return out


class Head(nn.Module):
    """Nearest-upsample every branch to the 4x map, fuse, 3x3 conv to keypoint heatmaps."""

    def __init__(self, channels: Sequence[int], num_keypoints: int, fusion: str = "concat"):
        super().__init__()
        if fusion not in ("concat", "sum"):
            raise ValueError(f"unknown head fusion {fusion!r}")
        self.fusion = fusion
        if fusion == "sum":
            self.proj = nn.ModuleList(nn.Conv2d(c, channels[0], 1, bias=False)
                                      for c in channels)
            width = channels[0]
        else:
            width = sum(channels)
        self.final = nn.Conv2d(width, num_keypoints, 3, padding=1)

    def forward(self, xs):
        size = xs[0].shape[-2:]
        ups = [xs[0]] + [F.interpolate(x, size=size, mode="nearest") for x in xs[1:]]
        if self.fusion == "sum":
            fused = sum(p(u) for p, u in zip(self.proj, ups))
        else:
            fused = torch.cat(ups, dim=1)
        return self.final(fused)


def alpha_name(key: tuple[int, str]) -> str:
    return f"b{key[0]}_{key[1]}"


def expand_scales(arch: ArchConfig, scales) -> list[tuple[int, ...]]:
    """Per-module scale vectors from per-stage (broadcast) or per-module input."""
    scales = [tuple(int(v) for v in s) for s in scales]
    if len(scales) == arch.num_modules:
        return scales
    if len(scales) == arch.num_stages:
        return [s for s in scales for _ in range(arch.modules_per_stage)]
    raise ShapeError(f"expected {arch.num_stages} stage or {arch.num_modules} module scale "
                     f"vectors, got {len(scales)}")


class Supernet(nn.Module):
    def __init__(self, cfg: SupernetConfig):
        super().__init__()
        self.cfg = cfg
        arch = self.arch = cfg.arch
        arch.validate()
        channels = arch.channels
        self.stem = Stem(channels, cfg.stem_width)

        def edge_factory(branch, position):
            return lambda e, c: MixedOp(c, preactivation=cfg.preactivation)

        self.cells = nn.ModuleList(MultiScaleModule(arch, channels, edge_factory)
                                   for _ in range(arch.num_modules))
        self.head = Head(channels, cfg.num_keypoints, cfg.head_fusion)
        self.alphas = nn.ParameterDict()
        for key in cell_keys(arch):
            e = num_edges(key[1], cell_num_nodes(arch, key[1]), arch.branches)
            self.alphas[alpha_name(key)] = nn.Parameter(torch.zeros(e, len(OPS)))

    def weight_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("alphas.")]

    def arch_parameters(self):
        return list(self.alphas.values())

    def edge_weights(self, mode: str = "gumbel", tau: float = 1.0,
                     generator: torch.Generator | None = None, noise: dict | None = None):
        """Mixing weights per alpha tensor: (E, 6) simplex rows, or argmax op indices."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        out = {}
        for name, alpha in self.alphas.items():
            if mode == "argmax":
                out[name] = [int(i) for i in alpha.detach().argmax(dim=-1)]
            elif mode == "softmax":
                out[name] = mixing_weights(alpha, tau)
            else:
                g = noise[name] if noise is not None else sample_gumbel(
                    alpha.shape, generator, alpha.dtype)
                out[name] = mixing_weights(alpha, tau, g)
        return out

    def forward(self, image, scales, mode: str = "gumbel", tau: float = 1.0,
                generator: torch.Generator | None = None, noise: dict | None = None):
        weights = self.edge_weights(mode, tau, generator, noise)

        def weights_for(branch, position):
            key = cell_key(self.arch, branch, position)
            if key[1] == AGGREGATION and not self.arch.has_aggregation_cells:
                return None
            return weights[alpha_name(key)]

        xs = self.stem(image)
        for module, beta in zip(self.cells, expand_scales(self.arch, scales)):
            xs = module(xs, beta, weights_for)
        return self.head(xs)

    def features(self, image, scales, mode="softmax", tau=1.0):
        """Branch features after the last module (no head); used by shape tests."""
        weights = self.edge_weights(mode, tau)
        xs = self.stem(image)
        for module, beta in zip(self.cells, expand_scales(self.arch, scales)):
            xs = module(xs, beta, lambda b, p: weights.get(
                alpha_name(cell_key(self.arch, b, p))))
        return xs


def temperature(cfg: SupernetConfig, epoch: int, total_epochs: int) -> float:
    """Linear anneal from tau_start (first epoch) to tau_end (last epoch)."""
    if total_epochs <= 1:
        return cfg.tau_start
    frac = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac
