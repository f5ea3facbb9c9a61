"""Task-specific attention adapters: group channel attention + conv block.

Every learnable tensor of the method lives in :class:`AdapterParams`: one
:class:`AdapterLayer` per pyramid level, the per-level attention projections
used by the mask head, and the pixel classifier.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError


class NumericalError(FloatingPointError):
    pass


class GroupChannelAttention(nn.Module):
    """Sigmoid gating of each ``g``-channel group from its pooled response.

    One two-layer bottleneck ``W2 relu(W1 gap(G_k))`` is shared by all groups
    of the layer; no biases.
    """

    def __init__(self, channels: int, group_size: int = 16, proj_dim: int = 16, enabled: bool = True):
        super().__init__()
        if group_size < 1 or proj_dim < 1:
            raise ConfigError("group size and projection width must be >= 1")
        if channels % group_size:
            raise ConfigError(f"group size {group_size} does not divide {channels} channels")
        self.channels = channels
        self.group_size = group_size
        self.groups = channels // group_size
        self.enabled = enabled
        self.w1 = nn.Parameter(torch.zeros(proj_dim, group_size))
        self.w2 = nn.Parameter(torch.zeros(group_size, proj_dim))
        if not enabled:
            self.w1.requires_grad_(False)
            self.w2.requires_grad_(False)

    def saliency(self, x: torch.Tensor) -> torch.Tensor:
        """Per-group channel weights, ``[B, groups, g]`` in (0, 1)."""
        b = x.shape[0]
        gap = x.mean(dim=(2, 3)).reshape(b, self.groups, self.group_size)
        return torch.sigmoid(F.relu(gap @ self.w1.T) @ self.w2.T)

    def forward(self, x):
        if not self.enabled:
            return x
        a = self.saliency(x)
        return x * a.reshape(x.shape[0], self.channels, 1, 1)


def group_channel_attention(features: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor, group_size: int) -> torch.Tensor:
    """Functional form on a single ``[C, H, W]`` map."""
    c = features.shape[0]
    if c % group_size:
        raise ConfigError(f"group size {group_size} does not divide {c} channels")
    groups = features.reshape(c // group_size, group_size, *features.shape[1:])
    gap = groups.mean(dim=(2, 3))
    a = torch.sigmoid(F.relu(gap @ w1.T) @ w2.T)
    return (groups * a[:, :, None, None]).reshape(features.shape)


class AdapterLayer(nn.Module):
    """GCA followed by ``conv3x3 -> BN -> ReLU -> conv3x3``."""

    def __init__(self, channels: int, width: int = 32, group_size: int = 16, proj_dim: int = 16,
                 gca_enabled: bool = True, layer_id: str = ""):
        super().__init__()
        self.layer_id = layer_id
        self.gca = GroupChannelAttention(channels, group_size, proj_dim, gca_enabled)
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.bn = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def adapt_features(self, fe: torch.Tensor) -> torch.Tensor:
        out = self.conv2(F.relu(self.bn(self.conv1(fe))))
        if not torch.isfinite(out).all():
            raise NumericalError(f"non-finite adapted features in layer {self.layer_id or '?'}")
        return out

    def forward(self, x):
        return self.adapt_features(self.gca(x))


class ProjectionLayer(nn.Module):
    """Plain 1x1 channel projection; the no-adapter reference."""

    def __init__(self, channels: int, width: int = 32, layer_id: str = ""):
        super().__init__()
        self.layer_id = layer_id
        self.proj = nn.Conv2d(channels, width, 1)

    def forward(self, x):
        return self.proj(x)


class AdapterParams(nn.Module):
    def __init__(self, channels: Sequence[int], width: int = 32, group_size: int = 16, proj_dim: int = 16,
                 gca_enabled: bool = True, heads: int = 4, head_dim: int = 16,
                 layer_ids: Sequence[str] | None = None, kind: str = "tsaa"):
        super().__init__()
        from .seg_head import AttentionParams

        layer_ids = list(layer_ids or [f"layer{i + 1}" for i in range(len(channels))])
        self.channels = list(channels)
        self.width = width
        if kind == "tsaa":
            layers = (AdapterLayer(c, width, group_size, proj_dim, gca_enabled, lid) for c, lid in zip(channels, layer_ids))
        elif kind == "projection":
            layers = (ProjectionLayer(c, width, lid) for c, lid in zip(channels, layer_ids))
        else:
            raise ValueError(f"unknown adapter kind {kind!r}")
        self.kind = kind
        self.per_layer = nn.ModuleList(layers)
        self.attention = nn.ModuleList(AttentionParams(width, heads, head_dim) for _ in channels)
        self.classifier_head = nn.Conv2d(width * len(channels), 2, 1)

    def __len__(self):
        return len(self.per_layer)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyramid) != len(self.per_layer):
            raise ValueError(f"pyramid has {len(pyramid)} layers, adapter {len(self.per_layer)}")
        return [layer(f) for layer, f in zip(self.per_layer, pyramid)]

    def num_learnable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def checksum(self, include_buffers: bool = False) -> str:
        import hashlib

        h = hashlib.sha256()
        tensors = self.state_dict() if include_buffers else dict(self.named_parameters())
        for name, t in sorted(tensors.items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def init_adapter(channels: Sequence[int], cfg, layer_ids: Sequence[str] | None = None) -> AdapterParams:
    """Deterministic initialisation from ``cfg.adapter.seed``.

    Convs use fan-in (Kaiming) scaling; GCA uses a moderate ``W1`` and a tiny
    ``W2`` so every gate starts near 0.5.
    """
    for c in channels:
        if c % cfg.gca.group_size:
            raise ConfigError(f"gca.group_size {cfg.gca.group_size} does not divide {c} channels")
    params = AdapterParams(channels, cfg.adapter.width, cfg.gca.group_size, cfg.gca.proj_dim, cfg.gca.enabled,
                           cfg.attention.heads, cfg.attention.head_dim, layer_ids, cfg.adapter.kind)
    g = torch.Generator().manual_seed(cfg.adapter.seed)
    with torch.no_grad():
        for layer in params.per_layer:
            if isinstance(layer, ProjectionLayer):
                fan_in = layer.proj.in_channels
                layer.proj.weight.copy_(torch.randn(layer.proj.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                layer.proj.bias.zero_()
                continue
            gsz = layer.gca.group_size
            layer.gca.w1.copy_((torch.rand(layer.gca.w1.shape, generator=g) * 2 - 1) / gsz ** 0.5)
            layer.gca.w2.copy_((torch.rand(layer.gca.w2.shape, generator=g) * 2 - 1) * 0.01)
            for conv in (layer.conv1, layer.conv2):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        for att in params.attention:
            att.reset(cfg.attention.init_scale, g)
        head = params.classifier_head
        head.weight.copy_(torch.randn(head.weight.shape, generator=g) * 0.01)
        head.bias.zero_()
    return params


def build_adapter(channels: Sequence[int], cfg, layer_ids=None) -> AdapterParams:
    return init_adapter(channels, cfg, layer_ids)


# --------------------------------------------------------------------------
# checkpoint file: magic, version, header length, JSON header, raw <f4 blobs

MAGIC = b"TVGA"
VERSION = 1


def save_adapter(params: AdapterParams, path: str | Path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name, t in params.state_dict().items():
        if not t.is_floating_point():
            continue  # BN batch counters
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"channels": params.channels, "width": params.width, "tensors": tensors,
                         "meta": meta or {}}).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an adapter checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    base = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arrays[t["name"]] = np.frombuffer(data[start:start + t["nbytes"]], dtype="<f4").reshape(t["shape"])
    return header, arrays


def load_adapter(path: str | Path, params: AdapterParams) -> dict:
    """Fill ``params`` in place from a checkpoint; returns the header meta."""
    header, arrays = read_checkpoint(path)
    state = params.state_dict()
    for name, arr in arrays.items():
        if name not in state:
            raise ValueError(f"{path}: unexpected tensor {name}")
        if tuple(state[name].shape) != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}")
        with torch.no_grad():
            state[name].copy_(torch.from_numpy(arr.copy()))
    return header.get("meta", {})
