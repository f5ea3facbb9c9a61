"""Query mask production: similarity maps, cross-attention masks, rough mask, fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import as_mask, resize_mask


class AttentionParams(nn.Module):
    """Q/K projections of one pyramid level.

    Inputs are channel-normalised features plus a small sinusoidal position
    code. ``reset`` ties Q and K to the same scaled orthonormal projection so
    that, untrained, the per-head logits are ``init_scale`` times the
    feature cosine.
    """

    def __init__(self, width: int, heads: int = 4, head_dim: int = 16, pe_scale: float = 0.1):
        super().__init__()
        if heads < 1 or head_dim < 1:
            raise ValueError("heads and head_dim must be >= 1")
        self.width = width
        self.heads = heads
        self.head_dim = head_dim
        self.pe_scale = pe_scale
        self.q_proj = nn.Linear(width, heads * head_dim)
        self.k_proj = nn.Linear(width, heads * head_dim)

    def reset(self, init_scale: float, generator: torch.Generator | None = None) -> None:
        out = self.heads * self.head_dim
        m = torch.randn(max(out, self.width), self.width, generator=generator)
        q, _ = torch.linalg.qr(m)
        r = q[:out] if out <= q.shape[0] else q
        alpha = math.sqrt(init_scale * self.heads * math.sqrt(self.head_dim))
        with torch.no_grad():
            self.q_proj.weight.copy_(alpha * r)
            self.k_proj.weight.copy_(alpha * r)
            self.q_proj.bias.zero_()
            self.k_proj.bias.zero_()


def sinusoidal_2d(channels: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sine/cosine table ``[C, h, w]``, half the channels per axis."""
    half = channels // 2
    pe = torch.zeros(channels, h, w, dtype=dtype)
    for axis, (n, start) in enumerate(((h, 0), (w, half))):
        count = half if axis == 0 else channels - half
        pos = torch.arange(n, dtype=dtype)
        freqs = torch.exp(-math.log(10000.0) * torch.arange(0, count, 2, dtype=dtype) / max(count, 1))
        ang = pos[:, None] * freqs[None]
        table = torch.zeros(n, count, dtype=dtype)
        table[:, 0::2] = torch.sin(ang)
        table[:, 1::2] = torch.cos(ang[:, : table[:, 1::2].shape[1]])
        if axis == 0:
            pe[start:start + count] = table.T[:, :, None].expand(count, h, w)
        else:
            pe[start:start + count] = table.T[:, None, :].expand(count, h, w)
    return pe


def _attention_inputs(features: torch.Tensor, pe_scale: float) -> torch.Tensor:
    c, h, w = features.shape
    pe = sinusoidal_2d(c, h, w, features.dtype)
    pe = pe * (pe_scale / math.sqrt(c / 2.0))
    x = F.normalize(features, dim=0) + pe
    return x.reshape(c, -1).T  # [hw, C]


def attention_weights(fq: torch.Tensor, fs: Sequence[torch.Tensor], p: AttentionParams) -> torch.Tensor:
    """Per-head ``softmax(Q K^T / sqrt(d))``, shape ``[heads, Nq, Ns]``."""
    xq = _attention_inputs(fq, p.pe_scale)
    xs = torch.cat([_attention_inputs(f, p.pe_scale) for f in fs])
    q = p.q_proj(xq).reshape(-1, p.heads, p.head_dim).transpose(0, 1)
    k = p.k_proj(xs).reshape(-1, p.heads, p.head_dim).transpose(0, 1)
    return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(p.head_dim), dim=-1)


def cross_attention_masks(fq: torch.Tensor, fs: torch.Tensor | Sequence[torch.Tensor], masks,
                          p: AttentionParams) -> torch.Tensor:
    """Aggregate support mask values for every query pixel; heads averaged.

    ``fs``/``masks`` may hold several shots, whose pixels are concatenated as
    keys/values. Masks must already be at the feature resolution.
    """
    if isinstance(fs, torch.Tensor) and fs.ndim == 3:
        fs, masks = [fs], [masks]
    v = torch.cat([torch.tensor(np.asarray(m), dtype=fq.dtype).reshape(-1) for m in masks])
    attn = attention_weights(fq, fs, p)
    out = (attn @ v).mean(dim=0)
    return out.reshape(fq.shape[1:])


def coarse_similarity_map(fq: torch.Tensor, fs: torch.Tensor | Sequence[torch.Tensor], masks) -> torch.Tensor | None:
    """Cosine of each query pixel to the support foreground prototype, mapped to [0, 1].

    Returns ``None`` when no support foreground survives at this resolution.
    """
    if isinstance(fs, torch.Tensor) and fs.ndim == 3:
        fs, masks = [fs], [masks]
    total = None
    count = 0
    for f, m in zip(fs, masks):
        mt = torch.tensor(np.asarray(m), dtype=f.dtype)
        s = (f * mt).sum(dim=(1, 2))
        total = s if total is None else total + s
        count += int(mt.sum().item())
    if count == 0:
        return None
    proto = total / count
    cos = F.cosine_similarity(fq, proto[:, None, None], dim=0, eps=1e-12)
    return (cos + 1) / 2


def rough_query_mask(query_layers: Sequence[torch.Tensor], head: nn.Conv2d) -> torch.Tensor:
    """Resize adapted layers to the finest grid, concatenate, 1x1-classify.

    Accepts ``[C, H, W]`` or batched ``[B, C, H, W]`` layers; returns 2-class
    logits with matching batch layout.
    """
    squeeze = query_layers[0].ndim == 3
    layers = [t[None] if squeeze else t for t in query_layers]
    size = layers[0].shape[-2:]
    stacked = torch.cat([t if t.shape[-2:] == size else
                         F.interpolate(t, size=size, mode="bilinear", align_corners=False) for t in layers], dim=1)
    logits = head(stacked)
    return logits[0] if squeeze else logits


@dataclass
class MaskSet:
    rough: torch.Tensor
    pseudo: object | None
    attention: list[torch.Tensor]
    coarse_sims: list[torch.Tensor | None]
    fused: np.ndarray
    final: np.ndarray
    components: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        """Named float32 maps for dumping."""
        out = {k: v.astype(np.float32) for k, v in self.components.items()}
        out["fused"] = self.fused.astype(np.float32)
        out["final"] = self.final.astype(np.float32)
        for i, s in enumerate(self.coarse_sims):
            if s is not None:
                out[f"coarse_sim_{i}"] = s.detach().numpy().astype(np.float32)
        return out


def _upsample(t: torch.Tensor, size) -> np.ndarray:
    t = t.detach().double()
    if tuple(t.shape[-2:]) != tuple(size):
        t = F.interpolate(t[None, None], size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
    return t.numpy()


def fuse_masks(components: dict[str, np.ndarray], weights: Sequence[float] | dict[str, float] | None = None,
               threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Weighted arithmetic mean of component maps, then ``>= threshold``.

    All components must already be at image resolution and lie in [0, 1].
    """
    if not components:
        raise RuntimeError("fusion needs at least one component map")
    names = list(components)
    if weights is None or len(weights) == 0:
        w = np.ones(len(names))
    elif isinstance(weights, dict):
        w = np.array([float(weights.get(n, 1.0)) for n in names])
    else:
        if len(weights) != len(names):
            raise ValueError(f"{len(weights)} fusion weights for {len(names)} components")
        w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("fusion weights must be non-negative with a positive sum")
    stack = np.stack([np.asarray(components[n], dtype=np.float64) for n in names])
    fused = np.tensordot(w / w.sum(), stack, axes=1)
    fused = np.clip(fused, 0.0, 1.0)
    return fused, as_mask(fused >= threshold)


def component_maps(rough: torch.Tensor | None, pseudo_mask: np.ndarray | None, attention: Sequence[torch.Tensor],
                   size) -> dict[str, np.ndarray]:
    comps: dict[str, np.ndarray] = {}
    if rough is not None:
        comps["rough"] = _upsample(torch.softmax(rough.detach(), dim=0)[1], size)
    if pseudo_mask is not None:
        comps["pseudo"] = resize_mask(pseudo_mask, size).astype(np.float64)
    for i, a in enumerate(attention):
        comps[f"attention_{i}"] = _upsample(a, size)
    return comps
