"""Visual-visual alignment: masked prototypes and the three view-consistency losses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError
from .core import AffineTransform


class DegenerateLossWarning(RuntimeWarning):
    """A loss had no contributing terms and returned 0."""


@dataclass
class PrototypePair:
    fg: torch.Tensor | None
    bg: torch.Tensor | None
    fg_count: int
    bg_count: int


@dataclass
class PrototypeGrid:
    n: int
    cells: list[list[PrototypePair]]

    def cell(self, i: int, j: int) -> PrototypePair:
        return self.cells[i][j]


def _mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(np.asarray(mask), dtype=like.dtype, device=like.device)


def masked_prototype(features: torch.Tensor, mask) -> PrototypePair:
    """Foreground/background mean feature vectors of a ``[C, H, W]`` map."""
    m = _mask_tensor(mask, features)
    if m.shape != features.shape[1:]:
        raise ValueError(f"mask {tuple(m.shape)} does not match features {tuple(features.shape[1:])}")
    flat = features.reshape(features.shape[0], -1)
    m = m.reshape(-1)
    n_fg = int(m.sum().item())
    n_bg = m.numel() - n_fg
    fg = flat @ m / n_fg if n_fg else None
    bg = flat @ (1 - m) / n_bg if n_bg else None
    return PrototypePair(fg, bg, n_fg, n_bg)


def block_edges(size: int, n: int) -> list[int]:
    """Near-equal partition boundaries; the first ``size % n`` blocks are one longer."""
    q, r = divmod(size, n)
    edges = [0]
    for i in range(n):
        edges.append(edges[-1] + q + (1 if i < r else 0))
    return edges


def local_prototypes(features: torch.Tensor, mask, n: int) -> PrototypeGrid:
    if n < 1:
        raise ConfigError("grid side n must be >= 1")
    h, w = features.shape[1:]
    if n > min(h, w):
        raise ConfigError(f"cannot split a {h}x{w} map into {n}x{n} blocks")
    m = _mask_tensor(mask, features)
    ys, xs = block_edges(h, n), block_edges(w, n)
    cells = [[masked_prototype(features[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]], m[ys[i]:ys[i + 1], xs[j]:xs[j + 1]])
              for j in range(n)] for i in range(n)]
    return PrototypeGrid(n, cells)


def ssim_similarity(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """SSIM between two vectors, using their entries as the sample set.

    ``L`` (dynamic range) is the joint value range of the pair, floored at 1.
    """
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"ssim needs equal-length vectors, got {tuple(p.shape)} and {tuple(q.shape)}")
    if p.numel() < 2:
        raise ValueError("ssim needs vectors of length >= 2")
    both = torch.cat([p, q])
    rng = torch.clamp(both.max() - both.min(), min=1.0)
    c1 = (0.01 * rng) ** 2
    c2 = (0.03 * rng) ** 2
    mp, mq = p.mean(), q.mean()
    dp, dq = p - mp, q - mq
    vp, vq, cov = (dp * dp).mean(), (dq * dq).mean(), (dp * dq).mean()
    return ((2 * mp * mq + c1) * (2 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2))


def _contrast_term(pp: PrototypePair, pp_aug: PrototypePair) -> torch.Tensor | None:
    if pp.fg is None or pp_aug.fg is None or pp_aug.bg is None:
        return None
    return F.softplus(ssim_similarity(pp.fg, pp_aug.bg) - ssim_similarity(pp.fg, pp_aug.fg))


def _zero_like(grid: PrototypeGrid | PrototypePair) -> torch.Tensor:
    cells = grid.cells if isinstance(grid, PrototypeGrid) else [[grid]]
    for row in cells:
        for c in row:
            for t in (c.fg, c.bg):
                if t is not None:
                    return t.new_zeros(()) + 0 * t.sum()
    return torch.zeros(())


def local_contrast_loss(grid: PrototypeGrid, grid_aug: PrototypeGrid) -> torch.Tensor:
    """Mean over contributing cells of ``softplus(sim(fg, bg') - sim(fg, fg'))``.

    Cells lacking a foreground in either view or a background in the
    augmented view are skipped.
    """
    if grid.n != grid_aug.n:
        raise ValueError("grids must have the same side")
    terms = []
    for i in range(grid.n):
        for j in range(grid.n):
            t = _contrast_term(grid.cell(i, j), grid_aug.cell(i, j))
            if t is not None:
                terms.append(t)
    if not terms:
        warnings.warn("local contrast loss has no contributing cells", DegenerateLossWarning, stacklevel=2)
        return _zero_like(grid)
    return torch.stack(terms).mean()


def global_contrast_loss(pp: PrototypePair, pp_aug: PrototypePair) -> torch.Tensor:
    t = _contrast_term(pp, pp_aug)
    if t is None:
        warnings.warn("global contrast loss skipped: missing prototype", DegenerateLossWarning, stacklevel=2)
        return _zero_like(pp)
    return t


# --------------------------------------------------------------------------
# dense correspondence loss


@dataclass(frozen=True)
class Correspondence:
    """Matched feature-grid pixels ``(ya, xa) <-> (yb, xb)``."""

    a: np.ndarray  # [M, 2] (y, x)
    b: np.ndarray  # [M, 2]

    def __len__(self):
        return len(self.a)

    def subsample(self, max_pairs: int, rng: np.random.Generator) -> "Correspondence":
        if len(self) <= max_pairs:
            return self
        idx = np.sort(rng.choice(len(self), size=max_pairs, replace=False))
        return Correspondence(self.a[idx], self.b[idx])


def correspondences(t: AffineTransform, image_size: tuple[int, int], feat_size: tuple[int, int],
                    max_error: float = 0.5) -> Correspondence:
    """Feature pixels of the original view and where ``t`` sends them.

    Pairs whose mapped location lands within ``max_error`` feature pixels of a
    grid centre (and inside the grid) are kept.
    """
    H, W = image_size
    h, w = feat_size
    sy, sx = H / h, W / w
    yy, xx = np.mgrid[0:h, 0:w]
    centres = np.stack([(xx + 0.5) * sx - 0.5, (yy + 0.5) * sy - 0.5], axis=-1).reshape(-1, 2)
    mapped = t.apply_points(centres)
    fx = (mapped[:, 0] + 0.5) / sx - 0.5
    fy = (mapped[:, 1] + 0.5) / sy - 0.5
    rx, ry = np.rint(fx), np.rint(fy)
    err = np.hypot(fx - rx, fy - ry)
    ok = (rx >= 0) & (rx < w) & (ry >= 0) & (ry < h) & (err < max_error)
    a = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=-1)[ok]
    b = np.stack([ry[ok], rx[ok]], axis=-1).astype(int)
    return Correspondence(a.astype(int), b)


def identity_correspondence(h: int, w: int) -> Correspondence:
    yy, xx = np.mgrid[0:h, 0:w]
    a = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=-1)
    return Correspondence(a, a.copy())


def dense_contrast_loss(fa: torch.Tensor, fb: torch.Tensor, corr: Correspondence, tau: float = 0.1) -> torch.Tensor:
    """Symmetrised InfoNCE over matched pixels of two ``[C, H, W]`` maps.

    Each matched pixel's positive is its correspondent; the other matched
    pixels of the opposite view are negatives.
    """
    if len(corr) < 2:
        raise ValueError(f"dense loss needs >= 2 correspondences, got {len(corr)}")
    za = F.normalize(fa[:, corr.a[:, 0], corr.a[:, 1]].T, dim=1)
    zb = F.normalize(fb[:, corr.b[:, 0], corr.b[:, 1]].T, dim=1)
    logits = za @ zb.T / tau
    target = torch.arange(len(corr), device=fa.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
