"""Text-visual alignment: CLIP-style Grad-CAM pseudo-labels and their loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import VLImageEncoding, VLModel, VLTextEncoding, vl_encode_text
from .core import as_mask, resize_mask
from .tsaa import NumericalError


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    fg_prompts: tuple[str, ...]
    bg_prompts: tuple[str, ...]

    def __post_init__(self):
        if not self.fg_prompts or not self.bg_prompts:
            raise ValueError("need at least one foreground and one background prompt")
        allp = self.class_order
        if len(set(allp)) != len(allp):
            raise ValueError("duplicate prompts")

    @property
    def class_order(self) -> tuple[str, ...]:
        """Softmax index -> prompt; foreground prompts come first."""
        return self.fg_prompts + self.bg_prompts


def build_prompts(fg_class: str, all_classes: Sequence[str], multi_label: bool = False,
                  template: str = "a photo of a {}") -> PromptSet:
    if fg_class not in all_classes:
        raise ValueError(f"{fg_class!r} is not one of {list(all_classes)}")
    others = [c for c in all_classes if c != fg_class]
    fg = (template.format(fg_class),)
    if multi_label and others:
        bg = tuple(template.format(f"non {c}") for c in others)
    else:
        bg = (template.format(f"non {fg_class}"),)
    return PromptSet(fg, bg)


def _text_matrix(texts) -> torch.Tensor:
    if isinstance(texts, torch.Tensor):
        return texts
    return torch.stack([t.embedding if isinstance(t, VLTextEncoding) else torch.as_tensor(t) for t in texts])


def class_scores(img: VLImageEncoding | torch.Tensor, texts, temperature: float) -> torch.Tensor:
    """Softmax over cosine similarities scaled by ``1 / temperature``."""
    t = _text_matrix(texts)
    if t.shape[0] < 2:
        raise ValueError("class scores need at least two texts")
    e = img.pooled_embedding if isinstance(img, VLImageEncoding) else img
    e = e.to(t.dtype)
    cos = F.normalize(t, dim=-1) @ (e / e.norm())
    return torch.softmax(cos / temperature, dim=0)


def gradcam_weights(activations: torch.Tensor, score_fn: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]],
                    target: int = 0) -> torch.Tensor:
    """Channel weights chained through the softmax.

    For target ``c``: ``w_k = 1/Z * sum_ij [dY_c/dA_kij * s_c (1 - s_c)
    - sum_{c' != c} dY_c'/dA_kij * s_c s_c']`` with ``Z = h * w``.
    """
    a = activations.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits, s = score_fn(a)
        if not logits.requires_grad:
            return torch.zeros(a.shape[0], dtype=a.dtype)
        grads = []
        for i in range(logits.numel()):
            (g,) = torch.autograd.grad(logits[i], a, retain_graph=True, allow_unused=True)
            grads.append(torch.zeros_like(a) if g is None else g)
    s = s.detach()
    total = grads[target] * s[target] * (1 - s[target])
    for i, g in enumerate(grads):
        if i != target:
            total = total - g * s[target] * s[i]
    z = a.shape[1] * a.shape[2]
    w = total.sum(dim=(1, 2)) / z
    if not torch.isfinite(w).all():
        raise NumericalError("non-finite Grad-CAM gradients")
    return w.detach()


def gradcam_weights_direct(activations: torch.Tensor, score_fn, target: int = 0) -> torch.Tensor:
    """Same weights via autograd on ``s_c`` itself (the softmax chain rule)."""
    a = activations.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        _, s = score_fn(a)
        if not s.requires_grad:
            return torch.zeros(a.shape[0], dtype=a.dtype)
        (g,) = torch.autograd.grad(s[target], a, allow_unused=True)
    if g is None:
        g = torch.zeros_like(a)
    return (g.sum(dim=(1, 2)) / (a.shape[1] * a.shape[2])).detach()


def vl_score_fn(vl: VLModel, text_emb: torch.Tensor, temperature: float | None = None):
    temp = vl.temperature if temperature is None else temperature

    def fn(a):
        e = vl.head(a)
        y = (F.normalize(text_emb.to(e.dtype), dim=-1) @ e) / temp
        return y, torch.softmax(y, dim=0)

    return fn


@dataclass
class CAMResult:
    heatmap: np.ndarray
    raw: np.ndarray
    class_scores: np.ndarray
    weights: np.ndarray
    threshold_used: float | None = None
    degenerate: bool = False
    prompts: tuple[str, ...] = field(default_factory=tuple)


def cam_from_weights(activations: torch.Tensor, weights: torch.Tensor,
                     out_size: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray, bool]:
    """``relu(sum_k w_k A_k)``, upsampled bilinearly and min-max normalised."""
    raw = F.relu(torch.einsum("k,khw->hw", weights.to(activations.dtype), activations.detach()))
    up = raw
    if out_size is not None and tuple(raw.shape) != tuple(out_size):
        up = F.interpolate(raw[None, None], size=tuple(out_size), mode="bilinear", align_corners=False)[0, 0]
    up = up.double().numpy()
    lo, hi = up.min(), up.max()
    if hi <= 0 or hi - lo <= 1e-12:
        return np.zeros(up.shape), raw.double().numpy(), True
    return (up - lo) / (hi - lo), raw.double().numpy(), False


def generate_cam(img_encoding: VLImageEncoding, prompts: PromptSet, vl: VLModel,
                 out_size: tuple[int, int] | None = None, temperature: float | None = None) -> CAMResult:
    texts = vl_encode_text(list(prompts.class_order), vl)
    temb = _text_matrix(texts)
    fn = vl_score_fn(vl, temb, temperature)
    a = img_encoding.penultimate_features
    w = gradcam_weights(a, fn, target=0)
    with torch.no_grad():
        _, s = fn(a)
    heat, raw, degenerate = cam_from_weights(a, w, out_size)
    return CAMResult(heat, raw, s.double().numpy(), w.double().numpy(), None, degenerate, prompts.class_order)


# --------------------------------------------------------------------------
# thresholding


def otsu_threshold(gray, bins: int = 256) -> float:
    """Histogram Otsu over ``bins`` equal bins of [0, 1].

    Candidate thresholds are the inner bin edges; pixels ``< t`` form the low
    class. Class means use exact per-bin sums, so the result equals a direct
    search over the same edges. Ties go to the lower threshold.
    """
    v = np.asarray(gray, dtype=np.float64).ravel()
    if v.size == 0 or v.min() == v.max():
        raise DegenerateInputError("Otsu needs at least two distinct values")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    n, total = counts.sum(), sums.sum()
    w1 = n - w0
    s1 = total - s0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        raise DegenerateInputError("all values fall in a single histogram bin")
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where(valid, (w0 / n) * (w1 / n) * (s0 / w0 - s1 / w1) ** 2, -np.inf)
    k = int(np.argmax(between)) + 1
    return float(edges[k])


# --------------------------------------------------------------------------
# dense CRF (mean field, Potts, Gaussian + bilateral kernels)


@dataclass(frozen=True)
class CRFParams:
    iterations: int = 5
    gauss_sxy: float = 3.0
    gauss_weight: float = 3.0
    bilateral_sxy: float = 50.0
    bilateral_srgb: float = 13.0
    bilateral_weight: float = 10.0
    bilateral_grid: int = 40


def _bilateral_operator(image: np.ndarray, p: CRFParams):
    """Symmetric-normalised bilateral kernel on an area-downsampled grid.

    The spatial bandwidth is large, so messages are computed at low
    resolution and upsampled.
    """
    _, H, W = image.shape
    f = max(1, math.ceil(max(H, W) / p.bilateral_grid))
    h, w = math.ceil(H / f), math.ceil(W / f)
    pad = np.pad(image, ((0, 0), (0, h * f - H), (0, w * f - W)), mode="edge")
    rgb = pad.reshape(3, h, f, w, f).mean(axis=(2, 4)).reshape(3, -1).T * 255.0
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([(yy.ravel() + 0.5) * f, (xx.ravel() + 0.5) * f], axis=1)
    d_pos = ((pos[:, None] - pos[None]) ** 2).sum(-1) / (2 * p.bilateral_sxy ** 2)
    d_rgb = ((rgb[:, None] - rgb[None]) ** 2).sum(-1) / (2 * p.bilateral_srgb ** 2)
    k = np.exp(-d_pos - d_rgb)
    np.fill_diagonal(k, 0.0)
    d = 1.0 / np.sqrt(np.maximum(k.sum(1), 1e-12))
    k = d[:, None] * k * d[None]

    def apply(q: np.ndarray) -> np.ndarray:
        qp = np.pad(q, ((0, 0), (0, h * f - H), (0, w * f - W)), mode="edge")
        low = qp.reshape(q.shape[0], h, f, w, f).mean(axis=(2, 4)).reshape(q.shape[0], -1)
        msg = (low @ k.T).reshape(q.shape[0], h, w)
        up = ndimage.zoom(msg, (1, f, f), order=1, mode="nearest")
        return up[:, :H, :W]

    return apply


def dense_crf(prob_fg: np.ndarray, image: np.ndarray, params: CRFParams = CRFParams()) -> np.ndarray:
    """Binary dense-CRF refinement of a foreground probability map."""
    prob_fg = np.clip(np.asarray(prob_fg, dtype=np.float64), 1e-5, 1 - 1e-5)
    unary = -np.log(np.stack([1 - prob_fg, prob_fg]))
    delta = np.zeros((7, 7))
    delta[3, 3] = 1.0
    p_sxy = params.gauss_sxy
    self_w = ndimage.gaussian_filter(delta, p_sxy, mode="constant")[3, 3]
    bilateral = _bilateral_operator(np.asarray(image, dtype=np.float64), params)
    logits = -unary
    q = np.exp(logits - logits.max(0))
    q /= q.sum(0)
    for _ in range(params.iterations):
        gauss = np.stack([ndimage.gaussian_filter(c, p_sxy, mode="nearest") - self_w * c for c in q])
        msg = params.gauss_weight * gauss + params.bilateral_weight * bilateral(q)
        # Potts: penalty for label l is the message mass of the other label
        energy = unary + msg[::-1]
        logits = -energy
        q = np.exp(logits - logits.max(0))
        q /= q.sum(0)
    return (q[1] > q[0]).astype(np.uint8)


# --------------------------------------------------------------------------
# pseudo-labels


@dataclass
class PseudoLabel:
    mask: np.ndarray
    source: CAMResult
    crf_applied: bool = False
    degenerate: bool = False


def make_pseudo_label(cam: CAMResult, mode: str = "otsu", crf: bool = False, image: np.ndarray | None = None,
                      fixed_tau: float = 0.5, bins: int = 256, crf_params: CRFParams = CRFParams()) -> PseudoLabel:
    heat = cam.heatmap
    if cam.degenerate:
        return PseudoLabel(as_mask(np.zeros(heat.shape, np.uint8)), replace(cam, threshold_used=None), False, True)
    if mode == "otsu":
        try:
            tau = otsu_threshold(heat, bins)
        except DegenerateInputError:
            return PseudoLabel(as_mask(np.zeros(heat.shape, np.uint8)), cam, False, True)
    elif mode == "fixed":
        tau = float(fixed_tau)
    else:
        raise ValueError(f"unknown threshold mode {mode!r}")
    mask = (heat >= tau).astype(np.uint8)
    applied = False
    if crf and image is not None and 0 < mask.sum() < mask.size:
        # soft unary centred on the threshold
        prob = 1.0 / (1.0 + np.exp(-(heat - tau) * 10.0))
        mask = dense_crf(prob, image, crf_params)
        applied = True
    return PseudoLabel(as_mask(mask), replace(cam, threshold_used=tau), applied, False)


def pseudo_label_loss(rough_logits: torch.Tensor, pseudo: PseudoLabel | np.ndarray) -> torch.Tensor:
    """Mean two-class cross-entropy; the pseudo mask is nearest-resampled to the logits grid."""
    mask = pseudo.mask if isinstance(pseudo, PseudoLabel) else np.asarray(pseudo)
    logits = rough_logits if rough_logits.ndim == 4 else rough_logits[None]
    target = resize_mask(mask, logits.shape[-2:])
    target = torch.as_tensor(target, dtype=torch.long, device=logits.device)[None].expand(logits.shape[0], -1, -1)
    if target.shape[-2:] != logits.shape[-2:]:
        raise RuntimeError("pseudo-label resampling produced the wrong shape")
    return F.cross_entropy(logits, target)
