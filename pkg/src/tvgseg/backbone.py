"""Frozen feature extractors.

Two interfaces: a multi-scale pyramid extractor used for segmentation, and a
vision-language pair (image tower with a Grad-CAM tap + text tower) used for
pseudo-labelling. Each has a real pretrained implementation and a small
seeded stand-in that runs on CPU without downloads.
"""
from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class WeightsError(RuntimeError):
    """Pretrained weights missing or unloadable."""


@dataclass(frozen=True)
class FeaturePyramid:
    layers: tuple[torch.Tensor, ...]
    layer_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("pyramid needs at least one layer")
        sizes = [t.shape[-2] * t.shape[-1] for t in self.layers]
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("pyramid spatial sizes must be non-increasing")

    @property
    def channels(self) -> list[int]:
        return [t.shape[-3] for t in self.layers]

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class VLImageEncoding:
    penultimate_features: torch.Tensor  # [C, h, w]
    pooled_embedding: torch.Tensor  # [D], unit norm


@dataclass(frozen=True)
class VLTextEncoding:
    embedding: torch.Tensor
    prompt: str


def weights_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _as_batch(image, size: int | None) -> torch.Tensor:
    x = torch.tensor(np.asarray(image), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected [3, H, W] or [B, 3, H, W] image, got {tuple(x.shape)}")
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        raise ValueError(f"backbone expects {size}x{size} input, got {tuple(x.shape[-2:])}")
    return x


# --------------------------------------------------------------------------
# pyramid backbones


class PyramidBackbone(nn.Module):
    layer_ids: tuple[str, ...] = ()
    input_size: int | None = None

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    @torch.no_grad()
    def extract(self, images) -> list[torch.Tensor]:
        """Batched extraction; returns one ``[B, C, H, W]`` tensor per layer."""
        return [t.detach() for t in self(_as_batch(images, self.input_size))]


class ToyBackbone(PyramidBackbone):
    """Seeded random conv stack: a stride-2 stem then four stride-2 stages.

    Stage outputs sit at strides 4/8/16/32 like a ResNet pyramid.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 48, 64), seed: int = 0, input_size: int | None = None):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        widths = [3, channels[0], *channels]
        self.convs = nn.ModuleList()
        for cin, cout in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.copy_(torch.randn(cout, generator=g) * 0.05)
            self.convs.append(conv)
        self.layer_ids = tuple(f"stage{i + 1}" for i in range(len(channels)))
        self.input_size = input_size
        _freeze(self)

    def forward(self, x):
        h = x - 0.5
        outs = []
        for i, conv in enumerate(self.convs):
            h = F.relu(conv(h))
            if i > 0:
                outs.append(h)
        return outs


class ResNet50Backbone(PyramidBackbone):
    """torchvision ResNet-50 tapped after layer1..layer4."""

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str | Path, input_size: int = 400):
        super().__init__()
        import torchvision

        path = Path(weights_path) if weights_path else None
        if path is None or not path.exists():
            raise WeightsError(f"ResNet-50 weights not found: {weights_path!r}")
        net = torchvision.models.resnet50(weights=None)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            net.load_state_dict(state.get("state_dict", state) if isinstance(state, dict) else state)
        except Exception as exc:  # noqa: BLE001
            raise WeightsError(f"cannot load ResNet-50 weights from {path}: {exc}") from exc
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.register_buffer("_mean", torch.tensor(self.mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(self.std).view(1, 3, 1, 1))
        self.layer_ids = ("layer1", "layer2", "layer3", "layer4")
        self.input_size = input_size
        _freeze(self)

    def forward(self, x):
        h = self.stem((x - self._mean) / self._std)
        outs = []
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
        return outs


RESNET50_CHANNELS = (256, 512, 1024, 2048)


def extract_pyramid(image, backbone: PyramidBackbone) -> FeaturePyramid:
    layers = backbone.extract(image)
    return FeaturePyramid(tuple(t[0] for t in layers), tuple(backbone.layer_ids))


# --------------------------------------------------------------------------
# vision-language pairs


class VLModel(nn.Module):
    """Interface: ``tap`` gives the activations the CAM is taken over,
    ``head`` maps them (differentiably) to the pooled image embedding."""

    temperature: float = 0.07

    def tap(self, image) -> torch.Tensor:
        raise NotImplementedError

    def head(self, activations: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError


_WORD = re.compile(r"[a-z0-9_]+")


def tokenize(prompt: str) -> list[str]:
    return _WORD.findall(prompt.lower())


class ToyVL(VLModel):
    """Seeded linear patch encoder + attention-pool head, bag-of-words text.

    ``concepts`` plants class words: a class word embeds to the image-tower
    embedding of a flat patch of that class colour, so the toy pair "knows"
    what the class looks like. The word ``non`` negates the following word.
    Other words get a seeded pseudo-random vector.
    """

    def __init__(self, seed: int = 0, input_size: int = 224, patch: int = 16, dim: int = 32,
                 embed_dim: int | None = None, concepts: dict[str, Sequence[float]] | None = None,
                 filler_scale: float = 0.3, temperature: float = 0.07):
        super().__init__()
        if input_size % patch:
            raise ValueError("input_size must be a multiple of patch")
        g = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.input_size = input_size
        self.patch = patch
        self.dim = dim
        self.embed_dim = embed_dim or dim
        pdim = 3 * patch * patch
        self.patch_embed = nn.Linear(pdim, dim, bias=False)
        self.proj = nn.Linear(dim, self.embed_dim, bias=False)
        with torch.no_grad():
            self.patch_embed.weight.copy_(torch.randn(dim, pdim, generator=g) / pdim ** 0.5)
            self.proj.weight.copy_(torch.randn(self.embed_dim, dim, generator=g) / dim ** 0.5)
        self.register_buffer("pool_query", torch.randn(dim, generator=g) / dim ** 0.5)
        self.concepts = {k.lower(): tuple(float(c) for c in v) for k, v in (concepts or {}).items()}
        self.filler_scale = filler_scale
        self.temperature = temperature
        _freeze(self)

    def grid(self) -> int:
        return self.input_size // self.patch

    def _patches(self, image) -> torch.Tensor:
        x = torch.tensor(np.asarray(image), dtype=self.patch_embed.weight.dtype)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] image, got {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            x = F.interpolate(x[None], size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False)[0]
        p = self.patch
        x = x - 0.5
        # [3, g, p, g, p] -> [g, g, 3*p*p], row-major patch order
        gsz = self.grid()
        return x.reshape(3, gsz, p, gsz, p).permute(1, 3, 0, 2, 4).reshape(gsz, gsz, 3 * p * p)

    @torch.no_grad()
    def tap(self, image) -> torch.Tensor:
        tokens = self.patch_embed(self._patches(image))  # [g, g, C]
        return tokens.permute(2, 0, 1).contiguous()

    def head(self, activations: torch.Tensor) -> torch.Tensor:
        c = activations.shape[0]
        tokens = activations.reshape(c, -1).T  # [hw, C]
        attn = torch.softmax(tokens @ self.pool_query.to(tokens.dtype) / c ** 0.5, dim=0)
        pooled = attn @ tokens
        emb = pooled @ self.proj.weight.to(tokens.dtype).T
        return emb / emb.norm()

    def _concept_vector(self, word: str) -> torch.Tensor:
        rgb = torch.tensor(self.concepts[word], dtype=self.proj.weight.dtype) - 0.5
        patch = rgb[:, None].expand(3, self.patch * self.patch).reshape(-1)
        v = self.proj(self.patch_embed(patch))
        return v / v.norm()

    def _word_vector(self, word: str) -> torch.Tensor:
        if word in self.concepts:
            return self._concept_vector(word)
        g = torch.Generator().manual_seed((zlib.crc32(word.encode()) ^ self.seed) & 0x7FFFFFFF)
        v = torch.randn(self.embed_dim, generator=g).to(self.proj.weight.dtype)
        return self.filler_scale * v / v.norm()

    @torch.no_grad()
    def encode_text(self, prompts):
        if not prompts:
            raise ValueError("need at least one prompt")
        out = []
        for prompt in prompts:
            words = tokenize(prompt)
            if not words:
                raise ValueError(f"empty prompt {prompt!r}")
            total = torch.zeros(self.embed_dim, dtype=self.proj.weight.dtype)
            negate = False
            for w in words:
                if w == "non":
                    negate = True
                    continue
                v = self._word_vector(w)
                total = total - v if negate else total + v
                negate = False
            out.append(total / total.norm())
        return torch.stack(out)


class CLIPViTB16(VLModel):
    """HuggingFace CLIP ViT-B/16 loaded from a local directory.

    The CAM tap is the token sequence entering the last encoder block, class
    token dropped, reshaped row-major to the patch grid; ``head`` runs the last
    block, the post-layernorm and the visual projection.
    """

    def __init__(self, weights_path: str | Path):
        super().__init__()
        path = Path(weights_path) if weights_path else None
        if path is None or not path.exists():
            raise WeightsError(f"CLIP weights not found: {weights_path!r}")
        try:
            from transformers import CLIPModel, CLIPTokenizer

            self.model = CLIPModel.from_pretrained(str(path), local_files_only=True)
            self.tokenizer = CLIPTokenizer.from_pretrained(str(path), local_files_only=True)
        except Exception as exc:  # noqa: BLE001
            raise WeightsError(f"cannot load CLIP from {path}: {exc}") from exc
        vcfg = self.model.config.vision_config
        self.input_size = vcfg.image_size
        self.patch = vcfg.patch_size
        self.temperature = float(1.0 / self.model.logit_scale.exp())
        self.register_buffer("_mean", torch.tensor((0.4815, 0.4578, 0.4082)).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor((0.2686, 0.2613, 0.2758)).view(1, 3, 1, 1))
        self._cls: torch.Tensor | None = None
        _freeze(self)

    def grid(self) -> int:
        return self.input_size // self.patch

    @staticmethod
    def _run_layer(layer, h):
        try:
            out = layer(h, None, None)
        except TypeError:
            out = layer(h, attention_mask=None)
        return out[0] if isinstance(out, tuple) else out

    @torch.no_grad()
    def tap(self, image) -> torch.Tensor:
        x = torch.tensor(np.asarray(image), dtype=torch.float32)[None]
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bicubic", align_corners=False)
        x = (x.clamp(0, 1) - self._mean) / self._std
        vm = self.model.vision_model
        h = vm.pre_layrnorm(vm.embeddings(x))
        for layer in vm.encoder.layers[:-1]:
            h = self._run_layer(layer, h)
        self._cls = h[:, :1].detach()
        g = self.grid()
        return h[0, 1:].T.reshape(-1, g, g).contiguous()

    def head(self, activations):
        if self._cls is None:
            raise RuntimeError("call tap() before head()")
        vm = self.model.vision_model
        tokens = activations.reshape(activations.shape[0], -1).T[None]
        h = torch.cat([self._cls.to(tokens.dtype), tokens], dim=1)
        h = self._run_layer(vm.encoder.layers[-1], h)
        emb = self.model.visual_projection(vm.post_layernorm(h[:, 0]))[0]
        return emb / emb.norm()

    @torch.no_grad()
    def encode_text(self, prompts):
        if not prompts:
            raise ValueError("need at least one prompt")
        tok = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        emb = self.model.get_text_features(**tok)
        if not isinstance(emb, torch.Tensor):
            emb = emb.pooler_output
        return emb / emb.norm(dim=-1, keepdim=True)


def vl_encode_image(image, vl: VLModel) -> VLImageEncoding:
    a = vl.tap(image)
    with torch.no_grad():
        e = vl.head(a)
    return VLImageEncoding(a, e)


def vl_encode_text(prompts: Sequence[str], vl: VLModel) -> list[VLTextEncoding]:
    if not prompts:
        raise ValueError("need at least one prompt")
    emb = vl.encode_text(list(prompts))
    return [VLTextEncoding(e, p) for e, p in zip(emb, prompts)]


def build_backbone(cfg) -> PyramidBackbone:
    if cfg.backbone.kind == "toy":
        return ToyBackbone(cfg.backbone.toy_channels, seed=cfg.backbone.seed, input_size=cfg.dataset.input_size)
    return ResNet50Backbone(cfg.backbone.weights_path, input_size=cfg.dataset.input_size)


def build_vl(cfg, concepts: dict[str, Sequence[float]] | None = None) -> VLModel:
    if cfg.vl.kind == "toy":
        return ToyVL(seed=cfg.vl.seed, input_size=cfg.vl.input_size, patch=cfg.vl.toy_patch, dim=cfg.vl.toy_dim,
                     concepts=concepts, temperature=cfg.tvea.temperature)
    return CLIPViTB16(cfg.vl.weights_path)
