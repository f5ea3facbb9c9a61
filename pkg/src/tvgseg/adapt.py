"""Episodic test-time adaptation and the predict path."""
from __future__ import annotations

import json
import math
import threading
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .backbone import PyramidBackbone, VLModel, build_backbone, build_vl, vl_encode_image, weights_checksum
from .config import Config
from .core import Episode, augment_view, resize_mask
from .seg_head import (MaskSet, component_maps, coarse_similarity_map, cross_attention_masks, fuse_masks,
                       rough_query_mask)
from .tsaa import AdapterParams, NumericalError, init_adapter, load_adapter, save_adapter
from .tvea import PseudoLabel, build_prompts, dense_crf, generate_cam, make_pseudo_label, pseudo_label_loss
from .vvea import (DegenerateLossWarning, correspondences, dense_contrast_loss, global_contrast_loss,
                   local_contrast_loss, local_prototypes, masked_prototype)

COMPONENTS = ("local", "global", "pascal", "dense")


class AdaptationDiverged(RuntimeError):
    pass


class StaleCacheError(RuntimeError):
    pass


def total_loss(per_layer: Sequence[Mapping[str, torch.Tensor | float]]) -> torch.Tensor:
    """Unweighted sum of every component over every layer; missing entries count as 0."""
    if len(per_layer) < 1:
        raise ValueError("need at least one layer")
    total = None
    for li, comps in enumerate(per_layer):
        for name in COMPONENTS:
            v = comps.get(name, 0.0)
            v = v if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=torch.float64)
            if not torch.isfinite(v).all():
                raise NumericalError(f"non-finite {name} loss in layer {li}")
            total = v if total is None else total + v
    return total


@dataclass
class AdaptationRecord:
    losses: list[list[dict[str, float]]] = field(default_factory=list)  # epoch -> layer -> component
    totals: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checksum: str = ""
    cache_key: tuple[str, str] = ("", "")
    epochs: int = 0
    lr: float = 0.0
    enabled: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"cache_key": list(self.cache_key), "epochs": self.epochs, "lr": self.lr,
                "enabled": list(self.enabled), "wall_time": self.wall_time, "checksum": self.checksum,
                "totals": self.totals, "losses": self.losses}

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            for epoch, (total, layers) in enumerate(zip(self.totals, self.losses)):
                fh.write(json.dumps({"dataset": self.cache_key[0], "class": self.cache_key[1], "epoch": epoch,
                                     "total": total, "layers": layers}) + "\n")


def _seed(*parts) -> int:
    return zlib.crc32(json.dumps(parts).encode()) & 0x7FFFFFFF


class Pipeline:
    """Frozen backbones + config; adapts and predicts episodes."""

    def __init__(self, cfg: Config, backbone: PyramidBackbone | None = None, vl: VLModel | None = None,
                 concepts: Mapping[str, Sequence[float]] | None = None):
        self.cfg = cfg
        self.backbone = backbone or build_backbone(cfg)
        self.vl = vl if vl is not None else (build_vl(cfg, concepts) if cfg.tvea.enabled else None)
        self.adaptations = 0
        self.records: list[AdaptationRecord] = []

    # -- frozen parts -----------------------------------------------------
    def features(self, images: Sequence[np.ndarray]) -> list[torch.Tensor]:
        return self.backbone.extract(np.stack(images))

    def frozen_checksums(self) -> dict[str, str]:
        out = {"backbone": weights_checksum(self.backbone)}
        if self.vl is not None:
            out["vl"] = weights_checksum(self.vl)
        return out

    def new_adapter(self) -> AdapterParams:
        probe = self.features([np.zeros((3, self.cfg.dataset.input_size, self.cfg.dataset.input_size), np.float32)])
        return init_adapter([t.shape[1] for t in probe], self.cfg, self.backbone.layer_ids)

    def uses_pseudo(self, ep: Episode) -> bool:
        return self.cfg.tvea.enabled and ep.k == 1 and self.vl is not None

    def pseudo_label(self, ep: Episode) -> PseudoLabel:
        t = self.cfg.tvea
        enc = vl_encode_image(ep.query, self.vl)
        prompts = build_prompts(ep.fg_class, ep.all_classes, t.multi_label, t.template)
        cam = generate_cam(enc, prompts, self.vl, out_size=ep.query.shape[1:])
        return make_pseudo_label(cam, t.threshold_mode, t.crf, ep.query, t.fixed_tau, t.bins)

    # -- adaptation -------------------------------------------------------
    def adapt_episode(self, ep: Episode, params: AdapterParams | None = None,
                      pseudo: PseudoLabel | None = None) -> tuple[AdapterParams, AdaptationRecord]:
        cfg = self.cfg
        params = params or self.new_adapter()
        t0 = time.perf_counter()
        use_pascal = self.uses_pseudo(ep)
        if use_pascal and pseudo is None:
            pseudo = self.pseudo_label(ep)
        v = cfg.vvea
        enabled = tuple(name for name, on in (("local", v.enabled and v.local and cfg.vvea.n_blocks > 0),
                                              ("global", v.enabled and v.global_),
                                              ("dense", v.enabled and v.dense),
                                              ("pascal", use_pascal)) if on)
        record = AdaptationRecord(cache_key=(ep.dataset_id, ep.fg_class), epochs=cfg.adapt.epochs,
                                  lr=cfg.adapt.lr, enabled=enabled)
        trainable = [p for p in params.parameters() if p.requires_grad]
        opt = torch.optim.SGD(trainable, lr=cfg.adapt.lr, momentum=cfg.adapt.momentum,
                              weight_decay=cfg.adapt.weight_decay)
        images = [*ep.support_images, ep.query]
        masks = [*ep.support_masks, pseudo.mask if use_pascal else np.zeros(ep.query.shape[1:], np.uint8)]
        base_feats = self.features(images)
        params.train()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateLossWarning)
            for epoch in range(cfg.adapt.epochs):
                epoch_layers = [dict.fromkeys(COMPONENTS, 0.0) for _ in base_feats]
                epoch_total = 0.0
                opt.zero_grad()
                loss_sum = None
                for view in range(max(1, cfg.adapt.views)):
                    layer_losses = self._view_losses(ep, params, images, masks, base_feats, enabled,
                                                     _seed(cfg.adapt.seed, ep.name, epoch, view))
                    loss = total_loss(layer_losses) / max(1, cfg.adapt.views)
                    loss_sum = loss if loss_sum is None else loss_sum + loss
                    for acc, comps in zip(epoch_layers, layer_losses):
                        for k, val in comps.items():
                            acc[k] += float(torch.as_tensor(val).detach()) / max(1, cfg.adapt.views)
                epoch_total = float(loss_sum.detach())
                if not math.isfinite(epoch_total) or epoch_total > cfg.adapt.max_loss:
                    raise AdaptationDiverged(f"loss {epoch_total:.3g} at epoch {epoch} ({ep.name})")
                if loss_sum.requires_grad:
                    loss_sum.backward()
                    opt.step()
                record.losses.append(epoch_layers)
                record.totals.append(epoch_total)
        params.eval()
        record.wall_time = time.perf_counter() - t0
        record.checksum = params.checksum()
        self.adaptations += 1
        self.records.append(record)
        return params, record

    def _view_losses(self, ep, params, images, masks, base_feats, enabled, seed) -> list[dict]:
        cfg = self.cfg
        n_img = len(images)
        k = ep.k
        views = [augment_view(img, m, seed + i) for i, (img, m) in enumerate(zip(images, masks))]
        aug_feats = self.features([vi[0] for vi in views])
        rng = np.random.default_rng(seed)
        out = []
        query_logits = []
        for li, (fb, fa) in enumerate(zip(base_feats, aug_feats)):
            adapted = params.per_layer[li](torch.cat([fb, fa]))
            orig, aug = adapted[:n_img], adapted[n_img:]
            hw = tuple(orig.shape[-2:])
            comps: dict[str, torch.Tensor | float] = {}
            if "local" in enabled or "global" in enabled:
                n = max(1, min(cfg.grid_side, *hw))
                loc, glob = [], []
                for s in range(k):
                    m0 = resize_mask(masks[s], hw)
                    m1 = resize_mask(views[s][1], hw)
                    if "local" in enabled:
                        loc.append(local_contrast_loss(local_prototypes(orig[s], m0, n),
                                                       local_prototypes(aug[s], m1, n)))
                    if "global" in enabled:
                        glob.append(global_contrast_loss(masked_prototype(orig[s], m0), masked_prototype(aug[s], m1)))
                if loc:
                    comps["local"] = torch.stack(loc).mean()
                if glob:
                    comps["global"] = torch.stack(glob).mean()
            if "dense" in enabled:
                dl = []
                for i in range(n_img):
                    corr = correspondences(views[i][2], images[i].shape[1:], hw)
                    if len(corr) < 2:
                        continue
                    corr = corr.subsample(cfg.vvea.max_pairs, rng)
                    dl.append(dense_contrast_loss(orig[i], aug[i], corr, cfg.vvea.tau))
                if dl:
                    comps["dense"] = torch.stack(dl).mean()
            out.append(comps)
            query_logits.append(adapted[[n_img - 1, 2 * n_img - 1]])
        if "pascal" in enabled:
            logits = rough_query_mask(query_logits, params.classifier_head)
            out[0]["pascal"] = 0.5 * (pseudo_label_loss(logits[0], masks[-1]) +
                                      pseudo_label_loss(logits[1], views[-1][1]))
        return out

    # -- prediction -------------------------------------------------------
    @torch.no_grad()
    def predict(self, ep: Episode, params: AdapterParams, pseudo: PseudoLabel | None = None) -> MaskSet:
        cfg = self.cfg
        params.eval()
        feats = self.features([*ep.support_images, ep.query])
        adapted = params(feats)
        k = ep.k
        attention, sims = [], []
        for li, layer in enumerate(adapted):
            hw = tuple(layer.shape[-2:])
            ms = [resize_mask(m, hw) for m in ep.support_masks]
            fs = [layer[s] for s in range(k)]
            sim = coarse_similarity_map(layer[k], fs, ms)
            sims.append(sim)
            if sim is None:
                continue  # no support foreground at this resolution
            attention.append(cross_attention_masks(layer[k], fs, ms, params.attention[li]))
        rough = rough_query_mask([t[k] for t in adapted], params.classifier_head)
        use_tvea = cfg.tvea.enabled and self.vl is not None
        if use_tvea and ep.k == 1 and pseudo is None:
            pseudo = self.pseudo_label(ep)
        if not use_tvea or ep.k != 1:
            pseudo = None
        size = ep.query.shape[1:]
        comps = component_maps(rough if use_tvea else None, pseudo.mask if pseudo is not None else None,
                               attention, size)
        weights = cfg.fusion.weights
        if weights and len(weights) != len(comps):
            raise ValueError(f"fusion.weights has {len(weights)} entries for components {list(comps)}")
        fused, final = fuse_masks(comps, weights or None, cfg.fusion.threshold)
        if cfg.fusion.crf and 0 < final.sum() < final.size:
            final = dense_crf(fused, ep.query)
        return MaskSet(rough, pseudo, attention, sims, fused, final, comps)


# --------------------------------------------------------------------------
# first-episode cache


class AdapterCache:
    """Adapted weights keyed by ``(dataset_id, class)``.

    With a directory, entries persist as ``<dir>/<dataset>/<class>/<config-hash>.ckpt``.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[tuple[str, str], tuple[str, dict]] = {}
        self._lock = threading.Lock()

    def _path(self, key, cfg_hash) -> Path:
        return self.directory / key[0] / key[1] / f"{cfg_hash}.ckpt"

    def get(self, key: tuple[str, str], cfg_hash: str, params: AdapterParams) -> bool:
        """Load cached weights into ``params``; False on a miss."""
        with self._lock:
            hit = self._mem.get(key)
        if hit is not None:
            if hit[0] != cfg_hash:
                raise StaleCacheError(f"cache entry for {key} was built with config {hit[0]}, not {cfg_hash}")
            params.load_state_dict(hit[1])
            return True
        if self.directory is not None:
            path = self._path(key, cfg_hash)
            if path.exists():
                load_adapter(path, params)
                with self._lock:
                    self._mem.setdefault(key, (cfg_hash, {k: v.clone() for k, v in params.state_dict().items()}))
                return True
            others = list(path.parent.glob("*.ckpt")) if path.parent.exists() else []
            if others:
                raise StaleCacheError(f"{path.parent} holds checkpoints for other configs: {[p.name for p in others]}")
        return False

    def put(self, key: tuple[str, str], cfg_hash: str, params: AdapterParams) -> bool:
        """Insert if absent; returns False when another writer got there first."""
        state = {k: v.detach().clone() for k, v in params.state_dict().items()}
        with self._lock:
            if key in self._mem:
                return False
            self._mem[key] = (cfg_hash, state)
        if self.directory is not None:
            save_adapter(params, self._path(key, cfg_hash), {"dataset": key[0], "class": key[1], "config": cfg_hash})
        return True

    def __contains__(self, key):
        return key in self._mem

    def __len__(self):
        return len(self._mem)


def run_task(episodes: Iterable[Episode], pipeline: Pipeline, cache: AdapterCache | None = None,
             log_path: str | Path | None = None) -> Iterator[tuple[Episode, MaskSet]]:
    """Adapt on the first episode of each class, reuse its weights for the rest."""
    cache = cache if cache is not None else AdapterCache()
    cfg_hash = pipeline.cfg.hash()
    for ep in episodes:
        key = (ep.dataset_id, ep.fg_class)
        params = pipeline.new_adapter()
        if not cache.get(key, cfg_hash, params):
            params, record = pipeline.adapt_episode(ep, params)
            cache.put(key, cfg_hash, params)
            if log_path:
                record.write_jsonl(log_path)
            cache.get(key, cfg_hash, params)
        yield ep, pipeline.predict(ep, params)


def adapt_episode(ep: Episode, backbone: PyramidBackbone, vl: VLModel | None, cfg: Config):
    return Pipeline(cfg, backbone, vl).adapt_episode(ep)
