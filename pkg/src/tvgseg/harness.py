"""Metrics, the episodic evaluation driver, sweeps and ablations."""
from __future__ import annotations

import csv
import json
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import Config
from .core import Episode, EpisodeSource, SyntheticSpec, make_synthetic_episode

Result = tuple[np.ndarray, np.ndarray, str]


def iou(pred: np.ndarray, gt: np.ndarray, class_value: int = 1) -> float:
    """IoU of one class; 1.0 when the class is absent from both masks."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = pred == class_value, gt == class_value
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _tally(pred, gt, class_value) -> tuple[int, int]:
    p, g = np.asarray(pred) == class_value, np.asarray(gt) == class_value
    return int(np.logical_and(p, g).sum()), int(np.logical_or(p, g).sum())


def per_class_iou(results: Iterable[Result]) -> dict[str, float]:
    """Foreground IoU pooled over each class's episodes."""
    inter: dict[str, int] = defaultdict(int)
    union: dict[str, int] = defaultdict(int)
    for pred, gt, cls in results:
        if np.shape(pred) != np.shape(gt):
            raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
        i, u = _tally(pred, gt, 1)
        inter[cls] += i
        union[cls] += u
    return {c: (inter[c] / union[c] if union[c] else 1.0) for c in sorted(inter)}


def compute_miou(results: Iterable[Result]) -> float:
    table = per_class_iou(results)
    if not table:
        raise ValueError("no results")
    return float(np.mean(list(table.values())))


def fb_ious(results: Iterable[Result]) -> tuple[float, float]:
    """(foreground IoU, background IoU), each pooled over all episodes."""
    tallies = np.zeros((2, 2), dtype=np.int64)
    n = 0
    for pred, gt, _ in results:
        for c in (0, 1):
            tallies[c] += _tally(pred, gt, c)
        n += 1
    if n == 0:
        raise ValueError("no results")
    vals = [t[0] / t[1] if t[1] else 1.0 for t in tallies]
    return float(vals[1]), float(vals[0])


def compute_fb_iou(results: Iterable[Result]) -> float:
    fg, bg = fb_ious(results)
    return (fg + bg) / 2


@dataclass
class MetricsReport:
    per_class: dict[str, float]
    miou: float
    fb_iou: float
    fg_iou: float
    bg_iou: float
    episodes: int
    config: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.episodes <= 0:
            raise ValueError("report needs at least one episode")

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


def report_from_results(results: Sequence[Result], config: dict | None = None, runtime: dict | None = None) -> MetricsReport:
    fg, bg = fb_ious(results)
    return MetricsReport(per_class_iou(results), compute_miou(results), (fg + bg) / 2, fg, bg, len(results),
                         config or {}, runtime or {})


def evaluate(dataset: Iterable[Episode], predictor: Callable[[Episode], np.ndarray] | None = None,
             cfg: Config | None = None, *, pipeline=None, cache=None, dump_dir: str | Path | None = None,
             report_path: str | Path | None = None) -> MetricsReport:
    """Score a predictor (episode -> binary mask) or, by default, the full pipeline."""
    t0 = time.perf_counter()
    results: list[Result] = []
    runtime: dict = {}
    if predictor is None:
        from .adapt import Pipeline, run_task

        pipeline = pipeline or Pipeline(cfg)
        stream = ((ep, ms.final, ms) for ep, ms in run_task(dataset, pipeline, cache))
    else:
        stream = ((ep, np.asarray(predictor(ep)), None) for ep in dataset)
    for i, (ep, pred, ms) in enumerate(stream):
        if ep.query_gt is None:
            raise ValueError(f"episode {ep.name} has no query ground truth")
        results.append((pred, ep.query_gt, ep.fg_class))
        if dump_dir is not None:
            from .maskio import save_mask_png, save_arrays

            d = Path(dump_dir)
            save_mask_png(pred, d / f"{i:05d}_{ep.fg_class}.png")
            if ms is not None:
                save_arrays(ms.arrays(), d / f"{i:05d}_{ep.fg_class}.npz")
    if pipeline is not None:
        runtime["adaptations"] = pipeline.adaptations
        runtime["adapt_seconds"] = sum(r.wall_time for r in pipeline.records)
    runtime["seconds"] = time.perf_counter() - t0
    return_cfg = cfg.to_dict() if cfg is not None else {}
    rep = report_from_results(results, return_cfg, runtime)
    if report_path:
        rep.to_json(report_path)
    return rep


# --------------------------------------------------------------------------
# synthetic suite

SYNTH_CLASSES = (
    ("lung", (0.80, 0.30, 0.25)),
    ("lesion", (0.25, 0.75, 0.30)),
    ("road", (0.80, 0.75, 0.20)),
    ("leaf", (0.70, 0.30, 0.80)),
)
SYNTH_BACKGROUND = (0.35, 0.40, 0.55)


def synthetic_suite(n_classes: int = 4, episodes_per_class: int = 25, k: int = 1, size: int = 64, seed: int = 0,
                    **spec_overrides) -> tuple[EpisodeSource, dict[str, tuple[float, float, float]]]:
    """Episodes of up to four planted classes plus the colour concepts for the toy VL pair."""
    if not 1 <= n_classes <= len(SYNTH_CLASSES):
        raise ValueError(f"n_classes must be in 1..{len(SYNTH_CLASSES)}")
    classes = SYNTH_CLASSES[:n_classes]
    names = tuple(c for c, _ in classes)
    base = dict(size=size, k=k, bg_color=SYNTH_BACKGROUND, fg_stripes=0.12, bg_stripes=0.12, noise=0.10,
                color_jitter=0.06, distractors=2, all_classes=names)
    base.update(spec_overrides)
    eps = []
    for ci, (name, color) in enumerate(classes):
        spec = SyntheticSpec(class_name=name, fg_color=color, shape="ellipse" if ci % 2 == 0 else "rectangle", **base)
        for j in range(episodes_per_class):
            eps.append(make_synthetic_episode(spec, seed * 1_000_003 + ci * 10_007 + j))
    return EpisodeSource(eps), {name: color for name, color in classes}


# --------------------------------------------------------------------------
# threshold sweep and ablations


def sweep_threshold(dataset: Iterable[Episode], taus: Sequence[float], pipeline=None, cfg: Config | None = None,
                    csv_path: str | Path | None = None, plot_path: str | Path | None = None) -> list[tuple[float, float]]:
    """Pseudo-label-only mIoU at each fixed threshold."""
    from .adapt import Pipeline
    from .tvea import make_pseudo_label

    pipeline = pipeline or Pipeline(cfg)
    eps = list(dataset)
    cams = []
    for ep in eps:
        cam = pipeline.pseudo_label(ep).source
        cams.append(cam)
    rows = []
    for tau in taus:
        results = [(make_pseudo_label(cam, "fixed", False, None, tau).mask, ep.query_gt, ep.fg_class)
                   for cam, ep in zip(cams, eps)]
        rows.append((float(tau), compute_miou(results)))
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "miou"])
            w.writerows(rows)
    if plot_path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([r[0] for r in rows], [100 * r[1] for r in rows], marker="o")
        ax.set_xlabel("threshold")
        ax.set_ylabel("mIoU (%)")
        fig.tight_layout()
        Path(plot_path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    return rows


ABLATIONS = {
    "baseline": {"vvea.enabled": False, "tvea.enabled": False, "adapter.kind": "projection"},
    "vvea": {"vvea.enabled": True, "tvea.enabled": False},
    "tvea": {"vvea.enabled": False, "tvea.enabled": True},
    "vvea+tvea": {"vvea.enabled": True, "tvea.enabled": True},
}


def ablate(dataset: Sequence[Episode], cfg: Config, concepts=None, variants: Sequence[str] = tuple(ABLATIONS),
           backbone=None, vl=None) -> dict[str, MetricsReport]:
    from .adapt import AdapterCache, Pipeline
    from .backbone import build_backbone, build_vl

    backbone = backbone or build_backbone(cfg)
    vl = vl or build_vl(cfg, concepts)
    out = {}
    for name in variants:
        vcfg = cfg.replace(**ABLATIONS[name])
        pipe = Pipeline(vcfg, backbone, vl if vcfg.tvea.enabled else None)
        out[name] = evaluate(dataset, cfg=vcfg, pipeline=pipe, cache=AdapterCache())
    return out
