"""Command-line entry point: ``tvgseg <command> [--config FILE] [--set key=value ...]``.

Without ``dataset.root`` every command runs on the built-in synthetic suite
(toy backbone and toy vision-language pair recommended, see ``--toy``).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adapt import StaleCacheError
from .backbone import WeightsError
from .config import Config, ConfigError, load_config, toy_config
from .core import DatasetError, EpisodeSource, disk_episodes

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _config(args) -> Config:
    return load_config(args.config, args.set, base=toy_config() if args.toy else None)


def _episodes(cfg: Config, classes=None) -> tuple[EpisodeSource, dict | None]:
    d = cfg.dataset
    if d.root:
        src = disk_episodes(d.root, d.dataset_id, classes, d.k_shot, d.episodes_per_class, d.seed,
                            size=d.input_size, adapter=d.adapter)
        return src, None
    from .harness import synthetic_suite

    return synthetic_suite(episodes_per_class=d.episodes_per_class, k=d.k_shot, size=d.input_size, seed=d.seed)


def _pipeline(cfg: Config, concepts):
    from .adapt import Pipeline

    return Pipeline(cfg, concepts=concepts)


def _cache(args):
    from .adapt import AdapterCache

    return AdapterCache(getattr(args, "cache", None))


def _stem(i: int, ep) -> str:
    return f"{i:05d}_{ep.fg_class}".replace("/", "_")


# --------------------------------------------------------------------------
# commands


def cmd_run(args, cfg):
    from .harness import evaluate

    eps, concepts = _episodes(cfg, args.classes)
    pipe = _pipeline(cfg, concepts)
    out = Path(args.out)
    report = evaluate(eps, cfg=cfg, pipeline=pipe, cache=_cache(args), dump_dir=out / "masks",
                      report_path=out / "report.json")
    if args.log:
        for rec in pipe.records:
            rec.write_jsonl(args.log)
    print(f"mIoU {100 * report.miou:.2f}  FB-IoU {100 * report.fb_iou:.2f}  episodes {report.episodes}  "
          f"adaptations {pipe.adaptations}")


def cmd_adapt(args, cfg):
    eps, concepts = _episodes(cfg, args.classes)
    pipe = _pipeline(cfg, concepts)
    cache = _cache(args)
    h = cfg.hash()
    seen = set()
    for ep in eps:
        key = (ep.dataset_id, ep.fg_class)
        if key in seen:
            continue
        seen.add(key)
        params = pipe.new_adapter()
        if cache.get(key, h, params):
            print(f"{key[0]}/{key[1]}: cached")
            continue
        params, record = pipe.adapt_episode(ep, params)
        cache.put(key, h, params)
        if args.log:
            record.write_jsonl(args.log)
        first, last = record.totals[:1], record.totals[-1:]
        print(f"{key[0]}/{key[1]}: loss {first[0] if first else float('nan'):.4f} -> "
              f"{last[0] if last else float('nan'):.4f} in {record.wall_time:.1f}s")


def cmd_predict(args, cfg):
    from .adapt import run_task
    from .maskio import save_arrays, save_mask_png

    eps, concepts = _episodes(cfg, args.classes)
    pipe = _pipeline(cfg, concepts)
    out = Path(args.out)
    for i, (ep, ms) in enumerate(run_task(eps, pipe, _cache(args), args.log)):
        if args.limit and i >= args.limit:
            break
        save_mask_png(ms.final, out / f"{_stem(i, ep)}.png")
        if args.dump:
            save_arrays(ms.arrays(), out / f"{_stem(i, ep)}.npz")
    print(f"wrote predictions to {out}")


def cmd_pseudolabel(args, cfg):
    from .adapt import Pipeline
    from .maskio import save_heatmap_png, save_json, save_mask_png

    if not cfg.tvea.enabled:
        raise ConfigError("pseudolabel needs tvea.enabled = true")
    eps, concepts = _episodes(cfg, args.classes)
    pipe = Pipeline(cfg, concepts=concepts)
    out = Path(args.out)
    for i, ep in enumerate(eps):
        if args.limit and i >= args.limit:
            break
        pl = pipe.pseudo_label(ep)
        stem = _stem(i, ep)
        save_mask_png(pl.mask, out / f"{stem}.png")
        save_heatmap_png(pl.source.heatmap, out / f"{stem}_cam.png")
        save_json({"episode": ep.name, "class": ep.fg_class, "prompts": list(pl.source.prompts),
                   "threshold": pl.source.threshold_used, "scores": pl.source.class_scores.tolist(),
                   "degenerate": pl.degenerate, "crf": pl.crf_applied}, out / f"{stem}.json")
    print(f"wrote pseudo-labels to {out}")


def cmd_evaluate(args, cfg):
    from .harness import evaluate
    from .core import load_mask_file

    eps, concepts = _episodes(cfg, args.classes)
    if args.predictions:
        pred_dir = Path(args.predictions)
        order = {id(ep): i for i, ep in enumerate(eps)}

        def predictor(ep):
            path = pred_dir / f"{_stem(order[id(ep)], ep)}.png"
            if not path.exists():
                raise DatasetError(f"missing prediction {path}")
            mask, _ = load_mask_file(path, ep.query.shape[1])
            return mask

        report = evaluate(eps, predictor, cfg, report_path=args.report)
    else:
        report = evaluate(eps, cfg=cfg, pipeline=_pipeline(cfg, concepts), cache=_cache(args),
                          report_path=args.report)
    print(report.to_json() if not args.report else f"mIoU {100 * report.miou:.2f}  FB-IoU {100 * report.fb_iou:.2f}")


def cmd_sweep(args, cfg):
    from .harness import sweep_threshold

    eps, concepts = _episodes(cfg, args.classes)
    taus = [float(t) for t in args.taus.split(",")] if args.taus else [0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    out = Path(args.out)
    rows = sweep_threshold(eps, taus, pipeline=_pipeline(cfg.replace(**{"tvea.enabled": True}), concepts),
                           csv_path=out / "sweep.csv", plot_path=out / "sweep.png")
    for tau, m in rows:
        print(f"tau {tau:.3f}  mIoU {100 * m:.2f}")


def cmd_ablate(args, cfg):
    from .harness import ABLATIONS, ablate

    eps, concepts = _episodes(cfg, args.classes)
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(ABLATIONS)}")
    reports = ablate(list(eps), cfg, concepts, variants)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({k: json.loads(r.to_json()) for k, r in reports.items()}, indent=2))
    for name, r in reports.items():
        print(f"{name:12s} mIoU {100 * r.miou:.2f}")


COMMANDS = {
    "run": (cmd_run, "adapt on the first episode per class, predict all, write masks and a report"),
    "adapt": (cmd_adapt, "adapt once per class and store the weights in the cache"),
    "predict": (cmd_predict, "write final query masks (and optional component dumps)"),
    "pseudolabel": (cmd_pseudolabel, "write text-guided pseudo-labels with JSON sidecars"),
    "evaluate": (cmd_evaluate, "score the pipeline or a directory of saved predictions"),
    "sweep": (cmd_sweep, "pseudo-label mIoU across fixed thresholds (CSV + plot)"),
    "ablate": (cmd_ablate, "compare loss-module variants"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvgseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="TOML or JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        s.add_argument("--toy", action="store_true", help="start from the CPU-sized toy configuration")
        s.add_argument("--classes", nargs="*", help="restrict to these classes (disk datasets)")
        if name in ("run", "predict", "pseudolabel", "sweep", "ablate"):
            s.add_argument("--out", default=f"out/{name}", help="output directory")
        if name in ("run", "adapt", "predict", "evaluate"):
            s.add_argument("--cache", help="adapter checkpoint cache directory")
        if name in ("run", "adapt", "predict"):
            s.add_argument("--log", help="append adaptation losses to this JSONL file")
        if name in ("predict", "pseudolabel"):
            s.add_argument("--limit", type=int, default=0, help="stop after this many episodes")
        if name == "predict":
            s.add_argument("--dump", action="store_true", help="also write per-component maps (.npz)")
        if name == "evaluate":
            s.add_argument("--predictions", help="directory of saved PNG predictions to score")
            s.add_argument("--report", help="write the JSON report here")
        if name == "sweep":
            s.add_argument("--taus", help="comma-separated thresholds (default 0.3..0.8)")
        if name == "ablate":
            s.add_argument("--variants", help="comma-separated subset of baseline,vvea,tvea,vvea+tvea")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](args, cfg)
    except (ConfigError, WeightsError, StaleCacheError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
