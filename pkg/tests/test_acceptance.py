"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import autograd_grad, block_average, central_fd, otsu_brute_force, tally_fb_iou, tally_miou
from tvgseg.adapt import AdapterCache, Pipeline, run_task, total_loss
from tvgseg.backbone import RESNET50_CHANNELS, ToyVL, vl_encode_image
from tvgseg.config import Config, toy_config
from tvgseg.core import disk_episodes, sample_affine
from tvgseg.harness import ablate, compute_fb_iou, compute_miou, evaluate, iou, synthetic_suite
from tvgseg.seg_head import AttentionParams, cross_attention_masks, rough_query_mask
from tvgseg.tsaa import AdapterLayer, init_adapter
from tvgseg.tvea import gradcam_weights, otsu_threshold, pseudo_label_loss, vl_score_fn
from tvgseg.vvea import (correspondences, dense_contrast_loss, global_contrast_loss, local_contrast_loss,
                         local_prototypes, masked_prototype)

FIXTURES = Path(__file__).parent / "fixtures" / "lung"


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return emit


def _close(a, b, rtol=1e-4, atol=1e-8):
    return bool(torch.allclose(a, b, rtol=rtol, atol=atol))


def _f64(seed, shape):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _mask(seed, h=4, w=4):
    m = (np.random.default_rng(seed).uniform(size=(h, w)) < 0.5).astype(np.uint8)
    m[0, 0], m[-1, -1] = 1, 0
    return m


def test_criterion_1_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    checks = {}
    m, ma = _mask(1), _mask(2)
    other = _f64(9, (6, 4, 4))

    def both(fn, x):
        return _close(autograd_grad(fn, x), central_fd(fn, x))

    checks["local"] = both(lambda f: local_contrast_loss(local_prototypes(f, m, 2), local_prototypes(other, ma, 2)),
                           _f64(0, (6, 4, 4)))
    checks["local/aug"] = both(lambda f: local_contrast_loss(local_prototypes(other, m, 2), local_prototypes(f, ma, 2)),
                               _f64(1, (6, 4, 4)))
    checks["global"] = both(lambda f: global_contrast_loss(masked_prototype(f, m), masked_prototype(other, ma)),
                            _f64(3, (6, 4, 4)))
    corr = correspondences(sample_affine((16, 16), 1), (16, 16), (4, 4))
    checks["dense"] = both(lambda f: dense_contrast_loss(f, other, corr), _f64(4, (6, 4, 4)))
    head = nn.Conv2d(6, 2, 1).double()
    checks["pascal"] = both(lambda f: pseudo_label_loss(rough_query_mask([f], head), m), _f64(5, (6, 4, 4)))

    layer = AdapterLayer(6, width=3, group_size=3, proj_dim=2).double().train()
    with torch.no_grad():
        layer.gca.w1.normal_()
        layer.gca.w2.normal_()
    x = _f64(6, (2, 6, 4, 4))
    probe = _f64(7, (2, 3, 4, 4))
    checks["adapter/input"] = both(lambda v: (layer(v) * probe).sum(), x)
    for name, p in layer.named_parameters():
        layer.zero_grad()
        (layer(x) * probe).sum().backward()
        analytic = p.grad.detach().clone()

        def at(value, p=p):
            saved = p.detach().clone()
            with torch.no_grad():
                p.copy_(value)
                out = (layer(x) * probe).sum()
                p.copy_(saved)
            return out

        checks[f"adapter/{name}"] = _close(analytic, central_fd(at, p.detach()))
    elapsed = time.perf_counter() - t0
    failed = [k for k, ok in checks.items() if not ok]
    verdict(1, not failed and elapsed < 60,
            f"{len(checks) - len(failed)}/{len(checks)} gradient checks within rtol 1e-4, {elapsed:.1f}s"
            + (f"; failed {failed}" if failed else ""))


def test_criterion_2_chain_rule_cam_weights(verdict):
    worst = 0.0
    ok = True
    for seed in range(10):
        vl = ToyVL(seed=seed, input_size=32, patch=8, dim=6).double()
        img = np.random.default_rng(seed).uniform(size=(3, 32, 32))
        acts = vl_encode_image(img, vl).penultimate_features
        fn = vl_score_fn(vl, vl.encode_text(["a photo of a x", "a photo of a non x"]).double())
        chain = gradcam_weights(acts, fn)
        numeric = central_fd(lambda a: fn(a)[1][0], acts).sum(dim=(1, 2)) / (acts.shape[1] * acts.shape[2])
        ok &= _close(chain, numeric, rtol=1e-4, atol=1e-10)
        worst = max(worst, float(((chain - numeric).abs() / numeric.abs().clamp_min(1e-12)).max()))
    verdict(2, ok, f"10 toy models, worst relative deviation {worst:.2e}")


def test_criterion_3_oracle_equivalences(verdict):
    rng = np.random.default_rng(0)
    otsu_ok = all(otsu_threshold(x) == otsu_brute_force(x)
                  for x in (rng.uniform(size=(10, 10)) ** rng.uniform(0.3, 3) for _ in range(100)))

    proto_err = 0.0
    for n in (1, 2, 3, 4):
        f, m = _f64(n, (5, 9, 10)), _mask(n, 9, 10)
        grid, ref = local_prototypes(f, m, n), block_average(f.numpy(), m, n)
        for (i, j), (fg, bg, _, _) in ref.items():
            cell = grid.cell(i, j)
            for got, want in ((cell.fg, fg), (cell.bg, bg)):
                if (got is None) != (want is None):
                    proto_err = math.inf
                elif got is not None:
                    proto_err = max(proto_err, float(np.abs(got.numpy() - want).max()))

    heads, d = 2, 3
    p = AttentionParams(4, heads, d, pe_scale=0.0).double()
    with torch.no_grad():
        for lin, s in ((p.q_proj, 10), (p.k_proj, 11)):
            lin.weight.copy_(_f64(s, lin.weight.shape))
            lin.bias.copy_(_f64(s + 5, lin.bias.shape))
    fq, fs, am = _f64(20, (4, 2, 2)), _f64(21, (4, 2, 2)), np.array([[1, 0], [1, 0]])
    xq = fq.reshape(4, -1).T / fq.reshape(4, -1).T.norm(dim=1, keepdim=True)
    xs = fs.reshape(4, -1).T / fs.reshape(4, -1).T.norm(dim=1, keepdim=True)
    direct = torch.zeros(4, dtype=torch.float64)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        q = xq @ p.q_proj.weight[sl].T + p.q_proj.bias[sl]
        k = xs @ p.k_proj.weight[sl].T + p.k_proj.bias[sl]
        direct += torch.softmax(q @ k.T / math.sqrt(d), dim=1) @ torch.tensor(am.reshape(-1), dtype=torch.float64)
    attn_err = float((cross_attention_masks(fq, fs, am, p).detach().reshape(-1) - direct.detach() / heads).abs().max())

    res = []
    for cls in ("a", "b", "a", "b", "a"):
        gt = (rng.uniform(size=(5, 6)) < 0.4).astype(np.uint8)
        pred = np.where(rng.uniform(size=gt.shape) < 0.3, 1 - gt, gt)
        res.append((pred, gt, cls))
    metric_err = max(abs(compute_miou(res) - tally_miou(res)), abs(compute_fb_iou(res) - tally_fb_iou(res)))

    ok = otsu_ok and proto_err <= 1e-6 and attn_err <= 1e-6 and metric_err <= 1e-6
    verdict(3, ok, f"otsu exact={otsu_ok}, prototype err {proto_err:.1e}, attention err {attn_err:.1e}, "
                   f"metric err {metric_err:.1e}")


def test_criterion_4_reduction_identities(verdict):
    f, m, fa, ma = _f64(4, (6, 4, 4)), _mask(4), _f64(5, (6, 4, 4)), _mask(5)
    n1 = float(local_contrast_loss(local_prototypes(f, m, 1), local_prototypes(fa, ma, 1)))
    glob = float(global_contrast_loss(masked_prototype(f, m), masked_prototype(fa, ma)))
    recompose = 0.0
    for n in (1, 2, 3, 4):
        g, gm = _f64(30 + n, (3, 11, 9)), _mask(30 + n, 11, 9)
        grid = local_prototypes(g, gm, n)
        num = sum(c.fg * c.fg_count for row in grid.cells for c in row if c.fg is not None)
        den = sum(c.fg_count for row in grid.cells for c in row)
        recompose = max(recompose, float((num / den - masked_prototype(g, gm).fg).abs().max()))
    vals = np.random.default_rng(1).normal(size=(4, 4))
    layers = [dict(zip(("local", "global", "pascal", "dense"), map(torch.tensor, row))) for row in vals]
    explicit = 0.0
    for row in vals.tolist():
        for v in row:
            explicit += v
    sum_err = abs(float(total_loss(layers)) - explicit)
    ok = n1 == glob and recompose <= 1e-6 and sum_err <= 1e-12
    verdict(4, ok, f"local(n=1) - global = {n1 - glob:.1e}, recompose err {recompose:.1e}, 16-term sum err {sum_err:.1e}")


def test_criterion_5_adaptation_behaviour(verdict):
    t0 = time.perf_counter()
    eps, concepts = synthetic_suite(episodes_per_class=25)
    eps = list(eps)
    cfg = toy_config()

    zero = Pipeline(cfg.replace(**{"adapt.lr": 0.0, "adapt.epochs": 3}), concepts=concepts)
    params = zero.new_adapter()
    before = {k: v.detach().clone() for k, v in params.named_parameters()}
    params, _ = zero.adapt_episode(eps[0], params)
    no_op = all(torch.equal(v, before[k]) for k, v in params.named_parameters())

    descents = 0
    for seed in range(10):
        seps, sconcepts = synthetic_suite(episodes_per_class=1, seed=seed)
        _, rec = Pipeline(cfg.replace(**{"adapt.seed": seed}), concepts=sconcepts).adapt_episode(list(seps)[seed % 4])
        descents += np.mean(rec.totals[-5:]) < np.mean(rec.totals[:5])

    pre_cfg = cfg.replace(**{"adapt.epochs": 0})
    pre = evaluate(eps, cfg=pre_cfg, pipeline=Pipeline(pre_cfg, concepts=concepts)).miou
    pipe = Pipeline(cfg, concepts=concepts)
    frozen = pipe.frozen_checksums()
    post = evaluate(eps, cfg=cfg, pipeline=pipe).miou
    unchanged = pipe.frozen_checksums() == frozen
    elapsed = time.perf_counter() - t0
    ok = no_op and descents >= 9 and post - pre >= 0.10 and unchanged and elapsed < 600
    verdict(5, ok, f"lr=0 no-op={no_op}, descent {descents}/10 seeds, mIoU {100 * pre:.1f} -> {100 * post:.1f} "
                   f"on {len(eps)} episodes, frozen unchanged={unchanged}, {elapsed:.0f}s")


def test_criterion_6_ablation_ordering(verdict):
    cfg = toy_config()
    wins, rows = 0, []
    for seed in range(10):
        eps, concepts = synthetic_suite(episodes_per_class=25, seed=seed)
        scfg = cfg.replace(**{"adapt.seed": seed, "dataset.seed": seed})
        r = ablate(list(eps), scfg, concepts, ("baseline", "vvea", "vvea+tvea"))
        b, v, vt = (r[k].miou for k in ("baseline", "vvea", "vvea+tvea"))
        wins += b < v <= vt
        rows.append(f"{100 * b:.0f}/{100 * v:.0f}/{100 * vt:.0f}")
    verdict(6, wins >= 6, f"baseline < vvea <= vvea+tvea in {wins}/10 seeds ({', '.join(rows)})")


def test_criterion_7_first_episode_cache(verdict, tmp_path):
    eps, concepts = synthetic_suite(n_classes=1, episodes_per_class=4)
    eps = list(eps)
    cfg = toy_config(**{"adapt.epochs": 5})
    pipe = Pipeline(cfg, concepts=concepts)
    cache = AdapterCache(tmp_path)
    sums = []
    first = []
    for ep, ms in run_task(eps, pipe, cache):
        p = pipe.new_adapter()
        cache.get((ep.dataset_id, ep.fg_class), cfg.hash(), p)
        sums.append(p.checksum())
        first.append(ms.final)
    warm = Pipeline(cfg, concepts=concepts)
    again = [ms.final for _, ms in run_task(eps, warm, AdapterCache(tmp_path))]
    replay = all(np.array_equal(a, b) for a, b in zip(first, again))
    ok = pipe.adaptations == 1 and len(set(sums)) == 1 and warm.adaptations == 0 and replay
    verdict(7, ok, f"{len(eps)} episodes -> {pipe.adaptations} adaptation, {len(set(sums))} distinct checksum, "
                   f"warm rerun adaptations {warm.adaptations}, bitwise replay={replay}")


def test_criterion_8_parameter_count(verdict):
    n = init_adapter(list(RESNET50_CHANNELS), Config()).num_learnable()
    dev = (n - 1.21e6) / 1.21e6
    verdict(8, abs(dev) <= 0.15, f"{n:,} learnable parameters ({100 * dev:+.1f}% vs 1.21M)")


WEIGHTS = os.environ.get("TVGSEG_CLIP_WEIGHTS", "")


@pytest.mark.skipif(not WEIGHTS, reason="set TVGSEG_CLIP_WEIGHTS to a local CLIP ViT-B/16 directory")
def test_criterion_9_real_weights_pseudo_masks(verdict):
    cfg = Config()
    cfg.vl.weights_path = WEIGHTS
    cfg.tvea.crf = True
    eps = list(disk_episodes(FIXTURES, "chest", None, 1, 5, 0, size=cfg.dataset.input_size))
    pipe = Pipeline(cfg.replace(**{"backbone.kind": "toy"}))
    ious, full = [], []
    for ep in eps:
        ious.append(iou(pipe.pseudo_label(ep).mask, ep.query_gt))
        full.append(iou(np.ones_like(ep.query_gt), ep.query_gt))
    m, b = float(np.mean(ious)), float(np.mean(full))
    verdict(9, m > 0.3 and m > b, f"pseudo-mask fg IoU {m:.3f} vs all-foreground {b:.3f} on {len(eps)} fixtures")
