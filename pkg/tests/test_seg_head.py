import dataclasses
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from tvgseg.adapt import Pipeline
from tvgseg.config import toy_config
from tvgseg.harness import iou
from tvgseg.seg_head import (AttentionParams, attention_weights, coarse_similarity_map, cross_attention_masks,
                             fuse_masks, rough_query_mask, sinusoidal_2d)


def _params(width, heads=2, head_dim=3, seed=0, pe_scale=0.0):
    p = AttentionParams(width, heads, head_dim, pe_scale).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in (p.q_proj, p.k_proj):
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g, dtype=torch.float64))
            lin.bias.copy_(torch.randn(lin.bias.shape, generator=g, dtype=torch.float64))
    return p


# ---- coarse similarity ----------------------------------------------------------------

def test_identical_pixel_scores_one_and_negation_zero():
    proto = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    fs = proto[:, None, None].expand(3, 2, 2).clone()
    fq = torch.stack([proto, -proto], dim=1)[:, :, None]  # [3, 2, 1]
    sim = coarse_similarity_map(fq, fs, np.ones((2, 2)))
    torch.testing.assert_close(sim.flatten(), torch.tensor([1.0, 0.0], dtype=torch.float64))


def test_seeded_2x2_explicit_cosine():
    g = torch.Generator().manual_seed(4)
    fq = torch.randn(3, 2, 2, generator=g, dtype=torch.float64)
    fs = torch.randn(3, 2, 2, generator=g, dtype=torch.float64)
    m = np.array([[1, 0], [1, 1]])
    proto = [sum(float(fs[c, y, x]) for y in range(2) for x in range(2) if m[y, x]) / 3 for c in range(3)]
    sim = coarse_similarity_map(fq, fs, m)
    for y in range(2):
        for x in range(2):
            v = [float(fq[c, y, x]) for c in range(3)]
            cos = sum(a * b for a, b in zip(v, proto)) / (math.hypot(*v) * math.hypot(*proto))
            assert float(sim[y, x]) == pytest.approx((cos + 1) / 2, rel=1e-12)


def test_empty_support_foreground_skips():
    assert coarse_similarity_map(torch.randn(3, 2, 2), torch.randn(3, 2, 2), np.zeros((2, 2))) is None


# ---- cross attention -------------------------------------------------------------------

def test_single_support_pixel_passes_its_value():
    p = _params(4)
    out = cross_attention_masks(torch.randn(4, 3, 3, dtype=torch.float64), torch.randn(4, 1, 1, dtype=torch.float64),
                                np.ones((1, 1)), p)
    torch.testing.assert_close(out, torch.ones(3, 3, dtype=torch.float64))


def test_uniform_attention_returns_mask_mean():
    p = _params(4)
    with torch.no_grad():
        p.q_proj.weight.zero_()
        p.q_proj.bias.zero_()
    m = np.array([[1, 0], [0, 1]])
    out = cross_attention_masks(torch.randn(4, 2, 2, dtype=torch.float64), torch.randn(4, 2, 2, dtype=torch.float64),
                                m, p)
    torch.testing.assert_close(out, torch.full((2, 2), 0.5, dtype=torch.float64))


def test_seeded_2x2_matches_hand_softmax():
    heads, d = 2, 3
    p = _params(4, heads, d, seed=7)
    g = torch.Generator().manual_seed(8)
    fq = torch.randn(4, 2, 2, generator=g, dtype=torch.float64)
    fs = torch.randn(4, 2, 2, generator=g, dtype=torch.float64)
    m = np.array([[1, 0], [0, 0]])
    wq, bq = p.q_proj.weight.detach().numpy(), p.q_proj.bias.detach().numpy()
    wk, bk = p.k_proj.weight.detach().numpy(), p.k_proj.bias.detach().numpy()

    def pix(f):
        a = f.numpy().reshape(4, -1).T
        return a / np.linalg.norm(a, axis=1, keepdims=True)

    xq, xs = pix(fq), pix(fs)
    v = m.reshape(-1).astype(float)
    want = np.zeros(4)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(4):
            qi = wq[sl] @ xq[i] + bq[sl]
            logits = [float(qi @ (wk[sl] @ xs[j] + bk[sl])) / math.sqrt(d) for j in range(4)]
            e = np.exp(np.array(logits) - max(logits))
            want[i] += (e / e.sum()) @ v / heads
    np.testing.assert_allclose(cross_attention_masks(fq, fs, m, p).detach().numpy().reshape(-1), want, rtol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one_and_output_in_unit_interval(seed):
    g = torch.Generator().manual_seed(seed)
    p = _params(5, seed=seed, pe_scale=0.1)
    fq = torch.randn(5, 3, 2, generator=g, dtype=torch.float64)
    fs = torch.randn(5, 2, 3, generator=g, dtype=torch.float64)
    attn = attention_weights(fq, [fs], p).detach()
    assert float((attn.sum(-1) - 1).abs().max()) <= 1e-6
    m = (torch.rand(2, 3, generator=g) < 0.5).numpy().astype(np.uint8)
    out = cross_attention_masks(fq, fs, m, p).detach()
    assert float(out.min()) >= 0 and float(out.max()) <= 1 + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_key_bias_shift_leaves_attention_unchanged(seed):
    # a key bias adds q_i . b to every logit of row i, a per-row constant
    g = torch.Generator().manual_seed(seed)
    p = _params(4, seed=seed)
    fq = torch.randn(4, 2, 2, generator=g, dtype=torch.float64)
    fs = torch.randn(4, 3, 1, generator=g, dtype=torch.float64)
    before = attention_weights(fq, [fs], p)
    with torch.no_grad():
        p.k_proj.bias.add_(torch.randn(p.k_proj.bias.shape, generator=g, dtype=torch.float64) * 5)
    torch.testing.assert_close(attention_weights(fq, [fs], p), before)


def test_k_shots_concatenate_keys():
    p = _params(4)
    fq = torch.randn(4, 2, 2, dtype=torch.float64)
    fs = [torch.randn(4, 2, 2, dtype=torch.float64) for _ in range(2)]
    assert attention_weights(fq, fs, p).shape == (2, 4, 8)


def test_positional_table_shape_and_range():
    pe = sinusoidal_2d(6, 4, 5)
    assert pe.shape == (6, 4, 5)
    assert float(pe.abs().max()) <= 1


# ---- rough mask -------------------------------------------------------------------------

def test_zero_head_gives_even_split():
    head = nn.Conv2d(5, 2, 1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    logits = rough_query_mask([torch.randn(3, 4, 4), torch.randn(2, 2, 2)], head)
    torch.testing.assert_close(torch.softmax(logits, 0), torch.full((2, 4, 4), 0.5))


def test_selector_head_copies_channel():
    head = nn.Conv2d(3, 2, 1, bias=False)
    with torch.no_grad():
        head.weight.zero_()
        head.weight[1, 2] = 1.0
    layer = torch.randn(3, 4, 4)
    torch.testing.assert_close(rough_query_mask([layer], head)[1], layer[2])


def test_seeded_explicit_1x1_conv():
    g = torch.Generator().manual_seed(3)
    head = nn.Conv2d(4, 2, 1).double()
    with torch.no_grad():
        head.weight.copy_(torch.randn(2, 4, 1, 1, generator=g, dtype=torch.float64))
        head.bias.copy_(torch.randn(2, generator=g, dtype=torch.float64))
    a = torch.randn(2, 1, 1, generator=g, dtype=torch.float64)
    b = torch.randn(2, 1, 1, generator=g, dtype=torch.float64)
    x = [float(a[0]), float(a[1]), float(b[0]), float(b[1])]
    w, bias = head.weight.detach()[:, :, 0, 0], head.bias.detach()
    want = [sum(float(w[o, c]) * x[c] for c in range(4)) + float(bias[o]) for o in range(2)]
    np.testing.assert_allclose(rough_query_mask([a, b], head).detach().numpy().reshape(-1), want, rtol=1e-12)


def test_coarser_layers_are_resized_to_finest():
    head = nn.Conv2d(4, 2, 1)
    assert rough_query_mask([torch.randn(2, 8, 8), torch.randn(2, 2, 2)], head).shape == (2, 8, 8)


# ---- fusion --------------------------------------------------------------------------------

def test_consensus_passes_through():
    m = (np.random.default_rng(0).uniform(size=(6, 6)) > 0.5).astype(float)
    fused, final = fuse_masks({"rough": m, "pseudo": m, "attention_0": m})
    np.testing.assert_array_equal(fused, m)
    np.testing.assert_array_equal(final, m.astype(np.uint8))


def test_equal_weights_give_arithmetic_mean():
    rng = np.random.default_rng(1)
    maps = {k: rng.uniform(size=(3, 3)) for k in ("a", "b", "c")}
    fused, _ = fuse_masks(maps)
    np.testing.assert_allclose(fused, (maps["a"] + maps["b"] + maps["c"]) / 3)


def test_missing_pseudo_averages_remaining():
    fused, _ = fuse_masks({"rough": np.full((2, 2), 0.2), "attention_0": np.full((2, 2), 0.6)})
    np.testing.assert_allclose(fused, 0.4)


def test_fusion_needs_components():
    with pytest.raises(RuntimeError):
        fuse_masks({})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.floats(0, 1))
def test_fusion_is_bounded_and_monotone(seed, which, bump):
    rng = np.random.default_rng(seed)
    maps = {k: rng.uniform(size=(4, 4)) for k in ("a", "b", "c")}
    fused, _ = fuse_masks(maps)
    assert fused.min() >= 0 and fused.max() <= 1
    key = "abc"[which]
    raised = dict(maps, **{key: np.minimum(1, maps[key] + bump * rng.uniform(size=(4, 4)))})
    assert np.all(fuse_masks(raised)[0] >= fused - 1e-15)


# ---- end to end ---------------------------------------------------------------------------------

def test_query_equal_to_support_recovers_support_mask(small_suite):
    eps, concepts = small_suite
    cfg = toy_config()
    pipe = Pipeline(cfg, concepts=concepts)
    seen = set()
    for ep in eps:
        if ep.fg_class in seen:
            continue
        seen.add(ep.fg_class)
        img, mask = ep.support[0]
        same = dataclasses.replace(ep, query=img, query_gt=mask, name=ep.name + "-self")
        params, _ = pipe.adapt_episode(same)
        assert iou(pipe.predict(same, params).final, mask) >= 0.8, ep.fg_class
