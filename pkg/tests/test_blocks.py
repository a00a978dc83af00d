import numpy as np
import pytest
from scipy import special

from saigformer import blocks, gradcheck, sai2e
from saigformer import params as P
from saigformer import tensor as T
from saigformer.tensor import ShapeError, Tensor

from oracles import naive_ig_msa


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def make_params(C=8, heads=2, mode="replicate", seed=0, expansion=2.0, live_proj=True):
    rng = np.random.default_rng(seed)
    specs = blocks.block_specs("blk", C, heads, expansion, mode) | sai2e.downsampler_specs("blk.attn.down")
    out = {}
    for k, v in P.allocate(specs, rng, np.float64).items():
        data = v.data
        if live_proj and not np.any(data):
            data = rng.standard_normal(v.shape) * 0.3
        out[k] = t64(data)
    return out


def test_attention_columns_sum_to_one_for_every_head():
    rng = np.random.default_rng(1)
    for mode in blocks.HEAD_ILLUM_MODES:
        p = make_params(C=12, heads=3, mode=mode)
        keep = {}
        blocks.ig_msa(t64(rng.standard_normal((2, 12, 5, 6))), t64(rng.uniform(0, 1, (2, 3, 5, 6))), p, "blk.attn", 3, mode, keep=keep)
        A = keep["attn"].data
        assert A.shape == (2, 3, 4, 7)
        assert np.max(np.abs(A.sum(axis=2) - 1.0)) < 1e-6


def test_matches_naive_attention_oracle():
    rng = np.random.default_rng(2)
    p = make_params(C=8, heads=2, seed=2)
    F = rng.standard_normal((1, 8, 4, 4))
    lum = rng.uniform(0, 1, (1, 3, 4, 4))
    got = blocks.ig_msa(t64(F), t64(lum), p, "blk.attn", 2).data
    ref = naive_ig_msa(F, lum, {k: v.data for k, v in p.items()}, "blk.attn", 2)
    assert np.max(np.abs(got - ref)) <= 1e-5 * np.max(np.abs(ref))


def test_constant_value_channels_pass_through_attention():
    # when every V channel is the same map, each output channel is a convex
    # combination of identical rows, i.e. that map
    C, heads = 4, 2
    p = make_params(C=C, heads=heads, seed=3)
    pattern = np.random.default_rng(3).standard_normal((2, 3))
    qkv_w = np.random.default_rng(4).standard_normal((3 * C, C, 1, 1))
    qkv_w[2 * C :] = 0.0
    qkv_w[2 * C :, 0] = 1.0  # every V channel copies input channel 0
    p["blk.attn.qkv.weight"] = t64(qkv_w)
    dw = p["blk.attn.qkv_dw.weight"].data.copy()
    dw[2 * C :] = 0.0
    dw[2 * C :, 0, 1, 1] = 1.0
    p["blk.attn.qkv_dw.weight"] = t64(dw)
    F = np.random.default_rng(5).standard_normal((1, C, 2, 3))
    F[0, 0] = pattern
    keep = {}
    blocks.ig_msa(t64(F), t64(np.ones((1, 3, 2, 3))), p, "blk.attn", heads, keep=keep)
    A = keep["attn"].data
    # reconstruct the pre-projection output from the stored attention
    v = np.broadcast_to(pattern.reshape(1, 1, 1, 6), (1, heads, C // heads, 6))
    out = np.einsum("nhij,nhil->nhjl", A, v)
    assert np.allclose(out, pattern.reshape(1, 1, 1, 6), atol=1e-12)


def test_illumination_resolution_rules():
    p = make_params()
    F = t64(np.zeros((1, 8, 4, 4)))
    with pytest.raises(ShapeError):
        blocks.ig_msa(F, t64(np.zeros((1, 3, 8, 8))), p, "blk.attn", 2)
    with pytest.raises(ShapeError):
        blocks.ig_msa(F, t64(np.zeros((1, 3, 16, 16))), p, "blk.attn", 2, downsampler="blk.attn.down")
    out = blocks.ig_msa(F, t64(np.ones((1, 3, 8, 8))), p, "blk.attn", 2, downsampler="blk.attn.down")
    assert out.shape == (1, 8, 4, 4)


def test_heads_must_divide_channels():
    with pytest.raises(ValueError):
        blocks.attention_specs("a", 8, 3)


def test_dg_ffn_zero_weights_give_zero():
    p = {k: t64(np.zeros(v.shape)) for k, v in blocks.ffn_specs("f", 6, 2.0).items()}
    out = blocks.dg_ffn(t64(np.random.default_rng(6).standard_normal((2, 6, 3, 3))), p, "f")
    assert np.all(out.data == 0.0)


def test_dg_ffn_tied_weights_elementwise_oracle():
    rng = np.random.default_rng(7)
    C, hid = 4, 8
    w1 = rng.standard_normal((hid, C, 1, 1))
    b1 = rng.standard_normal(hid)
    wp = rng.standard_normal((C, hid, 1, 1))
    p = {
        "f.w1.weight": t64(w1), "f.w1.bias": t64(b1),
        "f.w2.weight": t64(w1), "f.w2.bias": t64(b1),
        "f.proj.weight": t64(wp), "f.proj.bias": t64(np.zeros(C)),
    }
    F = rng.standard_normal((1, C, 3, 2))
    u = np.einsum("oc,nchw->nohw", w1[:, :, 0, 0], F) + b1[None, :, None, None]
    gelu = u * 0.5 * (1 + special.erf(u / np.sqrt(2)))
    sig = 1 / (1 + np.exp(-u))
    ref = np.einsum("oc,nchw->nohw", wp[:, :, 0, 0], gelu * u + sig * u)
    assert np.allclose(blocks.dg_ffn(t64(F), p, "f").data, ref, rtol=1e-12, atol=1e-12)


def test_hidden_width_is_floor_of_expansion():
    assert blocks.hidden_width(32, 2.66) == 85
    assert blocks.ffn_specs("f", 32, 2.66)["f.w1.weight"].shape == (85, 32, 1, 1)


def test_block_with_zero_projections_is_identity():
    for mode in blocks.HEAD_ILLUM_MODES:
        specs = blocks.block_specs("blk", 8, 2, 2.66, mode)
        p = P.allocate(specs, np.random.default_rng(8), np.float32)
        assert not np.any(p["blk.attn.proj.weight"].data) and not np.any(p["blk.ffn.proj.weight"].data)
        F = Tensor(np.random.default_rng(9).standard_normal((2, 8, 4, 4)))
        out = blocks.saigt_block(F, Tensor(np.random.default_rng(9).uniform(0, 1, (2, 3, 4, 4))), p, "blk", 2, mode)
        assert np.array_equal(out.data, F.data)


@pytest.mark.parametrize("level", range(4))
def test_block_shape_at_every_level(level):
    C, heads, size = 8 << level, (1, 2, 4, 8)[level], 32 >> level
    p = make_params(C=C, heads=heads, seed=level)
    F = t64(np.random.default_rng(level).standard_normal((1, C, size, size)))
    out = blocks.saigt_block(F, t64(np.ones((1, 3, size, size))), p, "blk", heads)
    assert out.shape == F.shape


def test_illumination_bypasses_layer_norm():
    rng = np.random.default_rng(10)
    p = make_params(seed=10)
    F = t64(rng.standard_normal((1, 8, 4, 4)))
    lum = t64(rng.uniform(0, 1, (1, 3, 4, 4)))
    keeps = []
    for scale in (1.0, 3.0):
        q = dict(p)
        q["blk.ln1.weight"] = t64(p["blk.ln1.weight"].data * scale + scale)
        q["blk.ln1.bias"] = t64(p["blk.ln1.bias"].data + scale)
        keep = {}
        x = T.layer_norm(F, q["blk.ln1.weight"], q["blk.ln1.bias"])
        blocks.ig_msa(x, lum, q, "blk.attn", 2, keep=keep)
        keeps.append(keep)
    assert np.array_equal(keeps[0]["illum_proj"].data, keeps[1]["illum_proj"].data)
    assert not np.array_equal(keeps[0]["attn"].data, keeps[1]["attn"].data)


def test_attention_cost_linear_in_pixels_quadratic_in_channels():
    a = blocks.attention_macs(32, 2, 16, 16)
    b = blocks.attention_macs(32, 2, 32, 32)
    c = blocks.attention_macs(64, 2, 16, 16)
    assert b["affinity"] == 4 * a["affinity"]
    assert b["weighted_sum"] == 4 * a["weighted_sum"]
    d = 16
    assert a["affinity"] == 2 * d * (d + 3) * 256
    # doubling channels roughly quadruples the affinity cost (d^2 dominates)
    assert 3.5 < c["affinity"] / a["affinity"] < 4.0


def test_single_mode_projection_width():
    assert blocks.attention_specs("a", 16, 4, "single")["a.proj.weight"].shape == (16, 19, 1, 1)
    assert blocks.attention_specs("a", 16, 4, "replicate")["a.proj.weight"].shape == (16, 28, 1, 1)


def test_block_gradients():
    reports = gradcheck.suite_blocks(0)
    assert all(r.ok for r in reports), [r.line() for r in reports if not r.ok]
