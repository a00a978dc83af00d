"""Illumination-guided transformer block.

A block is two pre-norm residual branches::

    F' = F + ig_msa(LN(F), I_L)
    F_next = F' + dg_ffn(LN(F'))

``ig_msa`` is channel ("transposed") attention: tokens are channels, so the
affinity matrix per head is ``d x (d + 3)`` and the cost is linear in H*W.
The illumination map skips layer norm, is projected by a 1x1 conv and
appended as three extra query channels.
"""

from __future__ import annotations

import math

from . import params as P
from . import sai2e
from . import tensor as T
from .params import Params
from .tensor import ShapeError, Tensor

HEAD_ILLUM_MODES = ("replicate", "single")


def hidden_width(channels: int, expansion: float) -> int:
    return int(channels * expansion)


def attention_out_channels(channels: int, heads: int, mode: str) -> int:
    if mode == "replicate":
        return channels + 3 * heads
    if mode == "single":
        return channels + 3
    raise ValueError(f"head_illum_mode must be one of {HEAD_ILLUM_MODES}, got {mode!r}")


def attention_specs(prefix: str, channels: int, heads: int, mode: str = "replicate") -> dict[str, P.ParamSpec]:
    if channels % heads:
        raise ValueError(f"{heads} heads do not divide {channels} channels")
    C = channels
    specs = P.conv(f"{prefix}.qkv", 3 * C, C, 1, bias=False)
    specs |= P.conv(f"{prefix}.qkv_dw", 3 * C, 3 * C, 3, groups=3 * C, bias=False)
    specs |= P.conv(f"{prefix}.illum", 3, 3, 1)
    specs |= P.conv(f"{prefix}.proj", C, attention_out_channels(C, heads, mode), 1, zero=True)
    specs[f"{prefix}.alpha"] = P.ParamSpec((heads,), "ones")
    return specs


def ffn_specs(prefix: str, channels: int, expansion: float) -> dict[str, P.ParamSpec]:
    hid = hidden_width(channels, expansion)
    specs = P.conv(f"{prefix}.w1", hid, channels, 1)
    specs |= P.conv(f"{prefix}.w2", hid, channels, 1)
    specs |= P.conv(f"{prefix}.proj", channels, hid, 1, zero=True)
    return specs


def block_specs(
    prefix: str, channels: int, heads: int, expansion: float, mode: str = "replicate"
) -> dict[str, P.ParamSpec]:
    specs = P.norm(f"{prefix}.ln1", channels)
    specs |= attention_specs(f"{prefix}.attn", channels, heads, mode)
    specs |= P.norm(f"{prefix}.ln2", channels)
    specs |= ffn_specs(f"{prefix}.ffn", channels, expansion)
    return specs


def _conv(x: Tensor, params: Params, prefix: str, **kw) -> Tensor:
    return T.conv2d(x, params[f"{prefix}.weight"], P.bias_of(params, prefix), **kw)


def attention_map(q_lg: Tensor, k: Tensor, alpha: Tensor) -> Tensor:
    """Per-head softmax(K Q_lg^T / (alpha * sqrt(L))), normalized over K channels.

    ``q_lg`` is N x heads x (d+3) x L and ``k`` is N x heads x d x L; the result
    is N x heads x d x (d+3) and every column sums to 1.
    """
    L = k.shape[-1]
    logits = T.matmul(k, T.transpose(q_lg, (0, 1, 3, 2)))
    scale = T.mul(T.reshape(alpha, (1, -1, 1, 1)), math.sqrt(L))
    return T.softmax(T.div(logits, scale), axis=2)


def ig_msa(
    F: Tensor,
    illum: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    mode: str = "replicate",
    downsampler: str | None = None,
    keep: dict | None = None,
) -> Tensor:
    """Illumination-guided multi-head channel attention.

    ``F`` is the layer-normed feature map.  ``illum`` must match its spatial
    size, or be exactly twice as large when ``downsampler`` names a set of
    illumination-downsampling weights in ``params``.  When ``keep`` is a dict
    the attention maps and projected illumination are stored in it.
    """
    N, C, H, W = F.shape
    if C % heads:
        raise ShapeError(f"{heads} heads do not divide {C} channels", dim="channels")
    if illum.shape[2:] == (2 * H, 2 * W):
        if downsampler is None:
            raise ShapeError("illumination is 2x the feature size but no downsampler was given", dim="spatial")
        illum = sai2e.downsample_illumination(illum, params, downsampler)
    elif illum.shape[2:] != (H, W):
        raise ShapeError(
            f"illumination {illum.shape[2:]} incompatible with features {(H, W)}", dim="spatial"
        )
    d, L = C // heads, H * W

    qkv = _conv(_conv(F, params, f"{prefix}.qkv"), params, f"{prefix}.qkv_dw", padding=1, groups=3 * C)
    q, k, v = (T.reshape(t, (N, heads, d, L)) for t in T.split(qkv, [C, C, C], axis=1))

    lum = _conv(illum, params, f"{prefix}.illum")
    lum_heads = T.broadcast_to(T.reshape(lum, (N, 1, 3, L)), (N, heads, 3, L))
    q_lg = T.concat([q, lum_heads], axis=2)

    attn = attention_map(q_lg, k, params[f"{prefix}.alpha"])
    out = T.matmul(T.transpose(attn, (0, 1, 3, 2)), v)  # N x heads x (d+3) x L
    if keep is not None:
        keep["attn"] = attn
        keep["illum_proj"] = lum

    if mode == "replicate":
        merged = T.reshape(out, (N, heads * (d + 3), H, W))
    elif mode == "single":
        feat, lum_out = T.split(out, [d, 3], axis=2)
        merged = T.concat(
            [T.reshape(feat, (N, C, H, W)), T.reshape(T.mean(lum_out, axis=1), (N, 3, H, W))], axis=1
        )
    else:
        raise ValueError(f"head_illum_mode must be one of {HEAD_ILLUM_MODES}, got {mode!r}")
    return _conv(merged, params, f"{prefix}.proj")


def dg_ffn(F: Tensor, params: Params, prefix: str) -> Tensor:
    """Dual-gated FFN: proj(gelu(u) * v + sigmoid(v) * u) with u, v two 1x1 expansions."""
    u = _conv(F, params, f"{prefix}.w1")
    v = _conv(F, params, f"{prefix}.w2")
    gated = T.add(T.mul(T.gelu(u), v), T.mul(T.sigmoid(v), u))
    return _conv(gated, params, f"{prefix}.proj")


def saigt_block(
    F: Tensor,
    illum: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    mode: str = "replicate",
    keep: dict | None = None,
) -> Tensor:
    x = T.layer_norm(F, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"])
    F = T.add(F, ig_msa(x, illum, params, f"{prefix}.attn", heads, mode, keep=keep))
    x = T.layer_norm(F, params[f"{prefix}.ln2.weight"], params[f"{prefix}.ln2.bias"])
    return T.add(F, dg_ffn(x, params, f"{prefix}.ffn"))


def attention_macs(channels: int, heads: int, H: int, W: int, mode: str = "replicate") -> dict[str, int]:
    """Multiply-accumulate counts of one IG-MSA call, split by stage.

    The affinity and weighted-sum stages cost ``heads * d * (d+3) * H*W`` each,
    i.e. quadratic in channels and linear in pixels.
    """
    C, L = channels, H * W
    d = C // heads
    out_ch = attention_out_channels(C, heads, mode)
    return {
        "qkv": 3 * C * C * L + 3 * C * 9 * L,
        "illum": 9 * L,
        "affinity": heads * d * (d + 3) * L,
        "weighted_sum": heads * d * (d + 3) * L,
        "proj": out_ch * C * L,
    }

