"""Spatially-adaptive integral illumination estimation.

Every pixel gets its own axis-aligned averaging window.  Two tiny conv nets
look at the raw image: one predicts the window's extents above, left, below
and right of the pixel centre (channels ``t, l, b, r``), the other a positive
per-channel modulation coefficient.  Window sums come from summed-area tables
in four interpolated reads per pixel regardless of window size; the mean is
then divided by the modulation.

Extents are fractions of the current image's half-size: a pixel at column
centre ``x_c`` spans ``[x_c - l*W/2, x_c + r*W/2]``.  Corners are clamped to
the image for the table lookup, while the averaging area
``(t + b) * (l + r) * H * W / 4`` uses the unclamped extents, so windows that
leave the image are attenuated near the border.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import params as P
from . import sat
from . import tensor as T
from .params import Params
from .tensor import ShapeError, Tensor

MOD_EPS = 1e-4
# sigmoid saturates to exactly 0 for large negative logits; the floor keeps
# every window area strictly positive
OFFSET_MIN = 1e-4
VARIANTS = ("sai2e", "no_modulation", "avgpool2")

# invocation counts, keyed by function name
CALLS: Counter = Counter()


def param_specs(prefix: str, hidden: int, variant: str = "sai2e") -> dict[str, P.ParamSpec]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown illumination variant {variant!r}; expected one of {VARIANTS}")
    specs: dict[str, P.ParamSpec] = {}
    if variant == "avgpool2":
        return specs
    specs |= P.conv(f"{prefix}.offset.conv1", hidden, 3, 3)
    specs |= P.conv(f"{prefix}.offset.conv2", 4, hidden, 1)
    if variant == "sai2e":
        specs |= P.conv(f"{prefix}.modulation.conv1", hidden, 3, 3)
        specs |= P.conv(f"{prefix}.modulation.conv2", 3, hidden, 1)
    return specs


def downsampler_specs(prefix: str, channels: int = 3) -> dict[str, P.ParamSpec]:
    return P.conv(f"{prefix}.dw", channels, channels, 4, groups=channels) | P.conv(
        f"{prefix}.pw", channels, channels, 1
    )


def _subnet(image: Tensor, params: Params, prefix: str) -> Tensor:
    h = T.conv2d(image, params[f"{prefix}.conv1.weight"], P.bias_of(params, f"{prefix}.conv1"), padding=1)
    h = T.gelu(h)
    return T.conv2d(h, params[f"{prefix}.conv2.weight"], P.bias_of(params, f"{prefix}.conv2"))


def _check_image(image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected an N x 3 x H x W image, got {image.shape}", dim="channels")


def predict_offsets(image: Tensor, params: Params, prefix: str = "sai2e") -> Tensor:
    """Window extents ``(t, l, b, r)`` in [1e-4, 1], shape N x 4 x H x W."""
    _check_image(image)
    return T.clip(T.sigmoid(_subnet(image, params, f"{prefix}.offset")), OFFSET_MIN, 1.0)


def predict_modulation(image: Tensor, params: Params, prefix: str = "sai2e") -> Tensor:
    """Strictly positive modulation coefficients, shape N x 3 x H x W."""
    _check_image(image)
    return T.softplus(_subnet(image, params, f"{prefix}.modulation")) + MOD_EPS


# ---------------------------------------------------------------------------
# window geometry


@dataclass(frozen=True)
class CornerField:
    """Per-pixel window corners (pixel units) and unclamped areas (px^2).

    ``x0/x1`` are the left/right edges and ``y0/y1`` top/bottom, so
    ``tl = (x0, y0)``, ``tr = (x1, y0)``, ``bl = (x0, y1)``, ``br = (x1, y1)``.
    The ``*_raw`` arrays are unclamped.  All arrays are N x H x W float64.
    """

    x0: np.ndarray
    y0: np.ndarray
    x1: np.ndarray
    y1: np.ndarray
    x0_raw: np.ndarray
    y0_raw: np.ndarray
    x1_raw: np.ndarray
    y1_raw: np.ndarray
    area: np.ndarray

    def corners(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            "tl": (self.x0, self.y0),
            "tr": (self.x1, self.y0),
            "bl": (self.x0, self.y1),
            "br": (self.x1, self.y1),
        }


def _extent_scales(crop: tuple[int, int], full: tuple[int, int] | None) -> tuple[float, float]:
    h, w = crop
    if h <= 0 or w <= 0:
        raise ValueError(f"crop dimensions must be positive, got {crop}")
    if full is not None and (h > full[0] or w > full[1]):
        raise ValueError(f"crop {crop} larger than full image {full}")
    return h / 2.0, w / 2.0


def _raw_corners(ext: np.ndarray, sy: float, sx: float):
    """Unclamped corners from extents ``(N, 4, H, W)`` scaled by (sy, sx)."""
    N, _, H, W = ext.shape
    yc = np.arange(H, dtype=np.float64)[:, None] + 0.5
    xc = np.arange(W, dtype=np.float64)[None, :] + 0.5
    t, l, b, r = (ext[:, k].astype(np.float64) for k in range(4))
    return xc - l * sx, yc - t * sy, xc + r * sx, yc + b * sy


def corner_field(offsets, crop: tuple[int, int], full: tuple[int, int] | None = None) -> CornerField:
    """Window corners for normalized extents on an image of size ``crop``."""
    ext = offsets.data if isinstance(offsets, Tensor) else np.asarray(offsets)
    sy, sx = _extent_scales(crop, full)
    return _field(ext, sy, sx)


def _field(ext: np.ndarray, sy: float, sx: float) -> CornerField:
    H, W = ext.shape[2:]
    x0, y0, x1, y1 = _raw_corners(ext, sy, sx)
    t, l, b, r = (ext[:, k].astype(np.float64) for k in range(4))
    area = (t + b) * (l + r) * sy * sx
    return CornerField(
        np.clip(x0, 0, W), np.clip(y0, 0, H), np.clip(x1, 0, W), np.clip(y1, 0, H),
        x0, y0, x1, y1, area,
    )


def avgpool2_extents(N: int, H: int, W: int) -> np.ndarray:
    """Pixel extents (scale 1) that make every window its aligned 2x2 block."""
    if H % 2 or W % 2:
        raise ShapeError(f"2x2 windows need even dimensions, got {H}x{W}", dim="spatial")
    ey = np.where(np.arange(H) % 2 == 0, 0.5, 1.5)
    ex = np.where(np.arange(W) % 2 == 0, 0.5, 1.5)
    ext = np.empty((N, 4, H, W))
    ext[:, 0] = ey[:, None]
    ext[:, 1] = ex[None, :]
    ext[:, 2] = (2.0 - ey)[:, None]
    ext[:, 3] = (2.0 - ex)[None, :]
    return ext


# ---------------------------------------------------------------------------
# differentiable window sums


def dynamic_box_sum(image: Tensor, extents: Tensor, scale_y: float, scale_x: float) -> Tensor:
    """Per-pixel window sums of every image channel.

    ``extents`` is N x 4 x H x W ``(t, l, b, r)``; multiplied by the scales it
    gives pixel distances.  Differentiable w.r.t. both the image and the
    extents (the latter through the bilinear table interpolation).
    """
    N, C, H, W = image.shape
    if extents.shape != (N, 4, H, W):
        raise ShapeError(f"extents shape {extents.shape} != {(N, 4, H, W)}", dim="spatial")
    tables = sat.build_tables(image.data).reshape(N * C, H + 1, W + 1)
    x0r, y0r, x1r, y1r = _raw_corners(extents.data, scale_y, scale_x)
    K = H * W

    def coords(a, hi):
        a = np.clip(a, 0, hi).reshape(N, 1, K)
        return np.broadcast_to(a, (N, C, K)).reshape(N * C, K)

    x0, y0, x1, y1 = coords(x0r, W), coords(y0r, H), coords(x1r, W), coords(y1r, H)
    br, br_x, br_y, s_br = sat.bilinear_lookup(tables, x1, y1)
    tl, tl_x, tl_y, s_tl = sat.bilinear_lookup(tables, x0, y0)
    tr, tr_x, tr_y, s_tr = sat.bilinear_lookup(tables, x1, y0)
    bl, bl_x, bl_y, s_bl = sat.bilinear_lookup(tables, x0, y1)
    out = (br + tl - tr - bl).reshape(N, C, H, W).astype(image.dtype)

    def inside(a, hi):
        return ((a >= 0) & (a <= hi)).reshape(N, 1, H, W)

    masks = (inside(y0r, H), inside(x0r, W), inside(y1r, H), inside(x1r, W))

    def bw(g):
        g64 = g.astype(np.float64)
        g_img = g_ext = None
        if image.requires_grad:
            gk = g64.reshape(N * C, K)
            shape = tables.shape
            gt = (
                sat.bilinear_adjoint(shape, s_br, gk)
                + sat.bilinear_adjoint(shape, s_tl, gk)
                - sat.bilinear_adjoint(shape, s_tr, gk)
                - sat.bilinear_adjoint(shape, s_bl, gk)
            )
            g_img = sat.table_adjoint(gt).reshape(N, C, H, W).astype(image.dtype)
        if extents.requires_grad:
            def per_pixel(d):
                return (g64 * d.reshape(N, C, H, W)).sum(axis=1)

            d_y0 = per_pixel(tl_y - tr_y)
            d_x0 = per_pixel(tl_x - bl_x)
            d_y1 = per_pixel(br_y - bl_y)
            d_x1 = per_pixel(br_x - tr_x)
            g_ext = np.stack(
                [-d_y0 * scale_y, -d_x0 * scale_x, d_y1 * scale_y, d_x1 * scale_x], axis=1
            ) * np.concatenate(masks, axis=1)
            g_ext = g_ext.astype(extents.dtype)
        return g_img, g_ext

    return T._make(out, "dynamic_box_sum", (image, extents), bw)


def box_mean(image: Tensor, extents: Tensor, scale_y: float, scale_x: float) -> Tensor:
    """Window sum divided by the unclamped window area (before modulation)."""
    t, l, b, r = T.split(extents, [1, 1, 1, 1], axis=1)
    area = T.mul(T.mul(t + b, l + r), scale_y * scale_x)
    return T.div(dynamic_box_sum(image, extents, scale_y, scale_x), area)


def estimate_illumination(
    image: Tensor,
    params: Params,
    variant: str = "sai2e",
    prefix: str = "sai2e",
    return_offsets: bool = False,
):
    """Full-resolution illumination map I_L_0 (N x 3 x H x W).

    ``variant`` selects the ablations: ``"no_modulation"`` fixes the
    modulation to 1 and ``"avgpool2"`` additionally freezes every window to
    its pixel-aligned 2x2 block.
    """
    _check_image(image)
    CALLS["estimate_illumination"] += 1
    N, _, H, W = image.shape
    if variant == "avgpool2":
        ext = Tensor(avgpool2_extents(N, H, W), dtype=image.dtype)
        lum = box_mean(image, ext, 1.0, 1.0)
        return (lum, None) if return_offsets else lum
    if variant not in VARIANTS:
        raise ValueError(f"unknown illumination variant {variant!r}")
    offsets = predict_offsets(image, params, prefix)
    lum = box_mean(image, offsets, H / 2.0, W / 2.0)
    if variant == "sai2e":
        lum = T.div(lum, predict_modulation(image, params, prefix))
    return (lum, offsets) if return_offsets else lum


def downsample_illumination(level: Tensor, params: Params, prefix: str) -> Tensor:
    """Halve an illumination map: depthwise 4x4 stride-2 conv, then pointwise 1x1."""
    H, W = level.shape[2:]
    if H % 2 or W % 2:
        raise ShapeError(f"illumination map {H}x{W} must have even dimensions", dim="spatial")
    CALLS["downsample_illumination"] += 1
    C = level.shape[1]
    y = T.conv2d(level, params[f"{prefix}.dw.weight"], P.bias_of(params, f"{prefix}.dw"), 2, 1, C)
    return T.conv2d(y, params[f"{prefix}.pw.weight"], P.bias_of(params, f"{prefix}.pw"))


def illumination_pyramid(level0: Tensor, params: Params, prefix: str = "illum", levels: int = 4) -> list[Tensor]:
    maps = [level0]
    for k in range(1, levels):
        maps.append(downsample_illumination(maps[-1], params, f"{prefix}.down{k}"))
    return maps


# ---------------------------------------------------------------------------
# diagnostics


def integration_area_map(offsets, crop: tuple[int, int]) -> np.ndarray:
    """Per-pixel window area in px^2 (N x H x W)."""
    return corner_field(offsets, crop).area


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a flat map becomes 0.5 everywhere."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


def offset_stats(offsets, crop: tuple[int, int]) -> dict[str, float]:
    """Mean and (population) std of window widths and heights in pixels."""
    ext = offsets.data if isinstance(offsets, Tensor) else np.asarray(offsets)
    ext = ext.astype(np.float64)
    h, w = crop
    widths = (ext[:, 1] + ext[:, 3]) * w / 2.0
    heights = (ext[:, 0] + ext[:, 2]) * h / 2.0
    return {
        "mean_w": float(widths.mean()),
        "std_w": float(widths.std()),
        "mean_h": float(heights.mean()),
        "std_h": float(heights.std()),
    }
