"""Summed-area tables and constant-time box sums.

Tables are zero padded: pixel ``(i, j)`` lands in cell ``(i + 1, j + 1)``, so
``table[y, x]`` is the sum over rows ``< y`` and columns ``< x``.  A box
``[y0, y1) x [x0, x1)`` is then always four reads,
``T[y1, x1] + T[y0, x0] - T[y0, x1] - T[y1, x0]``, with no edge branches.

Accumulation is float64 regardless of the source dtype.  Fractional corners
are evaluated by bilinear interpolation of the table itself.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class SatError(ValueError):
    pass


@dataclass
class OpCounter:
    """Counts table reads and additions issued by the query functions."""

    reads: int = 0
    adds: int = 0


@dataclass(frozen=True)
class SummedAreaTable:
    table: np.ndarray = field(repr=False)
    height: int
    width: int
    checksum: str

    def matches(self, channel: np.ndarray) -> bool:
        return _checksum(np.asarray(channel, dtype=np.float64)) == self.checksum


@dataclass(frozen=True)
class BoxQuery:
    """Box corners in padded-table coordinates (``0 <= x0 <= x1 <= W``)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def clamped(self, width: int, height: int) -> BoxQuery:
        vals = (self.x0, self.y0, self.x1, self.y1)
        if any(math.isnan(v) for v in vals):
            raise SatError(f"NaN corner in {self}")
        x0, x1 = sorted((min(max(self.x0, 0.0), width), min(max(self.x1, 0.0), width)))
        y0, y1 = sorted((min(max(self.y0, 0.0), height), min(max(self.y1, 0.0), height)))
        return BoxQuery(x0, y0, x1, y1)


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest()


def build(channel) -> SummedAreaTable:
    """Build the padded table for one 2-D channel in O(H*W)."""
    a = np.asarray(channel, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise SatError(f"expected a non-empty 2-D image, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SatError("image contains non-finite values")
    H, W = a.shape
    table = np.zeros((H + 1, W + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=table[1:, 1:])
    table.flags.writeable = False
    return SummedAreaTable(table, H, W, _checksum(a))


def build_tables(images: np.ndarray) -> np.ndarray:
    """Padded tables for a stack ``(..., H, W)``; returns ``(..., H+1, W+1)`` float64."""
    a = np.asarray(images, dtype=np.float64)
    out = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=-2), axis=-1, out=out[..., 1:, 1:])
    return out


def box_sum(sat: SummedAreaTable, q: BoxQuery, counter: OpCounter | None = None) -> float:
    """Exact sum over ``[y0, y1) x [x0, x1)`` for integer corners."""
    corners = (q.x0, q.y0, q.x1, q.y1)
    if any(float(c) != int(c) for c in corners):
        raise SatError(f"box_sum needs integer corners, got {q}")
    x0, y0, x1, y1 = (int(c) for c in corners)
    if not (0 <= x0 <= x1 <= sat.width and 0 <= y0 <= y1 <= sat.height):
        raise SatError(f"box {q} outside table domain {sat.width}x{sat.height}")
    t = sat.table
    if counter is not None:
        counter.reads += 4
        counter.adds += 3
    return float(t[y1, x1] + t[y0, x0] - t[y0, x1] - t[y1, x0])


def _lerp_read(t: np.ndarray, x: float, y: float, W: int, H: int) -> tuple[float, float, float]:
    """Bilinear table value at (x, y) and its partials d/dx, d/dy."""
    xi = min(int(math.floor(x)), W - 1)
    yi = min(int(math.floor(y)), H - 1)
    fx, fy = x - xi, y - yi
    a, b = t[yi, xi], t[yi, xi + 1]
    c, d = t[yi + 1, xi], t[yi + 1, xi + 1]
    # convex weights reproduce the exact table entry at integer coordinates
    top = (1 - fx) * a + fx * b
    bot = (1 - fx) * c + fx * d
    val = (1 - fy) * top + fy * bot
    ddx = (1 - fy) * (b - a) + fy * (d - c)
    return float(val), float(ddx), float(bot - top)


def box_sum_fractional(sat: SummedAreaTable, q: BoxQuery, counter: OpCounter | None = None) -> float:
    """Box sum at real-valued corners (clamped to the table domain first)."""
    return box_sum_fractional_grad(sat, q, counter)[0]


def box_sum_fractional_grad(
    sat: SummedAreaTable, q: BoxQuery, counter: OpCounter | None = None
) -> tuple[float, tuple[float, float, float, float]]:
    """Fractional box sum and its partials w.r.t. ``(x0, y0, x1, y1)``.

    Partials are taken after clamping, so a corner pinned to the border has
    zero derivative.
    """
    raw = (q.x0, q.y0, q.x1, q.y1)
    c = q.clamped(sat.width, sat.height)
    t, W, H = sat.table, sat.width, sat.height
    br, br_x, br_y = _lerp_read(t, c.x1, c.y1, W, H)
    tl, tl_x, tl_y = _lerp_read(t, c.x0, c.y0, W, H)
    tr, tr_x, tr_y = _lerp_read(t, c.x1, c.y0, W, H)
    bl, bl_x, bl_y = _lerp_read(t, c.x0, c.y1, W, H)
    if counter is not None:
        counter.reads += 4
        counter.adds += 3
    val = br + tl - tr - bl
    dx0 = tl_x - bl_x
    dy0 = tl_y - tr_y
    dx1 = br_x - tr_x
    dy1 = br_y - bl_y
    inside = [0.0 <= raw[0] <= W, 0.0 <= raw[1] <= H, 0.0 <= raw[2] <= W, 0.0 <= raw[3] <= H]
    grads = tuple(g if ok else 0.0 for g, ok in zip((dx0, dy0, dx1, dy1), inside))
    return val, grads


# ---------------------------------------------------------------------------
# vectorized lookups used by the illumination estimator


def bilinear_lookup(tables: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Interpolate ``tables (B, H+1, W+1)`` at coordinates ``x, y (B, K)``.

    Coordinates must already lie in ``[0, W] x [0, H]``.  Returns the values
    and their partials w.r.t. x and y, each ``(B, K)``, plus the gather state
    needed by :func:`bilinear_adjoint`.
    """
    B, Hp, Wp = tables.shape
    H, W = Hp - 1, Wp - 1
    xi = np.minimum(np.floor(x), W - 1).astype(np.intp)
    yi = np.minimum(np.floor(y), H - 1).astype(np.intp)
    fx = x - xi
    fy = y - yi
    flat = tables.reshape(B, -1)
    base = yi * Wp + xi
    a = np.take_along_axis(flat, base, axis=1)
    b = np.take_along_axis(flat, base + 1, axis=1)
    c = np.take_along_axis(flat, base + Wp, axis=1)
    d = np.take_along_axis(flat, base + Wp + 1, axis=1)
    top = (1 - fx) * a + fx * b
    bot = (1 - fx) * c + fx * d
    val = (1 - fy) * top + fy * bot
    ddx = (1 - fy) * (b - a) + fy * (d - c)
    ddy = bot - top
    return val, ddx, ddy, (base, fx, fy)


def bilinear_adjoint(shape: tuple[int, int, int], state, g: np.ndarray) -> np.ndarray:
    """Scatter ``g (B, K)`` back onto table cells: the transpose of the lookup."""
    B, Hp, Wp = shape
    base, fx, fy = state
    out = np.zeros((B, Hp * Wp), dtype=np.float64)
    rows = np.repeat(np.arange(B), base.shape[1]) * (Hp * Wp)
    for off, wgt in (
        (0, (1 - fx) * (1 - fy)),
        (1, fx * (1 - fy)),
        (Wp, (1 - fx) * fy),
        (Wp + 1, fx * fy),
    ):
        np.add.at(out.reshape(-1), rows + (base + off).reshape(-1), (g * wgt).reshape(-1))
    return out.reshape(shape)


def table_adjoint(g_table: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the source image given a gradient w.r.t. its padded table.

    ``table[y, x]`` sums pixels ``(i < y, j < x)``, so pixel ``(i, j)``
    receives the sum of ``g_table[y, x]`` over ``y > i, x > j``.
    """
    g = g_table[..., 1:, 1:]
    return np.flip(np.cumsum(np.cumsum(np.flip(g, (-2, -1)), axis=-2), axis=-1), (-2, -1))
