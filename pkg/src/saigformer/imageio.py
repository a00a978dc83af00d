"""PNG files <-> tensors, plus small colour and padding helpers."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .sai2e import minmax_normalize
from .tensor import ShapeError, Tensor

_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


class ImageFormatError(ValueError):
    pass


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, H x W x 3

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixel buffer must be uint8 {self.height}x{self.width}x3")

    @classmethod
    def from_array(cls, a: np.ndarray) -> RgbImage:
        a = np.ascontiguousarray(a, dtype=np.uint8)
        return cls(a.shape[1], a.shape[0], a)


def _png_header(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIG or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: not a PNG file")
    depth, ctype = struct.unpack(">BB", head[24:26])
    return depth, ctype


def load_png(path) -> RgbImage:
    """Decode an 8-bit RGB or grayscale PNG (grayscale is replicated to RGB)."""
    path = Path(path)
    depth, ctype = _png_header(path)
    kind = _COLOR_TYPES.get(ctype, f"color type {ctype}")
    if depth != 8:
        raise ImageFormatError(f"{path}: unsupported {depth}-bit {kind} PNG (only 8-bit is supported)")
    if ctype not in (0, 2):
        raise ImageFormatError(f"{path}: unsupported {kind} PNG (alpha and palette images are rejected)")
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RgbImage.from_array(a)


def save_png(img: RgbImage, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.pixels).save(path, format="PNG")


def save_gray_png(a: np.ndarray, path) -> None:
    a = np.asarray(a)
    if a.dtype != np.uint8 or a.ndim != 2:
        raise ValueError("grayscale export needs a 2-D uint8 array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path, format="PNG")


def to_array(img: RgbImage) -> np.ndarray:
    """3 x H x W float64 array with values in [0, 1]."""
    return img.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def to_tensor(img: RgbImage, dtype=None) -> Tensor:
    """1 x 3 x H x W tensor with values in [0, 1] (default dtype unless given)."""
    return Tensor(to_array(img)[None], dtype=dtype)


def quantize(a: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round ``v * 255`` half-up to uint8."""
    return np.floor(np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_tensor(t) -> RgbImage:
    a = t.data if isinstance(t, Tensor) else np.asarray(t)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError(f"from_tensor needs a single image, got batch of {a.shape[0]}", dim="batch")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeError(f"expected 3 x H x W data, got {a.shape}", dim="channels")
    return RgbImage.from_array(quantize(a).transpose(1, 2, 0))


def luminance_y(img) -> np.ndarray:
    """BT.601 luma of an RgbImage or a 3 x H x W / 1 x 3 x H x W array in [0, 1]."""
    if isinstance(img, RgbImage):
        a = img.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
    else:
        a = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
        if a.ndim == 4:
            a = a[0]
    return 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2]


def pad_reflect(t, multiple: int = 8):
    """Reflect-pad the bottom/right edges up to a multiple; returns (padded, (H, W))."""
    a = t.data if isinstance(t, Tensor) else np.asarray(t)
    H, W = a.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph or pw:
        pad = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
        a = np.pad(a, pad, mode="reflect" if min(H, W) > 1 else "edge")
    out = Tensor(a, dtype=a.dtype) if isinstance(t, Tensor) else a
    return out, (H, W)


def crop_back(t, dims: tuple[int, int]):
    H, W = dims
    if isinstance(t, Tensor):
        return Tensor(t.data[..., :H, :W], dtype=t.dtype)
    return np.asarray(t)[..., :H, :W]


def heatmap(a: np.ndarray) -> np.ndarray:
    """Min-max normalized uint8 map; a flat map renders mid-gray (128)."""
    return np.floor(minmax_normalize(a) * 255.0 + 0.5).astype(np.uint8)
