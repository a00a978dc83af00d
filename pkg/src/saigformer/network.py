"""Model assembly, configuration and checkpoint persistence.

Layout (C = base_channels)::

    image --+-- SAI2E --> I_L_0 --down--> I_L_1 --down--> I_L_2 --down--> I_L_3
            |
            +-- conv3x3 --> enc1 (C, H) -unshuffle-> enc2 (2C, H/2) -> enc3 (4C, H/4)
                                  -> bottleneck (8C, H/8)
                                  -> dec3 (4C) -> dec2 (2C) -> dec1 (C) -> refine (C)
            +------------------------------------ conv3x3 <---------------'
            |                                        |
            +------------------ (+) <---- residual --'

Down-transitions are pixel-unshuffle followed by a 1x1 conv halving the
channels; up-transitions are a 1x1 conv followed by pixel-shuffle.  Decoder
levels concatenate the matching encoder output and fuse it with a 1x1 conv.
Blocks at resolution level k consume I_L_k; the refinement stage reuses I_L_0.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks
from . import params as P
from . import sai2e
from . import tensor as T
from .tensor import ShapeError, Tensor

STAGES = ("enc1", "enc2", "enc3", "bottleneck", "dec3", "dec2", "dec1", "refine")
# resolution level (0 = full) used by each stage
STAGE_LEVEL = dict(zip(STAGES, (0, 1, 2, 3, 2, 1, 0, 0)))

FORMAT_VERSION = 1
MAGIC = b"SAIGCKPT"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = fields or []


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    block_counts: tuple[int, ...] = (4, 6, 6, 8, 6, 6, 4, 4)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    ffn_expansion: float = 2.66
    head_illum_mode: str = "replicate"
    illum_variant: str = "sai2e"
    sai2e_hidden: int = 16
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        self.validate()

    def validate(self) -> None:
        problems = []
        if len(self.block_counts) != 8 or any(b < 0 for b in self.block_counts):
            problems.append("block_counts must be 8 non-negative integers")
        if len(self.heads) != 4 or any(h < 1 for h in self.heads):
            problems.append("heads must be 4 positive integers")
        elif self.base_channels < 1:
            problems.append("base_channels must be positive")
        else:
            for k, h in enumerate(self.heads):
                if (self.base_channels << k) % h:
                    problems.append(f"heads[{k}]={h} does not divide {self.base_channels << k} channels")
        if self.ffn_expansion <= 0:
            problems.append("ffn_expansion must be positive")
        if self.head_illum_mode not in blocks.HEAD_ILLUM_MODES:
            problems.append(f"head_illum_mode must be one of {blocks.HEAD_ILLUM_MODES}")
        if self.illum_variant not in sai2e.VARIANTS:
            problems.append(f"illum_variant must be one of {sai2e.VARIANTS}")
        if self.precision not in ("float32", "float64"):
            problems.append("precision must be float32 or float64")
        if self.sai2e_hidden < 1:
            problems.append("sai2e_hidden must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    def channels(self, level: int) -> int:
        return self.base_channels << level

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_counts"] = list(self.block_counts)
        d["heads"] = list(self.heads)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def model_specs(cfg: ModelConfig) -> dict[str, P.ParamSpec]:
    specs = sai2e.param_specs("sai2e", cfg.sai2e_hidden, cfg.illum_variant)
    for k in (1, 2, 3):
        specs |= sai2e.downsampler_specs(f"illum.down{k}")
    C = cfg.channels
    specs |= P.conv("embed", C(0), 3, 3)

    def stage(name: str, count: int) -> None:
        lvl = STAGE_LEVEL[name]
        for i in range(count):
            specs.update(
                blocks.block_specs(f"{name}.{i}", C(lvl), cfg.heads[lvl], cfg.ffn_expansion, cfg.head_illum_mode)
            )

    counts = dict(zip(STAGES, cfg.block_counts))
    for lvl, name in enumerate(("enc1", "enc2", "enc3")):
        stage(name, counts[name])
        specs |= P.conv(f"down{lvl + 1}", C(lvl + 1), 4 * C(lvl), 1)
    stage("bottleneck", counts["bottleneck"])
    for lvl, name in ((2, "dec3"), (1, "dec2"), (0, "dec1")):
        specs |= P.conv(f"up{lvl + 1}", 4 * C(lvl), C(lvl + 1), 1)
        specs |= P.conv(f"fuse{lvl + 1}", C(lvl), 2 * C(lvl), 1)
        stage(name, counts[name])
    stage("refine", counts["refine"])
    specs |= P.conv("output", 3, C(0), 3, zero=True)
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Exact parameter count from shapes alone."""
    return sum(s.size for s in model_specs(cfg).values())


def init_model(cfg: ModelConfig) -> ModelWeights:
    """Deterministic initialization from ``cfg.seed``.

    Convs get fan-in scaled uniform weights; every block's two output
    projections and the final conv start at zero, so the fresh model is the
    identity map.
    """
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.precision).type
    return ModelWeights(cfg, P.allocate(model_specs(cfg), rng, dtype))


def _conv(x: Tensor, params, name: str, **kw) -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], params.get(f"{name}.bias"), **kw)


def forward(weights: ModelWeights, image: Tensor, trace: dict | None = None) -> Tensor:
    """Enhance ``image`` (N x 3 x H x W, H and W divisible by 8).

    The output is ``image + residual`` and is not clamped.  When ``trace`` is
    a dict it receives the illumination pyramid, SAI2E offsets, the residual
    and the feature shape of every stage.
    """
    cfg, p = weights.config, weights.params
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected N x 3 x H x W input, got {image.shape}", dim="channels")
    H, W = image.shape[2:]
    if H % 8 or W % 8:
        raise ShapeError(
            f"input {H}x{W} is not divisible by 8; reflect-pad it first (the CLI does this automatically)",
            dim="spatial",
        )

    lum0, offsets = sai2e.estimate_illumination(image, p, cfg.illum_variant, return_offsets=True)
    pyramid = sai2e.illumination_pyramid(lum0, p)
    counts = dict(zip(STAGES, cfg.block_counts))
    shapes: dict[str, tuple[int, ...]] = {}

    def stage(x: Tensor, name: str) -> Tensor:
        lvl = STAGE_LEVEL[name]
        for i in range(counts[name]):
            x = blocks.saigt_block(x, pyramid[lvl], p, f"{name}.{i}", cfg.heads[lvl], cfg.head_illum_mode)
        shapes[name] = x.shape
        return x

    x = _conv(image, p, "embed", padding=1)
    skips = []
    for lvl, name in enumerate(("enc1", "enc2", "enc3")):
        x = stage(x, name)
        skips.append(x)
        x = _conv(T.pixel_unshuffle(x, 2), p, f"down{lvl + 1}")
    x = stage(x, "bottleneck")
    for lvl, name in ((2, "dec3"), (1, "dec2"), (0, "dec1")):
        x = T.pixel_shuffle(_conv(x, p, f"up{lvl + 1}"), 2)
        x = _conv(T.concat([x, skips[lvl]], axis=1), p, f"fuse{lvl + 1}")
        x = stage(x, name)
    x = stage(x, "refine")
    residual = _conv(x, p, "output", padding=1)
    out = T.add(image, residual)

    if trace is not None:
        trace.update(pyramid=pyramid, offsets=offsets, residual=residual, shapes=shapes)
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 header length | header JSON (utf-8) | f32 LE payload
# header: {"format_version", "config" (canonical JSON text), "manifest":
#          [{"name", "shape", "offset", "nbytes"}], "payload_bytes"}


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(weights: ModelWeights, path) -> None:
    manifest, chunks, offset = [], [], 0
    for name, t in weights.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = _canonical(
        {
            "format_version": FORMAT_VERSION,
            "config": weights.config.to_json(),
            "manifest": manifest,
            "payload_bytes": offset,
        }
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db[k])


def load_checkpoint(path, expect: ModelConfig | None = None) -> ModelWeights:
    """Read a checkpoint; with ``expect`` the stored config must match it."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC) or len(raw) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown format version {version!r}")
    try:
        cfg = ModelConfig.from_dict(json.loads(header["config"]))
        manifest = header["manifest"]
        total = int(header["payload_bytes"])
    except (KeyError, TypeError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if expect is not None:
        diff = config_diff(expect, cfg)
        if diff:
            detail = ", ".join(f"{k}: expected {expect.to_dict()[k]!r}, found {cfg.to_dict()[k]!r}" for k in diff)
            raise CheckpointError(f"{path}: config mismatch ({detail})", diff)

    payload = raw[start + hlen :]
    if len(payload) != total:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {total} bytes)")
    specs = model_specs(cfg)
    names = [m["name"] for m in manifest]
    if names != list(specs):
        missing = sorted(set(specs) - set(names))
        extra = sorted(set(names) - set(specs))
        raise CheckpointError(f"{path}: manifest does not match config (missing {missing}, unexpected {extra})")

    dtype = np.dtype(cfg.precision).type
    params, expected_offset = {}, 0
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != specs[m["name"]].shape:
            raise CheckpointError(f"{path}: {m['name']} has shape {shape}, config implies {specs[m['name']].shape}")
        nbytes = 4 * int(np.prod(shape))
        if m["offset"] != expected_offset or m["nbytes"] != nbytes:
            raise CheckpointError(
                f"{path}: manifest entry {m['name']} at offset {m['offset']} (expected {expected_offset})"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=expected_offset).reshape(shape)
        params[m["name"]] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype, name=m["name"])
        expected_offset += nbytes
    if expected_offset != total:
        raise CheckpointError(f"{path}: manifest covers {expected_offset} of {total} payload bytes")
    return ModelWeights(cfg, params)
