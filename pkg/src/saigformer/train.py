"""Losses, metrics, Adam, cosine schedule, paired augmentation and the training loop.

Training minimizes ``lambda_l1 * L1 + lambda_ssim * (1 - SSIM)`` with Adam
and a cosine-annealed learning rate.  A synthetic generator of low/normal
pairs stands in for a real dataset at desk scale; ``load_paired_dir`` reads
``low/`` and ``normal/`` PNG folders with matching file names.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import imageio
from . import network
from . import sai2e
from . import tensor as T
from .network import ModelWeights
from .tensor import ShapeError, Tensor

METRIC_COLUMNS = ("iter", "lr", "loss", "l1", "ssim_loss", "psnr_train")
OFFSET_COLUMNS = ("iter", "mean_w", "std_w", "mean_h", "std_h")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class TrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    crop_size: int = 64
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_l1: float = 1.0
    lambda_ssim: float = 1.0
    seed: int = 0
    snapshot_interval: int = 500
    augment: bool = True
    grad_clip: float | None = None
    synthetic_pairs: int = 8

    def __post_init__(self):
        self.validate()

    @classmethod
    def full_scale(cls, **overrides) -> TrainConfig:
        """Full-scale protocol: 300k iterations on 128x128 crops."""
        return cls(**{"iterations": 300000, "crop_size": 128, **overrides})

    def validate(self) -> None:
        problems = []
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.crop_size < 8 or self.crop_size % 8:
            problems.append("crop_size must be a positive multiple of 8")
        if not 0 < self.lr_end <= self.lr_start:
            problems.append("need 0 < lr_end <= lr_start")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            problems.append("eps must be positive")
        if self.lambda_l1 < 0 or self.lambda_ssim < 0:
            problems.append("loss weights must be non-negative")
        if self.snapshot_interval < 1:
            problems.append("snapshot_interval must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append("grad_clip must be positive or null")
        if self.synthetic_pairs < 1:
            problems.append("synthetic_pairs must be >= 1")
        if problems:
            raise network.ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise network.ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class PairedSample:
    """Aligned low/normal images, each 3 x h x w float64 in [0, 1]."""

    low: np.ndarray
    normal: np.ndarray
    tag: str = ""
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if self.low.shape != self.normal.shape or self.low.ndim != 3 or self.low.shape[0] != 3:
            raise ShapeError(f"paired images must both be 3 x h x w, got {self.low.shape} and {self.normal.shape}")
        for name, a in (("low", self.low), ("normal", self.normal)):
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValueError(f"{name} image values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# losses and metrics


def _same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")


def l1_loss(x: Tensor, y: Tensor) -> Tensor:
    x, y = T.as_tensor(x), T.as_tensor(y)
    _same_shape(x, y)
    return T.mean(T.abs(T.sub(x, y)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps (the 2-D window is their outer product)."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(x: Tensor, taps: np.ndarray) -> Tensor:
    # separable valid filtering, one depthwise pass per axis
    C, k = x.shape[1], taps.size
    wv = Tensor(np.tile(taps.reshape(1, 1, k, 1), (C, 1, 1, 1)), dtype=x.dtype)
    wh = Tensor(np.tile(taps.reshape(1, 1, 1, k), (C, 1, 1, 1)), dtype=x.dtype)
    return T.conv2d(T.conv2d(x, wv, groups=C), wh, groups=C)


def ssim_map(x: Tensor, y: Tensor) -> Tensor:
    """Per-pixel SSIM over valid window positions (N x C x (H-10) x (W-10))."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    _same_shape(x, y)
    if x.ndim != 4:
        raise ShapeError(f"ssim needs N x C x H x W images, got {x.shape}")
    if min(x.shape[2:]) < SSIM_WINDOW:
        raise ShapeError(f"images {x.shape[2:]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    taps = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _blur(x, taps), _blur(y, taps)
    mxx, myy, mxy = T.mul(mx, mx), T.mul(my, my), T.mul(mx, my)
    sxx = T.sub(_blur(T.mul(x, x), taps), mxx)
    syy = T.sub(_blur(T.mul(y, y), taps), myy)
    sxy = T.sub(_blur(T.mul(x, y), taps), mxy)
    num = T.mul(T.add(T.mul(mxy, 2.0), c1), T.add(T.mul(sxy, 2.0), c2))
    den = T.mul(T.add(T.add(mxx, myy), c1), T.add(T.add(sxx, syy), c2))
    return T.div(num, den)


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM, computed per channel and averaged over channels and space."""
    return T.mean(ssim_map(x, y))


def ssim_loss(x: Tensor, y: Tensor) -> Tensor:
    return T.sub(1.0, ssim(x, y))


def psnr(x, y, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    b = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def total_loss(out: Tensor, target: Tensor, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    l1 = l1_loss(out, target)
    sl = ssim_loss(out, target)
    loss = T.add(T.mul(l1, cfg.lambda_l1), T.mul(sl, cfg.lambda_ssim))
    return loss, l1, sl


# ---------------------------------------------------------------------------
# optimization


def cosine_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.iterations:
        raise ValueError(f"iteration {it} outside [0, {cfg.iterations}]")
    if it == 0:
        return cfg.lr_start
    if it == cfg.iterations:
        return cfg.lr_end
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * it / cfg.iterations))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0, beta1, beta2, eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if set(params) != set(grads) or set(params) != set(state.m):
        missing = sorted(set(params) ^ set(grads) | set(params) ^ set(state.m))
        raise TrainError(f"parameter manifest mismatch: {missing}")
    state.step += 1
    t, b1, b2 = state.step, state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        # graph construction marks inputs read-only, so swap in a new array
        p.data = (p.data - upd).astype(p.dtype)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients to a global L2 norm of at most ``max_norm``; returns the original norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(s)
    return norm


# ---------------------------------------------------------------------------
# data


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the square's symmetry group on the last two axes."""
    out = np.rot90(a, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(sample: PairedSample, seed, crop: int | None = None, flips: bool = True) -> PairedSample:
    """Random crop, then one of the 8 flips/rotations, applied identically to both images."""
    rng = np.random.default_rng(seed)
    _, h, w = sample.low.shape
    crop = crop or min(h, w)
    if crop > h or crop > w:
        raise ShapeError(f"crop {crop} larger than image {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    k = int(rng.integers(0, 8)) if flips else 0
    low = dihedral(sample.low[:, y : y + crop, x : x + crop], k)
    normal = dihedral(sample.normal[:, y : y + crop, x : x + crop], k)
    return PairedSample(low, normal, sample.tag, sample.meta)


def _smooth_field(rng: np.random.Generator, size: int, waves: int = 3) -> np.ndarray:
    """Random low-frequency field rescaled to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(waves):
        fy, fx = rng.uniform(-1.5, 1.5, size=2)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)


def synth_pair(seed: int, size: int = 64) -> PairedSample:
    """Synthetic low/normal pair.

    The normal image is a smooth colour gradient with a few flat rectangles
    and disks.  The low image applies a smoothly varying gamma in [1.5, 3.5],
    a global scale in [0.1, 0.4] and Gaussian noise (clipped at 3 sigma).
    """
    if size < 8 or size % 8:
        raise ValueError("size must be a positive multiple of 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.85, size=(3, 1, 1))
    slope = rng.uniform(-0.3, 0.3, size=(3, 2, 1, 1))
    normal = base + slope[:, 0] * (yy - 0.5) + slope[:, 1] * (xx - 0.5)
    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform(0.1, 0.95, size=(3, 1, 1))
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < rng.uniform(0.08, 0.3))
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        normal = np.where(mask[None], colour, normal)
    normal = np.clip(normal, 0.1, 0.95)

    gamma = 1.5 + 2.0 * _smooth_field(rng, size)
    scale = rng.uniform(0.1, 0.4)
    sigma = rng.uniform(0.01, 0.05)
    noise = np.clip(rng.normal(0.0, sigma, size=normal.shape), -3 * sigma, 3 * sigma)
    low = np.clip(scale * normal ** gamma[None] + noise, 0.0, 1.0)
    meta = {"scale": scale, "sigma": sigma, "gamma_min": float(gamma.min()), "gamma_max": float(gamma.max())}
    return PairedSample(low, normal, f"synthetic:{seed}", meta)


def synthetic_corpus(count: int, size: int = 64, seed: int = 0) -> list[PairedSample]:
    return [synth_pair(seed * 100003 + i, size) for i in range(count)]


def load_paired_dir(root) -> list[PairedSample]:
    """Pairs from ``root/low/*.png`` and ``root/normal/*.png`` matched by file name."""
    root = Path(root)
    low_dir, normal_dir = root / "low", root / "normal"
    for d in (low_dir, normal_dir):
        if not d.is_dir():
            raise TrainError(f"missing directory {d}")
    lows = {p.name for p in low_dir.glob("*.png")}
    normals = {p.name for p in normal_dir.glob("*.png")}
    orphans = sorted(f"low/{n}" for n in lows - normals) + sorted(f"normal/{n}" for n in normals - lows)
    if orphans:
        raise TrainError(f"unmatched files in {root}: {', '.join(orphans)}")
    if not lows:
        raise TrainError(f"no PNG pairs found under {root}")
    out = []
    for name in sorted(lows):
        lo, hi = imageio.load_png(low_dir / name), imageio.load_png(normal_dir / name)
        if (lo.height, lo.width) != (hi.height, hi.width):
            raise TrainError(f"{name}: low is {lo.width}x{lo.height}, normal is {hi.width}x{hi.height}")
        out.append(
            PairedSample(
                imageio.to_array(lo),
                imageio.to_array(hi),
                f"{low_dir / name}|{normal_dir / name}",
            )
        )
    return out


def make_batch(data: Sequence[PairedSample], it: int, cfg: TrainConfig, dtype) -> tuple[Tensor, Tensor, list[int]]:
    """Batch for iteration ``it``; depends only on (seed, it), so resuming is exact."""
    rng = np.random.default_rng([cfg.seed, it])
    n = len(data)
    if cfg.batch_size >= n:
        idx = list(range(n)) + sorted(rng.choice(n, cfg.batch_size - n).tolist())
    else:
        idx = sorted(rng.choice(n, cfg.batch_size, replace=False).tolist())
    lows, normals = [], []
    for slot, i in enumerate(idx):
        s = augment(data[i], [cfg.seed, it, slot], cfg.crop_size, cfg.augment)
        lows.append(s.low)
        normals.append(s.normal)
    return Tensor(np.stack(lows), dtype=dtype), Tensor(np.stack(normals), dtype=dtype), idx


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    weights: ModelWeights
    history: list[dict]
    offset_history: list[dict]
    final_state: Path | None = None


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path: Path, columns: Sequence[str], rows: Sequence[dict], append: bool) -> None:
    new = not append or not path.exists()
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for r in rows:
            w.writerow([r["iter"]] + [_fmt(r[c]) for c in columns[1:]])


def _truncate_csv(path: Path, last_iter: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_iter]
    path.write_text("\n".join(keep) + "\n")


def snapshot_paths(out_dir: Path, it: int) -> tuple[Path, Path]:
    base = Path(out_dir) / "snapshots" / f"iter_{it:07d}"
    return base.with_suffix(".ckpt"), base.with_suffix(".state.npz")


def save_state(path: Path, weights: ModelWeights, state: AdamState, cfg: TrainConfig) -> None:
    """Exact training state (native-precision params and Adam moments)."""
    arrays = {}
    for k, p in weights.params.items():
        arrays[f"param/{k}"] = p.data
        arrays[f"m/{k}"] = state.m[k]
        arrays[f"v/{k}"] = state.v[k]
    meta = {"step": state.step, "model": weights.config.to_json(), "train": json.dumps(cfg.to_dict(), sort_keys=True)}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_state(path, cfg: TrainConfig | None = None) -> tuple[ModelWeights, AdamState]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        mcfg = network.ModelConfig.from_dict(json.loads(meta["model"]))
        tcfg = TrainConfig.from_dict(json.loads(meta["train"]))
        names = list(network.model_specs(mcfg))
        dtype = np.dtype(mcfg.precision).type
        params = {k: Tensor(z[f"param/{k}"], requires_grad=True, dtype=dtype, name=k) for k in names}
        m = {k: z[f"m/{k}"].astype(dtype) for k in names}
        v = {k: z[f"v/{k}"].astype(dtype) for k in names}
    ref = cfg or tcfg
    state = AdamState(m, v, int(meta["step"]), ref.beta1, ref.beta2, ref.eps)
    return network.ModelWeights(mcfg, params), state


def train_step(
    weights: ModelWeights, low: Tensor, normal: Tensor, state: AdamState, lr: float, cfg: TrainConfig
) -> dict:
    """Forward, loss, backward and one Adam update on a batch."""
    weights.zero_grad()
    trace: dict = {}
    out = network.forward(weights, low, trace)
    loss, l1, sl = total_loss(out, normal, cfg)
    row = {
        "loss": loss.item(),
        "l1": l1.item(),
        "ssim_loss": sl.item(),
        "psnr_train": psnr(np.clip(out.data, 0.0, 1.0), normal.data),
    }
    if not math.isfinite(row["loss"]):
        return row
    T.backward(loss)
    grads = collect_grads(weights.params)
    if cfg.grad_clip is not None:
        clip_grads(grads, cfg.grad_clip)
    adam_step(weights.params, grads, state, lr)
    return row


def snapshot_offset_stats(weights: ModelWeights, low: Tensor) -> dict | None:
    """Window-size statistics of the current weights on a batch (None without offsets)."""
    if weights.config.illum_variant == "avgpool2":
        return None
    offsets = sai2e.predict_offsets(low, weights.params)
    return sai2e.offset_stats(offsets, low.shape[2:])


def fit(
    weights: ModelWeights,
    data: Sequence[PairedSample],
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    progress: Callable[[dict], bool | None] | None = None,
) -> FitResult:
    """Train ``weights`` in place.

    With ``out_dir`` set, writes ``metrics.csv`` (every iteration),
    ``offset_stats.csv`` and snapshots (every ``snapshot_interval``
    iterations and at the end).  ``resume`` is a ``.state.npz`` snapshot;
    the metric logs are truncated to that iteration and continued.
    ``progress`` sees every metric row; returning True stops training after
    that iteration (with a snapshot when ``out_dir`` is set).
    """
    if not data:
        raise TrainError("no training data")
    start, state = 0, None
    if resume is not None:
        weights, state = load_state(resume, cfg)
        start = state.step
        if start > cfg.iterations:
            raise TrainError(f"snapshot is at iteration {start}, past the configured {cfg.iterations}")
    if state is None:
        state = AdamState.zeros(weights.params, cfg.beta1, cfg.beta2, cfg.eps)

    out = Path(out_dir) if out_dir is not None else None
    metrics_csv = offsets_csv = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_csv, offsets_csv = out / "metrics.csv", out / "offset_stats.csv"
        if start:
            _truncate_csv(metrics_csv, start)
            _truncate_csv(offsets_csv, start)
        else:
            _write_rows(metrics_csv, METRIC_COLUMNS, [], append=False)
            _write_rows(offsets_csv, OFFSET_COLUMNS, [], append=False)

    history: list[dict] = []
    offset_history: list[dict] = []
    final_state = None
    dtype = np.dtype(weights.config.precision).type
    with T.precision(weights.config.precision):
        for it in range(start, cfg.iterations):
            low, normal, idx = make_batch(data, it, cfg, dtype)
            lr = cosine_lr(it, cfg)
            row = train_step(weights, low, normal, state, lr, cfg)
            step = it + 1
            if not math.isfinite(row["loss"]):
                dump = None
                if out is not None:
                    dump = out / f"nan_batch_iter_{step:07d}.npz"
                    np.savez(dump, low=low.data, normal=normal.data, indices=np.array(idx), iteration=step)
                raise TrainingDiverged(f"non-finite loss {row['loss']} at iteration {step} (batch {idx})", dump)
            row = {"iter": step, "lr": lr, **row}
            history.append(row)
            if metrics_csv is not None:
                _write_rows(metrics_csv, METRIC_COLUMNS, [row], append=True)
            stop = bool(progress(row)) if progress is not None else False
            if stop or step % cfg.snapshot_interval == 0 or step == cfg.iterations:
                stats = snapshot_offset_stats(weights, low)
                if stats is not None:
                    stats = {"iter": step, **stats}
                    offset_history.append(stats)
                    if offsets_csv is not None:
                        _write_rows(offsets_csv, OFFSET_COLUMNS, [stats], append=True)
                if out is not None:
                    ckpt, final_state = snapshot_paths(out, step)
                    network.save_checkpoint(weights, ckpt)
                    save_state(final_state, weights, state, cfg)
            if stop:
                break
    return FitResult(weights, history, offset_history, final_state)


def enhance(weights: ModelWeights, image: np.ndarray) -> np.ndarray:
    """Run the model on one 3 x H x W image of any size (reflect-padded to /8)."""
    with T.precision(weights.config.precision):
        x = Tensor(np.asarray(image)[None], dtype=np.dtype(weights.config.precision).type)
        padded, dims = imageio.pad_reflect(x)
        y = network.forward(weights, padded)
        return imageio.crop_back(y.data, dims)[0]


def evaluate(weights: ModelWeights, data: Sequence[PairedSample]) -> dict[str, float]:
    """Mean PSNR and SSIM of clamped model outputs over full images."""
    ps, ss = [], []
    for s in data:
        y = np.clip(enhance(weights, s.low), 0.0, 1.0)
        ps.append(psnr(y, s.normal))
        ss.append(ssim(Tensor(y[None], dtype=np.float64), Tensor(s.normal[None], dtype=np.float64)).item())
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}
