"""Central finite-difference gradient checking in 64-bit mode.

The relative error of one parameter is ``max|analytic - numeric|`` divided by
``max(max|analytic|, max|numeric|)``; a check passes when every parameter of
the op stays below the tolerance.  Steps are ``1e-4 * max(1, |x|)`` per entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class GradReport:
    name: str
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < TOLERANCE

    def line(self) -> str:
        return f"{self.name} {self.max_rel_err:.3e}"


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. ``param``.

    Returns ``(flat_indices, derivatives)``; with ``max_entries`` only a random
    subset of entries is probed.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.empty(idx.size, dtype=np.float64)
    base = param.data
    for k, i in enumerate(idx):
        x0 = float(flat[i])
        h = 1e-4 * max(1.0, abs(x0))
        vals = []
        for sgn in (1.0, -1.0):
            pert = base.copy()
            pert.reshape(-1)[i] = x0 + sgn * h
            param.data = pert
            vals.append(fn().item())
        out[k] = (vals[0] - vals[1]) / (2 * h)
    param.data = base
    return idx, out


def analytic_grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
        p.requires_grad = True
    fn().backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def check(
    name: str,
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    max_entries: int | None = 24,
    seed: int = 0,
) -> GradReport:
    """Compare backward against central differences for every tensor in ``params``."""
    if any(p.dtype != np.float64 for p in params):
        raise TypeError(f"{name}: gradient checks run in 64-bit mode")
    rng = np.random.default_rng(seed)
    grads = analytic_grad(fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        idx, num = numeric_grad(fn, p, max_entries, rng)
        worst = max(worst, rel_error(g.reshape(-1)[idx], num))
    return GradReport(name, worst)


def f64(a, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# module suites


def _random_weighted_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = f64(rng.standard_normal(out.shape), requires_grad=False)
    return lambda y: T.sum(T.mul(y, w))


def suite_tensor(seed: int = 0) -> list[GradReport]:
    reports = []
    with T.precision("float64"):
        for inst in range(3):
            rng = np.random.default_rng(seed + inst)
            x = f64(rng.standard_normal((2, 4, 6, 6)))
            w = f64(rng.standard_normal((6, 2, 3, 3)) * 0.3)
            b = f64(rng.standard_normal(6))
            proj = _random_weighted_sum(T.conv2d(x, w, b, 1, 1, 2), rng)
            reports.append(check(f"tensor.conv2d[{inst}]", lambda: proj(T.conv2d(x, w, b, 1, 1, 2)), [x, w, b]))

            wd = f64(rng.standard_normal((4, 1, 4, 4)) * 0.3)
            proj = _random_weighted_sum(T.conv2d(x, wd, None, 2, 1, 4), rng)
            reports.append(check(f"tensor.conv2d_dw_s2[{inst}]", lambda: proj(T.conv2d(x, wd, None, 2, 1, 4)), [x, wd]))

            w1 = f64(rng.standard_normal((5, 4, 1, 1)))
            proj = _random_weighted_sum(T.conv2d(x, w1), rng)
            reports.append(check(f"tensor.conv2d_1x1[{inst}]", lambda: proj(T.conv2d(x, w1)), [x, w1]))

            gain = f64(rng.uniform(0.5, 1.5, 4))
            bias = f64(rng.standard_normal(4))
            proj = _random_weighted_sum(x, rng)
            reports.append(check(f"tensor.layer_norm[{inst}]", lambda: proj(T.layer_norm(x, gain, bias)), [x, gain, bias]))

            s = f64(rng.standard_normal((2, 3, 5, 7)))
            proj = _random_weighted_sum(s, rng)
            reports.append(check(f"tensor.softmax[{inst}]", lambda: proj(T.softmax(s, axis=2)), [s]))

            for kind in ("gelu", "sigmoid", "softplus"):
                reports.append(
                    check(f"tensor.{kind}[{inst}]", lambda kind=kind: proj(T.activation(s, kind)), [s])
                )

            a = f64(rng.standard_normal((2, 3, 4, 5)))
            m = f64(rng.standard_normal((2, 3, 5, 6)))
            proj = _random_weighted_sum(T.matmul(a, m), rng)
            reports.append(check(f"tensor.matmul[{inst}]", lambda: proj(T.matmul(a, m)), [a, m]))

            proj = _random_weighted_sum(T.pixel_unshuffle(x, 2), rng)
            reports.append(check(f"tensor.pixel_unshuffle[{inst}]", lambda: proj(T.pixel_unshuffle(x, 2)), [x]))

            d = f64(rng.uniform(0.5, 2.0, (2, 4, 6, 6)))
            proj = _random_weighted_sum(x, rng)
            reports.append(check(f"tensor.div[{inst}]", lambda: proj(T.div(x, d)), [x, d]))
    return reports


def suite_sat(seed: int = 0) -> list[GradReport]:
    """Fractional box sums: closed-form corner partials vs. central differences."""
    from . import sat

    reports = []
    for inst in range(3):
        rng = np.random.default_rng(seed + 10 + inst)
        H, W = rng.integers(5, 12, size=2)
        table = sat.build(rng.standard_normal((H, W)))
        worst = 0.0
        for _ in range(20):
            x0, x1 = np.sort(rng.uniform(-0.5, W + 0.5, 2))
            y0, y1 = np.sort(rng.uniform(-0.5, H + 0.5, 2))
            coords = np.array([x0, y0, x1, y1])
            analytic = np.array(sat.box_sum_fractional_grad(table, sat.BoxQuery(*coords))[1])
            numeric = np.empty(4)
            for k in range(4):
                h = 1e-4 * max(1.0, abs(coords[k]))
                hi, lo = coords.copy(), coords.copy()
                hi[k] += h
                lo[k] -= h
                numeric[k] = (
                    sat.box_sum_fractional(table, sat.BoxQuery(*hi)) - sat.box_sum_fractional(table, sat.BoxQuery(*lo))
                ) / (2 * h)
            worst = max(worst, rel_error(analytic, numeric))
        reports.append(GradReport(f"sat.box_sum_fractional[{inst}]", worst))
    return reports


def _sai2e_params(rng: np.random.Generator, variant: str = "sai2e") -> dict[str, Tensor]:
    from . import params as P
    from . import sai2e

    specs = sai2e.param_specs("sai2e", 6, variant) | sai2e.downsampler_specs("illum.down1")
    return {k: f64(v.data) for k, v in P.allocate(specs, rng, np.float64).items()}


def suite_sai2e(seed: int = 0) -> list[GradReport]:
    from . import sai2e

    reports = []
    with T.precision("float64"):
        for inst in range(3):
            rng = np.random.default_rng(seed + 20 + inst)
            img = f64(rng.uniform(0, 1, (2, 3, 8, 10)))
            ext = f64(rng.uniform(0.05, 0.95, (2, 4, 8, 10)))
            proj = _random_weighted_sum(img, rng)
            reports.append(
                check(f"sai2e.dynamic_box_sum[{inst}]", lambda: proj(sai2e.dynamic_box_sum(img, ext, 4.0, 5.0)), [img, ext])
            )
            reports.append(check(f"sai2e.box_mean[{inst}]", lambda: proj(sai2e.box_mean(img, ext, 4.0, 5.0)), [img, ext]))

            p = _sai2e_params(rng)
            names = [k for k in p if k.startswith("sai2e.")]
            reports.append(
                check(
                    f"sai2e.estimate_illumination[{inst}]",
                    lambda: proj(sai2e.estimate_illumination(img, p)),
                    [img] + [p[k] for k in names],
                )
            )
            lvl = f64(rng.uniform(0, 1, (2, 3, 8, 10)))
            proj_d = _random_weighted_sum(sai2e.downsample_illumination(lvl, p, "illum.down1"), rng)
            reports.append(
                check(
                    f"sai2e.downsample_illumination[{inst}]",
                    lambda: proj_d(sai2e.downsample_illumination(lvl, p, "illum.down1")),
                    [lvl] + [p[k] for k in p if k.startswith("illum.")],
                )
            )
    return reports


def _block_params(rng: np.random.Generator, C: int, heads: int, mode: str) -> dict[str, Tensor]:
    from . import blocks, sai2e
    from . import params as P

    specs = blocks.block_specs("blk", C, heads, 2.0, mode) | blocks.attention_specs("msa", C, heads, mode)
    specs |= sai2e.downsampler_specs("msa.down")
    out = {}
    for k, v in P.allocate(specs, rng, np.float64).items():
        # zero-initialized projections would block every upstream gradient
        data = v.data if np.any(v.data) else rng.standard_normal(v.shape) * 0.2
        out[k] = f64(data + (rng.standard_normal(v.shape) * 0.1 if k.endswith("alpha") else 0.0))
    return out


def suite_blocks(seed: int = 0) -> list[GradReport]:
    from . import blocks

    reports = []
    with T.precision("float64"):
        for inst in range(2):
            for mode in blocks.HEAD_ILLUM_MODES:
                rng = np.random.default_rng(seed + 30 + inst)
                C, heads = 8, 2
                p = _block_params(rng, C, heads, mode)
                F = f64(rng.standard_normal((2, C, 4, 6)))
                lum = f64(rng.uniform(0, 1, (2, 3, 4, 6)))
                proj = _random_weighted_sum(F, rng)
                attn = [p[k] for k in p if k.startswith("msa.") and ".down." not in k]
                reports.append(
                    check(
                        f"blocks.ig_msa_{mode}[{inst}]",
                        lambda: proj(blocks.ig_msa(F, lum, p, "msa", heads, mode)),
                        [F, lum] + attn,
                    )
                )
                big = f64(rng.uniform(0, 1, (2, 3, 8, 12)))
                reports.append(
                    check(
                        f"blocks.ig_msa_downsampled_{mode}[{inst}]",
                        lambda: proj(blocks.ig_msa(F, big, p, "msa", heads, mode, downsampler="msa.down")),
                        [big] + [p[k] for k in p if k.startswith("msa.down.")],
                    )
                )
                reports.append(
                    check(
                        f"blocks.saigt_block_{mode}[{inst}]",
                        lambda: proj(blocks.saigt_block(F, lum, p, "blk", heads, mode)),
                        [F, lum] + [p[k] for k in p if k.startswith("blk.")],
                        max_entries=12,
                    )
                )
            rng = np.random.default_rng(seed + 40 + inst)
            p = _block_params(rng, 8, 2, "replicate")
            F = f64(rng.standard_normal((2, 8, 4, 6)))
            proj = _random_weighted_sum(F, rng)
            reports.append(
                check(
                    f"blocks.dg_ffn[{inst}]",
                    lambda: proj(blocks.dg_ffn(F, p, "blk.ffn")),
                    [F] + [p[k] for k in p if k.startswith("blk.ffn.")],
                )
            )
    return reports


TOY_GRADCHECK_PARAMS = (
    "sai2e.offset.conv1.weight",
    "sai2e.modulation.conv2.weight",
    "illum.down1.dw.weight",
    "illum.down2.pw.bias",
    "embed.weight",
    "enc1.0.attn.qkv.weight",
    "enc1.0.attn.alpha",
    "enc2.0.attn.illum.weight",
    "down3.weight",
    "bottleneck.0.ffn.w1.weight",
    "bottleneck.1.ln1.weight",
    "up1.weight",
    "fuse2.weight",
    "dec1.0.attn.proj.weight",
    "refine.0.ffn.proj.weight",
    "output.weight",
)


def suite_network(seed: int = 0) -> list[GradReport]:
    """The toy network end to end, with zero-initialized projections perturbed."""
    from . import network

    reports = []
    with T.precision("float64"):
        for mode in ("replicate", "single"):
            cfg = network.ModelConfig(
                base_channels=8,
                block_counts=(1, 1, 1, 2, 1, 1, 1, 1),
                heads=(1, 2, 2, 4),
                head_illum_mode=mode,
                precision="float64",
                seed=seed,
            )
            weights = network.init_model(cfg)
            rng = np.random.default_rng(seed + 50)
            for k, t in weights.params.items():
                if not np.any(t.data):
                    t.data = rng.standard_normal(t.shape) * 0.05
            img = f64(rng.uniform(0, 1, (1, 3, 16, 16)))
            proj = _random_weighted_sum(img, rng)
            params = [img] + [weights.params[k] for k in TOY_GRADCHECK_PARAMS]
            reports.append(
                check(f"network.forward_{mode}", lambda: proj(network.forward(weights, img)), params, max_entries=6)
            )
    return reports


def suite_train(seed: int = 0) -> list[GradReport]:
    from . import train

    reports = []
    with T.precision("float64"):
        for inst in range(3):
            rng = np.random.default_rng(seed + 60 + inst)
            x = f64(rng.uniform(0, 1, (2, 3, 14, 15)))
            y = f64(rng.uniform(0, 1, (2, 3, 14, 15)))
            reports.append(check(f"train.l1_loss[{inst}]", lambda: train.l1_loss(x, y), [x, y]))
            reports.append(check(f"train.ssim_loss[{inst}]", lambda: train.ssim_loss(x, y), [x, y]))
            cfg = train.TrainConfig(lambda_l1=0.7, lambda_ssim=1.3)
            reports.append(check(f"train.total_loss[{inst}]", lambda: train.total_loss(x, y, cfg)[0], [x, y]))
    return reports


SUITES: dict[str, Callable[[int], list[GradReport]]] = {
    "tensor": suite_tensor,
    "sat": suite_sat,
    "sai2e": suite_sai2e,
    "blocks": suite_blocks,
    "network": suite_network,
    "train": suite_train,
}


def run(module: str = "all", seed: int = 0) -> list[GradReport]:
    if module == "all":
        return [r for fn in SUITES.values() for r in fn(seed)]
    if module not in SUITES:
        raise ValueError(f"unknown gradcheck module {module!r}; choose from {', '.join(SUITES)} or all")
    return SUITES[module](seed)
