"""Command-line entry point: enhance, train, inspect, gradcheck, stats.

Exit codes: 0 success, 1 user error (bad flags, files, configs), 2 internal
invariant breach (failed gradient check, diverged training).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, imageio, network, sai2e, train
from . import tensor as T
from .network import ModelConfig
from .train import TrainConfig

CONFIG_VERSION = 1

USER_ERRORS = (
    network.ConfigError,
    network.CheckpointError,
    imageio.ImageFormatError,
    train.TrainError,
    T.ShapeError,
    OSError,
)


class UserError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def default_config() -> dict:
    """Desk-scale defaults: the toy model and the 2000-iteration schedule."""
    model = ModelConfig(base_channels=16, block_counts=(1, 1, 1, 2, 1, 1, 1, 1))
    return {"version": CONFIG_VERSION, "model": model.to_dict(), "train": TrainConfig().to_dict()}


def config_to_json(model: ModelConfig, tr: TrainConfig) -> str:
    doc = {"version": CONFIG_VERSION, "model": model.to_dict(), "train": tr.to_dict()}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def parse_config(doc: dict) -> tuple[ModelConfig, TrainConfig]:
    """Validate a config document; every unknown key is reported at once."""
    if not isinstance(doc, dict):
        raise network.ConfigError("config must be a JSON object")
    unknown = [k for k in doc if k not in ("version", "model", "train")]
    model, tr = doc.get("model", {}), doc.get("train", {})
    if not isinstance(model, dict) or not isinstance(tr, dict):
        raise network.ConfigError("'model' and 'train' must be JSON objects")
    model_fields = set(ModelConfig.__dataclass_fields__)
    train_fields = set(TrainConfig.__dataclass_fields__)
    unknown += [f"model.{k}" for k in model if k not in model_fields]
    unknown += [f"train.{k}" for k in tr if k not in train_fields]
    if unknown:
        raise network.ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise network.ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(tr)
    except TypeError as exc:
        raise network.ConfigError(str(exc)) from exc


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return parse_config(default_config())
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise network.ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)


# ---------------------------------------------------------------------------
# commands


def _load_input(path) -> np.ndarray:
    return imageio.to_array(imageio.load_png(path))


def cmd_enhance(args) -> int:
    weights = network.load_checkpoint(args.checkpoint)
    inputs = [Path(p) for p in args.input]
    if len(inputs) > 1 and not args.output.endswith("/") and not Path(args.output).is_dir():
        raise UserError("several inputs need --output to be a directory")
    for src in inputs:
        img = _load_input(src)
        t0 = time.perf_counter()
        out = train.enhance(weights, img)
        dt = time.perf_counter() - t0
        dst = Path(args.output) / src.name if len(inputs) > 1 or Path(args.output).is_dir() else Path(args.output)
        imageio.save_png(imageio.from_tensor(out), dst)
        print(f"{src} -> {dst} {img.shape[2]}x{img.shape[1]} {dt:.3f}s")
    return 0


def cmd_train(args) -> int:
    model_cfg, tr = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": args.seed})
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        tr = TrainConfig.from_dict({**tr.to_dict(), **overrides})

    if args.data == "synthetic":
        data = train.synthetic_corpus(tr.synthetic_pairs, tr.crop_size, tr.seed)
    else:
        data = train.load_paired_dir(args.data)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config_to_json(model_cfg, tr))
    weights = network.init_model(model_cfg)
    if args.resume:
        snap, _ = train.load_state(args.resume, tr)
        diff = network.config_diff(snap.config, model_cfg)
        if diff:
            raise network.CheckpointError(f"snapshot model config differs in {', '.join(diff)}", diff)

    every = max(1, tr.iterations // 20)

    def progress(row):
        if row["iter"] % every == 0 or row["iter"] == tr.iterations:
            print(f"iter {row['iter']} lr {row['lr']:.3e} loss {row['loss']:.5f} psnr {row['psnr_train']:.2f}", flush=True)

    t0 = time.perf_counter()
    res = train.fit(weights, data, tr, out_dir=out, resume=args.resume, progress=progress)
    print(f"done in {time.perf_counter() - t0:.1f}s; last snapshot {res.final_state}")
    return 0


def cmd_inspect(args) -> int:
    weights = network.load_checkpoint(args.checkpoint)
    img = _load_input(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H, W = img.shape[1:]
    dtype = np.dtype(weights.config.precision).type
    with T.precision(weights.config.precision):
        padded, dims = imageio.pad_reflect(T.Tensor(img[None], dtype=dtype))
        trace: dict = {}
        y = network.forward(weights, padded, trace)

    def crop(a):
        return np.asarray(a)[..., :H, :W]

    maps = {"prior": img.mean(axis=0)}
    if trace["offsets"] is not None:
        area = sai2e.integration_area_map(trace["offsets"], padded.shape[2:])[0]
        stats = sai2e.offset_stats(trace["offsets"], padded.shape[2:])
    else:
        area = np.full(padded.shape[2:], 4.0)
        stats = None
    maps["area"] = crop(area)
    lum = crop(trace["pyramid"][0].data[0])
    for c, name in enumerate("rgb"):
        maps[f"illum_{name}"] = lum[c]
    maps["residual"] = crop(trace["residual"].data[0]).mean(axis=0)
    for name, a in maps.items():
        imageio.save_gray_png(imageio.heatmap(a), out / f"{name}.png")
    np.save(out / "area.npy", maps["area"])

    enhanced = np.clip(crop(y.data[0]), 0.0, 1.0)
    with open(out / "y_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "mean_y", "std_y"])
        for name, a in (("input", img), ("output", enhanced)):
            yc = imageio.luminance_y(a)
            w.writerow([name, repr(float(yc.mean())), repr(float(yc.std()))])
    if stats is not None:
        with open(out / "offset_stats.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(train.OFFSET_COLUMNS[1:])
            w.writerow([repr(stats[k]) for k in train.OFFSET_COLUMNS[1:]])
    print(f"wrote {len(maps)} heatmaps and statistics to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    with contextlib.ExitStack() as stack:
        for op in args.inject_fault or []:
            stack.enter_context(T.inject_fault(op))
        reports = gradcheck.run(args.module, args.seed if args.seed is not None else 0)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.ok]
    if failed:
        print(f"FAILED {len(failed)}/{len(reports)} above {gradcheck.TOLERANCE:g}: "
              + ", ".join(r.name for r in failed), file=sys.stderr)
        return 2
    return 0


def param_search(target: float = 12.35e6, modes=("replicate", "single")) -> list[dict]:
    """Parameter counts of the default-width model over FFN expansions 2.00..4.50 (step 0.02).

    Rows are sorted by distance to ``target``.
    """
    rows = []
    for i in range(200, 451, 2):
        for m in modes:
            n = network.param_count(ModelConfig(ffn_expansion=i / 100, head_illum_mode=m))
            rows.append({"ffn_expansion": i / 100, "head_illum_mode": m, "params": n, "rel_gap": (n - target) / target})
    return sorted(rows, key=lambda r: abs(r["rel_gap"]))


def cmd_stats(args) -> int:
    if args.input:
        print("image,mean_y,std_y")
        for p in args.input:
            y = imageio.luminance_y(imageio.load_png(p))
            print(f"{p},{y.mean():.6f},{y.std():.6f}")
    if args.config or not args.input:
        model_cfg, _ = load_config(args.config)
        print(f"params {network.param_count(model_cfg)}")
    if args.param_search:
        rows = param_search(args.target)
        print("ffn_expansion,head_illum_mode,params,rel_gap")
        for r in rows[: args.top]:
            print(f"{r['ffn_expansion']:.2f},{r['head_illum_mode']},{r['params']},{r['rel_gap']:+.5f}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="saigformer", description="Low-light enhancement with integral illumination guidance")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="enhance PNG images with a checkpoint")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config (defaults to the desk toy setup)")
    p.add_argument("--data", default="synthetic", help="'synthetic' or a directory with low/ and normal/")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="a snapshots/iter_*.state.npz file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="write illumination/area/residual heatmaps and Y statistics")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=list(gradcheck.SUITES) + ["all"])
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-fault", action="append", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="Y-channel statistics and parameter counts")
    p.add_argument("--input", nargs="*")
    p.add_argument("--config")
    p.add_argument("--param-search", action="store_true")
    p.add_argument("--target", type=float, default=12.35e6)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except train.TrainingDiverged as exc:
        print(f"error: {exc}" + (f" (batch dumped to {exc.dump_path})" if exc.dump_path else ""), file=sys.stderr)
        return 2
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
