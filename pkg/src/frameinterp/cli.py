"""Command-line entry point: ``python -m frameinterp <command> ...``.

Commands: synth, train, interpolate, evaluate, baseline, gradcheck.
Exit status is 0 on success, 1 for invalid input (one-line message on
stderr) and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import networks as N
from .data import (
    FrameTriplet,
    Shape,
    SynthSpec,
    extract_triplets,
    load_image,
    make_synthetic_set,
    random_synth_spec,
    read_manifest,
    save_image,
    synth_sequence,
    write_manifest,
    write_sequence,
)
from .flow import FlowField, average_frames, load_flo, warp_middle
from .gradcheck import run_suite
from .metrics import evaluate, format_report
from .training import TrainConfig, load_config, load_training_checkpoint, predict, train

__all__ = ["main", "run"]

HEADER_NAME = "run_header.txt"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad arguments or input files; exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_header(out_dir: Path, command: str, seed: int, config_text: str) -> Path:
    """Reproducibility header; only the ``time`` line varies between identical runs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / HEADER_NAME
    path.write_text(
        f"command={command}\nversion={_version()}\nseed={seed}\n"
        f"config_digest={config_digest(config_text)}\n"
        f"time={time.strftime('%Y-%m-%dT%H:%M:%S')}\n"
    )
    return path


def _argv_text(args: argparse.Namespace) -> str:
    items = sorted((k, v) for k, v in vars(args).items() if k != "func")
    return "\n".join(f"{k}={v}" for k, v in items)


# --- synth -------------------------------------------------------------------


def parse_synth_spec(text: str) -> SynthSpec:
    """Key/value scene description.

    ``size``, ``frames``, ``seed``, ``max_speed``, ``texture`` and
    ``shapes`` (count of random shapes) describe a random scene; each
    ``shape = kind cx cy half_w half_h vx vy r g b`` line adds an explicit
    shape instead.
    """
    opts = {"size": "64", "frames": "3", "seed": "0", "max_speed": "6", "texture": "0.15", "shapes": "2"}
    explicit: list[Shape] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"synth spec line {lineno}: expected key = value")
        if key == "shape":
            parts = value.split()
            if len(parts) != 10 or parts[0] not in ("rect", "disk"):
                raise UsageError(f"synth spec line {lineno}: shape needs kind cx cy hw hh vx vy r g b")
            v = [float(x) for x in parts[1:]]
            explicit.append(Shape(parts[0], (v[0], v[1]), (v[2], v[3]), tuple(v[6:9]), (v[4], v[5])))
        elif key in opts:
            opts[key] = value.strip()
        else:
            raise UsageError(f"synth spec line {lineno}: unknown key {key!r}")
    size, frames, seed = int(opts["size"]), int(opts["frames"]), int(opts["seed"])
    if explicit:
        return SynthSpec(size, size, explicit, frames=frames, texture=float(opts["texture"]), seed=seed)
    rng = np.random.default_rng(seed)
    n = int(opts["shapes"])
    return random_synth_spec(
        rng, size=size, frames=frames, max_speed=float(opts["max_speed"]), shapes=(n, n), texture=float(opts["texture"])
    )


def cmd_synth(args) -> int:
    text = Path(args.spec).read_text()
    spec = parse_synth_spec(text)
    frames, flows = synth_sequence(spec)
    out = Path(args.out)
    write_sequence(frames, flows, out)
    write_header(out, "synth", spec.seed, text)
    print(f"wrote {len(frames)} frames and {len(flows)} flows to {out}")
    return 0


# --- train -------------------------------------------------------------------


def _load_dataset(cfg: TrainConfig) -> list[FrameTriplet]:
    if cfg.dataset.startswith("synthetic:"):
        # synthetic:COUNT[:SIZE[:MAX_SPEED]]
        parts = cfg.dataset.split(":")[1:]
        count = int(parts[0])
        size = int(parts[1]) if len(parts) > 1 else 64
        speed = float(parts[2]) if len(parts) > 2 else 6.0
        return make_synthetic_set(count, size, speed, seed=cfg.seed).triplets
    if not cfg.dataset:
        raise UsageError("config has no dataset")
    frames = read_manifest(cfg.dataset)
    flows = read_manifest(cfg.flows) if cfg.flows else None
    return list(extract_triplets(frames, flows))


def _config_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in ("steps", "seed", "mode", "lr", "gamma", "batch", "dataset", "checkpoint")}
    cfg = load_config(args.config, **overrides)
    if not cfg.checkpoint:
        raise UsageError("config has no checkpoint path")
    ckpt = Path(cfg.checkpoint)
    out_dir = ckpt.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg.log:
        cfg.log = str(out_dir / "train.log")
    dataset = _load_dataset(cfg)
    if dataset and not cfg.image_size:
        cfg.image_size = dataset[0].first.shape[1]
    text = _config_text(cfg)
    Path(str(ckpt) + ".cfg").write_text(text)
    write_header(out_dir, "train", cfg.seed, text)
    result = train(dataset, cfg)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"steps={result.state.step} total={last.total:.6f} mse_term={last.mse_term:.6f}")
    print(f"checkpoint {ckpt}")
    return 0


# --- interpolate / baseline -------------------------------------------------


def _load_model(ckpt: str, config: Optional[str]):
    cfg_path = Path(config) if config else Path(ckpt + ".cfg")
    if not cfg_path.exists():
        raise UsageError(f"model config {cfg_path} not found")
    cfg = load_config(cfg_path)
    cfg.log = ""
    cfg.checkpoint = ""
    size = cfg.crop or cfg.image_size or 64
    try:
        return load_training_checkpoint(ckpt, cfg, size), cfg
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from exc


def _panel(first, middle, second, gap: int = 2) -> np.ndarray:
    c, h, _ = first.shape
    spacer = np.ones((c, h, gap))
    return np.concatenate([first, spacer, middle, spacer, second], axis=2)


def cmd_interpolate(args) -> int:
    model, cfg = _load_model(args.ckpt, args.config)
    first, second = load_image(args.first), load_image(args.second)
    if first.shape != second.shape:
        raise UsageError(f"frame extents differ: {first.shape} vs {second.shape}")
    flow = None
    if cfg.prior == "external":
        if not args.flow:
            raise UsageError("this model needs --flow")
        flow = load_flo(args.flow).to_array()
    out = Path(args.out)
    middle = np.clip(predict(model.generator, first, second, flow), 0.0, 1.0)
    save_image(middle, out)
    panel = out.with_name(out.stem + "_panel" + out.suffix)
    save_image(_panel(first, middle, second), panel)
    write_header(out.parent, "interpolate", cfg.seed, _argv_text(args))
    print(f"wrote {out} and {panel}")
    return 0


def _baseline_one(method: str, first, second, flow: Optional[FlowField]) -> np.ndarray:
    if method == "average":
        return average_frames(first, second)
    if flow is None:
        raise UsageError("warp baseline needs a flow")
    return warp_middle(first, second, flow)


def cmd_baseline(args) -> int:
    out = Path(args.out)
    if args.frames_manifest:
        frames = read_manifest(args.frames_manifest)
        flows = read_manifest(args.flows_manifest) if args.flows_manifest else None
        if args.method == "warp" and flows is None:
            raise UsageError("warp baseline needs --flows-manifest")
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, t in enumerate(extract_triplets(frames, flows)):
            p = out / f"middle_{k:05d}.ppm"
            save_image(_baseline_one(args.method, t.first, t.second, t.flow_1_to_2), p)
            paths.append(p)
        write_manifest(paths, out / "predictions.txt")
        header_dir = out
        print(f"wrote {len(paths)} frames and {out / 'predictions.txt'}")
    else:
        if not (args.first and args.second):
            raise UsageError("give --first and --second, or --frames-manifest")
        first, second = load_image(args.first), load_image(args.second)
        if first.shape != second.shape:
            raise UsageError(f"frame extents differ: {first.shape} vs {second.shape}")
        flow = load_flo(args.flow) if args.flow else None
        save_image(_baseline_one(args.method, first, second, flow), out)
        header_dir = out.parent
        print(f"wrote {out}")
    write_header(header_dir, "baseline", 0, _argv_text(args))
    return 0


# --- evaluate / gradcheck ----------------------------------------------------


def cmd_evaluate(args) -> int:
    preds = read_manifest(args.pred_manifest)
    truths = read_manifest(args.truth_manifest)
    if len(preds) != len(truths):
        raise UsageError(f"manifests differ in length ({len(preds)} vs {len(truths)})")
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        pred_imgs = list(pool.map(load_image, preds))
        truth_imgs = list(pool.map(load_image, truths))
    for p, t, a, b in zip(preds, truths, pred_imgs, truth_imgs):
        if a.shape != b.shape:
            raise UsageError(f"{p} and {t} differ in extent")
    report = format_report({args.name: evaluate(pred_imgs, truth_imgs)})
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report)
        write_header(out.parent, "evaluate", 0, _argv_text(args))
    return 0


def cmd_gradcheck(args) -> int:
    errors = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in errors.items():
        print(f"{name}\t{err:.3e}")
        worst = max(worst, err)
    print(f"max\t{worst:.3e}\ttolerance\t{GRADCHECK_TOL:.0e}")
    if worst >= GRADCHECK_TOL:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


# --- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frameinterp", description="Video frame interpolation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic sequence with exact flow")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a generator from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--mode")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpolate", help="predict the middle frame of a pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="model config (default: CKPT.cfg)")
    p.add_argument("--first", required=True)
    p.add_argument("--second", required=True)
    p.add_argument("--flow")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="MSE / PSNR / SSIM report")
    p.add_argument("--pred-manifest", required=True)
    p.add_argument("--truth-manifest", required=True)
    p.add_argument("--name", default="method")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="frame average or flow warping")
    p.add_argument("--method", choices=("average", "warp"), required=True)
    p.add_argument("--first")
    p.add_argument("--second")
    p.add_argument("--flow")
    p.add_argument("--frames-manifest")
    p.add_argument("--flows-manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: Sequence[str]) -> int:
    try:
        args = build_parser().parse_args(list(argv))
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as status 2
        print(f"failed: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
