# main.py
"""
Command-line entry point.

    python main.py dataset-gen [--count N] [--seed S] [--out data/toy_dataset.npz]
    python main.py train       [--steps N] [--seed S] [--out-dir runs] [--resume]
    python main.py render      --text "<description>" --pose <file|random> --out out.ppm
                               [--checkpoint C] [--seed S] [--views V] [--threads T]
    python main.py gradcheck   [--probes 50] [--h 1e-5] [--tol 1e-4]
    python main.py metrics     --a img1 --b img2
    python main.py probe       [--checkpoint C] [--probes 50]

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; results go to stdout or files.
"""

import argparse
import math
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from dotenv import load_dotenv

from cch.body_model import load_rig
from cch.checkpoint import load_checkpoint, restore
from cch.checks import build_check_models, discriminator_path_check, generator_path_check
from cch.config import RunConfig, load_config
from cch.dataset import (FashionGrammar, generate_dataset, load_dataset, sample_pose,
                         save_dataset)
from cch.fashion_text import Vocabulary
from cch.renderer import render_image
from cch.trainer import build_models, format_psnr, probe_controllability, psnr, train
from pretty_logs import pretty_log, set_log_file
from utils.errors import CCHError, CheckpointError, InvalidInputError
from utils.images import read_image, write_image

# ---- Parser ----


class CLIParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    env = os.getenv("CCH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pretty_log("warn", f"ignoring CCH_THREADS={env!r}")
    return os.cpu_count() or 1


def build_parser() -> CLIParser:
    parser = CLIParser(prog="cch", description="Compositional cross-modal human renderer")
    parser.add_argument("--config", help="run config JSON (default: $CCH_CONFIG or config.json)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("dataset-gen", help="generate the procedural fashion dataset")
    gen.add_argument("--count", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", help="dataset archive path (.npz)")
    gen.add_argument("--height", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--previews", type=int, default=8, help="PPM previews to write")

    tr = sub.add_parser("train", help="adversarial training")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out-dir")
    tr.add_argument("--dataset")
    tr.add_argument("--checkpoint")
    tr.add_argument("--height", type=int)
    tr.add_argument("--width", type=int)
    tr.add_argument("--resume", action="store_true")

    ren = sub.add_parser("render", help="one-shot render of a described figure")
    ren.add_argument("--text", required=True)
    ren.add_argument("--pose", default="random", help="pose file (K lines of 3 floats) or 'random'")
    ren.add_argument("--out", required=True)
    ren.add_argument("--checkpoint")
    ren.add_argument("--seed", type=int, default=0)
    ren.add_argument("--views", type=int, default=1, help="orbit views about the vertical axis")
    ren.add_argument("--threads", type=int, default=_default_threads())
    ren.add_argument("--height", type=int)
    ren.add_argument("--width", type=int)
    ren.add_argument("--camera", type=float, nargs=3, metavar=("X", "Y", "Z"))
    ren.add_argument("--beta", type=float, nargs="+", help="shape coefficients")

    gc = sub.add_parser("gradcheck", help="finite-difference check of both trainable paths")
    gc.add_argument("--probes", type=int, default=50)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)

    me = sub.add_parser("metrics", help="PSNR between two images")
    me.add_argument("--a", required=True)
    me.add_argument("--b", required=True)

    pr = sub.add_parser("probe", help="color-swap controllability probe")
    pr.add_argument("--checkpoint")
    pr.add_argument("--dataset")
    pr.add_argument("--probes", type=int, default=50)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--threads", type=int, default=_default_threads())
    return parser


# ---- Helpers ----


def read_pose(path: str, joints: int) -> np.ndarray:
    rows: List[List[float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values = [float(v) for v in line.replace(",", " ").split()]
            except ValueError:
                raise InvalidInputError(f"pose file {path}: bad line {line!r}") from None
            if len(values) != 3:
                raise InvalidInputError(f"pose file {path}: expected 3 values per line, got {line!r}")
            rows.append(values)
    if len(rows) != joints:
        raise InvalidInputError(f"pose file {path}: expected {joints} lines, got {len(rows)}")
    return np.array(rows, dtype=np.float64)


def _load_models(config: RunConfig, checkpoint: Optional[str]):
    """Generator/discriminator at the checkpoint's parameters (or initialization)."""
    path = checkpoint or config.paths.checkpoint_path()
    rig, vocab = load_rig(config.paths.rig), Vocabulary.from_file(config.paths.vocab)
    if os.path.exists(path):
        ckpt = load_checkpoint(path)
        if ckpt.config:
            saved = RunConfig.from_dict(ckpt.config)
            config.model = saved.model
            config.train.seed = saved.train.seed
        generator, discriminator = build_models(config, rig, vocab)
        restore(ckpt, generator, discriminator)
        pretty_log("ckpt", f"loaded step {ckpt.step} from {path}")
    elif checkpoint:
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    else:
        pretty_log("warn", f"no checkpoint at {path}; rendering the initialized model")
        generator, discriminator = build_models(config, rig, vocab)
    generator.eval()
    return generator, discriminator


def _view_paths(out: str, views: int) -> List[str]:
    if views == 1:
        return [out]
    stem, ext = os.path.splitext(out)
    return [f"{stem}_{i}{ext or '.ppm'}" for i in range(views)]


# ---- Commands ----


def cmd_dataset_gen(args, config: RunConfig) -> int:
    d = config.dataset
    height = args.height or config.train.height
    width = args.width or config.train.width
    camera = config.camera.build(height, width)
    rig = load_rig(config.paths.rig)
    records = generate_dataset(d.count, FashionGrammar.from_mapping(d.grammar),
                               np.random.Generator(np.random.PCG64(d.seed)),
                               rig=rig, camera=camera, pose_std=d.pose_std,
                               root_yaw=d.root_yaw, shape_std=d.shape_std)
    save_dataset(records, config.paths.dataset, previews=args.previews)
    print(config.paths.dataset)
    return 0


def cmd_train(args, config: RunConfig) -> int:
    ckpt = train(config, resume=args.resume)
    print(config.paths.checkpoint_path())
    pretty_log("ready", f"checkpoint at step {ckpt.step}")
    return 0


def cmd_render(args, config: RunConfig) -> int:
    if args.views < 1:
        raise InvalidInputError("--views must be >= 1")
    if args.threads < 1:
        raise InvalidInputError("--threads must be >= 1")
    generator, _ = _load_models(config, args.checkpoint)
    rig = generator.rig
    if args.pose == "random":
        theta = sample_pose(np.random.default_rng(args.seed), rig, config.dataset.pose_std,
                            config.dataset.root_yaw)
    else:
        theta = read_pose(args.pose, rig.num_parts)
    beta = np.zeros(rig.shape_dim) if not args.beta else np.array(args.beta, dtype=np.float64)
    camera = config.camera.build()
    words = generator.encode(args.text)
    for i, path in enumerate(_view_paths(args.out, args.views)):
        view = camera.orbit(2.0 * math.pi * i / args.views, config.camera.look_at)
        result = render_image(generator, beta, theta, words, view, args.seed, threads=args.threads)
        write_image(path, result.image.numpy())
        print(path)
    return 0


def cmd_gradcheck(args, config: RunConfig) -> int:
    rig, vocab = load_rig(config.paths.rig), Vocabulary.from_file(config.paths.vocab)
    generator, discriminator = build_check_models(rig, vocab, args.seed)
    reports = {
        "generator": generator_path_check(generator, probes=args.probes, h=args.h, tol=args.tol,
                                          seed=args.seed),
        "discriminator": discriminator_path_check(discriminator, rig, probes=args.probes,
                                                  h=args.h, tol=args.tol, seed=args.seed,
                                                  mode=config.model.r1_mode),
    }
    worst = 0.0
    for name, report in reports.items():
        for line in report.lines():
            pretty_log("grad", line, label=name)
        print(f"{name} max_rel_error={report.max_rel_error:.3e}")
        worst = max(worst, report.max_rel_error)
    print(f"max_rel_error={worst:.3e}")
    if worst > args.tol:
        pretty_log("error", f"gradient check failed: {worst:.3e} > {args.tol:.1e}")
        return 2
    return 0


def cmd_metrics(args, config: RunConfig) -> int:
    for path in (args.a, args.b):
        if not os.path.exists(path):
            raise InvalidInputError(f"image not found: {path}")
    print(format_psnr(psnr(read_image(args.a), read_image(args.b))))
    return 0


def cmd_probe(args, config: RunConfig) -> int:
    generator, _ = _load_models(config, args.checkpoint)
    records = load_dataset(config.paths.dataset)
    camera = config.camera.build(*records[0].image.shape[:2])
    report = probe_controllability(generator, records, camera, probes=args.probes,
                                   seed=args.seed, threads=args.threads)
    print(f"{report.moved}/{report.probes} {report.fraction:.4f}")
    return 0


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
    "probe": cmd_probe,
}


def _overrides(args) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    out: Dict[str, Any] = {}
    if args.command == "dataset-gen":
        out.update({"dataset.count": get("count"), "dataset.seed": get("seed"),
                    "paths.dataset": get("out")})
    elif args.command == "train":
        out.update({"train.steps": get("steps"), "train.seed": get("seed"),
                    "paths.out_dir": get("out_dir"), "paths.dataset": get("dataset"),
                    "paths.checkpoint": get("checkpoint"), "train.height": get("height"),
                    "train.width": get("width")})
    elif args.command == "render":
        out.update({"camera.position": get("camera")})
    elif args.command == "probe":
        out.update({"paths.dataset": get("dataset")})
    return out


def _apply_resolution(args, config: RunConfig) -> RunConfig:
    """--height/--width on render keep the field of view (focal scales with height)."""
    if args.command != "render" or not (args.height or args.width):
        return config
    height = args.height or config.camera.height
    width = args.width or config.camera.width
    return config.with_overrides({"camera.focal": config.camera.focal * height / config.camera.height,
                                  "camera.height": height, "camera.width": width})


# ---- Boot ----


def run(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if os.getenv("CCH_LOG_FILE"):
        set_log_file(os.getenv("CCH_LOG_FILE"))
    # rendering parallelism comes from our own worker pool; intra-op threads stay at 1
    torch.set_num_threads(1)
    try:
        config = _apply_resolution(args, load_config(args.config, _overrides(args)))
        return COMMANDS[args.command](args, config)
    except CCHError as e:
        pretty_log("error", str(e), label=args.command, include_trace=False)
        return 2
    except OSError as e:
        pretty_log("error", f"{e}", label=args.command, include_trace=False)
        return 2
    except Exception as e:
        pretty_log("critical", f"unexpected failure: {e!r}", label=args.command)
        return 2


if __name__ == "__main__":
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        pretty_log("info", "Shutting down...")
        sys.exit(2)
