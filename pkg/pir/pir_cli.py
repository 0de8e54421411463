#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""pir command-line entrypoint."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, Optional

from pir.app_identity import APP_NAME, get_app_version
from pir.core.config import SceneConfig, load_scene_config
from pir.core.errors import PirError
from pir.core.logger import console_error, console_info, set_quiet
from pir.scenegen.dataset import FEATURE_DIM, generate_dataset
from pir.scenegen.presets import get_preset, preset_names
from pir.training.train_manager import TrainingManager

APP_VERSION = get_app_version()

# training subcommand -> (stage, schedule key that --iters overrides)
STAGE_COMMANDS = {
    "init": ("init", "schedule.init_iters"),
    "distill": ("distill", "schedule.distill_iters"),
    "optimize": ("pbr", "schedule.pbr_iters"),
}


def _absolute(value: Optional[str]) -> Optional[str]:
    return None if value is None else str(Path(value).expanduser().resolve())


def load_config(args: argparse.Namespace) -> SceneConfig:
    """Scene config from ``--config`` with the command-line overrides applied."""
    config = load_scene_config(args.config)
    overrides: Dict[str, Any] = {
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "output_dir": _absolute(getattr(args, "output_dir", None)),
        "dataset.path": _absolute(getattr(args, "dataset", None)),
        "schedule.rays_per_batch": getattr(args, "rays", None),
        "schedule.samples_per_ray": getattr(args, "samples", None),
    }
    if args.command in STAGE_COMMANDS:
        overrides[STAGE_COMMANDS[args.command][1]] = getattr(args, "iters", None)
    return config.with_overrides(overrides)


def _manager(args: argparse.Namespace) -> TrainingManager:
    return TrainingManager(load_config(args))


def run_scenegen(args: argparse.Namespace) -> int:
    if args.list:
        for name in preset_names():
            print(f"{name}\t{get_preset(name).description}")
        return 0
    if not args.preset or not args.out:
        raise PirError("scenegen needs --preset and --out (or --list)")
    preset = get_preset(args.preset)
    dataset = generate_dataset(
        preset,
        views=args.views if args.views is not None else preset.views,
        resolution=args.resolution if args.resolution is not None else preset.resolution,
        spp=args.spp,
        out_dir=args.out,
        seed=args.seed if args.seed is not None else 0,
        feature_dim=args.feature_dim,
    )
    console_info(f"[scenegen] dataset ready: {dataset.root} ({len(dataset)} views)")
    return 0


def run_stage(args: argparse.Namespace) -> int:
    stage = STAGE_COMMANDS[args.command][0]
    summary = _manager(args).run_stage(stage, force=args.force)
    if args.json:
        print(json.dumps(summary, ensure_ascii=False, indent=2))
    return 0


def run_train(args: argparse.Namespace) -> int:
    summaries = _manager(args).run_pipeline(force=args.force)
    if args.json:
        print(json.dumps(summaries, ensure_ascii=False, indent=2))
    return 0


def run_render(args: argparse.Namespace) -> int:
    written = _manager(args).render_outputs(views=args.view, stage=args.stage)
    for path in written:
        print(path)
    return 0


def run_eval(args: argparse.Namespace) -> int:
    report = _manager(args).evaluate(views=args.view, stage=args.stage)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def run_export_mesh(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else None
    path = _manager(args).export_mesh(out, resolution=args.resolution, stage=args.stage)
    print(path)
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="scene config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help="torch intra-op thread count (0 keeps the default)")
    parser.add_argument("--output-dir", dest="output_dir", help="override output_dir")
    parser.add_argument("--dataset", help="override dataset.path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description="photometric inverse rendering toolkit")
    parser.add_argument("--quiet", action="store_true", help="only print warnings, errors and command output")
    subparsers = parser.add_subparsers(dest="command")

    scenegen_parser = subparsers.add_parser("scenegen", help="render a synthetic dataset from a preset")
    scenegen_parser.add_argument("--preset", help="preset name")
    scenegen_parser.add_argument("--views", type=int, help="number of views (preset default)")
    scenegen_parser.add_argument("--resolution", type=int, help="square image size (preset default)")
    scenegen_parser.add_argument("--spp", type=int, default=64, help="hemisphere samples per pixel for inter-reflection")
    scenegen_parser.add_argument("--out", help="output directory")
    scenegen_parser.add_argument("--seed", type=int, help="generator seed")
    scenegen_parser.add_argument("--feature-dim", dest="feature_dim", type=int, default=FEATURE_DIM, help="feature map channels")
    scenegen_parser.add_argument("--list", action="store_true", help="list presets and exit")

    for command, help_text in (
        ("init", "fit geometry by volume rendering, then warm-start the diffuse albedo"),
        ("distill", "distill surface features and freeze the feature field"),
        ("optimize", "joint physically based optimisation"),
    ):
        stage_parser = subparsers.add_parser(command, help=help_text)
        _add_config_flags(stage_parser)
        stage_parser.add_argument("--force", action="store_true", help="rerun even if the stage is up to date")
        stage_parser.add_argument("--iters", type=int, help="override this stage's iteration count")
        stage_parser.add_argument("--rays", type=int, help="override schedule.rays_per_batch")
        stage_parser.add_argument("--samples", type=int, help="override schedule.samples_per_ray")
        stage_parser.add_argument("--json", action="store_true", help="print the stage summary as JSON")

    train_parser = subparsers.add_parser("train", help="run init, distill and optimize in order")
    _add_config_flags(train_parser)
    train_parser.add_argument("--force", action="store_true", help="rerun every stage")
    train_parser.add_argument("--json", action="store_true", help="print the stage summaries as JSON")

    render_parser = subparsers.add_parser("render", help="write RGB and material maps for dataset views")
    _add_config_flags(render_parser)
    render_parser.add_argument("--view", type=int, action="append", help="view index (repeatable; all views by default)")
    render_parser.add_argument("--stage", choices=("init", "distill", "pbr"), help="checkpoint to use (latest by default)")

    eval_parser = subparsers.add_parser("eval", help="print image and material metrics as JSON")
    _add_config_flags(eval_parser)
    eval_parser.add_argument("--view", type=int, action="append", help="view index (repeatable; all views by default)")
    eval_parser.add_argument("--stage", choices=("init", "distill", "pbr"), help="checkpoint to use (latest by default)")

    mesh_parser = subparsers.add_parser("export-mesh", help="marching-cubes mesh of the SDF as OBJ")
    _add_config_flags(mesh_parser)
    mesh_parser.add_argument("--resolution", type=int, default=128, help="grid resolution per axis")
    mesh_parser.add_argument("--out", help="OBJ path (default <output_dir>/mesh.obj)")
    mesh_parser.add_argument("--stage", choices=("init", "distill", "pbr"), help="checkpoint to use (latest by default)")

    subparsers.add_parser("version", help="print the version")
    return parser


_HANDLERS = {
    "scenegen": run_scenegen,
    "init": run_stage,
    "distill": run_stage,
    "optimize": run_stage,
    "train": run_train,
    "render": run_render,
    "eval": run_eval,
    "export-mesh": run_export_mesh,
}


def main(argv: Optional[list[str]] = None) -> int:
    raw_args = list(argv if argv is not None else sys.argv[1:])
    parser = build_parser()
    try:
        args = parser.parse_args(raw_args)
    except SystemExit as exc:
        return int(exc.code or 0)
    set_quiet(args.quiet)

    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    if args.command == "version":
        print(APP_VERSION)
        return 0
    try:
        return _HANDLERS[args.command](args)
    except (PirError, FileNotFoundError, KeyError, IndexError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        console_error(f"pir {args.command}: {message}")
        return 1
    except KeyboardInterrupt:
        console_error("interrupted")
        return 130
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
