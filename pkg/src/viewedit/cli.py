"""Command-line entry point: ``viewedit <command> [options]``.

Settings are resolved as built-in defaults, then ``--config`` file, then
command-line flags.  Exit codes: 0 success, 2 configuration or input error,
3 numeric failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import pipeline
from .config import PipelineConfig, merge_overrides
from .edit import parse_edit_spec
from .errors import NotFound, NumericFailure, ViewEditError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

log = logging.getLogger("viewedit")

# flag -> (config key suffix, type); the section prefix depends on the command
_INVERSION_FLAGS = {
    "--num-steps": ("num_steps", int),
    "--init-num-steps": ("init_num_steps", int),
    "--learning-rate": ("learning_rate", float),
    "--loss-threshold": ("loss_threshold", float),
    "--weight-l1": ("weight_l1", float),
    "--weight-face": ("weight_face", float),
    "--weight-lpips": ("weight_lpips", float),
    "--weight-wdist": ("weight_wdist", float),
    "--weight-wdist-target": ("weight_wdist_target", float),
}
_TUNE_FLAGS = {
    "--tune-num-steps": ("tune.num_steps", int),
    "--tune-learning-rate": ("tune.learning_rate", float),
}
_FLOW_FLAGS = {
    "--pyr-scale": ("flow.pyr_scale", float),
    "--levels": ("flow.levels", int),
    "--winsize": ("flow.winsize", int),
    "--iterations": ("flow.iterations", int),
    "--poly-n": ("flow.poly_n", int),
    "--poly-sigma": ("flow.poly_sigma", float),
    "--eps": ("flow.eps", float),
    "--bins": ("flow.bins", int),
    "--flow-smooth-sigma": ("flow.smooth_sigma", float),
}
_COMPOSITE_FLAGS = {
    "--border-size": ("composite.border_size", int),
    "--edge-size": ("composite.edge_size", int),
    "--border-loss-threshold": ("composite.border_loss_threshold", float),
    "--inset-num-steps": ("composite.num_steps", int),
    "--inset-learning-rate": ("composite.learning_rate", float),
}
_PATH_FLAGS = {
    "--frames": ("paths.frames", str),
    "--keypoints": ("paths.keypoints", str),
    "--artifacts": ("paths.artifacts", str),
    "--reference": ("paths.reference", str),
    "--direction": ("paths.direction", str),
}


def _dest(flag: str) -> str:
    return "opt_" + flag.lstrip("-").replace("-", "_")


def _add(p: argparse.ArgumentParser, table: Dict[str, tuple], prefix: str = "") -> Dict[str, str]:
    mapping = {}
    for flag, (key, typ) in table.items():
        p.add_argument(flag, type=typ, dest=_dest(flag), default=None, metavar=typ.__name__.upper())
        mapping[_dest(flag)] = prefix + key
    return mapping


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    mappings: Dict[str, Dict[str, str]] = {}

    def common(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed")
        p.add_argument("--out", type=Path, help="work directory (artifacts in OUT/artifacts, outputs in OUT)")
        p.add_argument("--verbose", "-v", action="store_true", help="log progress and write debug dumps")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="generic override, e.g. --set video.num_steps=20")
        mappings[name] = _add(p, _PATH_FLAGS)
        return p

    p = common("personalize", "joint inversion of selected faces and generator fine-tuning")
    p.add_argument("--faces", type=str, help="comma-separated frame indices to personalize on")
    mappings["personalize"].update(_add(p, _INVERSION_FLAGS, "joint."))
    mappings["personalize"].update(_add(p, _TUNE_FLAGS))

    p = common("invert-video", "frame-by-frame inversion of the aligned video")
    mappings["invert-video"].update(_add(p, _INVERSION_FLAGS, "video."))

    p = common("edit-composite", "render the edit and composite it into the frames")
    p.add_argument("--edit", type=str, help="attribute edit, e.g. 'attr=smile,alpha=1.5'")
    p.add_argument("--trajectory", type=str, help="camera path, e.g. 'orbit,yaw=0.3'")
    p.add_argument("--view-offset", type=float, nargs=2, metavar=("YAW", "PITCH"))
    p.add_argument("--driving", type=str, help="artifacts directory of a driving video (retargeting)")
    p.add_argument("--no-flow", action="store_true", help="disable flow correction")
    mappings["edit-composite"].update(_add(p, _FLOW_FLAGS))
    mappings["edit-composite"].update(_add(p, _COMPOSITE_FLAGS))

    common("evaluate", "metrics of output frames against reference frames")

    p = common("ablate", "full pipeline and four ablations on a planted toy scene")
    p.add_argument("--num-frames", type=int, dest="opt_num_frames")
    p.add_argument("--novel-yaw", type=float, dest="opt_novel_yaw")
    mappings["ablate"].update({"opt_num_frames": "scene.num_frames", "opt_novel_yaw": "ablation.novel_yaw"})

    p = common("make-scene", "write a planted toy scene (frames, keypoints, ground truth)")
    p.add_argument("--num-frames", type=int, dest="opt_num_frames")
    p.add_argument("--novel-yaw", type=float, default=0.0, help="also write a yaw-shifted ground-truth view")
    mappings["make-scene"].update({"opt_num_frames": "scene.num_frames"})

    parser.set_defaults(_mappings=mappings)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """defaults < config file < command-line flags."""
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides: Dict[str, object] = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["paths.artifacts"] = str(args.out / "artifacts")
        overrides["paths.output"] = str(args.out)
    for dest, key in args._mappings[args.command].items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if args.verbose:
        overrides["debug"] = True
    if args.command == "personalize" and args.faces:
        overrides["personalize.frames"] = [int(x) for x in args.faces.split(",") if x.strip()]
    if args.command == "edit-composite":
        if args.edit:
            spec = parse_edit_spec(args.edit)
            overrides["edit.attr"] = spec["attr"]
            overrides["edit.alpha"] = spec["alpha"]
        if args.trajectory:
            overrides["edit.trajectory"] = args.trajectory
        if args.view_offset:
            overrides["edit.view_offset"] = list(args.view_offset)
        if args.driving:
            overrides["paths.driving"] = args.driving
        if args.no_flow:
            overrides["flow.enabled"] = False
    return merge_overrides(cfg, overrides).validate()


COMMANDS = {
    "personalize": pipeline.cmd_personalize,
    "invert-video": pipeline.cmd_invert_video,
    "edit-composite": pipeline.cmd_edit_composite,
    "evaluate": pipeline.cmd_evaluate,
    "ablate": pipeline.cmd_ablate,
}


def _run(args, cfg: PipelineConfig) -> None:
    if args.command == "make-scene":
        out = pipeline.cmd_make_scene(cfg, novel_yaw=args.novel_yaw)
        print(f"scene written to {out}")
        return
    result = COMMANDS[args.command](cfg)
    if args.command == "evaluate":
        print(json.dumps(result.aggregate(), indent=1))
    elif args.command == "ablate":
        print(result.table())
    else:
        for name, path in result.items():
            print(f"{name}: {path}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except NotFound as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ViewEditError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _run(args, cfg)
    except NotFound as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ViewEditError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
