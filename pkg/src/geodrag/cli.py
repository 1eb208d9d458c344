"""``geodrag`` command line: project, drag, bench, plot, synth.

Exit codes: 0 success, 2 input/validation error, 3 runtime drag error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evalharness as ev
from .latentio import ContainerError, read_latent, write_latent
from .optimizer import DragConfig, DragError
from .plot import LogFormatError, read_log, render_svg, write_log
from .scene3d import SceneError, load_scene, render_wireframe


class InputError(Exception):
    """Bad user input; exit code 2."""


def _config_epilog() -> str:
    lines = ["config keys (set with --config FILE and/or --set key=value):"]
    defaults = DragConfig().to_dict()
    lines += [f"  {k:<18} default: {json.dumps(defaults[k])}" for k in DragConfig.keys()]
    return "\n".join(lines)


def build_config(config_path=None, overrides=(), seed=None) -> DragConfig:
    d = {}
    if config_path:
        try:
            d = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{config_path}: {exc}") from None
        if not isinstance(d, dict):
            raise InputError(f"{config_path}: config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        d[k.strip()] = v.strip()
    if seed is not None:
        d["seed"] = seed
    try:
        return DragConfig.from_dict(d)
    except (KeyError, ValueError) as exc:
        raise InputError(f"config: {exc.args[0]}") from None


def cmd_project(args) -> int:
    try:
        scene = load_scene(args.scene)
        pairs = scene.pairs()
    except SceneError as exc:
        raise InputError(str(exc)) from None
    pose, s = scene.pose, scene.latent_scale
    instr = ev.DragInstruction(pose.width, pose.height, pose.width // s, pose.height // s,
                               [list(p.source) for p in pairs], [list(p.target) for p in pairs],
                               tags={"scene": Path(args.scene).name, "keypoints": [p.name for p in pairs],
                                     "gamma": scene.gamma})
    ev.save_instruction(args.out, instr)
    for p in pairs:
        print(f"{p.name}: ({p.source[0]:.3f}, {p.source[1]:.3f}) -> ({p.target[0]:.3f}, {p.target[1]:.3f})")
    if args.wireframe:
        ev.write_pgm(args.wireframe, render_wireframe(scene.obj, pose))
    return 0


def cmd_drag(args) -> int:
    cfg = build_config(args.config, args.set, args.seed)
    try:
        z = read_latent(args.latent)
        instr = ev.load_instruction(args.instruction, check_bounds=False)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {exc.filename}") from None
    except (ContainerError, ev.InstructionError, ValueError) as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = instr.latent_points()
    md_before = ev.mean_distance(src, tgt, instr.scale)
    try:
        res = ev.drag_instruction(z, instr, cfg)
    except DragError as exc:
        write_log(out / "trajectory.jsonl", exc.log)
        print(f"drag failed: {exc}", file=sys.stderr)
        return 3
    except ev.InstructionError as exc:
        raise InputError(str(exc)) from None
    write_latent(out / "latent.bin", res.latent)
    write_log(out / "trajectory.jsonl", res.log)
    summary = {"md_before": md_before,
               "md_drag": ev.mean_distance(res.drag_points, tgt, instr.scale),
               "md_after": ev.mean_distance(res.final_points, tgt, instr.scale),
               "final_points": (res.final_points * instr.scale).tolist(),
               "config": cfg.to_dict(), "config_hash": cfg.digest()}
    summary["md_after_512"] = ev.normalize_md(summary["md_after"], instr.image_w, instr.image_h)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"md_before={md_before:.3f} md_drag={summary['md_drag']:.3f} md_after={summary['md_after']:.3f}")
    return 0


def load_suite(path):
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"suite file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise InputError("suite must be a JSON object")
    try:
        if "generate" in d:
            g = d["generate"]
            cases = ev.default_suite(int(g.get("count", 20)), int(g.get("seed", 0)))
        else:
            cases = [ev.SyntheticSpec.from_dict(c) for c in d["cases"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"suite: {exc!r}") from None
    if not cases:
        raise InputError("suite has no cases")
    ids = [c.case_id for c in cases]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise InputError(f"duplicate case ids: {dup}")
    variants = d.get("variants") or ["full"]
    bad = [v for v in variants if v not in ev.VARIANTS]
    if bad:
        raise InputError(f"unknown variants {bad}; choose from {sorted(ev.VARIANTS)}")
    return cases, variants, d.get("config", {})


def cmd_bench(args) -> int:
    cases, variants, suite_cfg = load_suite(args.suite)
    base = build_config(args.config, args.set, args.seed)
    try:
        cfg = base.replace(**suite_cfg) if suite_cfg else base
    except (TypeError, ValueError) as exc:
        raise InputError(f"suite config: {exc}") from None
    report = ev.run_benchmark(cases, cfg, variants, workers=args.workers)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for v, agg in report["aggregate"].items():
        print(f"{v:<22} mean MD {agg['mean_md']:.3f}  median MD {agg['median_md']:.3f}  "
              f"failures {agg['failures']}/{agg['cases']}")
    return 0


def cmd_plot(args) -> int:
    try:
        records = read_log(args.log)
    except FileNotFoundError:
        raise InputError(f"log file not found: {args.log}") from None
    except LogFormatError as exc:
        raise InputError(f"{args.log}: {exc}") from None
    Path(args.out).write_text(render_svg(records))
    return 0


def cmd_synth(args) -> int:
    drags = [tuple(float(v) for v in d.split(",")) for d in args.drag] if args.drag else None
    centers = [tuple(float(v) for v in c.split(",")) for c in args.center] if args.center else None
    try:
        spec = ev.SyntheticSpec(grid=(args.size, args.size, args.channels),
                                blobs=len(drags) if drags else args.blobs, sigma=args.sigma,
                                drags=drags, centers=centers, seed=args.seed, case_id=args.id)
        case = ev.generate_synthetic_case(spec)
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_latent(out / "latent.bin", case.latent)
    write_latent(out / "truth.bin", case.truth)
    ev.save_instruction(out / "instruction.json", case.instruction)
    print(f"wrote {out}/latent.bin, truth.bin, instruction.json")
    return 0


def make_parser() -> argparse.ArgumentParser:
    epilog = _config_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    ap = argparse.ArgumentParser(prog="geodrag", description=__doc__, epilog=epilog, formatter_class=fmt)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    def config_flags(p):
        p.add_argument("--config", help="JSON file with DragConfig fields")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")

    p = add("project", cmd_project, "project scene keypoints into a drag instruction")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--wireframe", help="also write a PGM wireframe raster here")

    p = add("drag", cmd_drag, "run the drag on a latent container")
    p.add_argument("latent")
    p.add_argument("instruction")
    p.add_argument("--out", required=True, help="output directory")
    config_flags(p)

    p = add("bench", cmd_bench, "run a synthetic benchmark suite")
    p.add_argument("suite")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    config_flags(p)

    p = add("plot", cmd_plot, "render a trajectory log as SVG")
    p.add_argument("log")
    p.add_argument("--out", required=True)

    p = add("synth", cmd_synth, "write a synthetic blob case")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--blobs", type=int, default=1)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--drag", action="append", metavar="DX,DY")
    p.add_argument("--center", action="append", metavar="X,Y")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--id", default="synth")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
