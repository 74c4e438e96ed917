"""Command-line entry point: scene generation, rendering, localization, experiments, reports."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .geometry import Pose, StereoRig
from .harness import ExperimentConfig, WAVE_STEPS, load_results, quantize_image, report_tables, \
    run_experiment, step_size_sweep, sweep_csv
from .localize import VtsmConfig, localize, multi_seed_localize
from .renderer import load_png, save_depth, save_png
from .scenegen import TerrainSpec, build_scene, load_scene, render_query_pair, save_scene, \
    shading_from

log = logging.getLogger("vtsm")

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _rig(path) -> StereoRig:
    return StereoRig.from_dict(_read_json(path)) if path else StereoRig.desk()


def cmd_generate_scene(args) -> int:
    doc = _read_json(args.spec)
    mapping = doc.pop("mapping", "am")
    degrade = doc.pop("degrade", 1.0)
    scene = build_scene(TerrainSpec.from_dict(doc), mapping, degrade)
    save_scene(scene, args.out)
    log.info("scene written to %s (%d triangles, %d in mask)", args.out,
             scene.map_mesh.n_triangles, len(scene.mask.triangles))
    return EXIT_OK


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    pose = Pose.from_dict(_read_json(args.pose))
    shading = shading_from(_read_json(args.shading)) if args.shading else None
    rig = _rig(args.rig)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = scene.map_mesh if args.map else scene.truth
    frames = render_query_pair(mesh, rig, pose, shading)
    for f in frames:
        save_png(quantize_image(f.intensity), out / f"{f.side}.png")
        save_depth(f.depth, out / f"{f.side}_depth.f32")
    _write_json(out / "pose.json", pose.to_dict())
    _write_json(out / "rig.json", rig.to_dict())
    return EXIT_OK


def cmd_localize(args) -> int:
    scene = load_scene(args.scene)
    qdir = Path(args.query)
    left, right = load_png(qdir / "left.png"), load_png(qdir / "right.png")
    rig = _rig(args.rig or (qdir / "rig.json" if (qdir / "rig.json").exists() else None))
    guess = Pose.from_dict(_read_json(args.guess))
    cfg = VtsmConfig.from_dict(_read_json(args.config)) if args.config else VtsmConfig()
    if args.seed is not None:
        cfg = VtsmConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.multi_seed:
        out = multi_seed_localize((left, right), scene.map_mesh, scene.mask, rig, guess,
                                  args.wide_bound, args.n_seeds, cfg, args.screen_attempts)
    else:
        out = localize((left, right), scene.map_mesh, scene.mask, rig, guess, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(out.to_json() + "\n")
    log.info("%s after %d attempts (%.1f s)", out.status if out.success else out.code,
             out.total_attempts, out.duration)
    return EXIT_OK if out.success else EXIT_FAILED


def cmd_experiment(args) -> int:
    doc = _read_json(args.config)
    steps = doc.pop("step_sizes", None)
    cfg = ExperimentConfig.from_dict(doc)
    if steps is not None:
        step_size_sweep(cfg, steps or WAVE_STEPS, args.out, log.info)
    else:
        cells = run_experiment(cfg, args.out, log.info)
        report_tables(cells, Path(args.out) / "tables")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    if (src / "results.json").exists() or src.is_file():
        report_tables(load_results(src), args.out)
        return EXIT_OK
    steps = sorted(p for p in src.glob("step_*") if (p / "results.json").exists())
    if not steps:
        raise UsageError(f"no results found in {src}")
    rows = [(float(p.name[5:]), load_results(p)) for p in steps]
    rows.sort(key=lambda r: r[0])
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.csv").write_text(sweep_csv(rows))
    report_tables([c for _, cells in rows for c in cells], args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtsm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scene", help="generate a depot scene")
    g.add_argument("--spec", required=True, help="terrain spec JSON")
    g.add_argument("--out", required=True, help="scene directory")
    g.set_defaults(func=cmd_generate_scene)

    r = sub.add_parser("render", help="render a query stereo pair")
    r.add_argument("--scene", required=True)
    r.add_argument("--pose", required=True, help="camera pose JSON (camera -> world)")
    r.add_argument("--shading", help="shading JSON; omit for the unshaded texture")
    r.add_argument("--rig", help="stereo rig JSON (default: desk rig)")
    r.add_argument("--map", action="store_true", help="render the map mesh instead of the albedo")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    loc = sub.add_parser("localize", help="relocalize a query pair against a scene")
    loc.add_argument("--scene", required=True)
    loc.add_argument("--query", required=True, help="directory with left.png and right.png")
    loc.add_argument("--guess", required=True, help="initial pose JSON")
    loc.add_argument("--config", help="VTSM config JSON")
    loc.add_argument("--rig")
    loc.add_argument("--seed", type=int)
    loc.add_argument("--multi-seed", action="store_true")
    loc.add_argument("--wide-bound", type=float, default=0.50)
    loc.add_argument("--n-seeds", type=int, default=100)
    loc.add_argument("--screen-attempts", type=int, default=20)
    loc.add_argument("--out", required=True)
    loc.set_defaults(func=cmd_localize)

    e = sub.add_parser("experiment", help="run an experiment config")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_experiment)

    rep = sub.add_parser("report", help="tables from persisted results")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, OSError, ValueError, KeyError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
