"""Experiment runner: terrain x lighting grids, multi-seed recovery and step-size sweeps.

Every trial is persisted as its own JSON record (keyed by a hash of the
experiment config) so interrupted runs resume where they stopped, and every
reported number is a fold over those records. Wall-clock timings go to a
separate log so that result files are byte-identical across reruns.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Pose, StereoRig, compose, pose_error, rotation_angle, \
    rotation_from_axis_angle, random_unit_vector
from .localize import VtsmConfig, localize, multi_seed_localize
from .scenegen import TIME_DIFFERENCE, Scene, TerrainSpec, build_scene, jitter_pose, \
    perturb_mutable, preset, render_query_pair, ring_viewpoints, sun

WAVE_STEPS = (0.4, 0.8, 1.5, 2.0)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    terrains: tuple = ("flagstone", "cfa6", "cfa2")
    mapping: str = "am"
    time_differences: tuple = ("0h", "3h", "6h")
    trials: int = 10
    ring_count: int = 5
    ring_radius: float = 2.5
    ring_height: float = 2.0
    pitch_deg: float = 45.0
    # query traverse offset from the mapping traverse (metres, yaw degrees)
    traverse_offset: float = 0.3
    traverse_yaw: float = 10.0
    same_time_offset: float = 0.0
    init_t_min: float = 0.10
    init_t_max: float = 0.20
    init_r_max: float = 1.5
    mode: str = "localize"
    wide_bound: float = 0.50
    n_seeds: int = 100
    screen_attempts: int | None = 20
    degrade: float = 1.0
    mutable_change: float = 0.0
    baseline: float = 0.40
    vtsm: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if min(self.init_t_min, self.init_t_max, self.init_r_max) < 0 \
                or self.init_t_min > self.init_t_max:
            raise ValueError("invalid initial perturbation range")
        if self.mode not in ("localize", "multi_seed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for td in self.time_differences:
            if td not in TIME_DIFFERENCE:
                raise ValueError(f"unknown time difference {td!r}")
        object.__setattr__(self, "terrains", tuple(self.terrains))
        object.__setattr__(self, "time_differences", tuple(self.time_differences))
        VtsmConfig.from_dict(self.vtsm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terrains"] = [t if isinstance(t, str) else dict(t) for t in self.terrains]
        d["time_differences"] = list(self.time_differences)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown experiment keys: {sorted(extra)}")
        d = dict(d)
        if "terrains" in d:
            d["terrains"] = tuple(t if isinstance(t, str) else _Frozen(t) for t in d["terrains"])
        return cls(**d)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def vtsm_config(self, seed: int) -> VtsmConfig:
        return VtsmConfig.from_dict({**self.vtsm, "seed": seed})

    def terrain_spec(self, i: int) -> TerrainSpec:
        t = self.terrains[i]
        return preset(t) if isinstance(t, str) else TerrainSpec.from_dict(dict(t))

    def terrain_label(self, i: int) -> str:
        t = self.terrains[i]
        return t if isinstance(t, str) else dict(t).get("kind", f"terrain{i}")

    def cells(self):
        """(cell index, terrain index, time difference) in a fixed order."""
        k = 0
        for i in range(len(self.terrains)):
            for td in self.time_differences:
                yield k, i, td
                k += 1


class _Frozen(dict):
    """Hashable dict so terrain overrides can live in a frozen dataclass."""

    def __hash__(self):
        return hash(json.dumps(self, sort_keys=True))


@dataclass
class CellResult:
    key: str
    terrain: str
    time_difference: str
    records: list

    @property
    def trials(self) -> int:
        return len(self.records)

    @property
    def successes(self) -> int:
        return sum(r["status"] == "success" for r in self.records)

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    def _ok(self, name):
        return np.array([r[name] for r in self.records if r["status"] == "success"], dtype=float)

    @property
    def init_mean_mm(self) -> float:
        v = self._ok("init_error_m")
        return float(1e3 * v.mean()) if len(v) else float("nan")

    @property
    def final_mean_mm(self) -> float:
        v = self._ok("final_error_m")
        return float(1e3 * v.mean()) if len(v) else float("nan")

    @property
    def final_median_mm(self) -> float:
        v = self._ok("final_error_m")
        return float(1e3 * np.median(v)) if len(v) else float("nan")

    @property
    def final_rotation_deg(self) -> float:
        v = self._ok("final_error_deg")
        return float(v.mean()) if len(v) else float("nan")

    def summary(self) -> dict:
        return {"cell": self.key, "terrain": self.terrain, "time_difference": self.time_difference,
                "trials": self.trials, "successes": self.successes,
                "success_rate": self.success_rate, "error_init_mm": self.init_mean_mm,
                "error_end_mm": self.final_mean_mm, "error_end_median_mm": self.final_median_mm,
                "rotation_end_deg": self.final_rotation_deg}


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def initial_guess(truth: Pose, t_min: float, t_max: float, r_max: float,
                  rng: np.random.Generator) -> Pose:
    """``truth`` displaced by t_min..t_max metres in a random direction and up to r_max degrees."""
    t = rng.uniform(t_min, t_max) * random_unit_vector(rng)
    rot = rotation_from_axis_angle(random_unit_vector(rng), np.radians(rng.uniform(0.0, r_max)))
    frame = truth.frame_to
    return compose(truth, Pose(rot, t, frame, frame))


def quantize_image(img: np.ndarray) -> np.ndarray:
    """8-bit camera quantization, identical to a PNG round trip."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


class _Workspace:
    """Lazily built scenes, mapping traverses and query pairs shared by the trials of a run."""

    def __init__(self, config: ExperimentConfig):
        self.cfg = config
        self.rig = StereoRig.desk(config.baseline)
        self._scenes: dict = {}
        self._queries: dict = {}

    def scene(self, ti: int) -> Scene:
        if ti not in self._scenes:
            self._scenes[ti] = build_scene(self.cfg.terrain_spec(ti), self.cfg.mapping,
                                           self.cfg.degrade)
        return self._scenes[ti]

    def mapping_views(self, ti: int) -> list[Pose]:
        c = self.cfg
        return ring_viewpoints(self.scene(ti).truth, c.ring_count, c.ring_radius, c.ring_height,
                               c.pitch_deg)

    def query(self, cell: int, ti: int, td: str, view: int):
        key = (cell, view)
        if key not in self._queries:
            c = self.cfg
            scene = self.scene(ti)
            base = self.mapping_views(ti)[view]
            offset = c.same_time_offset if td == "0h" else c.traverse_offset
            yaw = 0.0 if td == "0h" else c.traverse_yaw
            rng = np.random.default_rng(np.random.SeedSequence([c.seed, cell, 1_000_000 + view]))
            truth = jitter_pose(base, offset, yaw, rng) if offset > 0 or yaw > 0 else base
            mesh = scene.truth
            if c.mutable_change > 0:
                mesh = perturb_mutable(mesh, c.mutable_change, rng)
            left, right = render_query_pair(mesh, self.rig, truth, sun(TIME_DIFFERENCE[td]))
            # only the current cell's renders are kept
            self._queries = {k: v for k, v in self._queries.items() if k[0] == cell}
            self._queries[key] = (truth, quantize_image(left.intensity),
                                  quantize_image(right.intensity))
        return self._queries[key]


def _nearest_mapping(truth: Pose, views: list[Pose]) -> tuple[float, float]:
    d = [np.linalg.norm(truth.translation - v.translation) for v in views]
    i = int(np.argmin(d))
    ang = np.degrees(rotation_angle(views[i].rotation.T @ truth.rotation))
    return float(d[i]), float(ang)


def run_trial(ws: _Workspace, cell: int, ti: int, td: str, trial: int) -> tuple[dict, float]:
    c = ws.cfg
    ss = np.random.SeedSequence([c.seed, cell, trial])
    guess_ss, loc_ss = ss.spawn(2)
    vseed = int(loc_ss.generate_state(1)[0])
    view = trial % c.ring_count
    truth, left, right = ws.query(cell, ti, td, view)
    guess = initial_guess(truth, c.init_t_min, c.init_t_max, c.init_r_max,
                          np.random.default_rng(guess_ss))
    scene = ws.scene(ti)
    vcfg = c.vtsm_config(vseed)
    t0 = time.perf_counter()
    if c.mode == "multi_seed":
        out = multi_seed_localize((left, right), scene.map_mesh, scene.mask, ws.rig, guess,
                                  c.wide_bound, c.n_seeds, vcfg, c.screen_attempts)
    else:
        out = localize((left, right), scene.map_mesh, scene.mask, ws.rig, guess, vcfg)
    runtime = time.perf_counter() - t0
    dist, ang = _nearest_mapping(truth, ws.mapping_views(ti))
    it, ir = pose_error(truth, guess)
    ft, fr = pose_error(truth, out.pose)
    rec = {"cell": cell, "terrain": c.terrain_label(ti), "time_difference": td, "trial": trial,
           "seed": vseed, "viewpoint": view, "status": out.status, "code": out.code,
           "iterations": len(out.trace), "total_attempts": out.total_attempts,
           "init_error_m": it, "init_error_deg": ir, "final_error_m": ft, "final_error_deg": fr,
           "map_distance_m": dist, "map_angle_deg": ang, "truth": truth.to_dict(),
           "guess": guess.to_dict(), "estimate": out.pose.to_dict(),
           "inliers": [r.inliers for r in out.trace]}
    return rec, runtime


def _cell_key(label: str, td: str) -> str:
    return f"{label}-{td}"


def run_experiment(config: ExperimentConfig, out_dir=None, log=None) -> list[CellResult]:
    """Run (or resume) every trial of every cell; returns the per-cell results.

    With ``out_dir`` set, trial records land in ``out_dir/trials`` and the
    folded results in ``out_dir/results.json``; timings are appended to
    ``out_dir/timings.log``.
    """
    ws = _Workspace(config)
    h = config.config_hash
    tdir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        tdir = out_dir / "trials"
        tdir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2,
                                                        sort_keys=True) + "\n")
    cells = []
    for cell, ti, td in config.cells():
        label = config.terrain_label(ti)
        key = _cell_key(label, td)
        records = []
        for trial in range(config.trials):
            path = None if tdir is None else tdir / f"{key}__{trial:03d}.json"
            if path is not None and path.exists():
                saved = json.loads(path.read_text())
                if saved.get("config_hash") == h:
                    records.append(saved["record"])
                    continue
            rec, runtime = run_trial(ws, cell, ti, td, trial)
            records.append(rec)
            if path is not None:
                path.write_text(json.dumps({"config_hash": h, "record": rec}, indent=1,
                                           sort_keys=True) + "\n")
                with open(out_dir / "timings.log", "a") as fh:
                    fh.write(f"{key} {trial} {runtime:.2f}\n")
            if log is not None:
                log(f"{key} trial {trial}: {rec['status']} "
                    f"{1e3 * rec['init_error_m']:.1f} -> {1e3 * rec['final_error_m']:.1f} mm "
                    f"({runtime:.1f} s)")
        cells.append(CellResult(key, label, td, records))
    if out_dir is not None:
        write_results(cells, config, out_dir)
    return cells


def write_results(cells: list[CellResult], config: ExperimentConfig, out_dir):
    out_dir = Path(out_dir)
    doc = {"config": config.to_dict(), "config_hash": config.config_hash,
           "cells": [{"summary": c.summary(), "records": c.records} for c in cells]}
    (out_dir / "results.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_results(path) -> list[CellResult]:
    """Cells rebuilt from ``results.json`` (or a directory holding it); summaries are refolded."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    doc = json.loads(path.read_text())
    cells = []
    for c in doc["cells"]:
        s = c["summary"]
        cells.append(CellResult(s["cell"], s["terrain"], s["time_difference"], c["records"]))
    return cells


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("cell", "terrain", "time_difference", "trials", "successes", "success_rate",
               "error_init_mm", "error_end_mm", "error_end_median_mm", "rotation_end_deg")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.3f}"
    return str(x)


def cells_csv(cells: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in cells:
        s = c.summary()
        w.writerow([_fmt(s[k]) for k in CSV_COLUMNS])
    return buf.getvalue()


def _error_colour(err_mm: float, top: float = 150.0) -> str:
    a = min(max(err_mm / top, 0.0), 1.0)
    r, g = int(round(40 + 215 * a)), int(round(170 * (1.0 - a) + 40))
    return f"#{r:02x}{g:02x}50"


def scatter_svg(cells: list[CellResult], width: int = 520, height: int = 380) -> str:
    """Trials at (distance to nearest mapping viewpoint, angular difference), coloured by error.

    Failed trials are drawn as hollow black circles.
    """
    recs = [r for c in cells for r in c.records]
    xs = [r["map_distance_m"] for r in recs]
    ys = [r["map_angle_deg"] for r in recs]
    xmax = max(max(xs, default=0.0) * 1.1, 0.1)
    ymax = max(max(ys, default=0.0) * 1.1, 1.0)
    l, rpad, t, b = 60, 20, 30, 50
    pw, ph = width - l - rpad, height - t - b
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{l + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
           f'font-size="12">distance to nearest mapping viewpoint [m]</text>',
           f'<text x="16" y="{t + ph / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 16 {t + ph / 2:.1f})">angular difference [deg]</text>']
    for k in range(5):
        fx, fy = k / 4 * xmax, k / 4 * ymax
        px = l + k / 4 * pw
        py = t + ph - k / 4 * ph
        out.append(f'<text x="{px:.1f}" y="{t + ph + 16}" text-anchor="middle" '
                   f'font-size="10">{fx:.2f}</text>')
        out.append(f'<text x="{l - 6}" y="{py + 3:.1f}" text-anchor="end" '
                   f'font-size="10">{fy:.1f}</text>')
    for r, x, y in zip(recs, xs, ys):
        px = l + x / xmax * pw
        py = t + ph - y / ymax * ph
        if r["status"] == "success":
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" '
                       f'fill="{_error_colour(1e3 * r["final_error_m"])}" stroke="none"/>')
        else:
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" fill="none" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_tables(cells: list[CellResult], out_dir) -> tuple[Path, Path]:
    """Write ``cells.csv`` (one row per cell) and ``scatter.svg`` (one point per trial)."""
    if not cells:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out_dir / "cells.csv", out_dir / "scatter.svg"
    csv_path.write_text(cells_csv(cells))
    svg_path.write_text(scatter_svg(cells))
    return csv_path, svg_path


# ---------------------------------------------------------------------------
# Mapping step-size sweep
# ---------------------------------------------------------------------------

def step_config(config: ExperimentConfig, step: float, finest: float = WAVE_STEPS[0]):
    """Desk analog of mapping with images every ``step`` metres.

    The map degrades in proportion to the step (texture blur, smoothed
    geometry) and query viewpoints move up to half a step away from the
    mapping traverse.
    """
    return replace(config, name=f"{config.name}-step{step:g}", degrade=max(step / finest, 1.0),
                   traverse_offset=step / 2, same_time_offset=step / 2)


def step_size_sweep(config: ExperimentConfig, steps=WAVE_STEPS, out_dir=None, log=None):
    """Run one experiment per step size; returns [(step, cells)] and writes ``sweep.csv``."""
    rows = []
    for s in steps:
        sub = None if out_dir is None else Path(out_dir) / f"step_{s:g}"
        cells = run_experiment(step_config(config, s), sub, log)
        rows.append((s, cells))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(sweep_csv(rows))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step_m", "range_m", "trials", "successes", "success_rate", "error_end_mm"))
    for s, cells in rows:
        recs = [r for c in cells for r in c.records]
        ok = [r for r in recs if r["status"] == "success"]
        rng = max((r["map_distance_m"] for r in recs), default=0.0)
        err = float(1e3 * np.mean([r["final_error_m"] for r in ok])) if ok else float("nan")
        w.writerow([_fmt(float(s)), _fmt(float(rng)), len(recs), len(ok),
                    _fmt(len(ok) / len(recs) if recs else 0.0), _fmt(err)])
    return buf.getvalue()
