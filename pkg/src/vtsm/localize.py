"""The relocalization loop: viewpoint randomization, template matching, pose update.

The estimate is a ``Pose("world", "camera")`` mapping query left-camera
coordinates into the map frame. Each iteration collects correspondences by
rendering templates from viewpoints perturbed around the estimate and
matching them into the query pair, then replaces the estimate by the RANSAC
transform. Alignment failures are handled by Reseed (before the first
success) or Stall (after it); successes trigger Anneal and, when enabled,
Reuse and Distribute.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import Pose, SearchBounds, StereoRig, compose, pose_error, rotation_angle, \
    sample_perturbation
from .matcher import MatchError, MatchModality, compute_search_window, default_modalities, \
    match_stereo
from .meshmap import NoVisiblePointsError, SamplingMask, TexturedMesh, VisibleSampler
from .posesolve import AlignmentError, Correspondence, TriangulationError, ransac_align, \
    stereo_triangulate
from .renderer import synthesize_template

STALL_LIMIT = "stall-limit-exceeded"
RESEED_LIMIT = "reseed-limit-exceeded"
NO_VISIBLE = "no-visible-points"
BUDGET = "attempt-budget-exceeded"
FAILURE_CODES = (STALL_LIMIT, RESEED_LIMIT, NO_VISIBLE, BUDGET)

# consecutive draws without any visible mask vertex before an iteration gives up
EMPTY_DRAW_LIMIT = 25
SCREEN_MIN_INLIERS = 5


class StrategyLimitError(RuntimeError):
    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


@dataclass(frozen=True)
class VtsmConfig:
    n_correspondences: int = 100
    n_iterations: int = 5
    t0: float = 0.20
    r0: float = 1.5
    gamma: float = 0.5
    template_size: int = 128
    eps_u: float = 8.0
    convergence: float = 1e-3
    reuse_fraction: float = 0.5
    stall_limit: int = 3
    reseed_limit: int = 10
    reseed_t: float = 0.50
    reseed_r: float = 1.5
    distribute: bool = False
    seed: int = 0
    attempts_per_correspondence: int = 50
    total_attempt_budget: int | None = None
    inlier_threshold: float = 0.03
    ransac_iterations: int = 500
    min_inliers: int = 20
    s_min: float = 0.5
    # derivative images correlate less than raw intensity even at the true offset
    s_min_sobel: float = 0.25
    s_min_laplacian: float = 0.15
    f_min: float = 0.3
    window_margin: int = 16
    depth_tol: float = 1e-3
    edge_jump: float = 0.05
    edge_radius: int | None = None
    modalities: tuple | None = None
    planar_first: bool = True
    record_viewpoints: bool = False

    def __post_init__(self):
        if self.n_correspondences < 3:
            raise ValueError("n_correspondences must be at least 3")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.reuse_fraction < 1.0:
            raise ValueError("reuse_fraction must lie in [0, 1)")
        if self.n_iterations < 1 or self.template_size < 2:
            raise ValueError("n_iterations and template_size must be positive")
        for name in ("eps_u", "convergence", "inlier_threshold", "s_min", "s_min_sobel",
                     "s_min_laplacian", "f_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t0 < 0 or self.r0 < 0 or self.reseed_t < 0 or self.reseed_r < 0:
            raise ValueError("bounds must be non-negative")
        if self.modalities is not None:
            mods = tuple(m if isinstance(m, MatchModality) else MatchModality(**m)
                         for m in self.modalities)
            for m in mods:
                if self.template_size % m.size:
                    raise ValueError(f"modality size {m.size} does not divide {self.template_size}")
            object.__setattr__(self, "modalities", mods)

    @property
    def initial_bounds(self) -> SearchBounds:
        return SearchBounds(self.t0, self.r0)

    @property
    def reseed_bounds(self) -> SearchBounds:
        return SearchBounds(self.reseed_t, self.reseed_r)

    @property
    def attempt_budget(self) -> int:
        return self.attempts_per_correspondence * self.n_correspondences

    def match_modalities(self) -> list[MatchModality]:
        if self.modalities is None:
            return default_modalities(self.template_size)
        return list(self.modalities)

    @property
    def score_floors(self) -> dict:
        return {"gray": self.s_min, "sobel": self.s_min_sobel, "laplacian": self.s_min_laplacian}

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.modalities is not None:
            d["modalities"] = [m.to_dict() for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VtsmConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if d.get("modalities") is not None:
            d["modalities"] = tuple(MatchModality(**m) for m in d["modalities"])
        return cls(**d)


@dataclass
class IterationRecord:
    bounds: SearchBounds
    correspondences: int
    reused: int
    inliers: int
    pose_delta: float
    rotation_delta: float
    attempts: int
    rms: float
    # raw integer match centres (u_L, v_L, u_R, v_R) of the fresh correspondences
    accepted: list = field(default_factory=list)
    # (centre index, translation in the centre camera frame, rotation angle in degrees)
    viewpoints: list = field(default_factory=list)
    planar_normal: list | None = None

    def to_dict(self) -> dict:
        return {"bounds": {"t_tilde": self.bounds.t_tilde, "r_tilde": self.bounds.r_tilde},
                "correspondences": self.correspondences, "reused": self.reused,
                "inliers": self.inliers, "pose_delta": self.pose_delta,
                "rotation_delta": self.rotation_delta, "attempts": self.attempts,
                "rms": self.rms, "accepted": [list(a) for a in self.accepted],
                "viewpoints": [[c, list(t), a] for c, t, a in self.viewpoints],
                "planar_normal": self.planar_normal}


@dataclass
class LocalizeOutcome:
    status: str
    code: str | None
    pose: Pose
    trace: list
    events: list
    total_attempts: int
    seed: int
    duration: float = 0.0
    seeds: list | None = None

    @property
    def success(self) -> bool:
        return self.status == "success"

    def to_dict(self) -> dict:
        # wall-clock duration is left out so repeated runs serialize identically
        d = {"status": self.status, "code": self.code, "seed": self.seed,
             "pose": self.pose.to_dict(), "total_attempts": self.total_attempts,
             "trace": [r.to_dict() for r in self.trace], "events": self.events}
        if self.seeds is not None:
            d["seeds"] = self.seeds
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class SearchState:
    estimate: Pose
    bounds: SearchBounds
    stalls: int = 0
    reseeds: int = 0
    successes: int = 0
    carry: tuple = ()
    candidates: tuple = ()
    # last trusted estimate (initial guess or latest update); reseeds are drawn around it
    anchor: Pose | None = None

    @property
    def base(self) -> Pose:
        return self.estimate if self.anchor is None else self.anchor


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def anneal(bounds: SearchBounds, gamma: float) -> SearchBounds:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return SearchBounds(gamma * bounds.t_tilde, gamma * bounds.r_tilde)


def stall(state: SearchState, limit: int) -> SearchState:
    """Retry from the same pose and bounds with fresh correspondences."""
    if state.stalls >= limit:
        raise StrategyLimitError(STALL_LIMIT)
    return replace(state, stalls=state.stalls + 1, carry=(), candidates=())


def reseed(state: SearchState, limit: int, bounds: SearchBounds, rng: np.random.Generator,
           surface_normal=None, planar: bool = False) -> SearchState:
    """Jump to ``anchor * perturbation`` drawn within ``bounds``; search bounds are kept.

    The anchor is the last trusted estimate, so consecutive reseeds sample
    the same uncertainty region instead of drifting away from it.
    """
    if state.reseeds >= limit:
        raise StrategyLimitError(RESEED_LIMIT)
    frame = state.base.frame_to
    p = sample_perturbation(bounds, surface_normal, planar, rng, frame, frame)
    return replace(state, estimate=compose(state.base, p), reseeds=state.reseeds + 1,
                   carry=(), candidates=(), anchor=state.base)


def distribute_pick(candidates, rng: np.random.Generator):
    """One of ``candidates`` ((pose, inlier count) pairs), drawn proportionally to the counts."""
    if not candidates:
        raise ValueError("no candidates to pick from")
    counts = np.array([c[1] for c in candidates], dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("inlier counts must be positive")
    i = int(rng.choice(len(candidates), p=counts / counts.sum()))
    return candidates[i][0]


def reuse_carryover(inliers: list[Correspondence], fraction: float, n_correspondences: int,
                    rng: np.random.Generator) -> list[Correspondence]:
    """Uniform subset of floor(fraction * N) previous inliers (all of them if fewer), marked reused."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    k = int(np.floor(fraction * n_correspondences))
    if k == 0 or not inliers:
        return []
    if len(inliers) <= k:
        return [c.as_reused() for c in inliers]
    idx = np.sort(rng.choice(len(inliers), size=k, replace=False))
    return [inliers[i].as_reused() for i in idx]


# ---------------------------------------------------------------------------
# Correspondence collection
# ---------------------------------------------------------------------------

class _Context:
    def __init__(self, query, mesh: TexturedMesh, mask: SamplingMask, rig: StereoRig,
                 config: VtsmConfig):
        left, right = query
        self.left = np.asarray(getattr(left, "intensity", left), dtype=np.float64)
        self.right = np.asarray(getattr(right, "intensity", right), dtype=np.float64)
        if self.left.shape != rig.shape or self.right.shape != rig.shape:
            raise ValueError("query images do not match the rig size")
        self.mesh, self.mask, self.rig, self.cfg = mesh, mask, rig, config
        self.sampler = VisibleSampler(mesh, mask, config.template_size)
        self.modalities = config.match_modalities()
        tri = mask.triangles if len(mask.triangles) else np.arange(mesh.n_triangles)
        corners = mesh.vertices[mesh.triangles[tri]]
        self._mask_xy = corners[:, :, :2].mean(axis=1)
        self._mask_normals = mesh.face_normals[tri]

    def planar_normal(self, estimate: Pose) -> np.ndarray:
        """Normal of the mask triangle nearest the camera's ground projection, in the camera frame."""
        c = estimate.translation[:2]
        i = int(np.argmin(np.sum((self._mask_xy - c) ** 2, axis=1)))
        n = self._mask_normals[i]
        return estimate.rotation.T @ n


@dataclass
class _Collection:
    corrs: list
    attempts: int
    accepted: list
    viewpoints: list
    empty: bool


def _attempt(ctx: _Context, centre: Pose, bounds: SearchBounds, normal, planar: bool,
             rng: np.random.Generator):
    """One viewpoint draw; returns (correspondence | None, accepted quadruple, viewpoint record)."""
    cfg, rig = ctx.cfg, ctx.rig
    frame = centre.frame_to
    pert = sample_perturbation(bounds, normal, planar, rng, frame, "virtual")
    view = compose(centre, pert)
    rec = (pert.translation.tolist(), float(np.degrees(rotation_angle(pert.rotation))))
    point = ctx.sampler.sample(view, rig, rng)
    kw = dict(depth_tol=cfg.depth_tol, edge_jump=cfg.edge_jump, radius=cfg.edge_radius)
    try:
        tl = synthesize_template(ctx.mesh, ctx.mask, view, rig, "left", point, cfg.template_size, **kw)
        tr = synthesize_template(ctx.mesh, ctx.mask, view, rig, "right", point, cfg.template_size, **kw)
        wl = compute_search_window(bounds, centre, point, rig, "left", cfg.template_size,
                                   cfg.window_margin)
        wr = compute_search_window(bounds, centre, point, rig, "right", cfg.template_size,
                                   cfg.window_margin)
    except (ValueError, MatchError):
        return None, None, rec
    m = match_stereo(tl, tr, ctx.left, ctx.right, wl, wr, ctx.modalities, cfg.eps_u,
                     cfg.score_floors, cfg.f_min)
    if m is None:
        return None, None, rec
    # the template centre sits on the anchor pixel; the map point is offset from it
    ul, vl = m.left.u + tl.offset[0], m.left.v + tl.offset[1]
    ur, vr = m.right.u + tr.offset[0], m.right.v + tr.offset[1]
    try:
        pc = stereo_triangulate(ul, vl, ur, vr, rig)
    except TriangulationError:
        return None, None, rec
    corr = Correspondence(point.position, pc, 0.5 * (m.left.score + m.right.score))
    quad = (m.left.u, m.left.v, m.right.u, m.right.v, ctx.modalities.index(m.modality))
    return corr, quad, rec


def _collect(ctx: _Context, centres, bounds: SearchBounds, normal, planar: bool, needed: int,
             budget: int, rng: np.random.Generator, distribute_counts=None) -> _Collection:
    corrs, accepted, views = [], [], []
    attempts = 0
    empty_run = 0
    ever_visible = False
    while len(corrs) < needed and attempts < budget:
        attempts += 1
        ci = 0
        if distribute_counts is not None and len(centres) > 1:
            p = np.asarray(distribute_counts, dtype=np.float64)
            ci = int(rng.choice(len(centres), p=p / p.sum()))
        centre = centres[ci]
        n = None if normal is None else centre.rotation.T @ (ctx.estimate_rotation @ normal)
        try:
            corr, quad, rec = _attempt(ctx, centre, bounds, n, planar, rng)
        except NoVisiblePointsError:
            empty_run += 1
            if not ever_visible and empty_run >= EMPTY_DRAW_LIMIT:
                break
            continue
        ever_visible = True
        empty_run = 0
        if ctx.cfg.record_viewpoints:
            views.append((ci, rec[0], rec[1]))
        if corr is not None:
            corrs.append(corr)
            accepted.append(quad)
    return _Collection(corrs, attempts, accepted, views, not ever_visible)


def _iteration(ctx: _Context, state: SearchState, planar: bool, rng: np.random.Generator,
               budget: int, screening: bool = False, min_inliers: int | None = None):
    """Collect and align once. Returns (result | None, collection, normal, failure reason)."""
    cfg = ctx.cfg
    normal = ctx.planar_normal(state.estimate) if planar else None
    ctx.estimate_rotation = state.estimate.rotation
    if cfg.distribute and state.candidates:
        centres = [c[0] for c in state.candidates]
        counts = [c[1] for c in state.candidates]
    else:
        centres, counts = [state.estimate], None
    carry = list(state.carry)
    col = _collect(ctx, centres, state.bounds, normal, planar, cfg.n_correspondences - len(carry),
                   budget, rng, counts)
    if col.empty:
        return None, col, normal, NO_VISIBLE
    corrs = carry + col.corrs
    if len(corrs) < cfg.n_correspondences and not screening:
        return None, col, normal, "insufficient-correspondences"
    try:
        res = ransac_align(corrs, cfg.inlier_threshold, cfg.ransac_iterations, rng,
                           cfg.min_inliers if min_inliers is None else min_inliers)
    except AlignmentError:
        return None, col, normal, "alignment-failed"
    return (res, corrs), col, normal, None


def _record(state: SearchState, new: Pose, res, corrs, col: _Collection, normal) -> IterationRecord:
    dt, dr = pose_error(state.estimate, new)
    return IterationRecord(state.bounds, len(corrs), sum(c.reused for c in corrs), res.inlier_count,
                           dt, dr, col.attempts, res.rms, col.accepted, col.viewpoints,
                           None if normal is None else normal.tolist())


def _advance(state: SearchState, res, corrs, cfg: VtsmConfig, rng) -> SearchState:
    inliers = [corrs[i] for i in res.inliers]
    carry = reuse_carryover(inliers, cfg.reuse_fraction, cfg.n_correspondences, rng)
    cands = tuple((p.relabel(state.estimate.frame_from, state.estimate.frame_to), n)
                  for p, n in res.candidates)
    new = res.transform.relabel(state.estimate.frame_from, state.estimate.frame_to)
    return SearchState(new, anneal(state.bounds, cfg.gamma), 0, 0, state.successes + 1,
                       tuple(carry), cands, new)


def _run(ctx: _Context, state: SearchState, cfg: VtsmConfig, rng, trace, events,
         attempts_done: int, start: float, seed: int, seeds_info=None) -> LocalizeOutcome:
    total = attempts_done
    code = None
    while state.successes < cfg.n_iterations:
        budget = cfg.attempt_budget
        if cfg.total_attempt_budget is not None:
            budget = min(budget, cfg.total_attempt_budget - total)
            if budget <= 0:
                code = BUDGET
                break
        planar = cfg.planar_first and state.successes == 0
        out, col, normal, reason = _iteration(ctx, state, planar, rng, budget)
        total += col.attempts
        if out is None:
            try:
                if state.successes == 0:
                    n = ctx.planar_normal(state.base) if cfg.planar_first else None
                    state = reseed(state, cfg.reseed_limit, cfg.reseed_bounds, rng, n,
                                   cfg.planar_first)
                    events.append({"strategy": "reseed", "reason": reason,
                                   "attempts": col.attempts})
                else:
                    state = stall(state, cfg.stall_limit)
                    events.append({"strategy": "stall", "reason": reason,
                                   "attempts": col.attempts})
            except StrategyLimitError as exc:
                code = NO_VISIBLE if reason == NO_VISIBLE else exc.code
                if (cfg.total_attempt_budget is not None
                        and total >= cfg.total_attempt_budget):
                    code = BUDGET
                break
            continue
        res, corrs = out
        new_state = _advance(state, res, corrs, cfg, rng)
        rec = _record(state, new_state.estimate, res, corrs, col, normal)
        trace.append(rec)
        state = new_state
        if rec.pose_delta < cfg.convergence:
            break
    status = "success" if code is None else "failure"
    return LocalizeOutcome(status, code, state.estimate, trace, events, total, seed,
                           time.perf_counter() - start, seeds_info)


def localize(query, mesh: TexturedMesh, mask: SamplingMask, rig: StereoRig, initial_guess: Pose,
             config: VtsmConfig | None = None) -> LocalizeOutcome:
    """Estimate the query camera pose (camera -> world) starting from ``initial_guess``.

    ``query`` is a (left, right) pair of images or rendered frames. Success
    means every iteration collected the target number of correspondences and
    updated the pose, or the update converged earlier.
    """
    cfg = config or VtsmConfig()
    start = time.perf_counter()
    ctx = _Context(query, mesh, mask, rig, cfg)
    rng = np.random.default_rng(cfg.seed)
    state = SearchState(initial_guess, cfg.initial_bounds, anchor=initial_guess)
    return _run(ctx, state, cfg, rng, [], [], 0, start, cfg.seed)


def multi_seed_localize(query, mesh: TexturedMesh, mask: SamplingMask, rig: StereoRig,
                        initial_guess: Pose, wide_bound: float = 0.50, n_seeds: int = 100,
                        config: VtsmConfig | None = None,
                        screen_attempts: int | None = None,
                        screen_min_inliers: int = SCREEN_MIN_INLIERS) -> LocalizeOutcome:
    """Screen ``n_seeds`` poses drawn within ``wide_bound`` of the guess, then refine the best.

    Each seed gets one iteration with at most ``screen_attempts`` template
    attempts (the full per-iteration budget when ``None``). Short screening
    budgets rarely reach the full inlier minimum, so seeds are ranked with
    ``screen_min_inliers`` instead; the seed with the most RANSAC inliers
    keeps its updated state and the remaining iterations proceed from there.
    """
    cfg = config or VtsmConfig()
    if wide_bound < cfg.t0:
        raise ValueError("wide_bound must be at least t0")
    if n_seeds < 1:
        raise ValueError("n_seeds must be positive")
    start = time.perf_counter()
    ctx = _Context(query, mesh, mask, rig, cfg)
    rng = np.random.default_rng(cfg.seed)
    budget = cfg.attempt_budget if screen_attempts is None else int(screen_attempts)
    wide = SearchBounds(wide_bound, cfg.r0)
    frame = initial_guess.frame_to
    normal = ctx.planar_normal(initial_guess) if cfg.planar_first else None
    seeds = [compose(initial_guess, sample_perturbation(wide, normal, cfg.planar_first, rng,
                                                        frame, frame))
             for _ in range(n_seeds)]
    total = 0
    best = None
    info = []
    for k, seed_pose in enumerate(seeds):
        state = SearchState(seed_pose, cfg.initial_bounds)
        out, col, nrm, reason = _iteration(ctx, state, cfg.planar_first, rng, budget,
                                           screening=True, min_inliers=screen_min_inliers)
        total += col.attempts
        n_in = out[0].inlier_count if out is not None else 0
        info.append({"index": k, "pose": seed_pose.to_dict(), "correspondences": len(col.corrs),
                     "inliers": n_in, "attempts": col.attempts})
        if out is not None and (best is None or n_in > best[0]):
            best = (n_in, state, out, col, nrm)
    if best is None:
        return LocalizeOutcome("failure", RESEED_LIMIT, initial_guess, [], [], total, cfg.seed,
                               time.perf_counter() - start, info)
    _, state, (res, corrs), col, nrm = best
    new_state = _advance(state, res, corrs, cfg, rng)
    trace = [_record(state, new_state.estimate, res, corrs, col, nrm)]
    if trace[0].pose_delta < cfg.convergence:
        return LocalizeOutcome("success", None, new_state.estimate, trace, [], total, cfg.seed,
                               time.perf_counter() - start, info)
    return _run(ctx, new_state, cfg, rng, trace, [], total, start, cfg.seed, info)
