"""Online personalised calibration: head events, gaze states, teacher targets, student fit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ErpPoint, Scene, angular_distance, substream, wrap_angle
from .geometry import (HeadPose, SphereDir, angles_to_vec, head_to_dir, uv_to_angles, vec_to_angles)

MOVEMENT_START = "movement_start"
MOVEMENT_STOP = "movement_stop"
SCANNING = "scanning"
FIXATION = "fixation"

DEFAULT_HINT_DEG = 10.0
WINDOW = (0.0, 0.3)          # seconds after a scene transition
IN_WINDOW_WEIGHT = 2.0


class CalibrationError(ValueError):
    pass


class DegenerateFitError(CalibrationError):
    pass


@dataclass(frozen=True)
class HeadEvent:
    kind: str
    time: float
    pose: HeadPose


@dataclass(frozen=True)
class HintRegion:
    center: SphereDir
    radius: float  # radians

    def contains(self, d) -> bool:
        return bool(angular_distance(self.center.vec, np.asarray(d, dtype=float)) <= self.radius + 1e-12)


@dataclass(frozen=True, eq=False)
class StudentModel:
    """teacher ~= A @ [lon, lat] + b, angles in radians."""

    A: np.ndarray = field(default_factory=lambda: np.eye(2))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))
    n_pairs: int = 0
    residual_rms: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(2, 2)
        if abs(np.linalg.det(A)) < 1e-12:
            raise CalibrationError("student matrix must be invertible")
        if self.residual_rms < 0:
            raise CalibrationError("residual RMS must be >= 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(2))

    def to_record(self) -> dict:
        return {"A": self.A.ravel().tolist(), "b": self.b.tolist(), "n_pairs": self.n_pairs,
                "residual_rms": self.residual_rms}


# ---------------------------------------------------------------------------
# head and gaze events


def _check_times(times: np.ndarray) -> None:
    if np.any(np.diff(times) <= 0):
        raise CalibrationError("series must be strictly time-ordered")


def head_speeds(times, poses: Sequence[HeadPose]) -> np.ndarray:
    """Angular speed (rad/s) over each interval, from the rotation between consecutive poses."""
    R = np.stack([p.rotation() for p in poses])
    rel = np.einsum("nji,njk->nik", R[:-1], R[1:])
    cos = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cos) / np.diff(times)


def detect_head_events(times, poses: Sequence[HeadPose], omega: float = 0.5, hold: float = 0.01) -> list:
    """Start/stop events with hysteresis.

    Each interval between samples is above or below ``omega``. A run of
    same-side intervals lasting at least ``hold`` seconds flips the state;
    the event is stamped at the start of that run.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 2 or len(times) != len(poses):
        raise CalibrationError("need >= 2 time-stamped poses")
    _check_times(times)
    fast = head_speeds(times, poses) > omega
    dt = np.diff(times)
    events = []
    moving = False
    run_start, run_len = 0, 0.0
    for i in range(len(fast)):
        if fast[i] == moving:
            run_len = 0.0
            continue
        if run_len == 0.0:
            run_start = i
        run_len += dt[i]
        if run_len >= hold - 1e-12:
            moving = not moving
            kind = MOVEMENT_START if moving else MOVEMENT_STOP
            events.append(HeadEvent(kind, float(times[run_start]), poses[run_start]))
            run_len = 0.0
    return events


def gaze_speeds(times, dirs) -> np.ndarray:
    """Per-sample angular speed; sample i uses the interval ending at i (the first uses the next one)."""
    times = np.asarray(times, dtype=float)
    d = np.asarray(dirs, dtype=float)
    if len(times) < 2:
        return np.zeros(len(times))
    _check_times(times)
    sp = angular_distance(d[:-1], d[1:]) / np.diff(times)
    return np.concatenate([sp[:1], sp])


def classify_gaze_state(times, dirs, v_threshold: float = 1.0) -> list:
    """I-VT labelling: speed above ``v_threshold`` (rad/s) is scanning, else fixation."""
    if len(times) == 0:
        return []
    return [SCANNING if s > v_threshold else FIXATION for s in gaze_speeds(times, dirs)]


# ---------------------------------------------------------------------------
# teacher side


def strong_hint(event: HeadEvent, radius_deg: float = DEFAULT_HINT_DEG) -> HintRegion:
    if event.kind not in (MOVEMENT_START, MOVEMENT_STOP):
        raise CalibrationError(f"unknown event kind {event.kind}")
    return HintRegion(head_to_dir(event.pose), math.radians(radius_deg))


def clamp_to_hint(region: HintRegion, d) -> np.ndarray:
    """Unit direction ``d`` moved along the great circle onto the cone if it lies outside."""
    c = region.center.vec
    d = np.asarray(d, dtype=float)
    d = d / np.linalg.norm(d)
    ang = float(angular_distance(c, d))
    if ang <= region.radius:
        return d
    perp = d - np.dot(d, c) * c
    n = np.linalg.norm(perp)
    if n < 1e-15:  # antipodal: any direction is as good as another
        perp = np.cross(c, [0.0, 0.0, 1.0])
        if np.linalg.norm(perp) < 1e-12:
            perp = np.cross(c, [0.0, 1.0, 0.0])
        n = np.linalg.norm(perp)
    return math.cos(region.radius) * c + math.sin(region.radius) * perp / n


def teacher_fixation(scene: Scene, region: Optional[HintRegion] = None) -> ErpPoint:
    """Objective fixation: dynamic onset first, else the most salient centroid, within the hint."""
    if not scene.objects:
        raise CalibrationError("scene has no objects")
    cands = list(scene.objects)
    if region is not None:
        inside = []
        for o in cands:
            lon, lat = uv_to_angles(*o.centroid, scene.W, scene.H)
            if region.contains(angles_to_vec(lon, lat)):
                inside.append(o)
        cands = inside or cands
    dyn = [o for o in cands if o.dynamic]
    if dyn:
        return min(dyn, key=lambda o: (-o.saliency, o.id)).motion_start
    o = min(cands, key=lambda o: (-o.saliency, o.id))
    cx, cy = o.centroid
    return ErpPoint(cx, cy, scene.W, scene.H)


def scene_transition_window(transition_time: float, window=WINDOW) -> tuple:
    return (transition_time + window[0], transition_time + window[1])


def in_window(t: float, win: tuple) -> bool:
    return win[0] <= t <= win[1]


# ---------------------------------------------------------------------------
# student


def _unwrap_to(lon, ref):
    return np.asarray(ref) + wrap_angle(np.asarray(lon) - np.asarray(ref))


def calibrate_student(pairs: Sequence, weights: Optional[Sequence[float]] = None) -> StudentModel:
    """Weighted least-squares affine map from observed to teacher angles.

    ``pairs`` holds ``((lon_obs, lat_obs), (lon_teacher, lat_teacher))``.
    Observed longitudes are unwrapped next to their teacher before fitting.
    The reported residual RMS uses the same weights as the fit.
    """
    if len(pairs) < 3:
        raise DegenerateFitError(f"need >= 3 pairs, got {len(pairs)}")
    obs = np.array([p[0] for p in pairs], dtype=float)
    tea = np.array([p[1] for p in pairs], dtype=float)
    w = np.ones(len(pairs)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise CalibrationError("weights must be positive")
    obs[:, 0] = _unwrap_to(obs[:, 0], tea[:, 0])
    X = np.column_stack([obs, np.ones(len(obs))])
    sw = np.sqrt(w)[:, None]
    Xw, Yw = X * sw, tea * sw
    s = np.linalg.svd(Xw, compute_uv=False)
    if s[-1] <= 1e-10 * max(s[0], 1e-300):
        raise DegenerateFitError("observed angles are collinear")
    coef, *_ = np.linalg.lstsq(Xw, Yw, rcond=None)
    A, b = coef[:2].T, coef[2]
    res = tea - X @ coef
    rms = float(np.sqrt(np.sum(w * np.sum(res ** 2, axis=1)) / np.sum(w)))
    return StudentModel(A, b, len(pairs), rms)


def apply_student(model: StudentModel, lon, lat) -> tuple:
    ang = np.stack([np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)], axis=-1) @ model.A.T + model.b
    return wrap_angle(ang[..., 0]), np.clip(ang[..., 1], -math.pi / 2, math.pi / 2)


def identity_residual(pairs: Sequence, weights=None) -> float:
    obs = np.array([p[0] for p in pairs], dtype=float)
    tea = np.array([p[1] for p in pairs], dtype=float)
    obs[:, 0] = _unwrap_to(obs[:, 0], tea[:, 0])
    w = np.ones(len(pairs)) if weights is None else np.asarray(weights, dtype=float)
    return float(np.sqrt(np.sum(w * np.sum((tea - obs) ** 2, axis=1)) / np.sum(w)))


class OnlineCalibrator:
    """Accumulates pairs and refits whenever at least ``min_new`` new ones arrived."""

    def __init__(self, min_new: int = 3):
        self.min_new = min_new
        self.pairs: list = []
        self.weights: list = []
        self.model = StudentModel()
        self._pending = 0

    def add(self, pair, weight: float = 1.0) -> bool:
        self.pairs.append(pair)
        self.weights.append(weight)
        self._pending += 1
        if self._pending >= self.min_new and len(self.pairs) >= 3:
            try:
                self.model = calibrate_student(self.pairs, self.weights)
            except DegenerateFitError:
                return False
            self._pending = 0
            return True
        return False


# ---------------------------------------------------------------------------
# end-to-end experiment on simulated transitions


@dataclass(frozen=True)
class CalibrationConfig:
    n_transitions: int = 120
    n_holdout: int = 60
    omega: float = 0.5
    hold: float = 0.01
    v_threshold: float = 1.0
    hint_deg: float = DEFAULT_HINT_DEG
    in_window_weight: float = IN_WINDOW_WEIGHT


@dataclass(frozen=True)
class CalibrationReport:
    subject_id: str
    n_pairs: int
    pre_median: float   # radians
    post_median: float
    A: tuple
    b: tuple
    residual_rms: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.post_median / self.pre_median if self.pre_median > 0 else 0.0

    def to_record(self) -> dict:
        return {"subject_id": self.subject_id, "n_pairs": self.n_pairs,
                "pre_median_deg": math.degrees(self.pre_median), "post_median_deg": math.degrees(self.post_median),
                "A": list(self.A), "b": list(self.b), "residual_rms": self.residual_rms}


def transition_pairs(scene: Scene, trace, observed: np.ndarray, cfg: CalibrationConfig = CalibrationConfig()):
    """(pairs, weights, sample indices) from one transition at t = 0.

    The hint comes from the head's movement stop; pairs are the observed
    samples of the first fixation segment after the transition.
    """
    events = detect_head_events(trace.head_times, trace.head_poses, cfg.omega, cfg.hold)
    stops = [e for e in events if e.kind == MOVEMENT_STOP]
    if not stops:
        return [], [], []
    region = strong_hint(stops[0], cfg.hint_deg)
    tp = teacher_fixation(scene, region)
    t_ang = tuple(float(x) for x in uv_to_angles(tp.u, tp.v, tp.W, tp.H))
    labels = classify_gaze_state(trace.gaze_times, observed, cfg.v_threshold)
    win = scene_transition_window(0.0)
    lon, lat = vec_to_angles(observed)
    pairs, weights, idx = [], [], []
    started = False
    for i, (t, lab) in enumerate(zip(trace.gaze_times, labels)):
        if t < 0:
            continue
        if lab == FIXATION and i > 0 and labels[i - 1] == SCANNING:
            started = True
        elif lab == SCANNING and started:
            break
        if started and lab == FIXATION:
            pairs.append(((float(lon[i]), float(lat[i])), t_ang))
            weights.append(cfg.in_window_weight if in_window(t, win) else 1.0)
            idx.append(i)
    return pairs, weights, idx


def run_calibration(profile, scenes: Sequence[Scene], seed: int,
                    cfg: CalibrationConfig = CalibrationConfig()) -> tuple:
    """Fit a student for ``profile`` on simulated transitions and score it on held-out ones.

    Returns ``(StudentModel, CalibrationReport)``.
    """
    from .simscene import bias_directions, simulate_transition

    rng = substream(seed, "calib", profile.id)
    pairs, weights = [], []
    for k in range(cfg.n_transitions):
        scene = scenes[k % len(scenes)]
        tr = simulate_transition(scene, rng)
        obs = bias_directions(tr.gaze_true, profile, rng)
        p, w, _ = transition_pairs(scene, tr, obs, cfg)
        pairs += p
        weights += w
    model = calibrate_student(pairs, weights)

    hold_rng = substream(seed, "calib-holdout", profile.id)
    pre, post = [], []
    for k in range(cfg.n_holdout):
        scene = scenes[(k + 7) % len(scenes)]
        tr = simulate_transition(scene, hold_rng)
        obs = bias_directions(tr.gaze_true, profile, hold_rng)
        fix = np.array(classify_gaze_state(tr.gaze_times, obs, cfg.v_threshold)) == FIXATION
        if not fix.any():
            continue
        truth = tr.gaze_true[fix]
        lon, lat = vec_to_angles(obs[fix])
        clon, clat = apply_student(model, lon, lat)
        pre.append(angular_distance(obs[fix], truth))
        post.append(angular_distance(angles_to_vec(clon, clat), truth))
    pre_m = float(np.median(np.concatenate(pre)))
    post_m = float(np.median(np.concatenate(post)))
    report = CalibrationReport(profile.id, model.n_pairs, pre_m, post_m, tuple(model.A.ravel().tolist()),
                               tuple(model.b.tolist()), model.residual_rms)
    return model, report
