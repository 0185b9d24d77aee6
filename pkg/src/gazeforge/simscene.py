"""Synthetic scenes, emotion-conditioned scanpaths, subject bias and camera observations.

The emotion signal lives in *which* objects get looked at and in what order:
each emotion scores objects by a weighted sum of four features (saliency,
brightness, corner proximity, category detail) and samples fixation targets
from a softmax over those scores. The weights are data
(``data/default_policy.jsonl``) and carry no claim about real viewers.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DEFAULT_H,
    DEFAULT_W,
    BoundingBox,
    EmotionLabel,
    ErpPoint,
    Fixation,
    Scanpath,
    Scene,
    SceneObject,
    SchemaError,
    stream_id,
    substream,
    wrap_angle,
)
from .geometry import (
    BehindCameraError,
    CameraRig,
    HeadPose,
    angles_to_uv,
    angles_to_vec,
    project_point,
    uv_to_angles,
    vec_to_angles,
)

PROJECTION_INTERVAL = 0.1  # seconds; fixation timestamps live on this grid

# name -> (RGB, detail level)
CATEGORIES = {
    "person": ((220, 120, 90), 0.95),
    "painting": ((200, 60, 160), 0.8),
    "plant": ((60, 170, 70), 0.7),
    "car": ((200, 40, 40), 0.55),
    "lamp": ((240, 220, 90), 0.4),
    "sofa": ((90, 90, 200), 0.3),
    "window": ((150, 210, 240), 0.15),
    "door": ((140, 100, 60), 0.05),
}
CATEGORY_NAMES = tuple(CATEGORIES)
FEATURES = ("saliency", "brightness", "corner", "detail")


class GenerationError(RuntimeError):
    pass


class CoverageError(RuntimeError):
    pass


class PolicyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# policies and subjects


@dataclass(frozen=True)
class EmotionRule:
    weights: tuple          # one weight per FEATURES entry
    duration_mean: float    # seconds
    duration_sd: float
    dispersion: float       # jitter sd as a fraction of the box half-size
    revisit_prob: float
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != len(FEATURES) or not all(math.isfinite(w) for w in self.weights):
            raise PolicyError("weights must be 4 finite numbers")
        if not self.duration_mean > 0 or self.duration_sd < 0:
            raise PolicyError("duration_mean must be > 0 and duration_sd >= 0")
        if not 0.0 <= self.revisit_prob <= 1.0:
            raise PolicyError("revisit_prob must lie in [0, 1]")
        if self.dispersion < 0 or self.temperature < 0:
            raise PolicyError("dispersion and temperature must be >= 0")


@dataclass(frozen=True)
class EmotionPolicy:
    rules: dict  # EmotionLabel -> EmotionRule

    def __post_init__(self):
        missing = [e.name for e in EmotionLabel if e not in self.rules]
        if missing:
            raise PolicyError(f"policy lacks emotions: {', '.join(missing)}")

    def __getitem__(self, emotion) -> EmotionRule:
        return self.rules[EmotionLabel.parse(emotion)]

    def to_lines(self) -> list:
        out = []
        for e in EmotionLabel:
            r = self.rules[e]
            rec = {"emotion": e.name}
            rec.update(dict(zip(FEATURES, r.weights)))
            rec.update(duration_mean=r.duration_mean, duration_sd=r.duration_sd,
                       dispersion=r.dispersion, revisit_prob=r.revisit_prob, temperature=r.temperature)
            out.append(json.dumps(rec))
        return out


def parse_policy(text: str, source: str = "<policy>") -> EmotionPolicy:
    rules = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = json.loads(line)
            emotion = EmotionLabel.parse(rec["emotion"])
            rules[emotion] = EmotionRule(
                weights=tuple(rec[f] for f in FEATURES),
                duration_mean=float(rec["duration_mean"]),
                duration_sd=float(rec["duration_sd"]),
                dispersion=float(rec["dispersion"]),
                revisit_prob=float(rec["revisit_prob"]),
                temperature=float(rec.get("temperature", 1.0)),
            )
        except json.JSONDecodeError as exc:
            raise PolicyError(f"{source}:{lineno}: not a JSON record ({exc.msg})") from None
        except KeyError as exc:
            raise PolicyError(f"{source}:{lineno}: missing field {exc.args[0]!r}") from None
        except (SchemaError, PolicyError, TypeError, ValueError) as exc:
            raise PolicyError(f"{source}:{lineno}: {exc}") from None
    try:
        return EmotionPolicy(rules)
    except PolicyError as exc:
        raise PolicyError(f"{source}: {exc}") from None


def load_policy(path=None) -> EmotionPolicy:
    if path is None:
        text = resources.files("gazeforge").joinpath("data/default_policy.jsonl").read_text(encoding="utf-8")
        return parse_policy(text, "default_policy.jsonl")
    return parse_policy(Path(path).read_text(encoding="utf-8"), str(path))


@dataclass(frozen=True, eq=False)
class SubjectProfile:
    """Per-user affine bias on (longitude, latitude) plus isotropic noise, radians."""

    id: str
    A: np.ndarray = field(default_factory=lambda: np.eye(2))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))
    sigma: float = 0.0
    tags: tuple = ()

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(2, 2)
        b = np.asarray(self.b, dtype=float).reshape(2)
        if abs(np.linalg.det(A)) < 1e-12:
            raise SchemaError("A", "bias matrix must be invertible")
        if self.sigma < 0:
            raise SchemaError("sigma", "noise must be >= 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "tags", tuple(self.tags))

    def inverse(self) -> "SubjectProfile":
        Ai = np.linalg.inv(self.A)
        return SubjectProfile(self.id + "^-1", Ai, -Ai @ self.b, 0.0, self.tags)

    def to_record(self) -> dict:
        return {"id": self.id, "A": self.A.ravel().tolist(), "b": self.b.tolist(),
                "sigma": self.sigma, "tags": list(self.tags)}

    @classmethod
    def from_record(cls, rec: dict) -> "SubjectProfile":
        return cls(rec["id"], np.array(rec["A"]).reshape(2, 2), np.array(rec["b"]),
                   float(rec["sigma"]), tuple(rec.get("tags", ())))


def identity_profile(subject_id: str = "s-identity", sigma: float = 0.0) -> SubjectProfile:
    return SubjectProfile(subject_id, np.eye(2), np.zeros(2), sigma, ("identity",))


def biased_profile(subject_id: str, rng: np.random.Generator, offset_deg=(3.0, 6.0),
                   sigma_deg: float = 0.5, scale_jitter: float = 0.03, shear_jitter: float = 0.02) -> SubjectProfile:
    """Random affine bias with offset magnitude drawn from ``offset_deg``."""
    mag = math.radians(rng.uniform(*offset_deg))
    ang = rng.uniform(-math.pi, math.pi)
    A = np.eye(2) + np.diag(rng.uniform(-scale_jitter, scale_jitter, 2))
    A[0, 1], A[1, 0] = rng.uniform(-shear_jitter, shear_jitter, 2)
    return SubjectProfile(subject_id, A, mag * np.array([math.cos(ang), math.sin(ang)]),
                          math.radians(sigma_deg), ("biased",))


# ---------------------------------------------------------------------------
# scenes


def gen_scene(seed: int, n_objects: int = 12, lighting: str = "normal", dynamic_fraction: float = 0.0,
              W: int = DEFAULT_W, H: int = DEFAULT_H, scene_id: Optional[str] = None,
              render: bool = True, max_tries: int = 2000):
    """Procedural scene with non-overlapping boxes; returns ``(scene, raster)``."""
    if n_objects < 1:
        raise GenerationError("n_objects must be >= 1")
    rng = substream(seed, "scene")
    lo, hi = {"high": (0.5, 1.0), "low": (0.05, 0.5), "normal": (0.05, 1.0)}[lighting]
    boxes = []
    gap = 0.01 * W
    for i in range(n_objects):
        for _ in range(max_tries):
            bw = rng.uniform(0.04, 0.12) * W
            bh = rng.uniform(0.06, 0.16) * H
            x0 = rng.uniform(0.02 * W, 0.98 * W - bw)
            y0 = rng.uniform(0.12 * H, 0.88 * H - bh)
            cand = (x0, y0, x0 + bw, y0 + bh)
            if all(cand[0] > b[2] + gap or cand[2] < b[0] - gap or cand[1] > b[3] + gap or cand[3] < b[1] - gap
                   for b in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(f"could not place object {i} after {max_tries} tries")
    objects = []
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        cat = CATEGORY_NAMES[int(rng.integers(len(CATEGORY_NAMES)))]
        sal = float(rng.uniform(0.0, 1.0))
        bri = float(rng.uniform(lo, hi))
        dyn = bool(rng.random() < dynamic_fraction)
        ms = None
        if dyn:
            ms = ErpPoint(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), W, H)
        objects.append(SceneObject(i, BoundingBox(x0, y0, x1, y1), cat, sal, bri, dyn, ms))
    scene = Scene(
        id=scene_id or f"scene-{seed}",
        W=W,
        H=H,
        objects=tuple(objects),
        background_seed=int(rng.integers(0, 2**63)),
        lighting=lighting,
        dynamic=any(o.dynamic for o in objects),
    )
    return scene, (render_scene(scene) if render else None)


def render_scene(scene: Scene) -> np.ndarray:
    """Flat-coloured boxes over a smooth procedural background, uint8 H x W x 3."""
    W, H = scene.W, scene.H
    rng = np.random.Generator(np.random.PCG64(scene.background_seed))
    base = {"high": 170.0, "normal": 115.0, "low": 45.0}[scene.lighting]
    gh, gw = 8, 16
    coarse = rng.normal(0.0, 12.0, (gh, gw, 3))
    rows = np.minimum((np.arange(H) * gh) // H, gh - 1)
    cols = np.minimum((np.arange(W) * gw) // W, gw - 1)
    grad = np.linspace(20.0, -20.0, H)[:, None, None]
    img = base + grad + coarse[rows][:, cols]
    for o in scene.objects:
        rgb, _ = CATEGORIES.get(o.category, ((128, 128, 128), 0.5))
        rgb = np.asarray(rgb, dtype=float)
        # equal peak channel per category, so brightness alone sets intensity
        fill = rgb * (255.0 / rgb.max()) * (0.2 + 0.8 * o.brightness)
        r0, r1 = int(math.floor(o.bbox.y_min)), int(math.ceil(o.bbox.y_max))
        c0, c1 = int(math.floor(o.bbox.x_min)), int(math.ceil(o.bbox.x_max))
        img[r0:r1, c0:c1] = fill
        # saliency shows up as a bright inner core
        qh, qw = (r1 - r0) // 4, (c1 - c0) // 4
        core = fill + o.saliency * 0.85 * (255.0 - fill)
        img[r0 + qh:r1 - qh, c0 + qw:c1 - qw] = core
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def object_features(scene: Scene) -> np.ndarray:
    """(n_objects, 4) matrix of FEATURES, each in [0, 1]."""
    rows = []
    for o in scene.objects:
        # longitude wraps, so only the vertical frame edges count as corners
        corner = abs(2 * o.centroid[1] / scene.H - 1)
        detail = CATEGORIES.get(o.category, (None, 0.5))[1]
        rows.append((o.saliency, o.brightness, corner, detail))
    return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# scanpaths


def _pick(rng, scores: np.ndarray, temperature: float) -> int:
    if temperature == 0:
        return int(np.argmax(scores))  # first maximum, i.e. lowest index
    z = scores / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def gen_scanpath(scene: Scene, emotion, policy: EmotionPolicy, profile: SubjectProfile,
                 n_fix: int = 8, seed: int = 0, stream=None) -> Scanpath:
    """Sample one viewing episode; fixation ``target_id`` holds the ground truth."""
    if n_fix < 1:
        raise GenerationError("n_fix must be >= 1")
    emotion = EmotionLabel.parse(emotion)
    rule = policy[emotion]
    rng = stream if stream is not None else substream(seed, "scanpath")
    scores = object_features(scene) @ np.asarray(rule.weights)
    n = len(scene.objects)
    visited: list = []
    current = None
    ticks = 0
    fixes = []
    for _ in range(n_fix):
        back = [j for j in visited if j != current]
        if back and rng.random() < rule.revisit_prob:
            j = back[int(rng.integers(len(back)))]
        else:
            pool = [j for j in range(n) if j not in visited]
            if not pool:
                pool = [j for j in range(n) if j != current] or list(range(n))
            j = pool[_pick(rng, scores[pool], rule.temperature)]
        if j not in visited:
            visited.append(j)
        current = j
        o = scene.objects[j]
        b = o.bbox
        cx, cy = o.centroid
        hw, hh = 0.5 * (b.x_max - b.x_min), 0.5 * (b.y_max - b.y_min)
        jx, jy = rng.normal(0.0, 1.0, 2) * rule.dispersion
        x = float(np.clip(cx + jx * hw, b.x_min, b.x_max))
        y = float(np.clip(cy + jy * hh, b.y_min, b.y_max))
        x = min(x, math.nextafter(scene.W, 0))
        y = min(y, math.nextafter(scene.H, 0))
        dur_ticks = max(1, int(round(rng.normal(rule.duration_mean, rule.duration_sd) / PROJECTION_INTERVAL)))
        fixes.append(Fixation(ErpPoint(x, y, scene.W, scene.H), round(ticks * PROJECTION_INTERVAL, 9),
                              round(dur_ticks * PROJECTION_INTERVAL, 9), o.id))
        ticks += dur_ticks + 1  # one interval of saccade between fixations
    return Scanpath(tuple(fixes), profile.id, emotion, scene.id)


def _bias_angles(lon, lat, profile: SubjectProfile, rng) -> tuple:
    ang = np.stack([lon, lat], axis=-1) @ profile.A.T + profile.b
    if profile.sigma > 0:
        ang = ang + rng.normal(0.0, profile.sigma, ang.shape)
    lat_b = ang[..., 1]
    clamped = np.abs(lat_b) > math.pi / 2
    return wrap_angle(ang[..., 0]), np.clip(lat_b, -math.pi / 2, math.pi / 2), clamped


def apply_bias(scanpath: Scanpath, profile: SubjectProfile, rng=None):
    """Observed scanpath under ``profile``; returns ``(scanpath, clamped_flags)``.

    Ground-truth ``target_id`` values are carried through untouched.
    """
    if rng is None:
        rng = substream(0, "bias", profile.id)
    f0 = scanpath.fixations[0].point
    W, H = f0.W, f0.H
    u = np.array([f.point.u for f in scanpath.fixations])
    v = np.array([f.point.v for f in scanpath.fixations])
    lon, lat = uv_to_angles(u, v, W, H)
    lon_b, lat_b, clamped = _bias_angles(lon, lat, profile, rng)
    ub, vb = angles_to_uv(lon_b, lat_b, W, H)
    fixes = tuple(
        Fixation(ErpPoint(float(a), float(c), W, H), f.t_start, f.duration, f.target_id)
        for f, a, c in zip(scanpath.fixations, ub, vb)
    )
    return Scanpath(fixes, scanpath.subject_id, scanpath.emotion, scanpath.scene_id), tuple(bool(c) for c in clamped)


def bias_directions(dirs: np.ndarray, profile: SubjectProfile, rng) -> np.ndarray:
    lon, lat = vec_to_angles(dirs)
    lon_b, lat_b, _ = _bias_angles(lon, lat, profile, rng)
    return angles_to_vec(lon_b, lat_b)


# ---------------------------------------------------------------------------
# cameras


def simulate_multicam(rig: CameraRig, head_point_3d, pixel_noise_sigma: float = 0.0, rng=None,
                      occlusion_prob: float = 0.0) -> list:
    """``[(camera_index, camera, pixel), ...]`` for cameras that see the point.

    A camera is dropped when the point is behind it, projects outside its
    image, or (with probability ``occlusion_prob``) is occluded.
    """
    if rng is None:
        rng = substream(0, "multicam")
    out = []
    for i, cam in enumerate(rig.cameras):
        occluded = occlusion_prob > 0 and rng.random() < occlusion_prob
        try:
            px = project_point(cam, head_point_3d)
        except BehindCameraError:
            continue
        w, h = cam.image_size
        if occluded or not (0 <= px[0] < w and 0 <= px[1] < h):
            continue
        if pixel_noise_sigma > 0:
            px = px + rng.normal(0.0, pixel_noise_sigma, 2)
        out.append((i, cam, px))
    if len(out) < 2:
        raise CoverageError(f"point visible in {len(out)} camera(s); need 2")
    return out


# ---------------------------------------------------------------------------
# scene transitions (calibration data)


@dataclass(frozen=True, eq=False)
class TransitionTrace:
    """Head and gaze samples around a scene change at time 0."""

    head_times: np.ndarray
    head_poses: tuple
    gaze_times: np.ndarray
    gaze_true: np.ndarray   # (n, 3) unit vectors
    target: ErpPoint        # where the subject actually settles


def salient_point(scene: Scene) -> ErpPoint:
    """Objective fixation over the whole scene: dynamic onset first, else max saliency."""
    dyn = [o for o in scene.objects if o.dynamic]
    if dyn:
        o = max(dyn, key=lambda o: (o.saliency, -o.id))
        return o.motion_start
    o = max(scene.objects, key=lambda o: (o.saliency, -o.id))
    cx, cy = o.centroid
    return ErpPoint(cx, cy, scene.W, scene.H)


def simulate_transition(scene: Scene, rng, prev_dir=None, head_offset_deg: float = 3.0,
                        head_rate: float = 100.0, gaze_rate: float = 10.0,
                        settle: float = 0.25, dwell: float = 0.5) -> TransitionTrace:
    """Head turn and saliency-driven first fixation after a scene change.

    The head ramps (smoothstep) from ``prev_dir`` toward the salient target
    over ``settle`` seconds, landing within ``head_offset_deg`` of it; gaze
    jumps to the target at the first gaze sample after 0.05 s and dwells
    there for ``dwell`` seconds.
    """
    target = salient_point(scene)
    t_lon, t_lat = uv_to_angles(target.u, target.v, scene.W, scene.H)
    t_dir = angles_to_vec(t_lon, t_lat)
    if prev_dir is None:
        prev_dir = angles_to_vec(float(t_lon) + rng.uniform(0.4, 0.9) * rng.choice([-1, 1]),
                                 float(t_lat) * 0.3)
    p_lon, p_lat = vec_to_angles(prev_dir)
    off = np.radians(head_offset_deg) * rng.normal(0.0, 1.0, 2) / math.sqrt(2)
    end_yaw = float(t_lon) + off[0]
    end_pitch = float(np.clip(float(t_lat) + off[1], -1.4, 1.4))
    d_yaw = float(wrap_angle(end_yaw - float(p_lon)))
    d_pitch = end_pitch - float(p_lat)
    head_t = np.arange(-0.2, dwell + 0.3, 1.0 / head_rate)
    s = np.clip((head_t - 0.02) / settle, 0.0, 1.0)
    s = s * s * (3 - 2 * s)
    poses = tuple(HeadPose.wrapped(float(p_lat) + d_pitch * k, float(p_lon) + d_yaw * k, 0.0) for k in s)
    gaze_t = np.arange(0.05, dwell + 0.25, 1.0 / gaze_rate)
    on_target = gaze_t >= 0.1
    gaze = np.where(on_target[:, None], t_dir[None, :], np.asarray(prev_dir)[None, :])
    # after the dwell the subject drifts off the target
    leave = gaze_t > dwell
    if leave.any():
        away = angles_to_vec(float(t_lon) + 0.5, float(t_lat) * 0.5)
        gaze = np.where(leave[:, None], away[None, :], gaze)
    return TransitionTrace(head_t, poses, gaze_t, gaze, target)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class EpisodeSpec:
    index: int
    scene_index: int
    emotion: EmotionLabel
    subject_index: int


def episode_plan(per_class: int, n_scenes: int, n_subjects: int = 1) -> list:
    """Balanced plan: episode ``i`` has emotion ``i % 6``; each scene sees every emotion."""
    plan = []
    for i in range(per_class * len(EmotionLabel)):
        block = i // len(EmotionLabel)
        plan.append(EpisodeSpec(i, block % n_scenes, EmotionLabel(i % len(EmotionLabel)), block % max(n_subjects, 1)))
    return plan


def _gen_chunk(args):
    seed, scenes, policy, profiles, n_fix, specs = args
    out = []
    for sp in specs:
        rng = substream(seed, "episode", sp.index)
        out.append((sp.index, gen_scanpath(scenes[sp.scene_index], sp.emotion, policy,
                                           profiles[sp.subject_index], n_fix, stream=rng)))
    return out


def gen_episodes(seed: int, scenes: Sequence[Scene], policy: EmotionPolicy, profiles: Sequence[SubjectProfile],
                 per_class: int, n_fix: int = 8, workers: int = 1) -> list:
    """All episodes of :func:`episode_plan`; output order is by index for any worker count."""
    plan = episode_plan(per_class, len(scenes), len(profiles))
    if workers <= 1 or len(plan) < 2:
        results = _gen_chunk((seed, list(scenes), policy, list(profiles), n_fix, plan))
    else:
        chunks = [plan[k::workers] for k in range(workers)]
        jobs = [(seed, list(scenes), policy, list(profiles), n_fix, c) for c in chunks if c]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = [r for part in ex.map(_gen_chunk, jobs) for r in part]
    results.sort(key=lambda r: r[0])
    return [sp for _, sp in results]


def gen_scenes(seed: int, n_scenes: int, n_objects: int = 12, lighting: str = "normal",
               dynamic_fraction: float = 0.0, W: int = DEFAULT_W, H: int = DEFAULT_H) -> list:
    lightings = ("normal", "high", "low") if lighting == "mixed" else (lighting,)
    out = []
    for k in range(n_scenes):
        s, _ = gen_scene(stream_id(seed, "scene", k), n_objects, lightings[k % len(lightings)], dynamic_fraction,
                         W, H, scene_id=f"scene-{k:04d}", render=False)
        out.append(s)
    return out
