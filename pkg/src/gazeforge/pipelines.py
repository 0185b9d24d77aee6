"""End-to-end orchestration: rig, observation, triangulation, FOV, bias, calibration, SIO, training, metrics."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import calib, metrics, plots
from .core import (EmotionLabel, ErpPoint, N_EMOTIONS, RunManifest, Scanpath, Fixation,
                   config_digest, save_dataset, substream)
from .geometry import (DegenerateConfigurationError, SphereDir, angles_to_uv, angles_to_vec, extract_fov,
                       ring_rig, save_rig, tangent_basis, triangulate, uv_to_angles, vec_to_angles,
                       write_pnm)
from .model import TrainConfig, predict, train
from .model.train import ModelState
from .simscene import (CoverageError, apply_bias, biased_profile, gen_episodes, gen_scenes, identity_profile,
                       load_policy, render_scene, simulate_multicam)
from .sio import build_sio_dataset

STAGES = ("rig", "observe", "triangulate", "fov", "bias", "calibrate", "sio", "train", "eval", "metrics")
AXES = {"camera_count": (2, 4, 8, 16), "projection_interval": (0.1, 0.2, 0.3), "fov_deg": None}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    return {
        "seed": 0,
        "scene": {"n_scenes": 30, "n_objects": 20, "lighting": "normal", "dynamic_fraction": 0.0},
        "scanpaths": {"per_class": 150, "n_fix": 6, "workers": 1, "policy": None},
        "subjects": {"n": 3, "biased": True, "offset_deg": [3.0, 6.0], "sigma_deg": 0.5},
        "rig": {"n_cameras": 8, "radius": 3.0, "pixel_noise": 0.5, "occlusion_prob": 0.0, "head_spread": 0.5},
        "fov": {"fov_deg": 120.0, "size": 64},
        "calib": {"n_transitions": 120, "n_holdout": 60, "hint_deg": 10.0, "omega": 0.5, "v_threshold": 1.0},
        "train": TrainConfig().to_dict(),
        "eval": {"alpha": 0.5, "beta": 0.5, "radius": 48},
        "pipeline": {"split": 0.7, "folds": 1, "stages": list(STAGES), "plots": 3},
        "ablation": {"n_trials": 300, "gaze_noise_deg": 1.5, "pixel_noise": 1.0, "occlusion_prob": 0.0},
    }


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Deep merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge_config(out[k], v, key)
        elif isinstance(out[k], dict):
            raise ConfigError(f"config key '{key}' is a section, not a value")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` as a nested dict; values are JSON when they parse, else strings."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".")]
    if not all(parts):
        raise ConfigError(f"bad override key '{key}'")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    d: dict = val
    for p in reversed(parts):
        d = {p: d}
    return d


def resolve_config(config_file=None, overrides: Sequence[str] = (), base: Optional[dict] = None) -> dict:
    cfg = default_config() if base is None else base
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {config_file} must hold a JSON object")
        cfg = merge_config(cfg, loaded)
    for o in overrides:
        cfg = merge_config(cfg, parse_override(o))
    return cfg


@dataclass(frozen=True)
class PipelineSpec:
    config: dict = field(default_factory=default_config)

    def __post_init__(self):
        cfg = merge_config(default_config(), self.config)
        object.__setattr__(self, "config", cfg)
        stages = list(cfg["pipeline"]["stages"])
        if not stages or any(s not in STAGES for s in stages):
            raise ConfigError(f"stages must be drawn from {STAGES}")
        if stages != sorted(stages, key=STAGES.index) or len(set(stages)) != len(stages):
            raise ConfigError("stages must follow the fixed order " + " -> ".join(STAGES))
        if not 0.0 < float(cfg["pipeline"]["split"]) < 1.0:
            raise ConfigError("split ratio must lie in (0, 1)")
        if int(cfg["pipeline"]["folds"]) < 1:
            raise ConfigError("folds must be >= 1")

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    @property
    def stages(self) -> tuple:
        return tuple(self.config["pipeline"]["stages"])

    def section(self, name: str) -> dict:
        return self.config[name]


def minimal_config() -> dict:
    """Small, fast configuration used for smoke runs."""
    return merge_config(default_config(), {
        "scene": {"n_scenes": 10},
        "scanpaths": {"per_class": 10},
        "subjects": {"n": 2},
        "calib": {"n_transitions": 60, "n_holdout": 20},
        "train": {"epochs": 5},
        "pipeline": {"plots": 1},
    })


# ---------------------------------------------------------------------------
# splits


def stratified_split(labels: Sequence[int], ratio: float, seed: int) -> tuple:
    """``(train_idx, test_idx)``; class ``c`` contributes ``round(n_c * ratio)`` training items."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError("split ratio must lie in (0, 1)")
    y = np.asarray(labels, dtype=int)
    rng = substream(seed, "split")
    tr, te = [], []
    for c in range(N_EMOTIONS):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(len(idx) * ratio))
        tr += idx[:k].tolist()
        te += idx[k:].tolist()
    return sorted(tr), sorted(te)


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> list:
    """``k`` disjoint test folds; each class is dealt round-robin after a seeded shuffle."""
    if k < 2:
        raise ConfigError("k-fold needs k >= 2")
    y = np.asarray(labels, dtype=int)
    rng = substream(seed, "kfold")
    folds: list = [[] for _ in range(k)]
    for c in range(N_EMOTIONS):
        idx = np.flatnonzero(y == c)
        for j, i in enumerate(idx[rng.permutation(len(idx))]):
            folds[j % k].append(int(i))
    all_idx = set(range(len(y)))
    return [(sorted(all_idx - set(f)), sorted(f)) for f in folds]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, eq=False)
class EvalResult:
    report: metrics.ClassificationReport
    probs: np.ndarray
    fcc_scores: np.ndarray
    fcc_mean: float
    cawf1: float
    cawf1_strict: float
    pr_curves: dict

    def extra(self) -> dict:
        return {"fcc_mean": self.fcc_mean, "cawf1": self.cawf1, "cawf1_strict": self.cawf1_strict}


def _longest_point(scanpath: Optional[Scanpath], seq) -> ErpPoint:
    if scanpath is not None:
        f = max(scanpath.fixations, key=lambda f: f.duration)  # first on ties
        return f.point
    it = max(seq.items, key=lambda it: it.duration)
    W, H = seq.gaze_points[0].W, seq.gaze_points[0].H
    return ErpPoint(min(it.pos_x * W, W - 1e-9), min(it.pos_y * H, H - 1e-9), W, H)


def evaluate_model(state: ModelState, sios: Sequence, scenes: Sequence, scanpaths: Optional[Sequence] = None,
                   fcc_config: metrics.FccConfig = metrics.FccConfig()) -> EvalResult:
    """Classification report, FCC-weighted F1 and per-class PR curves on ``sios``."""
    if not sios:
        raise metrics.MetricError("nothing to evaluate")
    probs = predict(state.eval_generator, sios, out_floor=state.config.net.out_floor)
    y = np.array([int(s.emotion) for s in sios])
    report = metrics.classification_report(y, np.argmax(probs, 1))
    by_id = {s.id: s for s in scenes}
    rasters: dict = {}
    global_e: dict = {}
    fx = metrics.EXTRACTORS[fcc_config.extractor]
    records = []
    for i, seq in enumerate(sios):
        scene = by_id[seq.scene_id]
        if scene.id not in rasters:
            rasters[scene.id] = render_scene(scene)
            global_e[scene.id] = fx(rasters[scene.id])
        raster = rasters[scene.id]
        gp = _longest_point(None if scanpaths is None else scanpaths[i], seq)
        attended = metrics.attended_render(raster, [scene.object(o).bbox for o in seq.object_ids])
        v_local = fx(metrics.window(attended, gp, fcc_config.radius))
        e_local = fx(metrics.window(raster, gp, fcc_config.radius))
        records.append(metrics.EvalRecord(seq.emotion, probs[i], gp, scene.id, v_local, fx(attended),
                                          e_local, global_e[scene.id]))
    scores, mean = metrics.fcc(records, fcc_config)
    per_class = report.per_class_f1()
    caw = metrics.cawf1(records, per_class, scores)
    caw_s = metrics.cawf1(records, per_class, scores, strict=True)
    curves = {}
    for c in range(N_EMOTIONS):
        if np.any(y == c):
            curves[EmotionLabel(c).name] = metrics.pr_curve(y == c, probs[:, c])
    return EvalResult(report, probs, scores, mean, caw, caw_s, curves)


def predictions_csv(sios: Sequence, result: EvalResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "scene_id", "true", "pred", "fcc"] + [EmotionLabel(c).name for c in range(N_EMOTIONS)])
    for i, seq in enumerate(sios):
        p = result.probs[i]
        w.writerow([i, seq.scene_id, seq.emotion.name, EmotionLabel(int(np.argmax(p))).name,
                    repr(float(result.fcc_scores[i]))] + [repr(float(x)) for x in p])
    return buf.getvalue()


def write_eval(out: Path, sios: Sequence, result: EvalResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.metrics_csv(result.report, result.extra()), encoding="utf-8")
    (out / "pr.csv").write_text(metrics.pr_csv(result.pr_curves), encoding="utf-8")
    (out / "predictions.csv").write_text(predictions_csv(sios, result), encoding="utf-8")


# ---------------------------------------------------------------------------
# simulation helpers shared by the pipeline and the ablations


def _head_points(rng, n: int, spread: float, target=(0.0, 0.0, 1.6)) -> np.ndarray:
    r = spread * np.sqrt(rng.random(n))
    a = rng.uniform(-math.pi, math.pi, n)
    z = target[2] + rng.normal(0.0, 0.05, n)
    return np.stack([target[0] + r * np.cos(a), target[1] + r * np.sin(a), z], axis=1)


def triangulation_trials(n_cameras: int, n_trials: int, seed: int, pixel_noise: float, occlusion_prob: float,
                         spread: float = 0.5, radius: float = 3.0) -> dict:
    """Median triangulation error (m) over simulated head positions; coverage failures are counted."""
    rig = ring_rig(n_cameras, radius=radius)
    rng = substream(seed, "triangulate", n_cameras)
    pts = _head_points(rng, n_trials, spread)
    errs, coverage, degenerate = [], 0, 0
    for p in pts:
        try:
            obs = simulate_multicam(rig, p, pixel_noise, rng, occlusion_prob)
            X, _ = triangulate([(cam, px) for _, cam, px in obs])
            errs.append(float(np.linalg.norm(X - p)))
        except CoverageError:
            coverage += 1
        except DegenerateConfigurationError:
            degenerate += 1
    return {"n_trials": n_trials, "median_error_m": float(np.median(errs)) if errs else float("nan"),
            "coverage_errors": coverage, "degenerate": degenerate, "errors": errs}


def _noisy_point(p: ErpPoint, rng, sigma: float) -> ErpPoint:
    lon, lat = uv_to_angles(p.u, p.v, p.W, p.H)
    d = angles_to_vec(float(lon) + rng.normal(0, sigma) / max(math.cos(float(lat)), 1e-3),
                      float(np.clip(float(lat) + rng.normal(0, sigma), -math.pi / 2, math.pi / 2)))
    lo, la = vec_to_angles(d)
    u, v = angles_to_uv(lo, la, p.W, p.H)
    return ErpPoint(min(float(u), math.nextafter(p.W, 0)), min(float(v), math.nextafter(p.H, 0)), p.W, p.H)


def sampled_fixations(scanpath: Scanpath, interval: float, rng, noise_rad: float) -> tuple:
    """Gaze sampled every ``interval`` s from a random phase with angular noise.

    A fixation is recovered when at least one sample falls inside it; its
    estimate is the circular mean of those samples.  Returns
    ``(estimates, dropped)`` with ``None`` for dropped fixations.
    """
    end = scanpath.fixations[-1].t_start + scanpath.fixations[-1].duration
    t0 = scanpath.fixations[0].t_start + rng.uniform(0.0, interval)
    times = np.arange(t0, end, interval)
    est, dropped = [], 0
    for f in scanpath.fixations:
        hit = times[(times >= f.t_start) & (times < f.t_start + f.duration)]
        if len(hit) == 0:
            est.append(None)
            dropped += 1
            continue
        samples = [_noisy_point(f.point, rng, noise_rad) for _ in hit]
        lon, lat = uv_to_angles(np.array([s.u for s in samples]), np.array([s.v for s in samples]), f.point.W,
                                f.point.H)
        m = angles_to_vec(lon, lat).mean(axis=0)
        lo, la = vec_to_angles(m / np.linalg.norm(m))
        u, v = angles_to_uv(lo, la, f.point.W, f.point.H)
        est.append(ErpPoint(min(float(u), math.nextafter(f.point.W, 0)),
                            min(float(v), math.nextafter(f.point.H, 0)), f.point.W, f.point.H))
    return est, dropped


def interval_accuracy(scenes, scanpaths, interval: float, seed: int, noise_deg: float) -> dict:
    """Percent of fixations whose sampled estimate lands in the true target's box."""
    by_id = {s.id: s for s in scenes}
    rng = substream(seed, "interval", repr(float(interval)))
    hits, total, dropped = 0, 0, 0
    for sp in scanpaths:
        scene = by_id[sp.scene_id]
        est, d = sampled_fixations(sp, interval, rng, math.radians(noise_deg))
        dropped += d
        for f, e in zip(sp.fixations, est):
            total += 1
            if e is not None:
                hits += metrics.gaze_accuracy(e, [scene.object(f.target_id).bbox])
    return {"gaze_accuracy": 100.0 * hits / total, "fixations": total, "dropped": dropped}


def in_fov(g: np.ndarray, d: np.ndarray, fov_deg: float) -> bool:
    """Whether direction ``d`` falls inside the square gnomonic view of width ``fov_deg`` around ``g``."""
    c = float(np.dot(g, d))
    if c <= 0:
        return False
    east, north = tangent_basis(g)
    T = math.tan(math.radians(fov_deg) / 2)
    return abs(np.dot(d, east) / c) <= T and abs(np.dot(d, north) / c) <= T


def fov_coverage(scanpaths_true, centers, fov_deg: float) -> float:
    """Fraction of true fixations inside the view centred on each episode's estimated gaze."""
    inside, total = 0, 0
    for sp, g in zip(scanpaths_true, centers):
        for f in sp.fixations:
            lon, lat = uv_to_angles(f.point.u, f.point.v, f.point.W, f.point.H)
            inside += int(in_fov(g, angles_to_vec(lon, lat), fov_deg))
            total += 1
    return inside / total


# ---------------------------------------------------------------------------
# pipeline


def _profiles(cfg: dict, seed: int) -> list:
    sc = cfg["subjects"]
    n = int(sc["n"])
    if n < 1:
        raise ConfigError("need at least one subject")
    if not sc["biased"]:
        return [identity_profile(f"s-{k:02d}", math.radians(sc["sigma_deg"])) for k in range(n)]
    return [biased_profile(f"s-{k:02d}", substream(seed, "subject", k), tuple(sc["offset_deg"]), sc["sigma_deg"])
            for k in range(n)]


def calibrated_scanpath(sp: Scanpath, model: calib.StudentModel) -> Scanpath:
    f0 = sp.fixations[0].point
    lon, lat = uv_to_angles(np.array([f.point.u for f in sp.fixations]),
                            np.array([f.point.v for f in sp.fixations]), f0.W, f0.H)
    clon, clat = calib.apply_student(model, lon, lat)
    u, v = angles_to_uv(clon, clat, f0.W, f0.H)
    fixes = tuple(Fixation(ErpPoint(min(float(a), math.nextafter(f0.W, 0)), min(float(b), math.nextafter(f0.H, 0)),
                                    f0.W, f0.H), f.t_start, f.duration, f.target_id)
                  for f, a, b in zip(sp.fixations, u, v))
    return Scanpath(fixes, sp.subject_id, sp.emotion, sp.scene_id)


def _csv(rows: list, header: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def train_log_csv(history: list) -> str:
    if not history:
        return ""
    keys = list(history[0].keys())
    return _csv([[h.get(k, "") for k in keys] for h in history], keys)


TIMESTAMP_KEYS = ("created",)


def run_dir_digest(path) -> str:
    """sha256 over every file under ``path``; timestamp fields in JSON manifests are dropped."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        data = p.read_bytes()
        if p.suffix == ".json" and "manifest" in p.name:
            rec = json.loads(data)
            for k in TIMESTAMP_KEYS:
                rec.pop(k, None)
            data = json.dumps(rec, sort_keys=True).encode()
        h.update(rel.encode() + b"\0" + hashlib.sha256(data).digest())
    return h.hexdigest()


def run_pipeline(spec: PipelineSpec, out, log: Optional[Callable[[str], None]] = None) -> dict:
    """Run the configured stages into directory ``out``; returns a summary dict."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, seed = spec.config, spec.seed
    say = log or (lambda s: None)
    ctx: dict = {}
    summary: dict = {"stages": list(spec.stages)}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def need(*keys):
        missing = [k for k in keys if k not in ctx]
        if missing:
            raise ConfigError(f"requires outputs of earlier stages: {missing}")
        return [ctx[k] for k in keys]

    def base_data():
        # scenes, episodes and subjects are shared inputs of several stages
        if "scenes" in ctx:
            return
        sc, ec = cfg["scene"], cfg["scanpaths"]
        scenes = gen_scenes(seed, int(sc["n_scenes"]), int(sc["n_objects"]), sc["lighting"],
                            float(sc["dynamic_fraction"]))
        policy = load_policy(ec["policy"])
        profiles = _profiles(cfg, seed)
        eps = gen_episodes(seed, scenes, policy, profiles, int(ec["per_class"]), int(ec["n_fix"]),
                           int(ec["workers"]))
        man = RunManifest(seed, config_digest(cfg))
        save_dataset(out / "scenes", scenes, man)
        save_dataset(out / "scanpaths", eps, man)
        (out / "subjects.json").write_text(json.dumps([p.to_record() for p in profiles], indent=2) + "\n",
                                           encoding="utf-8")
        ctx.update(scenes=scenes, episodes=eps, profiles=profiles)

    def st_rig():
        rc = cfg["rig"]
        rig = ring_rig(int(rc["n_cameras"]), radius=float(rc["radius"]))
        save_rig(out / "rig.json", rig)
        ctx["rig"] = rig

    def st_observe():
        base_data()
        (rig,) = need("rig")
        rc = cfg["rig"]
        rng = substream(seed, "observe")
        heads = _head_points(rng, len(ctx["episodes"]), float(rc["head_spread"]))
        obs, failures = [], 0
        for p in heads:
            try:
                obs.append(simulate_multicam(rig, p, float(rc["pixel_noise"]), rng, float(rc["occlusion_prob"])))
            except CoverageError:
                obs.append(None)
                failures += 1
        ctx.update(heads=heads, observations=obs)
        summary["coverage_errors"] = failures

    def st_triangulate():
        heads, obs = need("heads", "observations")
        rows, errs = [], []
        for i, (p, o) in enumerate(zip(heads, obs)):
            if o is None:
                rows.append([i, "coverage", "", ""])
                continue
            try:
                X, rms = triangulate([(cam, px) for _, cam, px in o])
            except DegenerateConfigurationError:
                rows.append([i, "degenerate", "", ""])
                continue
            e = float(np.linalg.norm(X - p))
            errs.append(e)
            rows.append([i, "ok", e, float(rms)])
        (out / "triangulation.csv").write_text(_csv(rows, ["episode", "status", "error_m", "rms_px"]),
                                               encoding="utf-8")
        summary["triangulation_median_m"] = float(np.median(errs)) if errs else None

    def st_fov():
        base_data()
        fc = cfg["fov"]
        by_id = {s.id: s for s in ctx["scenes"]}
        centers = []
        for sp in ctx["episodes"]:
            f = sp.fixations[0].point
            lon, lat = uv_to_angles(f.u, f.v, f.W, f.H)
            centers.append(angles_to_vec(lon, lat))
        cov = fov_coverage(ctx["episodes"], centers, float(fc["fov_deg"]))
        # one rendered view per scene as a visual check
        (out / "fov").mkdir(exist_ok=True)
        for sid in sorted({sp.scene_id for sp in ctx["episodes"]})[:3]:
            sp = next(e for e in ctx["episodes"] if e.scene_id == sid)
            f = sp.fixations[0].point
            lon, lat = uv_to_angles(f.u, f.v, f.W, f.H)
            view = extract_fov(render_scene(by_id[sid]), SphereDir.from_angles(float(lon), float(lat)),
                               float(fc["fov_deg"]), int(fc["size"]), int(fc["size"]))
            write_pnm(out / "fov" / f"{sid}.ppm", view.pixels)
        summary["fov_coverage"] = cov

    def st_bias():
        base_data()
        by_prof = {p.id: p for p in ctx["profiles"]}
        observed = []
        for i, sp in enumerate(ctx["episodes"]):
            o, _ = apply_bias(sp, by_prof[sp.subject_id], substream(seed, "bias", i))
            observed.append(o)
        save_dataset(out / "observed", observed, RunManifest(seed, config_digest(cfg)))
        ctx["observed"] = observed

    def st_calibrate():
        base_data()
        (observed,) = need("observed")
        cc = cfg["calib"]
        ccfg = calib.CalibrationConfig(int(cc["n_transitions"]), int(cc["n_holdout"]), float(cc["omega"]),
                                       v_threshold=float(cc["v_threshold"]), hint_deg=float(cc["hint_deg"]))
        models, rows = {}, []
        for p in ctx["profiles"]:
            m, rep = calib.run_calibration(p, ctx["scenes"], seed, ccfg)
            models[p.id] = m
            r = rep.to_record()
            rows.append([p.id, r["n_pairs"], r["pre_median_deg"], r["post_median_deg"], rep.reduction])
        (out / "calibration.csv").write_text(
            _csv(rows, ["subject_id", "n_pairs", "pre_median_deg", "post_median_deg", "reduction"]), encoding="utf-8")
        cal = [calibrated_scanpath(sp, models[sp.subject_id]) for sp in observed]
        save_dataset(out / "calibrated", cal, RunManifest(seed, config_digest(cfg)))
        ctx["calibrated"] = cal
        summary["calibration_reduction"] = [r[-1] for r in rows]

    def st_sio():
        base_data()
        paths = ctx.get("calibrated") or ctx.get("observed") or ctx["episodes"]
        sios = build_sio_dataset(ctx["scenes"], paths, int(cfg["train"]["net"]["patch"]), skip_empty=True)
        keep = [i for i, s in enumerate(sios) if s is not None]
        ctx["sios"] = [sios[i] for i in keep]
        ctx["sio_paths"] = [paths[i] for i in keep]
        with open(out / "sio.jsonl", "w", encoding="utf-8") as fh:
            for i in keep:
                fh.write(json.dumps(sios[i].to_record(), sort_keys=True) + "\n")
        summary["sio_dropped"] = len(sios) - len(keep)

    def st_train():
        (sios,) = need("sios")
        y = [int(s.emotion) for s in sios]
        tr, te = stratified_split(y, float(cfg["pipeline"]["split"]), seed)
        (out / "split.json").write_text(json.dumps({"train": tr, "test": te}) + "\n", encoding="utf-8")
        tcfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})
        state, hist = train([sios[i] for i in tr], tcfg)
        state.save(out / "checkpoint.json")
        (out / "train_log.csv").write_text(train_log_csv(hist), encoding="utf-8")
        ctx.update(state=state, train_idx=tr, test_idx=te)
        folds = int(cfg["pipeline"]["folds"])
        if folds > 1:
            rows = []
            for k, (ftr, fte) in enumerate(stratified_kfold(y, folds, seed)):
                st, _ = train([sios[i] for i in ftr], tcfg)
                res = evaluate_model(st, [sios[i] for i in fte], ctx["scenes"], [ctx["sio_paths"][i] for i in fte],
                                     metrics.FccConfig(**cfg["eval"]))
                rows.append([k, len(ftr), len(fte), res.report.accuracy, res.report.macro_f1, res.cawf1])
            (out / "folds.csv").write_text(_csv(rows, ["fold", "n_train", "n_test", "accuracy", "macro_f1",
                                                       "cawf1"]), encoding="utf-8")

    def st_eval():
        state, sios, te = need("state", "sios", "test_idx")
        test = [sios[i] for i in te]
        res = evaluate_model(state, test, ctx["scenes"], [ctx["sio_paths"][i] for i in te],
                             metrics.FccConfig(**cfg["eval"]))
        write_eval(out, test, res)
        ctx["eval"] = res
        summary.update(accuracy=res.report.accuracy, macro_f1=res.report.macro_f1, cawf1=res.cawf1)

    def st_metrics():
        (res,) = need("eval")
        pdir = out / "plots"
        pdir.mkdir(exist_ok=True)
        (pdir / "confusion.svg").write_text(plots.confusion_svg(res.report.confusion), encoding="utf-8")
        (pdir / "pr.svg").write_text(plots.pr_svg(res.pr_curves), encoding="utf-8")
        by_id = {s.id: s for s in ctx["scenes"]}
        for i, sp in enumerate(ctx["episodes"][:int(cfg["pipeline"]["plots"])]):
            (pdir / f"scanpath_{i:04d}.svg").write_text(plots.scanpath_svg(by_id[sp.scene_id], sp), encoding="utf-8")

    runners = {"rig": st_rig, "observe": st_observe, "triangulate": st_triangulate, "fov": st_fov, "bias": st_bias,
               "calibrate": st_calibrate, "sio": st_sio, "train": st_train, "eval": st_eval,
               "metrics": st_metrics}
    for name in spec.stages:
        say(f"stage {name}")
        try:
            runners[name]()
        except Exception as exc:
            raise PipelineError(name, exc) from exc
    man = RunManifest(seed, config_digest(cfg), extra={"kind": "pipeline", "config": cfg,
                                                       "summary": _jsonable(summary)})
    (out / "run_manifest.json").write_text(json.dumps(man.to_record(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    summary["digest"] = run_dir_digest(out)
    return summary


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


# ---------------------------------------------------------------------------
# ablations


def ablation_sweep(spec: PipelineSpec, axis: str, values: Optional[Sequence] = None) -> list:
    """One row per axis value, every run sharing one seed.

    Only the stages the axis influences are re-simulated: camera count
    drives observation and triangulation, the projection interval drives gaze
    sampling, and the FOV width drives view coverage.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}'; choose from {sorted(AXES)}")
    values = list(values if values is not None else (AXES[axis] or (60.0, 90.0, 120.0)))
    if not values:
        raise ConfigError("no axis values given")
    cfg, seed = spec.config, spec.seed
    ac = cfg["ablation"]
    rows = []
    if axis == "camera_count":
        for v in values:
            if int(v) != v or int(v) < 2:
                raise ConfigError(f"camera_count values must be integers >= 2, got {v}")
            r = triangulation_trials(int(v), int(ac["n_trials"]), seed, float(ac["pixel_noise"]),
                                     float(ac["occlusion_prob"]), float(cfg["rig"]["head_spread"]),
                                     float(cfg["rig"]["radius"]))
            rows.append({"axis": axis, "value": int(v), "median_error_m": r["median_error_m"],
                         "coverage_errors": r["coverage_errors"], "degenerate": r["degenerate"],
                         "n_trials": r["n_trials"]})
        return rows

    sc, ec = cfg["scene"], cfg["scanpaths"]
    scenes = gen_scenes(seed, int(sc["n_scenes"]), int(sc["n_objects"]), sc["lighting"], float(sc["dynamic_fraction"]))
    eps = gen_episodes(seed, scenes, load_policy(ec["policy"]), [identity_profile()], int(ec["per_class"]),
                       int(ec["n_fix"]), int(ec["workers"]))
    if axis == "projection_interval":
        for v in values:
            v = float(v)
            if not v > 0:
                raise ConfigError(f"projection_interval must be > 0, got {v}")
            r = interval_accuracy(scenes, eps, v, seed, float(ac["gaze_noise_deg"]))
            rows.append({"axis": axis, "value": v, **r})
        return rows

    # fov_deg: view centred on the noisy first-fixation estimate of each episode
    rng = substream(seed, "fov-centre")
    centers = []
    for sp in eps:
        p = _noisy_point(sp.fixations[0].point, rng, math.radians(float(ac["gaze_noise_deg"])))
        lon, lat = uv_to_angles(p.u, p.v, p.W, p.H)
        centers.append(angles_to_vec(lon, lat))
    for v in values:
        v = float(v)
        if not 0 < v < 180:
            raise ConfigError(f"fov_deg must lie in (0, 180), got {v}")
        rows.append({"axis": axis, "value": v, "fov_coverage": fov_coverage(eps, centers, v)})
    return rows


def ablation_csv(rows: list) -> str:
    if not rows:
        return ""
    keys = list(rows[0].keys())
    return _csv([[r.get(k, "") for k in keys] for r in rows], keys)
