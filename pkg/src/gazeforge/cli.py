"""Command-line entry point: ``gazeforge <subcommand> [options]``.

Exit codes: 0 success, 1 validation failure, 2 threshold failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
from collections import Counter
from dataclasses import asdict
from pathlib import Path

from . import calib, metrics, plots
from .core import (EmotionLabel, N_EMOTIONS, RunManifest, SchemaError, config_digest, load_dataset, save_dataset,
                   sha256_bytes, substream)
from .pipelines import (ConfigError, PipelineError, PipelineSpec, ablation_csv, ablation_sweep, default_config,
                        evaluate_model, minimal_config, resolve_config, run_pipeline, train_log_csv, write_eval)
from .simscene import (SubjectProfile, apply_bias, biased_profile, gen_episodes, gen_scenes, identity_profile,
                       load_policy)
from .sio import build_sio_dataset

EXIT_OK, EXIT_INVALID, EXIT_THRESHOLD = 0, 1, 2


class ThresholdFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("GAZEFORGE_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GAZEFORGE_SEED must be an integer, got {env!r}") from None
    return int(cfg["seed"])


def _config(args, base=None) -> dict:
    cfg = resolve_config(args.config, args.set or (), base)
    cfg["seed"] = _seed(args, cfg)
    return cfg


def _set(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    *head, last = dotted.split(".")
    d = cfg
    for k in head:
        d = d[k]
    d[last] = value


def _digests(out: Path) -> dict:
    return {p.relative_to(out).as_posix(): sha256_bytes(p.read_bytes())
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "run_manifest.json"}


def _write_manifest(out: Path, kind: str, cfg: dict, **extra) -> None:
    man = RunManifest(cfg["seed"], config_digest(cfg),
                      extra={"kind": kind, "config": cfg, "outputs": _digests(out), **extra})
    (out / "run_manifest.json").write_text(json.dumps(man.to_record(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


def _load_data(data: Path, which: str = "scanpaths") -> tuple:
    for sub in ("scenes", which):
        if not (data / sub / "records.jsonl").is_file():
            raise FileNotFoundError(f"{data / sub} is not a dataset directory")
    return load_dataset(data / "scenes"), load_dataset(data / which)


def _load_profiles(data: Path) -> list:
    path = data / "subjects.json"
    if not path.is_file():
        raise calib.CalibrationError(f"missing bias ground truth: {path} not found")
    return [SubjectProfile.from_record(r) for r in json.loads(path.read_text(encoding="utf-8"))]


def _class_counts(scanpaths) -> dict:
    c = Counter(sp.emotion.name for sp in scanpaths)
    return {EmotionLabel(k).name: c.get(EmotionLabel(k).name, 0) for k in range(N_EMOTIONS)}


def _sios(scenes, scanpaths, cfg):
    patch = int(cfg["train"]["net"]["patch"])
    seqs = build_sio_dataset(scenes, scanpaths, patch, skip_empty=True)
    keep = [i for i, s in enumerate(seqs) if s is not None]
    return [seqs[i] for i in keep], [scanpaths[i] for i in keep]


# ---------------------------------------------------------------------------
# subcommands


def cmd_scene(args) -> int:
    cfg = _config(args)
    _set(cfg, "scene.n_scenes", args.n)
    _set(cfg, "scene.n_objects", args.n_objects)
    sc = cfg["scene"]
    scenes = gen_scenes(cfg["seed"], int(sc["n_scenes"]), int(sc["n_objects"]), sc["lighting"],
                        float(sc["dynamic_fraction"]))
    out = Path(args.out)
    save_dataset(out / "scenes", scenes, RunManifest(cfg["seed"], config_digest(cfg)))
    _write_manifest(out, "scene", cfg)
    print(f"scenes: {len(scenes)} -> {out / 'scenes'}")
    return EXIT_OK


def cmd_scanpaths(args) -> int:
    cfg = _config(args)
    _set(cfg, "scanpaths.per_class", args.per_class)
    _set(cfg, "scanpaths.n_fix", args.n_fix)
    _set(cfg, "scanpaths.workers", args.workers)
    _set(cfg, "scanpaths.policy", args.policy)
    _set(cfg, "subjects.n", args.subjects)
    if args.biased:
        cfg["subjects"]["biased"] = True
    out = Path(args.out)
    scenes_dir = Path(args.scenes) if args.scenes else out / "scenes"
    scenes = load_dataset(scenes_dir)
    if scenes_dir.resolve() != (out / "scenes").resolve():
        shutil.copytree(scenes_dir, out / "scenes", dirs_exist_ok=True)
    ec, sc = cfg["scanpaths"], cfg["subjects"]
    policy = load_policy(ec["policy"])
    seed = cfg["seed"]
    if args.biased:
        profiles = [biased_profile(f"s-{k:02d}", substream(seed, "subject", k), tuple(sc["offset_deg"]),
                                   sc["sigma_deg"]) for k in range(int(sc["n"]))]
    elif args.subjects:
        profiles = [identity_profile(f"s-{k:02d}", math.radians(sc["sigma_deg"])) for k in range(int(sc["n"]))]
    else:
        profiles = [identity_profile()]
    eps = gen_episodes(seed, scenes, policy, profiles, int(ec["per_class"]), int(ec["n_fix"]), int(ec["workers"]))
    man = RunManifest(seed, config_digest(cfg))
    save_dataset(out / "scanpaths", eps, man)
    (out / "subjects.json").write_text(json.dumps([p.to_record() for p in profiles], indent=2) + "\n",
                                       encoding="utf-8")
    if args.biased:
        by_id = {p.id: p for p in profiles}
        observed = [apply_bias(sp, by_id[sp.subject_id], substream(seed, "bias", i))[0] for i, sp in enumerate(eps)]
        save_dataset(out / "observed", observed, man)
    counts = _class_counts(eps)
    _write_manifest(out, "scanpaths", cfg, class_counts=counts)
    print(f"episodes: {len(eps)} -> {out / 'scanpaths'}")
    for k, v in counts.items():
        print(f"  {k:<9} {v}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    profiles = _load_profiles(data)
    scenes = load_dataset(data / "scenes")
    cc = cfg["calib"]
    ccfg = calib.CalibrationConfig(int(cc["n_transitions"]), int(cc["n_holdout"]), float(cc["omega"]),
                                   v_threshold=float(cc["v_threshold"]), hint_deg=float(cc["hint_deg"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    print(f"{'subject':<12} {'pairs':>6} {'pre_deg':>9} {'post_deg':>9} {'reduction':>10}")
    for p in profiles:
        _, rep = calib.run_calibration(p, scenes, cfg["seed"], ccfg)
        r = rep.to_record()
        rows.append({**r, "reduction": rep.reduction})
        print(f"{p.id:<12} {rep.n_pairs:>6} {r['pre_median_deg']:>9.4f} {r['post_median_deg']:>9.4f} "
              f"{rep.reduction:>10.4f}")
    lines = ["subject_id,n_pairs,pre_median_deg,post_median_deg,reduction"]
    lines += [f"{r['subject_id']},{r['n_pairs']},{r['pre_median_deg']!r},{r['post_median_deg']!r},{r['reduction']!r}"
              for r in rows]
    (out / "calibration.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "calibration.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "calibrate", cfg)
    if args.min_improvement is not None:
        bad = [r["subject_id"] for r in rows if r["reduction"] < args.min_improvement]
        if bad:
            raise ThresholdFailure(f"median error reduction below {args.min_improvement} for {', '.join(bad)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import TrainConfig, train

    cfg = _config(args)
    _set(cfg, "train.epochs", args.epochs)
    cfg["train"]["seed"] = cfg["seed"]
    scenes, paths = _load_data(Path(args.data), args.paths)
    seqs, _ = _sios(scenes, paths, cfg)
    eval_set = None
    if args.test:
        tsc, tps = _load_data(Path(args.test), args.paths)
        eval_set, _ = _sios(tsc, tps, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(rec):
        extra = f" test_acc {rec['test_accuracy']:.4f}" if "test_accuracy" in rec else ""
        print(f"epoch {rec['epoch']:4d}  L_D {rec['L_D_total']:.4f}  L_G {rec['L_G_total']:.4f}  "
              f"train_acc {rec['train_accuracy']:.4f}{extra}", flush=True)

    state, hist = train(seqs, TrainConfig.from_dict(cfg["train"]), eval_set, log=None if args.quiet else log)
    state.save(out / "checkpoint.json")
    (out / "train_log.csv").write_text(train_log_csv(hist), encoding="utf-8")
    _write_manifest(out, "train", cfg, n_train=len(seqs))
    if args.min_accuracy is not None and hist and hist[-1]["train_accuracy"] < args.min_accuracy:
        raise ThresholdFailure(f"train accuracy {hist[-1]['train_accuracy']:.4f} < {args.min_accuracy}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import ModelState

    cfg = _config(args)
    model = Path(args.model)
    if model.is_dir():
        model = model / "checkpoint.json"
    if not model.is_file():
        raise FileNotFoundError(f"checkpoint {model} not found")
    state = ModelState.load(model)
    cfg["train"]["net"] = asdict(state.config.net)
    scenes, paths = _load_data(Path(args.data), args.paths)
    seqs, kept = _sios(scenes, paths, cfg)
    res = evaluate_model(state, seqs, scenes, kept, metrics.FccConfig(**cfg["eval"]))
    out = Path(args.out)
    write_eval(out, seqs, res)
    pdir = out / "plots"
    pdir.mkdir(exist_ok=True)
    (pdir / "confusion.svg").write_text(plots.confusion_svg(res.report.confusion), encoding="utf-8")
    (pdir / "pr.svg").write_text(plots.pr_svg(res.pr_curves), encoding="utf-8")
    _write_manifest(out, "eval", cfg, checkpoint_sha256=sha256_bytes(model.read_bytes()))
    f1 = res.report.f1
    print(f"accuracy  {res.report.accuracy:.4f}")
    print(f"macro_f1  {res.report.macro_f1:.4f}")
    print(f"cawf1     {res.cawf1:.4f}  (per-class F1 range [{f1.min():.4f}, {f1.max():.4f}])")
    print(f"fcc_mean  {res.fcc_mean:.4f}")
    fails = []
    if args.min_accuracy is not None and res.report.accuracy < args.min_accuracy:
        fails.append(f"accuracy {res.report.accuracy:.4f} < {args.min_accuracy}")
    if args.min_macro_f1 is not None and res.report.macro_f1 < args.min_macro_f1:
        fails.append(f"macro F1 {res.report.macro_f1:.4f} < {args.min_macro_f1}")
    if fails:
        raise ThresholdFailure("; ".join(fails))
    return EXIT_OK


def _read_pr_csv(text: str) -> dict:
    import csv
    import io

    curves: dict = {}
    for row in csv.DictReader(io.StringIO(text)):
        curves.setdefault(row["class"], []).append(
            metrics.PrPoint(float(row["threshold"]), float(row["recall"]), float(row["precision"])))
    return curves


def _read_confusion(text: str):
    import numpy as np

    lines = text.splitlines()
    start = next((i for i, l in enumerate(lines) if l.startswith("confusion,")), None)
    if start is None:
        raise metrics.MetricError("metrics table has no confusion block")
    return np.array([[int(x) for x in l.split(",")[1:]] for l in lines[start + 1:] if l.strip()])


def cmd_plot(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.data:
        scenes, paths = _load_data(Path(args.data), args.paths)
        if not paths:
            raise metrics.MetricError("no scanpaths to plot")
        idx = [int(x) for x in args.episodes.split(",")] if args.episodes else [0]
        by_id = {s.id: s for s in scenes}
        for i in idx:
            if not 0 <= i < len(paths):
                raise IndexError(f"episode {i} out of range (0..{len(paths) - 1})")
            sp = paths[i]
            p = out / f"scanpath_{i:04d}.svg"
            p.write_text(plots.scanpath_svg(by_id[sp.scene_id], sp), encoding="utf-8")
            written.append(p)
    if args.eval:
        ev = Path(args.eval)
        p = out / "confusion.svg"
        p.write_text(plots.confusion_svg(_read_confusion((ev / "metrics.csv").read_text(encoding="utf-8"))),
                     encoding="utf-8")
        written.append(p)
        curves = _read_pr_csv((ev / "pr.csv").read_text(encoding="utf-8"))
        if not curves:
            raise metrics.MetricError("PR table is empty")
        p = out / "pr.svg"
        p.write_text(plots.pr_svg(curves), encoding="utf-8")
        written.append(p)
    if not written:
        raise metrics.MetricError("nothing to plot: give --data and/or --eval")
    _write_manifest(out, "plot", cfg)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    base = minimal_config() if args.minimal else default_config()
    cfg = _config(args, base)
    spec = PipelineSpec(cfg)
    summary = run_pipeline(spec, args.out, log=None if args.quiet else print)
    for k in ("triangulation_median_m", "fov_coverage", "calibration_reduction", "accuracy", "macro_f1", "cawf1",
              "digest"):
        if k in summary:
            print(f"{k}: {summary[k]}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = minimal_config() if args.minimal else default_config()
    cfg = _config(args, base)
    values = [float(v) for v in args.values.split(",")] if args.values else None
    rows = ablation_sweep(PipelineSpec(cfg), args.axis, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = ablation_csv(rows)
    (out / f"ablation_{args.axis}.csv").write_text(text, encoding="utf-8")
    _write_manifest(out, "ablate", cfg, axis=args.axis)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $GAZEFORGE_SEED)")
    common.add_argument("--config", default=None, help="JSON file merged over the defaults")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")

    p = argparse.ArgumentParser(prog="gazeforge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scene", parents=[common], help="generate synthetic scenes")
    s.add_argument("--n", type=int, default=None, help="number of scenes")
    s.add_argument("--n-objects", type=int, default=None)
    s.set_defaults(func=cmd_scene)

    s = sub.add_parser("scanpaths", parents=[common], help="generate labelled viewing episodes")
    s.add_argument("--scenes", default=None, help="scene dataset (default: OUT/scenes)")
    s.add_argument("--per-class", type=int, default=None)
    s.add_argument("--n-fix", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--policy", default=None, help="emotion policy table (JSON lines)")
    s.add_argument("--subjects", type=int, default=None, help="number of simulated subjects")
    s.add_argument("--biased", action="store_true", help="give subjects affine gaze bias")
    s.set_defaults(func=cmd_scanpaths)

    s = sub.add_parser("calibrate", parents=[common], help="fit per-subject students on simulated transitions")
    s.add_argument("--data", required=True, help="dataset directory with scenes/ and subjects.json")
    s.add_argument("--min-improvement", type=float, default=None,
                   help="exit 2 if any subject's median error reduction is below this fraction")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("train", parents=[common], help="train the classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--test", default=None, help="optional held-out dataset tracked per epoch")
    s.add_argument("--paths", default="scanpaths", help="scanpath subdirectory to use")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--min-accuracy", type=float, default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="checkpoint file or training output directory")
    s.add_argument("--paths", default="scanpaths")
    s.add_argument("--min-accuracy", type=float, default=None)
    s.add_argument("--min-macro-f1", type=float, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", parents=[common], help="emit SVG figures")
    s.add_argument("--data", default=None, help="dataset directory for scanpath overlays")
    s.add_argument("--paths", default="scanpaths")
    s.add_argument("--episodes", default=None, help="comma-separated episode indices")
    s.add_argument("--eval", default=None, help="eval output directory for confusion and PR plots")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    s.add_argument("--minimal", action="store_true", help="start from the small smoke configuration")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("ablate", parents=[common], help="sweep one axis")
    s.add_argument("--axis", required=True, choices=["camera_count", "projection_interval", "fov_deg"])
    s.add_argument("--values", default=None, help="comma-separated axis values")
    s.add_argument("--minimal", action="store_true")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ThresholdFailure as exc:
        print(f"threshold failure: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, SchemaError, ValueError, KeyError, IndexError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
