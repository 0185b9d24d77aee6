import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazeforge import pipelines as P


def test_merge_rejects_unknown_keys():
    base = P.default_config()
    assert P.merge_config(base, {"rig": {"n_cameras": 4}})["rig"]["n_cameras"] == 4
    assert base["rig"]["n_cameras"] == 8            # input untouched
    with pytest.raises(P.ConfigError, match="rig.n_camera"):
        P.merge_config(base, {"rig": {"n_camera": 4}})
    with pytest.raises(P.ConfigError, match="section"):
        P.merge_config(base, {"rig": 3})


def test_parse_override():
    assert P.parse_override("rig.n_cameras=4") == {"rig": {"n_cameras": 4}}
    assert P.parse_override("scene.lighting=dim") == {"scene": {"lighting": "dim"}}
    assert P.parse_override("subjects.offset_deg=[1, 2]") == {"subjects": {"offset_deg": [1, 2]}}
    assert P.parse_override("a=b=c") == {"a": "b=c"}
    for bad in ["rig.n_cameras", "rig..x=1", "=3"]:
        with pytest.raises(P.ConfigError):
            P.parse_override(bad)


def test_resolve_config(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 9, "fov": {"size": 32}}))
    cfg = P.resolve_config(f, ["fov.size=16"])
    assert cfg["seed"] == 9 and cfg["fov"]["size"] == 16
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(P.ConfigError):
        P.resolve_config(tmp_path / "bad.json")
    with pytest.raises(P.ConfigError):
        P.resolve_config(tmp_path / "absent.json")


def test_pipeline_spec_validation():
    spec = P.PipelineSpec({"pipeline": {"stages": ["rig", "observe", "triangulate"]}})
    assert spec.stages == ("rig", "observe", "triangulate") and spec.seed == 0
    for bad in [{"pipeline": {"stages": ["observe", "rig"]}}, {"pipeline": {"stages": ["rig", "rig"]}},
                {"pipeline": {"stages": ["warp"]}}, {"pipeline": {"stages": []}},
                {"pipeline": {"split": 1.0}}, {"pipeline": {"folds": 0}}, {"nope": 1}]:
        with pytest.raises(P.ConfigError):
            P.PipelineSpec(bad)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_stratified_split_properties(labels, ratio, seed):
    tr, te = P.stratified_split(labels, ratio, seed)
    assert sorted(tr + te) == list(range(len(labels)))
    y = np.asarray(labels)
    for c, n in Counter(labels).items():
        assert int(np.sum(y[tr] == c)) == int(round(n * ratio))
    assert (tr, te) == P.stratified_split(labels, ratio, seed)


@given(st.lists(st.integers(0, 5), min_size=2, max_size=60), st.integers(2, 6), st.integers(0, 1000))
def test_stratified_kfold_properties(labels, k, seed):
    folds = P.stratified_kfold(labels, k, seed)
    assert len(folds) == k
    tests = [f[1] for f in folds]
    assert sorted(sum(tests, [])) == list(range(len(labels)))
    y = np.asarray(labels)
    for tr, te in folds:
        assert set(tr).isdisjoint(te) and len(tr) + len(te) == len(labels)
    # per class, fold sizes differ by at most one
    for c in set(labels):
        sizes = [int(np.sum(y[te] == c)) for te in tests]
        assert max(sizes) - min(sizes) <= 1


def test_split_errors():
    with pytest.raises(P.ConfigError):
        P.stratified_split([0, 1], 0.0, 0)
    with pytest.raises(P.ConfigError):
        P.stratified_kfold([0, 1], 1, 0)


def test_in_fov():
    d = np.array([0.0, 0.0, 1.0])
    assert P.in_fov(d, d, 10.0)
    g = np.array([np.sin(np.radians(40)), 0.0, np.cos(np.radians(40))])
    assert P.in_fov(g, d, 90.0) and not P.in_fov(g, d, 70.0)


@pytest.fixture(scope="module")
def minimal_runs(tmp_path_factory):
    spec = P.PipelineSpec(P.minimal_config())
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    return P.run_pipeline(spec, a), P.run_pipeline(spec, b), a


def test_minimal_pipeline_is_deterministic(minimal_runs):
    s1, s2, out = minimal_runs
    assert s1["digest"] == s2["digest"] == P.run_dir_digest(out)
    for name in ["config.json", "run_manifest.json", "subjects.json", "scenes/records.jsonl",
                 "scanpaths/records.jsonl", "plots/confusion.svg", "plots/pr.svg", "plots/scanpath_0000.svg"]:
        assert (out / name).is_file(), name
    assert 0.0 <= s1["accuracy"] <= 1.0


def test_run_dir_digest_ignores_manifest_timestamps(tmp_path):
    (tmp_path / "x.txt").write_text("a")
    (tmp_path / "run_manifest.json").write_text(json.dumps({"seed": 1, "created": "2020"}))
    d = P.run_dir_digest(tmp_path)
    (tmp_path / "run_manifest.json").write_text(json.dumps({"created": "2031", "seed": 1}))
    assert P.run_dir_digest(tmp_path) == d
    (tmp_path / "x.txt").write_text("b")
    assert P.run_dir_digest(tmp_path) != d


def test_kfold_stage_writes_fold_table(tmp_path):
    cfg = P.merge_config(P.minimal_config(), {"scene": {"n_scenes": 4}, "scanpaths": {"per_class": 4},
                                              "train": {"epochs": 1},
                                              "pipeline": {"stages": ["sio", "train"], "folds": 2}})
    P.run_pipeline(P.PipelineSpec(cfg), tmp_path)
    rows = (tmp_path / "folds.csv").read_text().splitlines()
    assert rows[0] == "fold,n_train,n_test,accuracy,macro_f1,cawf1" and len(rows) == 3
    split = json.loads((tmp_path / "split.json").read_text())
    # the test folds partition every sequence
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == len(split["train"]) + len(split["test"])


def test_stage_prerequisites_reported(tmp_path):
    spec = P.PipelineSpec({"pipeline": {"stages": ["triangulate"]}})
    with pytest.raises(P.PipelineError) as ei:
        P.run_pipeline(spec, tmp_path)
    assert ei.value.stage == "triangulate"


def test_ablation_camera_count_rows():
    spec = P.PipelineSpec(P.merge_config(P.minimal_config(), {"ablation": {"n_trials": 60}}))
    rows = P.ablation_sweep(spec, "camera_count", [2, 8])
    assert [r["value"] for r in rows] == [2, 8]
    assert rows[1]["median_error_m"] < rows[0]["median_error_m"]
    text = P.ablation_csv(rows)
    assert text.splitlines()[0].startswith("axis,value,median_error_m")
    assert len(text.splitlines()) == 3


def test_ablation_fov_and_interval_rows():
    spec = P.PipelineSpec(P.minimal_config())
    fov = P.ablation_sweep(spec, "fov_deg", [30.0, 120.0])
    assert fov[0]["fov_coverage"] <= fov[1]["fov_coverage"]
    iv = P.ablation_sweep(spec, "projection_interval", [0.1, 0.3])
    assert {"gaze_accuracy", "fixations", "dropped"} <= set(iv[0])


def test_ablation_invalid_values():
    spec = P.PipelineSpec(P.minimal_config())
    with pytest.raises(P.ConfigError):
        P.ablation_sweep(spec, "lens", [1])
    with pytest.raises(P.ConfigError):
        P.ablation_sweep(spec, "camera_count", [1])
    with pytest.raises(P.ConfigError):
        P.ablation_sweep(spec, "camera_count", [2.5])
    with pytest.raises(P.ConfigError):
        P.ablation_sweep(spec, "fov_deg", [180.0])
    with pytest.raises(P.ConfigError):
        P.ablation_sweep(spec, "projection_interval", [0.0])
    with pytest.raises(P.ConfigError):
        P.ablation_sweep(spec, "fov_deg", [])
