import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazeforge.core import (BoundingBox, EmotionLabel, ErpPoint, Fixation, RunManifest, Scanpath, Scene,
                            SceneObject, SchemaError, angular_distance, config_digest, dataset_digest,
                            dumps_record, from_record, load_dataset, load_manifest, rng_stream, save_dataset,
                            stream_id, substream, to_record, wrap_angle)


def _scanpath(k, n=4, W=64, H=32):
    fx = [Fixation(ErpPoint((k * 7 + i * 5) % W + 0.25, (k * 3 + i) % H + 0.5, W, H), 0.1 * i + 0.05,
                   0.1 + 0.01 * ((k + i) % 5), target_id=(k + i) % 3) for i in range(n)]
    return Scanpath(tuple(fx), f"s-{k % 3}", EmotionLabel(k % 6), f"scene-{k % 4:04d}")


def _scene():
    objs = (SceneObject(0, BoundingBox(1, 2, 10, 8), "lamp", 0.5, 0.25),
            SceneObject(1, BoundingBox(20, 3, 30.5, 12), "door", 1.0, 0.0, True, ErpPoint(21.0, 4.0, 64, 32)))
    return Scene("scene-x", 64, 32, objs, background_seed=99, lighting="low", dynamic=True)


def test_emotion_label_order_and_parse():
    assert [e.name for e in EmotionLabel] == ["Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise"]
    assert len(EmotionLabel) == 6
    assert EmotionLabel.parse("Fear") is EmotionLabel.Fear
    assert EmotionLabel.parse(4) is EmotionLabel.Sad
    with pytest.raises(SchemaError):
        EmotionLabel.parse("Bored")


def test_erp_point_bounds():
    ErpPoint(0.0, 0.0, 64, 32)
    with pytest.raises(SchemaError):
        ErpPoint(64.0, 0.0, 64, 32)
    with pytest.raises(SchemaError):
        ErpPoint(0.0, -0.1, 64, 32)
    with pytest.raises(SchemaError):
        ErpPoint(1.0, 1.0, 60, 32)


def test_fixation_and_scanpath_invariants():
    p = ErpPoint(1, 1, 64, 32)
    with pytest.raises(SchemaError):
        Fixation(p, 0.0, 0.0)
    a, b = Fixation(p, 0.0, 0.1), Fixation(p, 0.0, 0.1)
    with pytest.raises(SchemaError):
        Scanpath((a, b), "s", 0, "x")
    with pytest.raises(SchemaError):
        Scanpath((), "s", 0, "x")


def test_bbox_inclusive_and_validation():
    b = BoundingBox(1, 2, 3, 4)
    assert b.contains(1, 2) and b.contains(3, 4) and not b.contains(3.0001, 4)
    assert b.area == 4 and b.centroid == (2.0, 3.0)
    with pytest.raises(SchemaError):
        BoundingBox(3, 2, 3, 4)


def test_scene_object_and_scene_invariants():
    with pytest.raises(SchemaError):
        SceneObject(0, BoundingBox(0, 0, 1, 1), "x", 1.5, 0.5)
    with pytest.raises(SchemaError):
        SceneObject(0, BoundingBox(0, 0, 1, 1), "x", 0.5, 0.5, dynamic=True)
    with pytest.raises(SchemaError):
        SceneObject(0, BoundingBox(0, 0, 1, 1), "x", 0.5, 0.5, True, ErpPoint(5, 5, 64, 32))
    o = SceneObject(0, BoundingBox(0, 0, 1, 1), "x", 0.5, 0.5)
    with pytest.raises(SchemaError):
        Scene("s", 64, 32, (o, o), 0)
    with pytest.raises(SchemaError):
        Scene("s", 64, 32, (), 0)
    with pytest.raises(SchemaError):
        Scene("s", 64, 32, (SceneObject(0, BoundingBox(60, 0, 65, 1), "x", 0, 0),), 0)


def test_scene_round_trip(tmp_path):
    s = _scene()
    save_dataset(tmp_path / "d", [s])
    assert load_dataset(tmp_path / "d") == [s]


def test_empty_dataset_has_valid_manifest(tmp_path):
    save_dataset(tmp_path / "e", [], RunManifest(3, config_digest({"a": 1})))
    assert (tmp_path / "e" / "records.jsonl").read_bytes() == b""
    man = load_manifest(tmp_path / "e")
    assert man["n_records"] == 0 and man["seed"] == 3 and "tool_version" in man
    assert man["records_digest"] == hashlib.sha256(b"").hexdigest()
    assert load_dataset(tmp_path / "e") == []


def test_hundred_scanpaths_digest(tmp_path, golden):
    sps = [_scanpath(k) for k in range(100)]
    save_dataset(tmp_path / "a", sps)
    frozen = json.loads((golden / "digests.json").read_text())["scanpaths_100"]
    assert dataset_digest(tmp_path / "a") == frozen
    again = load_dataset(tmp_path / "a")
    assert again == sps
    save_dataset(tmp_path / "b", again)
    assert dataset_digest(tmp_path / "b") == frozen


def test_schema_error_names_field():
    rec = to_record(_scanpath(1))
    del rec["fixations"][2]["duration"]
    with pytest.raises(SchemaError) as ei:
        from_record(rec)
    assert ei.value.field == "fixations[2].duration"
    rec = to_record(_scene())
    rec["objects"][1]["bbox"] = [1, 2, 3]
    with pytest.raises(SchemaError, match=r"objects\[1\]\.bbox"):
        from_record(rec)
    with pytest.raises(SchemaError, match="kind"):
        from_record({"kind": "nope"})


def test_load_reports_bad_line(tmp_path):
    save_dataset(tmp_path / "d", [_scene()])
    with open(tmp_path / "d" / "records.jsonl", "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(SchemaError, match="line 2"):
        load_dataset(tmp_path / "d")


def test_manifest_without_time():
    m = RunManifest(5, "abc", extra={"k": 1})
    rec = m.to_record(include_time=False)
    assert rec == {"seed": 5, "config_digest": "abc", "tool_version": m.tool_version, "k": 1}
    assert "created" in m.to_record()


def test_rng_determinism_and_separation():
    a = rng_stream(42, 0).random(10)
    assert np.array_equal(a, rng_stream(42, 0).random(10))
    assert not np.array_equal(a, rng_stream(42, 1).random(10))


def test_rng_golden(golden):
    rec = json.loads((golden / "rng_7_3.json").read_text())
    got = [repr(float(x)) for x in rng_stream(7, 3).random(5)]
    assert got == rec["random"]


def test_substream_keys():
    assert stream_id("episode", 3) == stream_id("episode", "3")
    assert stream_id("episode", 3) != stream_id("episode", 4)
    assert np.array_equal(substream(1, "a", 2).random(4), rng_stream(1, stream_id("a", 2)).random(4))


def test_dumps_record_canonical():
    assert dumps_record({"b": 1, "a": [1.5, "é"]}) == '{"a":[1.5,"é"],"b":1}'
    assert config_digest({"x": 1, "y": 2}) == config_digest({"y": 2, "x": 1})


def test_angles_helpers():
    assert angular_distance([1, 0, 0], [0, 1, 0]) == pytest.approx(math.pi / 2)
    assert angular_distance([1, 0, 0], [1, 0, 0]) == 0.0
    assert wrap_angle(math.pi) == pytest.approx(-math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(-math.pi)


coord = st.floats(0, 63.99, allow_nan=False)


@st.composite
def scanpaths(draw):
    n = draw(st.integers(1, 6))
    starts = sorted(draw(st.lists(st.floats(0, 100, allow_nan=False), min_size=n, max_size=n, unique=True)))
    fx = tuple(Fixation(ErpPoint(draw(coord), draw(st.floats(0, 31.99)), 64, 32), t,
                        draw(st.floats(1e-3, 5)), draw(st.one_of(st.none(), st.integers(0, 50))))
               for t in starts)
    return Scanpath(fx, draw(st.text(min_size=1, max_size=8)), draw(st.integers(0, 5)),
                    draw(st.text(min_size=1, max_size=8)))


@st.composite
def scenes(draw):
    n = draw(st.integers(1, 5))
    objs = []
    for i in range(n):
        x0 = draw(st.floats(0, 60))
        y0 = draw(st.floats(0, 28))
        b = BoundingBox(x0, y0, x0 + draw(st.floats(0.5, 4)), y0 + draw(st.floats(0.5, 4)))
        dyn = draw(st.booleans())
        ms = ErpPoint(b.x_min, b.y_min, 64, 32) if dyn else None
        objs.append(SceneObject(i * 3, b, draw(st.sampled_from(["lamp", "car", "ü"])), draw(st.floats(0, 1)),
                                draw(st.floats(0, 1)), dyn, ms))
    return Scene(draw(st.text(min_size=1, max_size=6)), 64, 32, tuple(objs), draw(st.integers(0, 2**63 - 1)),
                 draw(st.sampled_from(["high", "low", "normal"])), any(o.dynamic for o in objs))


@given(scanpaths())
def test_prop_scanpath_round_trip(sp):
    assert from_record(json.loads(dumps_record(to_record(sp)))) == sp


@given(scenes())
def test_prop_scene_round_trip(s):
    assert from_record(json.loads(dumps_record(to_record(s)))) == s
