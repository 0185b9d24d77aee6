"""Domain types, record serialization and seeded RNG streams.

Everything here is an immutable value type. Records are written as one JSON
object per line so datasets diff cleanly; floats are emitted with ``repr``
precision, which makes save/load an exact round trip.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

__version__ = "0.1.0"

DEFAULT_W = 1920
DEFAULT_H = 960


class SchemaError(ValueError):
    """A record is missing a field or holds an invalid value for it."""

    def __init__(self, field_name: str, message: str = ""):
        self.field = field_name
        super().__init__(f"{field_name}: {message}" if message else field_name)


class EmotionLabel(enum.IntEnum):
    Angry = 0
    Disgust = 1
    Fear = 2
    Happy = 3
    Sad = 4
    Surprise = 5

    @classmethod
    def parse(cls, value) -> "EmotionLabel":
        if isinstance(value, str):
            try:
                return cls[value]
            except KeyError:
                raise SchemaError("emotion", f"unknown emotion {value!r}") from None
        return cls(int(value))


N_EMOTIONS = len(EmotionLabel)


@dataclass(frozen=True)
class ErpPoint:
    """Continuous pixel position on an equirectangular canvas (W = 2H)."""

    u: float
    v: float
    W: int = DEFAULT_W
    H: int = DEFAULT_H

    def __post_init__(self):
        if self.W != 2 * self.H:
            raise SchemaError("W", f"ERP canvas must satisfy W = 2H, got {self.W}x{self.H}")
        if not (0.0 <= self.u < self.W):
            raise SchemaError("u", f"{self.u} outside [0, {self.W})")
        if not (0.0 <= self.v < self.H):
            raise SchemaError("v", f"{self.v} outside [0, {self.H})")


@dataclass(frozen=True)
class Fixation:
    point: ErpPoint
    t_start: float
    duration: float
    target_id: Optional[int] = None  # ground-truth object, when simulated

    def __post_init__(self):
        if not self.duration > 0:
            raise SchemaError("duration", f"must be > 0, got {self.duration}")


@dataclass(frozen=True)
class Scanpath:
    fixations: tuple
    subject_id: str
    emotion: EmotionLabel
    scene_id: str

    def __post_init__(self):
        object.__setattr__(self, "fixations", tuple(self.fixations))
        object.__setattr__(self, "emotion", EmotionLabel.parse(self.emotion))
        if not self.fixations:
            raise SchemaError("fixations", "scanpath is empty")
        for a, b in zip(self.fixations, self.fixations[1:]):
            if not b.t_start > a.t_start:
                raise SchemaError("fixations", "t_start must be strictly increasing")

    def __len__(self):
        return len(self.fixations)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise SchemaError("bbox.x_min", "x_min must be < x_max")
        if not self.y_min < self.y_max:
            raise SchemaError("bbox.y_min", "y_min must be < y_max")

    def contains(self, x: float, y: float) -> bool:
        # inclusive on every edge
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def centroid(self) -> tuple:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass(frozen=True)
class SceneObject:
    id: int
    bbox: BoundingBox
    category: str
    saliency: float
    brightness: float
    dynamic: bool = False
    motion_start: Optional[ErpPoint] = None

    def __post_init__(self):
        if not 0.0 <= self.saliency <= 1.0:
            raise SchemaError("saliency", f"{self.saliency} outside [0, 1]")
        if not 0.0 <= self.brightness <= 1.0:
            raise SchemaError("brightness", f"{self.brightness} outside [0, 1]")
        if self.dynamic:
            if self.motion_start is None:
                raise SchemaError("motion_start", "dynamic object needs a motion start")
            if not self.bbox.contains(self.motion_start.u, self.motion_start.v):
                raise SchemaError("motion_start", "motion start lies outside the bbox")

    @property
    def centroid(self) -> tuple:
        return self.bbox.centroid


LIGHTING = ("high", "low", "normal")


@dataclass(frozen=True)
class Scene:
    id: str
    W: int
    H: int
    objects: tuple
    background_seed: int
    lighting: str = "normal"
    dynamic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.W != 2 * self.H:
            raise SchemaError("W", "scene canvas must satisfy W = 2H")
        if not self.objects:
            raise SchemaError("objects", "scene needs at least one object")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SchemaError("objects", "object ids must be unique")
        if self.lighting not in LIGHTING:
            raise SchemaError("lighting", f"expected one of {LIGHTING}")
        for o in self.objects:
            b = o.bbox
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.W or b.y_max > self.H:
                raise SchemaError("bbox", f"object {o.id} box leaves the canvas")

    def object(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)


@dataclass(frozen=True)
class RunManifest:
    seed: int
    config_digest: str
    tool_version: str = __version__
    created: float = field(default_factory=time.time)
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def to_record(self, include_time: bool = True) -> dict:
        rec = {
            "seed": int(self.seed),
            "config_digest": self.config_digest,
            "tool_version": self.tool_version,
        }
        if include_time:
            rec["created"] = self.created
        rec.update(self.extra)
        return rec


# ---------------------------------------------------------------------------
# RNG streams

_MASK64 = (1 << 64) - 1


def rng_stream(seed: int, stream_id: int) -> np.random.Generator:
    """Independent PCG64 generator for ``(seed, stream_id)``.

    Both values are reduced to 64 bits and fed to ``SeedSequence`` as entropy
    words, so distinct stream ids give statistically independent streams.
    """
    ss = np.random.SeedSequence([int(seed) & _MASK64, int(stream_id) & _MASK64])
    return np.random.Generator(np.random.PCG64(ss))


def stream_id(*keys) -> int:
    """Stable 64-bit id for a tuple of names/indices, e.g. ``("episode", 17)``."""
    h = hashlib.blake2b("/".join(str(k) for k in keys).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def substream(seed: int, *keys) -> np.random.Generator:
    return rng_stream(seed, stream_id(*keys))


# ---------------------------------------------------------------------------
# record conversion


def _point_rec(p: ErpPoint) -> dict:
    return {"u": p.u, "v": p.v, "W": p.W, "H": p.H}


def _need(rec: dict, key: str, where: str):
    try:
        return rec[key]
    except (KeyError, TypeError):
        raise SchemaError(f"{where}.{key}" if where else key, "missing") from None


def _point_from(rec: dict, where: str) -> ErpPoint:
    return ErpPoint(
        float(_need(rec, "u", where)),
        float(_need(rec, "v", where)),
        int(_need(rec, "W", where)),
        int(_need(rec, "H", where)),
    )


def to_record(obj) -> dict:
    if isinstance(obj, Scene):
        return {
            "kind": "scene",
            "id": obj.id,
            "W": obj.W,
            "H": obj.H,
            "lighting": obj.lighting,
            "dynamic": obj.dynamic,
            "background_seed": obj.background_seed,
            "objects": [
                {
                    "id": o.id,
                    "bbox": [o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max],
                    "category": o.category,
                    "saliency": o.saliency,
                    "brightness": o.brightness,
                    "dynamic": o.dynamic,
                    "motion_start": None if o.motion_start is None else _point_rec(o.motion_start),
                }
                for o in obj.objects
            ],
        }
    if isinstance(obj, Scanpath):
        return {
            "kind": "scanpath",
            "subject_id": obj.subject_id,
            "emotion": obj.emotion.name,
            "scene_id": obj.scene_id,
            "fixations": [
                {
                    "point": _point_rec(f.point),
                    "t_start": f.t_start,
                    "duration": f.duration,
                    "target_id": f.target_id,
                }
                for f in obj.fixations
            ],
        }
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def from_record(rec: dict):
    kind = _need(rec, "kind", "")
    if kind == "scene":
        objects = []
        for i, o in enumerate(_need(rec, "objects", "scene")):
            where = f"objects[{i}]"
            bb = _need(o, "bbox", where)
            if not isinstance(bb, list) or len(bb) != 4:
                raise SchemaError(f"{where}.bbox", "expected 4 numbers")
            ms = o.get("motion_start")
            objects.append(
                SceneObject(
                    id=int(_need(o, "id", where)),
                    bbox=BoundingBox(*map(float, bb)),
                    category=str(_need(o, "category", where)),
                    saliency=float(_need(o, "saliency", where)),
                    brightness=float(_need(o, "brightness", where)),
                    dynamic=bool(o.get("dynamic", False)),
                    motion_start=None if ms is None else _point_from(ms, f"{where}.motion_start"),
                )
            )
        return Scene(
            id=str(_need(rec, "id", "scene")),
            W=int(_need(rec, "W", "scene")),
            H=int(_need(rec, "H", "scene")),
            objects=tuple(objects),
            background_seed=int(_need(rec, "background_seed", "scene")),
            lighting=str(_need(rec, "lighting", "scene")),
            dynamic=bool(_need(rec, "dynamic", "scene")),
        )
    if kind == "scanpath":
        fixes = []
        for i, f in enumerate(_need(rec, "fixations", "scanpath")):
            where = f"fixations[{i}]"
            tid = f.get("target_id")
            fixes.append(
                Fixation(
                    point=_point_from(_need(f, "point", where), f"{where}.point"),
                    t_start=float(_need(f, "t_start", where)),
                    duration=float(_need(f, "duration", where)),
                    target_id=None if tid is None else int(tid),
                )
            )
        return Scanpath(
            fixations=tuple(fixes),
            subject_id=str(_need(rec, "subject_id", "scanpath")),
            emotion=EmotionLabel.parse(_need(rec, "emotion", "scanpath")),
            scene_id=str(_need(rec, "scene_id", "scanpath")),
        )
    raise SchemaError("kind", f"unknown record kind {kind!r}")


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_digest(config) -> str:
    return sha256_bytes(dumps_record(config).encode("utf-8"))


def records_digest(records: Iterable) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(dumps_record(to_record(r)).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"


def save_dataset(
    path: Union[str, Path],
    records: Sequence[Union[Scene, Scanpath]],
    manifest: Optional[RunManifest] = None,
) -> Path:
    """Write ``records`` as JSON lines under directory ``path`` plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [dumps_record(to_record(r)) for r in records]
    body = "".join(line + "\n" for line in lines).encode("utf-8")
    (path / RECORDS_FILE).write_bytes(body)
    if manifest is None:
        manifest = RunManifest(seed=0, config_digest=config_digest({}))
    man = manifest.to_record()
    man["n_records"] = len(lines)
    man["records_digest"] = sha256_bytes(body)
    (path / MANIFEST_FILE).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(path: Union[str, Path]) -> list:
    path = Path(path)
    out = []
    with open(path / RECORDS_FILE, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}", str(exc)) from None
            out.append(from_record(rec))
    return out


def load_manifest(path: Union[str, Path]) -> dict:
    return json.loads((Path(path) / MANIFEST_FILE).read_text(encoding="utf-8"))


def dataset_digest(path: Union[str, Path]) -> str:
    return sha256_bytes((Path(path) / RECORDS_FILE).read_bytes())


def angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle angle between unit vectors (last axis), stable near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def wrap_angle(x):
    """Wrap radians into [-pi, pi)."""
    return (np.asarray(x, dtype=float) + math.pi) % (2 * math.pi) - math.pi
