"""Semantic Interactive Orders: fixations -> ordered object patches with positions.

A scanpath is turned into the sequence of objects it visited (consecutive
repeats merged, off-object fixations dropped). Each item carries a D x D
crop of the object's box and the triple ``[pos_x, pos_y, t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tinynn as nn
from .core import EmotionLabel, ErpPoint, Scanpath, Scene
from .geometry import angles_to_vec, uv_to_angles

DEFAULT_PATCH = 16


class EmptySioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SioItem:
    object_id: int
    patch_pixels: np.ndarray  # D x D x 3, values in [0, 1]
    pos_x: float
    pos_y: float
    t: int
    duration: float


@dataclass(frozen=True, eq=False)
class SioSequence:
    items: tuple
    emotion: Optional[EmotionLabel]
    scene_id: str
    coords: np.ndarray            # (n_fixations, 2) normalised (u/W, v/H)
    reg_target: tuple = (0.0, 0.0)  # (duration fraction, RMS angular dispersion)
    gaze_points: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not self.items:
            raise EmptySioError("SIO sequence is empty")
        if [it.t for it in self.items] != list(range(1, len(self.items) + 1)):
            raise ValueError("items must be numbered t = 1..m in order")

    def __len__(self):
        return len(self.items)

    @property
    def object_ids(self) -> list:
        return [it.object_id for it in self.items]

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "emotion": None if self.emotion is None else self.emotion.name,
            "items": [[it.object_id, it.pos_x, it.pos_y, it.t, it.duration] for it in self.items],
            "coords": self.coords.tolist(),
            "reg_target": list(self.reg_target),
        }


def map_gaze_to_object(scene: Scene, p: ErpPoint) -> Optional[int]:
    """Object whose box contains ``p`` (edges inclusive); smallest box, then lowest id."""
    best = None
    for o in scene.objects:
        if o.bbox.contains(p.u, p.v):
            key = (o.bbox.area, o.id)
            if best is None or key < best[0]:
                best = (key, o.id)
    return None if best is None else best[1]


def crop_patch(raster: np.ndarray, bbox, D: int = DEFAULT_PATCH) -> np.ndarray:
    """Nearest-neighbour resample of the box region to D x D, scaled to [0, 1]."""
    H, W = raster.shape[:2]
    w = bbox.x_max - bbox.x_min
    h = bbox.y_max - bbox.y_min
    cols = np.clip(np.floor(bbox.x_min + (np.arange(D) + 0.5) * w / D).astype(int), 0, W - 1)
    rows = np.clip(np.floor(bbox.y_min + (np.arange(D) + 0.5) * h / D).astype(int), 0, H - 1)
    patch = raster[rows][:, cols]
    if patch.ndim == 2:
        patch = patch[..., None]
    return patch.astype(np.float64) / 255.0


def regression_target(scanpath: Scanpath) -> tuple:
    """(fixated time / episode span, RMS angular spread of fixations in radians)."""
    fx = scanpath.fixations
    span = fx[-1].t_start + fx[-1].duration - fx[0].t_start
    frac = sum(f.duration for f in fx) / span
    W, H = fx[0].point.W, fx[0].point.H
    lon, lat = uv_to_angles([f.point.u for f in fx], [f.point.v for f in fx], W, H)
    d = angles_to_vec(lon, lat)
    m = d.sum(axis=0)
    n = np.linalg.norm(m)
    if n < 1e-12:
        return (float(frac), 0.0)
    m /= n
    ang = np.arctan2(np.linalg.norm(np.cross(d, m), axis=-1), d @ m)
    return (float(frac), float(math.sqrt(np.mean(ang ** 2))))


def build_sio(scene: Scene, raster: np.ndarray, scanpath: Scanpath, D: int = DEFAULT_PATCH) -> SioSequence:
    mapped = []
    for f in scanpath.fixations:
        oid = map_gaze_to_object(scene, f.point)
        if oid is None:
            continue
        if mapped and mapped[-1][0] == oid:
            mapped[-1] = (oid, mapped[-1][1] + f.duration, mapped[-1][2])
        else:
            mapped.append((oid, f.duration, f.point))
    if not mapped:
        raise EmptySioError(f"no fixation of {scanpath.subject_id}/{scanpath.scene_id} lands on an object")
    items = []
    for t, (oid, dur, _) in enumerate(mapped, 1):
        o = scene.object(oid)
        cx, cy = o.centroid
        items.append(SioItem(oid, crop_patch(raster, o.bbox, D), cx / scene.W, cy / scene.H, t, round(dur, 9)))
    coords = np.array([[f.point.u / f.point.W, f.point.v / f.point.H] for f in scanpath.fixations])
    return SioSequence(tuple(items), scanpath.emotion, scene.id, coords, regression_target(scanpath),
                       tuple(f.point for f in scanpath.fixations))


def positional_encoding(item: SioItem, m: int, scaled: bool = True) -> np.ndarray:
    """``[pos_x, pos_y, t]``; with ``scaled`` the order index is divided by ``m``."""
    return np.array([item.pos_x, item.pos_y, item.t / m if scaled else float(item.t)])


def patch_embed(item: SioItem, params: dict, m: int = 1) -> nn.Tensor:
    """Flattened patch projected to E plus a projection of the scaled position."""
    W = nn.as_tensor(params["W_patch"])
    flat = item.patch_pixels.reshape(-1)
    if flat.size != W.shape[0]:
        raise nn.ShapeError(f"patch has {flat.size} values, projection expects {W.shape[0]}")
    pos = positional_encoding(item, m)
    return nn.dense(flat, W, params["b_patch"]) + nn.dense(pos, params["W_pos"])


def build_sio_dataset(scenes: Sequence[Scene], scanpaths: Sequence[Scanpath], D: int = DEFAULT_PATCH,
                      render=None, skip_empty: bool = False) -> list:
    """SIO for every scanpath, rendering each scene only once."""
    from .simscene import render_scene

    render = render or render_scene
    by_id = {s.id: s for s in scenes}
    groups: dict = {}
    for i, sp in enumerate(scanpaths):
        groups.setdefault(sp.scene_id, []).append(i)
    out: list = [None] * len(scanpaths)
    for sid in sorted(groups):
        scene = by_id[sid]
        raster = render(scene)
        for i in groups[sid]:
            try:
                out[i] = build_sio(scene, raster, scanpaths[i], D)
            except EmptySioError:
                if not skip_empty:
                    raise
    return out
