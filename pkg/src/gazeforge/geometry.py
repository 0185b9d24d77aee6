"""Camera model, DLT triangulation, ERP <-> sphere mapping and gnomonic FOV views.

Conventions
-----------
World frame is right-handed with +Z up. Cameras look down their +z axis with
x to the right and y down. On the sphere, longitude is measured from +X toward
+Y in [-pi, pi) and latitude in [-pi/2, pi/2]; ERP pixel column ``u = 0`` is
longitude -pi and row ``v = 0`` is the north pole.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ErpPoint, SchemaError


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    k: float = 0.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise SchemaError("fx", "focal lengths must be positive")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise SchemaError("R", "rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def image_size(self) -> tuple:
        # principal point assumed at the image centre
        return (2.0 * self.cx, 2.0 * self.cy)

    @classmethod
    def look_at(cls, position, target, fx=800.0, fy=None, cx=640.0, cy=360.0, k=0.0, up=(0.0, 0.0, 1.0)):
        position = np.asarray(position, dtype=float)
        fwd = np.asarray(target, dtype=float) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise GeometryError("viewing direction parallel to the up vector")
        right /= n
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fx if fy is None else fy, cx, cy, k, R, -R @ position)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple
    capture_rate: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.capture_rate <= 0:
            raise SchemaError("capture_rate", "must be positive")

    def __len__(self):
        return len(self.cameras)


def ring_rig(n: int = 8, radius: float = 3.0, mount_height: float = 2.4,
             target=(0.0, 0.0, 1.6), fx: float = 800.0, cx: float = 640.0, cy: float = 360.0,
             k: float = 0.0, capture_rate: float = 30.0, phase: float = 0.0) -> CameraRig:
    """``n`` cameras evenly spaced on a horizontal ring, all aimed at ``target``."""
    cams = []
    for i in range(n):
        a = phase + 2 * math.pi * i / n
        pos = (target[0] + radius * math.cos(a), target[1] + radius * math.sin(a), mount_height)
        cams.append(CameraModel.look_at(pos, target, fx=fx, cx=cx, cy=cy, k=k))
    return CameraRig(tuple(cams), capture_rate)


@dataclass(frozen=True)
class HeadPose:
    pitch: float
    yaw: float
    roll: float = 0.0

    def __post_init__(self):
        if not -math.pi / 2 <= self.pitch <= math.pi / 2:
            raise SchemaError("pitch", f"{self.pitch} outside [-pi/2, pi/2]")
        if not -math.pi <= self.yaw < math.pi:
            raise SchemaError("yaw", f"{self.yaw} outside [-pi, pi)")
        if not -math.pi <= self.roll < math.pi:
            raise SchemaError("roll", f"{self.roll} outside [-pi, pi)")

    @classmethod
    def wrapped(cls, pitch: float, yaw: float, roll: float = 0.0) -> "HeadPose":
        w = lambda a: (a + math.pi) % (2 * math.pi) - math.pi
        return cls(min(max(pitch, -math.pi / 2), math.pi / 2), w(yaw), w(roll))

    def rotation(self) -> np.ndarray:
        """Head-to-world rotation: yaw about Z, then pitch (nose up), then roll."""
        cy_, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        Rz = np.array([[cy_, -sy, 0], [sy, cy_, 0], [0, 0, 1.0]])
        Ry = np.array([[cp, 0, -sp], [0, 1.0, 0], [sp, 0, cp]])
        Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return Rz @ Ry @ Rx


@dataclass(frozen=True, eq=False)
class SphereDir:
    vec: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=float).reshape(3)
        n = np.linalg.norm(v)
        if not abs(n - 1.0) <= 1e-12:
            if n == 0:
                raise SchemaError("vec", "zero direction")
            v = v / n
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    @classmethod
    def from_angles(cls, lon: float, lat: float) -> "SphereDir":
        return cls(angles_to_vec(lon, lat))

    @property
    def lon(self) -> float:
        return float(math.atan2(self.vec[1], self.vec[0]))

    @property
    def lat(self) -> float:
        return float(math.asin(max(-1.0, min(1.0, self.vec[2]))))

    def __eq__(self, other):
        return isinstance(other, SphereDir) and np.array_equal(self.vec, other.vec)

    def __hash__(self):
        return hash(self.vec.tobytes())


# ---------------------------------------------------------------------------
# projection and triangulation


def project_point(cam: CameraModel, p) -> np.ndarray:
    """Pinhole projection with single-term radial distortion; returns (x, y) pixels."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise GeometryError("point must be finite")
    X = cam.R @ p + cam.t
    if X[2] <= 0:
        raise BehindCameraError(f"point has camera depth {X[2]:.4g}")
    x, y = X[0] / X[2], X[1] / X[2]
    d = 1.0 + cam.k * (x * x + y * y)
    return np.array([cam.fx * x * d + cam.cx, cam.fy * y * d + cam.cy])


def undistort_normalized(cam: CameraModel, pixel) -> np.ndarray:
    """Invert the radial model: pixel -> ideal normalized image coordinates."""
    xd = (pixel[0] - cam.cx) / cam.fx
    yd = (pixel[1] - cam.cy) / cam.fy
    if cam.k == 0.0:
        return np.array([xd, yd])
    rd = math.hypot(xd, yd)
    if rd == 0.0:
        return np.array([0.0, 0.0])
    # Newton on r * (1 + k r^2) = rd
    r = rd
    for _ in range(50):
        f = r * (1 + cam.k * r * r) - rd
        step = f / (1 + 3 * cam.k * r * r)
        r -= step
        if abs(step) < 1e-16:
            break
    s = r / rd
    return np.array([xd * s, yd * s])


def triangulate(observations: Sequence, cond_limit: float = 1e10):
    """Linear (DLT) triangulation from ``[(camera, pixel), ...]``.

    Returns ``(point, rms)`` where ``rms`` is the RMS pixel reprojection
    error over the given observations.
    """
    if len(observations) < 2:
        raise DegenerateConfigurationError("need at least two observations")
    rows = []
    for cam, px in observations:
        x, y = undistort_normalized(cam, px)
        P = np.hstack([cam.R, cam.t[:, None]])
        for r in (x * P[2] - P[0], y * P[2] - P[1]):
            rows.append(r / np.linalg.norm(r))
    A = np.array(rows)
    _, s, Vt = np.linalg.svd(A)
    # rank 3 is required; the last singular value absorbs noise
    if s[2] <= 0 or s[0] / s[2] > cond_limit:
        raise DegenerateConfigurationError(f"ill-conditioned system (cond {s[0] / max(s[2], 1e-300):.3g})")
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12 * np.linalg.norm(Xh):
        raise DegenerateConfigurationError("rays are parallel (point at infinity)")
    X = Xh[:3] / Xh[3]
    sq = []
    for cam, px in observations:
        try:
            q = project_point(cam, X)
        except BehindCameraError:
            raise DegenerateConfigurationError("triangulated point lies behind an observing camera") from None
        sq.append(float(np.sum((q - np.asarray(px, dtype=float)) ** 2)))
    return X, math.sqrt(sum(sq) / len(sq))


# ---------------------------------------------------------------------------
# sphere mapping


def angles_to_vec(lon, lat) -> np.ndarray:
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    c = np.cos(lat)
    return np.stack([c * np.cos(lon), c * np.sin(lon), np.sin(lat)], axis=-1)


def vec_to_angles(d) -> tuple:
    d = np.asarray(d, dtype=float)
    lon = np.arctan2(d[..., 1], d[..., 0])
    lat = np.arcsin(np.clip(d[..., 2] / np.linalg.norm(d, axis=-1), -1.0, 1.0))
    return lon, lat


def uv_to_angles(u, v, W: int, H: int) -> tuple:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return 2 * math.pi * u / W - math.pi, math.pi / 2 - math.pi * v / H


def angles_to_uv(lon, lat, W: int, H: int) -> tuple:
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    u = np.mod((lon + math.pi) / (2 * math.pi) * W, W)
    u = np.where(u >= W, 0.0, u)  # fmod can round up to W
    v = (math.pi / 2 - lat) / math.pi * H
    v = np.clip(v, 0.0, np.nextafter(float(H), 0.0))
    return u, v


def erp_to_dir(pt: ErpPoint) -> SphereDir:
    lon, lat = uv_to_angles(pt.u, pt.v, pt.W, pt.H)
    return SphereDir(angles_to_vec(lon, lat))


def dir_to_erp(d: SphereDir, W: int, H: int) -> ErpPoint:
    lon, lat = vec_to_angles(d.vec)
    u, v = angles_to_uv(lon, lat, W, H)
    return ErpPoint(float(u), float(v), W, H)


def head_to_dir(pose: HeadPose) -> SphereDir:
    # forward (+X in head frame) after yaw and pitch; roll spins about it
    cp = math.cos(pose.pitch)
    return SphereDir(np.array([cp * math.cos(pose.yaw), cp * math.sin(pose.yaw), math.sin(pose.pitch)]))


def tangent_basis(d: np.ndarray) -> tuple:
    """East (increasing longitude) and north unit vectors at direction ``d``."""
    lon, lat = vec_to_angles(d)
    east = np.array([-math.sin(lon), math.cos(lon), 0.0])
    north = np.array([-math.sin(lat) * math.cos(lon), -math.sin(lat) * math.sin(lon), math.cos(lat)])
    return east, north


@dataclass(frozen=True, eq=False)
class FovView:
    pixels: np.ndarray      # out_h x out_w (x C) patch
    src_u: np.ndarray       # continuous ERP column per FOV pixel
    src_v: np.ndarray
    src_col: np.ndarray     # nearest-neighbour source pixel
    src_row: np.ndarray
    dirs: np.ndarray        # unit ray per FOV pixel


def fov_rays(g: SphereDir, fov_deg: float, out_w: int, out_h: int) -> np.ndarray:
    """Unit rays of a gnomonic view centred on ``g``; ``fov_deg`` is horizontal."""
    if not 0 < fov_deg < 180:
        raise GeometryError(f"fov_deg must lie in (0, 180), got {fov_deg}")
    T = math.tan(math.radians(fov_deg) / 2)
    xs = (2 * (np.arange(out_w) + 0.5) / out_w - 1) * T
    ys = (1 - 2 * (np.arange(out_h) + 0.5) / out_h) * T * out_h / out_w
    X, Y = np.meshgrid(xs, ys)
    east, north = tangent_basis(g.vec)
    rays = g.vec[None, None, :] + X[..., None] * east + Y[..., None] * north
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def extract_fov(raster: np.ndarray, g: SphereDir, fov_deg: float = 120.0,
                out_w: int = 64, out_h: int = 64) -> FovView:
    H, W = raster.shape[:2]
    if W != 2 * H:
        raise GeometryError("raster must be a 2:1 equirectangular image")
    rays = fov_rays(g, fov_deg, out_w, out_h)
    lon, lat = vec_to_angles(rays)
    u, v = angles_to_uv(lon, lat, W, H)
    col = np.minimum(np.floor(u).astype(np.int64), W - 1)
    row = np.minimum(np.floor(v).astype(np.int64), H - 1)
    return FovView(raster[row, col], u, v, col, row, rays)


# ---------------------------------------------------------------------------
# file formats


def save_rig(path, rig: CameraRig) -> None:
    lines = [json.dumps({"capture_rate": rig.capture_rate})]
    for c in rig.cameras:
        lines.append(json.dumps({
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "k": c.k,
            "R": [float(x) for x in c.R.ravel()], "t": [float(x) for x in c.t],
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_rig(path) -> CameraRig:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    head = json.loads(lines[0])
    cams = []
    for i, ln in enumerate(lines[1:]):
        r = json.loads(ln)
        try:
            cams.append(CameraModel(r["fx"], r["fy"], r["cx"], r["cy"], r["k"],
                                    np.array(r["R"]).reshape(3, 3), np.array(r["t"])))
        except KeyError as exc:
            raise SchemaError(f"camera[{i}].{exc.args[0]}", "missing") from None
    return CameraRig(tuple(cams), head["capture_rate"])


def write_pnm(path, image: np.ndarray) -> None:
    """Plain-text PGM (2-D) or PPM (H x W x 3) with 8-bit samples."""
    img = np.asarray(image)
    if img.ndim == 2:
        magic, rows = "P2", [" ".join(str(int(x)) for x in r) for r in img]
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, rows = "P3", [" ".join(str(int(x)) for x in r.ravel()) for r in img]
    else:
        raise ValueError("expected an H x W or H x W x 3 image")
    h, w = img.shape[:2]
    Path(path).write_text(f"{magic}\n{w} {h}\n255\n" + "\n".join(rows) + "\n", encoding="ascii")


def read_pnm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    vals = np.array([int(x) for x in tokens[4:]], dtype=np.uint8)
    return vals.reshape(h, w) if magic == "P2" else vals.reshape(h, w, 3)
