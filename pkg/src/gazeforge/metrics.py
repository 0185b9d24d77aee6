"""Evaluation: object-box gaze accuracy, FCC, cawF1, classification report, PR curves."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .core import N_EMOTIONS, BoundingBox, EmotionLabel, ErpPoint


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# object-box accuracy


def gaze_accuracy(p: ErpPoint, boxes: Sequence[BoundingBox]) -> int:
    """1 if any box contains ``p`` (edges inclusive), else 0."""
    return int(any(b.x_min <= p.u <= b.x_max and b.y_min <= p.v <= b.y_max for b in boxes))


def gaze_accuracy_rate(points: Sequence[ErpPoint], boxes) -> float:
    """Mean accuracy in percent; ``boxes`` is one shared list or one list per point."""
    if not points:
        raise MetricError("no gaze points")
    per_point = boxes if boxes and isinstance(boxes[0], (list, tuple)) else [boxes] * len(points)
    return 100.0 * float(np.mean([gaze_accuracy(p, b) for p, b in zip(points, per_point)]))


# ---------------------------------------------------------------------------
# features and FCC


@dataclass(frozen=True)
class FccConfig:
    alpha: float = 0.5
    beta: float = 0.5
    radius: int = 48          # half-size of the local window, pixels
    extractor: str = "hist_grad"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise MetricError("FCC weights must be >= 0 and sum to 1")
        if self.radius < 0:
            raise MetricError("window radius must be >= 0")
        if self.extractor not in EXTRACTORS:
            raise MetricError(f"unknown feature extractor {self.extractor}")


def hist_grad_features(region: np.ndarray, bins: int = 16) -> np.ndarray:
    """Per-channel colour histogram of non-black pixels plus mean gradient magnitude, L2-normalised.

    Black pixels are treated as absent content, so an all-black region maps
    to the zero vector.
    """
    region = np.asarray(region)
    if region.ndim == 2:
        region = region[..., None]
    raw = region.reshape(-1, region.shape[-1])
    live = np.any(raw > 0, axis=1)
    # equal-width bins over [0, 256), same edges as np.histogram with that range
    idx = np.clip(np.floor(raw[live] * (bins / 256.0)).astype(np.int64), 0, bins - 1)
    idx += np.arange(raw.shape[1]) * bins
    hist = np.bincount(idx.ravel(), minlength=bins * raw.shape[1]).astype(np.float64) / max(len(raw), 1)
    gray = region.mean(axis=-1, dtype=np.float64)
    if min(gray.shape) >= 2:
        gy, gx = np.gradient(gray)
        grad = float(np.mean(np.hypot(gx, gy))) / 255.0
    else:
        grad = 0.0
    f = np.concatenate([hist, [grad]])
    n = np.linalg.norm(f)
    return f / n if n > 0 else f


EXTRACTORS: Dict[str, Callable] = {"hist_grad": hist_grad_features}


def window(raster: np.ndarray, p: ErpPoint, radius: int) -> np.ndarray:
    H, W = raster.shape[:2]
    cx, cy = int(np.floor(p.u)), int(np.floor(p.v))
    r0, r1 = max(cy - radius, 0), min(cy + radius + 1, H)
    c0, c1 = max(cx - radius, 0), min(cx + radius + 1, W)
    if r0 >= r1 or c0 >= c1:
        raise MetricError("feature window is empty after clipping")
    return raster[r0:r1, c0:c1]


def attended_render(raster: np.ndarray, boxes: Sequence[BoundingBox]) -> np.ndarray:
    """Raster with everything outside the attended boxes blacked out."""
    H, W = raster.shape[:2]
    mask = np.zeros((H, W), dtype=bool)
    for b in boxes:
        r0, r1 = max(int(np.floor(b.y_min)), 0), min(int(np.ceil(b.y_max)), H)
        c0, c1 = max(int(np.floor(b.x_min)), 0), min(int(np.ceil(b.x_max)), W)
        mask[r0:r1, c0:c1] = True
    out = np.zeros_like(raster)
    out[mask] = raster[mask]
    return out


def extract_features(raster: np.ndarray, gaze_point: ErpPoint, config: FccConfig = FccConfig(),
                     attended: Optional[np.ndarray] = None) -> tuple:
    """``((v_local, v_global), (e_local, e_global))``.

    v-features come from ``attended`` (defaults to the raster itself), e-features
    from the raw raster; local means the window around the gaze point.
    """
    fx = EXTRACTORS[config.extractor]
    attended = raster if attended is None else attended
    if attended.shape != raster.shape:
        raise MetricError("attended render must match the raster shape")
    v = (fx(window(attended, gaze_point, config.radius)), fx(attended))
    e = (fx(window(raster, gaze_point, config.radius)), fx(raster))
    return v, e


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"feature dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class EvalRecord:
    true_label: EmotionLabel
    pred_dist: np.ndarray
    gaze_point: Optional[ErpPoint]
    scene_id: str
    v_local: np.ndarray
    v_global: np.ndarray
    e_local: np.ndarray
    e_global: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pred_dist, dtype=float)
        if p.shape != (N_EMOTIONS,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise MetricError("pred_dist must be a valid 6-class distribution")
        object.__setattr__(self, "pred_dist", p)
        object.__setattr__(self, "true_label", EmotionLabel.parse(self.true_label))

    @property
    def pred_label(self) -> EmotionLabel:
        return EmotionLabel(int(np.argmax(self.pred_dist)))


def fcc(records: Sequence[EvalRecord], config: FccConfig = FccConfig()) -> tuple:
    """Per-record FCC_i and their mean."""
    if not records:
        raise MetricError("no records")
    dims = {(len(r.v_local), len(r.v_global)) for r in records}
    if len(dims) != 1:
        raise MetricError("feature dims are inconsistent across records")
    scores = np.array([config.alpha * cosine(r.v_local, r.e_local) + config.beta * cosine(r.v_global, r.e_global)
                       for r in records])
    return scores, float(scores.mean())


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True, eq=False)
class ClassificationReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    confusion: np.ndarray            # rows = true class
    confusion_normalized: np.ndarray

    def per_class_f1(self) -> dict:
        return {EmotionLabel(i): float(self.f1[i]) for i in range(len(self.f1))}


def _safe_div(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def classification_report(true, pred, n_classes: int = N_EMOTIONS) -> ClassificationReport:
    """Standard metrics; macro F1 averages over classes present in ``true`` or ``pred``."""
    y, p = np.asarray(true, dtype=int), np.asarray(pred, dtype=int)
    if len(y) == 0:
        raise MetricError("empty input")
    if len(y) != len(p):
        raise MetricError("true and pred lengths differ")
    C = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(C, (y, p), 1)
    tp = np.diag(C).astype(float)
    prec = _safe_div(tp, C.sum(0))
    rec = _safe_div(tp, C.sum(1))
    f1 = _safe_div(2 * prec * rec, prec + rec)
    present = (C.sum(0) + C.sum(1)) > 0
    return ClassificationReport(
        accuracy=float(tp.sum() / len(y)), precision=prec, recall=rec, f1=f1, support=C.sum(1),
        macro_f1=float(f1[present].mean()), confusion=C,
        confusion_normalized=_safe_div(C, C.sum(1, keepdims=True)))


def cawf1(records: Sequence[EvalRecord], per_class_f1: dict, fcc_scores, strict: bool = False) -> float:
    """FCC-weighted mean of per-record bF1.

    bF1_i is the one-vs-rest F1 of the record's true class; with ``strict`` it
    is 1 for a correct prediction and 0 otherwise.
    """
    w = np.asarray(fcc_scores, dtype=float)
    if len(w) != len(records):
        raise MetricError("one FCC score per record is required")
    if not w.sum() > 0:
        raise MetricError("FCC weights sum to zero; cawF1 is undefined")
    if strict:
        b = np.array([float(r.pred_label == r.true_label) for r in records])
    else:
        b = np.array([per_class_f1[EmotionLabel(int(r.true_label))] for r in records], dtype=float)
    return float(np.sum(w * b) / np.sum(w))


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    recall: float
    precision: float


def pr_curve(true_binary, scores) -> list:
    """One point per distinct score, thresholds descending (recall non-decreasing)."""
    y = np.asarray(true_binary, dtype=bool)
    s = np.asarray(scores, dtype=float)
    if len(y) != len(s):
        raise MetricError("labels and scores lengths differ")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("pr_curve needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    k = np.arange(1, len(s) + 1)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    return [PrPoint(float(s_sorted[e]), float(tp[e] / n_pos), float(tp[e] / k[e])) for e in ends]


# ---------------------------------------------------------------------------
# tables


def metrics_rows(report: ClassificationReport, extra: Optional[dict] = None) -> list:
    rows = [("accuracy", "all", report.accuracy), ("macro_f1", "all", report.macro_f1)]
    for i in range(len(report.f1)):
        name = EmotionLabel(i).name
        rows += [("precision", name, float(report.precision[i])), ("recall", name, float(report.recall[i])),
                 ("f1", name, float(report.f1[i]))]
    for k, v in (extra or {}).items():
        rows.append((k, "all", float(v)))
    return rows


def metrics_csv(report: ClassificationReport, extra: Optional[dict] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "class", "value"])
    for m, c, v in metrics_rows(report, extra):
        w.writerow([m, c, repr(float(v))])
    w.writerow([])
    names = [EmotionLabel(i).name for i in range(report.confusion.shape[0])]
    w.writerow(["confusion"] + names)
    for name, row in zip(names, report.confusion):
        w.writerow([name] + [int(x) for x in row])
    return buf.getvalue()


def pr_csv(curves: dict) -> str:
    """``curves`` maps a class name to its PrPoint list."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "recall", "precision"])
    for name, pts in curves.items():
        for p in pts:
            w.writerow([name, repr(p.threshold), repr(p.recall), repr(p.precision)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> dict:
    """``{(metric, class): value}`` from the first block of :func:`metrics_csv`."""
    out = {}
    for row in csv.reader(io.StringIO(text)):
        if not row:
            break
        if row[0] == "metric":
            continue
        out[(row[0], row[1])] = float(row[2])
    return out
