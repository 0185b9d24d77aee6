"""Loss functions and the loss composition used by the emotion GAN.

Functions accept plain arrays (returning floats) or :class:`~gazeforge.tinynn.Tensor`
inputs (returning tensors on the tape), so the very same formulas serve the
training loop, the reports and the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Union

import numpy as np

from .. import tinynn as nn

PROB_FLOOR = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        self.term = term
        super().__init__(f"loss term {term} is not finite ({value})")


def _out(x: nn.Tensor, tensor_mode: bool):
    return x if tensor_mode else float(x.data)


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, nn.Tensor) for x in xs)


# ---------------------------------------------------------------------------
# distribution losses


def kl_divergence(P, Q, eps: float = PROB_FLOOR):
    """KL(P || Q) with Q floored at ``eps`` and renormalised; 0 log 0 = 0.

    1-D inputs give one divergence, 2-D inputs the batch mean.
    """
    tm = _is_tensor(P, Q)
    P, Q = nn.as_tensor(P), nn.as_tensor(Q)
    Qf = nn.floor_at(Q, eps)
    Qn = Qf / nn.tsum(Qf, axis=-1, keepdims=True)
    # P * log P vanishes at P = 0 because the log argument is floored, not P
    plogp = P * nn.log(nn.floor_at(P, 1e-300))
    terms = nn.tsum(plogp - P * nn.log(Qn), axis=-1)
    # rounding can leave P = Q a few ulp below zero
    terms = nn.floor_at(terms, 0.0)
    return _out(nn.mean(terms), tm)


def categorical_cross_entropy(labels, dists, floor: float = PROB_FLOOR):
    """-(1/N) sum_i sum_c y_ic log p_ic; integer labels or one-hot rows."""
    tm = _is_tensor(dists)
    D = nn.as_tensor(dists)
    if D.ndim == 1:
        D = nn.reshape(D, (1, -1))
    y = np.asarray(labels)
    if y.ndim == 1 and y.dtype.kind in "iu" or y.ndim == 0:
        y = np.eye(D.shape[-1])[np.atleast_1d(y)]
    y = np.asarray(y, dtype=np.float64).reshape(D.shape)
    ll = nn.tsum(y * nn.log(nn.floor_at(D, floor)), axis=-1)
    return _out(-nn.mean(ll), tm)


def adv_losses(real_scores, fake_scores, floor: float = PROB_FLOOR):
    """Minmax losses from discriminator scores in (0, 1).

    Returns ``(L_adv_D, L_adv_G)`` with
    ``L_adv_D = -mean(log real + log(1 - fake))`` and the non-saturating
    ``L_adv_G = -mean(log fake)``.
    """
    tm = _is_tensor(real_scores, fake_scores)
    r, f = nn.as_tensor(real_scores), nn.as_tensor(fake_scores)
    ld = -nn.mean(nn.log(nn.floor_at(r, floor)) + nn.log(nn.floor_at(1.0 - f, floor)))
    lg = -nn.mean(nn.log(nn.floor_at(f, floor)))
    return _out(ld, tm), _out(lg, tm)


def adv_losses_from_logits(real_logits, fake_logits):
    """Same quantities as :func:`adv_losses`, computed stably from pre-sigmoid logits."""
    r, f = nn.as_tensor(real_logits), nn.as_tensor(fake_logits)
    ld = -nn.mean(nn.log_sigmoid(r) + nn.log_sigmoid(-f))
    lg = -nn.mean(nn.log_sigmoid(f))
    return ld, lg


# ---------------------------------------------------------------------------
# trajectory losses


def mse(x, x_hat):
    """Mean of squared componentwise differences between equal-length sequences."""
    tm = _is_tensor(x, x_hat)
    a, b = nn.as_tensor(x), nn.as_tensor(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"mse needs equal shapes, got {a.shape} and {b.shape}")
    d = b - a
    return _out(nn.mean(d * d), tm)


def _as_points(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def dtw_table(x, y) -> np.ndarray:
    """Accumulated-cost table (n+1, m+1) with Euclidean local cost."""
    x, y = _as_points(x), _as_points(y)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("dtw needs non-empty sequences")
    diff = x[:, None, :] - y[None, :, :]
    # scale before squaring so tiny but nonzero gaps do not underflow to 0
    s = np.abs(diff).max(-1)
    cost = s * np.sqrt(((diff / np.where(s > 0, s, 1.0)[..., None]) ** 2).sum(-1))
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best
    return acc


def dtw_distance(x, y) -> float:
    """Minimum summed Euclidean cost over monotone, boundary-anchored alignments."""
    return float(dtw_table(x, y)[-1, -1])


def dtw_path(x, y) -> list:
    """Optimal alignment as ``[(i, j), ...]`` from (0, 0) to (n-1, m-1)."""
    acc = dtw_table(x, y)
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        # fixed preference order keeps the traceback deterministic
        cands = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        _, i, j = min(cands, key=lambda c: c[0])
        path.append((i - 1, j - 1))
    return path[::-1]


def dtw_loss(x_true, x_hat, lengths=None) -> nn.Tensor:
    """Batch-mean DTW with the optimal path frozen; gradients flow through ``x_hat``.

    ``x_true`` is a (B, N, 2) array, ``x_hat`` a (B, N, 2) tensor and
    ``lengths`` the number of valid points per row.
    """
    xt = np.asarray(x_true, dtype=np.float64)
    xh = nn.as_tensor(x_hat)
    B = xt.shape[0]
    lengths = [xt.shape[1]] * B if lengths is None else list(lengths)
    bi, ii, jj = [], [], []
    for b in range(B):
        n = lengths[b]
        for i, j in dtw_path(xt[b, :n], xh.data[b, :n]):
            bi.append(b)
            ii.append(i)
            jj.append(j)
    bi, ii, jj = np.array(bi), np.array(ii), np.array(jj)
    diff = nn.getitem(xh, (bi, jj)) - xt[bi, ii]
    return nn.tsum(nn.l2norm(diff, axis=-1)) * (1.0 / B)


# ---------------------------------------------------------------------------
# mutual information


def _first_principal_coordinate(X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    Xc = X - X.mean(axis=0)
    scale = np.abs(Xc).max()
    if not scale > 1e-12:
        return None
    _, _, Vt = np.linalg.svd(Xc / scale, full_matrices=False)
    z = Xc @ Vt[0]
    if np.ptp(z) <= 1e-12 * scale:
        return None
    return z


def _equal_mass_bins(z: np.ndarray, bins: int) -> np.ndarray:
    order = np.argsort(z, kind="stable")
    ranks = np.empty(len(z), dtype=np.int64)
    ranks[order] = np.arange(len(z))
    return ranks * bins // len(z)


def mutual_information(X, Y, bins: int = 4) -> float:
    """Plug-in MI (nats) between the first principal coordinates of two feature batches.

    Each coordinate is cut into ``bins`` equal-mass bins by rank. A constant
    batch carries no information and yields 0.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = len(X)
    if len(Y) != n:
        raise ValueError("feature batches must have equal length")
    zx, zy = _first_principal_coordinate(X), _first_principal_coordinate(Y)
    if zx is None or zy is None:
        return 0.0
    bx, by = _equal_mass_bins(zx, bins), _equal_mass_bins(zy, bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (bx, by), 1.0)
    joint /= n
    px, py = joint.sum(1), joint.sum(0)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(px, py)[nz])))


def mutual_information_loss(X, Y, bins: int = 4, min_batch: int = 8) -> float:
    """L_mi = -I(X; Y). Batches below ``min_batch`` contribute 0."""
    X = np.asarray(X.data if isinstance(X, nn.Tensor) else X)
    Y = np.asarray(Y.data if isinstance(Y, nn.Tensor) else Y)
    if len(X) < min_batch:
        return 0.0
    return -mutual_information(X, Y, bins)


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1        # adversarial suppression, KL(P||Q) in the aux branch
    beta_sup: float = 0.1   # reverse suppression, KL(Q||P) in the scanpath branch
    alpha_rec: float = 0.5  # MSE share of the reconstruction loss
    beta_rec: float = 0.5   # DTW share of the reconstruction loss
    dedup: bool = False     # drop the repeated dtw/mse/rec terms from L_D_total

    def __post_init__(self):
        for f in ("lam", "beta_sup", "alpha_rec", "beta_rec"):
            if getattr(self, f) < 0:
                raise ValueError(f"loss weight {f} must be >= 0")


COMPONENTS = ("L_cls_aux", "L_cls_traj", "L_mi", "kl_pq", "kl_qp", "L_mse", "L_dtw", "L_cat_ce", "L_adv", "L_reg")


@dataclass(frozen=True)
class LossReport:
    L_cls_aux: float
    L_cls_traj: float
    L_mi: float
    kl_pq: float
    kl_qp: float
    L_mse: float
    L_dtw: float
    L_cat_ce: float
    L_adv: float
    L_reg: float
    L_rec: float
    L_aux_cls: float
    L_traj: float
    L_ars_total: float
    L_G_total: float
    L_D_total: float
    L_total: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compose_terms(c: dict, w: LossWeights) -> dict:
    """All derived terms from the ten components; works on floats or tensors."""
    L_rec = w.alpha_rec * c["L_mse"] + w.beta_rec * c["L_dtw"]
    L_aux_cls = c["L_cls_aux"] + w.lam * c["kl_pq"]
    L_traj = c["L_cls_traj"] + L_rec + w.beta_sup * c["kl_qp"]
    L_ars_total = L_traj + L_aux_cls + c["L_mi"]
    L_G_total = c["L_reg"] + c["L_adv"]
    if w.dedup:
        L_D_total = L_ars_total + c["L_cat_ce"]
    else:
        # the written discriminator objective repeats the reconstruction terms
        L_D_total = L_ars_total + c["L_cat_ce"] + c["L_dtw"] + c["L_mse"] + L_rec
    out = dict(c)
    out.update(L_rec=L_rec, L_aux_cls=L_aux_cls, L_traj=L_traj, L_ars_total=L_ars_total,
               L_G_total=L_G_total, L_D_total=L_D_total, L_total=L_D_total + L_G_total)
    return out


def compose_losses(components: dict, weights: LossWeights = LossWeights()) -> LossReport:
    vals = {}
    for k in COMPONENTS:
        v = components[k]
        v = float(v.data) if isinstance(v, nn.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v)
        vals[k] = v
    return LossReport(**compose_terms(vals, weights))


def check_finite(report: Union[LossReport, dict]) -> None:
    d = report.as_dict() if isinstance(report, LossReport) else report
    for k, v in d.items():
        v = float(v.data) if isinstance(v, nn.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v)
