"""Generator and discriminator networks over padded SIO batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import tinynn as nn
from ..core import N_EMOTIONS, EmotionLabel
from ..sio import EmptySioError, SioSequence


@dataclass(frozen=True)
class NetConfig:
    patch: int = 8
    embed: int = 32
    blocks: int = 2
    mlp_hidden: int = 64
    head_hidden: int = 32
    neck: int = 16
    rnn_hidden: int = 16
    out_floor: float = 0.02  # generator probabilities live in [floor, 1 - 5 floor], like smoothed labels
    pos_scale: float = 5.0  # init gain of the position projection, keeps position visible next to pixels

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


@dataclass(frozen=True, eq=False)
class EmotionDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (N_EMOTIONS,):
            raise ValueError(f"distribution needs {N_EMOTIONS} entries, got shape {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def label(self) -> EmotionLabel:
        return EmotionLabel(int(np.argmax(self.probs)))

    @classmethod
    def one_hot(cls, label, smooth: float = 0.0) -> "EmotionDistribution":
        off = smooth / (N_EMOTIONS - 1)
        p = np.full(N_EMOTIONS, off)
        p[int(EmotionLabel.parse(label))] = 1.0 - smooth
        return cls(p)


@dataclass(frozen=True)
class AuxRegTarget:
    duration: float
    dispersion: float

    def __post_init__(self):
        if not (self.duration >= 0 and self.dispersion >= 0):
            raise ValueError("duration and dispersion must be >= 0")


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True, eq=False)
class SioBatch:
    patches: np.ndarray   # (B, M, F)
    pos: np.ndarray       # (B, M, 3) [pos_x, pos_y, t/m]
    mask: np.ndarray      # (B, M) 1 for real items
    coords: np.ndarray    # (B, N, 2)
    cmask: np.ndarray     # (B, N)
    lengths: np.ndarray   # (B,) coordinate counts
    labels: np.ndarray    # (B,) int, -1 when unknown
    reg: np.ndarray       # (B, 2)

    def __len__(self):
        return len(self.labels)


def make_batch(seqs: Sequence[SioSequence]) -> SioBatch:
    if not seqs:
        raise ValueError("empty batch")
    for s in seqs:
        if not len(s):
            raise EmptySioError("SIO sequence is empty")
    B = len(seqs)
    M = max(len(s) for s in seqs)
    N = max(len(s.coords) for s in seqs)
    F = seqs[0].items[0].patch_pixels.size
    patches = np.zeros((B, M, F))
    pos = np.zeros((B, M, 3))
    mask = np.zeros((B, M))
    coords = np.zeros((B, N, 2))
    cmask = np.zeros((B, N))
    for b, s in enumerate(seqs):
        m = len(s)
        for j, it in enumerate(s.items):
            if it.patch_pixels.size != F:
                raise nn.ShapeError("all patches in a batch must share one size")
            patches[b, j] = it.patch_pixels.reshape(-1)
            pos[b, j] = (it.pos_x, it.pos_y, it.t / m)
        mask[b, :m] = 1.0
        n = len(s.coords)
        coords[b, :n] = s.coords
        cmask[b, :n] = 1.0
    labels = np.array([-1 if s.emotion is None else int(s.emotion) for s in seqs])
    reg = np.array([s.reg_target for s in seqs], dtype=np.float64)
    return SioBatch(patches, pos, mask, coords, cmask, cmask.sum(1).astype(int), labels, reg)


# ---------------------------------------------------------------------------
# parameters


def _init_encoder(store: nn.ParamStore, rng, prefix: str, cfg: NetConfig) -> None:
    store.glorot(prefix + "W_patch", (cfg.patch_dim, cfg.embed), rng)
    store.zeros(prefix + "b_patch", (cfg.embed,))
    store.glorot(prefix + "W_pos", (3, cfg.embed), rng)
    store.params[prefix + "W_pos"] *= cfg.pos_scale
    for k in range(cfg.blocks):
        nn.init_attention_block(store, rng, f"{prefix}blk{k}.", cfg.embed, cfg.mlp_hidden)
    store.ones(prefix + "lnf_g", (cfg.embed,))
    store.zeros(prefix + "lnf_b", (cfg.embed,))


def _init_mlp(store, rng, prefix, n_in, hidden, n_out, zero_out=False):
    store.glorot(prefix + "W1", (n_in, hidden), rng)
    store.zeros(prefix + "b1", (hidden,))
    if zero_out:
        store.zeros(prefix + "W2", (hidden, n_out))
    else:
        store.glorot(prefix + "W2", (hidden, n_out), rng)
    store.zeros(prefix + "b2", (n_out,))


def init_generator(rng, cfg: NetConfig = NetConfig()) -> nn.ParamStore:
    """Generator parameters; the output layers start at zero, so predictions start uniform."""
    s = nn.ParamStore()
    _init_encoder(s, rng, "", cfg)
    _init_mlp(s, rng, "cls.", cfg.embed, cfg.head_hidden, N_EMOTIONS, zero_out=True)
    _init_mlp(s, rng, "reg.", cfg.embed, cfg.head_hidden, 2, zero_out=True)
    return s


def init_discriminator(rng, cfg: NetConfig = NetConfig()) -> nn.ParamStore:
    s = nn.ParamStore()
    E, H = cfg.embed, cfg.rnn_hidden
    _init_encoder(s, rng, "", cfg)
    s.glorot("aux.neck_W", (E, cfg.neck), rng)
    s.zeros("aux.neck_b", (cfg.neck,))
    s.glorot("aux.W", (cfg.neck, N_EMOTIONS), rng)
    s.zeros("aux.b", (N_EMOTIONS,))
    s.glorot("enc.Wh", (H, H), rng)
    s.glorot("enc.Wx", (2, H), rng)
    s.zeros("enc.b", (H,))
    s.glorot("traj.neck_W", (H, cfg.neck), rng)
    s.zeros("traj.neck_b", (cfg.neck,))
    s.glorot("traj.W", (cfg.neck, N_EMOTIONS), rng)
    s.zeros("traj.b", (N_EMOTIONS,))
    s.glorot("dec.Wh", (H, H), rng)
    s.glorot("dec.Wx", (1, H), rng)
    s.zeros("dec.b", (H,))
    s.glorot("dec.Wo", (H, 2), rng)
    s.zeros("dec.bo", (2,))
    _init_mlp(s, rng, "rf.", E + N_EMOTIONS, cfg.head_hidden, 1)
    s.glorot("rf.V", (cfg.neck, N_EMOTIONS), rng)
    return s


# ---------------------------------------------------------------------------
# forward passes


def encode(p: dict, batch: SioBatch, prefix: str = "") -> nn.Tensor:
    """Patch + position embedding, attention blocks, masked mean-pool -> (B, E)."""
    x = nn.dense(batch.patches, p[prefix + "W_patch"], p[prefix + "b_patch"]) + nn.dense(batch.pos, p[prefix + "W_pos"])
    k = 0
    while f"{prefix}blk{k}.Wq" in p:
        x = nn.attention_block(x, p, f"{prefix}blk{k}.", key_mask=batch.mask)
        k += 1
    if prefix + "lnf_g" in p:
        x = nn.layer_norm(x, p[prefix + "lnf_g"], p[prefix + "lnf_b"])
    w = batch.mask / batch.mask.sum(1, keepdims=True)
    return nn.tsum(x * w[..., None], axis=1)


def _mlp(p, prefix, x):
    return nn.dense(nn.gelu(nn.dense(x, p[prefix + "W1"], p[prefix + "b1"])), p[prefix + "W2"], p[prefix + "b2"])


def generator_batch(p: dict, batch: SioBatch, out_floor: float = 0.0):
    """-> (class probabilities (B, 6), non-negative regression (B, 2)).

    With ``out_floor`` the softmax is mixed with a uniform floor so no class
    drops below it; the argmax is unchanged.
    """
    f = encode(p, batch)
    probs = nn.softmax(_mlp(p, "cls.", f))
    if out_floor > 0:
        probs = probs * (1.0 - N_EMOTIONS * out_floor) + out_floor
    return probs, nn.softplus(_mlp(p, "reg.", f))


@dataclass
class DiscFeatures:
    pooled: nn.Tensor
    aux_neck: nn.Tensor
    aux_dist: nn.Tensor
    traj_neck: nn.Tensor
    traj_dist: nn.Tensor
    recon: nn.Tensor


def aux_neck_of(p: dict, pooled) -> nn.Tensor:
    return nn.gelu(nn.dense(pooled, p["aux.neck_W"], p["aux.neck_b"]))


def discriminator_body(p: dict, batch: SioBatch) -> DiscFeatures:
    """Everything except the real/fake head, which depends on the candidate."""
    f = encode(p, batch)
    aux_neck = aux_neck_of(p, f)
    aux_dist = nn.softmax(nn.dense(aux_neck, p["aux.W"], p["aux.b"]))

    B, N, _ = batch.coords.shape
    H = p["enc.Wh"].shape[0]
    h = nn.Tensor(np.zeros((B, H)))
    for i in range(N):
        new = nn.rnn_step(h, batch.coords[:, i], p["enc.Wh"], p["enc.Wx"], p["enc.b"])
        keep = batch.cmask[:, i:i + 1]
        h = new * keep + h * (1.0 - keep)   # padded steps leave the state unchanged
    traj_neck = nn.gelu(nn.dense(h, p["traj.neck_W"], p["traj.neck_b"]))
    traj_dist = nn.softmax(nn.dense(traj_neck, p["traj.W"], p["traj.b"]))

    denom = np.maximum(batch.lengths - 1, 1).astype(np.float64)[:, None]
    outs = []
    g = h
    for i in range(N):
        g = nn.rnn_step(g, np.full((B, 1), i) / denom, p["dec.Wh"], p["dec.Wx"], p["dec.b"])
        outs.append(nn.sigmoid(nn.dense(g, p["dec.Wo"], p["dec.bo"])))
    recon = nn.stack(outs, axis=1)
    return DiscFeatures(f, aux_neck, aux_dist, traj_neck, traj_dist, recon)


def real_fake_logit(p: dict, pooled, aux_neck, cand) -> nn.Tensor:
    """Pre-sigmoid realness of (SIO features, candidate distribution) pairs, shape (B,).

    An MLP on the concatenation plus a projection term ``cand . (V n)`` on the
    auxiliary neck that scores how well the candidate matches the sequence.
    """
    f, c = nn.as_tensor(pooled), nn.as_tensor(cand)
    x = nn.concat([f, c], axis=-1)
    proj = nn.tsum(nn.dense(aux_neck, p["rf.V"]) * c, axis=-1)
    return nn.reshape(_mlp(p, "rf.", x), (-1,)) + proj


def _tensors(params) -> dict:
    if isinstance(params, nn.ParamStore):
        return {k: nn.Tensor(v) for k, v in params.params.items()}
    return params


def generator_forward(sio: SioSequence, params, out_floor: float = NetConfig.out_floor):
    """One sequence -> (EmotionDistribution, AuxRegTarget)."""
    if not len(sio):
        raise EmptySioError("SIO sequence is empty")
    dist, reg = generator_batch(_tensors(params), make_batch([sio]), out_floor)
    return EmotionDistribution(dist.data[0]), AuxRegTarget(*map(float, reg.data[0]))


def discriminator_forward(sio: SioSequence, candidate_dist: EmotionDistribution, params):
    """One sequence -> (real/fake score, aux_dist, traj_dist, reconstruction (n, 2))."""
    p = _tensors(params)
    batch = make_batch([sio])
    cand = np.asarray(candidate_dist.probs if isinstance(candidate_dist, EmotionDistribution) else candidate_dist)
    if cand.shape != (N_EMOTIONS,):
        raise nn.ShapeError(f"candidate distribution must have {N_EMOTIONS} entries")
    feats = discriminator_body(p, batch)
    score = nn.sigmoid(real_fake_logit(p, feats.pooled, feats.aux_neck, cand[None]))
    return (float(score.data[0]), EmotionDistribution(feats.aux_dist.data[0]),
            EmotionDistribution(feats.traj_dist.data[0]), feats.recon.data[0])


def predict(params, seqs: Sequence[SioSequence], batch_size: int = 64, out_floor: float = 0.0) -> np.ndarray:
    """Class probabilities (n, 6) for many sequences, assembled in input order."""
    p = _tensors(params)
    out = []
    for i in range(0, len(seqs), batch_size):
        d, _ = generator_batch(p, make_batch(seqs[i:i + batch_size]), out_floor)
        out.append(d.data)
    return np.concatenate(out) if out else np.zeros((0, N_EMOTIONS))
