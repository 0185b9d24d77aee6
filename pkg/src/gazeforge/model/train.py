"""Alternating adversarial training of the generator and discriminator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import tinynn as nn
from ..core import N_EMOTIONS, substream
from ..sio import SioSequence
from . import losses as L
from .network import (NetConfig, aux_neck_of, discriminator_body, encode, generator_batch, init_discriminator,
                      init_generator, make_batch, predict, real_fake_logit)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    smooth: float = 0.1           # real candidate: 0.9 on the label, 0.02 elsewhere
    ema: float = 0.99             # generator weight averaging used for evaluation; 0 disables
    mi_bins: int = 4
    weights: L.LossWeights = L.LossWeights()
    net: NetConfig = NetConfig()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = L.LossWeights(**d.pop("weights", {}))
        net = NetConfig(**d.pop("net", {}))
        return cls(weights=w, net=net, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    generator: nn.ParamStore
    discriminator: nn.ParamStore
    config: TrainConfig
    epoch: int = 0
    generator_ema: Optional[nn.ParamStore] = None

    @property
    def eval_generator(self) -> nn.ParamStore:
        return self.generator_ema if self.generator_ema is not None else self.generator

    def to_record(self) -> dict:
        rec = {"config": self.config.to_dict(), "epoch": self.epoch,
               "generator": self.generator.to_record(), "discriminator": self.discriminator.to_record()}
        if self.generator_ema is not None:
            rec["generator_ema"] = {k: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
                                    for k, v in sorted(self.generator_ema.params.items())}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ModelState":
        st = cls(nn.ParamStore.from_record(rec["generator"]), nn.ParamStore.from_record(rec["discriminator"]),
                 TrainConfig.from_dict(rec["config"]), int(rec["epoch"]))
        if "generator_ema" in rec:
            st.generator_ema = nn.ParamStore()
            for k, x in rec["generator_ema"].items():
                st.generator_ema.add(k, np.array(x["values"], dtype=np.float64).reshape(x["shape"]))
        return st

    def save(self, path) -> str:
        text = json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))
        Path(path).write_text(text, encoding="utf-8")
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_record(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        text = json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def init_state(config: TrainConfig = TrainConfig()) -> ModelState:
    g = init_generator(substream(config.seed, "init", "generator"), config.net)
    d = init_discriminator(substream(config.seed, "init", "discriminator"), config.net)
    return ModelState(g, d, config, generator_ema=g.copy() if config.ema > 0 else None)


def smoothed_targets(labels: np.ndarray, smooth: float) -> np.ndarray:
    y = np.full((len(labels), N_EMOTIONS), smooth / (N_EMOTIONS - 1))
    y[np.arange(len(labels)), labels] = 1.0 - smooth
    return y


def batch_losses(state: ModelState, batch, p_g: Optional[nn.Tensor] = None, reg: Optional[nn.Tensor] = None,
                 d_tensors: Optional[dict] = None):
    """Discriminator-side components for one batch as tensors on the tape.

    Returns ``(components, terms)`` where ``terms`` are the composed totals.
    """
    cfg = state.config
    if p_g is None or reg is None:
        gp = {k: nn.Tensor(v) for k, v in state.generator.params.items()}
        p_g, reg = generator_batch(gp, batch, cfg.net.out_floor)
    pd = d_tensors if d_tensors is not None else state.discriminator.tensors()
    feats = discriminator_body(pd, batch)
    real = smoothed_targets(batch.labels, cfg.smooth)
    r_logit = real_fake_logit(pd, feats.pooled, feats.aux_neck, real)
    f_logit = real_fake_logit(pd, feats.pooled, feats.aux_neck, p_g.detach())
    adv_d, _ = L.adv_losses_from_logits(r_logit, f_logit)
    # generator-side adversarial term against the current discriminator (value only here)
    g_logit = real_fake_logit({k: t.detach() for k, t in pd.items()}, feats.pooled.detach(),
                              feats.aux_neck.detach(), p_g.detach())
    _, adv_g = L.adv_losses_from_logits(r_logit.detach(), g_logit)

    xt = batch.coords
    recon = feats.recon * batch.cmask[..., None]
    n_valid = batch.cmask.sum() * 2.0
    diff = recon - xt
    comps = {
        "L_cls_aux": L.categorical_cross_entropy(batch.labels, feats.aux_dist),
        "L_cls_traj": L.categorical_cross_entropy(batch.labels, feats.traj_dist),
        "L_mi": L.mutual_information_loss(feats.aux_neck, feats.traj_neck, cfg.mi_bins),
        "kl_pq": L.kl_divergence(feats.aux_dist, feats.traj_dist),
        "kl_qp": L.kl_divergence(feats.traj_dist, feats.aux_dist),
        "L_mse": nn.tsum(diff * diff) * (1.0 / n_valid),
        "L_dtw": L.dtw_loss(xt, feats.recon, batch.lengths),
        "L_cat_ce": adv_d,
        "L_adv": adv_g,
        "L_reg": L.mse(batch.reg, reg.detach()),
    }
    return comps, L.compose_terms(comps, cfg.weights)


def train(dataset: Sequence[SioSequence], config: TrainConfig = TrainConfig(), eval_set=None,
          state: Optional[ModelState] = None, log: Optional[Callable[[dict], None]] = None):
    """Train from scratch (or continue ``state``); returns ``(state, epoch_log)``."""
    labels = [s.emotion for s in dataset]
    if any(l is None for l in labels):
        raise ValueError("every training sequence needs an emotion label")
    missing = set(range(N_EMOTIONS)) - {int(l) for l in labels}
    if missing:
        raise ValueError(f"training set lacks classes {sorted(missing)}")
    state = state or init_state(config)
    cfg = state.config
    history = []
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = substream(cfg.seed, "shuffle", state.epoch).permutation(n)
        sums: dict = {}
        correct = 0
        for s in range(0, n, cfg.batch):
            batch = make_batch([dataset[i] for i in order[s:s + cfg.batch]])

            # discriminator step
            gp = {k: nn.Tensor(v) for k, v in state.generator.params.items()}
            p_g, reg = generator_batch(gp, batch, cfg.net.out_floor)
            pd = state.discriminator.tensors()
            comps, terms = batch_losses(state, batch, p_g, reg, pd)
            report = L.compose_losses(comps, cfg.weights)
            terms["L_D_total"].backward()
            nn.adam_update(state.discriminator, nn.grads_of(pd), lr=cfg.lr)

            # generator step against the updated discriminator
            gp = state.generator.tensors()
            p_g, reg = generator_batch(gp, batch, cfg.net.out_floor)
            dconst = {k: nn.Tensor(v) for k, v in state.discriminator.params.items()}
            pooled = encode(dconst, batch)
            g_logit = real_fake_logit(dconst, pooled, aux_neck_of(dconst, pooled), p_g)
            _, adv_g = L.adv_losses_from_logits(nn.Tensor(np.zeros(len(batch))), g_logit)
            l_reg = L.mse(batch.reg, reg)
            l_g = l_reg + adv_g
            L.check_finite({"L_reg": l_reg, "L_adv": adv_g})
            l_g.backward()
            nn.adam_update(state.generator, nn.grads_of(gp), lr=cfg.lr)
            if state.generator_ema is not None:
                for k, v in state.generator.params.items():
                    e = state.generator_ema.params[k]
                    e *= cfg.ema
                    e += (1.0 - cfg.ema) * v

            correct += int(np.sum(np.argmax(p_g.data, 1) == batch.labels))
            for k, v in report.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
        state.epoch += 1
        rec = {"epoch": state.epoch}
        rec.update({k: v / n for k, v in sums.items()})
        rec["train_accuracy"] = correct / n
        if eval_set is not None:
            rec["test_accuracy"] = accuracy(state, eval_set)
        history.append(rec)
        if log is not None:
            log(rec)
    return state, history


def accuracy(state: ModelState, seqs: Sequence[SioSequence]) -> float:
    probs = predict(state.eval_generator, seqs, out_floor=state.config.net.out_floor)
    y = np.array([int(s.emotion) for s in seqs])
    return float(np.mean(np.argmax(probs, 1) == y))
