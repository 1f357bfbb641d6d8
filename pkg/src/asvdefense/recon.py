"""Masked-reconstruction purifier.

A small post-norm transformer encoder is pretrained to reconstruct clean
feature matrices from copies with zeroed time blocks, a zeroed channel band and
optionally noised cells.  Applied K times in sequence it acts as a deep filter
in front of the speaker-verification net.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .layers import ParamStore, config_tensors, dense, load_checkpoint, norm, save_checkpoint, split_config
from .synthdata import Utterance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlterationPolicy:
    time_width: int = 7
    channel_width: int = 5
    magnitude_prob: float = 0.0
    time_start_prob: float = 0.15 / 7
    channel_block_prob: float = 0.2

    def __post_init__(self):
        if self.time_width < 1 or self.channel_width < 1:
            raise ValueError("alteration widths must be >= 1")
        for name in ("magnitude_prob", "time_start_prob", "channel_block_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


def alter(x: np.ndarray, policy: AlterationPolicy, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (altered copy, boolean mask of altered cells)."""
    T, C = x.shape
    if T < policy.time_width or C < policy.channel_width:
        raise ValueError(f"input {T}x{C} smaller than alteration widths {policy.time_width}x{policy.channel_width}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((T, C), dtype=bool)
    starts = np.flatnonzero(rng.random(T - policy.time_width + 1) < policy.time_start_prob)
    for s in starts:
        mask[s:s + policy.time_width, :] = True
    if rng.random() < policy.channel_block_prob:
        c0 = rng.integers(0, C - policy.channel_width + 1)
        mask[:, c0:c0 + policy.channel_width] = True
    out = np.where(mask, 0.0, x)
    if policy.magnitude_prob > 0:
        noisy = rng.random((T, C)) < policy.magnitude_prob
        out = np.where(noisy, rng.normal(size=(T, C)), out)
        mask |= noisy
    return out, mask


@dataclass
class ReconConfig:
    channels: int = 24
    d_model: int = 32
    heads: int = 4
    layers: int = 3
    ff_dim: int = 64
    steps: int = 3000
    batch: int = 32
    lr: float = 2e-3
    warmup_frac: float = 0.07


def positional_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


class ReconNet:
    def __init__(self, cfg: ReconConfig, seed: int = 0):
        if cfg.d_model % cfg.heads:
            raise ValueError(f"d_model={cfg.d_model} not divisible by heads={cfg.heads}")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p = ParamStore()
        d = cfg.d_model
        p.linear("inp", cfg.channels, d, rng)
        p.norm("inp_norm", d)
        for l in range(cfg.layers):
            for w in ("q", "k", "v", "o"):
                p.linear(f"l{l}.att.{w}", d, d, rng)
            p.norm(f"l{l}.norm1", d)
            p.linear(f"l{l}.ff1", d, cfg.ff_dim, rng)
            p.linear(f"l{l}.ff2", cfg.ff_dim, d, rng)
            p.norm(f"l{l}.norm2", d)
        p.linear("head1", d, d, rng)
        p.norm("head_norm", d)
        p.linear("head2", d, cfg.channels, rng)
        self.store = p
        self._pe: dict[int, nc.Tensor] = {}

    def _pos(self, T: int) -> nc.Tensor:
        if T not in self._pe:
            self._pe[T] = nc.Tensor(positional_encoding(T, self.cfg.d_model))
        return self._pe[T]

    def forward(self, x) -> nc.Tensor:
        x = nc.tensor(x)
        if x.ndim < 2 or x.shape[-1] != self.cfg.channels:
            raise nc.ShapeError(f"expected [..., T, {self.cfg.channels}] input, got {x.shape}")
        s = self.store
        h = norm(nc.add(dense(x, s, "inp"), self._pos(x.shape[-2])), s, "inp_norm")
        for l in range(self.cfg.layers):
            att_params = {}
            for w in ("q", "k", "v", "o"):
                att_params[f"w{w}"] = s[f"l{l}.att.{w}.w"]
                att_params[f"b{w}"] = s[f"l{l}.att.{w}.b"]
            a = nc.multihead_attention(h, h, h, self.cfg.heads, att_params)
            h = norm(nc.add(h, a), s, f"l{l}.norm1")
            f = dense(nc.gelu(dense(h, s, f"l{l}.ff1")), s, f"l{l}.ff2")
            h = norm(nc.add(h, f), s, f"l{l}.norm2")
        h = norm(nc.gelu(dense(h, s, "head1")), s, "head_norm")
        return dense(h, s, "head2")

    __call__ = forward

    def freeze(self) -> "ReconNet":
        self.store.freeze()
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {**config_tensors(asdict(self.cfg)), **self.store.state()}

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ReconNet":
        cfg_vals, params = split_config(state)
        types = {k: type(v) for k, v in asdict(ReconConfig()).items()}
        cfg = ReconConfig(**{k: types[k](v) for k, v in cfg_vals.items() if k in types})
        net = cls(cfg)
        net.store.load_state(params)
        return net.freeze()

    @classmethod
    def load(cls, path) -> "ReconNet":
        return cls.from_state(load_checkpoint(path))


def reconstruct(net: ReconNet, x) -> nc.Tensor:
    """Differentiable reconstruction of a [T, C] or [B, T, C] input."""
    return net(x)


def pretrain_recon(corpus: Sequence[Utterance], policy: AlterationPolicy, cfg: ReconConfig,
                   seed: int = 0, callback: Callable[[int, ReconNet], None] | None = None
                   ) -> tuple[ReconNet, list[float]]:
    """L1 alteration-prediction pretraining over all cells; returns frozen net and loss per step.

    ``callback(step, net)`` runs after every optimizer step (progress, probes).
    """
    if not corpus:
        raise ValueError("empty pretraining corpus")
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    feats = np.stack([u.features for u in corpus])
    net = ReconNet(cfg, seed)
    opt = nc.Adam(net.store.values(), lr=cfg.lr, warmup_frac=cfg.warmup_frac, total_steps=cfg.steps)
    rng = np.random.default_rng([seed, 7])
    history = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(feats), size=cfg.batch)
        alt_seeds = rng.integers(0, 2**32, size=cfg.batch)
        clean = feats[idx]
        altered = np.stack([alter(c, policy, int(s))[0] for c, s in zip(clean, alt_seeds)])
        loss = nc.l1_loss(net(altered), clean)
        if not np.isfinite(loss.data):
            raise nc.NonFiniteError(f"reconstruction pretraining diverged at step {step}")
        nc.backward(loss)
        opt.step()
        history.append(loss.item())
        if callback is not None:
            callback(step, net)
        if step % 500 == 0:
            log.info("recon step %d loss %.4f", step, np.mean(history[-100:]))
    return net.freeze(), history


class Cascade:
    """One frozen ReconNet applied ``k`` times."""

    differentiable = True

    def __init__(self, net: ReconNet | None, k: int):
        if k < 0:
            raise ValueError("cascade depth must be >= 0")
        if k > 0 and net is None:
            raise ValueError("a nonempty cascade needs a model")
        self.net = net
        self.k = k
        self.name = f"{k}*recon"

    def __call__(self, x) -> nc.Tensor:
        return cascade_apply(self, x)


def cascade_apply(c: Cascade, x) -> nc.Tensor:
    x = nc.tensor(x)
    for _ in range(c.k):
        x = c.net(x)
    return x


def reconstruction_l1(net: ReconNet, utts: Sequence[Utterance], chunk: int = 64) -> float:
    """Mean absolute difference between clean inputs and their reconstruction."""
    feats = np.stack([u.features for u in utts])
    total = 0.0
    with nc.no_grad():
        for s in range(0, len(feats), chunk):
            x = feats[s:s + chunk]
            total += np.abs(net(x).data - x).sum()
    return float(total / feats.size)
