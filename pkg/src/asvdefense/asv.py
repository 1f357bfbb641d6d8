"""Toy speaker-embedding system: frame-wise MLP, mean pooling, unit-norm
embeddings trained with AAM-softmax, cosine trial scoring."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .layers import ParamStore, config_tensors, dense, load_checkpoint, save_checkpoint, split_config
from .synthdata import TrialSet, Utterance

log = logging.getLogger(__name__)


@dataclass
class ASVConfig:
    channels: int = 24
    hidden: int = 64
    emb_dim: int = 32
    n_speakers: int = 20
    epochs: int = 30
    lr: float = 3e-3
    batch: int = 32
    margin: float = 0.2
    scale: float = 30.0


class EmbeddingNet:
    def __init__(self, cfg: ASVConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p = ParamStore()
        p.linear("fc1", cfg.channels, cfg.hidden, rng)
        p.linear("fc2", cfg.hidden, cfg.hidden, rng)
        p.linear("proj", cfg.hidden, cfg.emb_dim, rng)
        p.add("classes", rng.normal(size=(cfg.n_speakers, cfg.emb_dim)))
        self.store = p

    def embedding_params(self) -> list[nc.Tensor]:
        return [t for k, t in self.store.params.items() if k != "classes"]

    def raw_embedding(self, x) -> nc.Tensor:
        x = nc.tensor(x)
        if x.shape[-1] != self.cfg.channels:
            raise nc.ShapeError(f"expected {self.cfg.channels} channels, got {x.shape[-1]}")
        h = nc.gelu(dense(x, self.store, "fc1"))
        h = nc.gelu(dense(h, self.store, "fc2"))
        pooled = nc.mean(h, axis=-2)
        if pooled.ndim == 1:  # single utterance
            return nc.reshape(dense(nc.reshape(pooled, (1, -1)), self.store, "proj"), (-1,))
        return dense(pooled, self.store, "proj")

    def freeze(self) -> "EmbeddingNet":
        self.store.freeze()
        return self

    # checkpoint round trip
    def state(self) -> dict[str, np.ndarray]:
        cfg = {k: v for k, v in asdict(self.cfg).items()}
        return {**config_tensors(cfg), **self.store.state()}

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "EmbeddingNet":
        cfg_vals, params = split_config(state)
        types = {k: type(v) for k, v in asdict(ASVConfig()).items()}
        cfg = ASVConfig(**{k: types[k](v) for k, v in cfg_vals.items() if k in types})
        net = cls(cfg)
        net.store.load_state(params)
        return net.freeze()

    @classmethod
    def load(cls, path) -> "EmbeddingNet":
        return cls.from_state(load_checkpoint(path))


def embed(net: EmbeddingNet, x) -> nc.Tensor:
    """Unit-norm embedding of one [T, C] utterance or a [B, T, C] batch."""
    return nc.l2_normalize(net.raw_embedding(x))


def score(net: EmbeddingNet, enroll, test) -> float:
    with nc.no_grad():
        return float(nc.cosine_similarity(embed(net, enroll), embed(net, test)).data)


def train_asv(utterances: Sequence[Utterance], cfg: ASVConfig, seed: int = 0) -> tuple[EmbeddingNet, list[float]]:
    """Train with AAM-softmax; returns the frozen net and per-epoch mean loss."""
    spk = np.array([u.speaker_id for u in utterances])
    if len(np.unique(spk)) < 2:
        raise ValueError("training needs at least two speakers")
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if spk.max() >= cfg.n_speakers:
        raise ValueError(f"speaker id {spk.max()} exceeds n_speakers={cfg.n_speakers}")
    feats = np.stack([u.features for u in utterances])
    net = EmbeddingNet(cfg, seed)
    opt = nc.Adam(net.store.values(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(feats))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            emb = net.raw_embedding(feats[idx])
            loss = nc.aam_softmax_loss(emb, net.store["classes"], spk[idx], cfg.margin, cfg.scale)
            if not np.isfinite(loss.data):
                raise nc.NonFiniteError(f"ASV training diverged at epoch {epoch + 1}")
            nc.backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("asv epoch %d loss %.4f", epoch + 1, history[-1])
    return net.freeze(), history


# ---------------------------------------------------------------- pipelines

Stage = Callable[[nc.Tensor], nc.Tensor]


@dataclass
class ASVPipeline:
    """Embedding net plus an ordered defense chain applied to the test side."""

    net: EmbeddingNet
    defense: list = field(default_factory=list)
    purify_enroll: bool = False

    def purify(self, x) -> nc.Tensor:
        x = nc.tensor(x)
        for stage in self.defense:
            x = stage(x)
        return x

    def score_batch(self, enroll, test) -> np.ndarray:
        with nc.no_grad():
            e = self.purify(enroll) if self.purify_enroll else nc.tensor(enroll)
            t = self.purify(test)
            return nc.cosine_similarity(embed(self.net, e), embed(self.net, t)).data.copy()


def eval_trials(pipeline: ASVPipeline, trials: TrialSet, utterances: Sequence[Utterance],
                test_features: np.ndarray | None = None, chunk: int = 50, workers: int = 1) -> np.ndarray:
    """One score per trial, in trial order.

    ``test_features`` ([N, T, C]) replaces the test side (adversarial sets).
    Work is split into fixed chunks so results do not depend on ``workers``.
    """
    feats = [u.features for u in utterances]
    n = len(trials)

    def run(start: int) -> np.ndarray:
        sl = slice(start, min(start + chunk, n))
        enroll = np.stack([feats[i] for i in trials.enroll[sl]])
        if test_features is None:
            test = np.stack([feats[i] for i in trials.test[sl]])
        else:
            test = test_features[sl]
        return pipeline.score_batch(enroll, test)

    starts = list(range(0, n, chunk))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0)
