"""Basic iterative method (signed-gradient steps with per-step L-inf clipping)
against a victim made of optional differentiable purifiers plus the ASV net."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .asv import EmbeddingNet, embed
from .synthdata import TrialSet, Utterance


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    n_iters: int = 5
    alpha: float | None = None  # defaults to epsilon / n_iters

    def __post_init__(self):
        if self.epsilon < 0 or not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite and >= 0")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.alpha is not None and not (0 < self.alpha <= self.epsilon):
            raise ValueError("alpha must satisfy 0 < alpha <= epsilon")

    @property
    def step(self) -> float:
        return self.epsilon / self.n_iters if self.alpha is None else self.alpha

    def digest(self) -> str:
        text = f"epsilon={self.epsilon!r};n_iters={self.n_iters};alpha={self.step!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


class VictimPipeline:
    """Scores (enroll, test) with the test side passed through ``stages`` first."""

    def __init__(self, net: EmbeddingNet, stages: Sequence = ()):
        self.net = net
        self.stages = list(stages)

    def forward(self, enroll, test) -> nc.Tensor:
        with nc.no_grad():
            e = embed(self.net, enroll)
        x = nc.tensor(test)
        for st in self.stages:
            x = st(x)
        return nc.cosine_similarity(e, embed(self.net, x))

    def score(self, enroll, test) -> np.ndarray:
        with nc.no_grad():
            return self.forward(enroll, test).data.copy()

    def score_and_grad(self, enroll, test) -> tuple[np.ndarray, np.ndarray]:
        """Scores and d(score)/d(test), per trial for batched input."""
        x = nc.Tensor(np.array(test, dtype=np.float64), requires_grad=True)
        s = self.forward(enroll, x)
        nc.backward(nc.tsum(s))
        return s.data.copy(), x.grad


def make_victim(asv: EmbeddingNet, substitute_chain: Sequence = ()) -> VictimPipeline:
    for st in substitute_chain:
        if not getattr(st, "differentiable", True):
            raise ValueError(f"stage {getattr(st, 'name', type(st).__name__)!r} is not differentiable")
    return VictimPipeline(asv, substitute_chain)


def _direction(label) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(label))
    if lab.dtype.kind in "US":
        lab = lab == "target"
    return np.where(lab.astype(bool), -1.0, 1.0)


def bim_attack(victim: VictimPipeline, enroll, test, label, cfg: AttackConfig) -> np.ndarray:
    """Perturb ``test`` (one [T, C] trial or a [B, T, C] batch).

    Nontarget trials climb the score, target trials descend it; every
    iterate is clipped back into the epsilon-ball around ``test``.
    """
    test = np.asarray(test, dtype=np.float64)
    enroll = np.asarray(enroll, dtype=np.float64)
    single = test.ndim == 2
    if single:
        test, enroll = test[None], enroll[None]
    d = _direction(label).reshape(-1, 1, 1)
    if d.shape[0] != test.shape[0]:
        raise ValueError("one label per trial is required")
    lo, hi = test - cfg.epsilon, test + cfg.epsilon
    x = test.copy()
    for n in range(cfg.n_iters):
        _, g = victim.score_and_grad(enroll, x)
        if not np.isfinite(g).all():
            raise AttackError(f"non-finite gradient at iteration {n}")
        x = np.clip(x + d * cfg.step * np.sign(g), lo, hi)
    return x[0] if single else x


@dataclass
class AdversarialSet:
    trials: TrialSet
    test_features: np.ndarray  # [N, T, C], one per trial
    threat: str = "unaware"
    attack_hash: str = ""


def attack_trialset(victim: VictimPipeline, trials: TrialSet, utterances: Sequence[Utterance],
                    cfg: AttackConfig, chunk: int = 50, workers: int = 1, threat: str = "unaware") -> AdversarialSet:
    feats = [u.features for u in utterances]
    n = len(trials)

    def run(start: int) -> np.ndarray:
        sl = slice(start, min(start + chunk, n))
        enroll = np.stack([feats[i] for i in trials.enroll[sl]])
        test = np.stack([feats[i] for i in trials.test[sl]])
        try:
            return bim_attack(victim, enroll, test, trials.target[sl], cfg)
        except AttackError as exc:
            raise AttackError(f"trials {sl.start}..{sl.stop - 1}: {exc}") from exc

    starts = list(range(0, n, chunk))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    adv = np.concatenate(parts)
    return AdversarialSet(trials, adv, threat, cfg.digest())
