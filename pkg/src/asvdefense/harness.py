"""Experiment orchestration behind the command line.

An output directory holds every artifact of one experiment::

    config.txt                     canonical config the artifacts were built from
    data/train.ds, data/eval.ds    standardized utterances
    data/trials.csv                evaluation trials over data/eval.ds
    models/asv.ck                  speaker-embedding net
    models/recon0.ck, recon1.ck    purifiers (seeds s and s + 1)
    adv/unaware.ds, adv/aware.ds   adversarial test sides, one record per trial
    reports/<experiment>.csv       EER / minDCF tables

Each artifact records the config hash; loading anything built from a
different config is refused.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attack as atk
from . import filters as flt
from . import metrics
from . import numcore as nc
from . import oracles
from . import synthdata as sd
from .asv import ASVConfig, ASVPipeline, EmbeddingNet, eval_trials, train_asv
from .config import ConfigError, ExperimentConfig
from .formats import FormatError
from .layers import load_checkpoint, provenance_tensor, read_provenance, save_checkpoint
from .recon import AlterationPolicy, Cascade, ReconConfig, ReconNet, pretrain_recon, reconstruction_l1

log = logging.getLogger(__name__)

EXPERIMENTS = ("table1", "sweep_k", "filters", "aware")
THREATS = ("unaware", "aware")
CHUNK = 50


class HarnessError(Exception):
    """A user-correctable problem: bad input, missing or mismatched artifacts."""


class MissingArtifact(HarnessError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `{producer}` first")


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class Layout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    config = property(lambda s: s.root / "config.txt")
    train = property(lambda s: s.root / "data" / "train.ds")
    eval = property(lambda s: s.root / "data" / "eval.ds")
    trials = property(lambda s: s.root / "data" / "trials.csv")
    asv = property(lambda s: s.root / "models" / "asv.ck")

    def recon(self, i: int) -> Path:
        return self.root / "models" / f"recon{i}.ck"

    def adv(self, threat: str) -> Path:
        return self.root / "adv" / f"{threat}.ds"

    def report(self, experiment: str) -> Path:
        return self.root / "reports" / f"{experiment}.csv"


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _check_hash(found: str | None, cfg: ExperimentConfig, path: Path) -> None:
    want = cfg.digest()
    if found != want:
        raise HarnessError(
            f"{path} was built from config {found or '<unknown>'} but the current config is {want}; "
            "rebuild it with the current config or point --config at the original one")


def _write_config(cfg: ExperimentConfig, lay: Layout) -> None:
    lay.root.mkdir(parents=True, exist_ok=True)
    cfg.save(lay.config)


# ---------------------------------------------------------------- config adapters


def asv_config(cfg: ExperimentConfig) -> ASVConfig:
    c, a = cfg.corpus, cfg.asv
    n_train = c.train_speakers or c.n_speakers
    return ASVConfig(channels=c.channels, hidden=a.hidden, emb_dim=a.emb_dim, n_speakers=n_train,
                     epochs=a.epochs, lr=a.lr, batch=a.batch, margin=a.margin, scale=a.scale)


def recon_config(cfg: ExperimentConfig) -> ReconConfig:
    r = cfg.recon
    return ReconConfig(channels=cfg.corpus.channels, d_model=r.d_model, heads=r.heads, layers=r.layers,
                       ff_dim=r.ff_dim, steps=r.steps, batch=r.batch, lr=r.lr, warmup_frac=r.warmup_frac)


def alteration_policy(cfg: ExperimentConfig) -> AlterationPolicy:
    r = cfg.recon
    return AlterationPolicy(r.time_width, r.channel_width, r.magnitude_prob, r.time_start_prob,
                            r.channel_block_prob)


def attack_config(cfg: ExperimentConfig) -> atk.AttackConfig:
    a = cfg.attack
    return atk.AttackConfig(a.epsilon, a.n_iters, a.alpha or None)


# ---------------------------------------------------------------- loading


@dataclass
class Data:
    train: list[sd.Utterance]
    eval: list[sd.Utterance]
    trials: sd.TrialSet


def load_data(cfg: ExperimentConfig, lay: Layout) -> Data:
    out = []
    for path in (lay.train, lay.eval):
        utts, _, meta = sd.load_dataset_with_meta(_need(path, "gen-data"))
        _check_hash(meta.get("config"), cfg, path)
        out.append(utts)
    comment = sd.parse_meta(sd.trials_comment(_need(lay.trials, "gen-data")))
    _check_hash(comment.get("config"), cfg, lay.trials)
    return Data(out[0], out[1], sd.load_trials(lay.trials))


def _load_model(cls, path: Path, cfg: ExperimentConfig):
    state = load_checkpoint(_need(path, "train"))
    _check_hash(read_provenance(state).get("config"), cfg, path)
    return cls.from_state(state)


def load_asv(cfg: ExperimentConfig, lay: Layout) -> EmbeddingNet:
    return _load_model(EmbeddingNet, lay.asv, cfg)


def load_recon(cfg: ExperimentConfig, lay: Layout, i: int) -> ReconNet:
    return _load_model(ReconNet, lay.recon(i), cfg)


def load_adversarial(cfg: ExperimentConfig, lay: Layout, threat: str, data: Data) -> np.ndarray:
    """Adversarial test features in trial order; the epsilon bound is re-checked."""
    path = _need(lay.adv(threat), f"attack --threat {threat}")
    utts, adversarial, meta = sd.load_dataset_with_meta(path)
    _check_hash(meta.get("config"), cfg, path)
    if not adversarial or meta.get("threat") != threat:
        raise HarnessError(f"{path} is not a {threat} adversarial set")
    if len(utts) != len(data.trials):
        raise HarnessError(f"{path} holds {len(utts)} records for {len(data.trials)} trials")
    adv = np.stack([u.features for u in utts])
    clean = np.stack([data.eval[i].features for i in data.trials.test])
    worst = float(np.max(np.abs(adv - clean)))
    if worst > cfg.attack.epsilon + 1e-12:
        raise HarnessError(f"{path} violates the epsilon bound: max |adv - clean| = {worst!r}")
    return adv


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, out) -> Data:
    lay = Layout(out)
    c = cfg.corpus
    corpus = sd.make_corpus(c.n_speakers, c.train_per_speaker, c.eval_per_speaker, c.frames, c.channels,
                            c.noise_sigma, cfg.seed, c.train_speakers, c.session_sigma)
    trials = sd.make_trials(corpus.eval, c.n_target, c.n_nontarget, cfg.seed)
    _write_config(cfg, lay)
    lay.train.parent.mkdir(parents=True, exist_ok=True)
    meta = f"config={cfg.digest()}"
    sd.save_dataset(lay.train, corpus.train, meta=meta)
    sd.save_dataset(lay.eval, corpus.eval, meta=meta)
    sd.save_trials(lay.trials, trials, comment=meta)
    log.info("wrote %d train / %d eval utterances, %d trials", len(corpus.train), len(corpus.eval), len(trials))
    return Data(corpus.train, corpus.eval, trials)


@dataclass
class TrainSummary:
    asv_losses: list[float]
    recon_l1: list[float]  # held-out clean-input L1 per purifier
    recon_init_l1: list[float]
    seconds: dict[str, float] = field(default_factory=dict)  # wall time per trained model


def cmd_train(cfg: ExperimentConfig, out) -> TrainSummary:
    lay = Layout(out)
    data = load_data(cfg, lay)
    prov = provenance_tensor("config", cfg.digest())
    lay.asv.parent.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    net, losses = train_asv(data.train, asv_config(cfg), cfg.seed)
    save_checkpoint(lay.asv, {**net.state(), **prov})
    seconds = {"asv": time.perf_counter() - t0}
    log.info("asv trained in %.1fs, loss %.3f -> %.3f", time.perf_counter() - t0, losses[0], losses[-1])

    policy, rcfg = alteration_policy(cfg), recon_config(cfg)
    l1, l1_init = [], []
    for i in range(2):
        t0 = time.perf_counter()
        l1_init.append(reconstruction_l1(ReconNet(rcfg, cfg.seed + i), data.eval))
        rnet, _ = pretrain_recon(data.train, policy, rcfg, seed=cfg.seed + i)
        save_checkpoint(lay.recon(i), {**rnet.state(), **prov})
        l1.append(reconstruction_l1(rnet, data.eval))
        seconds[f"recon{i}"] = time.perf_counter() - t0
        log.info("recon%d trained in %.1fs, held-out L1 %.4f -> %.4f", i, time.perf_counter() - t0, l1_init[-1], l1[-1])
    return TrainSummary(losses, l1, l1_init, seconds)


def victim_for(cfg: ExperimentConfig, lay: Layout, threat: str) -> atk.VictimPipeline:
    if threat not in THREATS:
        raise HarnessError(f"unknown threat model {threat!r}; expected one of {THREATS}")
    net = load_asv(cfg, lay)
    # the aware attacker differentiates through a substitute purifier (recon1);
    # the defender deploys recon0
    chain = [Cascade(load_recon(cfg, lay, 1), 1)] if threat == "aware" else []
    return atk.make_victim(net, chain)


def cmd_attack(cfg: ExperimentConfig, out, threat: str) -> np.ndarray:
    lay = Layout(out)
    victim = victim_for(cfg, lay, threat)
    data = load_data(cfg, lay)
    acfg = attack_config(cfg)
    t0 = time.perf_counter()
    adv = atk.attack_trialset(victim, data.trials, data.eval, acfg, CHUNK, cfg.workers, threat)
    log.info("%s attack on %d trials in %.1fs", threat, len(data.trials), time.perf_counter() - t0)
    lay.adv(threat).parent.mkdir(parents=True, exist_ok=True)
    spk = [data.eval[i].speaker_id for i in data.trials.test]
    utts = [sd.Utterance(s, f, int(i)) for i, (s, f) in enumerate(zip(spk, adv.test_features))]
    meta = f"threat={threat};config={cfg.digest()};attack={adv.attack_hash}"
    sd.save_dataset(lay.adv(threat), utts, adversarial=True, meta=meta)
    return adv.test_features


# ---------------------------------------------------------------- evaluation


def _chunked(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, workers: int) -> np.ndarray:
    starts = range(0, len(x), CHUNK)

    def run(s):
        return fn(x[s:s + CHUNK])

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return np.concatenate(list(ex.map(run, starts)))
    return np.concatenate([run(s) for s in starts])


def cascade_levels(net: ReconNet, x: np.ndarray, depths: Sequence[int], workers: int = 1) -> dict[int, np.ndarray]:
    """Outputs of the K-fold cascade for every K in ``depths``, sharing the work of smaller K."""
    out = {}
    cur = x
    for k in range(max(depths) + 1):
        if k > 0:
            with nc.no_grad():
                cur = _chunked(lambda b: net(b).data, cur, workers)
        if k in depths:
            out[k] = cur
    return out


def _filter_all(spec: flt.FilterSpec, x: np.ndarray) -> np.ndarray:
    return np.stack([flt.apply_filter(spec, u) for u in x])


class Evaluator:
    """Scores trial sets under different test-side purifications."""

    def __init__(self, cfg: ExperimentConfig, lay: Layout):
        self.cfg = cfg
        self.lay = lay
        self.data = load_data(cfg, lay)
        self.net = load_asv(cfg, lay)
        self.target = self.data.trials.target
        self._clean_tests = np.stack([u.features for u in self.data.eval])
        self._recon0 = None
        self._adv: dict[str, np.ndarray] = {}

    @property
    def recon0(self) -> ReconNet:
        if self._recon0 is None:
            self._recon0 = load_recon(self.cfg, self.lay, 0)
        return self._recon0

    def adversarial(self, threat: str) -> np.ndarray:
        if threat not in self._adv:
            self._adv[threat] = load_adversarial(self.cfg, self.lay, threat, self.data)
        return self._adv[threat]

    def scored(self, test_features: np.ndarray) -> metrics.ScoredTrials:
        pipe = ASVPipeline(self.net)
        s = eval_trials(pipe, self.data.trials, self.data.eval, test_features, CHUNK, self.cfg.workers)
        return metrics.ScoredTrials(s, self.target)

    def clean_tests(self, purified_utts: np.ndarray | None = None) -> np.ndarray:
        """Per-trial clean test sides; ``purified_utts`` is indexed by eval utterance."""
        base = self._clean_tests if purified_utts is None else purified_utts
        return base[self.data.trials.test]

    def cascade_sweep(self, threat: str, depths: Sequence[int], clean: bool = True):
        """{K: (clean ScoredTrials or None, adversarial ScoredTrials)} for the recon0 cascade."""
        w = self.cfg.workers
        adv_levels = cascade_levels(self.recon0, self.adversarial(threat), depths, w)
        clean_levels = cascade_levels(self.recon0, self._clean_tests, depths, w) if clean else {}
        return {k: (self.scored(self.clean_tests(clean_levels[k])) if clean else None,
                    self.scored(adv_levels[k])) for k in depths}


def best_k(sweep: dict) -> int:
    """Depth in 1..7 with the lowest adversarial EER (smallest K on ties)."""
    cand = [k for k in sorted(sweep) if 1 <= k <= 7]
    if not cand:
        raise HarnessError("the K list has no depth in 1..7 to pick a best cascade from")
    return min(cand, key=lambda k: (metrics.eer(sweep[k][1]), k))


def run_experiment(ev: Evaluator, experiment: str) -> list[tuple[str, metrics.ScoredTrials]]:
    d = ev.cfg.defense
    if experiment == "table1":
        return [("clean", ev.scored(ev.clean_tests())), ("adversarial", ev.scored(ev.adversarial("unaware")))]
    if experiment == "sweep_k":
        sweep = ev.cascade_sweep("unaware", d.k_list)
        rows = []
        for k in d.k_list:
            rows += [(f"clean_K{k}", sweep[k][0]), (f"adversarial_K{k}", sweep[k][1])]
        return rows
    if experiment == "filters":
        sweep = ev.cascade_sweep("unaware", sorted(set(d.k_list) | {0}))
        k = best_k(sweep)
        rows = [("clean_none", sweep[0][0]), ("adversarial_none", sweep[0][1]),
                (f"clean_cascade_K{k}", sweep[k][0]), (f"adversarial_cascade_K{k}", sweep[k][1])]
        for spec in d.filters:
            rows.append((f"clean_{spec.name}", ev.scored(ev.clean_tests(_filter_all(spec, ev._clean_tests)))))
            rows.append((f"adversarial_{spec.name}", ev.scored(_filter_all(spec, ev.adversarial("unaware")))))
        return rows
    if experiment == "aware":
        sweep = ev.cascade_sweep("aware", d.aware_k_list, clean=False)
        return [(f"aware_K{k}", sweep[k][1]) for k in d.aware_k_list]
    raise HarnessError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")


def cmd_evaluate(cfg: ExperimentConfig, out, experiment: str) -> metrics.EvalReport:
    if experiment not in EXPERIMENTS:
        raise HarnessError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    lay = Layout(out)
    ev = Evaluator(cfg, lay)
    rows = run_experiment(ev, experiment)
    rep = metrics.report(rows, cfg.digest(), cfg.seed)
    rep.metadata = {"experiment": experiment, "config_hash": cfg.digest(), "seed": str(cfg.seed)}
    lay.report(experiment).parent.mkdir(parents=True, exist_ok=True)
    rep.save(lay.report(experiment))
    return rep


# ---------------------------------------------------------------- selfcheck


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def gradient_ops(rng: np.random.Generator) -> dict[str, Callable[[nc.Tensor], nc.Tensor]]:
    """Scalar test functions, one per differentiable operation, over a [3, 4] input."""
    w = rng.normal(size=(4, 3))
    other = rng.normal(size=(3, 4))
    g, b = rng.normal(size=4), rng.normal(size=4)
    att = {k: nc.Tensor(rng.normal(size=(4, 4)) * 0.5) for k in ("wq", "wk", "wv", "wo")}
    labels = rng.integers(0, 3, size=3)
    classes = rng.normal(size=(5, 4))
    gauss = flt.LinearFilterStage(flt.FilterSpec("gaussian", 3, 1.0), 3, 4)

    def weighted(y):
        return nc.tsum(nc.mul(y, other))

    return {
        "matmul": lambda x: nc.tsum(nc.matmul(x, w)),
        "add": lambda x: weighted(nc.add(x, other)),
        "sub": lambda x: weighted(nc.sub(other, x)),
        "mul": lambda x: weighted(nc.mul(x, x)),
        "scale": lambda x: weighted(nc.scale(x, -1.7)),
        "gelu": lambda x: weighted(nc.gelu(x)),
        "tanh": lambda x: weighted(nc.tanh(x)),
        "layer_norm": lambda x: weighted(nc.layer_norm(x, g, b)),
        "softmax": lambda x: weighted(nc.softmax_rows(x)),
        "l2_normalize": lambda x: weighted(nc.l2_normalize(x)),
        "cosine": lambda x: nc.tsum(nc.cosine_similarity(x, other)),
        "cross_entropy": lambda x: nc.cross_entropy(x, labels),
        "aam_softmax": lambda x: nc.aam_softmax_loss(x, classes, labels, 0.2, 10.0),
        "attention": lambda x: weighted(nc.multihead_attention(x, x, x, 2, att)),
        "gaussian_filter": lambda x: weighted(gauss(x)),
    }


def run_selfcheck(extra_ops: dict[str, Callable[[nc.Tensor], nc.Tensor]] | None = None,
                  seeds: int = 5, metric_sets: int = 200) -> list[Check]:
    checks: list[Check] = []

    # gradients
    names = list(gradient_ops(np.random.default_rng(0))) + list(extra_ops or {})
    for name in names:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            fn = (extra_ops or {}).get(name) or gradient_ops(rng)[name]
            worst = max(worst, nc.grad_check(fn, rng.normal(size=(3, 4)), 1e-4, richardson=True))
        checks.append(Check(f"grad:{name}", worst < 1e-5, f"max relative error {worst:.2e}"))

    # metrics against the brute-force oracle
    rng = np.random.default_rng(1)
    bad = 0
    for i in range(metric_sets):
        n = int(rng.integers(2, 200))
        scores = rng.integers(0, 5, size=n).astype(float) if i % 3 == 0 else rng.normal(size=n)
        target = rng.random(n) < 0.5
        target[0], target[1] = True, False
        st = metrics.ScoredTrials(scores, target)
        if (metrics.eer(st) != oracles.brute_force_eer(scores, target)
                or metrics.min_dcf(st) != oracles.brute_force_min_dcf(scores, target)):
            bad += 1
    checks.append(Check("metrics:oracle", bad == 0, f"{bad} of {metric_sets} sets disagree"))

    # filters
    k = flt.gaussian_kernel(3, 1.0)
    checks.append(Check("filters:kernel_sum", abs(k.sum() - 1) <= 1e-12, f"sum {float(k.sum())!r}"))
    const = np.full((16, 8), 2.5)
    x = np.random.default_rng(2).normal(size=(16, 8))
    for kind in flt.KINDS:
        spec = flt.FilterSpec(kind, 3, 1.0)
        ok = np.array_equal(flt.apply_filter(spec, const), const)
        ok &= np.array_equal(flt.apply_filter(flt.FilterSpec(kind, 1, 1.0), x), x)
        checks.append(Check(f"filters:{kind}", bool(ok), "constant preservation and window-1 identity"))
    impulse = np.zeros((5, 5))
    impulse[2, 2] = 10.0
    centre = flt.apply_filter(flt.FilterSpec("median", 3), impulse)[2, 2]
    checks.append(Check("filters:median_impulse", centre == 0.0, f"centre {centre}"))
    return checks


def cmd_selfcheck(extra_ops=None) -> list[Check]:
    return run_selfcheck(extra_ops)


__all__ = [
    "HarnessError", "MissingArtifact", "ConfigError", "FormatError", "Layout", "Data", "Evaluator",
    "cmd_gen_data", "cmd_train", "cmd_attack", "cmd_evaluate", "cmd_selfcheck", "run_selfcheck",
    "run_experiment", "cascade_levels", "best_k", "victim_for", "EXPERIMENTS", "THREATS",
]
