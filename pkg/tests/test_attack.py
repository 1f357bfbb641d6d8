import numpy as np
import pytest

from asvdefense import asv
from asvdefense import attack as A
from asvdefense import filters as F
from asvdefense import numcore as nc
from asvdefense import recon as R
from asvdefense import synthdata as sd


@pytest.fixture(scope="module")
def world():
    c = sd.make_corpus(n_speakers=10, train_per_speaker=8, eval_per_speaker=6, T=32, seed=3, session_sigma=0.6)
    net, _ = asv.train_asv(c.train, asv.ASVConfig(n_speakers=10, epochs=8, hidden=32, emb_dim=16), seed=0)
    trials = sd.make_trials(c.eval, 100, 100, seed=1)
    return c, net, trials


class ConstantVictim(A.VictimPipeline):
    def __init__(self):
        pass

    def score_and_grad(self, enroll, test):
        return np.zeros(len(test)), np.zeros_like(test)


class LinearVictim(A.VictimPipeline):
    """score = <w, test>; gradient w everywhere."""

    def __init__(self, w):
        self.w = w

    def score_and_grad(self, enroll, test):
        return (test * self.w).sum(axis=(1, 2)), np.broadcast_to(self.w, test.shape).copy()


def test_zero_gradient_is_fixed_point():
    x = np.random.default_rng(0).normal(size=(8, 4))
    out = A.bim_attack(ConstantVictim(), x, x, "nontarget", A.AttackConfig())
    assert np.array_equal(out, x)


@pytest.mark.parametrize("label, d", [("nontarget", 1.0), ("target", -1.0)])
def test_single_step_closed_form(label, d):
    rng = np.random.default_rng(1)
    w = rng.normal(size=(8, 4))
    w[0, 0] = 0.0
    x = rng.normal(size=(8, 4))
    cfg = A.AttackConfig(epsilon=0.3, n_iters=1)
    out = A.bim_attack(LinearVictim(w), x, x, label, cfg)
    assert np.array_equal(out, np.clip(x + d * 0.3 * np.sign(w), x - 0.3, x + 0.3))
    moved = np.abs(out - x)
    assert moved[0, 0] == 0.0
    np.testing.assert_allclose(moved[w != 0], 0.3, rtol=0, atol=1e-15)


def test_bound_holds_after_every_iteration():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(6, 3))
    x = rng.normal(size=(6, 3))
    for n in range(1, 8):
        out = A.bim_attack(LinearVictim(w), x, x, "nontarget", A.AttackConfig(0.3, n, alpha=0.3))
        assert np.max(np.abs(out - x)) <= 0.3 + 1e-12


def test_config_validation_and_default_step():
    assert A.AttackConfig(0.3, 5).step == pytest.approx(0.06)
    for bad in (dict(epsilon=-1), dict(n_iters=0), dict(alpha=0.5), dict(alpha=0.0)):
        with pytest.raises(ValueError):
            A.AttackConfig(**{"epsilon": 0.3, **bad})


def test_attack_properties_on_trained_victim(world):
    c, net, trials = world
    victim = A.make_victim(net)
    adv = A.attack_trialset(victim, trials, c.eval, A.AttackConfig(), chunk=32)
    clean = np.stack([c.eval[i].features for i in trials.test])
    assert len(adv.test_features) == len(trials)
    assert np.max(np.abs(adv.test_features - clean)) <= 0.3 + 1e-12
    pipe = asv.ASVPipeline(net)
    s_clean = asv.eval_trials(pipe, trials, c.eval)
    s_adv = asv.eval_trials(pipe, trials, c.eval, adv.test_features)
    non = ~trials.target
    assert np.mean(s_adv[non] >= s_clean[non]) >= 0.95
    assert np.mean(s_adv[trials.target] <= s_clean[trials.target]) >= 0.95


def test_attack_trialset_deterministic_and_parallel_safe(world):
    c, net, trials = world
    victim = A.make_victim(net)
    a = A.attack_trialset(victim, trials, c.eval, A.AttackConfig(), chunk=25)
    b = A.attack_trialset(victim, trials, c.eval, A.AttackConfig(), chunk=25, workers=4)
    assert np.array_equal(a.test_features, b.test_features)
    assert a.attack_hash == A.AttackConfig().digest()


def test_epsilon_zero_returns_clean(world):
    c, net, trials = world
    adv = A.attack_trialset(A.make_victim(net), trials, c.eval, A.AttackConfig(epsilon=0.0))
    clean = np.stack([c.eval[i].features for i in trials.test])
    assert np.array_equal(adv.test_features, clean)
    assert np.array_equal(adv.trials.target, trials.target)


def test_small_step_raises_nontarget_score(world):
    c, net, trials = world
    victim = A.make_victim(net)
    cfg = A.AttackConfig(epsilon=1e-4, n_iters=1)
    idx = np.flatnonzero(~trials.target)[:30]
    e = np.stack([c.eval[i].features for i in trials.enroll[idx]])
    t = np.stack([c.eval[i].features for i in trials.test[idx]])
    out = A.bim_attack(victim, e, t, np.zeros(len(idx), bool), cfg)
    assert np.all(victim.score(e, out) >= victim.score(e, t))


def test_empty_chain_matches_asv_score(world):
    c, net, _ = world
    x, y = c.eval[0].features, c.eval[7].features
    assert A.make_victim(net).score(x, y) == pytest.approx(asv.score(net, x, y), abs=1e-15)


def test_victim_chain_gradient(world):
    c, net, _ = world
    rnet = R.ReconNet(R.ReconConfig(d_model=8, heads=2, layers=1, ff_dim=8), 0).freeze()
    gauss = F.LinearFilterStage(F.FilterSpec("gaussian"), 12, 24)
    victim = A.make_victim(net, [R.Cascade(rnet, 1), gauss])
    e = c.eval[0].features[:12]
    t = c.eval[9].features[:12]
    assert nc.grad_check(lambda x: victim.forward(e, x), t, richardson=True) < 1e-5


def test_median_stage_rejected_by_name(world):
    _, net, _ = world
    with pytest.raises(ValueError, match="median"):
        A.make_victim(net, [F.FilterStage(F.FilterSpec("median", 3))])


def test_nonfinite_gradient_reports_iteration():
    class Bad(LinearVictim):
        def score_and_grad(self, enroll, test):
            s, g = super().score_and_grad(enroll, test)
            if self.calls == 2:
                g[0, 0, 0] = np.nan
            self.calls += 1
            return s, g

    v = Bad(np.ones((4, 3)))
    v.calls = 0
    with pytest.raises(A.AttackError, match="iteration 2"):
        A.bim_attack(v, np.zeros((4, 3)), np.zeros((4, 3)), "target", A.AttackConfig())
