import numpy as np
import pytest

from asvdefense import asv
from asvdefense import numcore as nc
from asvdefense import synthdata as sd
from asvdefense.metrics import ScoredTrials, eer


def _net(seed=0, **kw):
    return asv.EmbeddingNet(asv.ASVConfig(**kw), seed).freeze()


def test_embedding_unit_norm_and_deterministic():
    net = _net()
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(40, 24)) * rng.uniform(0.1, 5)
        e = asv.embed(net, x).data
        assert abs(np.linalg.norm(e) - 1) <= 1e-12
        assert np.array_equal(e, asv.embed(net, x).data)


def test_batched_embedding_matches_single():
    net = _net()
    x = np.random.default_rng(1).normal(size=(3, 20, 24))
    batch = asv.embed(net, x).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], asv.embed(net, x[i]).data, atol=1e-14)


def test_channel_mismatch_rejected():
    with pytest.raises(nc.ShapeError, match="channels"):
        asv.embed(_net(), np.zeros((10, 23)))


def test_embedding_gradient_matches_finite_differences():
    net = _net(1, hidden=16, emb_dim=8)
    x = np.random.default_rng(2).normal(size=(16, 24))
    for coord in (0, 3, 7):
        err = nc.grad_check(lambda t: nc.tsum(nc.mul(asv.embed(net, t), np.eye(8)[coord])), x)
        assert err < 1e-5


def test_score_identity_and_symmetry():
    net = _net()
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 30, 24))
    assert abs(asv.score(net, a, a) - 1) < 1e-12
    assert asv.score(net, a, b) == pytest.approx(asv.score(net, b, a), abs=1e-15)
    assert -1 <= asv.score(net, a, b) <= 1


@pytest.fixture(scope="module")
def small_world():
    c = sd.make_corpus(n_speakers=8, train_per_speaker=8, eval_per_speaker=6, T=32, seed=5)
    cfg = asv.ASVConfig(n_speakers=8, epochs=6, hidden=32, emb_dim=16)
    net, hist = asv.train_asv(c.train, cfg, seed=1)
    return c, cfg, net, hist


def test_training_loss_decreases(small_world):
    _, _, _, hist = small_world
    assert all(b < a for a, b in zip(hist[:5], hist[1:5]))
    assert hist[-1] < hist[0]


def test_training_deterministic(small_world):
    c, cfg, net, _ = small_world
    again, _ = asv.train_asv(c.train, cfg, seed=1)
    for k, v in net.state().items():
        assert np.array_equal(v, again.state()[k])


def test_trained_net_separates_held_out_trials(small_world):
    c, _, net, _ = small_world
    trials = sd.make_trials(c.eval, 60, 60, seed=0)
    scores = asv.eval_trials(asv.ASVPipeline(net), trials, c.eval)
    assert scores[trials.target].mean() > scores[~trials.target].mean()
    assert eer(ScoredTrials(scores, trials.target)) < 25


def test_train_validation():
    utts = sd.make_utterances(sd.make_speakers(2, 0), 2, 16, 0.5, 0)
    with pytest.raises(ValueError, match="two speakers"):
        asv.train_asv(utts[:2], asv.ASVConfig(n_speakers=2))
    with pytest.raises(ValueError, match="epochs"):
        asv.train_asv(utts, asv.ASVConfig(n_speakers=2, epochs=0))
    with pytest.raises(ValueError, match="n_speakers"):
        asv.train_asv(utts, asv.ASVConfig(n_speakers=1))


def test_training_divergence_aborts():
    utts = sd.make_utterances(sd.make_speakers(2, 0), 2, 16, 0.5, 0)
    with pytest.raises(nc.NonFiniteError), np.errstate(over="ignore", invalid="ignore"):
        asv.train_asv(utts, asv.ASVConfig(n_speakers=2, epochs=3, lr=1e200))


def test_checkpoint_round_trip(tmp_path, small_world):
    _, _, net, _ = small_world
    net.save(tmp_path / "a.ck")
    back = asv.EmbeddingNet.load(tmp_path / "a.ck")
    assert back.cfg == net.cfg
    x = np.random.default_rng(4).normal(size=(32, 24))
    assert np.array_equal(asv.embed(back, x).data, asv.embed(net, x).data)


def test_eval_trials_contract(small_world):
    c, _, net, _ = small_world
    trials = sd.make_trials(c.eval, 40, 73, seed=1)
    pipe = asv.ASVPipeline(net)
    serial = asv.eval_trials(pipe, trials, c.eval, chunk=16, workers=1)
    parallel = asv.eval_trials(pipe, trials, c.eval, chunk=16, workers=4)
    assert len(serial) == len(trials)
    assert np.array_equal(serial, parallel)
    raw = [asv.score(net, c.eval[e].features, c.eval[t].features) for e, t in zip(trials.enroll, trials.test)]
    np.testing.assert_allclose(serial, raw, atol=1e-14)


def test_defense_applies_to_test_side_only(small_world):
    c, _, net, _ = small_world
    trials = sd.make_trials(c.eval, 5, 5, seed=2)
    calls = []

    def stage(x):
        calls.append(x.shape)
        return x

    asv.eval_trials(asv.ASVPipeline(net, [stage]), trials, c.eval)
    assert len(calls) == 1  # one chunk, test side only
    asv.eval_trials(asv.ASVPipeline(net, [stage], purify_enroll=True), trials, c.eval)
    assert len(calls) == 3
