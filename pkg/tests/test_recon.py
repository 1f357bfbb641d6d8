import numpy as np
import pytest

from asvdefense import numcore as nc
from asvdefense import recon as R
from asvdefense import synthdata as sd

SMALL = R.ReconConfig(d_model=8, heads=2, layers=2, ff_dim=16, steps=40, batch=8, lr=3e-3)


def test_noop_policy():
    x = np.random.default_rng(0).normal(size=(20, 24))
    pol = R.AlterationPolicy(time_start_prob=0.0, channel_block_prob=0.0, magnitude_prob=0.0)
    alt, mask = R.alter(x, pol, seed=3)
    assert np.array_equal(alt, x) and not mask.any()


def test_alter_deterministic_and_measure_preserving():
    x = np.random.default_rng(1).normal(size=(96, 24))
    pol = R.AlterationPolicy(magnitude_prob=0.05, channel_block_prob=0.5)
    for seed in range(50):
        a1, m1 = R.alter(x, pol, seed)
        a2, m2 = R.alter(x, pol, seed)
        assert np.array_equal(m1, m2) and np.array_equal(a1, a2)
        assert np.array_equal(a1[~m1], x[~m1])


def test_zero_fill_and_block_shapes():
    x = np.ones((96, 24))
    pol = R.AlterationPolicy(time_start_prob=0.05, channel_block_prob=1.0)
    alt, mask = R.alter(x, pol, seed=11)
    assert np.all(alt[mask] == 0.0)
    full_cols = np.flatnonzero(mask.all(axis=0))
    assert len(full_cols) >= 5 and np.all(np.diff(full_cols[:5]) == 1)


def test_altered_frame_fraction():
    x = np.zeros((96, 24))
    pol = R.AlterationPolicy(channel_block_prob=0.0)
    frac = np.mean([R.alter(x, pol, s)[1].all(axis=1).mean() for s in range(1000)])
    assert abs(frac - 0.15) <= 0.03


def test_alter_validation():
    with pytest.raises(ValueError):
        R.alter(np.zeros((5, 24)), R.AlterationPolicy(), 0)
    with pytest.raises(ValueError):
        R.AlterationPolicy(time_start_prob=1.5)
    with pytest.raises(ValueError):
        R.AlterationPolicy(time_width=0)


def test_reconstruct_shape_and_rejection():
    net = R.ReconNet(SMALL, 0).freeze()
    x = np.random.default_rng(2).normal(size=(3, 17, 24))
    assert R.reconstruct(net, x).shape == x.shape
    assert R.reconstruct(net, x[0]).shape == x[0].shape
    with pytest.raises(nc.ShapeError):
        R.reconstruct(net, np.zeros((10, 20)))


def test_reconstruct_gradient():
    net = R.ReconNet(SMALL, 1).freeze()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 24))
    w = rng.normal(size=(6, 24))
    assert nc.grad_check(lambda t: nc.tsum(nc.mul(R.reconstruct(net, t), w)), x) < 1e-5


def test_bounded_inputs_give_finite_outputs():
    net = R.ReconNet(R.ReconConfig(), 0).freeze()
    rng = np.random.default_rng(4)
    for scale in (1e-6, 1.0, 10.0):
        x = np.clip(rng.normal(size=(4, 96, 24)) * scale * 5, -10, 10)
        assert np.isfinite(R.reconstruct(net, x).data).all()
    assert np.isfinite(R.reconstruct(net, np.full((1, 96, 24), 10.0)).data).all()


def test_cascade_composition():
    net = R.ReconNet(SMALL, 2).freeze()
    x = np.random.default_rng(5).normal(size=(20, 24))
    assert np.array_equal(R.cascade_apply(R.Cascade(net, 0), x).data, x)
    two = R.cascade_apply(R.Cascade(net, 2), x).data
    assert np.array_equal(two, R.reconstruct(net, R.reconstruct(net, x)).data)
    five = R.cascade_apply(R.Cascade(net, 5), x).data
    assert np.array_equal(five, R.cascade_apply(R.Cascade(net, 3), R.cascade_apply(R.Cascade(net, 2), x)).data)
    with pytest.raises(ValueError):
        R.Cascade(net, -1)


@pytest.fixture(scope="module")
def trained():
    c = sd.make_corpus(n_speakers=6, train_per_speaker=6, eval_per_speaker=3, T=32, seed=2)
    net, hist = R.pretrain_recon(c.train, R.AlterationPolicy(), SMALL, seed=4)
    return c, net, hist


def test_pretraining_reduces_loss(trained):
    _, _, hist = trained
    assert np.mean(hist[-5:]) < np.mean(hist[:5])


def test_pretraining_deterministic(trained):
    c, net, _ = trained
    again, _ = R.pretrain_recon(c.train, R.AlterationPolicy(), SMALL, seed=4)
    other, _ = R.pretrain_recon(c.train, R.AlterationPolicy(), SMALL, seed=5)
    assert all(np.array_equal(v, again.state()[k]) for k, v in net.state().items())
    assert any(not np.array_equal(v, other.state()[k]) for k, v in net.state().items())


def test_pretraining_callback_and_validation(trained):
    c, _, _ = trained
    seen = []
    R.pretrain_recon(c.train, R.AlterationPolicy(), R.ReconConfig(d_model=8, heads=2, layers=1, ff_dim=8, steps=3, batch=2),
                     seed=0, callback=lambda step, net: seen.append(step))
    assert seen == [1, 2, 3]
    with pytest.raises(ValueError):
        R.pretrain_recon([], R.AlterationPolicy(), SMALL)
    with pytest.raises(ValueError):
        R.pretrain_recon(c.train, R.AlterationPolicy(), R.ReconConfig(steps=0))


def test_pretraining_divergence_aborts(trained):
    c, _, _ = trained
    cfg = R.ReconConfig(d_model=8, heads=2, layers=1, ff_dim=8, steps=5, batch=2, lr=1e300, warmup_frac=0.0)
    with np.errstate(all="ignore"), pytest.raises(nc.NonFiniteError):
        R.pretrain_recon(c.train, R.AlterationPolicy(), cfg)


def test_checkpoint_round_trip(tmp_path, trained):
    _, net, _ = trained
    net.save(tmp_path / "r.ck")
    back = R.ReconNet.load(tmp_path / "r.ck")
    x = np.random.default_rng(6).normal(size=(32, 24))
    assert back.cfg == net.cfg
    assert np.array_equal(R.reconstruct(back, x).data, R.reconstruct(net, x).data)


def test_reconstruction_l1_definition(trained):
    c, net, _ = trained
    x = np.stack([u.features for u in c.eval])
    expected = np.abs(R.reconstruct(net, x).data - x).mean()
    assert R.reconstruction_l1(net, c.eval, chunk=4) == pytest.approx(expected, rel=1e-12)
