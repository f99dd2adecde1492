import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from syncdraw import training as tr
from syncdraw.data import DatasetSpec, synthesize_dataset
from syncdraw.rvae import ModelConfig, SyncDraw
from syncdraw.training import (AdamState, CheckpointError, TrainConfig, Trainer, TrainingError)

SMALL = dict(A=32, B=32, N=3, K=3, T=3, z_dim=4, enc_hidden=24, dec_hidden=24)


@pytest.fixture(scope="module")
def small_data():
    return synthesize_dataset(DatasetSpec(count=50, seed=4, N=3, A=32, B=32))


# -- clipping ------------------------------------------------------------------

def test_clip_below_threshold_untouched():
    g = {"a": np.array([3.0, 4.0])}
    assert tr.clip_gradients(g, 10.0)["a"] is g["a"]


def test_clip_scales_to_threshold():
    g = {"a": np.array([30.0, 40.0]), "b": np.zeros(3)}
    out = tr.clip_gradients(g, 10.0)
    np.testing.assert_allclose(out["a"], [6.0, 8.0])
    assert tr.global_norm(out) == pytest.approx(10.0, abs=1e-9)


@settings(max_examples=200)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
def test_post_clip_norm(seed, scale):
    rng = np.random.default_rng(seed)
    g = {"a": rng.normal(scale=scale, size=(4, 3)), "b": rng.normal(scale=scale, size=5)}
    norm = np.sqrt(sum((v ** 2).sum() for v in g.values()))
    assert abs(tr.global_norm(tr.clip_gradients(g, 10.0)) - min(norm, 10.0)) <= 1e-9


def test_clip_elementwise_mode():
    out = tr.clip_gradients({"a": np.array([-30.0, 2.0, 11.0])}, 10.0, mode="element")
    np.testing.assert_array_equal(out["a"], [-10.0, 2.0, 10.0])


def test_clip_rejects_nan():
    with pytest.raises(TrainingError, match="enc_W"):
        tr.clip_gradients({"enc_W": np.array([1.0, np.nan])}, 10.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_threshold=0.0)
    assert TrainConfig().lr == 1e-3 and TrainConfig().beta1 == 0.5


# -- Adam -------------------------------------------------------------------------

def test_adam_first_two_steps_by_hand():
    cfg = TrainConfig()
    w = {"p": np.array([1.0])}
    state = AdamState.zeros_like(w)
    tr.adam_step(w, {"p": np.array([0.2])}, state, cfg)
    # bias-corrected m/sqrt(v) equals sign(g) on the first step
    assert w["p"][0] == pytest.approx(1.0 - 1e-3 * 0.2 / (0.2 + 1e-8), rel=1e-12)
    tr.adam_step(w, {"p": np.array([-0.4])}, state, cfg)
    m = 0.5 * (0.5 * 0.2) + 0.5 * -0.4
    v = 0.999 * (0.001 * 0.04) + 0.001 * 0.16
    mhat, vhat = m / (1 - 0.25), v / (1 - 0.999 ** 2)
    expected = 1.0 - 1e-3 * 0.2 / (0.2 + 1e-8) - 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
    assert w["p"][0] == pytest.approx(expected, rel=1e-12)
    assert state.step == 2


def test_adam_shape_mismatch():
    w = {"p": np.zeros(2)}
    with pytest.raises(ValueError):
        tr.adam_step(w, {"p": np.zeros(3)}, AdamState.zeros_like(w), TrainConfig())


# -- epochs ------------------------------------------------------------------------

def test_zero_learning_rate(small_data):
    cfg = TrainConfig(lr=0.0, batch_size=16, seed=2)
    trainer = Trainer.fresh(ModelConfig(**SMALL), cfg)
    before = {k: v.copy() for k, v in trainer.model.weights.items()}
    lx, lz = tr.train_epoch(trainer.model, small_data, cfg, np.random.default_rng(7), trainer.state)
    for k in before:
        np.testing.assert_array_equal(trainer.model.weights[k], before[k])
    # same shuffle and draws, evaluated without any update
    rng = np.random.default_rng(7)
    order = rng.permutation(50)
    total_x = total_z = 0.0
    for s in range(0, 50, 16):
        idx = order[s:s + 16]
        res = trainer.model.forward(small_data.videos[idx], rng.standard_normal((3, len(idx), 4)))
        total_x += res.lx.sum()
        total_z += res.lz.sum()
    assert lx == pytest.approx(total_x / 50, rel=1e-12)
    assert lz == pytest.approx(total_z / 50, rel=1e-12)


def test_fixed_seed_identical_epochs(small_data):
    runs = []
    for _ in range(2):
        t = Trainer.fresh(ModelConfig(**SMALL), TrainConfig(batch_size=10, seed=3))
        runs.append([r.total for r in t.run(small_data, epochs=2)])
    assert runs[0] == runs[1]


def test_loss_strictly_decreases_over_five_epochs(small_data):
    t = Trainer.fresh(ModelConfig(**SMALL), TrainConfig(batch_size=10, seed=0))
    totals = [r.total for r in t.run(small_data, epochs=5)]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_trained_reconstruction_beats_zero_model(small_data):
    t = Trainer.fresh(ModelConfig(**SMALL), TrainConfig(batch_size=10, seed=0))
    t.run(small_data, epochs=3)
    lx, _ = tr.evaluate(t.model, small_data.subset([0]))
    assert lx[0] < 3 * 32 * 32 * np.log(2)


def test_empty_dataset(small_data):
    t = Trainer.fresh(ModelConfig(**SMALL), TrainConfig())
    with pytest.raises(TrainingError):
        t.run(small_data.subset([]), epochs=1)


# -- gradient check ------------------------------------------------------------------------

def test_grad_check_passes_on_micro_config():
    report = tr.grad_check(ModelConfig(**tr.MICRO_CONFIG))
    assert report.passed, report.errors
    assert set(report.errors) == set(SyncDraw(ModelConfig(**tr.MICRO_CONFIG)).weights)


def test_grad_check_detects_injected_fault():
    report = tr.grad_check(ModelConfig(**tr.MICRO_CONFIG), perturb={"win_W": lambda g: g * 1.01})
    assert report.failures == ["win_W"]


def test_relative_error_metric():
    assert tr.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert tr.relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.5])) == pytest.approx(0.5)


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_data):
    t = Trainer.fresh(ModelConfig(**SMALL), TrainConfig(batch_size=25, seed=1))
    t.run(small_data, epochs=1)
    p = tmp_path / "a.sdck"
    t.save(p)
    back = Trainer.load(p)
    for k, w in t.model.weights.items():
        np.testing.assert_array_equal(back.model.weights[k], w)
        np.testing.assert_array_equal(back.state.m[k], t.state.m[k])
        np.testing.assert_array_equal(back.state.v[k], t.state.v[k])
    assert back.state.step == t.state.step and back.epoch == 1
    assert back.cfg == t.cfg and back.model.cfg == t.model.cfg
    q = tmp_path / "b.sdck"
    back.save(q)
    assert p.read_bytes() == q.read_bytes()


def test_resume_equals_uninterrupted(tmp_path, small_data):
    cfg = TrainConfig(batch_size=20, seed=5)
    straight = Trainer.fresh(ModelConfig(**SMALL), cfg)
    straight.run(small_data, epochs=2)

    first = Trainer.fresh(ModelConfig(**SMALL), cfg)
    first.run(small_data, epochs=1)
    first.save(tmp_path / "mid.sdck")
    resumed = Trainer.load(tmp_path / "mid.sdck")
    resumed.run(small_data, epochs=1)
    assert resumed.history[-1].total == straight.history[-1].total
    for k, w in straight.model.weights.items():
        np.testing.assert_array_equal(resumed.model.weights[k], w)


def test_corrupt_checkpoints(tmp_path):
    t = Trainer.fresh(ModelConfig(**tr.MICRO_CONFIG), TrainConfig())
    t.save(tmp_path / "c.sdck")
    raw = (tmp_path / "c.sdck").read_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        tr.parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        tr.parse_checkpoint(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(CheckpointError, match="truncated"):
        tr.parse_checkpoint(raw[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        tr.parse_checkpoint(raw + b"\x00")
    with pytest.raises(CheckpointError, match="metadata"):
        tr.parse_checkpoint(raw[:10] + b"\xff" + raw[11:])


def test_checkpoint_shape_mismatch(tmp_path):
    big = ModelConfig(**{**tr.MICRO_CONFIG, "enc_hidden": 17})
    small = Trainer.fresh(ModelConfig(**tr.MICRO_CONFIG), TrainConfig())
    raw = tr.checkpoint_bytes(big, small.model.weights, small.state,
                              small.rng.bit_generator.state, 0, small.cfg)
    with pytest.raises(CheckpointError, match="shape"):
        tr.parse_checkpoint(raw)
