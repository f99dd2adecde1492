"""Acceptance criteria, one test each.

Every test records a single pass/fail line through the ``criterion`` fixture;
the lines are printed together at the end of the pytest run. The training
criteria (4 to 6) take minutes each and are marked ``slow``.
"""
import time

import numpy as np
import pytest

from syncdraw import attention as att
from syncdraw import captions as cap
from syncdraw import data, evaluation as ev, rvae
from syncdraw.cli import main
from syncdraw.rvae import CUBOID, Conditioning, ModelConfig, SyncDraw
from syncdraw.training import (MICRO_CONFIG, TrainConfig, Trainer, checkpoint_bytes, grad_check,
                               parse_checkpoint)


# -- 1. filterbank suite -----------------------------------------------------------------

def test_filterbank_suite(criterion):
    rng = np.random.default_rng(2024)
    worst_row = worst_const = 0.0
    min_entry = np.inf
    t0 = time.perf_counter()
    for _ in range(1000):
        A, B = (int(v) for v in rng.integers(1, 65, size=2))
        K = int(rng.integers(1, min(A, B, 12) + 1))
        geom = att.FrameGeometry(A, B, 1, K)
        raw = att.AttentionParams(*rng.uniform(-1.5, 1.5, 2), rng.uniform(-3.0, 3.0),
                                  rng.uniform(-3.0, 1.5), 0.0)
        spec = att.map_params(raw, geom)
        cp, cq = att.grid_centers(spec, geom)
        fp = att.build_filterbank(cp, spec.sigma, A)
        fq = att.build_filterbank(cq, spec.sigma, B)
        for F in (fp.matrix, fq.matrix):
            worst_row = max(worst_row, float(np.abs(F.sum(axis=1) - 1.0).max()))
            min_entry = min(min_entry, float(F.min()))
        c = rng.uniform(0.0, 1.0)
        patch = att.read_patch(fp, fq, spec.beta, np.full((A, B), c))
        worst_const = max(worst_const, float(np.abs(patch - c).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and min_entry >= 0.0 and worst_const <= 1e-9 and elapsed < 10.0
    criterion(1, ok, f"row-sum err {worst_row:.1e}, min entry {min_entry:.1e}, "
                     f"constant-read err {worst_const:.1e}, {elapsed:.2f}s")
    assert ok


# -- 2. gradient fidelity ----------------------------------------------------------------

def test_gradient_fidelity(criterion):
    variants = {
        "sync": {},
        "cuboid": {"variant": CUBOID},
        "onehot-conditional": {"conditional": True},
        "recurrent-conditional": {"conditional": True, "caption_encoder": "recurrent",
                                  "s_dim": 5, "word_dim": 3},
    }
    t0 = time.perf_counter()
    worst = {}
    for name, extra in variants.items():
        report = grad_check(ModelConfig(**{**MICRO_CONFIG, **extra}), tolerance=1e-4)
        worst[name] = max(report.errors.values())
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 300.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(2, ok, f"max group rel. err: {detail}; {elapsed:.0f}s")
    assert ok


# -- 3. loss identities ------------------------------------------------------------------

def test_loss_identities(criterion):
    standard = float(rvae.kl_terms(np.zeros(7), np.zeros(7)).sum())
    unit_mean = float(rvae.kl_terms(np.ones(1), np.zeros(1)).sum())
    cfg = ModelConfig()
    model = SyncDraw(cfg, rvae.init_weights(cfg, zero=True))
    x = data.synthesize_dataset(data.DatasetSpec(count=2, seed=4)).videos
    res = model.forward(x, np.zeros((cfg.T, 2, cfg.z_dim)))
    expected = cfg.N * cfg.A * cfg.B * np.log(2)
    rel = float(np.abs(res.lx / expected - 1).max())
    ok = standard == 0.0 and unit_mean == 0.5 and rel <= 1e-6
    criterion(3, ok, f"KL(0,1)={standard}, KL(1,1)={unit_mean}, zero-model L_X rel. err {rel:.1e}")
    assert ok


# -- 4. training convergence -------------------------------------------------------------

def pair_trend(totals):
    """Epoch-pair means, whether they strictly decrease, and final / first epoch loss."""
    pairs = [(totals[i] + totals[i + 1]) / 2 for i in range(0, len(totals) - 1, 2)]
    falling = all(b < a for a, b in zip(pairs, pairs[1:]))
    return pairs, falling, totals[-1] / totals[0]


def converge(size, batch_size):
    ds = data.synthesize_dataset(data.DatasetSpec(count=500, seed=1, A=size, B=size))
    model_cfg = ModelConfig(A=size, B=size, N=10, T=10, K=5, z_dim=10, enc_hidden=32, dec_hidden=32)
    t0 = time.perf_counter()
    trainer = Trainer.fresh(model_cfg, TrainConfig(epochs=20, batch_size=batch_size))
    history = trainer.run(ds)
    return pair_trend([r.total for r in history]), time.perf_counter() - t0


@pytest.mark.slow
def test_training_convergence(criterion):
    results = {}
    for size, batch_size, budget in ((64, 8, 7200.0), (32, 16, 1200.0)):
        (pairs, falling, ratio), elapsed = converge(size, batch_size)
        results[size] = (falling and ratio <= 0.5 and elapsed <= budget,
                         f"{size}x{size}: pairs {[round(p) for p in pairs]}, "
                         f"final/first {ratio:.3f}, {elapsed:.0f}s")
    ok = all(passed for passed, _ in results.values())
    criterion(4, ok, "; ".join(detail for _, detail in results.values()))
    assert ok


# -- 5. caption control on held-out combinations -----------------------------------------

# 48x48 keeps the bounce range wide enough for the oracle while a run fits in minutes.
CONTROL_CONFIG = dict(A=48, B=48, N=10, T=5, K=5, z_dim=10, enc_hidden=64, dec_hidden=64)


@pytest.mark.slow
def test_caption_control(criterion):
    ds = data.synthesize_dataset(data.DatasetSpec(count=1000, seed=1, A=48, B=48))
    train, _ = data.split_motion_disjoint(ds, seed=0)
    _, held_classes = data.motion_disjoint_classes(0)
    model_cfg = ModelConfig(**CONTROL_CONFIG, conditional=True)
    t0 = time.perf_counter()
    trainer = Trainer.fresh(model_cfg, TrainConfig(epochs=200, batch_size=8))
    trainer.run(train)
    rng = np.random.default_rng(5)
    scores = []
    for digit, motion in held_classes:
        texts = [cap.caption_for([(digit, motion)]).text] * 50
        eps = rng.standard_normal((model_cfg.T, 50, model_cfg.z_dim))
        videos = trainer.model.generate(eps, Conditioning.from_texts(model_cfg, texts))
        scores.append(ev.oracle_agreement(videos, texts).agreement)
    mean = float(np.mean(scores))
    ok = mean >= 0.8
    criterion(5, ok, f"mean agreement {mean:.3f} over {len(scores)} held-out classes "
                     f"(min {min(scores):.2f}, max {max(scores):.2f}), {time.perf_counter() - t0:.0f}s")
    assert ok


# -- 6. variant ordering -----------------------------------------------------------------

@pytest.mark.slow
def test_variant_ordering(criterion):
    ds = data.synthesize_dataset(data.DatasetSpec(count=500, seed=1, A=48, B=48))
    held = data.synthesize_dataset(data.DatasetSpec(count=100, seed=2, A=48, B=48))
    nll = {}
    t0 = time.perf_counter()
    for variant in (rvae.SYNC, CUBOID):
        trainer = Trainer.fresh(ModelConfig(**CONTROL_CONFIG, variant=variant),
                                TrainConfig(epochs=200, batch_size=8))
        trainer.run(ds)
        nll[variant] = ev.eval_nll(trainer.model, held).mean
    ratio = nll[CUBOID] / nll[rvae.SYNC]
    ok = ratio >= 2.0
    criterion(6, ok, f"held-out NLL per-frame {nll[rvae.SYNC]:.1f}, cuboid {nll[CUBOID]:.1f}, "
                     f"ratio {ratio:.2f}, {time.perf_counter() - t0:.0f}s")
    assert ok


# -- 7. determinism and formats ----------------------------------------------------------

def test_determinism_and_formats(criterion, tmp_path, capsys):
    def cli(*argv):
        code = main([str(a) for a in argv])
        capsys.readouterr()
        assert code == 0

    checks = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        cli("synth", "--count", 10, "--size", 32, "--frames", 4, "--out", d / "v.sdv", "--seed", 5)
        common = ["--data", d / "v.sdv", "--grid", 3, "--steps", 3, "--z-dim", 4, "--hidden", 16,
                  "--batch-size", 5, "--seed", 2]
        cli("train", *common, "--epochs", 4, "--out", d / "m.sdck")
        cli("train", *common, "--epochs", 2, "--out", d / "half.sdck")
        cli("train", *common, "--epochs", 4, "--resume", d / "half.sdck", "--out", d / "resumed.sdck")
        cli("generate", "--checkpoint", d / "m.sdck", "--count", 3, "--out", d / "g.sdv", "--seed", 8)
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("v.sdv", "v.sdv.captions", "m.sdck", "g.sdv"):
        checks[f"identical {name}"] = (a / name).read_bytes() == (b / name).read_bytes()
    checks["resume equals uninterrupted"] = (a / "resumed.sdck").read_bytes() == (a / "m.sdck").read_bytes()

    ds = data.load_dataset(a / "v.sdv")
    data.save_dataset(tmp_path / "copy.sdv", ds)
    checks["sdv round trip"] = (tmp_path / "copy.sdv").read_bytes() == (a / "v.sdv").read_bytes()
    raw = (a / "m.sdck").read_bytes()
    ck = parse_checkpoint(raw)
    again = checkpoint_bytes(ck.model_config, ck.weights, ck.adam, ck.rng_state, ck.epoch, ck.train_config)
    checks["checkpoint round trip"] = again == raw

    failed = [k for k, v in checks.items() if not v]
    criterion(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks"
                             + (f"; failed: {failed}" if failed else ""))
    assert not failed


# -- 8. oracle soundness -----------------------------------------------------------------

def test_oracle_soundness(criterion):
    ds = data.synthesize_dataset(data.DatasetSpec(count=200, seed=8))
    agreement = ev.oracle_agreement(ds.videos, ds.captions).agreement
    criterion(8, agreement == 1.0, f"agreement {agreement:.3f} on 200 videos")
    assert agreement == 1.0
