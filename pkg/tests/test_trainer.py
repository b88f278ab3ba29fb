import math

import numpy as np
import pytest
import torch

from figrepose.objective import read_loss_log
from figrepose.toydata import ToyConfig, make_dataset, write_dataset
from figrepose.trainer import (
    CHECKPOINT_NAME,
    LOSS_LOG_NAME,
    TrainConfig,
    TrainingDiverged,
    TrainState,
    epoch_order,
    load_checkpoint,
    make_batch,
    repose,
    repose_batch,
    save_checkpoint,
    steps_per_epoch,
    train,
    train_on_samples,
    train_step,
)

SMALL_TOY = ToyConfig(height=32, width=32, min_joint_separation=2.5, limb_width=2, joint_radius=1.0)


def tiny_config(**kw):
    base = dict(batch_size=2, epochs=1, n_stacks=2, resolution=32, depth=2, feat_channels=4,
                d_layers=2, d_base_channels=4, sample_every=0, seed=7)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return make_dataset(SMALL_TOY, 8, seed=11)


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_zero_lr_leaves_parameters(samples):
    st = TrainState(tiny_config(lr=0.0))
    g0, d0 = params_of(st.generator), params_of(st.discriminator)
    train_step(st, samples[:2])
    assert same(g0, params_of(st.generator)) and same(d0, params_of(st.discriminator))
    assert st.iteration == 1


def test_step_changes_both_networks(samples):
    st = TrainState(tiny_config())
    g0, d0 = params_of(st.generator), params_of(st.discriminator)
    rep = train_step(st, samples[:2])
    assert not same(g0, params_of(st.generator)) and not same(d0, params_of(st.discriminator))
    assert rep.total_g == pytest.approx(rep.g_adv + 100 * rep.l1, rel=1e-6)
    assert rep.d_loss > 0


def test_deterministic_ten_steps(samples):
    runs = []
    for _ in range(2):
        st = TrainState(tiny_config())
        reports = [train_step(st, samples[2 * (k % 4):2 * (k % 4) + 2]) for k in range(10)]
        runs.append((params_of(st.generator), [r.total_g for r in reports]))
    assert same(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_adam_matches_closed_form():
    """Two steps on (w - 3)^2 with the trainer's optimizer settings, by hand."""
    st = TrainState(tiny_config(lr=0.01, adam_beta1=0.5, adam_beta2=0.999))
    w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = type(st.opt_g)([w], **{k: st.opt_g.defaults[k] for k in ("lr", "betas", "eps")})
    b1, b2, eps, lr = 0.5, 0.999, opt.defaults["eps"], 0.01
    m = v = 0.0
    expected = 1.0
    for t in (1, 2):
        opt.zero_grad()
        ((w - 3.0) ** 2).sum().backward()
        g = 2 * (expected - 3.0)
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        expected -= lr * m_hat / (math.sqrt(v_hat) + eps)
        assert w.item() == pytest.approx(expected, abs=1e-12)


def test_l1_only_mode_freezes_discriminator(samples):
    st = TrainState(tiny_config(use_discriminator=False))
    d0 = params_of(st.discriminator)
    rep = train_step(st, samples[:2])
    assert rep.g_adv == 0.0
    assert rep.total_g == pytest.approx(100 * rep.l1, rel=1e-6)
    assert same(d0, params_of(st.discriminator))


def test_non_finite_loss_raises_and_snapshots(samples, tmp_path):
    st = TrainState(tiny_config())
    u, v = make_batch(samples[:2], st.tree, 3)
    v[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged) as err:
        train_step(st, (u, v), snapshot_dir=tmp_path)
    assert err.value.snapshot is not None and err.value.snapshot.exists()
    assert "iteration 0" in str(err.value)


def test_checkpoint_roundtrip_bit_identical(samples, tmp_path):
    st = TrainState(tiny_config())
    for k in range(3):
        train_step(st, samples[2 * k:2 * k + 2])
    a = save_checkpoint(st, tmp_path / "a.npz")
    loaded = load_checkpoint(a)
    b = save_checkpoint(loaded, tmp_path / "b.npz")
    assert a.read_bytes() == b.read_bytes()
    assert loaded.iteration == 3 and loaded.config == st.config


def test_loaded_checkpoint_continues_identically(samples, tmp_path):
    st = TrainState(tiny_config())
    train_step(st, samples[:2])
    loaded = load_checkpoint(save_checkpoint(st, tmp_path / "c.npz"))
    ra, rb = train_step(st, samples[2:4]), train_step(loaded, samples[2:4])
    assert ra.total_g == rb.total_g
    assert same(params_of(st.generator), params_of(loaded.generator))


def test_bad_checkpoint_raises(tmp_path):
    p = tmp_path / "junk.npz"
    p.write_bytes(b"not a zip")
    with pytest.raises(OSError):
        load_checkpoint(p)


def test_resume_equals_uninterrupted(samples, tmp_path):
    full = train_on_samples(TrainState(tiny_config(epochs=2)), samples, tmp_path / "full")

    part = TrainState(tiny_config(epochs=2, checkpoint_every=5))
    # 4 steps per epoch; the last checkpoint is at iteration 5 (mid epoch 2)
    # and the run dies during iteration 6, leaving one stale loss-log row
    assert steps_per_epoch(len(samples), part.config) == 4
    stop = {"at": 6}

    class Stop(Exception):
        pass

    def progress(state, report):
        if state.iteration == stop["at"]:
            raise Stop
    with pytest.raises(Stop):
        train_on_samples(part, samples, tmp_path / "part", progress)
    resumed = load_checkpoint(tmp_path / "part" / CHECKPOINT_NAME)
    assert resumed.iteration == 5
    train_on_samples(resumed, samples, tmp_path / "part")
    assert resumed.iteration == full.iteration == 8
    assert same(params_of(full.generator), params_of(resumed.generator))
    assert same(params_of(full.discriminator), params_of(resumed.discriminator))
    log_full = read_loss_log(tmp_path / "full" / LOSS_LOG_NAME)
    log_part = read_loss_log(tmp_path / "part" / LOSS_LOG_NAME)
    assert log_full == log_part


def test_zero_epochs_writes_initial_checkpoint(samples, tmp_path):
    st = train_on_samples(TrainState(tiny_config(epochs=0)), samples, tmp_path)
    assert st.iteration == 0 and (tmp_path / CHECKPOINT_NAME).exists()
    assert read_loss_log(tmp_path / LOSS_LOG_NAME) == []


def test_train_from_directory(samples, tmp_path):
    write_dataset(samples, tmp_path / "data")
    st = train(tiny_config(sample_every=2), tmp_path / "data", tmp_path / "run")
    assert st.iteration == 4
    assert len(read_loss_log(tmp_path / "run" / LOSS_LOG_NAME)) == 4
    assert sorted(p.name for p in (tmp_path / "run" / "samples").iterdir()) == [
        "iter_0000002.png", "iter_0000004.png"]
    with pytest.raises(ValueError):
        train(tiny_config(resolution=64), tmp_path / "data", tmp_path / "run2")


def test_epoch_order_and_steps():
    assert np.array_equal(epoch_order(3, 1, 10), epoch_order(3, 1, 10))
    assert not np.array_equal(epoch_order(3, 1, 10), epoch_order(3, 2, 10))
    assert sorted(epoch_order(3, 1, 10)) == list(range(10))
    assert steps_per_epoch(7, tiny_config(batch_size=3)) == 3
    assert steps_per_epoch(7, tiny_config(batch_size=3, iterations_per_epoch=2)) == 2
    assert steps_per_epoch(0, tiny_config()) == 0


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(lr=-1.0), dict(adam_beta1=1.0),
                                 dict(adv_mode="hinge"), dict(d_layers=5), dict(resolution=30)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainState(tiny_config(**bad))


def test_repose_shape_range_and_determinism(samples):
    st = TrainState(tiny_config())
    train_step(st, samples[:2])
    s = samples[0]
    a = repose(st, s.input_image, s.target_pose)
    b = repose(st, s.input_image, s.target_pose)
    assert a.shape == (32, 32, 3) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    big = np.repeat(np.repeat(s.input_image, 2, axis=0), 2, axis=1)
    out = repose_batch(st, [big], [s.target_pose * 2])
    assert out.shape == (1, 64, 64, 3)
