"""Tests for the unsupervised training loop and checkpoint format."""

import numpy as np
import pytest

from icgnn import autodiff as ad
from icgnn.channel import Dataset, SystemConfig, sample_channels
from icgnn.model import ForwardOut, forward_batch, init_params, tiny_config
from icgnn.training import (
    CheckpointFormatError,
    TrainConfig,
    TrainingError,
    compute_loss,
    fine_tune,
    read_checkpoint,
    train,
    write_checkpoint,
)

SYS2 = SystemConfig(n_pairs=2, n_antennas=2, snr_db=10.0)


def fake_out(gains, p, alpha=None):
    gains = np.asarray(gains, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if alpha is None:
        alpha = np.full(p.shape, 0.5)
    return ForwardOut(
        alpha=ad.constant(alpha), p=ad.constant(p), gains=ad.constant(gains)
    )


def test_loss_hand_example_no_penalty():
    # K=2, noise=1: rx1 sees signal 4, interference 1 -> rate log2(3);
    # rx2 sees signal 2, interference 1 -> rate 1.  Powers 1+1, P_c=0.1.
    sys_cfg = SystemConfig(n_pairs=2, n_antennas=2, snr_db=0.0, p_circuit=0.1, r_req=1.0)
    assert sys_cfg.noise_power == pytest.approx(1.0)
    gains = [[[4.0, 1.0], [1.0, 2.0]]]
    loss = compute_loss(fake_out(gains, [[1.0, 1.0]]), sys_cfg, penalty=1.0)
    expected = 2.1 / (np.log2(3.0) + 1.0 + 1e-9)  # both rates feasible
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)


def test_loss_penalty_adds_exact_shortfall():
    sys_cfg = SystemConfig(n_pairs=2, n_antennas=2, snr_db=0.0, p_circuit=0.1, r_req=1.5)
    gains = [[[4.0, 1.0], [1.0, 2.0]]]
    base = compute_loss(fake_out(gains, [[1.0, 1.0]]), sys_cfg, penalty=0.0)
    with_pen = compute_loss(fake_out(gains, [[1.0, 1.0]]), sys_cfg, penalty=1.0)
    # rates are log2(3) (feasible) and 1.0 (short by 0.5)
    assert float(with_pen.data) - float(base.data) == pytest.approx(0.5, rel=1e-12)


def test_loss_two_sample_mean():
    sys_cfg = SystemConfig(n_pairs=2, n_antennas=2, snr_db=0.0, r_req=0.0)
    g1 = [[4.0, 1.0], [1.0, 2.0]]
    g2 = [[9.0, 0.5], [0.5, 5.0]]
    l1 = compute_loss(fake_out([g1], [[1.0, 1.0]]), sys_cfg)
    l2 = compute_loss(fake_out([g2], [[0.5, 0.5]]), sys_cfg)
    both = compute_loss(fake_out([g1, g2], [[1.0, 1.0], [0.5, 0.5]]), sys_cfg)
    assert float(both.data) == pytest.approx((float(l1.data) + float(l2.data)) / 2.0)


def test_loss_nonfinite_names_sample():
    sys_cfg = SystemConfig(n_pairs=2, n_antennas=2, snr_db=0.0)
    gains = np.ones((3, 2, 2))
    p = np.ones((3, 2))
    p[2, 0] = np.nan
    with pytest.raises(TrainingError, match="sample 2"):
        compute_loss(fake_out(gains, p), sys_cfg)


def test_loss_gradient_pushes_power_toward_shortfall():
    # with a binding QoS constraint the penalty gradient on the short pair's
    # power must be negative (increasing it reduces the loss)
    sys_cfg = SystemConfig(n_pairs=2, n_antennas=2, snr_db=0.0, r_req=3.0)
    gains = ad.constant(np.array([[[4.0, 0.1], [0.1, 4.0]]]))
    p = ad.parameter(np.array([[0.2, 0.9]]))
    out = ForwardOut(alpha=ad.constant(np.full((1, 2), 0.5)), p=p, gains=gains)
    loss = compute_loss(out, sys_cfg, penalty=10.0)
    ad.backward(loss)
    assert p.grad[0, 0] < 0


@pytest.fixture(scope="module")
def toy_sets():
    train_ds = sample_channels(SYS2, 48)
    val_ds = sample_channels(SYS2, 16, first_index=10_000)
    return train_ds, val_ds


def test_train_loss_decreases(toy_sets):
    train_ds, val_ds = toy_sets
    cfg = TrainConfig(lr=1e-3, batch_size=16, epochs=5, seed=0)
    res = train(train_ds, val_ds, tiny_config(), cfg)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    assert res.best_epoch >= 1


def test_train_deterministic(toy_sets):
    train_ds, val_ds = toy_sets
    cfg = TrainConfig(lr=1e-3, batch_size=16, epochs=3, seed=4)
    r1 = train(train_ds, val_ds, tiny_config(), cfg)
    r2 = train(train_ds, val_ds, tiny_config(), cfg)
    assert [e["train_loss"] for e in r1.history] == [e["train_loss"] for e in r2.history]
    f1, f2 = r1.params.flat(), r2.params.flat()
    assert all(np.array_equal(f1[k].data, f2[k].data) for k in f1)
    r3 = train(train_ds, val_ds, tiny_config(), TrainConfig(lr=1e-3, batch_size=16, epochs=3, seed=5))
    assert r3.history[0]["train_loss"] != r1.history[0]["train_loss"]


def test_training_is_unsupervised(toy_sets):
    # perturbing or dropping oracle labels must not change a single update
    train_ds, val_ds = toy_sets
    rng = np.random.default_rng(0)
    labeled = Dataset(SYS2, train_ds.h, labels=rng.uniform(1.0, 5.0, len(train_ds)))
    cfg = TrainConfig(lr=1e-3, batch_size=16, epochs=2, seed=1)
    r_plain = train(train_ds, val_ds, tiny_config(), cfg)
    r_label = train(labeled, val_ds, tiny_config(), cfg)
    f1, f2 = r_plain.params.flat(), r_label.params.flat()
    assert all(np.array_equal(f1[k].data, f2[k].data) for k in f1)


def test_best_model_selection(toy_sets):
    train_ds, val_ds = toy_sets
    cfg = TrainConfig(lr=5e-3, batch_size=16, epochs=6, seed=2)
    res = train(train_ds, val_ds, tiny_config(), cfg)
    recorded = [e["val_loss"] for e in res.history if "val_loss" in e]
    assert res.best_val_loss == min(recorded)
    assert res.history[res.best_epoch - 1]["val_loss"] == res.best_val_loss


def test_train_zero_epochs_returns_init(toy_sets):
    train_ds, val_ds = toy_sets
    cfg = TrainConfig(lr=1e-3, epochs=0, seed=3)
    res = train(train_ds, val_ds, tiny_config(), cfg)
    ref = init_params(tiny_config(), seed=3)
    f1, f2 = res.params.flat(), ref.flat()
    assert all(np.array_equal(f1[k].data, f2[k].data) for k in f1)
    assert np.isfinite(res.best_val_loss)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(penalty=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(val_every=0)


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path, toy_sets):
    train_ds, val_ds = toy_sets
    cfg = TrainConfig(lr=1e-3, batch_size=16, epochs=2, seed=6)
    res = train(train_ds, val_ds, tiny_config(), cfg)
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, res.params, {"epochs": "2", "val_loss": f"{res.best_val_loss}"})
    loaded, meta = read_checkpoint(path)
    assert meta["epochs"] == "2"
    assert loaded.config == res.params.config
    out_a = forward_batch(val_ds.h, res.params.detached(), SYS2)
    out_b = forward_batch(val_ds.h, loaded.detached(), SYS2)
    assert np.array_equal(out_a.alpha.data, out_b.alpha.data)
    assert np.array_equal(out_a.p.data, out_b.p.data)
    for name, st in res.params.bn_states.items():
        assert np.array_equal(st.mean, loaded.bn_states[name].mean)
        assert np.array_equal(st.var, loaded.bn_states[name].var)


def test_checkpoint_corruption_detected(tmp_path):
    params = init_params(tiny_config(), seed=0)
    path = tmp_path / "good.ckpt"
    write_checkpoint(path, params, {})
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
        read_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(raw[: len(raw) - 20])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        read_checkpoint(truncated)

    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(raw[:4] + b"\x63\x00" + raw[6:])
    with pytest.raises(CheckpointFormatError, match="version"):
        read_checkpoint(bad_version)

    # renaming a tensor must surface as a structural mismatch naming a tensor
    idx = raw.index(b"dir_attn0.head0.w")
    renamed = tmp_path / "renamed.ckpt"
    renamed.write_bytes(raw[:idx] + b"xir_attn0.head0.w" + raw[idx + 17 :])
    with pytest.raises(CheckpointFormatError, match="dir_attn0.head0.w"):
        read_checkpoint(renamed)


def test_checkpoint_pair_count_free(tmp_path):
    # parameters carry no K: a checkpoint written after K=2 use runs at K=4
    params = init_params(tiny_config(), seed=1)
    forward_batch(sample_channels(SYS2, 4).h, params, SYS2, training=True)
    path = tmp_path / "k2.ckpt"
    write_checkpoint(path, params, {})
    loaded, _ = read_checkpoint(path)
    sys4 = SystemConfig(n_pairs=4, n_antennas=2, snr_db=10.0)
    out = forward_batch(sample_channels(sys4, 3).h, loaded.detached(), sys4)
    assert out.alpha.data.shape == (3, 4)


# --------------------------------------------------------------- fine-tune


def test_fine_tune_zero_epochs_reports_raw_generalization(toy_sets):
    train_ds, val_ds = toy_sets
    base = train(train_ds, val_ds, tiny_config(), TrainConfig(lr=1e-3, batch_size=16, epochs=2, seed=7))
    sys4 = SystemConfig(n_pairs=4, n_antennas=2, snr_db=10.0)
    ds4 = sample_channels(sys4, 32)
    val4 = sample_channels(sys4, 16, first_index=5000)
    res = fine_tune(base.params, ds4, val4, TrainConfig(lr=1e-3, epochs=0, seed=8))
    assert res.pre_val_loss == pytest.approx(res.best_val_loss)
    assert res.pre_feasibility == pytest.approx(res.post_feasibility)
    f1, f2 = base.params.flat(), res.params.flat()
    assert all(np.array_equal(f1[k].data, f2[k].data) for k in f1)


def test_fine_tune_trains_and_keeps_shapes(toy_sets):
    train_ds, val_ds = toy_sets
    base = train(train_ds, val_ds, tiny_config(), TrainConfig(lr=1e-3, batch_size=16, epochs=1, seed=9))
    res = fine_tune(base.params, train_ds, val_ds,
                    TrainConfig(lr=1e-3, batch_size=16, epochs=3, seed=9))
    assert len(res.history) == 3
    f1, f2 = base.params.flat(), res.params.flat()
    assert all(f1[k].data.shape == f2[k].data.shape for k in f1)
    assert 0.0 <= res.post_feasibility <= 1.0


def test_fine_tune_rejects_antenna_mismatch(toy_sets):
    train_ds, val_ds = toy_sets
    params = init_params(tiny_config(), seed=0)  # expects 2 antennas
    sys_bad = SystemConfig(n_pairs=2, n_antennas=3, snr_db=10.0)
    with pytest.raises(ValueError, match="antennas"):
        fine_tune(params, sample_channels(sys_bad, 8), sample_channels(sys_bad, 8),
                  TrainConfig(epochs=0))


def test_fine_tune_bn_recalibration_updates_buffers(toy_sets):
    train_ds, val_ds = toy_sets
    base = train(train_ds, val_ds, tiny_config(), TrainConfig(lr=1e-3, batch_size=16, epochs=1, seed=10))
    res = fine_tune(base.params, train_ds, val_ds,
                    TrainConfig(lr=1e-3, epochs=0, seed=10, recalibrate_bn=True))
    moved = any(
        not np.array_equal(res.params.bn_states[n].mean, base.params.bn_states[n].mean)
        for n in base.params.bn_states
    )
    assert moved
    # weights themselves untouched by the zero-epoch recalibration
    f1, f2 = base.params.flat(), res.params.flat()
    assert all(np.array_equal(f1[k].data, f2[k].data) for k in f1)
