"""Tests for the two-stage graph-attention model."""

import numpy as np
import pytest

from icgnn import autodiff as ad
from icgnn.autodiff import CTensor
from icgnn.beamforming import gain_tables, gains_from_tables, recover_beamformers
from icgnn.channel import SystemConfig, sample_channels
from icgnn.model import (
    GalSpec,
    ModelConfig,
    build_direction_graph,
    desk_config,
    duplicate_features,
    enhance_features,
    forward_batch,
    gain_tensor,
    icgnn_forward,
    init_params,
    masked_softmax,
    batched_gain_tables,
    param_template,
    table_config,
    tiny_config,
)


def rand_channels(k, n, b=None, seed=0):
    rng = np.random.default_rng(seed)
    shape = (k, k, n) if b is None else (b, k, k, n)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


# ------------------------------------------------------------- enhancement


def test_enhance_perpendicular_interference():
    # h_kj orthogonal to h_kk: the enhanced copy is h_kk rescaled to ||h_kj||
    h = np.zeros((2, 2, 2), dtype=complex)
    h[0, 0] = [1.0, 0.0]
    h[0, 1] = [0.0, 3.0]  # orthogonal to h_00
    h[1, 1] = [0.0, 1.0]
    h[1, 0] = [2.0, 0.0]  # orthogonal to h_11
    out = enhance_features(h)
    assert np.allclose(out[0, 1, 2:], 3.0 * h[0, 0])
    assert np.allclose(out[1, 0, 2:], 2.0 * h[1, 1])


def test_enhance_parallel_interference_collapses_to_zero():
    h = rand_channels(2, 3, seed=1)
    h[0, 1] = np.exp(0.7j) * h[0, 0]  # unit-scale aligned interference
    out = enhance_features(h)
    assert np.allclose(out[0, 1, 3:], 0.0)


def test_enhance_diag_copy_and_norm_preservation():
    h = rand_channels(3, 4, seed=2)
    out = enhance_features(h)
    assert out.shape == (3, 3, 8)
    assert np.allclose(out[..., :4], h)  # original features untouched
    for k in range(3):
        assert np.allclose(out[k, k, 4:], h[k, k])
        for j in range(3):
            if j == k:
                continue
            assert np.linalg.norm(out[k, j, 4:]) == pytest.approx(
                np.linalg.norm(h[k, j]), abs=1e-10
            )


def test_enhance_batched_matches_loop():
    hb = rand_channels(3, 2, b=4, seed=3)
    batched = enhance_features(hb)
    looped = np.stack([enhance_features(s) for s in hb])
    assert np.allclose(batched, looped)


def test_duplicate_features_width():
    h = rand_channels(2, 3, b=2, seed=4)
    out = duplicate_features(h)
    assert out.shape == (2, 2, 2, 6)
    assert np.allclose(out[..., :3], h) and np.allclose(out[..., 3:], h)


# ------------------------------------------------------------------- graph


def test_direction_graph_shapes():
    g = build_direction_graph(3, use_sgr=True)
    assert g.mask.shape == (3, 3)
    assert np.array_equal(g.desired_rows, [0, 4, 8])
    assert g.mask.trace() == 0 and g.mask.sum() == 6
    full = build_direction_graph(3, use_sgr=False)
    assert full.mask.shape == (9, 9)
    assert full.mask.sum() == 9 * 8
    with pytest.raises(ValueError):
        build_direction_graph(0)


def test_masked_softmax_rows_normalized():
    rng = np.random.default_rng(5)
    logits = ad.constant(rng.standard_normal((2, 4, 4)))
    mask = 1.0 - np.eye(4)
    w = masked_softmax(logits, mask)
    assert np.allclose(w.data.sum(axis=-1), 1.0)
    assert np.allclose(w.data[:, np.arange(4), np.arange(4)], 0.0)


def test_masked_softmax_single_neighbor_weight_is_one():
    logits = ad.constant(np.array([[3.0, -7.0], [0.1, 0.2]]))
    w = masked_softmax(logits, 1.0 - np.eye(2))
    assert np.array_equal(w.data, [[0.0, 1.0], [1.0, 0.0]])


def test_masked_softmax_all_masked_row_yields_zeros():
    logits = ad.constant(np.ones((1, 3)))
    w = masked_softmax(logits, np.zeros((1, 3)))
    assert np.array_equal(w.data, np.zeros((1, 3)))


# ------------------------------------------------------------------ config


def test_config_chain_validation():
    with pytest.raises(ValueError):
        ModelConfig(
            cgal=(GalSpec(4, 4, 2), GalSpec(6, 4, 2)),  # 6 != 4*2
            cfl=(8, 1),
            rgal=(GalSpec(1, 2, 2),),
            rfl=(4, 1),
        )
    with pytest.raises(ValueError):
        tiny_config(edge_orientation="sideways")


def test_config_kv_roundtrip():
    for cfg in (
        tiny_config(),
        desk_config(use_sgr=False, use_feature_enhancement=False),
        table_config(one_value_variant=True, edge_orientation="incoming"),
    ):
        assert ModelConfig.from_kv(cfg.to_kv()) == cfg


def test_one_value_variant_resolution_idempotent():
    cfg = tiny_config(one_value_variant=True)
    r1 = cfg.resolved()
    assert all(s == GalSpec(1, 1, 1) for s in r1.rgal)
    assert r1.rfl == (1,) + tiny_config().rfl[1:]
    assert r1.resolved() is r1


def test_param_template_counts():
    # scalar counts hand-computed from the layer tables (complex = 2 scalars)
    assert init_params(tiny_config(), seed=0).n_scalars == 644
    rows, bn = param_template(table_config())
    total = sum(int(np.prod(r.shape)) * (2 if r.is_complex else 1) for r in rows)
    assert total == 7_021_413
    assert init_params(desk_config(), seed=0).n_scalars == 92_927


def test_init_params_deterministic():
    a = init_params(tiny_config(), seed=7)
    b = init_params(tiny_config(), seed=7)
    c = init_params(tiny_config(), seed=8)
    name = next(iter(a.entries))
    for n in a.entries:
        ea, eb = a.entries[n], b.entries[n]
        if isinstance(ea, CTensor):
            assert np.array_equal(ea.re.data, eb.re.data)
        else:
            assert np.array_equal(ea.data, eb.data)
    ea, ec = a.entries[name], c.entries[name]
    va = ea.re.data if isinstance(ea, CTensor) else ea.data
    vc = ec.re.data if isinstance(ec, CTensor) else ec.data
    assert not np.array_equal(va, vc)


# ----------------------------------------------------------------- forward


SYSTEM = SystemConfig(n_pairs=3, n_antennas=2, snr_db=10.0)


def test_forward_output_bounds_and_shapes():
    params = init_params(tiny_config(), seed=0)
    h = rand_channels(3, 2, b=5, seed=6)
    out = forward_batch(h, params, SYSTEM, training=True)
    assert out.alpha.data.shape == (5, 3) and out.p.data.shape == (5, 3)
    assert out.alpha.data.dtype == np.float64 and out.p.data.dtype == np.float64
    assert np.all(out.alpha.data > 0) and np.all(out.alpha.data < 1)
    assert np.all(out.p.data > 0) and np.all(out.p.data < SYSTEM.p_max)
    assert np.all(out.gains.data >= 0)


def test_zeroed_output_layers_hit_midpoints():
    params = init_params(tiny_config(), seed=1)
    last_dir = params.entries["dir_fc2.w"]
    last_dir.re.data[:] = 0
    last_dir.im.data[:] = 0
    params.entries["dir_fc2.b"].re.data[:] = 0
    params.entries["dir_fc2.b"].im.data[:] = 0
    params.entries["pow_fc2.w"].data[:] = 0
    params.entries["pow_fc2.b"].data[:] = 0
    out = forward_batch(rand_channels(3, 2, b=2, seed=7), params, SYSTEM)
    assert np.allclose(out.alpha.data, 0.5)
    assert np.allclose(out.p.data, 0.5 * SYSTEM.p_max)


def test_gain_tensor_matches_closed_form():
    h = rand_channels(3, 2, b=4, seed=8)
    tables = batched_gain_tables(h)
    rng = np.random.default_rng(9)
    alpha = rng.uniform(0.05, 0.95, size=(4, 3))
    g = gain_tensor(ad.constant(alpha), tables)
    for b in range(4):
        zf, mrt, cross = gain_tables(h[b])
        ref = gains_from_tables(alpha[b], zf, mrt, cross)
        assert np.allclose(g.data[b], ref, atol=1e-12)


@pytest.mark.parametrize("use_sgr", [True, False])
def test_permutation_equivariance(use_sgr):
    cfg = tiny_config(use_sgr=use_sgr)
    params = init_params(cfg, seed=2, dtype=np.float64)
    h = rand_channels(3, 2, b=2, seed=10)
    perm = np.array([2, 0, 1])
    hp = h[:, perm][:, :, perm]
    out = forward_batch(h, params.detached(), SYSTEM)
    outp = forward_batch(hp, params.detached(), SYSTEM)
    assert np.allclose(outp.alpha.data, out.alpha.data[:, perm], atol=1e-9)
    assert np.allclose(outp.p.data, out.p.data[:, perm], atol=1e-9)


def test_same_params_serve_multiple_pair_counts():
    params = init_params(tiny_config(), seed=3)
    for k in (2, 4):
        sys_k = SystemConfig(n_pairs=k, n_antennas=2, snr_db=10.0)
        out = forward_batch(rand_channels(k, 2, b=2, seed=k), params, sys_k)
        assert out.alpha.data.shape == (2, k)


def test_message_passing_off_makes_alpha_ignore_interference():
    cfg = tiny_config(use_message_passing=False)
    params = init_params(cfg, seed=4).detached()
    h = rand_channels(3, 2, b=2, seed=11)
    h2 = h.copy()
    mask = ~np.eye(3, dtype=bool)
    h2[:, mask] *= 3.7  # rescale every interference channel
    a1 = forward_batch(h, params, SYSTEM).alpha.data
    a2 = forward_batch(h2, params, SYSTEM).alpha.data
    assert np.array_equal(a1, a2)


def test_all_ablations_run():
    h = rand_channels(2, 2, b=2, seed=12)
    sys2 = SystemConfig(n_pairs=2, n_antennas=2, snr_db=10.0)
    for flags in (
        dict(use_message_passing=False, use_residual=False, use_sgr=False,
             use_feature_enhancement=False),
        dict(use_residual=False, use_sgr=False, use_feature_enhancement=False),
        dict(use_sgr=False, use_feature_enhancement=False),
        dict(use_feature_enhancement=False),
        dict(),
    ):
        params = init_params(tiny_config(**flags), seed=5)
        out = forward_batch(h, params, sys2, training=True)
        assert np.all(np.isfinite(out.alpha.data)) and np.all(np.isfinite(out.p.data))


def test_one_value_variant_forward():
    params = init_params(tiny_config(one_value_variant=True), seed=6)
    out = forward_batch(rand_channels(3, 2, b=2, seed=13), params, SYSTEM)
    assert out.p.data.shape == (2, 3)
    assert np.all((out.p.data > 0) & (out.p.data < SYSTEM.p_max))


def test_forward_input_validation():
    params = init_params(tiny_config(), seed=0)
    with pytest.raises(ValueError, match="expected batched"):
        forward_batch(rand_channels(3, 2, seed=0), params, SYSTEM)
    bad = rand_channels(3, 5, b=1, seed=0)  # wrong antenna count
    with pytest.raises(ValueError, match="feature width"):
        forward_batch(bad, params, SYSTEM)


def test_icgnn_forward_returns_consistent_beamformers():
    params = init_params(tiny_config(), seed=7)
    h = rand_channels(3, 2, seed=14)
    alpha, p, w = icgnn_forward(h, params, SYSTEM)
    assert alpha.shape == (3,) and p.shape == (3,) and w.shape == (3, 2)
    assert np.allclose(np.sum(np.abs(w) ** 2, axis=1), p)
    ref = recover_beamformers(h, alpha, p)
    assert np.allclose(w, ref)
    with pytest.raises(ValueError, match="one sample"):
        icgnn_forward(h[None], params, SYSTEM)


def test_forward_gradients_flow_to_both_stages():
    # K >= 3 so subgraph attention has multiple neighbors; with a single
    # in-neighbor the softmax is constant and layer-0 weights go gradient-dead.
    params = init_params(tiny_config(), seed=8, dtype=np.float64)
    h = rand_channels(3, 2, b=3, seed=15)
    out = forward_batch(h, params, SYSTEM, training=True)
    loss = ad.add(ad.tmean(out.p), ad.tmean(out.alpha))
    ad.backward(loss)
    flat = params.flat()
    dir_w = flat["dir_attn0.head0.w.re"]
    pow_w = flat["pow_attn0.head0.w"]
    assert dir_w.grad is not None and np.any(dir_w.grad != 0)
    assert pow_w.grad is not None and np.any(pow_w.grad != 0)
