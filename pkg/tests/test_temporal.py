"""Temporal windows: index semantics, masked/sliced equivalence,
locality, and stack shapes."""

import numpy as np
import pytest

from avu.attention import AttentionSite, attend
from avu.config import ModelConfig
from avu.errors import ShapeError
from avu.temporal import HANBlock, TemporalPerception, window_indices, window_mask
from avu.tensor import DTensor, Tape
from avu import tensor as tz


def test_window_indices_examples():
    assert window_indices(5, 4, 10) == [3, 4, 5, 6, 7]
    assert window_indices(0, 2, 10) == [0, 1]
    assert window_indices(9, 8, 10) == [5, 6, 7, 8, 9]
    assert window_indices(0, 8, 10) == [0, 1, 2, 3, 4]
    assert window_indices(0, 2, 1) == [0]


def test_window_indices_rejects_odd_size():
    with pytest.raises(ShapeError):
        window_indices(0, 3, 10)


def test_window_mask_matches_indices():
    for T in (1, 2, 5, 10):
        for size in (2, 4, 6, 8):
            m = window_mask(size, T)
            for t in range(T):
                visible = set(np.flatnonzero(m[t] == 0.0).tolist())
                assert visible == set(window_indices(t, size, T))
                assert np.all(np.isneginf(m[t][sorted(set(range(T)) - visible)]))


def sliced_attention_reference(site, query, context, size):
    """Per-timestep attention over the window slice only; the independent
    route against the masked full-sequence implementation."""
    T = query.shape[0]
    rows = []
    for t in range(T):
        idx = window_indices(t, size, T)
        q = DTensor(query.data[t:t + 1])
        c = DTensor(context.data[idx[0]:idx[-1] + 1])
        out, _ = attend(site, q, c)
        rows.append(out.data[0])
    return np.stack(rows)


def test_masked_equals_sliced_attention():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        site = AttentionSite(np.random.default_rng(1000 + seed), 16, "w")
        q = DTensor(rng.normal(size=(10, 16)))
        c = DTensor(rng.normal(size=(10, 16)))
        for size in (2, 4, 6, 8):
            masked, _ = attend(site, q, c, mask=window_mask(size, 10))
            ref = sliced_attention_reference(site, q, c, size)
            assert np.abs(masked.data - ref).max() <= 1e-9


def test_wide_window_equals_unwindowed():
    # a window covering the whole sequence must reproduce dense attention
    rng = np.random.default_rng(3)
    site = AttentionSite(np.random.default_rng(3), 16, "w")
    q = DTensor(rng.normal(size=(7, 16)))
    c = DTensor(rng.normal(size=(7, 16)))
    dense, _ = attend(site, q, c)
    masked, _ = attend(site, q, c, mask=window_mask(16, 7))
    assert np.abs(dense.data - masked.data).max() <= 1e-9


def test_locality_is_exact():
    # perturbing a timestep outside the window cannot move the output
    rng = np.random.default_rng(4)
    block = HANBlock(np.random.default_rng(4), 16, "b")
    a = rng.normal(size=(10, 16))
    v = rng.normal(size=(10, 16))
    mask = window_mask(2, 10)
    out_a, out_v = block(DTensor(a), DTensor(v), mask=mask)
    a2, v2 = a.copy(), v.copy()
    a2[9] += 100.0  # timestep 9 is outside the window of t=0..7
    v2[9] -= 50.0
    out_a2, out_v2 = block(DTensor(a2), DTensor(v2), mask=mask)
    np.testing.assert_array_equal(out_a.data[:8], out_a2.data[:8])
    np.testing.assert_array_equal(out_v.data[:8], out_v2.data[:8])
    assert np.abs(out_a.data[9] - out_a2.data[9]).max() > 1e-3


def test_time_reversal_equivariance():
    # centered windows map onto themselves under reversal, so reversing
    # the inputs must reverse the outputs
    rng = np.random.default_rng(5)
    block = HANBlock(np.random.default_rng(5), 16, "b")
    a = rng.normal(size=(10, 16))
    v = rng.normal(size=(10, 16))
    for size in (2, 4, 8):
        mask = window_mask(size, 10)
        out_a, out_v = block(DTensor(a), DTensor(v), mask=mask)
        ra, rv = block(DTensor(a[::-1].copy()), DTensor(v[::-1].copy()), mask=mask)
        np.testing.assert_allclose(out_a.data[::-1], ra.data, atol=1e-9)
        np.testing.assert_allclose(out_v.data[::-1], rv.data, atol=1e-9)


def test_stack_shapes_and_identity_switch():
    cfg = ModelConfig(d_model=16, n_segments=10)
    rng = np.random.default_rng(6)
    tp = TemporalPerception(np.random.default_rng(6), cfg)
    a = DTensor(rng.normal(size=(10, 16)))
    v = DTensor(rng.normal(size=(10, 16)))
    oa, ov = tp(a, v)
    assert oa.shape == (10, 16) and ov.shape == (10, 16)
    assert len(tp.blocks) == len(cfg.scales) == 4

    off = ModelConfig(d_model=16, n_segments=10, use_temporal=False)
    tp_off = TemporalPerception(np.random.default_rng(6), off)
    oa2, ov2 = tp_off(a, v)
    assert oa2 is a and ov2 is v
    # parameter draws identical whether the switch is on or off
    np.testing.assert_array_equal(tp.proj_audio.data, tp_off.proj_audio.data)


def test_stack_batched_input():
    cfg = ModelConfig(d_model=16, n_segments=6)
    tp = TemporalPerception(np.random.default_rng(7), cfg)
    rng = np.random.default_rng(7)
    a = DTensor(rng.normal(size=(3, 6, 16)))
    v = DTensor(rng.normal(size=(3, 6, 16)))
    oa, ov = tp(a, v)
    assert oa.shape == (3, 6, 16)
    # batch rows are independent
    single, _ = tp(DTensor(a.data[1]), DTensor(v.data[1]))
    np.testing.assert_allclose(oa.data[1], single.data, atol=1e-12)


def test_t_equal_one_degenerates():
    cfg = ModelConfig(d_model=16, n_segments=1)
    tp = TemporalPerception(np.random.default_rng(8), cfg)
    rng = np.random.default_rng(8)
    a = DTensor(rng.normal(size=(1, 16)))
    v = DTensor(rng.normal(size=(1, 16)))
    oa, ov = tp(a, v)
    assert oa.shape == (1, 16)
    assert np.all(np.isfinite(oa.data))


def test_gradients_flow_through_stack():
    cfg = ModelConfig(d_model=8, n_segments=4, max_scale=4)
    tp = TemporalPerception(np.random.default_rng(9), cfg)
    rng = np.random.default_rng(9)
    a = DTensor(rng.normal(size=(4, 8)))
    v = DTensor(rng.normal(size=(4, 8)))
    params = tp.params()
    with Tape():
        oa, ov = tp(a, v)
        loss = tz.sum_axis(tz.mul(oa, oa)) + tz.sum_axis(tz.mul(ov, ov))
        tz.backprop(loss)
    for name, p in params.items():
        assert p.grad is not None and np.any(p.grad != 0), f"dead param {name}"
