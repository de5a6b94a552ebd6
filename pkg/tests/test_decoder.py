"""Decoder heads: teacher forcing, grammar-constrained decoding, the
mask upsampler, and the heatmap readout."""

import numpy as np
import pytest

from avu.config import ModelConfig
from avu.decoder import (MaskDecoder, TokenDecoder, heatmap_logits,
                         heatmap_region, max_program_length, sep_counts)
from avu.errors import ShapeError
from avu.tensor import DTensor, Tape
from avu.tokens import Task, TokenVocab, decode_tokens
from avu import tensor as tz

CFG = ModelConfig(d_model=32)
VOCAB = TokenVocab(CFG.n_classes, CFG.n_patches, CFG.n_answers)


def make_decoder(seed):
    return TokenDecoder(np.random.default_rng(seed), CFG, VOCAB)


def unified_for(seed, batch=1, cfg=CFG):
    rng = np.random.default_rng(seed)
    L = cfg.unified_length
    return DTensor(rng.normal(size=(batch, L, cfg.d_model)))


def test_sep_counts():
    s = VOCAB.SEP
    ids = np.array([[1, 9, 5, s, 6, s, s, 2]])
    np.testing.assert_array_equal(sep_counts(ids, s),
                                  [[0, 0, 0, 0, 1, 1, 2, 3]])


def test_max_program_length_bounds_worst_case():
    # longest grammar walk: every (modality, class) pair in every segment
    assert max_program_length(CFG) == 3 + CFG.n_segments * (6 * CFG.n_classes + 1)


def test_logits_shape_and_determinism():
    dec = make_decoder(0)
    u = DTensor(unified_for(0).data.repeat(2, axis=0))
    ids = np.array([[1, 9, 5, 14], [1, 9, 6, 15]])
    out = dec.logits(ids, u)
    assert out.shape == (2, 4, VOCAB.size)
    out2 = dec.logits(ids, u)
    np.testing.assert_array_equal(out.data, out2.data)


def test_later_tokens_do_not_change_earlier_logits():
    dec = make_decoder(1)
    u = unified_for(1)
    ids = np.array([[VOCAB.BOS, VOCAB.task_id(Task.AVE), VOCAB.cls_id(1),
                     VOCAB.cls_id(2)]])
    full = dec.logits(ids, u)
    short = dec.logits(ids[:, :3], u)
    np.testing.assert_allclose(full.data[:, :3], short.data, atol=1e-12)


def test_greedy_decode_random_states_parse_every_task():
    for seed in range(10):
        dec = make_decoder(100 + seed)
        u = unified_for(200 + seed)
        for task in Task:
            ids = dec.greedy_decode(task, u)
            decode_tokens(task, ids, VOCAB, CFG.n_segments)  # must not raise
            assert ids[0] == VOCAB.BOS and ids[-1] == VOCAB.EOS


def test_greedy_decode_accepts_2d_unified():
    dec = make_decoder(3)
    u = unified_for(3)
    ids = dec.greedy_decode(Task.AVQA, DTensor(u.data[0]))
    assert len(ids) == 4


def test_annotate_unified_adds_position_information():
    dec = make_decoder(4)
    u = unified_for(4)
    L = CFG.unified_length
    block = np.zeros(L, dtype=np.int64)
    segment = np.zeros(L, dtype=np.int64)
    slot = np.zeros(L, dtype=np.int64)
    a1 = dec.annotate_unified(u, block, segment, slot)
    segment2 = segment.copy()
    segment2[0] = 3
    a2 = dec.annotate_unified(u, block, segment2, slot)
    assert np.abs(a1.data[:, 0] - a2.data[:, 0]).max() > 1e-6
    np.testing.assert_array_equal(a1.data[:, 1:], a2.data[:, 1:])


def test_decoder_gradients_flow():
    dec = make_decoder(5)
    u = unified_for(5)
    ids = np.array([[VOCAB.BOS, VOCAB.task_id(Task.AVQA), VOCAB.ans_id(2),
                     VOCAB.EOS]])
    targets = np.array([[VOCAB.task_id(Task.AVQA), VOCAB.ans_id(2), VOCAB.EOS,
                         VOCAB.PAD]])
    mask = (targets != VOCAB.PAD).astype(np.float64)
    for p in dec.params().values():
        p.zero_grad()
    with Tape():
        logits = dec.logits(ids[:, :], dec.annotate_unified(
            u, *[np.zeros(CFG.unified_length, dtype=np.int64)] * 3))
        loss = tz.cross_entropy(logits, targets, mask=mask)
        tz.backprop(loss)
    live = [n for n, p in dec.params().items() if np.any(p.grad != 0)]
    assert "decoder.tok_emb" in live
    assert "decoder.out_proj" in live
    assert "decoder.cross.wv" in live


def test_program_longer_than_capacity_rejected():
    dec = make_decoder(6)
    u = unified_for(6)
    too_long = np.ones((1, dec.max_len + 1), dtype=np.int64)
    with pytest.raises(ShapeError, match="capacity"):
        dec.logits(too_long, u)


def test_mask_decoder_shapes_and_grads():
    cfg = ModelConfig(d_model=32)
    md = MaskDecoder(np.random.default_rng(7), cfg)
    rng = np.random.default_rng(7)
    rows = DTensor(rng.normal(size=(2, cfg.n_patches, 32)))
    audio = DTensor(rng.normal(size=(2, 32)))
    for p in md.params().values():
        p.zero_grad()
    with Tape():
        out = md(rows, audio)
        assert out.shape == (2, cfg.mask_hw, cfg.mask_hw)
        loss = tz.sum_axis(tz.mul(out, out))
        tz.backprop(loss)
    for name, p in md.params().items():
        assert np.any(p.grad != 0), name


def test_mask_decoder_stage_count():
    cfg = ModelConfig(d_model=32)
    md = MaskDecoder(np.random.default_rng(8), cfg)
    assert md.n_stages == 4  # 4 -> 8 -> 16 -> 32 -> 64


def test_heatmap_logits_match_manual_dots():
    rng = np.random.default_rng(9)
    patch = rng.normal(size=(2, 5, 16, 32))
    audio = rng.normal(size=(2, 5, 32))
    out = heatmap_logits(DTensor(patch), DTensor(audio))
    assert out.shape == (2, 5, 16)
    want = np.einsum("btmc,btc->btm", patch, audio) / np.sqrt(32)
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_heatmap_region_thresholds_at_half_max():
    heat = np.zeros(16)
    heat[5] = 1.0
    heat[6] = 0.6
    heat[7] = 0.4
    region = heatmap_region(heat, grid=4, hw=64)
    assert region.shape == (64, 64)
    cells = region.reshape(4, 16, 4, 16).max(axis=(1, 3))
    want = np.zeros((4, 4), dtype=np.uint8)
    want[1, 1] = 1  # cell 5
    want[1, 2] = 1  # cell 6 clears half max; cell 7 does not
    np.testing.assert_array_equal(cells, want)
