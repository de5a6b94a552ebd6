"""Token program round-trips, grammar consistency, and parse errors."""

import numpy as np
import pytest

from avu.errors import ParseError
from avu.tokens import Task, TokenVocab, decode_tokens, encode_labels, grammar_mask

T = 10
VOCAB = TokenVocab(n_classes=6, n_bins=16, n_answers=8)


def random_labels(task, rng):
    K = VOCAB.n_classes
    if task == Task.AVE:
        lab = rng.integers(0, K, size=T)
        lab[rng.random(T) < 0.5] = K  # background
        return lab
    if task == Task.AVVP:
        return (rng.integers(0, 2, size=(T, K)), rng.integers(0, 2, size=(T, K)))
    if task == Task.SSL:
        lab = rng.integers(0, VOCAB.n_bins, size=T)
        lab[rng.random(T) < 0.3] = -1
        return lab
    if task == Task.AVS:
        return {"mask_request": True}
    return {"answer": int(rng.integers(0, VOCAB.n_answers))}


def assert_labels_equal(task, a, b):
    if task == Task.AVVP:
        np.testing.assert_array_equal(np.asarray(a[0]), np.asarray(b[0]))
        np.testing.assert_array_equal(np.asarray(a[1]), np.asarray(b[1]))
    elif task in (Task.AVE, Task.SSL):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))
    else:
        assert dict(a) == dict(b)


@pytest.mark.parametrize("task", list(Task))
def test_encode_decode_roundtrip_1000(task):
    rng = np.random.default_rng(int(task))
    for _ in range(1000):
        labels = random_labels(task, rng)
        ids = encode_labels(task, labels, VOCAB, T)
        back = decode_tokens(task, ids, VOCAB, T)
        if task == Task.AVS:
            assert back == {"mask_request": True}
        else:
            assert_labels_equal(task, labels, back)


@pytest.mark.parametrize("task", list(Task))
def test_encoded_programs_follow_grammar(task):
    rng = np.random.default_rng(100 + int(task))
    for _ in range(50):
        ids = encode_labels(task, random_labels(task, rng), VOCAB, T)
        for i, tok in enumerate(ids):
            allowed = grammar_mask(task, ids[:i], VOCAB, T)
            assert allowed[tok], (
                f"token {VOCAB.name(tok)} at {i} rejected by grammar")
        assert not grammar_mask(task, ids, VOCAB, T).any()


@pytest.mark.parametrize("task", list(Task))
def test_random_grammar_walks_always_parse(task):
    rng = np.random.default_rng(200 + int(task))
    for _ in range(200):
        ids = []
        for _step in range(500):
            allowed = grammar_mask(task, ids, VOCAB, T)
            if not allowed.any():
                break
            choices = np.flatnonzero(allowed)
            ids.append(int(rng.choice(choices)))
        else:
            pytest.fail("grammar walk did not terminate")
        decode_tokens(task, ids, VOCAB, T)  # must not raise


def test_parsing_pairs_come_out_canonical():
    rng = np.random.default_rng(7)
    audible = rng.integers(0, 2, size=(T, 6))
    visible = rng.integers(0, 2, size=(T, 6))
    ids = encode_labels(Task.AVVP, (audible, visible), VOCAB, T)
    # walk segments: (rank, class) strictly increases inside each
    rank_of = {VOCAB.MOD_A: 0, VOCAB.MOD_V: 1, VOCAB.MOD_AV: 2}
    prev = None
    for i in range(2, len(ids) - 1):
        tok = ids[i]
        if tok == VOCAB.SEP:
            prev = None
        elif tok in rank_of:
            pair = (rank_of[tok], ids[i + 1] - VOCAB.cls_base)
            assert prev is None or pair > prev
            prev = pair


def test_program_shapes():
    rng = np.random.default_rng(8)
    ids = encode_labels(Task.AVE, random_labels(Task.AVE, rng), VOCAB, T)
    assert len(ids) == T + 3
    ids = encode_labels(Task.SSL, random_labels(Task.SSL, rng), VOCAB, T)
    assert len(ids) == T + 3
    assert len(encode_labels(Task.AVS, {}, VOCAB, T)) == 4
    assert len(encode_labels(Task.AVQA, {"answer": 3}, VOCAB, T)) == 4


def test_vocab_layout_is_disjoint():
    v = VOCAB
    ids = ([v.PAD, v.BOS, v.EOS, v.SEP, v.MASK, v.MOD_A, v.MOD_V, v.MOD_AV]
           + [v.task_id(t) for t in Task]
           + [v.cls_id(k) for k in range(v.n_classes + 1)]
           + [v.bin_id(j) for j in range(v.n_bins)]
           + [v.ans_id(a) for a in range(v.n_answers)])
    assert len(ids) == len(set(ids)) == v.size
    assert v.name(v.cls_id(0)) == "CLS_0"
    assert v.name(v.task_id(Task.AVS)) == "TASK_AVS"


def test_parse_errors_carry_position():
    good = encode_labels(Task.AVQA, {"answer": 1}, VOCAB, T)
    bad = [VOCAB.EOS] + good[1:]
    with pytest.raises(ParseError) as ei:
        decode_tokens(Task.AVQA, bad, VOCAB, T)
    assert ei.value.position == 0
    assert "BOS" in ei.value.expected

    with pytest.raises(ParseError):
        decode_tokens(Task.AVE, good, VOCAB, T)  # wrong task token

    truncated = encode_labels(Task.AVE, np.full(T, 6), VOCAB, T)[:-2]
    with pytest.raises(ParseError):
        decode_tokens(Task.AVE, truncated, VOCAB, T)


def test_parse_rejects_noncanonical_pair_order():
    v = VOCAB
    ids = [v.BOS, v.task_id(Task.AVVP),
           v.MOD_V, v.cls_id(2), v.MOD_A, v.cls_id(1), v.SEP]
    ids += [v.SEP] * (T - 1) + [v.EOS]
    with pytest.raises(ParseError, match="canonical"):
        decode_tokens(Task.AVVP, ids, VOCAB, T)


def test_parse_rejects_background_in_pair():
    v = VOCAB
    ids = [v.BOS, v.task_id(Task.AVVP), v.MOD_A, v.cls_id(0), v.SEP]
    ids += [v.SEP] * (T - 1) + [v.EOS]
    with pytest.raises(ParseError):
        decode_tokens(Task.AVVP, ids, VOCAB, T)


def test_parse_rejects_trailing_garbage():
    ids = encode_labels(Task.SSL, np.full(T, -1), VOCAB, T) + [VOCAB.PAD]
    with pytest.raises(ParseError):
        decode_tokens(Task.SSL, ids, VOCAB, T)
