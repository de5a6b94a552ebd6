"""Bundle serialization: byte-exact round-trips, manifest determinism,
and structural error reporting."""

import json

import numpy as np
import pytest

from avu.bundle import Bundle, project_inputs, read_bundle, validate_bundle, write_bundle
from avu.config import ModelConfig
from avu.errors import FormatError, ValidationError
from avu.tensor import DTensor
from avu.tokens import Task, UNLABELED

T, M, DA, DV, DT, HW = 10, 16, 128, 512, 512, 64


def make_bundle(task, seed=0):
    rng = np.random.default_rng(seed)
    feats = dict(
        audio=rng.normal(size=(T, DA)).astype(np.float32),
        frames=rng.normal(size=(T, DV)).astype(np.float32),
        patches=rng.normal(size=(T, M, DV)).astype(np.float32),
    )
    if task == Task.AVE:
        labels = {"events": rng.integers(0, 7, size=T), "n_classes": 6}
    elif task == Task.AVVP:
        labels = {"audible": rng.integers(0, 2, size=(T, 6)),
                  "visible": rng.integers(0, 2, size=(T, 6))}
    elif task == Task.SSL:
        bins = rng.integers(-1, M, size=T)
        labels = {"bins": bins}
    elif task == Task.AVS:
        labels = {"masks": rng.integers(0, 2, size=(1, HW, HW)).astype(np.uint8)}
    elif task == Task.AVQA:
        labels = {"n_answers": 8, "answer": 3, "template": 5}
    else:
        labels = None
    return Bundle(task=int(task) if task != UNLABELED else UNLABELED,
                  prompt_template=int(task) if task != UNLABELED else 0,
                  d_text=DT, mask_hw=(HW, HW), labels=labels, **feats)


@pytest.mark.parametrize("task", list(Task) + [UNLABELED])
def test_write_read_write_is_byte_identical(task, tmp_path):
    b = make_bundle(task, seed=int(task) if task != UNLABELED else 99)
    p1 = tmp_path / "a.avuf"
    p2 = tmp_path / "b.avuf"
    write_bundle(p1, b)
    b2 = read_bundle(p1)
    write_bundle(p2, b2)
    assert p1.read_bytes() == p2.read_bytes()
    m1 = json.loads((tmp_path / "a.avuf.json").read_text())
    m2 = json.loads((tmp_path / "b.avuf.json").read_text())
    assert m1 == m2


@pytest.mark.parametrize("task", list(Task))
def test_labels_survive_roundtrip(task, tmp_path):
    b = make_bundle(task, seed=10 + int(task))
    p = tmp_path / "x.avuf"
    write_bundle(p, b)
    b2 = read_bundle(p)
    assert b2.task == b.task
    if task == Task.AVE:
        np.testing.assert_array_equal(b2.labels["events"], b.labels["events"])
        assert b2.labels["n_classes"] == 6
    elif task == Task.AVVP:
        np.testing.assert_array_equal(b2.labels["audible"], b.labels["audible"])
        np.testing.assert_array_equal(b2.labels["visible"], b.labels["visible"])
    elif task == Task.SSL:
        np.testing.assert_array_equal(b2.labels["bins"], b.labels["bins"])
    elif task == Task.AVS:
        np.testing.assert_array_equal(b2.labels["masks"], b.labels["masks"])
    else:
        assert b2.labels == b.labels
    np.testing.assert_array_equal(b2.audio, b.audio)
    np.testing.assert_array_equal(b2.patches, b.patches)


def test_raw_prompt_roundtrip(tmp_path):
    b = make_bundle(Task.AVQA)
    b.prompt_raw = np.linspace(-1, 1, DT, dtype=np.float32)
    p = tmp_path / "raw.avuf"
    write_bundle(p, b)
    b2 = read_bundle(p)
    np.testing.assert_array_equal(b2.prompt_raw, b.prompt_raw)


def test_manifest_is_deterministic(tmp_path):
    b = make_bundle(Task.SSL, seed=3)
    write_bundle(tmp_path / "m1.avuf", b)
    write_bundle(tmp_path / "m2.avuf", b)
    t1 = (tmp_path / "m1.avuf.json").read_text()
    t2 = (tmp_path / "m2.avuf.json").read_text()
    assert t1 == t2
    man = json.loads(t1)
    assert man["task"] == "SSL"
    assert man["n_segments"] == T
    assert "sha256" in man


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.avuf"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError, match="magic"):
        read_bundle(p)


def test_bad_version_rejected(tmp_path):
    b = make_bundle(Task.AVE)
    p = tmp_path / "v.avuf"
    write_bundle(p, b)
    data = bytearray(p.read_bytes())
    data[4] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        read_bundle(p)


def test_truncation_rejected_everywhere(tmp_path):
    b = make_bundle(Task.AVVP)
    p = tmp_path / "t.avuf"
    write_bundle(p, b)
    data = p.read_bytes()
    rng = np.random.default_rng(0)
    cuts = sorted(set(int(c) for c in rng.integers(0, len(data), size=25)))
    for cut in cuts:
        p.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            read_bundle(p)


def test_trailing_bytes_rejected(tmp_path):
    b = make_bundle(Task.AVQA)
    p = tmp_path / "tr.avuf"
    write_bundle(p, b)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_bundle(p)


def test_unknown_task_byte_rejected(tmp_path):
    b = make_bundle(Task.AVE)
    p = tmp_path / "u.avuf"
    write_bundle(p, b)
    data = bytearray(p.read_bytes())
    data[6] = 7  # task byte
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="task"):
        read_bundle(p)


def test_validate_catches_nonfinite_and_shape(tmp_path):
    b = make_bundle(Task.AVE)
    b.audio[0, 0] = np.nan
    with pytest.raises(ValidationError, match="audio"):
        validate_bundle(b)
    b = make_bundle(Task.AVE)
    cfg = ModelConfig()
    validate_bundle(b, cfg)
    small = ModelConfig(n_segments=5)
    with pytest.raises(ValidationError):
        validate_bundle(b, small)


def test_unlabeled_has_no_label_block(tmp_path):
    b = make_bundle(UNLABELED)
    p = tmp_path / "ul.avuf"
    write_bundle(p, b)
    b2 = read_bundle(p)
    assert b2.labels is None
    assert b2.task == UNLABELED


def test_project_inputs_shapes():
    b = make_bundle(Task.AVE)
    rng = np.random.default_rng(0)
    wa = DTensor(rng.normal(size=(DA, 64)))
    wv = DTensor(rng.normal(size=(DV, 64)))
    out = project_inputs(b, wa, wv)
    assert out["audio"].shape == (T, 64)
    assert out["frames"].shape == (T, 64)
    assert out["patches"].shape == (T, M, 64)
    np.testing.assert_allclose(
        out["audio"].data, b.audio.astype(np.float64) @ wa.data, atol=1e-12)
