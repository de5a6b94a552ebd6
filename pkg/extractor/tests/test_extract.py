import json
import subprocess
import sys

import numpy as np
import pytest

from avuextract import ExtractionJob, JobError, MediaError, extract
from clipgen import write_clip


@pytest.fixture(scope="module")
def clip(tmp_path_factory):
    return write_clip(tmp_path_factory.mktemp("clips"), seconds=10, fps=8)


def test_extract_writes_bundle_and_manifest(clip, tmp_path):
    out = tmp_path / "clip.avuf"
    extract(ExtractionJob(video=str(clip), out=str(out), segments=10))
    assert out.exists()
    manifest = json.loads((tmp_path / "clip.avuf.json").read_text())
    assert manifest["task"] == "unlabeled"
    assert manifest["n_segments"] == 10
    assert manifest["n_patches"] == 16
    assert manifest["d_audio"] == 128
    assert manifest["d_visual"] == 512
    assert manifest["extractor"]["sidecar_audio"] is True
    assert manifest["bytes"] == out.stat().st_size


def test_extract_deterministic(clip, tmp_path):
    a = tmp_path / "a.avuf"
    b = tmp_path / "b.avuf"
    extract(ExtractionJob(video=str(clip), out=str(a), segments=10))
    extract(ExtractionJob(video=str(clip), out=str(b), segments=10))
    assert a.read_bytes() == b.read_bytes()


def test_extract_truncates_and_pads(clip, tmp_path):
    import struct
    for T in (5, 15):
        out = tmp_path / f"t{T}.avuf"
        extract(ExtractionJob(video=str(clip), out=str(out), segments=T))
        head = out.read_bytes()[:9]
        assert struct.unpack("<H", head[7:9])[0] == T


def test_extract_without_audio_track(tmp_path):
    clip = write_clip(tmp_path, name="mute", seconds=3, fps=6,
                      with_audio=False)
    out = tmp_path / "mute.avuf"
    extract(ExtractionJob(video=str(clip), out=str(out), segments=3))
    payload = np.frombuffer(out.read_bytes(), dtype="<f4",
                            offset=21, count=3 * 128)
    assert np.all(np.isfinite(payload))


def test_bad_media_raises(tmp_path):
    bad = tmp_path / "bad.mp4"
    bad.write_bytes(b"not media")
    with pytest.raises(MediaError):
        extract(ExtractionJob(video=str(bad), out=str(tmp_path / "x.avuf")))


def test_bad_job_raises(clip, tmp_path):
    with pytest.raises(JobError):
        ExtractionJob(video=str(clip), out=str(tmp_path / "x.avuf"),
                      segments=0)


def test_cli_extracts(clip, tmp_path):
    out = tmp_path / "cli.avuf"
    proc = subprocess.run(
        [sys.executable, "-m", "avuextract", "extract", "--video", str(clip),
         "--out", str(out), "--segments", "10"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stdout
    assert out.exists() and (tmp_path / "cli.avuf.json").exists()


def test_cli_error_path(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "avuextract", "extract", "--video",
         str(tmp_path / "absent.mp4"), "--out", str(tmp_path / "x.avuf")],
        capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("error: MediaError:")
