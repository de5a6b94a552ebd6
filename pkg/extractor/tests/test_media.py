import numpy as np
import pytest

from avuextract.errors import MediaError
from avuextract.media import (read_audio, read_frames, segment_audio,
                              segment_frames)
from clipgen import write_clip


@pytest.fixture(scope="module")
def clip(tmp_path_factory):
    return write_clip(tmp_path_factory.mktemp("media"), seconds=3, fps=8)


def test_read_frames_shape_and_fps(clip):
    frames, fps = read_frames(clip)
    assert frames.shape == (24, 96, 96, 3)
    assert frames.dtype == np.uint8
    assert fps == pytest.approx(8.0, abs=0.1)


def test_missing_video_raises(tmp_path):
    with pytest.raises(MediaError):
        read_frames(tmp_path / "nope.mp4")


def test_garbage_video_raises(tmp_path):
    bad = tmp_path / "bad.mp4"
    bad.write_bytes(b"this is not a container" * 50)
    with pytest.raises(MediaError):
        read_frames(bad)


def test_read_audio_sidecar(clip):
    samples, found = read_audio(clip)
    assert found
    assert samples.shape == (3 * 16_000,)
    # a 440 Hz tone at 0.4 amplitude keeps its level through the reader
    assert 0.2 <= np.abs(samples).max() <= 0.5


def test_read_audio_resamples(tmp_path):
    from scipy.io import wavfile
    video = tmp_path / "c.mp4"
    video.write_bytes(b"placeholder")
    wave = np.sin(np.arange(8000) / 8000.0 * 2 * np.pi * 100)
    wavfile.write(str(tmp_path / "c.wav"), 8000,
                  (wave * 30000).astype(np.int16))
    samples, found = read_audio(video)
    assert found
    assert samples.shape == (16_000,)


def test_read_audio_missing_sidecar(tmp_path):
    video = tmp_path / "c.mp4"
    video.write_bytes(b"placeholder")
    samples, found = read_audio(video)
    assert not found and samples.shape == (0,)


def test_segment_audio_pads_and_truncates():
    x = np.ones(25_000)
    out = segment_audio(x, 10_000, 4)
    assert out.shape == (4, 10_000)
    assert out[:2].all()
    assert out[2, :5000].all() and not out[2, 5000:].any()
    assert not out[3].any()
    assert segment_audio(x, 10_000, 2).shape == (2, 10_000)


def test_segment_frames_centers_and_freezes():
    frames = np.arange(24).reshape(24, 1, 1, 1)
    picked = segment_frames(frames, 8.0, 5)
    # centers of seconds 0..2 at 8 fps are frames 4, 12, 20; beyond the
    # stream the last frame repeats
    assert picked[:, 0, 0, 0].tolist() == [4, 12, 20, 23, 23]
