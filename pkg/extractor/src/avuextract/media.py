"""Media decoding: picture stream through OpenCV, audio from a sidecar.

No audio demuxer is available in the supported environments, so the
audio track is read from a WAV file with the same stem as the video
(`clip.mp4` -> `clip.wav`), resampled to 16 kHz mono. A missing sidecar
is treated as a silent track, which is a legitimate clip, not an error.
"""

import math
from pathlib import Path

import numpy as np

from .errors import MediaError

SAMPLE_RATE = 16_000


def read_frames(path):
    """Decode every frame of `path` as (N, H, W, 3) uint8 RGB plus fps."""
    import cv2
    path = Path(path)
    if not path.exists():
        raise MediaError(f"{path}: no such file")
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise MediaError(f"{path}: cannot open video")
        fps = float(cap.get(cv2.CAP_PROP_FPS) or 0.0)
        frames = []
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(frame[:, :, ::-1].copy())    # BGR -> RGB
    finally:
        cap.release()
    if not frames:
        raise MediaError(f"{path}: no decodable frames")
    if fps <= 0 or not math.isfinite(fps):
        fps = 25.0    # container without timing metadata
    return np.stack(frames), fps


def read_audio(video_path, sample_rate=SAMPLE_RATE):
    """The clip's mono track at `sample_rate`, or an empty array.

    Returns (samples float64 in [-1, 1], sidecar_found). Integer WAV
    payloads are rescaled by their type range.
    """
    wav = Path(video_path).with_suffix(".wav")
    if not wav.exists():
        return np.zeros(0, dtype=np.float64), False
    from scipy.io import wavfile
    try:
        rate, data = wavfile.read(str(wav))
    except ValueError as err:
        raise MediaError(f"{wav}: {err}") from None
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        data = data.astype(np.float64) / max(abs(info.min), info.max)
    else:
        data = data.astype(np.float64)
    if rate != sample_rate:
        from scipy.signal import resample_poly
        g = math.gcd(int(sample_rate), int(rate))
        data = resample_poly(data, sample_rate // g, rate // g)
    return data, True


def segment_audio(samples, sample_rate, n_segments):
    """Slice into (n_segments, sample_rate) one-second rows, zero-padded."""
    need = n_segments * sample_rate
    buf = np.zeros(need, dtype=np.float64)
    take = min(need, samples.shape[0])
    buf[:take] = samples[:take]
    return buf.reshape(n_segments, sample_rate)


def segment_frames(frames, fps, n_segments):
    """One frame per second: index nearest the center of each second.

    Seconds past the end of the stream freeze on the last frame, which
    is the padding rule for clips shorter than the requested length.
    """
    n = frames.shape[0]
    idx = [min(int(round((t + 0.5) * fps)), n - 1) for t in range(n_segments)]
    return frames[idx]
