"""The extraction pipeline: clip -> per-second features -> bundle."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .avuf import write_unlabeled_bundle
from .embed import load_backend
from .errors import JobError
from .media import (SAMPLE_RATE, read_audio, read_frames, segment_audio,
                    segment_frames)


@dataclass
class ExtractionJob:
    """What to extract and where to put it.

    `segments` is the target clip length T; longer media is truncated,
    shorter media is padded (frozen last frame, silent audio). Frames
    are sampled at one per second, audio at 16 kHz.
    """

    video: str
    out: str
    segments: int = 10
    sample_rate: int = SAMPLE_RATE
    grid: int = 4
    mask_hw: int = 64
    d_text: int = 512
    backend: str = "builtin"

    def __post_init__(self):
        if self.segments < 1:
            raise JobError(f"segments must be >= 1, got {self.segments}")
        if self.grid < 1:
            raise JobError(f"grid must be >= 1, got {self.grid}")
        if self.sample_rate < 1000:
            raise JobError(f"sample rate {self.sample_rate} is too low")


def extract(job: ExtractionJob):
    """Run the job; returns the written bundle path.

    Raises MediaError when the clip cannot be decoded and
    DependencyError when the backend is unavailable.
    """
    emb = load_backend(job.backend, sample_rate=job.sample_rate)
    frames, fps = read_frames(job.video)
    samples, has_audio = read_audio(job.video, job.sample_rate)
    T = job.segments
    picked = segment_frames(frames, fps, T)
    seconds = segment_audio(samples, job.sample_rate, T)
    audio = np.stack([emb.audio_segment(s) for s in seconds])
    frame_feats = np.stack([emb.frame(f) for f in picked])
    patch_feats = np.stack([emb.patch_grid(f, job.grid) for f in picked])
    info = {
        "tool": "avuextract",
        "backend": emb.name,
        "source": Path(job.video).name,
        "source_fps": round(fps, 3),
        "source_frames": int(frames.shape[0]),
        "sidecar_audio": bool(has_audio),
        "sample_rate": job.sample_rate,
        "frames_per_second": 1,
    }
    return write_unlabeled_bundle(
        job.out, audio, frame_feats, patch_feats, d_text=job.d_text,
        mask_hw=(job.mask_hw, job.mask_hw), extractor_info=info)
