"""Prompt-guided token weighting and the unified sequence.

The temporal stage's outputs (audio rows then visual rows, 2T x C) and
the spatial stage's outputs (per segment: audio slot then M patch slots,
T x (M+1) x C) each get a prompt-conditioned gain per row: a scored
softmax over the rows of the stream, scaled by the row count so the mean
gain is one. Relative gains carry the task/question signal; the scaling
keeps row magnitudes in range for the decoder's cross-attention (raw
softmax values would shrink every row by ~1/L).

`serialize_unified` concatenates both weighted streams into the single
L = 2T + T(M+1) token sequence the decoder attends over, together with
per-row provenance (block, segment, slot) used for positional lookups.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .errors import ShapeError
from .tensor import DTensor

# provenance block ids
BLOCK_TEMPORAL_AUDIO = 0
BLOCK_TEMPORAL_VISUAL = 1
BLOCK_SPATIAL = 2


def template_vector(template_id, d_text):
    """Deterministic unit pseudo-embedding for a prompt template.

    Stands in for a text encoder: every template id maps to a fixed
    direction, identical across runs and machines.
    """
    rng = np.random.default_rng(977_000 + int(template_id))
    v = rng.normal(size=d_text)
    return (v / np.linalg.norm(v)).astype(np.float64)


class PromptGuide:
    """Prompt projection plus per-stream scoring heads."""

    def __init__(self, rng, config):
        self.config = config
        C, Dt = config.d_model, config.d_text
        self.text_proj = DTensor(rng.normal(0.0, 1.0 / np.sqrt(Dt), (Dt, C)),
                                 name="prompt.text_proj")
        self.score_temporal = DTensor(rng.normal(0.0, 1.0 / np.sqrt(C), (C, C)),
                                      name="prompt.score_temporal")
        self.score_spatial = DTensor(rng.normal(0.0, 1.0 / np.sqrt(C), (C, C)),
                                     name="prompt.score_spatial")

    def _gains(self, rows, prompt_c, proj):
        """rows (B, L, C), prompt_c (B, C) -> mean-one gains (B, L)."""
        C = rows.shape[-1]
        h = tz.relu(tz.matmul(rows, proj))
        q = tz.reshape(prompt_c, (prompt_c.shape[0], C, 1))
        scores = tz.scale(tz.reshape(tz.matmul(h, q), rows.shape[:-1]),
                          1.0 / np.sqrt(C))
        w = tz.softmax_lastdim(scores)
        return tz.scale(w, float(rows.shape[-2]))

    def __call__(self, temporal_seq, spatial_seq, prompt):
        """Weight both streams by prompt relevance.

        temporal_seq (B, 2T, C), spatial_seq (B, T, M+1, C), prompt
        (B, D_t). Returns (weighted temporal, weighted spatial,
        temporal gains (B, 2T), spatial gains (B, T, M+1)). Disabled,
        the streams pass through with unit gains.
        """
        B = temporal_seq.shape[0]
        T, M1 = spatial_seq.shape[1], spatial_seq.shape[2]
        if temporal_seq.shape[1] != 2 * T:
            raise ShapeError(f"temporal stream has {temporal_seq.shape[1]} rows, "
                             f"expected 2x{T}")
        if not self.config.use_prompt:
            ones_t = DTensor(np.ones((B, 2 * T)))
            ones_s = DTensor(np.ones((B, T, M1)))
            return temporal_seq, spatial_seq, ones_t, ones_s
        prompt_c = tz.matmul(prompt, self.text_proj)
        w_t = self._gains(temporal_seq, prompt_c, self.score_temporal)
        C = spatial_seq.shape[-1]
        flat = tz.reshape(spatial_seq, (B, T * M1, C))
        w_s_flat = self._gains(flat, prompt_c, self.score_spatial)
        out_t = tz.mul(temporal_seq, tz.reshape(w_t, (B, 2 * T, 1)))
        out_s_flat = tz.mul(flat, tz.reshape(w_s_flat, (B, T * M1, 1)))
        out_s = tz.reshape(out_s_flat, (B, T, M1, C))
        w_s = tz.reshape(w_s_flat, (B, T, M1))
        return out_t, out_s, w_t, w_s

    def params(self):
        return {p.name: p for p in (self.text_proj, self.score_temporal,
                                    self.score_spatial)}


def serialize_unified(temporal_seq, spatial_seq):
    """Concatenate the streams into (B, L, C) with provenance arrays.

    Row order: temporal audio t=0..T-1, temporal visual t=0..T-1, then
    per segment the audio slot followed by the M patch slots. Returns
    (unified, block (L,), segment (L,), slot (L,)); slot 0 is the audio
    slot, patches are 1..M. Temporal rows use slot 0.
    """
    B, twoT, C = temporal_seq.shape
    T, M1 = spatial_seq.shape[1], spatial_seq.shape[2]
    if twoT != 2 * T:
        raise ShapeError(f"stream shapes disagree: {temporal_seq.shape} vs "
                         f"{spatial_seq.shape}")
    flat = tz.reshape(spatial_seq, (B, T * M1, C))
    unified = tz.concat_axis([temporal_seq, flat], axis=1)
    block = np.concatenate([
        np.full(T, BLOCK_TEMPORAL_AUDIO),
        np.full(T, BLOCK_TEMPORAL_VISUAL),
        np.full(T * M1, BLOCK_SPATIAL),
    ])
    segment = np.concatenate([
        np.arange(T), np.arange(T), np.repeat(np.arange(T), M1),
    ])
    slot = np.concatenate([
        np.zeros(T, dtype=np.int64), np.zeros(T, dtype=np.int64),
        np.tile(np.arange(M1), T),
    ])
    return unified, block, segment, slot


def unified_length(n_segments, n_patches):
    return 2 * n_segments + n_segments * (n_patches + 1)
