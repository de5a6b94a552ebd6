"""Multi-scale temporal perception over segment tokens.

Audio and frame tokens attend within centered time windows of growing
size (2, 4, ..., max_scale) plus one unwindowed stage. Each stage is a
hybrid block: self-attention within a stream plus cross-attention to the
other stream, both restricted to the window, summed (no residual). Stage
outputs are concatenated per stream and projected back to model width.

Windowing is realized as full-sequence attention under an additive
0 / -inf mask, which is exactly equivalent to attending over the window
slice: masked positions get weight exactly zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .attention import AttentionSite, attend
from .errors import ShapeError
from .tensor import DTensor


def window_indices(t, size, n_segments):
    """Timesteps visible from `t` under a centered window of `size`.

    The window spans [t - size/2, t + size/2] inclusive, clipped to the
    sequence. size must be even and positive.
    """
    if size < 2 or size % 2:
        raise ShapeError(f"window size must be even and >= 2, got {size}")
    half = size // 2
    lo = max(0, t - half)
    hi = min(n_segments - 1, t + half)
    return list(range(lo, hi + 1))


def window_mask(size, n_segments):
    """(T, T) additive attention mask for a centered window of `size`."""
    m = np.full((n_segments, n_segments), -np.inf)
    for t in range(n_segments):
        idx = window_indices(t, size, n_segments)
        m[t, idx[0]:idx[-1] + 1] = 0.0
    return m


class HANBlock:
    """One hybrid attention stage: shared-across-streams self and cross
    sites, separate parameters per stage."""

    def __init__(self, rng, d_model, name, n_heads=1):
        self.name = name
        self.sa = AttentionSite(rng, d_model, f"{name}.sa", n_heads=n_heads)
        self.ca = AttentionSite(rng, d_model, f"{name}.ca", n_heads=n_heads)

    def __call__(self, audio, visual, mask=None):
        """audio/visual (..., T, C) -> same shapes, window-restricted."""
        a_self, _ = attend(self.sa, audio, audio, mask=mask)
        a_cross, _ = attend(self.ca, audio, visual, mask=mask)
        v_self, _ = attend(self.sa, visual, visual, mask=mask)
        v_cross, _ = attend(self.ca, visual, audio, mask=mask)
        return tz.add(a_self, a_cross), tz.add(v_self, v_cross)

    def params(self):
        out = {}
        out.update(self.sa.params())
        out.update(self.ca.params())
        return out


class TemporalPerception:
    """The full multi-scale stage stack with per-stream output projections."""

    def __init__(self, rng, config):
        self.config = config
        C = config.d_model
        self.blocks = []
        for s in config.scales:
            self.blocks.append(HANBlock(rng, C, f"temporal.s{s}",
                                        n_heads=config.n_heads))
        self.global_block = HANBlock(rng, C, "temporal.global",
                                     n_heads=config.n_heads)
        n_stages = len(config.scales) + 1
        std = 1.0 / np.sqrt(n_stages * C)
        self.proj_audio = DTensor(rng.normal(0.0, std, (n_stages * C, C)),
                                  name="temporal.proj_audio")
        self.proj_visual = DTensor(rng.normal(0.0, std, (n_stages * C, C)),
                                   name="temporal.proj_visual")
        self.masks = {s: window_mask(s, config.n_segments)
                      for s in config.scales}

    def __call__(self, audio, visual):
        """audio/visual (..., T, C) -> refined (..., T, C) pair.

        With the stage disabled the inputs pass through untouched (the
        parameters still exist so matched seeds draw identical values).
        """
        if not self.config.use_temporal:
            return audio, visual
        T = audio.shape[-2]
        if visual.shape != audio.shape:
            raise ShapeError(f"temporal streams disagree: audio {audio.shape} "
                             f"vs visual {visual.shape}")
        a_stages, v_stages = [], []
        ga, gv = self.global_block(audio, visual)
        a_stages.append(ga)
        v_stages.append(gv)
        for s in self.config.scales:
            mask = self.masks[s] if T == self.config.n_segments else window_mask(s, T)
            a_s, v_s = self.blocks[self.config.scales.index(s)](audio, visual,
                                                                mask=mask)
            a_stages.append(a_s)
            v_stages.append(v_s)
        a_cat = tz.concat_axis(a_stages, axis=-1)
        v_cat = tz.concat_axis(v_stages, axis=-1)
        return (tz.matmul(a_cat, self.proj_audio),
                tz.matmul(v_cat, self.proj_visual))

    def params(self):
        out = {}
        for b in self.blocks:
            out.update(b.params())
        out.update(self.global_block.params())
        out[self.proj_audio.name] = self.proj_audio
        out[self.proj_visual.name] = self.proj_visual
        return out
