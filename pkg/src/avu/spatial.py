"""Spatial perception within each segment.

Three attention steps per segment, all residual:

  1. patches attend over the segment's own patch grid;
  2. every patch then attends to the segment's (single) audio token,
     which with a one-token context degenerates to adding the projected
     audio vector uniformly across the grid;
  3. the temporally refined audio token attends back over the
     self-attended patch grid, giving an audio token that knows where
     things are.

Step 2 uses the raw projected audio (pre temporal stage); step 3 queries
with the temporal-stage audio. Segments never see each other here.
"""

from __future__ import annotations

from . import tensor as tz
from .attention import AttentionSite, attend
from .errors import ShapeError


class SpatialPerception:
    """Per-segment patch/audio attention triple."""

    def __init__(self, rng, config):
        self.config = config
        C = config.d_model
        h = config.n_heads
        self.patch_self = AttentionSite(rng, C, "spatial.patch_self", n_heads=h)
        self.audio_to_patch = AttentionSite(rng, C, "spatial.audio_to_patch",
                                            n_heads=h)
        self.patch_to_audio = AttentionSite(rng, C, "spatial.patch_to_audio",
                                            n_heads=h)

    def __call__(self, patches, audio_raw, audio_temporal):
        """patches (..., T, M, C), audio_* (..., T, C).

        Returns (patch tokens (..., T, M, C), spatial audio (..., T, C)).
        Disabled, the projected patches and the temporal audio pass
        through unchanged.
        """
        if not self.config.use_spatial:
            return patches, audio_temporal
        if patches.shape[-3] != audio_raw.shape[-2]:
            raise ShapeError(f"segment counts disagree: patches {patches.shape} "
                             f"vs audio {audio_raw.shape}")
        C = patches.shape[-1]
        lead = patches.shape[:-2]

        sa, _ = attend(self.patch_self, patches, patches)
        patches_sa = tz.add(patches, sa)

        # singleton audio context per segment
        audio_ctx = tz.reshape(audio_raw, lead[:-1] + (lead[-1], 1, C))
        guided, _ = attend(self.audio_to_patch, patches_sa, audio_ctx)
        patch_out = tz.add(patches_sa, guided)

        audio_q = tz.reshape(audio_temporal, lead[:-1] + (lead[-1], 1, C))
        located, _ = attend(self.patch_to_audio, audio_q, patches_sa)
        audio_out = tz.add(audio_temporal,
                           tz.reshape(located, audio_temporal.shape))
        return patch_out, audio_out

    def params(self):
        out = {}
        for site in (self.patch_self, self.audio_to_patch, self.patch_to_audio):
            out.update(site.params())
        return out
