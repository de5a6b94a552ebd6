"""Model hyperparameters shared across modules."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Shapes and switches for the unified model.

    Defaults are desk scale: 10 one-second segments, a 4x4 patch grid,
    width 64. `scales` are the temporal window sizes; a global unwindowed
    stage is always appended after them.
    """

    n_segments: int = 10          # T
    grid: int = 4                 # patch grid side, M = grid^2
    d_model: int = 64             # C
    d_audio: int = 128
    d_visual: int = 512
    d_text: int = 512
    n_classes: int = 6            # event/object classes, background excluded
    n_answers: int = 8
    mask_hw: int = 64             # H = W of segmentation masks
    max_scale: int = 8            # windows 2, 4, ..., max_scale
    n_heads: int = 1
    mask_channels: int = 16       # conv width of the mask decoder
    decoder_layernorm: bool = True
    use_temporal: bool = True     # multi-scale temporal stage on/off
    use_spatial: bool = True      # patch/audio spatial stage on/off
    use_prompt: bool = True       # prompt-conditioned reweighting on/off

    def __post_init__(self):
        if self.n_segments < 1:
            raise ConfigError("n_segments must be >= 1")
        if self.grid < 1:
            raise ConfigError("grid must be >= 1")
        if self.max_scale < 2 or self.max_scale % 2:
            raise ConfigError("max_scale must be an even number >= 2")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must divide into n_heads")
        hw, g = self.mask_hw, self.grid
        while hw > g and hw % 2 == 0:
            hw //= 2
        if hw != g:
            raise ConfigError(
                f"mask_hw {self.mask_hw} must be grid {g} times a power of two")

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def scales(self):
        return list(range(2, self.max_scale + 1, 2))

    @property
    def n_templates(self):
        # four fixed task prompts, then the question prompts: one existence
        # template per class, one counting, one side
        return 4 + self.n_classes + 2

    @property
    def unified_length(self):
        return 2 * self.n_segments + self.n_segments * (self.n_patches + 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return cls(**d)
