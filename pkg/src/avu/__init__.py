"""Unified audio-visual scene understanding at desk scale.

Five tasks (event localization, video parsing, sound localization,
sounding-object segmentation, question answering) share one model: inputs
become token sequences, a multi-scale temporal module and a spatial module
refine them, prompt-conditioned weights modulate them, and a single decoder
emits task token programs.
"""

__version__ = "0.1.0"
