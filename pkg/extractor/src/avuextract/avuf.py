"""Writer for the bundle format the downstream model consumes.

Write-only on purpose: this tool emits bundles, the downstream package
reads them, and the round trip across the two implementations is what
its conformance tests check. Layout (little-endian):

    magic "AVUF" | version u16 | task u8 | T u16 | M u16 | D_a u16 |
    D_v u16 | D_t u16 | H u16 | W u16 |
    audio f32[T*D_a] | frame f32[T*D_v] | patch f32[T*M*D_v] |
    template u16 | has_raw u8 | (raw f32[D_t] if has_raw) | labels

Extraction produces no labels, so the task byte is the unlabeled marker
and the label block is empty.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVUF"
VERSION = 1
UNLABELED = 255


def write_unlabeled_bundle(path, audio, frames, patches, d_text=512,
                           mask_hw=(64, 64), extractor_info=None):
    """Serialize features plus a sidecar manifest; returns the path."""
    path = Path(path)
    audio = np.ascontiguousarray(audio, dtype="<f4")
    frames = np.ascontiguousarray(frames, dtype="<f4")
    patches = np.ascontiguousarray(patches, dtype="<f4")
    T, da = audio.shape
    M, dv = patches.shape[1], patches.shape[2]
    if frames.shape != (T, dv) or patches.shape[0] != T:
        raise ValueError(
            f"inconsistent feature shapes: audio {audio.shape}, "
            f"frames {frames.shape}, patches {patches.shape}")
    H, W = mask_hw
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<BHHHHHHH", UNLABELED, T, M, da, dv, d_text, H, W)
    out += audio.tobytes() + frames.tobytes() + patches.tobytes()
    out += struct.pack("<HB", 0, 0)    # template 0, no raw prompt
    data = bytes(out)
    path.write_bytes(data)
    manifest = {
        "format": "avuf",
        "version": VERSION,
        "task": "unlabeled",
        "n_segments": T,
        "n_patches": M,
        "d_audio": da,
        "d_visual": dv,
        "d_text": d_text,
        "mask_h": H,
        "mask_w": W,
        "prompt_template": 0,
        "has_raw_prompt": False,
        "bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    if extractor_info:
        manifest["extractor"] = dict(sorted(extractor_info.items()))
    Path(str(path) + ".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path
