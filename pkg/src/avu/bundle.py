"""Clip bundles: the on-disk unit of work.

A bundle carries one clip's audio features (T, D_a), frame features
(T, D_v), patch-grid features (T, M, D_v), a prompt reference, and the
task labels. The binary layout is little-endian and fixed:

    magic "AVUF" | version u16 | task u8 | T u16 | M u16 | D_a u16 |
    D_v u16 | D_t u16 | H u16 | W u16 |
    audio f32[T*D_a] | frame f32[T*D_v] | patch f32[T*M*D_v] |
    template u16 | has_raw u8 | (raw f32[D_t] if has_raw) |
    label block (task-specific, below)

Label blocks: event localization writes K u16 then T u16 labels (value K
means background); parsing writes K u16 then two T*K u8 grids (audible,
visible); localization writes T u16 bins (0xFFFF = silent); segmentation
writes n_masks u16 then that many H*W u8 binary masks; QA writes
n_answers u16, answer u16, template u16. Task byte 255 = unlabeled, no
label block. Every bundle gets a deterministic sidecar manifest at
`path + ".json"`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .errors import FormatError, ValidationError
from .tokens import Task, UNLABELED

MAGIC = b"AVUF"
VERSION = 1
SILENT = 0xFFFF


@dataclass
class Bundle:
    """One clip's features, prompt, and labels (None when unlabeled)."""

    task: int
    audio: np.ndarray      # (T, D_a) float32
    frames: np.ndarray     # (T, D_v) float32
    patches: np.ndarray    # (T, M, D_v) float32
    prompt_template: int = 0
    prompt_raw: np.ndarray | None = None   # (D_t,) float32 or None
    d_text: int = 512
    mask_hw: tuple = (64, 64)
    labels: object = None

    @property
    def n_segments(self):
        return self.audio.shape[0]

    @property
    def n_patches(self):
        return self.patches.shape[1]


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what} "
                              f"(need {n} bytes at offset {self.off})")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def f32(self, count, shape, what):
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def write_bundle(path, b: Bundle):
    """Serialize `b` to `path` plus a sidecar manifest. Returns the path."""
    path = Path(path)
    T, da = b.audio.shape
    dv = b.frames.shape[1]
    M = b.patches.shape[1]
    H, W = b.mask_hw
    if b.frames.shape != (T, dv) or b.patches.shape != (T, M, dv):
        raise ValidationError(
            f"inconsistent feature shapes: audio {b.audio.shape}, "
            f"frames {b.frames.shape}, patches {b.patches.shape}")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<BHHHHHHH", b.task, T, M, da, dv, b.d_text, H, W)
    for arr in (b.audio, b.frames, b.patches):
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    raw = b.prompt_raw
    out += struct.pack("<HB", b.prompt_template, 0 if raw is None else 1)
    if raw is not None:
        if raw.shape != (b.d_text,):
            raise ValidationError(f"raw prompt must be ({b.d_text},), "
                                  f"got {raw.shape}")
        out += np.ascontiguousarray(raw, dtype="<f4").tobytes()
    out += _pack_labels(b, T, M, H, W)
    data = bytes(out)
    path.write_bytes(data)
    manifest = {
        "format": "avuf",
        "version": VERSION,
        "task": "unlabeled" if b.task == UNLABELED else Task(b.task).name,
        "n_segments": T,
        "n_patches": M,
        "d_audio": da,
        "d_visual": dv,
        "d_text": b.d_text,
        "mask_h": H,
        "mask_w": W,
        "prompt_template": int(b.prompt_template),
        "has_raw_prompt": raw is not None,
        "bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    Path(str(path) + ".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _pack_labels(b, T, M, H, W):
    if b.task == UNLABELED:
        return b""
    task = Task(b.task)
    lab = b.labels
    if lab is None:
        raise ValidationError(f"task {task.name} bundle has no labels")
    out = bytearray()
    if task == Task.AVE:
        arr = np.asarray(lab["events"], dtype=np.int64)
        K = int(lab["n_classes"])
        if arr.shape != (T,):
            raise ValidationError(f"event labels must be ({T},), got {arr.shape}")
        if arr.min(initial=0) < 0 or arr.max(initial=0) > K:
            raise ValidationError(f"event label outside 0..{K} (={K} background)")
        out += struct.pack("<H", K)
        out += arr.astype("<u2").tobytes()
    elif task == Task.AVVP:
        audible = np.asarray(lab["audible"], dtype=np.uint8)
        visible = np.asarray(lab["visible"], dtype=np.uint8)
        K = audible.shape[1]
        if audible.shape != (T, K) or visible.shape != (T, K):
            raise ValidationError("parsing labels must be two (T, K) grids")
        out += struct.pack("<H", K)
        out += audible.tobytes() + visible.tobytes()
    elif task == Task.SSL:
        arr = np.asarray(lab["bins"], dtype=np.int64)
        if arr.shape != (T,):
            raise ValidationError(f"localization labels must be ({T},)")
        enc = arr.astype("<u2")
        enc[arr < 0] = SILENT
        out += enc.tobytes()
    elif task == Task.AVS:
        masks = np.asarray(lab["masks"], dtype=np.uint8)
        if masks.ndim != 3 or masks.shape[1:] != (H, W):
            raise ValidationError(f"masks must be (n, {H}, {W}), got {masks.shape}")
        out += struct.pack("<H", masks.shape[0])
        out += masks.tobytes()
    elif task == Task.AVQA:
        out += struct.pack("<HHH", int(lab["n_answers"]), int(lab["answer"]),
                           int(lab["template"]))
    return bytes(out)


def read_bundle(path):
    """Parse a bundle file; FormatError on any structural problem."""
    path = Path(path)
    buf = path.read_bytes()
    r = _Reader(buf, str(path))
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a bundle file")
    version = r.u16("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    task = r.u8("task")
    if task not in (UNLABELED, *(int(t) for t in Task)):
        raise FormatError(f"{path}: unknown task id {task}")
    T = r.u16("n_segments")
    M = r.u16("n_patches")
    da = r.u16("d_audio")
    dv = r.u16("d_visual")
    dt = r.u16("d_text")
    H = r.u16("mask_h")
    W = r.u16("mask_w")
    if min(T, M, da, dv, dt, H, W) < 1:
        raise FormatError(f"{path}: zero-sized header field")
    audio = r.f32(T * da, (T, da), "audio features")
    frames = r.f32(T * dv, (T, dv), "frame features")
    patches = r.f32(T * M * dv, (T, M, dv), "patch features")
    template = r.u16("prompt template")
    has_raw = r.u8("raw prompt flag")
    raw = r.f32(dt, (dt,), "raw prompt") if has_raw else None
    labels = _unpack_labels(r, task, T, M, H, W)
    if r.off != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.off} trailing bytes")
    return Bundle(task=task, audio=audio, frames=frames, patches=patches,
                  prompt_template=template, prompt_raw=raw, d_text=dt,
                  mask_hw=(H, W), labels=labels)


def _unpack_labels(r, task, T, M, H, W):
    if task == UNLABELED:
        return None
    task = Task(task)
    if task == Task.AVE:
        K = r.u16("class count")
        raw = r.take(2 * T, "event labels")
        arr = np.frombuffer(raw, dtype="<u2").astype(np.int64)
        if arr.max(initial=0) > K:
            raise FormatError(f"{r.path}: event label above class count {K}")
        return {"events": arr, "n_classes": K}
    if task == Task.AVVP:
        K = r.u16("class count")
        audible = np.frombuffer(r.take(T * K, "audible grid"), dtype=np.uint8)
        visible = np.frombuffer(r.take(T * K, "visible grid"), dtype=np.uint8)
        if audible.max(initial=0) > 1 or visible.max(initial=0) > 1:
            raise FormatError(f"{r.path}: parsing grid is not 0/1")
        return {"audible": audible.reshape(T, K).astype(np.int64),
                "visible": visible.reshape(T, K).astype(np.int64)}
    if task == Task.SSL:
        arr = np.frombuffer(r.take(2 * T, "bin labels"), dtype="<u2").astype(np.int64)
        out = arr.copy()
        out[arr == SILENT] = -1
        if out.max(initial=-1) >= M:
            raise FormatError(f"{r.path}: bin label outside the {M}-patch grid")
        return {"bins": out}
    if task == Task.AVS:
        n = r.u16("mask count")
        if n < 1:
            raise FormatError(f"{r.path}: segmentation bundle with no mask")
        masks = np.frombuffer(r.take(n * H * W, "masks"), dtype=np.uint8)
        if masks.max(initial=0) > 1:
            raise FormatError(f"{r.path}: mask is not binary")
        return {"masks": masks.reshape(n, H, W).copy()}
    if task == Task.AVQA:
        n_ans = r.u16("answer count")
        ans = r.u16("answer")
        template = r.u16("question template")
        if ans >= n_ans:
            raise FormatError(f"{r.path}: answer {ans} outside {n_ans} choices")
        return {"n_answers": n_ans, "answer": ans, "template": template}


def validate_bundle(b: Bundle, config=None):
    """Semantic checks beyond parseability; raises ValidationError."""
    for name, arr in (("audio", b.audio), ("frames", b.frames),
                      ("patches", b.patches)):
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} features contain non-finite values")
    if b.prompt_raw is not None and not np.all(np.isfinite(b.prompt_raw)):
        raise ValidationError("raw prompt contains non-finite values")
    if config is not None:
        want = (config.n_segments, config.d_audio)
        if b.audio.shape != want:
            raise ValidationError(f"audio shape {b.audio.shape} != {want}")
        if b.frames.shape != (config.n_segments, config.d_visual):
            raise ValidationError(f"frame shape {b.frames.shape} unexpected")
        if b.patches.shape != (config.n_segments, config.n_patches,
                               config.d_visual):
            raise ValidationError(f"patch shape {b.patches.shape} unexpected")
        if b.d_text != config.d_text:
            raise ValidationError(f"d_text {b.d_text} != {config.d_text}")
        if b.mask_hw != (config.mask_hw, config.mask_hw):
            raise ValidationError(f"mask size {b.mask_hw} unexpected")
        if b.prompt_template >= config.n_templates:
            raise ValidationError(
                f"prompt template {b.prompt_template} outside "
                f"{config.n_templates} templates")
    return b


def project_inputs(b: Bundle, w_audio, w_visual):
    """Lift raw features into model width with learned projections.

    w_audio (D_a, C), w_visual (D_v, C). Returns DTensors: audio (T, C),
    frames (T, C), patches (T, M, C). Float64 from here on.
    """
    audio = tz.matmul(tz.tensor(b.audio.astype(np.float64)), w_audio)
    frames = tz.matmul(tz.tensor(b.frames.astype(np.float64)), w_visual)
    patches = tz.matmul(tz.tensor(b.patches.astype(np.float64)), w_visual)
    return {"audio": audio, "frames": frames, "patches": patches}
