"""File outputs: figures, portable grey maps, and text dumps.

Everything here renders to files; nothing draws on screen.  Figures go
through the Agg backend so headless runs behave the same as local ones.
"""

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import FormatError, ShapeError
from .tokens import Task

_TASK_COLORS = {0: "#1f77b4", 1: "#ff7f0e", 2: "#2ca02c",
                3: "#d62728", 4: "#9467bd"}


def save_loss_figure(path, curve, window=25):
    """Loss-vs-iteration scatter per task with a running mean overlay."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    by_task = {}
    for it, tid, loss in curve:
        by_task.setdefault(tid, []).append((it, loss))
    for tid in sorted(by_task):
        pts = np.array(by_task[tid])
        color = _TASK_COLORS.get(tid, "#333333")
        ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.25, color=color)
        if len(pts) >= window:
            kernel = np.ones(window) / window
            smooth = np.convolve(pts[:, 1], kernel, mode="valid")
            ax.plot(pts[window - 1:, 0], smooth, color=color,
                    label=Task(tid).name)
        else:
            ax.plot(pts[:, 0], pts[:, 1], color=color,
                    label=Task(tid).name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_figure(path, report):
    """Horizontal bars, one per metric, on a fixed [0, 1] axis."""
    items = sorted(report.as_dict().items())
    if not items:
        raise ShapeError("empty metric report")
    names = [k for k, _ in items]
    vals = [v for _, v in items]
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(items) + 1.2))
    y = np.arange(len(items))
    ax.barh(y, vals, color="#4c72b0")
    ax.set_yticks(y, names, fontsize=8)
    ax.set_xlim(0, 1)
    ax.invert_yaxis()
    for yi, v in zip(y, vals):
        ax.text(min(v + 0.01, 0.93), yi, f"{v:.3f}",
                va="center", fontsize=7)
    ax.set_xlabel("value")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_heatmap_figure(path, heatmap, grid):
    """Per-segment attention cells, (T, M) -> a row of g x g panels."""
    heat = np.asarray(heatmap, dtype=float)
    if heat.ndim == 1:
        heat = heat[None, :]
    T = heat.shape[0]
    cols = min(T, 5)
    rows = (T + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols,
                             figsize=(1.6 * cols, 1.6 * rows),
                             squeeze=False)
    vmax = float(heat.max()) or 1.0
    for t in range(rows * cols):
        ax = axes[t // cols][t % cols]
        ax.set_xticks([])
        ax.set_yticks([])
        if t < T:
            ax.imshow(heat[t].reshape(grid, grid), vmin=0.0, vmax=vmax,
                      cmap="magma")
            ax.set_title(f"t={t}", fontsize=7)
        else:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_mask_figure(path, masks, truth=None):
    """Binary masks per segment; optional second row with the target."""
    pred = np.asarray(masks)
    if pred.ndim == 2:
        pred = pred[None]
    T = pred.shape[0]
    rows = 2 if truth is not None else 1
    fig, axes = plt.subplots(rows, T, figsize=(1.6 * T, 1.6 * rows),
                             squeeze=False)
    for t in range(T):
        axes[0][t].imshow(pred[t], vmin=0, vmax=1, cmap="gray")
        axes[0][t].set_title(f"t={t}", fontsize=7)
        axes[0][t].set_xticks([])
        axes[0][t].set_yticks([])
        if truth is not None:
            axes[1][t].imshow(np.asarray(truth), vmin=0, vmax=1,
                              cmap="gray")
            axes[1][t].set_xticks([])
            axes[1][t].set_yticks([])
    axes[0][0].set_ylabel("pred", fontsize=8)
    if truth is not None:
        axes[1][0].set_ylabel("truth", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_pgm(path, array, maxval=None):
    """Binary (P5) portable grey map; pixel values are ids as stored."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ShapeError(f"PGM wants a 2-d array, got {arr.shape}")
    if arr.min() < 0:
        raise ShapeError("PGM pixels must be nonnegative")
    if maxval is None:
        maxval = max(int(arr.max()), 1)
    if not 0 < maxval < 256:
        raise ShapeError(f"maxval {maxval} outside PGM byte range")
    if arr.max() > maxval:
        raise ShapeError("pixel value above maxval")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    data = parts[3]
    if len(data) != w * h:
        raise FormatError("PGM payload size mismatch")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w), maxval


def write_program_text(path, ids, vocab):
    """Token program as whitespace-separated token names, one line."""
    names = " ".join(vocab.name(int(i)) for i in ids)
    with open(path, "w") as fh:
        fh.write(names + "\n")


def write_report_json(path, report, meta=None):
    payload = {"metrics": report.as_dict()}
    if meta:
        payload["meta"] = dict(meta)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_gain_dump(path, gain_temporal, gain_spatial):
    """Prompt-gain table for one clip: stream, segment, slot, gain."""
    g_t = np.asarray(gain_temporal)
    g_s = np.asarray(gain_spatial)
    if g_t.ndim == 2:
        g_t = g_t[0]
    if g_s.ndim == 3:
        g_s = g_s[0]
    T = g_t.shape[0] // 2
    lines = ["stream\tsegment\tslot\tgain"]
    for t in range(T):
        lines.append(f"temporal_audio\t{t}\t-\t{g_t[t]:.6f}")
    for t in range(T):
        lines.append(f"temporal_visual\t{t}\t-\t{g_t[T + t]:.6f}")
    for t in range(g_s.shape[0]):
        lines.append(f"spatial\t{t}\taudio\t{g_s[t, 0]:.6f}")
        for m in range(g_s.shape[1] - 1):
            lines.append(f"spatial\t{t}\tp{m:02d}\t{g_s[t, m + 1]:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
