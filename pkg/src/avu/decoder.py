"""Decoding heads: the shared token-program decoder, the segmentation
mask decoder, and the localization heatmap readout.

The token decoder is one causal block: program-prefix self-attention,
cross-attention over the unified token sequence, and a two-layer MLP,
each step residual with optional layer norm. Positions enter as learned
embeddings outside the attention primitives: prefix slots get a program
position and a segment counter (how many separators precede them, which
is what aligns variable-length parsing programs), unified rows get
block/segment/slot lookups from their provenance.

Greedy decoding is grammar-constrained: ungrammatical continuations are
set to -inf before the argmax, so any model state yields a parseable
program.

The mask decoder turns one segment's patch row grid (plus its audio row)
into full-resolution logits through nearest-upsample + 3x3 conv stages.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tz
from .attention import AttentionSite, attend, causal_mask
from .errors import ContractError, ShapeError
from .tensor import DTensor
from .tokens import Task, grammar_mask


def max_program_length(config):
    """Worst-case program length over tasks (the parsing grammar admits
    one pair per (modality, class) per segment)."""
    per_segment = 6 * config.n_classes + 1
    return 3 + config.n_segments * per_segment


def sep_counts(prefix_ids, sep_id):
    """Per-position count of separators strictly before each slot."""
    ids = np.asarray(prefix_ids)
    seps = (ids == sep_id).astype(np.int64)
    shifted = np.zeros_like(seps)
    shifted[..., 1:] = np.cumsum(seps, axis=-1)[..., :-1]
    return shifted


class TokenDecoder:
    """Single-block causal decoder over the shared vocabulary."""

    def __init__(self, rng, config, vocab):
        self.config = config
        self.vocab = vocab
        C = config.d_model
        V = vocab.size
        P = max_program_length(config)
        self.max_len = P

        def table(shape, name, std=None):
            std = 1.0 / math.sqrt(shape[-1]) if std is None else std
            return DTensor(rng.normal(0.0, std, shape), name=name)

        self.tok_emb = table((V, C), "decoder.tok_emb")
        self.pos_emb = table((P, C), "decoder.pos_emb")
        self.segctr_emb = table((config.n_segments + 1, C), "decoder.segctr_emb")
        self.block_emb = table((3, C), "decoder.block_emb")
        self.rowseg_emb = table((config.n_segments, C), "decoder.rowseg_emb")
        self.slot_emb = table((config.n_patches + 1, C), "decoder.slot_emb")
        self.self_site = AttentionSite(rng, C, "decoder.self",
                                       n_heads=config.n_heads)
        self.cross_site = AttentionSite(rng, C, "decoder.cross",
                                        n_heads=config.n_heads)
        hidden = 4 * C
        self.ffn_w1 = table((C, hidden), "decoder.ffn_w1")
        self.ffn_b1 = DTensor(np.zeros(hidden), name="decoder.ffn_b1")
        self.ffn_w2 = table((hidden, C), "decoder.ffn_w2")
        self.ffn_b2 = DTensor(np.zeros(C), name="decoder.ffn_b2")
        self.out_proj = table((C, V), "decoder.out_proj")
        self.lns = {}
        if config.decoder_layernorm:
            for tag in ("ln1", "ln2", "ln3"):
                self.lns[tag] = (
                    DTensor(np.ones(C), name=f"decoder.{tag}.gain"),
                    DTensor(np.zeros(C), name=f"decoder.{tag}.bias"))

    def _ln(self, tag, x):
        if tag not in self.lns:
            return x
        gain, bias = self.lns[tag]
        return tz.layer_norm(x, gain, bias)

    def annotate_unified(self, unified, block, segment, slot):
        """Add provenance embeddings to unified rows (B, L, C)."""
        pe = tz.add(tz.embed_lookup(self.block_emb, block),
                    tz.add(tz.embed_lookup(self.rowseg_emb, segment),
                           tz.embed_lookup(self.slot_emb, slot)))
        return tz.add(unified, pe)

    def logits(self, prefix_ids, unified_annotated):
        """Teacher-forced next-token logits.

        prefix_ids (B, P) int; unified_annotated (B, L, C) from
        `annotate_unified`. Returns (B, P, V).
        """
        ids = np.asarray(prefix_ids)
        if ids.ndim != 2:
            raise ShapeError(f"prefix ids must be (B, P), got {ids.shape}")
        B, P = ids.shape
        if P > self.max_len:
            raise ShapeError(f"program length {P} exceeds decoder "
                             f"capacity {self.max_len}")
        h = tz.embed_lookup(self.tok_emb, ids)
        h = tz.add(h, tz.embed_lookup(self.pos_emb, np.arange(P)))
        ctr = np.minimum(sep_counts(ids, self.vocab.SEP),
                         self.config.n_segments)
        h = tz.add(h, tz.embed_lookup(self.segctr_emb, ctr))
        sa, _ = attend(self.self_site, h, h, mask=causal_mask(P))
        h = self._ln("ln1", tz.add(h, sa))
        ca, _ = attend(self.cross_site, h, unified_annotated)
        h = self._ln("ln2", tz.add(h, ca))
        mid = tz.relu(tz.add(tz.matmul(h, self.ffn_w1), self.ffn_b1))
        ff = tz.add(tz.matmul(mid, self.ffn_w2), self.ffn_b2)
        h = self._ln("ln3", tz.add(h, ff))
        return tz.matmul(h, self.out_proj)

    def greedy_decode(self, task, unified_annotated, max_steps=None):
        """Grammar-constrained greedy decoding for one clip.

        unified_annotated (1, L, C) or (L, C). Returns the full program
        id list including BOS and EOS.
        """
        if unified_annotated.ndim == 2:
            u = tz.reshape(unified_annotated,
                           (1,) + tuple(unified_annotated.shape))
        else:
            u = unified_annotated
        task = Task(task)
        ids = [self.vocab.BOS, self.vocab.task_id(task)]
        limit = max_steps or self.max_len
        while len(ids) < limit:
            allowed = grammar_mask(task, ids, self.vocab,
                                   self.config.n_segments)
            if not allowed.any():
                break
            logits = self.logits(np.array([ids]), u)
            row = logits.data[0, -1].copy()
            row[~allowed] = -np.inf
            ids.append(int(np.argmax(row)))
            if ids[-1] == self.vocab.EOS:
                break
        if ids[-1] != self.vocab.EOS:
            raise ContractError("decoding hit the length limit before EOS")
        return ids

    def params(self):
        out = {t.name: t for t in (
            self.tok_emb, self.pos_emb, self.segctr_emb, self.block_emb,
            self.rowseg_emb, self.slot_emb, self.ffn_w1, self.ffn_b1,
            self.ffn_w2, self.ffn_b2, self.out_proj)}
        out.update(self.self_site.params())
        out.update(self.cross_site.params())
        for gain, bias in self.lns.values():
            out[gain.name] = gain
            out[bias.name] = bias
        return out


class MaskDecoder:
    """Patch-grid to pixel-mask upsampling head (segmentation only)."""

    def __init__(self, rng, config):
        self.config = config
        C, ch, g, H = (config.d_model, config.mask_channels, config.grid,
                       config.mask_hw)
        self.n_stages = int(round(math.log2(H // g)))
        if g * 2 ** self.n_stages != H:
            raise ShapeError(f"mask size {H} not reachable from grid {g} "
                             f"by doubling")

        def conv(cin, cout, k, name):
            std = 1.0 / math.sqrt(cin * k * k)
            return (DTensor(rng.normal(0.0, std, (cout, cin, k, k)),
                            name=f"{name}.w"),
                    DTensor(np.zeros(cout), name=f"{name}.b"))

        self.stem = conv(C, ch, 1, "maskdec.stem")
        self.stages = [conv(ch, ch, 3, f"maskdec.up{i}")
                       for i in range(self.n_stages)]
        self.head = conv(ch, 1, 1, "maskdec.head")

    def __call__(self, patch_rows, audio_row):
        """patch_rows (B, M, C) + audio_row (B, C) -> logits (B, H, W)."""
        B, M, C = patch_rows.shape
        g = self.config.grid
        if M != g * g:
            raise ShapeError(f"{M} patch rows do not fill a {g}x{g} grid")
        mixed = tz.add(patch_rows, tz.reshape(audio_row, (B, 1, C)))
        # rows are stored row-major over the grid
        x = tz.transpose(tz.reshape(mixed, (B, g, g, C)), (0, 3, 1, 2))
        x = tz.relu(tz.conv2d(x, *self.stem))
        for w, b in self.stages:
            x = tz.relu(tz.conv2d(tz.upsample2x(x), w, b, padding=1))
        x = tz.conv2d(x, *self.head)
        H = self.config.mask_hw
        return tz.reshape(x, (B, H, H))

    def params(self):
        out = {}
        for w, b in [self.stem, *self.stages, self.head]:
            out[w.name] = w
            out[b.name] = b
        return out


def heatmap_logits(patch_out, audio_out):
    """Patch-audio affinity logits (..., T, M) from the spatial stage."""
    C = patch_out.shape[-1]
    q = tz.reshape(audio_out, audio_out.shape[:-1] + (1, C))
    dots = tz.matmul(patch_out, tz.transpose(q))
    return tz.scale(tz.reshape(dots, patch_out.shape[:-1]),
                    1.0 / math.sqrt(C))


def heatmap_region(heat_row, grid, hw, rel_threshold=0.5):
    """Binary localization region from one segment's heatmap (M,).

    Nearest-upsamples the cell map to hw x hw and keeps pixels at or
    above rel_threshold times the maximum.
    """
    h = np.asarray(heat_row, dtype=np.float64).reshape(grid, grid)
    scale = hw // grid
    up = np.repeat(np.repeat(h, scale, axis=0), scale, axis=1)
    return (up >= rel_threshold * up.max()).astype(np.uint8)
