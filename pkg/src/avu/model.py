"""The unified audio-visual model: one encoder trunk, one token decoder.

Pipeline per batch of clips (homogeneous in task): project features to
model width; refine segment tokens with the multi-scale temporal stage;
refine patch tokens and re-ground audio with the spatial stage; weight
every token by prompt relevance; serialize to the unified sequence; and
train the shared decoder on the task's token program. Segmentation adds
the mask decoder on the weighted spatial rows; localization adds a
heatmap alignment term so the patch-audio affinity map means something.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .decoder import MaskDecoder, TokenDecoder, heatmap_logits, heatmap_region
from .errors import ContractError, ValidationError
from .metrics import binarize_logits
from .prompting import PromptGuide, serialize_unified, template_vector
from .spatial import SpatialPerception
from .temporal import TemporalPerception
from .tensor import DTensor
from .tokens import Task, TokenVocab, decode_tokens, encode_labels


def token_payload(task, labels):
    """Bundle label dict -> the payload `encode_labels` expects."""
    task = Task(task)
    if task == Task.AVE:
        return labels["events"]
    if task == Task.AVVP:
        return (labels["audible"], labels["visible"])
    if task == Task.SSL:
        return labels["bins"]
    if task == Task.AVS:
        return {}
    return {"answer": labels["answer"]}


class UnifiedModel:
    """All parameters plus the forward/loss/predict entry points."""

    def __init__(self, config: ModelConfig = None, seed=0):
        self.config = config or ModelConfig()
        cfg = self.config
        self.seed = int(seed)
        rng = np.random.default_rng(31_337_000 + self.seed)
        C = cfg.d_model
        self.w_audio = DTensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.d_audio), (cfg.d_audio, C)),
            name="input.w_audio")
        self.w_visual = DTensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.d_visual), (cfg.d_visual, C)),
            name="input.w_visual")
        self.temporal = TemporalPerception(rng, cfg)
        self.spatial = SpatialPerception(rng, cfg)
        self.prompt = PromptGuide(rng, cfg)
        self.vocab = TokenVocab(cfg.n_classes, cfg.n_patches, cfg.n_answers)
        self.decoder = TokenDecoder(rng, cfg, self.vocab)
        self.mask_decoder = MaskDecoder(rng, cfg)
        # parsing head: per-segment class-presence logits used only as an
        # auxiliary loss; audible evidence is already pooled per segment
        # but visible evidence is spread over the patch rows, and without
        # this shaping the decoder learns the visual half far too slowly
        K, std = cfg.n_classes, 1.0 / np.sqrt(C)
        self.parse_wa = DTensor(rng.normal(0.0, std, (C, K)), name="parse.wa")
        self.parse_wv = DTensor(rng.normal(0.0, std, (C, K)), name="parse.wv")
        self.parse_wp = DTensor(rng.normal(0.0, std, (C, K)), name="parse.wp")
        self.parse_ba = DTensor(np.zeros(K), name="parse.ba")
        self.parse_bv = DTensor(np.zeros(K), name="parse.bv")

    # ----- parameters ----------------------------------------------------

    def params(self):
        out = {"input.w_audio": self.w_audio, "input.w_visual": self.w_visual,
               "parse.wa": self.parse_wa, "parse.wv": self.parse_wv,
               "parse.wp": self.parse_wp, "parse.ba": self.parse_ba,
               "parse.bv": self.parse_bv}
        for mod in (self.temporal, self.spatial, self.prompt, self.decoder,
                    self.mask_decoder):
            for name, p in mod.params().items():
                if name in out:
                    raise ContractError(f"duplicate parameter name {name}")
                out[name] = p
        return out

    def zero_grads(self):
        for p in self.params().values():
            p.zero_grad()

    def n_params(self):
        return sum(p.size for p in self.params().values())

    # ----- forward -------------------------------------------------------

    def prompt_vector(self, bundle):
        if bundle.prompt_raw is not None:
            return bundle.prompt_raw.astype(np.float64)
        return template_vector(bundle.prompt_template, self.config.d_text)

    def encode_bundles(self, bundles):
        """Shared trunk over a list of same-shaped bundles.

        Returns a context dict with the annotated unified sequence and
        the intermediate streams the heads need.
        """
        if not bundles:
            raise ContractError("encode_bundles on an empty batch")
        cfg = self.config
        B = len(bundles)
        audio = np.stack([b.audio for b in bundles]).astype(np.float64)
        frames = np.stack([b.frames for b in bundles]).astype(np.float64)
        patches = np.stack([b.patches for b in bundles]).astype(np.float64)
        prompts = np.stack([self.prompt_vector(b) for b in bundles])
        T, M, C = cfg.n_segments, cfg.n_patches, cfg.d_model
        if audio.shape != (B, T, cfg.d_audio):
            raise ValidationError(f"audio batch shape {audio.shape} unexpected")

        audio_c = tz.matmul(DTensor(audio), self.w_audio)
        frames_c = tz.matmul(DTensor(frames), self.w_visual)
        patches_c = tz.matmul(DTensor(patches), self.w_visual)

        a_bar, v_bar = self.temporal(audio_c, frames_c)
        patch_out, audio_sp = self.spatial(patches_c, audio_c, a_bar)

        temporal_seq = tz.concat_axis([a_bar, v_bar], axis=1)
        spatial_seq = tz.concat_axis(
            [tz.reshape(audio_sp, (B, T, 1, C)), patch_out], axis=2)
        w_temp, w_spat, gain_t, gain_s = self.prompt(
            temporal_seq, spatial_seq, DTensor(prompts))
        unified, block, segment, slot = serialize_unified(w_temp, w_spat)
        annotated = self.decoder.annotate_unified(unified, block, segment, slot)
        return {
            "unified": annotated,
            "patch_out": patch_out,
            "audio_sp": audio_sp,
            "temporal_audio": a_bar,
            "temporal_visual": v_bar,
            "spatial_weighted": w_spat,
            "gain_temporal": gain_t,
            "gain_spatial": gain_s,
        }

    # ----- training losses ----------------------------------------------

    def programs_for(self, task, bundles):
        """Padded (B, P) id array of gold token programs."""
        progs = [encode_labels(task, token_payload(task, b.labels),
                               self.vocab, self.config.n_segments)
                 for b in bundles]
        P = max(len(p) for p in progs)
        out = np.full((len(progs), P), self.vocab.PAD, dtype=np.int64)
        for i, p in enumerate(progs):
            out[i, :len(p)] = p
        return out

    def task_loss(self, task, bundles, ctx=None):
        """Scalar loss for one homogeneous batch; also returns parts."""
        task = Task(task)
        for b in bundles:
            if b.task != int(task):
                raise ContractError(
                    f"batch is not homogeneous: bundle task {b.task} in a "
                    f"{task.name} batch")
        if ctx is None:
            ctx = self.encode_bundles(bundles)
        ids = self.programs_for(task, bundles)
        inputs, targets = ids[:, :-1], ids[:, 1:]
        pad_mask = (targets != self.vocab.PAD).astype(np.float64)
        logits = self.decoder.logits(inputs, ctx["unified"])
        loss = tz.cross_entropy(logits, targets, mask=pad_mask)
        parts = {"tokens": float(loss.data)}

        if task == Task.AVVP:
            audible = np.stack([b.labels["audible"]
                                for b in bundles]).astype(np.float64)
            visible = np.stack([b.labels["visible"]
                                for b in bundles]).astype(np.float64)
            pooled = tz.mean_axis(ctx["patch_out"], axis=2)
            alog = tz.add(tz.matmul(ctx["temporal_audio"], self.parse_wa),
                          self.parse_ba)
            vlog = tz.add(
                tz.add(tz.matmul(ctx["temporal_visual"], self.parse_wv),
                       tz.matmul(pooled, self.parse_wp)),
                self.parse_bv)
            # both halves outweigh the token loss; the visible half is
            # heaviest because its evidence is diluted across patch
            # rows, while the audible half still needs enough weight to
            # keep the clean per-segment audio signal pinned down
            aux = tz.add(tz.scale(tz.binary_cross_entropy(alog, audible),
                                  2.0),
                         tz.scale(tz.binary_cross_entropy(vlog, visible),
                                  3.0))
            parts["parse"] = float(aux.data)
            loss = tz.add(loss, aux)
        elif task == Task.SSL:
            bins = np.stack([b.labels["bins"] for b in bundles])
            sounding = (bins >= 0).astype(np.float64)
            if sounding.sum() > 0:
                heat = heatmap_logits(ctx["patch_out"], ctx["audio_sp"])
                align = tz.cross_entropy(heat, np.maximum(bins, 0),
                                         mask=sounding)
                parts["heatmap"] = float(align.data)
                loss = tz.add(loss, align)
        elif task == Task.AVS:
            sw = ctx["spatial_weighted"]
            B = sw.shape[0]
            C = self.config.d_model
            seg0 = tz.slice_axis(sw, 1, 0, 1)
            seg0 = tz.reshape(seg0, (B, self.config.n_patches + 1, C))
            patch_rows = tz.slice_axis(seg0, 1, 1, self.config.n_patches + 1)
            audio_row = tz.reshape(tz.slice_axis(seg0, 1, 0, 1), (B, C))
            mask_logits = self.mask_decoder(patch_rows, audio_row)
            truth = np.stack([b.labels["masks"][0] for b in bundles])
            bce = tz.binary_cross_entropy(mask_logits,
                                          truth.astype(np.float64))
            parts["mask"] = float(bce.data)
            loss = tz.add(loss, bce)
        return loss, parts

    # ----- prediction ----------------------------------------------------

    def decode_masks(self, ctx):
        """(T, H, W) mask logits for the single clip in `ctx`."""
        sw = ctx["spatial_weighted"]
        B, T, M1, C = sw.shape
        if B != 1:
            raise ContractError("decode_masks expects a single-clip context")
        out = []
        for t in range(T):
            seg = tz.reshape(tz.slice_axis(sw, 1, t, t + 1), (1, M1, C))
            patch_rows = tz.slice_axis(seg, 1, 1, M1)
            audio_row = tz.reshape(tz.slice_axis(seg, 1, 0, 1), (1, C))
            out.append(self.mask_decoder(patch_rows, audio_row).data[0])
        return np.stack(out)

    def predict(self, bundle):
        """Full prediction for one clip, keyed by task."""
        task = Task(bundle.task)
        ctx = self.encode_bundles([bundle])
        ids = self.decoder.greedy_decode(task, ctx["unified"])
        decoded = decode_tokens(task, ids, self.vocab,
                                self.config.n_segments)
        out = {"task": task, "program": ids}
        if task == Task.AVE:
            out["events"] = decoded
        elif task == Task.AVVP:
            out["audible"], out["visible"] = decoded
        elif task == Task.SSL:
            heat = heatmap_logits(ctx["patch_out"], ctx["audio_sp"]).data[0]
            e = np.exp(heat - heat.max(axis=-1, keepdims=True))
            out["bins"] = decoded
            out["heatmap"] = e / e.sum(axis=-1, keepdims=True)
            out["regions"] = np.stack([
                heatmap_region(row, self.config.grid, self.config.mask_hw)
                for row in out["heatmap"]])
        elif task == Task.AVS:
            logits = self.decode_masks(ctx)
            out["mask_logits"] = logits
            out["masks"] = binarize_logits(logits).astype(np.uint8)
        else:
            out["answer"] = decoded["answer"]
        return out
