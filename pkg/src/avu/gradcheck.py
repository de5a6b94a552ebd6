"""Finite-difference verification of every differentiable forward path.

Each module is run on small random inputs; every leaf tensor feeding the
forward (inputs and parameters) is compared element by element against a
central-difference gradient of the same scalar.  An element passes on
relative error <= rel_tol, or on absolute error <= abs_tol when the
relative test fails (tiny gradients drown in difference noise).
"""

import dataclasses

import numpy as np

from . import tensor as tz
from .attention import AttentionSite, attend
from .config import ModelConfig
from .decoder import MaskDecoder, TokenDecoder
from .prompting import PromptGuide
from .spatial import SpatialPerception
from .temporal import TemporalPerception
from .tensor import DTensor, Tape, backprop, finite_difference_gradient
from .tokens import Task, TokenVocab

SMALL = ModelConfig(n_segments=3, grid=2, d_model=6, d_audio=6,
                    d_visual=8, d_text=6, n_classes=2, mask_hw=8,
                    max_scale=2, mask_channels=4)


@dataclasses.dataclass
class CheckResult:
    module: str
    n_elements: int = 0
    n_rel_ok: int = 0
    n_rescued: int = 0
    n_failed: int = 0
    worst_rel: float = 0.0

    @property
    def passed(self):
        if self.n_elements == 0:
            return False
        frac = self.n_rel_ok / self.n_elements
        return frac >= 0.95 and self.n_failed == 0

    def add(self, analytic, fd, rel_tol, abs_tol):
        diff = np.abs(analytic - fd)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)),
                           1e-12)
        rel = diff / denom
        rel_ok = rel <= rel_tol
        rescued = ~rel_ok & (diff <= abs_tol)
        self.n_elements += rel.size
        self.n_rel_ok += int(rel_ok.sum())
        self.n_rescued += int(rescued.sum())
        self.n_failed += int((~rel_ok & ~rescued).sum())
        self.worst_rel = max(self.worst_rel, float(rel.max()))

    def line(self):
        status = "pass" if self.passed else "FAIL"
        frac = self.n_rel_ok / max(self.n_elements, 1)
        return (f"{self.module:12s} {status}  elements={self.n_elements}"
                f" rel_ok={frac:.4f} rescued={self.n_rescued}"
                f" failed={self.n_failed} worst_rel={self.worst_rel:.2e}")


def _kink_margin(forward):
    """Smallest |relu input| seen during one taped forward pass."""
    worst = np.inf
    with Tape() as tape:
        forward()
        for node in tape.nodes:
            if node.kind == "relu":
                x = tape.tensors[node.input_ids[0]].data
                if x.size:
                    worst = min(worst, float(np.abs(x).min()))
    return worst


def _check(result, forward, leaves, rng, eps, rel_tol, abs_tol,
           rebuild=None):
    """Compare tape gradients of sum(forward * cot) against differences."""
    if rebuild is not None:
        # a central difference is meaningless when the +-eps probe can
        # push a relu input across zero, so resample the check point
        # until every preactivation clears the probe window; the guard
        # covers the worst fan-in amplification of a single perturbed
        # element
        for _ in range(50):
            if _kink_margin(forward) >= 100.0 * eps:
                break
            forward, leaves = rebuild()
    cot = rng.normal(size=forward().data.shape)
    for leaf in leaves.values():
        leaf.grad = None
    with Tape():
        out = forward()
        backprop(tz.sum_axis(tz.mul(out, DTensor(cot))))
    for name, leaf in leaves.items():
        analytic = leaf.grad.copy()

        def f(t, _leaf=leaf):
            keep = _leaf.data
            _leaf.data = t.data
            try:
                return float((forward().data * cot).sum())
            finally:
                _leaf.data = keep
        fd = finite_difference_gradient(f, leaf, eps).data
        result.add(analytic, fd, rel_tol, abs_tol)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def _check_primitives(result, rng, eps, rel_tol, abs_tol):
    a = DTensor(rng.normal(size=(3, 4)))
    b = DTensor(rng.normal(size=(4, 2)))
    c = DTensor(rng.normal(size=(3, 4)))
    row = DTensor(rng.normal(size=(4,)))
    kinked = DTensor(_away_from_zero(rng, (3, 4)))
    img = DTensor(rng.normal(size=(1, 2, 4, 4)))
    kern = DTensor(rng.normal(size=(2, 2, 3, 3)))
    table = DTensor(rng.normal(size=(5, 3)))
    ids = np.array([0, 2, 4, 1])
    gain = DTensor(rng.normal(size=(4,)))
    bias = DTensor(rng.normal(size=(4,)))
    targets = np.array([1, 0, 3])
    tmask = np.array([1.0, 0.0, 1.0])
    bt = (rng.random((3, 4)) > 0.5).astype(float)
    smask = np.zeros((3, 4))
    smask[:, -1] = -np.inf
    cases = [
        ({"a": a, "b": b}, lambda: tz.matmul(a, b)),
        ({"a": a, "row": row}, lambda: tz.add(a, row)),
        ({"a": a, "c": c}, lambda: tz.mul(a, c)),
        ({"a": a}, lambda: tz.scale(a, -1.7)),
        ({"a": a, "c": c}, lambda: tz.concat_axis([a, c], axis=-1)),
        ({"a": a}, lambda: tz.slice_axis(a, axis=1, start=1, stop=3)),
        ({"a": a}, lambda: tz.transpose(a, (1, 0))),
        ({"a": a}, lambda: tz.reshape(a, (2, 6))),
        ({"kinked": kinked}, lambda: tz.relu(kinked)),
        ({"a": a}, lambda: tz.sigmoid(a)),
        ({"a": a}, lambda: tz.softmax_lastdim(a)),
        ({"a": a}, lambda: tz.softmax_lastdim(tz.add(a, DTensor(smask)))),
        ({"a": a}, lambda: tz.mean_axis(a, axis=0)),
        ({"a": a}, lambda: tz.sum_axis(a, axis=1)),
        ({"a": a}, lambda: tz.cross_entropy(a, targets)),
        ({"a": a}, lambda: tz.cross_entropy(a, targets, mask=tmask)),
        ({"a": a}, lambda: tz.binary_cross_entropy(a, bt)),
        ({"table": table}, lambda: tz.embed_lookup(table, ids)),
        ({"a": a, "gain": gain, "bias": bias},
         lambda: tz.layer_norm(a, gain, bias)),
        ({"img": img, "kern": kern},
         lambda: tz.conv2d(img, kern, stride=1, padding=1)),
        ({"img": img}, lambda: tz.upsample2x(img)),
    ]
    for leaves, forward in cases:
        _check(result, forward, leaves, rng, eps, rel_tol, abs_tol)


def _check_attend(result, rng, eps, rel_tol, abs_tol):
    site = AttentionSite(rng, d_model=6, name="gc", n_heads=2)
    q = DTensor(rng.normal(size=(2, 3, 6)))
    c = DTensor(rng.normal(size=(2, 4, 6)))
    mask = np.zeros((3, 4))
    mask[0, -1] = -np.inf
    leaves = {"q": q, "c": c, "wq": site.wq, "wk": site.wk,
              "wv": site.wv}
    _check(result, lambda: attend(site, q, c, mask=mask)[0], leaves,
           rng, eps, rel_tol, abs_tol)


def _check_temporal(result, rng, eps, rel_tol, abs_tol):
    tp = TemporalPerception(rng, SMALL)
    a = DTensor(rng.normal(size=(SMALL.n_segments, SMALL.d_model)))
    v = DTensor(rng.normal(size=(SMALL.n_segments, SMALL.d_model)))
    leaves = {"a": a, "v": v, **tp.params()}
    _check(result, lambda: tz.add(*tp(a, v)), leaves, rng, eps,
           rel_tol, abs_tol)


def _check_spatial(result, rng, eps, rel_tol, abs_tol):
    sp = SpatialPerception(rng, SMALL)
    T, M, C = SMALL.n_segments, SMALL.n_patches, SMALL.d_model
    patches = DTensor(rng.normal(size=(T, M, C)))
    a_raw = DTensor(rng.normal(size=(T, C)))
    a_tpm = DTensor(rng.normal(size=(T, C)))
    leaves = {"patches": patches, "a_raw": a_raw, "a_tpm": a_tpm,
              **sp.params()}

    def forward():
        p, a = sp(patches, a_raw, a_tpm)
        return tz.concat_axis([tz.reshape(p, (T * M * C,)),
                               tz.reshape(a, (T * C,))], axis=0)
    _check(result, forward, leaves, rng, eps, rel_tol, abs_tol)


def _check_prompting(result, rng, eps, rel_tol, abs_tol):
    T, M, C = SMALL.n_segments, SMALL.n_patches, SMALL.d_model

    def build():
        pg = PromptGuide(rng, SMALL)
        t_seq = DTensor(rng.normal(size=(1, 2 * T, C)))
        s_seq = DTensor(rng.normal(size=(1, T, M + 1, C)))
        prompt = DTensor(rng.normal(size=(1, SMALL.d_text)))

        def forward():
            out_t, out_s, _, _ = pg(t_seq, s_seq, prompt)
            return tz.concat_axis(
                [tz.reshape(out_t, (2 * T * C,)),
                 tz.reshape(out_s, (T * (M + 1) * C,))], axis=0)
        return forward, {"t_seq": t_seq, "s_seq": s_seq,
                         "prompt": prompt, **pg.params()}
    forward, leaves = build()
    _check(result, forward, leaves, rng, eps, rel_tol, abs_tol,
           rebuild=build)


def _check_decoder(result, rng, eps, rel_tol, abs_tol):
    vocab = TokenVocab(SMALL.n_classes, SMALL.n_patches, SMALL.n_answers)
    L = SMALL.unified_length
    prefix = np.array([[vocab.BOS, vocab.task_id(Task.AVE),
                        vocab.cls_base, vocab.SEP]])
    blocks = np.zeros(L, dtype=np.int64)
    segments = np.zeros(L, dtype=np.int64)
    slots = np.zeros(L, dtype=np.int64)

    def build():
        dec = TokenDecoder(rng, SMALL, vocab)
        unified = DTensor(rng.normal(size=(1, L, SMALL.d_model)))

        def forward():
            annotated = dec.annotate_unified(unified, blocks, segments,
                                             slots)
            return dec.logits(prefix, annotated)
        return forward, {"unified": unified, **dec.params()}
    forward, leaves = build()
    _check(result, forward, leaves, rng, eps, rel_tol, abs_tol,
           rebuild=build)


def _check_mask_decoder(result, rng, eps, rel_tol, abs_tol):
    def build():
        md = MaskDecoder(rng, SMALL)
        rows = DTensor(rng.normal(size=(1, SMALL.n_patches,
                                        SMALL.d_model)))
        audio = DTensor(rng.normal(size=(1, SMALL.d_model)))
        return (lambda: md(rows, audio),
                {"rows": rows, "audio": audio, **md.params()})
    forward, leaves = build()
    _check(result, forward, leaves, rng, eps, rel_tol, abs_tol,
           rebuild=build)


_MODULES = [
    ("primitives", _check_primitives),
    ("attend", _check_attend),
    ("temporal", _check_temporal),
    ("spatial", _check_spatial),
    ("prompting", _check_prompting),
    ("decoder", _check_decoder),
    ("mask_decoder", _check_mask_decoder),
]


def run_gradcheck(seeds=20, eps=1e-5, rel_tol=1e-4, abs_tol=1e-6):
    """Run every module check over `seeds` seeds; one result per module."""
    results = []
    for index, (name, check) in enumerate(_MODULES):
        result = CheckResult(module=name)
        for seed in range(seeds):
            rng = np.random.default_rng(7_700_000 + 1000 * index + seed)
            check(result, rng, eps, rel_tol, abs_tol)
        results.append(result)
    return results
