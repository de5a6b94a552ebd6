"""Token vocabulary, per-task output programs, and their grammars.

Every task's answer is a short token program over one shared vocabulary:

    event localization   BOS TASK  c_1 .. c_T  EOS      (c_t a class token)
    video parsing        BOS TASK  [pairs] SEP  x T  EOS
    sound localization   BOS TASK  b_1 .. b_T  EOS      (b_t a bin token or
                                                         background when silent)
    segmentation         BOS TASK  MASK  EOS
    question answering   BOS TASK  ANS  EOS

Video-parsing pairs are (modality token, class token), listed per segment
in canonical order: modality rank audio < visual < both, class ascending
inside a rank. `grammar_mask` exposes, for any prefix, which tokens may
legally come next; decoding under it can only produce parseable programs.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ParseError, ShapeError


class Task(enum.IntEnum):
    AVE = 0    # audio-visual event localization
    AVVP = 1   # audio-visual video parsing
    SSL = 2    # sounding-source spatial localization
    AVS = 3    # sounding-object segmentation
    AVQA = 4   # audio-visual question answering


# header value for bundles that carry no labels
UNLABELED = 255


class TokenVocab:
    """Id layout for the shared output vocabulary.

    Fixed ids first, then class tokens (CLS_0 is background / "none"),
    spatial-bin tokens, and answer tokens.
    """

    PAD = 0
    BOS = 1
    EOS = 2
    SEP = 3
    MASK = 4
    MOD_A = 5
    MOD_V = 6
    MOD_AV = 7
    TASK_BASE = 8  # one task token per Task value, in enum order

    def __init__(self, n_classes, n_bins, n_answers):
        self.n_classes = n_classes
        self.n_bins = n_bins
        self.n_answers = n_answers
        self.cls_base = self.TASK_BASE + len(Task)
        self.bin_base = self.cls_base + n_classes + 1
        self.ans_base = self.bin_base + n_bins
        self.size = self.ans_base + n_answers

    def task_id(self, task):
        return self.TASK_BASE + int(task)

    def cls_id(self, k):
        """Class token: k=0 is background, events are 1..n_classes."""
        if not 0 <= k <= self.n_classes:
            raise ShapeError(f"class index {k} outside 0..{self.n_classes}")
        return self.cls_base + k

    def bin_id(self, j):
        if not 0 <= j < self.n_bins:
            raise ShapeError(f"bin index {j} outside 0..{self.n_bins - 1}")
        return self.bin_base + j

    def ans_id(self, a):
        if not 0 <= a < self.n_answers:
            raise ShapeError(f"answer index {a} outside 0..{self.n_answers - 1}")
        return self.ans_base + a

    def is_cls(self, t):
        return self.cls_base <= t < self.cls_base + self.n_classes + 1

    def is_bin(self, t):
        return self.bin_base <= t < self.bin_base + self.n_bins

    def is_ans(self, t):
        return self.ans_base <= t < self.ans_base + self.n_answers

    def name(self, t):
        fixed = {self.PAD: "PAD", self.BOS: "BOS", self.EOS: "EOS",
                 self.SEP: "SEP", self.MASK: "MASK", self.MOD_A: "MOD_A",
                 self.MOD_V: "MOD_V", self.MOD_AV: "MOD_AV"}
        if t in fixed:
            return fixed[t]
        if self.TASK_BASE <= t < self.TASK_BASE + len(Task):
            return f"TASK_{Task(t - self.TASK_BASE).name}"
        if self.is_cls(t):
            return f"CLS_{t - self.cls_base}"
        if self.is_bin(t):
            return f"BIN_{t - self.bin_base}"
        if self.is_ans(t):
            return f"ANS_{t - self.ans_base}"
        return f"?{t}"


_MOD_RANK = {TokenVocab.MOD_A: 0, TokenVocab.MOD_V: 1, TokenVocab.MOD_AV: 2}


def encode_labels(task, labels, vocab, n_segments):
    """Labels -> token program (list of ids), canonical form.

    `labels` is the per-task payload: AVE an int array (T,) with value
    n_classes meaning background; AVVP a pair of 0/1 arrays (T, K)
    audible/visible; SSL an int array (T,) of bins with -1 for silent;
    AVS/AVQA a dict with the mask or answer.
    """
    v, T = vocab, n_segments
    ids = [v.BOS, v.task_id(task)]
    if task == Task.AVE:
        lab = np.asarray(labels)
        if lab.shape != (T,):
            raise ShapeError(f"event labels must be ({T},), got {lab.shape}")
        for l in lab:
            ids.append(v.cls_id(0) if l == v.n_classes else v.cls_id(int(l) + 1))
        ids.append(v.EOS)
    elif task == Task.AVVP:
        audible, visible = labels
        audible = np.asarray(audible)
        visible = np.asarray(visible)
        if audible.shape != (T, v.n_classes) or visible.shape != (T, v.n_classes):
            raise ShapeError("parsing labels must be two (T, K) arrays")
        for t in range(T):
            pairs = []
            for k in range(v.n_classes):
                a, s = bool(audible[t, k]), bool(visible[t, k])
                if a and s:
                    pairs.append((2, k, v.MOD_AV))
                elif a:
                    pairs.append((0, k, v.MOD_A))
                elif s:
                    pairs.append((1, k, v.MOD_V))
            for rank, k, mod in sorted(pairs):
                ids.extend([mod, v.cls_id(k + 1)])
            ids.append(v.SEP)
        ids.append(v.EOS)
    elif task == Task.SSL:
        lab = np.asarray(labels)
        if lab.shape != (T,):
            raise ShapeError(f"localization labels must be ({T},), got {lab.shape}")
        for b in lab:
            ids.append(v.cls_id(0) if b < 0 else v.bin_id(int(b)))
        ids.append(v.EOS)
    elif task == Task.AVS:
        ids.extend([v.MASK, v.EOS])
    elif task == Task.AVQA:
        ids.extend([v.ans_id(int(labels["answer"])), v.EOS])
    else:
        raise ShapeError(f"unknown task {task!r}")
    return ids


def grammar_mask(task, prefix, vocab, n_segments):
    """Boolean (vocab.size,) array: which token may follow `prefix`.

    The prefix includes BOS and the task token. All-False means the
    program is already complete (EOS seen).
    """
    v, T = vocab, n_segments
    allowed = np.zeros(v.size, dtype=bool)
    n = len(prefix)
    if n == 0:
        allowed[v.BOS] = True
        return allowed
    if n == 1:
        allowed[v.task_id(task)] = True
        return allowed
    if prefix[-1] == v.EOS:
        return allowed

    if task == Task.AVE:
        body = n - 2
        if body < T:
            allowed[v.cls_base:v.cls_base + v.n_classes + 1] = True
        else:
            allowed[v.EOS] = True
        return allowed

    if task == Task.SSL:
        body = n - 2
        if body < T:
            allowed[v.cls_id(0)] = True
            allowed[v.bin_base:v.bin_base + v.n_bins] = True
        else:
            allowed[v.EOS] = True
        return allowed

    if task == Task.AVS:
        if n == 2:
            allowed[v.MASK] = True
        else:
            allowed[v.EOS] = True
        return allowed

    if task == Task.AVQA:
        if n == 2:
            allowed[v.ans_base:v.ans_base + v.n_answers] = True
        else:
            allowed[v.EOS] = True
        return allowed

    if task == Task.AVVP:
        seps = sum(1 for t in prefix if t == v.SEP)
        if seps >= T:
            allowed[v.EOS] = True
            return allowed
        last = prefix[-1]
        if last in _MOD_RANK:
            # a pair's class slot; stay strictly after the previous pair
            rank = _MOD_RANK[last]
            prev = _last_pair_before(prefix[:-1], v)
            lo = 1
            if prev is not None and prev[0] == rank:
                lo = prev[1] + 2  # strictly greater class at equal rank
            for k in range(lo, v.n_classes + 1):
                allowed[v.cls_id(k)] = True
            return allowed
        # start of a pair or the segment separator
        prev = _last_pair_before(prefix, v)
        allowed[v.SEP] = True
        for mod, rank in _MOD_RANK.items():
            if prev is None or rank > prev[0]:
                allowed[mod] = True
            elif rank == prev[0] and prev[1] < v.n_classes - 1:
                allowed[mod] = True  # same rank still has room class-wise
        return allowed

    raise ShapeError(f"unknown task {task!r}")


def _last_pair_before(prefix, vocab):
    """(rank, class-index) of the last complete pair in the current
    segment, or None at a segment start."""
    i = len(prefix) - 1
    while i >= 1:
        t = prefix[i]
        if t == vocab.SEP or t == vocab.task_id(Task.AVVP):
            return None
        if vocab.is_cls(t) and prefix[i - 1] in _MOD_RANK:
            return (_MOD_RANK[prefix[i - 1]], t - vocab.cls_base - 1)
        i -= 1
    return None


def decode_tokens(task, ids, vocab, n_segments):
    """Token program -> labels; the inverse of `encode_labels`.

    Raises ParseError (with position and expectation) on any program the
    grammar would not emit.
    """
    v, T = vocab, n_segments
    ids = list(int(t) for t in ids)

    def expect(pos, cond, what):
        if not cond:
            got = v.name(ids[pos]) if pos < len(ids) else "end of program"
            raise ParseError(f"position {pos}: expected {what}, got {got}",
                             position=pos, expected=what)

    expect(0, len(ids) >= 3 and ids[0] == v.BOS, "BOS")
    expect(1, ids[1] == v.task_id(task), f"TASK_{Task(task).name}")

    if task == Task.AVE:
        expect(2, len(ids) == T + 3, f"{T} class tokens and EOS")
        out = np.empty(T, dtype=np.int64)
        for t in range(T):
            tok = ids[2 + t]
            expect(2 + t, v.is_cls(tok), "a class token")
            k = tok - v.cls_base
            out[t] = v.n_classes if k == 0 else k - 1
        expect(T + 2, ids[T + 2] == v.EOS, "EOS")
        return out

    if task == Task.SSL:
        expect(2, len(ids) == T + 3, f"{T} bin tokens and EOS")
        out = np.empty(T, dtype=np.int64)
        for t in range(T):
            tok = ids[2 + t]
            expect(2 + t, v.is_bin(tok) or tok == v.cls_id(0),
                   "a bin token or background")
            out[t] = -1 if tok == v.cls_id(0) else tok - v.bin_base
        expect(T + 2, ids[T + 2] == v.EOS, "EOS")
        return out

    if task == Task.AVS:
        expect(2, len(ids) == 4 and ids[2] == v.MASK, "MASK")
        expect(3, ids[3] == v.EOS, "EOS")
        return {"mask_request": True}

    if task == Task.AVQA:
        expect(2, len(ids) == 4 and v.is_ans(ids[2]), "an answer token")
        expect(3, ids[3] == v.EOS, "EOS")
        return {"answer": ids[2] - v.ans_base}

    if task == Task.AVVP:
        audible = np.zeros((T, v.n_classes), dtype=np.int64)
        visible = np.zeros((T, v.n_classes), dtype=np.int64)
        pos, seg = 2, 0
        prev = None
        while True:
            expect(pos, pos < len(ids), "SEP, a modality token, or EOS")
            tok = ids[pos]
            if tok == v.SEP:
                expect(pos, seg < T, "EOS after the last segment")
                seg += 1
                prev = None
                pos += 1
                continue
            if tok == v.EOS:
                expect(pos, seg == T, f"{T - seg} more segment separators")
                expect(pos, pos == len(ids) - 1, "nothing after EOS")
                return audible, visible
            expect(pos, tok in _MOD_RANK and seg < T, "a modality token")
            expect(pos + 1, pos + 1 < len(ids), "a class token")
            ctok = ids[pos + 1]
            expect(pos + 1, v.is_cls(ctok) and ctok != v.cls_id(0),
                   "an event class token")
            rank = _MOD_RANK[tok]
            k = ctok - v.cls_base - 1
            expect(pos, prev is None or (rank, k) > prev,
                   "pairs in canonical order")
            prev = (rank, k)
            if rank in (0, 2):
                audible[seg, k] = 1
            if rank in (1, 2):
                visible[seg, k] = 1
            pos += 2

    raise ShapeError(f"unknown task {task!r}")
