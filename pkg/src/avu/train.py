"""Multi-task training loop, checkpointing, and evaluation.

One task is drawn per iteration and the whole batch comes from that
task's pool, so every step optimizes exactly one task loss while the
shared trunk sees all of them over time.  The per-task loss vector is
collapsed with an indicator mask; parameters that belong only to other
task heads therefore receive exactly-zero gradients on each step.
"""

import dataclasses
import json
import struct

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .errors import ConfigError, ContractError, FormatError, NumericsError
from .metrics import (MetricReport, ciou_at, ciou_auc, f_beta, iou,
                      parsing_f1, segment_accuracy)
from .model import UnifiedModel
from .synth import SceneGenerator
from .tensor import DTensor, Tape, adam_step, backprop
from .tokens import Task

CHECKPOINT_MAGIC = b"AVUC"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class TrainConfig:
    """Optimization schedule knobs.

    lr decays by `lr_decay` every `decay_every` epochs, so with the
    defaults the rate is 1e-4 for epochs 0..9, 1e-5 for 10..19, 1e-6
    from epoch 20 on.  An epoch is `steps_per_epoch` iterations; task
    draws are weighted by `task_mix` (uniform when None).
    """

    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 10
    batch_size: int = 16
    epochs: int = 20
    steps_per_epoch: int = 100
    task_mix: dict = None
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.lr_decay <= 1):
            raise ConfigError("lr must be positive and decay in (0, 1]")
        for name in ("decay_every", "batch_size", "epochs",
                     "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.task_mix is not None:
            w = {Task(k): float(v) for k, v in self.task_mix.items()}
            if any(v < 0 for v in w.values()) or sum(w.values()) <= 0:
                raise ConfigError("task mix weights must be >= 0, sum > 0")
            self.task_mix = w

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def lr_for_epoch(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


def sample_task_batch(pools, rng, batch_size, mix=None):
    """Draw (task, homogeneous batch) from per-task pools.

    Tasks are drawn uniformly unless `mix` gives weights; a task with
    weight zero is never drawn.  Samples come without replacement when
    the pool is large enough, with replacement otherwise.
    """
    tasks = sorted(pools, key=int)
    if not tasks:
        raise ConfigError("no task pools given")
    if mix is None:
        weights = np.ones(len(tasks))
    else:
        weights = np.array([float(mix.get(t, 0.0)) for t in tasks])
    if weights.sum() <= 0:
        raise ConfigError("all task mix weights are zero")
    for t, w in zip(tasks, weights):
        if w > 0 and len(pools[t]) == 0:
            raise ConfigError(f"empty pool for task {Task(t).name}")
    probs = weights / weights.sum()
    task = tasks[int(rng.choice(len(tasks), p=probs))]
    pool = pools[task]
    idx = rng.choice(len(pool), size=batch_size,
                     replace=len(pool) < batch_size)
    return task, [pool[int(i)] for i in idx]


def masked_loss(per_task_losses, target):
    """Indicator-weighted sum over per-task losses.

    Equals the target task's loss exactly; any other entries enter with
    weight 0.0 so their value (and gradient, if they carry a graph)
    contributes exactly nothing.
    """
    items = (sorted(per_task_losses.items(), key=lambda kv: int(kv[0]))
             if isinstance(per_task_losses, dict)
             else list(enumerate(per_task_losses)))
    tid = int(target)
    if tid not in {int(k) for k, _ in items}:
        raise ContractError(f"no loss entry for target task {tid}")
    tensors = [(k, v) for k, v in items if isinstance(v, DTensor)]
    if not tensors:
        return sum(float(v) * (1.0 if int(k) == tid else 0.0)
                   for k, v in items)
    total = None
    for k, v in items:
        w = 1.0 if int(k) == tid else 0.0
        term = (tz.scale(v, w) if isinstance(v, DTensor)
                else DTensor(np.asarray(float(v) * w)))
        total = term if total is None else tz.add(total, term)
    return total


@dataclasses.dataclass
class TrainResult:
    curve: list                  # (iteration, task id, loss) per step
    lr_per_iter: list
    iterations: int
    stopped_early: bool
    checkpoint_path: str = None


def _param_snapshot(model):
    return {k: v.data.copy() for k, v in model.params().items()}


def train(model, pools, config, checkpoint_path=None, stop_below=None):
    """Run the multi-task loop; returns the per-iteration loss curve.

    Deterministic given (model seed, config seed, pools).  On a
    non-finite loss the last finite-loss parameters are written to
    `checkpoint_path` (when given) and NumericsError is raised.  With
    `stop_below`, training stops once the most recent loss of every
    task in `pools` is under the threshold.
    """
    rng = np.random.default_rng(900_001 + config.seed)
    curve, lrs = [], []
    last_loss = {t: np.inf for t in pools}
    last_good = _param_snapshot(model)
    adam = None
    it = 0
    stopped = False
    for epoch in range(config.epochs):
        lr = config.lr_for_epoch(epoch)
        for _ in range(config.steps_per_epoch):
            task, batch = sample_task_batch(
                pools, rng, config.batch_size, config.task_mix)
            model.zero_grads()
            diverged = None
            try:
                with Tape():
                    loss, _ = model.task_loss(task, batch)
                    backprop(loss)
                val = float(loss.data)
                if not np.isfinite(val):
                    diverged = f"non-finite loss {val} at iteration {it}"
            except NumericsError as err:
                diverged = f"diverged at iteration {it}: {err}"
            if diverged is not None:
                for name, p in model.params().items():
                    p.data[...] = last_good[name]
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model,
                                    extra={"aborted_at": it})
                raise NumericsError(diverged)
            last_good = _param_snapshot(model)
            adam = adam_step(model.params(), lr, state=adam)
            curve.append((it, int(task), val))
            lrs.append(lr)
            last_loss[task] = val
            it += 1
            if (stop_below is not None
                    and all(v < stop_below for v in last_loss.values())):
                stopped = True
                break
        if stopped:
            break
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return TrainResult(curve=curve, lr_per_iter=lrs, iterations=it,
                       stopped_early=stopped,
                       checkpoint_path=checkpoint_path)


def write_curve(path, curve):
    """Loss curve as CSV: iteration, task name, loss."""
    with open(path, "w") as fh:
        fh.write("iteration,task,loss\n")
        for it, tid, loss in curve:
            fh.write(f"{it},{Task(tid).name},{loss!r}\n")


def read_curve(path):
    curve = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "iteration,task,loss":
            raise FormatError(f"bad curve header: {header}")
        for line in fh:
            it, name, loss = line.strip().split(",")
            curve.append((int(it), int(Task[name]), float(loss)))
    return curve


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, extra=None):
    """Serialize config and all named parameters, sorted by name."""
    meta = {"config": model.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    params = model.params()
    out = [CHECKPOINT_MAGIC,
           struct.pack("<H", CHECKPOINT_VERSION),
           struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        enc = name.encode()
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Cursor:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint reading {what}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint; returns (meta dict, name -> float64 array)."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    (version,) = cur.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (blob_len,) = cur.unpack("<I", "meta length")
    meta = json.loads(cur.take(blob_len, "meta").decode())
    (n_params,) = cur.unpack("<I", "param count")
    params = {}
    for _ in range(n_params):
        (name_len,) = cur.unpack("<H", "name length")
        name = cur.take(name_len, "name").decode()
        (ndim,) = cur.unpack("<B", "ndim")
        shape = cur.unpack(f"<{ndim}I", "shape") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = cur.take(8 * count, f"data for {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if cur.off != len(cur.buf):
        raise FormatError("trailing bytes after checkpoint payload")
    return meta, params


def restore(model, params):
    """Copy loaded arrays into a model's parameters (names must match)."""
    own = model.params()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise FormatError(f"parameter name mismatch: {missing[:4]}")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise FormatError(f"shape mismatch for {name}")
        p.data[...] = params[name]


def load_model(path):
    """Rebuild a model from a checkpoint file alone."""
    meta, params = load_checkpoint(path)
    model = UnifiedModel(ModelConfig.from_dict(meta["config"]))
    restore(model, params)
    return model


# ---------------------------------------------------------------------------
# evaluation

def _question_kind(template, n_classes):
    if 4 <= template < 4 + n_classes:
        return "exist"
    if template == 4 + n_classes:
        return "count"
    return "where"


def evaluate(model, pools):
    """Score held-out pools; one metric namespace per task present."""
    if not pools or any(len(v) == 0 for v in pools.values()):
        raise ConfigError("evaluation needs a non-empty pool per task")
    gen = SceneGenerator(model.config)
    report = MetricReport()
    for task in sorted(pools, key=int):
        preds = [model.predict(b) for b in pools[task]]
        if task == Task.AVE:
            pred = np.concatenate([p["events"] for p in preds])
            true = np.concatenate([b.labels["events"]
                                   for b in pools[task]])
            report.set("ave/accuracy", segment_accuracy(pred, true))
        elif task == Task.AVVP:
            pa = np.concatenate([p["audible"] for p in preds])
            pv = np.concatenate([p["visible"] for p in preds])
            ta = np.concatenate([b.labels["audible"]
                                 for b in pools[task]])
            tv = np.concatenate([b.labels["visible"]
                                 for b in pools[task]])
            scores = parsing_f1(pa, pv, ta, tv)
            report.set("avvp/f1_audio", scores["audio"])
            report.set("avvp/f1_visual", scores["visual"])
            report.set("avvp/f1_av", scores["audio_visual"])
            report.set("avvp/f1_average", scores["average"])
        elif task == Task.SSL:
            ious = []
            for p, b in zip(preds, pools[task]):
                for t, true_bin in enumerate(b.labels["bins"]):
                    if true_bin < 0:
                        continue
                    ious.append(iou(p["regions"][t],
                                    gen.patch_mask(int(true_bin))))
            if not ious:
                raise ConfigError("SSL pool has no sounding segments")
            report.set("ssl/ciou", ciou_at(ious, 0.5))
            report.set("ssl/auc", ciou_auc(ious))
        elif task == Task.AVS:
            ious, fs = [], []
            for p, b in zip(preds, pools[task]):
                true = b.labels["masks"][0]
                ious.append(iou(p["masks"][0], true))
                fs.append(f_beta(p["masks"][0], true))
            report.set("avs/miou", float(np.mean(ious)))
            report.set("avs/fscore", float(np.mean(fs)))
        else:
            hits = {}
            for p, b in zip(preds, pools[task]):
                kind = _question_kind(int(b.labels["template"]),
                                      model.config.n_classes)
                ok = int(p["answer"]) == int(b.labels["answer"])
                hits.setdefault(kind, []).append(ok)
            everything = [h for v in hits.values() for h in v]
            report.set("avqa/accuracy", float(np.mean(everything)))
            for kind, v in sorted(hits.items()):
                report.set(f"avqa/acc_{kind}", float(np.mean(v)))
    return report


# ---------------------------------------------------------------------------
# ablation

@dataclasses.dataclass
class AblationArm:
    switches: dict
    report: MetricReport
    curve: list


def ablate(config, switches, pools_train, pools_eval, train_config,
           model_seed=0):
    """Train reference and ablated arms on identical data and seeds.

    The reference arm keeps every module on; the ablated arm applies
    `switches` ({"temporal"/"spatial"/"prompt": bool}).  Returns the
    (reference, ablated) pair with switch flags attached.
    """
    known = {"temporal", "spatial", "prompt"}
    if set(switches) - known:
        raise ConfigError(f"unknown switches: {set(switches) - known}")
    arms = []
    for flags in ({}, dict(switches)):
        fields = config.to_dict()
        for name, on in flags.items():
            fields[f"use_{name}"] = bool(on)
        arm_cfg = ModelConfig.from_dict(fields)
        model = UnifiedModel(arm_cfg, seed=model_seed)
        result = train(model, pools_train, train_config)
        report = evaluate(model, pools_eval)
        full = {f"use_{n}": getattr(arm_cfg, f"use_{n}")
                for n in sorted(known)}
        arms.append(AblationArm(switches=full, report=report,
                                curve=result.curve))
    return arms[0], arms[1]
