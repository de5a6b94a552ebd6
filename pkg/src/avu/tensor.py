"""Dense float64 tensors with taped reverse-mode differentiation.

Every array that participates in training is a DTensor. Operations record
themselves on the active Tape (see `Tape` as a context manager); `backprop`
walks the tape in reverse and accumulates gradients additively. Outside a
tape, operations are forward-only, which is what evaluation uses.

Shape rules per primitive are documented on each function. All compute is
float64; gradients share the shape of their tensor.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_ACTIVE_TAPES: list["Tape"] = []


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class DTensor:
    """Dense N-dimensional float64 array, optionally tracked on a tape.

    `grad` is populated by `backprop` for every tensor registered on the
    tape of the loss (zeros for tensors not reachable from the loss) and
    accumulates additively across fan-out and repeated backprops.
    """

    __slots__ = ("data", "grad", "node_id", "tape", "name")

    def __init__(self, data, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.node_id = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"DTensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, name=""):
    """Wrap `data` as a leaf DTensor (no producing op)."""
    return DTensor(data, name=name)


class TapeNode:
    """One primitive record: op kind, input/output node ids, backward closure."""

    __slots__ = ("kind", "input_ids", "output_id", "backward")

    def __init__(self, kind, input_ids, output_id, backward):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered record of primitive applications, topologically sorted by
    construction. One tape per training step; never shared across threads."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.tensors: list[DTensor] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _ACTIVE_TAPES and _ACTIVE_TAPES[-1] is self
        _ACTIVE_TAPES.pop()
        # Release the graph eagerly. The tape <-> tensor cycle would
        # otherwise sit on every activation until a gc pass; backprop
        # must therefore run inside the `with` block.
        for t in self.tensors:
            if t.tape is self:
                t.tape = None
                t.node_id = None
        self.nodes.clear()
        self.tensors.clear()
        return False

    def register(self, t: DTensor) -> int:
        if t.tape is not self:
            t.tape = self
            t.node_id = len(self.tensors)
            self.tensors.append(t)
        return t.node_id


def _record(kind, inputs, out_data, backward, name=""):
    """Create the output tensor and, if a tape is active, record the op."""
    out = DTensor(out_data, name=name)
    tape = _active_tape()
    if tape is not None:
        input_ids = tuple(tape.register(t) for t in inputs)
        out_id = tape.register(out)
        tape.nodes.append(TapeNode(kind, input_ids, out_id, backward))
    return out


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_dt(x):
    return x if isinstance(x, DTensor) else DTensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch semantics.

    Shapes: a (..., n, k) @ b (..., k, m) -> (..., n, m); leading dims
    broadcast. Both operands must have ndim >= 2.
    """
    a, b = _as_dt(a), _as_dt(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _record("matmul", (a, b), out, backward)


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_dt(a), _as_dt(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _record("add", (a, b), out, backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = _as_dt(a), _as_dt(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _record("mul", (a, b), out, backward)


def scale(a, c):
    """Multiply by a python scalar `c`."""
    a = _as_dt(a)
    c = float(c)
    out = a.data * c

    def backward(g):
        return ((a, g * c),)

    return _record("scale", (a,), out, backward)


def concat_axis(tensors, axis):
    """Concatenate along `axis`; all other dims must agree."""
    ts = [_as_dt(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_axis: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat_axis: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from e
    ax = axis % out.ndim
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            outs.append((t, g[tuple(idx)]))
        return tuple(outs)

    return _record("concat_axis", tuple(ts), out, backward)


def slice_axis(a, axis, start, stop):
    """Take `a[..., start:stop, ...]` along `axis`."""
    a = _as_dt(a)
    ax = axis % a.ndim
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError(f"slice: range [{start}:{stop}] out of bounds for "
                         f"shape {a.shape} on axis {axis}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return ((a, ga),)

    return _record("slice", (a,), out, backward)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    a = _as_dt(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need ndim >= 2, got shape {a.shape}")
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return ((a, np.transpose(g, inv)),)

    return _record("transpose", (a,), out, backward)


def reshape(a, shape):
    """View `a` with a new shape of identical size."""
    a = _as_dt(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    old = a.shape

    def backward(g):
        return ((a, g.reshape(old)),)

    return _record("reshape", (a,), out, backward)


def relu(a):
    a = _as_dt(a)
    out = np.maximum(a.data, 0.0)
    pos = a.data > 0

    def backward(g):
        return ((a, g * pos),)

    return _record("relu", (a,), out, backward)


def sigmoid(a):
    a = _as_dt(a)
    x = a.data
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    out[~p] = ex / (1.0 + ex)

    def backward(g):
        return ((a, g * out * (1.0 - out)),)

    return _record("sigmoid", (a,), out, backward)


def softmax_lastdim(a):
    """Row-stochastic softmax over the last axis.

    -inf entries (attention masks) get exactly-zero weight; each row must
    hold at least one finite entry.
    """
    a = _as_dt(a)
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericsError("softmax_lastdim: a row has no finite entry")
    e = np.exp(x - m)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((a, out * (g - dot)),)

    return _record("softmax_lastdim", (a,), out, backward)


def mean_axis(a, axis):
    """Mean over a single axis (removed from the output shape)."""
    a = _as_dt(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    out = np.mean(a.data, axis=ax)

    def backward(g):
        return ((a, np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy()),)

    return _record("mean_axis", (a,), out, backward)


def sum_axis(a, axis=None):
    """Sum over one axis, or over all axes (scalar) when axis is None."""
    a = _as_dt(a)
    if axis is None:
        out = np.sum(a.data)

        def backward(g):
            return ((a, np.broadcast_to(g, a.shape).copy()),)

        return _record("sum_axis", (a,), out, backward)
    ax = axis % a.ndim
    out = np.sum(a.data, axis=ax)

    def backward(g):
        return ((a, np.broadcast_to(np.expand_dims(g, ax), a.shape).copy()),)

    return _record("sum_axis", (a,), out, backward)


def cross_entropy(logits, targets, mask=None):
    """Mean softmax cross-entropy against integer class ids.

    logits (..., V); targets int array (...); mask, when given, is a
    same-shape 0/1 weighting and the mean runs over mask weight. Returns a
    scalar. Targets and mask are data, not differentiable inputs.
    """
    logits = _as_dt(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match "
                         f"logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ShapeError("cross_entropy: target id out of vocabulary range")
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    nll = lse[..., 0] - np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    if mask is None:
        w = np.ones_like(nll)
    else:
        w = np.asarray(mask, dtype=np.float64)
        if w.shape != nll.shape:
            raise ShapeError(f"cross_entropy: mask {w.shape} does not match "
                             f"targets {targets.shape}")
    denom = w.sum()
    if denom <= 0:
        raise ContractError("cross_entropy: mask selects no elements")
    out = float((nll * w).sum() / denom)

    def backward(g):
        p = np.exp(x - lse)
        np.subtract.at(p, (*np.indices(targets.shape), targets), 1.0)
        return ((logits, p * (g * w / denom)[..., None]),)

    return _record("cross_entropy", (logits,), out, backward)


def binary_cross_entropy(logits, targets, mask=None):
    """Mean elementwise sigmoid cross-entropy from logits.

    logits and targets share a shape; targets are 0/1 data. Returns a scalar.
    """
    logits = _as_dt(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy: targets {t.shape} do not match "
                         f"logits {logits.shape}")
    x = logits.data
    if mask is None:
        w = np.ones_like(x)
    else:
        w = np.asarray(mask, dtype=np.float64)
        if w.shape != x.shape:
            raise ShapeError("binary_cross_entropy: mask shape mismatch")
    denom = w.sum()
    if denom <= 0:
        raise ContractError("binary_cross_entropy: mask selects no elements")
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = float((loss * w).sum() / denom)

    def backward(g):
        s = np.empty_like(x)
        p = x >= 0
        s[p] = 1.0 / (1.0 + np.exp(-x[p]))
        ex = np.exp(x[~p])
        s[~p] = ex / (1.0 + ex)
        return ((logits, (s - t) * w * (g / denom)),)

    return _record("binary_cross_entropy", (logits,), out, backward)


def embed_lookup(table, ids):
    """Gather rows of `table` (V, C) by integer `ids` (any shape)."""
    table = _as_dt(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed_lookup: id out of table range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _record("embed_lookup", (table,), out, backward)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_dt(a), _as_dt(gain), _as_dt(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must be ({n},), got "
                         f"{gain.shape}/{bias.shape}")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        ga = inv * (dxhat
                    - np.mean(dxhat, axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return ((a, ga), (gain, ggain), (bias, gbias))

    return _record("layer_norm", (a, gain, bias), out, backward)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation. x (B, Cin, H, W), w (Cout, Cin, kh, kw),
    optional bias (Cout,); zero padding on both sides."""
    x, w = _as_dt(x), _as_dt(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes x {x.shape}, w {w.shape}")
    B, cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    ho = (H + 2 * p - kh) // s + 1
    wo = (W + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    sv = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (B, cin, kh, kw, ho, wo),
        (sv[0], sv[1], sv[2], sv[3], sv[2] * s, sv[3] * s))
    cols2 = cols.reshape(B, cin * kh * kw, ho * wo)
    wm = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wm, cols2).reshape(B, cout, ho, wo)
    if b is not None:
        b = _as_dt(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias must be ({cout},), got {b.shape}")
        out = out + b.data[:, None, None]

    def backward(g):
        gm = g.reshape(B, cout, ho * wo)
        gw = np.einsum("bof,bcf->oc", gm, cols2).reshape(w.shape)
        gcols = np.matmul(wm.T, gm).reshape(B, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho * s:s, j:j + wo * s:s] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [(x, gx), (w, gw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, backward)


def upsample2x(x):
    """Nearest-neighbor 2x spatial upsampling of (B, C, H, W)."""
    x = _as_dt(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: need (B, C, H, W), got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    B, C, H, W = x.shape

    def backward(g):
        return ((x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))),)

    return _record("upsample2x", (x,), out, backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat_axis": concat_axis,
    "slice": slice_axis,
    "transpose": transpose,
    "reshape": reshape,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax_lastdim,
    "mean_axis": mean_axis,
    "sum_axis": sum_axis,
    "cross_entropy": cross_entropy,
    "binary_cross_entropy": binary_cross_entropy,
    "embed_lookup": embed_lookup,
    "layer_norm": layer_norm,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
}


def apply_primitive(kind, inputs, **params):
    """Dispatch a primitive by name. `inputs` is a list of DTensors; extra
    arguments (axis, stride, ids, ...) go through `params`."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive kind {kind!r}") from None
    if kind == "concat_axis":
        return fn(inputs, **params)
    return fn(*inputs, **params)


def primitive_kinds():
    return sorted(_PRIMITIVES)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backprop(loss: DTensor):
    """Populate grads of every tensor on the loss's tape.

    Gradients accumulate additively (fan-out and pre-existing buffers);
    tensors on the tape that the loss does not depend on end with zero
    grads. The loss must be scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backprop: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or not tape.nodes:
        raise ContractError("backprop: loss is not the output of a taped computation")
    for t in tape.tensors:
        if t.grad is None or t.grad.shape != t.data.shape:
            t.grad = np.zeros_like(t.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    tensors = tape.tensors
    for node in reversed(tape.nodes):
        g = tensors[node.output_id].grad
        for t, contrib in node.backward(g):
            t.grad += contrib
    return tape


def finite_difference_gradient(f, x: DTensor, eps=1e-5):
    """Central-difference gradient of scalar `f` at `x`, elementwise.

    The verification oracle: independent of the tape machinery. `f` is
    evaluated forward-only on perturbed copies of `x`.
    """
    if eps <= 0:
        raise ContractError("finite_difference_gradient: eps must be positive")

    def eval_at(data):
        out = f(DTensor(data))
        v = float(out.data if isinstance(out, DTensor) else out)
        if not np.isfinite(v):
            raise NumericsError("finite_difference_gradient: f returned non-finite")
        return v

    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        d = base.copy().reshape(-1)
        d[i] += eps
        up = eval_at(d.reshape(base.shape))
        d[i] -= 2 * eps
        down = eval_at(d.reshape(base.shape))
        flat[i] = (up - down) / (2 * eps)
    return DTensor(grad)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, lr, betas=(0.9, 0.999), state=None, eps=1e-8):
    """One Adam update with bias correction over `params` (dict name -> DTensor).

    Every parameter must carry a populated grad. Returns the state, advanced
    by one step.
    """
    if state is None:
        state = AdamState()
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no grad")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state
