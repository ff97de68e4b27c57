"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations in execution order; ``grad`` replays them
backwards.  Tensors are thin wrappers around numpy arrays: a tensor is either
attached to a tape (it has a ``node_id``) or detached (a constant that never
produces gradients).  Everything runs in float64 so finite-difference checks
have headroom.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class TapeError(ValueError):
    """Raised on contract violations (wrong tape, non-scalar loss, ...)."""


class Tape:
    """Append-only record of differentiable operations.

    Topological order equals append order: parents always precede children,
    so one reverse sweep visits each node exactly once.  A tape is confined
    to a single thread; independent tapes may run concurrently.
    """

    __slots__ = ("_parents", "_backwards", "recording")

    def __init__(self):
        self._parents = []
        self._backwards = []
        self.recording = True

    def __len__(self):
        return len(self._parents)

    def _append(self, parents, backward):
        self._parents.append(parents)
        self._backwards.append(backward)
        return len(self._parents) - 1

    def leaf(self, data):
        """Attach ``data`` as a trainable leaf and return its Tensor."""
        arr = np.asarray(data, dtype=np.float64)
        nid = self._append((), None)
        return Tensor(arr, self, nid)


@contextmanager
def no_recording(tape):
    """Temporarily stop ``tape`` from recording; ops yield detached results."""
    if tape is None:
        yield
        return
    prev = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = prev


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = "leaf/node" if self.node_id is not None else "const"
        return f"Tensor({tag}, shape={self.data.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _common_tape(*tensors):
    tape = None
    for t in tensors:
        if t.node_id is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands live on different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(out, tape, parents, backward):
    if tape is None or not tape.recording or not parents:
        return Tensor(out)
    nid = tape._append(tuple(parents), backward)
    return Tensor(out, tape, nid)


def _taped_parents(tape, *tensors):
    """Node ids of the attached operands, skipping constants."""
    if tape is None or not tape.recording:
        return ()
    return tuple(t.node_id for t in tensors if t.node_id is not None)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    tape = _common_tape(a, b)
    out = a.data + b.data
    parents = _taped_parents(tape, a, b)
    if not parents:
        return Tensor(out)
    ia, ib = a.node_id is not None, b.node_id is not None
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        res = []
        if ia:
            res.append(_unbroadcast(g, ash))
        if ib:
            res.append(_unbroadcast(g, bsh))
        return res

    return _record(out, tape, parents, backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    tape = _common_tape(a, b)
    out = a.data - b.data
    parents = _taped_parents(tape, a, b)
    if not parents:
        return Tensor(out)
    ia, ib = a.node_id is not None, b.node_id is not None
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        res = []
        if ia:
            res.append(_unbroadcast(g, ash))
        if ib:
            res.append(_unbroadcast(-g, bsh))
        return res

    return _record(out, tape, parents, backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    tape = _common_tape(a, b)
    out = a.data * b.data
    parents = _taped_parents(tape, a, b)
    if not parents:
        return Tensor(out)
    ia, ib = a.node_id is not None, b.node_id is not None
    ad, bd = a.data, b.data

    def backward(g):
        res = []
        if ia:
            res.append(_unbroadcast(g * bd, ad.shape))
        if ib:
            res.append(_unbroadcast(g * ad, bd.shape))
        return res

    return _record(out, tape, parents, backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    tape = _common_tape(a, b)
    out = a.data / b.data
    parents = _taped_parents(tape, a, b)
    if not parents:
        return Tensor(out)
    ia, ib = a.node_id is not None, b.node_id is not None
    ad, bd = a.data, b.data

    def backward(g):
        res = []
        if ia:
            res.append(_unbroadcast(g / bd, ad.shape))
        if ib:
            res.append(_unbroadcast(-g * ad / (bd * bd), bd.shape))
        return res

    return _record(out, tape, parents, backward)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    tape = _common_tape(a, b)
    a_vec, b_vec = a.data.ndim == 1, b.data.ndim == 1
    A = a.data[None, :] if a_vec else a.data
    B = b.data[:, None] if b_vec else b.data
    out2 = np.matmul(A, B)
    out = out2
    if b_vec:
        out = out[..., 0]
    if a_vec:
        out = out[..., 0, :] if not b_vec else out[..., 0]
    parents = _taped_parents(tape, a, b)
    if not parents:
        return Tensor(out)
    ia, ib = a.node_id is not None, b.node_id is not None

    def backward(g):
        g2 = g
        if a_vec and b_vec:
            g2 = g2.reshape(g2.shape + (1, 1))
        elif a_vec:
            g2 = g2[..., None, :]
        elif b_vec:
            g2 = g2[..., :, None]
        res = []
        if ia:
            ga = np.matmul(g2, np.swapaxes(B, -1, -2))
            ga = _unbroadcast(ga, A.shape)
            res.append(ga[0] if a_vec else ga)
        if ib:
            gb = np.matmul(np.swapaxes(A, -1, -2), g2)
            gb = _unbroadcast(gb, B.shape)
            res.append(gb[:, 0] if b_vec else gb)
        return res

    return _record(out, tape, parents, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    x = _lift(x)
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, x.tape, parents, backward)


def tanh(x):
    x = _lift(x)
    out = np.tanh(x.data)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, x.tape, parents, backward)


def relu(x):
    x = _lift(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)

    def backward(g):
        return (g * mask,)

    return _record(out, x.tape, parents, backward)


def leaky_relu(x, slope=0.2):
    """Composed from relu; used by the graph-attention logits."""
    return sub(relu(x), mul(relu(mul(x, -1.0)), slope))


def softmax(x):
    """Softmax along the last axis."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, x.tape, parents, backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    tape = _common_tape(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data
    parents = _taped_parents(tape, x, gain, bias)
    if not parents:
        return Tensor(out)
    ix = x.node_id is not None
    ig = gain.node_id is not None
    ib = bias.node_id is not None
    gd = gain.data

    def backward(g):
        res = []
        if ix:
            gy = g * gd
            dx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
            res.append(dx)
        if ig:
            res.append(_unbroadcast(g * y, gain.data.shape))
        if ib:
            res.append(_unbroadcast(g, bias.data.shape))
        return res

    return _record(out, tape, parents, backward)


# ---------------------------------------------------------------------------
# structural ops


def getitem(x, key):
    x = _lift(x)
    out = x.data[key]
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)
    xsh = x.data.shape

    def backward(g):
        gx = np.zeros(xsh, dtype=np.float64)
        gx[key] = g
        return (gx,)

    return _record(np.array(out, dtype=np.float64), x.tape, parents, backward)


def reshape(x, shape):
    x = _lift(x)
    out = x.data.reshape(shape)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)
    xsh = x.data.shape

    def backward(g):
        return (g.reshape(xsh),)

    return _record(out, x.tape, parents, backward)


def transpose(x, axes=None):
    x = _lift(x)
    out = np.transpose(x.data, axes)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _record(out, x.tape, parents, backward)


def broadcast_to(x, shape):
    x = _lift(x)
    out = np.broadcast_to(x.data, shape).copy()
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)
    xsh = x.data.shape

    def backward(g):
        return (_unbroadcast(g, xsh),)

    return _record(out, x.tape, parents, backward)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    tape = _common_tape(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    parents = _taped_parents(tape, *tensors)
    if not parents:
        return Tensor(out)
    taped = [t.node_id is not None for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        res = []
        for i, t in enumerate(tensors):
            if not taped[i]:
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            res.append(g[tuple(sl)])
        return res

    return _record(out, tape, parents, backward)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    tape = _common_tape(*tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    parents = _taped_parents(tape, *tensors)
    if not parents:
        return Tensor(out)
    taped = [t.node_id is not None for t in tensors]

    def backward(g):
        return [np.take(g, i, axis=axis) for i, yes in enumerate(taped) if yes]

    return _record(out, tape, parents, backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False):
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)
    xsh = x.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, xsh).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xsh).copy(),)

    return _record(out, x.tape, parents, backward)


def mean(x, axis=None, keepdims=False):
    x = _lift(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    parents = _taped_parents(x.tape, x)
    if not parents:
        return Tensor(out)
    xsh = x.data.shape
    count = x.data.size if axis is None else np.prod([xsh[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, xsh).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, xsh).copy(),)

    return _record(out, x.tape, parents, backward)


# ---------------------------------------------------------------------------
# gradients


def grad(loss, params):
    """Backpropagate from a scalar ``loss`` to each tensor in ``params``.

    The tape is left untouched, so the same graph can be differentiated
    again.  A parameter that is not attached to the loss's tape is a
    contract violation (never a silent zero); a parameter that is attached
    but unused by the loss genuinely gets a zero gradient.
    """
    if loss.node_id is None:
        raise TapeError("loss is not attached to a tape")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise TapeError("loss must be scalar")
    tape = loss.tape
    for p in params:
        if p.node_id is None or p.tape is not tape:
            raise TapeError("parameter is not on the loss tape")

    buf = {loss.node_id: np.ones_like(loss.data)}
    backwards = tape._backwards
    parent_lists = tape._parents
    for nid in range(loss.node_id, -1, -1):
        g = buf.pop(nid, None)
        if g is None:
            continue
        bw = backwards[nid]
        if bw is None:
            buf[nid] = g  # leaf: keep for collection
            continue
        pgrads = bw(g)
        for pid, pg in zip(parent_lists[nid], pgrads):
            if pg is None:
                continue
            acc = buf.get(pid)
            buf[pid] = pg if acc is None else acc + pg

    out = []
    for p in params:
        g = buf.get(p.node_id)
        if g is None:
            g = np.zeros_like(p.data)
        out.append(np.array(g, dtype=np.float64))
    return out


def finite_diff_check(f, params, eps):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of leaf Tensors (fresh tape) to a scalar Tensor and must
    be deterministic.  ``params`` is a list of numpy arrays.  The relative
    error of each entry is |analytic - numeric| / (|analytic| + 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in params]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("objective returned a non-finite value")
    analytic = grad(loss, leaves)

    def value_at(arrs):
        t = Tape()
        t.recording = False
        out = f([Tensor(a, t, None) for a in arrs])
        v = float(out.data)
        if not np.isfinite(v):
            raise FloatingPointError("objective returned a non-finite value")
        return v

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = value_at(arrays)
            flat[idx] = orig - eps
            fm = value_at(arrays)
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            ana = analytic[k].reshape(-1)[idx]
            rel = abs(ana - numeric) / (abs(ana) + 1e-12)
            if rel > worst:
                worst = rel
    return worst
