"""Adam with decoupled weight decay, plus weight initializers.

Defaults follow the training setup this package targets: learning rate 1e-2
and L2 coefficient 1e-6.  Moment buffers mirror parameter shapes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def clone(self):
        out = AdamState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step)
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        return out


def adam_step(params, grads, state):
    """One Adam update, in place on the parameter arrays.

    ``params`` maps names to numpy arrays (or Tensors, whose ``.data`` is
    updated); ``grads`` maps the same names to gradient arrays.  Weight decay
    is decoupled from the moment estimates.  Returns ``(params, state)``.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        arr = p if isinstance(p, np.ndarray) else p.data
        g = grads[name]
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        arr -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * arr)
    return params, state


def xavier_uniform(rng, shape):
    """Glorot-uniform init for weight matrices: limit sqrt(6/(fan_in+fan_out))."""
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def zeros(shape):
    return np.zeros(tuple(shape), dtype=np.float64)
