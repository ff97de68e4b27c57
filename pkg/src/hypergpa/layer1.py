"""Shared multi-task encoder over M coupled series.

Each series gets its own small MLP that embeds its first observation into the
hidden state; all series then evolve jointly under one CDE whose vector field
mixes them through adaptive graph convolution over a learned latent adjacency
(row-softmax of relu(E E^T), propagated as (I + A)ZW + b).  The final states
are the next-period representations handed to the parameter generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import xavier_uniform, zeros
from .paths import fit_path, integrate_cde
from .tape import Tensor, concat, matmul, relu, reshape, softmax, tanh, transpose


@dataclass
class L1Config:
    m: int
    dim_h: int = 32
    gamma_hidden: int = 32
    gamma_depth: int = 2
    embed_dim: int = 32
    agc_dim: int = 32
    k: int = 2
    use_agc: bool = True

    def __post_init__(self):
        for name in ("m", "dim_h", "gamma_hidden", "gamma_depth", "embed_dim", "agc_dim", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def init_l1_params(cfg, dim_x, rng):
    """One embedding MLP per series plus the shared field weights."""
    p = {}
    for i in range(cfg.m):
        din = dim_x
        for d in range(cfg.gamma_depth):
            dout = cfg.dim_h if d == cfg.gamma_depth - 1 else cfg.gamma_hidden
            p[f"l1.gamma{i}.w{d}"] = xavier_uniform(rng, (din, dout))
            p[f"l1.gamma{i}.b{d}"] = zeros((dout,))
            din = dout
    p["l1.field.E"] = xavier_uniform(rng, (cfg.m, cfg.embed_dim))
    p["l1.field.w1"] = xavier_uniform(rng, (cfg.dim_h, cfg.agc_dim))
    p["l1.field.b1"] = zeros((cfg.agc_dim,))
    p["l1.field.w2"] = xavier_uniform(rng, (cfg.agc_dim, cfg.agc_dim))
    p["l1.field.b2"] = zeros((cfg.agc_dim,))
    p["l1.field.w3"] = xavier_uniform(rng, (cfg.agc_dim, cfg.dim_h * dim_x))
    p["l1.field.b3"] = zeros((cfg.dim_h * dim_x,))
    return p


def adaptive_adjacency(E):
    """Row-stochastic latent adjacency from node embeddings."""
    if E.data.shape[0] < 1:
        raise ValueError("need at least one node")
    return softmax(relu(matmul(E, transpose(E, (1, 0)))))


def agc(Z, E, W, b):
    """Adaptive graph convolution: (I + softmax(relu(E E^T))) Z W + b."""
    A_hat = adaptive_adjacency(E)
    return matmul(Z + matmul(A_hat, Z), W) + b


def _agc_apply(Z, A_hat, W, b):
    if A_hat is None:
        return matmul(Z, W) + b
    return matmul(Z + matmul(A_hat, Z), W) + b


def embed_initial(x_first, params, cfg):
    """Per-series embedding of the first observations: (M, dim_x) -> (M, dim_h)."""
    x_first = np.asarray(x_first, dtype=np.float64)
    if x_first.shape[0] != cfg.m:
        raise ValueError(f"expected {cfg.m} series, got {x_first.shape[0]}")
    rows = []
    for i in range(cfg.m):
        t = Tensor(x_first[i : i + 1])
        for d in range(cfg.gamma_depth):
            t = matmul(t, params[f"l1.gamma{i}.w{d}"]) + params[f"l1.gamma{i}.b{d}"]
            if d < cfg.gamma_depth - 1:
                t = tanh(t)
        rows.append(t)
    return concat(rows, axis=0)


def make_field(params, cfg, dim_x):
    """Shared CDE field: (M, dim_h) -> (M, dim_h, dim_x); returns (field, captured).

    The latent adjacency is built once per solve and reused by every field
    evaluation; ``captured`` lists the tape tensors the closure reads so the
    adjoint mode can route gradients to them.
    """
    A_hat = adaptive_adjacency(params["l1.field.E"]) if cfg.use_agc else None
    w1, b1 = params["l1.field.w1"], params["l1.field.b1"]
    w2, b2 = params["l1.field.w2"], params["l1.field.b2"]
    w3, b3 = params["l1.field.w3"], params["l1.field.b3"]

    def field(h):
        t = tanh(_agc_apply(h, A_hat, w1, b1))
        t = _agc_apply(t, A_hat, w2, b2)
        t = tanh(matmul(t, w3) + b3)
        return reshape(t, (h.data.shape[0], cfg.dim_h, dim_x))

    captured = [w1, b1, w2, b2, w3, b3]
    if A_hat is not None:
        captured.append(A_hat)
    return field, captured


def field_G(H, params, cfg, dim_x):
    """One field evaluation (useful on its own for tests and probes)."""
    field, _ = make_field(params, cfg, dim_x)
    return field(H)


def encode_periods(windows, params, cfg, solver):
    """Encode K recent periods of all M series into final hidden states.

    ``windows[i][j]`` is the (len_j, dim_x) observation block of series i in
    input period j.  All series must share the same total length; the K
    periods are concatenated into one control path per series (knot times are
    the observation indices 1..T), and the stacked state is integrated
    jointly under the shared field.
    """
    if len(windows) != cfg.m:
        raise ValueError(f"expected {cfg.m} series, got {len(windows)}")
    series = [np.concatenate([np.asarray(p, dtype=np.float64) for p in w], axis=0) for w in windows]
    T = series[0].shape[0]
    for i, s in enumerate(series):
        if s.shape[0] != T:
            raise ValueError(f"series {i} has total length {s.shape[0]}, expected {T}")
    if T < 2:
        raise ValueError("need at least two observations")
    dim_x = series[0].shape[1]
    times = np.arange(1, T + 1, dtype=np.float64)
    paths = [fit_path(times, s) for s in series]
    h0 = embed_initial(np.stack([s[0] for s in series]), params, cfg)
    field, captured = make_field(params, cfg, dim_x)
    return integrate_cde(h0, field, paths, 1.0, float(T), solver, params=captured)
