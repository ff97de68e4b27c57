"""Attention-based parameter generation over the target computation graph.

A period representation is mapped (one bias-free affine) to an initial query
per parameter node, the queries are refined by a graph network over the
computation-graph adjacency (GAT by default; GCN and AGC are swappable), and
each node's refined query scores C learnable candidate tensors through a key
matrix.  The generated parameter is the attention-weighted sum of candidates;
an argmax variant returns the single best candidate verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import xavier_uniform, zeros
from .tape import (
    Tensor,
    concat,
    leaky_relu,
    matmul,
    relu,
    reshape,
    softmax,
    stack,
    tanh,
    transpose,
)

GRAPH_FNS = ("gat", "gcn", "agc")


@dataclass
class L2Config:
    dim_z: int = 512
    dim_q: int = 128
    heads: int = 4
    depth: int = 3
    hidden: int = 128
    candidates: int = 3
    graph_fn: str = "gat"
    embed_dim: int = 32
    cand_jitter: float = 0.25

    def __post_init__(self):
        if self.candidates < 1:
            raise ValueError("need at least one candidate")
        if self.graph_fn not in GRAPH_FNS:
            raise ValueError(f"unknown graph function {self.graph_fn!r}")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by the head count")
        if self.depth < 1:
            raise ValueError("depth must be positive")
        if self.cand_jitter < 0:
            raise ValueError("candidate jitter must be non-negative")


def _layer_dims(cfg):
    """(din, dout_per_head_or_total) for each refinement layer."""
    dims = []
    din = cfg.dim_z
    for d in range(cfg.depth):
        dout = cfg.dim_q if d == cfg.depth - 1 else cfg.hidden
        dims.append((din, dout))
        din = dout
    return dims


def init_l2_params(cfg, graph, dim_h, rng):
    """Query map, graph-refinement weights, per-node keys, and candidates."""
    L = graph.size
    p = {"l2.phi.w": xavier_uniform(rng, (dim_h, L * cfg.dim_z))}
    if cfg.graph_fn == "gat":
        for d, (din, dout) in enumerate(_layer_dims(cfg)):
            per_head = dout if d == cfg.depth - 1 else dout // cfg.heads
            for k in range(cfg.heads):
                p[f"l2.gat{d}.h{k}.w"] = xavier_uniform(rng, (din, per_head))
                p[f"l2.gat{d}.h{k}.asrc"] = xavier_uniform(rng, (per_head, 1))[:, 0]
                p[f"l2.gat{d}.h{k}.adst"] = xavier_uniform(rng, (per_head, 1))[:, 0]
    else:
        prefix = "l2.gcn" if cfg.graph_fn == "gcn" else "l2.agcq"
        if cfg.graph_fn == "agc":
            p["l2.agcq.E"] = xavier_uniform(rng, (L, cfg.embed_dim))
        for d, (din, dout) in enumerate(_layer_dims(cfg)):
            p[f"{prefix}{d}.w"] = xavier_uniform(rng, (din, dout))
            p[f"{prefix}{d}.b"] = zeros((dout,))
    for l in range(L):
        p[f"l2.key{l}"] = xavier_uniform(rng, (cfg.dim_q, cfg.candidates))
    for l, (name, shape) in enumerate(graph.nodes):
        # candidates share a plausible base draw and spread by a small jitter:
        # a tight initial convex hull trains far faster on narrow targets
        base = xavier_uniform(rng, shape) if len(shape) > 1 else zeros(shape)
        for c in range(cfg.candidates):
            p[f"bank.n{l}.c{c}"] = base + cfg.cand_jitter * xavier_uniform(rng, shape)
    return p


def initial_queries(h, params, L, dim_z):
    """Bias-free affine from (M, dim_h) to per-node queries (M, L, dim_z)."""
    z = matmul(h, params["l2.phi.w"])
    return reshape(z, (h.data.shape[0], L, dim_z))


def refine_queries(z, adjacency, params, cfg):
    """Graph-refine (M, L, dim_z) queries to (M, L, dim_q) over ``adjacency``."""
    L = adjacency.shape[0]
    if L < 1:
        raise ValueError("empty parameter graph")
    if z.data.shape[1] != L:
        raise ValueError("query count does not match the graph")
    if cfg.graph_fn == "gat":
        return _refine_gat(z, adjacency, params, cfg)
    if cfg.graph_fn == "gcn":
        return _refine_gcn(z, adjacency, params, cfg)
    return _refine_agc(z, params, cfg)


def _refine_gat(z, adjacency, params, cfg):
    mask = np.where(adjacency > 0, 0.0, -1e30)  # additive mask over edges
    t = z
    for d in range(cfg.depth):
        last = d == cfg.depth - 1
        heads = []
        for k in range(cfg.heads):
            w = params[f"l2.gat{d}.h{k}.w"]
            wz = matmul(t, w)  # (M, L, per_head)
            s = matmul(wz, params[f"l2.gat{d}.h{k}.asrc"])  # (M, L)
            r = matmul(wz, params[f"l2.gat{d}.h{k}.adst"])
            logits = leaky_relu(
                reshape(s, s.data.shape + (1,)) + reshape(r, r.data.shape[:-1] + (1, r.data.shape[-1]))
            )
            alpha = softmax(logits + mask)
            heads.append(matmul(alpha, wz))
        if last:
            out = heads[0]
            for extra in heads[1:]:
                out = out + extra
            t = out * (1.0 / cfg.heads)
        else:
            t = tanh(concat(heads, axis=-1))
    return t


def _gcn_propagator(adjacency):
    deg = adjacency.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]


def _refine_gcn(z, adjacency, params, cfg):
    prop = _gcn_propagator(adjacency.astype(np.float64))
    t = z
    for d in range(cfg.depth):
        t = matmul(matmul(prop, t), params[f"l2.gcn{d}.w"]) + params[f"l2.gcn{d}.b"]
        if d < cfg.depth - 1:
            t = tanh(t)
    return t


def _refine_agc(z, params, cfg):
    E = params["l2.agcq.E"]
    A_hat = softmax(relu(matmul(E, transpose(E, (1, 0)))))
    t = z
    for d in range(cfg.depth):
        t = matmul(t + matmul(A_hat, t), params[f"l2.agcq{d}.w"]) + params[f"l2.agcq{d}.b"]
        if d < cfg.depth - 1:
            t = tanh(t)
    return t


def attention_coeffs(q, key):
    """Softmax of query-key scores; rows live on the C-simplex."""
    return softmax(matmul(q, key))


def node_coefficients(q, params, L):
    """Per-node attention coefficients from refined queries (M, L, dim_q)."""
    return [attention_coeffs(q[:, l, :], params[f"l2.key{l}"]) for l in range(L)]


def assemble_params(coeffs, params, graph, candidates):
    """Blend candidates per node: theta_l = sum_c a_c * cand_c.

    Returns a dict mapping node names to (M, *shape) tensors.
    """
    out = {}
    for l, (name, shape) in enumerate(graph.nodes):
        a = coeffs[l]
        if a.data.shape[-1] != candidates:
            raise ValueError("coefficient count does not match the candidate bank")
        flat = stack([reshape(params[f"bank.n{l}.c{c}"], (-1,)) for c in range(candidates)])
        blended = matmul(a, flat)
        out[name] = reshape(blended, (a.data.shape[0],) + tuple(shape))
    return out


def argmax_select(coeffs, params, graph, candidates):
    """Pick each node's highest-coefficient candidate verbatim.

    Ties break toward the lowest index.  Returns (indices, per-series list of
    parameter dicts); the dicts reference the candidate leaf tensors directly,
    so gradients flow only into the selected candidates.
    """
    M = coeffs[0].data.shape[0]
    L = graph.size
    idx = np.zeros((M, L), dtype=np.int64)
    for l in range(L):
        idx[:, l] = np.argmax(coeffs[l].data, axis=-1)
    selected = []
    for i in range(M):
        sel = {}
        for l, (name, _) in enumerate(graph.nodes):
            sel[name] = params[f"bank.n{l}.c{int(idx[i, l])}"]
        selected.append(sel)
    return idx, selected


def generate(h, params, graph, cfg):
    """Full generation pass: representations -> blended parameter sets.

    Returns (per-node blended tensors keyed by name, per-node coefficients).
    """
    z = initial_queries(h, params, graph.size, cfg.dim_z)
    q = refine_queries(z, graph.adjacency, params, cfg)
    coeffs = node_coefficients(q, params, graph.size)
    blended = assemble_params(coeffs, params, graph, cfg.candidates)
    return blended, coeffs


def paramset_for_series(blended, graph, i):
    """Slice the per-series parameter set out of the batched blend."""
    return {name: blended[name][i] for name, _ in graph.nodes}
