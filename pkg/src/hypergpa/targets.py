"""Target forecaster architectures and their parameter computation graphs.

Six seq-to-seq forecasters are supported: GRU, LSTM, SeqToSeq variants of
both, ODE-RNN, and an NCDE model.  Every trainable tensor of an architecture
is one node of its parameter graph; the edge rule connects (a) parameters of
the same affine transform, (b) parameters of operations joined by dataflow
(gate -> state -> next gate/layer, encoder -> decoder, cell -> head), and
adds (c) a self-loop on every node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .optim import xavier_uniform, zeros
from .paths import (
    SolverConfig,
    _time_grid as _grid,
    fit_path,
    integrate_cde,
    integrate_ode,
    spline_deriv_weights,
    spline_weight_matrix,
)
from .tape import Tensor, matmul, mul, reshape, sigmoid, stack, sub, tanh

KINDS = ("gru", "lstm", "seq2seq-gru", "seq2seq-lstm", "odernn", "ncde")

GATES_GRU = ("r", "z", "g")
GATES_LSTM = ("i", "f", "g", "o")


@dataclass(frozen=True)
class TargetArch:
    kind: str
    dim_x: int
    dim_h: int
    s_in: int
    s_out: int
    n_layers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        for field in ("dim_x", "dim_h", "s_in", "s_out", "n_layers"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")


@dataclass
class ParamGraph:
    """Nodes (name, shape) plus a symmetric adjacency with full diagonal."""

    nodes: list
    adjacency: np.ndarray

    @property
    def size(self):
        return len(self.nodes)

    def shapes(self):
        return {name: shape for name, shape in self.nodes}


def _cell_ops(prefix, gates, dim_in, dim_h):
    ops = []
    for y in gates:
        ops.append(
            (
                f"{prefix}{y}",
                [
                    (f"{prefix}w_x_{y}", (dim_in, dim_h)),
                    (f"{prefix}w_h_{y}", (dim_h, dim_h)),
                    (f"{prefix}b_{y}", (dim_h,)),
                ],
            )
        )
    return ops


def _field_ops(prefix, dim_h, out_dim, depth):
    """Tanh MLP field: depth+1 linear layers, hidden width dim_h."""
    ops = []
    din = dim_h
    for i in range(depth + 1):
        dout = out_dim if i == depth else dim_h
        ops.append(
            (
                f"{prefix}f{i}",
                [(f"{prefix}f{i}.w", (din, dout)), (f"{prefix}f{i}.b", (dout,))],
            )
        )
        din = dim_h
    return ops


def _arch_ops(arch):
    """Apply op groups and the dataflow edges between them."""
    dx, dh, nl = arch.dim_x, arch.dim_h, arch.n_layers
    head_out = arch.s_out * dx
    ops = []
    edges = []

    def clique(names):
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                edges.append((a, b))

    if arch.kind in ("gru", "lstm"):
        gates = GATES_GRU if arch.kind == "gru" else GATES_LSTM
        layer_ops = []
        for l in range(nl):
            din = dx if l == 0 else dh
            cell = _cell_ops(f"cell{l}.", gates, din, dh)
            ops.extend(cell)
            layer_ops.append([name for name, _ in cell])
            clique(layer_ops[-1])
        for a, b in zip(layer_ops[:-1], layer_ops[1:]):
            for x in a:
                for y in b:
                    edges.append((x, y))
        ops.append(("head", [("head.w", (dh, head_out)), ("head.b", (head_out,))]))
        for x in layer_ops[-1]:
            edges.append((x, "head"))
    elif arch.kind in ("seq2seq-gru", "seq2seq-lstm"):
        gates = GATES_GRU if arch.kind.endswith("gru") else GATES_LSTM
        sides = {}
        for side, in0 in (("enc", dx), ("dec", dx)):
            layer_ops = []
            for l in range(nl):
                din = in0 if l == 0 else dh
                cell = _cell_ops(f"{side}{l}.", gates, din, dh)
                ops.extend(cell)
                layer_ops.append([name for name, _ in cell])
                clique(layer_ops[-1])
            for a, b in zip(layer_ops[:-1], layer_ops[1:]):
                for x in a:
                    for y in b:
                        edges.append((x, y))
            sides[side] = layer_ops
        for enc_l, dec_l in zip(sides["enc"], sides["dec"]):
            for x in enc_l:
                for y in dec_l:
                    edges.append((x, y))
        ops.append(("head", [("head.w", (dh, dx)), ("head.b", (dx,))]))
        for x in sides["dec"][-1]:
            edges.append((x, "head"))
    elif arch.kind == "odernn":
        field = _field_ops("", dh, dh, nl)
        ops.extend(field)
        fnames = [name for name, _ in field]
        for a, b in zip(fnames[:-1], fnames[1:]):
            edges.append((a, b))
        cell = _cell_ops("cell.", GATES_GRU, dx, dh)
        ops.extend(cell)
        cnames = [name for name, _ in cell]
        clique(cnames)
        for f in fnames:
            for c in cnames:
                edges.append((f, c))
        ops.append(("head", [("head.w", (dh, head_out)), ("head.b", (head_out,))]))
        for c in cnames:
            edges.append((c, "head"))
    elif arch.kind == "ncde":
        ops.append(("embed", [("embed.w", (dx, dh)), ("embed.b", (dh,))]))
        field = _field_ops("", dh, dh * dx, nl)
        ops.extend(field)
        fnames = [name for name, _ in field]
        for a, b in zip(fnames[:-1], fnames[1:]):
            edges.append((a, b))
        for f in fnames:
            edges.append(("embed", f))
        ops.append(("head", [("head.w", (dh, head_out)), ("head.b", (head_out,))]))
        for f in fnames:
            edges.append((f, "head"))
    return ops, edges


def build_param_graph(arch):
    """Enumerate every trainable tensor of ``arch`` as a graph node."""
    ops, op_edges = _arch_ops(arch)
    nodes = []
    op_members = {}
    for op_name, members in ops:
        op_members[op_name] = [name for name, _ in members]
        nodes.extend(members)
    index = {name: i for i, (name, _) in enumerate(nodes)}
    n = len(nodes)
    adj = np.eye(n, dtype=np.int64)

    def connect(a, b):
        adj[index[a], index[b]] = 1
        adj[index[b], index[a]] = 1

    for members in op_members.values():
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                connect(a, b)
    for a, b in op_edges:
        for x in op_members.get(a, [a] if a in index else []):
            for y in op_members.get(b, [b] if b in index else []):
                connect(x, y)
    return ParamGraph(nodes, adj)


def init_target_params(arch, rng):
    """Xavier-uniform matrices, zero biases, in graph-node order."""
    graph = build_param_graph(arch)
    out = {}
    for name, shape in graph.nodes:
        out[name] = xavier_uniform(rng, shape) if len(shape) > 1 else zeros(shape)
    return out


def check_paramset(graph, params):
    for name, shape in graph.nodes:
        if name not in params:
            raise ValueError(f"missing parameter {name!r}")
        arr = params[name].data if hasattr(params[name], "data") else params[name]
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} != {shape}")


# ---------------------------------------------------------------------------
# cell steps


def gru_step(x, h, p, prefix="cell0."):
    """One GRU update; ``x`` and ``h`` may carry a leading batch axis."""
    r = sigmoid(matmul(x, p[f"{prefix}w_x_r"]) + matmul(h, p[f"{prefix}w_h_r"]) + p[f"{prefix}b_r"])
    z = sigmoid(matmul(x, p[f"{prefix}w_x_z"]) + matmul(h, p[f"{prefix}w_h_z"]) + p[f"{prefix}b_z"])
    g = tanh(matmul(x, p[f"{prefix}w_x_g"]) + mul(r, matmul(h, p[f"{prefix}w_h_g"])) + p[f"{prefix}b_g"])
    return mul(sub(1.0, z), g) + mul(z, h)


def lstm_step(x, h, c, p, prefix="cell0."):
    """One LSTM update; returns (h', c')."""

    def gate(y):
        return matmul(x, p[f"{prefix}w_x_{y}"]) + matmul(h, p[f"{prefix}w_h_{y}"]) + p[f"{prefix}b_{y}"]

    i = sigmoid(gate("i"))
    f = sigmoid(gate("f"))
    g = tanh(gate("g"))
    o = sigmoid(gate("o"))
    c_new = mul(f, c) + mul(i, g)
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def _make_field(p, prefix, depth, out_rows, out_cols=None):
    """Tanh MLP over the hidden state; optionally reshaped to a matrix map."""

    def field(h):
        t = h
        for i in range(depth + 1):
            t = matmul(t, p[f"{prefix}f{i}.w"]) + p[f"{prefix}f{i}.b"]
            if i < depth:
                t = tanh(t)
        if out_cols is None:
            return t
        t = tanh(t)
        return reshape(t, t.data.shape[:-1] + (out_rows, out_cols))

    return field


# ---------------------------------------------------------------------------
# forecasting


def forecast(arch, params, window, solver=None):
    """Seq-to-seq forecast of ``s_out`` steps from an ``s_in`` window.

    ``window`` is (s_in, dim_x) or batched (P, s_in, dim_x), as a numpy array
    or a Tensor (so adaptation layers ahead of the model stay differentiable).
    The result matches ((P,) s_out, dim_x).
    """
    w = window if isinstance(window, Tensor) else Tensor(np.asarray(window, dtype=np.float64))
    single = w.data.ndim == 2
    if single:
        w = reshape(w, (1,) + w.data.shape)
    if w.data.shape[1] != arch.s_in or w.data.shape[2] != arch.dim_x:
        raise ValueError(f"window shape {w.data.shape[1:]} does not match (s_in, dim_x)")
    out = _forecast_batch(arch, params, w, solver or SolverConfig())
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forecast")
    return out[0] if single else out


def _forecast_batch(arch, p, w, solver):
    P, s_in, dx = w.data.shape
    dh, nl = arch.dim_h, arch.n_layers
    kind = arch.kind

    if kind in ("gru", "lstm"):
        hs = [Tensor(np.zeros((P, dh))) for _ in range(nl)]
        cs = [Tensor(np.zeros((P, dh))) for _ in range(nl)]
        for k in range(s_in):
            inp = w[:, k, :]
            for l in range(nl):
                if kind == "gru":
                    hs[l] = gru_step(inp, hs[l], p, prefix=f"cell{l}.")
                else:
                    hs[l], cs[l] = lstm_step(inp, hs[l], cs[l], p, prefix=f"cell{l}.")
                inp = hs[l]
        out = matmul(hs[-1], p["head.w"]) + p["head.b"]
        return reshape(out, (P, arch.s_out, dx))

    if kind in ("seq2seq-gru", "seq2seq-lstm"):
        is_gru = kind.endswith("gru")
        hs = [Tensor(np.zeros((P, dh))) for _ in range(nl)]
        cs = [Tensor(np.zeros((P, dh))) for _ in range(nl)]
        for k in range(s_in):
            inp = w[:, k, :]
            for l in range(nl):
                if is_gru:
                    hs[l] = gru_step(inp, hs[l], p, prefix=f"enc{l}.")
                else:
                    hs[l], cs[l] = lstm_step(inp, hs[l], cs[l], p, prefix=f"enc{l}.")
                inp = hs[l]
        # decoder starts from the last observation and feeds back predictions
        prev = w[:, -1, :]
        preds = []
        for _ in range(arch.s_out):
            inp = prev
            for l in range(nl):
                if is_gru:
                    hs[l] = gru_step(inp, hs[l], p, prefix=f"dec{l}.")
                else:
                    hs[l], cs[l] = lstm_step(inp, hs[l], cs[l], p, prefix=f"dec{l}.")
                inp = hs[l]
            prev = matmul(hs[-1], p["head.w"]) + p["head.b"]
            preds.append(prev)
        return stack(preds, axis=1)

    if kind == "odernn":
        field = _make_field(p, "", arch.n_layers, dh)
        h = Tensor(np.zeros((P, dh)))
        ode_cfg = SolverConfig(steps_per_interval=4)
        for k in range(s_in):
            if k > 0:
                h = integrate_ode(h, field, float(k), float(k + 1), ode_cfg)
            h = gru_step(w[:, k, :], h, p, prefix="cell.")
        out = matmul(h, p["head.w"]) + p["head.b"]
        return reshape(out, (P, arch.s_out, dx))

    if kind == "ncde":
        h0 = matmul(w[:, 0, :], p["embed.w"]) + p["embed.b"]
        field = _make_field(p, "", arch.n_layers, dh, dx)
        if w.node_id is None:
            times = np.arange(1, s_in + 1, dtype=np.float64)
            paths = [fit_path(times, w.data[i]) for i in range(P)]
            captured = [t for t in p.values() if isinstance(t, Tensor)]
            h = integrate_cde(h0, field, paths, 1.0, float(s_in), solver, params=captured)
        else:
            h = _integrate_cde_taped_window(h0, field, w, solver)
        out = matmul(h, p["head.w"]) + p["head.b"]
        return reshape(out, (P, arch.s_out, dx))

    raise ValueError(f"unknown target kind {kind!r}")


def _integrate_cde_taped_window(h0, field, w, solver):
    """RK4 CDE solve where X'(t) is a differentiable function of the window.

    The natural spline is linear in its knot values, so the channel
    derivative at any time is a fixed weight vector applied to the window;
    keeping that product on the tape lets gradients reach input-adaptation
    layers (e.g. a learnable normalization ahead of the model).
    """
    P, s_in, dx = w.data.shape
    times = np.arange(1, s_in + 1, dtype=np.float64)
    S = spline_weight_matrix(times)

    def xprime(t):
        wt = spline_deriv_weights(times, S, t)
        xp = matmul(Tensor(wt[None, :]), w)  # (P, 1, dx)
        return xp

    def rhs(h, t):
        return tp.sum_(mul(field(h), xprime(t)), axis=-1)

    steps = _grid(times, 1.0, float(s_in), solver.steps_per_interval)
    h = h0
    for i, (t, dt) in enumerate(steps):
        k1 = rhs(h, t)
        k2 = rhs(h + k1 * (dt / 2.0), t + dt / 2.0)
        k3 = rhs(h + k2 * (dt / 2.0), t + dt / 2.0)
        k4 = rhs(h + k3 * dt, t + dt)
        h = h + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
        if not np.isfinite(h.data).all():
            raise FloatingPointError(f"non-finite state at step {i}")
    return h


def mse(pred, truth):
    err = sub(pred, truth)
    return tp.mean(mul(err, err))


def as_tensors(tape_obj, params):
    """Lift a dict of arrays to leaves of ``tape_obj`` (insertion order kept)."""
    return {name: tape_obj.leaf(arr) for name, arr in params.items()}
