"""Finite-difference gradient suites for every differentiable operation.

Each check builds a small randomized scalar objective and compares analytic
gradients against central differences.  Primitive ops and module operations
are held to 1e-4 relative error; full end-to-end paths (joint encoding, the
composite training loss) get 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import tape as tp
from .data import TimeSeriesCorpus
from .layer1 import L1Config, agc, embed_initial, encode_periods, field_G, init_l1_params, make_field
from .layer2 import (
    L2Config,
    attention_coeffs,
    generate,
    init_l2_params,
    initial_queries,
    refine_queries,
)
from .paths import SolverConfig
from .targets import TargetArch, build_param_graph, forecast, gru_step, init_target_params, lstm_step, mse
from .tape import Tensor, finite_diff_check
from .training import HyperGPAModel, ModelState, PeriodBatch, TrainConfig, hypergpa_loss

OP_TOL = 1e-4
E2E_TOL = 1e-3
EPS = 1e-5


def _r(rng, *shape):
    return rng.uniform(-0.8, 0.8, size=shape)


def _away_from_zero(rng, *shape):
    a = rng.uniform(0.2, 0.9, size=shape)
    return a * np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)


def op_checks(seed=0):
    """One finite-difference check per primitive op kind."""
    rng = np.random.default_rng(seed)
    checks = {}
    r34 = _r(rng, 3, 4)
    r43 = _r(rng, 4, 3)
    r4 = _r(rng, 4)
    r3 = _r(rng, 3)
    r33 = _r(rng, 3, 3)
    r37 = _r(rng, 3, 7)
    r233 = _r(rng, 2, 3, 3)
    r234 = _r(rng, 2, 3, 4)
    r22 = _r(rng, 2, 2)

    cases = {
        "add": (lambda ls: tp.sum_(tp.mul(tp.add(ls[0], ls[1]), r34)), [_r(rng, 3, 4), _r(rng, 1, 4)]),
        "sub": (lambda ls: tp.sum_(tp.mul(tp.sub(ls[0], ls[1]), r34)), [_r(rng, 3, 4), _r(rng, 3, 1)]),
        "mul": (lambda ls: tp.sum_(tp.mul(tp.mul(ls[0], ls[1]), r34)), [_r(rng, 3, 4), _r(rng, 4)]),
        "div": (
            lambda ls: tp.sum_(tp.mul(tp.div(ls[0], ls[1]), r34)),
            [_r(rng, 3, 4), _away_from_zero(rng, 3, 4)],
        ),
        "matmul": (lambda ls: tp.sum_(tp.mul(tp.matmul(ls[0], ls[1]), r33)), [_r(rng, 3, 4), r43]),
        "matmul_batched": (
            lambda ls: tp.sum_(tp.mul(tp.matmul(ls[0], ls[1]), r233)),
            [_r(rng, 2, 3, 4), r43],
        ),
        "matmul_vec": (lambda ls: tp.sum_(tp.mul(tp.matmul(ls[0], ls[1]), r4)), [_r(rng, 4, 4), _r(rng, 4)]),
        "sigmoid": (lambda ls: tp.sum_(tp.mul(tp.sigmoid(ls[0]), r34)), [_r(rng, 3, 4)]),
        "tanh": (lambda ls: tp.sum_(tp.mul(tp.tanh(ls[0]), r34)), [_r(rng, 3, 4)]),
        "relu": (lambda ls: tp.sum_(tp.mul(tp.relu(ls[0]), r34)), [_away_from_zero(rng, 3, 4)]),
        "leaky_relu": (
            lambda ls: tp.sum_(tp.mul(tp.leaky_relu(ls[0]), r34)),
            [_away_from_zero(rng, 3, 4)],
        ),
        "softmax": (lambda ls: tp.sum_(tp.mul(tp.softmax(ls[0]), r34)), [_r(rng, 3, 4)]),
        "layer_norm": (
            lambda ls: tp.sum_(tp.mul(tp.layer_norm(ls[0], ls[1], ls[2]), r34)),
            [_r(rng, 3, 4), 1.0 + _r(rng, 4) * 0.2, _r(rng, 4)],
        ),
        "concat": (
            lambda ls: tp.sum_(tp.mul(tp.concat([ls[0], ls[1]], axis=1), r37)),
            [_r(rng, 3, 4), _r(rng, 3, 3)],
        ),
        "stack": (
            lambda ls: tp.sum_(tp.mul(tp.stack([ls[0], ls[1]], axis=0), r234)),
            [_r(rng, 3, 4), _r(rng, 3, 4)],
        ),
        "getitem": (lambda ls: tp.sum_(tp.mul(ls[0][1:, :2], r22)), [_r(rng, 3, 4)]),
        "reshape": (lambda ls: tp.sum_(tp.mul(tp.reshape(ls[0], (4, 3)), r43)), [_r(rng, 3, 4)]),
        "transpose": (lambda ls: tp.sum_(tp.mul(tp.transpose(ls[0], (1, 0)), r43)), [_r(rng, 3, 4)]),
        "broadcast_to": (
            lambda ls: tp.sum_(tp.mul(tp.broadcast_to(ls[0], (3, 4)), r34)),
            [_r(rng, 1, 4)],
        ),
        "sum": (lambda ls: tp.sum_(tp.mul(tp.sum_(ls[0], axis=1), r3)), [_r(rng, 3, 4)]),
        "mean": (lambda ls: tp.sum_(tp.mul(tp.mean(ls[0], axis=0), r4)), [_r(rng, 3, 4)]),
    }
    for name, (f, params) in cases.items():
        checks[name] = finite_diff_check(f, params, EPS)
    return checks


def _toy_arch(kind):
    return TargetArch(kind=kind, dim_x=2, dim_h=3, s_in=4, s_out=2)


def module_checks(seed=0):
    """Module operations: cell steps, AGC, the shared field, L2 stages."""
    rng = np.random.default_rng(seed)
    checks = {}

    # GRU / LSTM steps through a scalar loss
    for kind, fn in (("gru_step", None), ("lstm_step", None)):
        arch = _toy_arch("gru" if kind == "gru_step" else "lstm")
        base = init_target_params(arch, np.random.default_rng(seed + 1))
        names = [n for n in base if n.startswith("cell0.")]
        x = _r(rng, 2, arch.dim_x)
        h = _r(rng, 2, arch.dim_h)
        c = _r(rng, 2, arch.dim_h)
        w = _r(rng, 2, arch.dim_h)

        def step_loss(leaves, names=names, kind=kind, x=x, h=h, c=c, w=w):
            p = dict(zip(names, leaves))
            if kind == "gru_step":
                out = gru_step(Tensor(x), Tensor(h), p)
            else:
                out, _ = lstm_step(Tensor(x), Tensor(h), Tensor(c), p)
            return tp.sum_(tp.mul(out, w))

        checks[kind] = finite_diff_check(step_loss, [base[n] + _r(rng, *base[n].shape) * 0.3 for n in names], EPS)

    # adaptive graph convolution
    Z = _r(rng, 3, 4)
    w_agc = _r(rng, 3, 2)

    def agc_loss(leaves):
        return tp.sum_(tp.mul(agc(Tensor(Z), leaves[0], leaves[1], leaves[2]), w_agc))

    checks["agc"] = finite_diff_check(agc_loss, [_r(rng, 3, 2), _r(rng, 4, 2), _r(rng, 2)], EPS)

    # shared field and initial embedding
    l1 = L1Config(m=2, dim_h=3, gamma_hidden=3, gamma_depth=2, embed_dim=3, agc_dim=3, k=2)
    l1p = init_l1_params(l1, 2, rng)
    l1names = list(l1p.keys())
    H = _r(rng, 2, 3)
    wf = _r(rng, 2, 3, 2)

    def field_loss(leaves):
        p = dict(zip(l1names, leaves))
        return tp.sum_(tp.mul(field_G(Tensor(H), p, l1, 2), wf))

    checks["field_G"] = finite_diff_check(field_loss, [l1p[n] for n in l1names], EPS)

    x0 = _r(rng, 2, 2)
    we = _r(rng, 2, 3)

    def embed_loss(leaves):
        p = dict(zip(l1names, leaves))
        return tp.sum_(tp.mul(embed_initial(x0, p, l1), we))

    checks["embed_initial"] = finite_diff_check(embed_loss, [l1p[n] for n in l1names], EPS)

    # L2 stages on a toy graph
    arch = _toy_arch("gru")
    graph = build_param_graph(arch)
    for gfn in ("gat", "gcn", "agc"):
        l2 = L2Config(dim_z=6, dim_q=4, heads=2, depth=2, hidden=4, candidates=2, graph_fn=gfn, embed_dim=3)
        l2p = init_l2_params(l2, graph, 3, np.random.default_rng(seed + 2))
        l2names = list(l2p.keys())
        hrep = _r(rng, 2, 3)
        if gfn == "gat":
            # central differences are invalid at the leaky-relu kink, so the
            # probe input must keep every attention logit clear of zero
            for probe_seed in range(100):
                cand = _r(np.random.default_rng(seed + 10 + probe_seed), 2, 3)
                if _gat_logit_margin(cand, graph, l2p, l2) > 50 * EPS:
                    hrep = cand
                    break
        wrng = np.random.default_rng(seed + 5)
        node_w = {name: _r(wrng, 2, *shape) for name, shape in graph.nodes}

        def l2_loss(leaves, l2=l2, l2names=l2names, hrep=hrep, node_w=node_w):
            p = dict(zip(l2names, leaves))
            blended, _ = generate(Tensor(hrep), p, graph, l2)
            total = None
            for name in blended:
                s = tp.sum_(tp.mul(blended[name], node_w[name]))
                total = s if total is None else total + s
            return total

        checks[f"l2_generate_{gfn}"] = finite_diff_check(l2_loss, [l2p[n] for n in l2names], EPS)

    # attention coefficients alone
    key0 = _r(rng, 4, 3)
    wq = _r(rng, 2, 3)

    def attn_loss(leaves):
        return tp.sum_(tp.mul(attention_coeffs(leaves[0], leaves[1]), wq))

    checks["attention_coeffs"] = finite_diff_check(attn_loss, [_r(rng, 2, 4), key0], EPS)

    # forecast gradients for each architecture kind
    for kind in ("gru", "lstm", "seq2seq-gru", "seq2seq-lstm", "odernn", "ncde"):
        arch = _toy_arch(kind)
        base = init_target_params(arch, np.random.default_rng(seed + 3))
        names = list(base.keys())
        win = _r(rng, 2, arch.s_in, arch.dim_x)
        tgt = _r(rng, 2, arch.s_out, arch.dim_x)
        solver = SolverConfig(steps_per_interval=2)

        def fc_loss(leaves, names=names, arch=arch, win=win, tgt=tgt, solver=solver):
            p = dict(zip(names, leaves))
            return mse(forecast(arch, p, win, solver), tgt)

        checks[f"forecast_{kind}"] = finite_diff_check(
            fc_loss, [base[n] + _r(rng, *base[n].shape) * 0.2 for n in names], EPS
        )
    return checks


def _gat_logit_margin(h, graph, params, cfg):
    """Smallest |attention logit| over all layers and heads (numpy replay)."""
    z = (h @ params["l2.phi.w"]).reshape(h.shape[0], graph.size, cfg.dim_z)
    adj = graph.adjacency
    margin = np.inf
    t = z
    for d in range(cfg.depth):
        outs = []
        for k in range(cfg.heads):
            wz = t @ params[f"l2.gat{d}.h{k}.w"]
            s = wz @ params[f"l2.gat{d}.h{k}.asrc"]
            r = wz @ params[f"l2.gat{d}.h{k}.adst"]
            logits = s[:, :, None] + r[:, None, :]
            margin = min(margin, np.abs(logits[:, adj > 0]).min())
            masked = np.where(adj[None] > 0, np.where(logits > 0, logits, 0.2 * logits), -1e30)
            e = np.exp(masked - masked.max(axis=-1, keepdims=True))
            outs.append(np.matmul(e / e.sum(axis=-1, keepdims=True), wz))
        t = np.mean(outs, axis=0) if d == cfg.depth - 1 else np.tanh(np.concatenate(outs, axis=-1))
    return margin


def _toy_corpus(rng, m=2, n=5, plen=8, d=2):
    blocks = []
    for i in range(m):
        series = []
        for j in range(n):
            t = np.arange(plen)
            block = np.stack(
                [0.6 * np.sin(0.7 * t + i + j * 0.3 + p) + 0.1 * rng.standard_normal(plen) for p in range(d)],
                axis=1,
            )
            series.append(block)
        blocks.append(series)
    return TimeSeriesCorpus(blocks)


def toy_setup(seed=0, lam=0.1):
    """A 2-series toy model/corpus pair shared by end-to-end checks."""
    rng = np.random.default_rng(seed)
    corpus = _toy_corpus(rng)
    arch = TargetArch(kind="gru", dim_x=2, dim_h=3, s_in=4, s_out=2)
    l1 = L1Config(m=2, dim_h=3, gamma_hidden=3, gamma_depth=2, embed_dim=3, agc_dim=3, k=2)
    l2 = L2Config(dim_z=4, dim_q=3, heads=1, depth=2, hidden=3, candidates=2, graph_fn="gat")
    cfg = TrainConfig(k=2, lam=lam, epochs=2, patience=2, pair_batch=4, seed=seed, solver=SolverConfig(1))
    model = HyperGPAModel(arch, l1, l2, rng)
    return model, corpus, cfg


def end_to_end_checks(seed=0):
    """Joint encoding and the full composite loss (1e-3 budget)."""
    checks = {}
    rng = np.random.default_rng(seed)

    l1 = L1Config(m=2, dim_h=3, gamma_hidden=3, gamma_depth=2, embed_dim=3, agc_dim=3, k=2)
    l1p = init_l1_params(l1, 2, rng)
    l1names = list(l1p.keys())
    windows = [[_r(rng, 4, 2), _r(rng, 4, 2)] for _ in range(2)]
    wenc = _r(rng, 2, 3)
    solver = SolverConfig(steps_per_interval=2)

    def enc_loss(leaves):
        p = dict(zip(l1names, leaves))
        return tp.sum_(tp.mul(encode_periods(windows, p, l1, solver), wenc))

    checks["encode_periods"] = finite_diff_check(enc_loss, [l1p[n] for n in l1names], EPS)

    model, corpus, cfg = toy_setup(seed)
    state = ModelState(model, corpus, cfg)
    batch = PeriodBatch((2, 3), 4)
    names = list(model.params.keys())

    def full_loss(leaves):
        t = leaves[0].tape
        lifted = dict(zip(names, leaves))
        loss, _ = hypergpa_loss(batch, state, pair_indices=np.array([0, 2]), tape=t, lifted=lifted)
        return loss

    checks["hypergpa_loss"] = finite_diff_check(full_loss, [model.params[n] for n in names], EPS)
    return checks


def run_all(seed=0):
    """All suites with their tolerances; returns {name: (err, tol, ok)}."""
    out = {}
    for name, err in op_checks(seed).items():
        out[f"op.{name}"] = (err, OP_TOL, err < OP_TOL)
    for name, err in module_checks(seed).items():
        out[f"module.{name}"] = (err, OP_TOL, err < OP_TOL)
    for name, err in end_to_end_checks(seed).items():
        out[f"e2e.{name}"] = (err, E2E_TOL, err < E2E_TOL)
    return out
