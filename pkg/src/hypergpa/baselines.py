"""Baselines: direct training, reversible instance normalization, HyperGRU.

Vanilla trains one parameter set per series on pairs pooled from all training
periods.  RevIN wraps any target model: the input window is z-scored over its
temporal dimension (per feature, per instance), passed through a learnable
affine, and the model output is de-normalized exactly.  HyperGRU is a GRU
whose gate pre-activations are rescaled step-by-step by vectors generated
from an auxiliary GRU running on the concatenated input and state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import AdamState, DivergenceError, adam_step, xavier_uniform, zeros
from .tape import Tape, Tensor, concat, div, grad, layer_norm, matmul, mul, reshape, sigmoid, sub, tanh
from .targets import forecast, init_target_params, mse
from .training import make_pairs

REVIN_STD_FLOOR = 1e-5
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# RevIN


@dataclass
class RevINState:
    mean: np.ndarray  # per-instance, per-feature temporal mean
    std: np.ndarray  # floored at 1e-5


def revin_apply(window, scale=None, shift=None):
    """Z-score a window over time, then the learnable affine.

    ``window`` is (s_in, d) or (P, s_in, d); statistics are taken over the
    temporal axis per feature and per instance.  ``scale``/``shift`` may be
    numpy arrays or Tensors (identity affine when omitted).  Returns
    (normalized, RevINState).
    """
    w = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
    mean = w.mean(axis=-2, keepdims=True)
    std = np.maximum(w.std(axis=-2, keepdims=True), REVIN_STD_FLOOR)
    state = RevINState(mean, std)
    norm = (w - mean) / std
    out = Tensor(norm) if scale is not None or isinstance(window, Tensor) else norm
    if scale is not None:
        out = mul(out, scale) + shift
    return out, state


def revin_invert(outputs, state, scale=None, shift=None):
    """Exactly reverse the affine and the z-score on model outputs."""
    out = outputs
    if scale is not None:
        out = div(sub(out, shift), scale)
    if isinstance(out, Tensor):
        return mul(out, state.std) + state.mean
    return out * state.std + state.mean


def init_revin_params(arch, rng):
    p = init_target_params(arch, rng)
    p["revin.scale"] = np.ones(arch.dim_x)
    p["revin.shift"] = np.zeros(arch.dim_x)
    return p


def revin_forecast(arch, p, window, solver=None):
    """Forecast through the RevIN wrapper; differentiable in the affine."""
    norm, state = revin_apply(window, p["revin.scale"], p["revin.shift"])
    pred = forecast(arch, p, norm, solver)
    return revin_invert(pred, state, p["revin.scale"], p["revin.shift"])


# ---------------------------------------------------------------------------
# HyperGRU


@dataclass(frozen=True)
class HyperGRUDims:
    dim_x: int
    dim_h: int
    dim_hyper: int = 8
    dim_embed: int = 4


GATES = ("r", "z", "g")


def init_hypergru_params(dims, rng):
    """Main GRU tensors, the auxiliary GRU over x+h, embeddings, and LN."""
    dx, dh, dhh, da = dims.dim_x, dims.dim_h, dims.dim_hyper, dims.dim_embed
    p = {}
    for y in GATES:
        p[f"w_x_{y}"] = xavier_uniform(rng, (dx, dh))
        p[f"w_h_{y}"] = xavier_uniform(rng, (dh, dh))
        p[f"b_{y}"] = zeros((dh,))
    for y in GATES:
        p[f"hyper.w_x_{y}"] = xavier_uniform(rng, (dx + dh, dhh))
        p[f"hyper.w_h_{y}"] = xavier_uniform(rng, (dhh, dhh))
        p[f"hyper.b_{y}"] = zeros((dhh,))
    for y in GATES:
        for tag in ("h", "x", "b"):
            out = dh
            p[f"embed.w_{tag}_{y}"] = xavier_uniform(rng, (dhh, da))
            p[f"embed.b_{tag}_{y}"] = zeros((da,))
            p[f"scale.w_{tag}_{y}"] = xavier_uniform(rng, (da, out))
            p[f"scale.b_{tag}_{y}"] = np.ones(out) if tag != "b" else zeros((out,))
    for name in ("hyper.r", "hyper.z", "hyper.g", "main.r", "main.z", "main.g"):
        p[f"ln.{name}.gain"] = np.ones(dhh if name.startswith("hyper") else dh)
        p[f"ln.{name}.bias"] = zeros((dhh if name.startswith("hyper") else dh,))
    return p


def _maybe_ln(x, p, name, use_ln):
    if not use_ln:
        return x
    return layer_norm(x, p[f"ln.{name}.gain"], p[f"ln.{name}.bias"], eps=LN_EPS)


def hypergru_step(x, h, h_hyper, p, use_ln=True):
    """One HyperGRU update; returns (h', hyper state').

    The auxiliary GRU reads x concatenated with h and emits, per main gate,
    three embedding vectors that become multiplicative rescalings of the
    input and state terms and an additive vector replacing the gate bias.
    With the rescalings forced to one and layer norm disabled this reduces
    bitwise to the plain GRU on the shared weights.
    """
    xh = concat([x, h], axis=-1)

    def hyper_gate(y, act):
        pre = matmul(xh, p[f"hyper.w_x_{y}"]) + matmul(h_hyper, p[f"hyper.w_h_{y}"]) + p[f"hyper.b_{y}"]
        return act(_maybe_ln(pre, p, f"hyper.{y}", use_ln))

    r_h = hyper_gate("r", sigmoid)
    z_h = hyper_gate("z", sigmoid)
    pre_g = matmul(xh, p["hyper.w_x_g"]) + mul(r_h, matmul(h_hyper, p["hyper.w_h_g"])) + p["hyper.b_g"]
    g_h = tanh(_maybe_ln(pre_g, p, "hyper.g", use_ln))
    h_hyper_new = mul(sub(1.0, z_h), g_h) + mul(z_h, h_hyper)

    def d_vec(tag, y):
        a = matmul(h_hyper, p[f"embed.w_{tag}_{y}"]) + p[f"embed.b_{tag}_{y}"]
        return matmul(a, p[f"scale.w_{tag}_{y}"]) + p[f"scale.b_{tag}_{y}"]

    def main_gate(y, act, r=None):
        state_term = matmul(h, p[f"w_h_{y}"])
        if r is not None:
            state_term = mul(r, mul(d_vec("h", y), state_term))
        else:
            state_term = mul(d_vec("h", y), state_term)
        pre = mul(d_vec("x", y), matmul(x, p[f"w_x_{y}"])) + state_term + d_vec("b", y)
        return act(_maybe_ln(pre, p, f"main.{y}", use_ln))

    r = main_gate("r", sigmoid)
    z = main_gate("z", sigmoid)
    g = main_gate("g", tanh, r=r)
    h_new = mul(sub(1.0, z), g) + mul(z, h)
    return h_new, h_hyper_new


def init_hypergru_forecaster(arch, dims, rng):
    p = init_hypergru_params(dims, rng)
    p["head.w"] = xavier_uniform(rng, (arch.dim_h, arch.s_out * arch.dim_x))
    p["head.b"] = zeros((arch.s_out * arch.dim_x,))
    return p


def hypergru_forecast(arch, dims, p, window, use_ln=True):
    w = window if isinstance(window, Tensor) else Tensor(np.asarray(window, dtype=np.float64))
    single = w.data.ndim == 2
    if single:
        w = reshape(w, (1,) + w.data.shape)
    P = w.data.shape[0]
    h = Tensor(np.zeros((P, arch.dim_h)))
    hh = Tensor(np.zeros((P, dims.dim_hyper)))
    for k in range(arch.s_in):
        h, hh = hypergru_step(w[:, k, :], h, hh, p, use_ln=use_ln)
    out = matmul(h, p["head.w"]) + p["head.b"]
    out = reshape(out, (P, arch.s_out, arch.dim_x))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# direct (per-series) training shared by Vanilla / RevIN / HyperGRU


def direct_train(corpus, arch, cfg, init_fn, forecast_fn):
    """Adam-train one parameter set per series on all training-period pairs.

    ``init_fn(rng) -> params``; ``forecast_fn(params, windows) -> Tensor``.
    Validation is the second-to-last period; the best-validation parameters
    are returned per series together with per-epoch histories.
    """
    if corpus.n < 3:
        raise ValueError("need train, validation, and test periods")
    rng = np.random.default_rng(cfg.seed)
    results = []
    histories = []
    for i in range(corpus.m):
        params = init_fn(rng)
        names = list(params.keys())
        adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        train_w, train_t = [], []
        for j in range(1, corpus.n - 1):
            w, t = make_pairs(corpus.period(i, j), arch.s_in, arch.s_out)
            train_w.append(w)
            train_t.append(t)
        train_w = np.concatenate(train_w)
        train_t = np.concatenate(train_t)
        val_w, val_t = make_pairs(corpus.period(i, corpus.n - 1), arch.s_in, arch.s_out)

        best_val = np.inf
        best = {k: v.copy() for k, v in params.items()}
        history = []
        stagnant = 0
        for epoch in range(cfg.epochs):
            perm = rng.permutation(train_w.shape[0])
            losses = []
            for start in range(0, len(perm), cfg.pair_batch):
                sel = np.sort(perm[start : start + cfg.pair_batch])
                tape = Tape()
                lifted = {k: tape.leaf(v) for k, v in params.items()}
                loss = mse(forecast_fn(lifted, train_w[sel]), train_t[sel])
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"non-finite loss for series {i} at epoch {epoch}")
                grads = grad(loss, [lifted[k] for k in names])
                adam_step(params, dict(zip(names, grads)), adam)
                losses.append(float(loss.data))
            val_pred = forecast_fn({k: Tensor(v) for k, v in params.items()}, val_w)
            val_mse = float(mse(val_pred, val_t).data)
            history.append((epoch, float(np.mean(losses)), val_mse))
            if val_mse < best_val:
                best_val = val_mse
                best = {k: v.copy() for k, v in params.items()}
                stagnant = 0
            else:
                stagnant += 1
                if stagnant >= cfg.patience:
                    break
        results.append(best)
        histories.append(history)
    return results, histories


def vanilla_train(corpus, arch, cfg, solver=None):
    """Directly train the target architecture, one parameter set per series."""
    return direct_train(
        corpus,
        arch,
        cfg,
        init_fn=lambda rng: init_target_params(arch, rng),
        forecast_fn=lambda p, w: forecast(arch, p, w, solver),
    )


def revin_train(corpus, arch, cfg, solver=None):
    return direct_train(
        corpus,
        arch,
        cfg,
        init_fn=lambda rng: init_revin_params(arch, rng),
        forecast_fn=lambda p, w: revin_forecast(arch, p, w, solver),
    )


def hypergru_train(corpus, arch, cfg, dims=None):
    dims = dims or HyperGRUDims(arch.dim_x, arch.dim_h)
    return direct_train(
        corpus,
        arch,
        cfg,
        init_fn=lambda rng: init_hypergru_forecaster(arch, dims, rng),
        forecast_fn=lambda p, w: hypergru_forecast(arch, dims, p, w),
    )
