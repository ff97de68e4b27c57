"""Training loop: period mini-batches, the composite loss, and checkpoints.

Each mini-batch pairs K input periods with a target period b (K+1 <= b <=
N-1).  The batch with b = N-1 is held out as validation (the second-to-last
period); earlier batches drive the Adam updates.  The loss is the pooled
forecast MSE under the blended parameters plus lambda times the same MSE
under each node's argmax-selected candidate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .layer1 import L1Config, encode_periods, init_l1_params
from .layer2 import L2Config, argmax_select, generate, init_l2_params, paramset_for_series
from .optim import AdamState, DivergenceError, adam_step
from .paths import SolverConfig
from .tape import Tape, Tensor, grad
from .targets import build_param_graph, forecast, mse


@dataclass
class TrainConfig:
    k: int = 2
    lam: float = 0.1
    lr: float = 1e-2
    weight_decay: float = 1e-6
    pair_batch: int = 256
    epochs: int = 300
    patience: int = 50
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.k < 1:
            raise ValueError("K must be positive")


@dataclass(frozen=True)
class PeriodBatch:
    inputs: tuple  # K period indices b-K .. b-1 (1-based)
    target: int  # period index b


def make_period_batches(n, k):
    """One batch per target period b in [K+1, N-1]; count N-1-K."""
    if n < k + 2:
        raise ValueError(f"insufficient periods: N={n} admits no batch for K={k}")
    return [PeriodBatch(tuple(range(b - k, b)), b) for b in range(k + 1, n)]


def make_pairs(period, s_in, s_out):
    """All maximal sliding (input, target) pairs of one period.

    Returns (windows, targets) with shapes (P, s_in, d) and (P, s_out, d),
    P = T - s_in - s_out + 1.
    """
    period = np.asarray(period, dtype=np.float64)
    T = period.shape[0]
    count = T - s_in - s_out + 1
    if count < 1:
        raise ValueError(f"period of length {T} too short for s_in={s_in}, s_out={s_out}")
    windows = np.stack([period[i : i + s_in] for i in range(count)])
    targets = np.stack([period[i + s_in : i + s_in + s_out] for i in range(count)])
    return windows, targets


def pair_hash(windows, targets):
    """Digest of the exact evaluation pairs (shared-harness check)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(windows, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(targets, dtype="<f8").tobytes())
    return h.hexdigest()


class HyperGPAModel:
    """Bundles the hypernetwork parameters with the target architecture."""

    def __init__(self, arch, l1cfg, l2cfg, rng):
        self.arch = arch
        self.graph = build_param_graph(arch)
        self.l1cfg = l1cfg
        self.l2cfg = l2cfg
        self.params = {}
        self.params.update(init_l1_params(l1cfg, arch.dim_x, rng))
        self.params.update(init_l2_params(l2cfg, self.graph, l1cfg.dim_h, rng))

    def lift(self, tape):
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def constants(self):
        return {k: Tensor(v) for k, v in self.params.items()}

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def generate_paramsets(self, corpus, input_periods, solver=None):
        """Numpy parameter sets per series from the given input periods."""
        p = self.constants()
        windows = [
            [corpus.period(i, j) for j in input_periods] for i in range(self.l1cfg.m)
        ]
        h = encode_periods(windows, p, self.l1cfg, solver or self.default_solver())
        blended, coeffs = generate(h, p, self.graph, self.l2cfg)
        sets = []
        for i in range(self.l1cfg.m):
            sets.append({k: v.data[i] for k, v in blended.items()})
        return sets, coeffs

    def default_solver(self):
        return SolverConfig()


@dataclass
class ModelState:
    model: HyperGPAModel
    corpus: object  # normalized TimeSeriesCorpus
    cfg: TrainConfig


def hypergpa_loss(batch, state, pair_indices=None, tape=None, lifted=None):
    """Composite loss on one period batch.

    Returns (loss Tensor, diagnostics dict with mse1/mse2/per-series terms).
    With lambda = 0 the loss is exactly the blended-parameter MSE; the
    argmax-candidate term is still evaluated for diagnostics but stays off
    the gradient path.
    """
    model, corpus, cfg = state.model, state.corpus, state.cfg
    arch = model.arch
    if tape is None:
        tape = Tape()
    p = lifted if lifted is not None else model.lift(tape)

    windows_in = [[corpus.period(i, j) for j in batch.inputs] for i in range(corpus.m)]
    h = encode_periods(windows_in, p, model.l1cfg, cfg.solver)
    blended, coeffs = generate(h, p, model.graph, model.l2cfg)
    idx, selected = argmax_select(coeffs, p, model.graph, model.l2cfg.candidates)

    per_series_mse = []
    mse1 = None
    mse2 = None
    for i in range(corpus.m):
        win, tgt = make_pairs(corpus.period(i, batch.target), arch.s_in, arch.s_out)
        if pair_indices is not None:
            win, tgt = win[pair_indices], tgt[pair_indices]
        theta = paramset_for_series(blended, model.graph, i)
        m1 = mse(forecast(arch, theta, win, cfg.solver), tgt)
        m2 = mse(forecast(arch, selected[i], win, cfg.solver), tgt)
        per_series_mse.append(float(m1.data))
        mse1 = m1 if mse1 is None else mse1 + m1
        mse2 = m2 if mse2 is None else mse2 + m2
    mse1 = mse1 * (1.0 / corpus.m)
    mse2 = mse2 * (1.0 / corpus.m)
    loss = mse1 if cfg.lam == 0 else mse1 + mse2 * cfg.lam
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss on batch targeting period {batch.target}")
    diag = {
        "mse1": float(mse1.data),
        "mse2": float(mse2.data),
        "per_series_mse": per_series_mse,
        "argmax_indices": idx,
    }
    return loss, diag


def train(corpus, arch, cfg, l1cfg=None, l2cfg=None):
    """Train the hypernetwork; returns (model at best validation, history).

    History rows are (epoch, train_loss, mse1, mse2, val_mse).  Validation
    forecasts period N-1 from its K preceding periods; period N is never
    read.  Fully deterministic under ``cfg.seed``.
    """
    if corpus.n < cfg.k + 3:
        raise ValueError(f"need at least K+3={cfg.k + 3} periods, corpus has {corpus.n}")
    l1cfg = l1cfg or L1Config(m=corpus.m, k=cfg.k)
    l2cfg = l2cfg or L2Config()
    if l1cfg.m != corpus.m:
        raise ValueError("L1 config disagrees with the corpus on the series count")
    if l1cfg.k != cfg.k:
        raise ValueError("L1 config disagrees with the train config on K")
    rng = np.random.default_rng(cfg.seed)
    model = HyperGPAModel(arch, l1cfg, l2cfg, rng)
    state = ModelState(model, corpus, cfg)

    batches = make_period_batches(corpus.n, cfg.k)
    train_batches = [b for b in batches if b.target <= corpus.n - 2]
    val_batch = batches[-1]  # target N-1

    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = list(model.params.keys())
    best_val = np.inf
    best_params = model.clone_params()
    history = []
    stagnant = 0
    last_finite_epoch = -1

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_batches))
        losses, m1s, m2s = [], [], []
        try:
            for bi in order:
                batch = train_batches[bi]
                count = corpus.period_lengths()[batch.target - 1] - arch.s_in - arch.s_out + 1
                perm = rng.permutation(count)
                for start in range(0, count, cfg.pair_batch):
                    sel = np.sort(perm[start : start + cfg.pair_batch])
                    tape = Tape()
                    lifted = model.lift(tape)
                    loss, diag = hypergpa_loss(batch, state, pair_indices=sel, tape=tape, lifted=lifted)
                    grads = grad(loss, [lifted[k] for k in names])
                    adam_step(model.params, dict(zip(names, grads)), adam)
                    losses.append(float(loss.data))
                    m1s.append(diag["mse1"])
                    m2s.append(diag["mse2"])
            val_tape = Tape()
            val_tape.recording = False
            _, vdiag = hypergpa_loss(val_batch, state, tape=val_tape, lifted=model.constants())
            val_mse = vdiag["mse1"]
        except DivergenceError as e:
            raise DivergenceError(f"{e} (last finite epoch: {last_finite_epoch})") from None
        history.append(
            (epoch, float(np.mean(losses)), float(np.mean(m1s)), float(np.mean(m2s)), val_mse)
        )
        last_finite_epoch = epoch
        if val_mse < best_val:
            best_val = val_mse
            best_params = model.clone_params()
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= cfg.patience:
                break
    model.set_params(best_params)
    return model, history


# ---------------------------------------------------------------------------
# evaluation harness (shared with the baselines)


def eval_pairs(corpus, period, s_in, s_out):
    """Per-series evaluation pairs of one period: (M, P, s_in/s_out, d)."""
    wins, tgts = [], []
    for i in range(corpus.m):
        w, t = make_pairs(corpus.period(i, period), s_in, s_out)
        wins.append(w)
        tgts.append(t)
    return np.stack(wins), np.stack(tgts)


def forecast_with_paramsets(arch, paramsets, windows, solver=None):
    """Stack per-series forecasts from per-series parameter dicts (numpy)."""
    preds = []
    for i, pset in enumerate(paramsets):
        consts = {k: Tensor(v) for k, v in pset.items()}
        preds.append(forecast(arch, consts, windows[i], solver).data)
    return np.stack(preds)


def evaluate_hypergpa(model, corpus, target_period, solver=None):
    """Generate parameters for ``target_period`` and forecast its pairs."""
    inputs = list(range(target_period - model.l1cfg.k, target_period))
    if inputs[0] < 1:
        raise ValueError("not enough preceding periods")
    sets, _ = model.generate_paramsets(corpus, inputs, solver)
    windows, targets = eval_pairs(corpus, target_period, model.arch.s_in, model.arch.s_out)
    preds = forecast_with_paramsets(model.arch, sets, windows, solver)
    return preds, targets


# ---------------------------------------------------------------------------
# checkpoint and history files (deterministic bytes)


CHECKPOINT_FORMAT = "hypergpa-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, meta=None):
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint file")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        params = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return params, manifest["meta"]


def save_history(path, history):
    with open(path, "w", newline="") as fh:
        fh.write("epoch,train_loss,mse1,mse2,val_mse\n")
        for row in history:
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r}\n")
