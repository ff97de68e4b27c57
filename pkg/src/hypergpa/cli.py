"""Command-line driver: synth, train, eval, gradcheck, bench.

Runs are configured by a flat key=value text file; command-line flags
override file keys.  Every run writes a ``config.resolved`` copy with all
defaults expanded, and all subcommands are bitwise reproducible under a
fixed seed.  Progress goes to stderr; machine-readable artifacts to files.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import baselines, gradcheck, metrics
from .data import SynthConfig, load_csv, normalize, synth_drift, write_csv
from .layer1 import L1Config
from .layer2 import GRAPH_FNS, L2Config
from .optim import DivergenceError
from .paths import SolverConfig
from .targets import KINDS, TargetArch
from .training import (
    TrainConfig,
    HyperGPAModel,
    eval_pairs,
    evaluate_hypergpa,
    forecast_with_paramsets,
    load_checkpoint,
    pair_hash,
    save_checkpoint,
    save_history,
    train,
)

METHODS = ("hypergpa", "vanilla", "revin", "hypergru")
GRU_FAMILY = ("gru", "seq2seq-gru")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "corpus.source": "synth",
    "corpus.csv": "",
    "corpus.synth.m": 4,
    "corpus.synth.n": 8,
    "corpus.synth.period_len": 48,
    "corpus.synth.dim_x": 2,
    "corpus.synth.drift": "amplitude-ramp",
    "corpus.synth.coupling": 0.3,
    "corpus.synth.noise": 0.05,
    "corpus.synth.seed": 0,
    "arch.kind": "gru",
    "arch.hidden": 16,
    "arch.layers": 1,
    "arch.s_in": 10,
    "arch.s_out": 2,
    "method": "hypergpa",
    "train.k": 2,
    "train.lambda": 0.1,
    "train.lr": 0.01,
    "train.weight_decay": 1e-06,
    "train.pair_batch": 256,
    "train.epochs": 120,
    "train.patience": 30,
    "solver.steps": 1,
    "solver.mode": "backprop",
    "l1.hidden": 32,
    "l1.gamma_hidden": 32,
    "l1.gamma_depth": 2,
    "l1.embed_dim": 32,
    "l1.agc_dim": 32,
    "l1.agc": True,
    "l2.dim_z": 512,
    "l2.dim_q": 128,
    "l2.heads": 4,
    "l2.depth": 3,
    "l2.hidden": 128,
    "l2.candidates": 3,
    "l2.graph_fn": "gat",
    "l2.cand_jitter": 0.25,
    "hypergru.dim_hyper": 8,
    "hypergru.dim_embed": 4,
    "seeds": "0",
    "out": "runs/default",
}


def _coerce(key, raw):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key: {key}")
    ref = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(ref, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for key {key}: {raw!r}") from None


def load_config(path):
    cfg = dict(DEFAULTS)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            cfg[key.strip()] = _coerce(key.strip(), raw)
    return cfg


def write_resolved(cfg, path):
    """All defaults expanded; the output location itself is not a parameter."""
    with open(path, "w", newline="") as fh:
        for key in sorted(cfg):
            if key == "out":
                continue
            fh.write(f"{key} = {cfg[key]}\n")


def validate(cfg):
    if cfg["method"] not in METHODS:
        raise ConfigError(f"bad value for key method: {cfg['method']!r}")
    if cfg["arch.kind"] not in KINDS:
        raise ConfigError(f"bad value for key arch.kind: {cfg['arch.kind']!r}")
    if cfg["method"] == "hypergru" and cfg["arch.kind"] not in GRU_FAMILY:
        raise ConfigError("incompatible method/arch: hypergru requires a GRU-family target (key method)")
    if cfg["l2.graph_fn"] not in GRAPH_FNS:
        raise ConfigError(f"bad value for key l2.graph_fn: {cfg['l2.graph_fn']!r}")
    if cfg["corpus.source"] not in ("synth", "csv"):
        raise ConfigError(f"bad value for key corpus.source: {cfg['corpus.source']!r}")
    if cfg["corpus.source"] == "csv" and not cfg["corpus.csv"]:
        raise ConfigError("corpus.source=csv requires key corpus.csv")


def seeds_of(cfg):
    try:
        seeds = [int(s) for s in str(cfg["seeds"]).split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad value for key seeds: {cfg['seeds']!r}") from None
    if not seeds:
        raise ConfigError("key seeds must list at least one seed")
    return seeds


def build_corpus(cfg):
    if cfg["corpus.source"] == "csv":
        return load_csv(cfg["corpus.csv"])
    return synth_drift(
        SynthConfig(
            m=cfg["corpus.synth.m"],
            n=cfg["corpus.synth.n"],
            period_len=cfg["corpus.synth.period_len"],
            dim_x=cfg["corpus.synth.dim_x"],
            drift=cfg["corpus.synth.drift"],
            coupling=cfg["corpus.synth.coupling"],
            noise=cfg["corpus.synth.noise"],
            seed=cfg["corpus.synth.seed"],
        )
    )


def _arch_for(cfg, corpus):
    return TargetArch(
        kind=cfg["arch.kind"],
        dim_x=corpus.dim,
        dim_h=cfg["arch.hidden"],
        s_in=cfg["arch.s_in"],
        s_out=cfg["arch.s_out"],
        n_layers=cfg["arch.layers"],
    )


def _train_cfg(cfg, seed):
    return TrainConfig(
        k=cfg["train.k"],
        lam=cfg["train.lambda"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        pair_batch=cfg["train.pair_batch"],
        epochs=cfg["train.epochs"],
        patience=cfg["train.patience"],
        seed=seed,
        solver=SolverConfig(cfg["solver.steps"], cfg["solver.mode"]),
    )


def _l1_cfg(cfg, corpus):
    return L1Config(
        m=corpus.m,
        dim_h=cfg["l1.hidden"],
        gamma_hidden=cfg["l1.gamma_hidden"],
        gamma_depth=cfg["l1.gamma_depth"],
        embed_dim=cfg["l1.embed_dim"],
        agc_dim=cfg["l1.agc_dim"],
        k=cfg["train.k"],
        use_agc=cfg["l1.agc"],
    )


def _l2_cfg(cfg):
    return L2Config(
        dim_z=cfg["l2.dim_z"],
        dim_q=cfg["l2.dim_q"],
        heads=cfg["l2.heads"],
        depth=cfg["l2.depth"],
        hidden=cfg["l2.hidden"],
        candidates=cfg["l2.candidates"],
        graph_fn=cfg["l2.graph_fn"],
        cand_jitter=cfg["l2.cand_jitter"],
    )


def _log(msg):
    print(msg, file=sys.stderr)


def _flatten_series_params(paramsets):
    flat = {}
    for i, pset in enumerate(paramsets):
        for k, v in pset.items():
            flat[f"series{i}.{k}"] = v
    return flat


def _unflatten_series_params(flat, m):
    sets = [{} for _ in range(m)]
    for k, v in flat.items():
        head, rest = k.split(".", 1)
        sets[int(head[len("series") :])][rest] = v
    return sets


def train_one(cfg, corpus_norm, arch, seed, out_dir):
    method = cfg["method"]
    tcfg = _train_cfg(cfg, seed)
    if method == "hypergpa":
        model, history = train(corpus_norm, arch, tcfg, _l1_cfg(cfg, corpus_norm), _l2_cfg(cfg))
        params = model.params
        history_rows = history
    else:
        if method == "vanilla":
            sets, hist = baselines.vanilla_train(corpus_norm, arch, tcfg, tcfg.solver)
        elif method == "revin":
            sets, hist = baselines.revin_train(corpus_norm, arch, tcfg, tcfg.solver)
        else:
            dims = baselines.HyperGRUDims(
                arch.dim_x, arch.dim_h, cfg["hypergru.dim_hyper"], cfg["hypergru.dim_embed"]
            )
            sets, hist = baselines.hypergru_train(corpus_norm, arch, tcfg, dims)
        params = _flatten_series_params(sets)
        history_rows = [(e, tl, float("nan"), float("nan"), v) for h in hist for (e, tl, v) in h]
    ckpt = os.path.join(out_dir, f"checkpoint-seed{seed}.bin")
    save_checkpoint(ckpt, params, meta={"method": method, "seed": seed})
    save_history(os.path.join(out_dir, f"history-seed{seed}.csv"), history_rows)
    return ckpt


def eval_one(cfg, corpus_norm, arch, seed, out_dir):
    method = cfg["method"]
    params, meta = load_checkpoint(os.path.join(out_dir, f"checkpoint-seed{seed}.bin"))
    if meta.get("method") != method:
        raise ConfigError(f"checkpoint was trained with method {meta.get('method')!r} (key method)")
    test_period = corpus_norm.n
    windows, targets = eval_pairs(corpus_norm, test_period, arch.s_in, arch.s_out)
    if method == "hypergpa":
        model = HyperGPAModel(arch, _l1_cfg(cfg, corpus_norm), _l2_cfg(cfg), np.random.default_rng(0))
        model.set_params(params)
        preds, targets = evaluate_hypergpa(model, corpus_norm, test_period, _train_cfg(cfg, seed).solver)
    else:
        sets = _unflatten_series_params(params, corpus_norm.m)
        solver = _train_cfg(cfg, seed).solver
        if method == "vanilla":
            preds = forecast_with_paramsets(arch, sets, windows, solver)
        elif method == "revin":
            preds = np.stack(
                [
                    baselines.revin_forecast(
                        arch, {k: np.asarray(v) for k, v in sets[i].items()}, windows[i], solver
                    ).data
                    for i in range(corpus_norm.m)
                ]
            )
        else:
            dims = baselines.HyperGRUDims(
                arch.dim_x, arch.dim_h, cfg["hypergru.dim_hyper"], cfg["hypergru.dim_embed"]
            )
            preds = np.stack(
                [
                    baselines.hypergru_forecast(arch, dims, sets[i], windows[i]).data
                    for i in range(corpus_norm.m)
                ]
            )
    return preds, targets


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, args):
    out = args.out or "corpus.csv"
    if args.seed:
        cfg["corpus.synth.seed"] = args.seed[0]
    corpus = build_corpus({**cfg, "corpus.source": "synth"})
    write_csv(corpus, out)
    write_resolved(cfg, out + ".config.resolved")
    _log(f"wrote corpus ({corpus.m} series x {corpus.n} periods) to {out}")
    return 0


def _prepare(cfg):
    corpus = build_corpus(cfg)
    corpus_norm, _ = normalize(corpus)
    arch = _arch_for(cfg, corpus_norm)
    return corpus_norm, arch


def cmd_train(cfg, args):
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "config.resolved"))
    corpus_norm, arch = _prepare(cfg)
    for seed in seeds_of(cfg):
        _log(f"training method={cfg['method']} target={arch.kind} seed={seed}")
        ckpt = train_one(cfg, corpus_norm, arch, seed, out_dir)
        _log(f"saved {ckpt}")
    return 0


def cmd_eval(cfg, args):
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "config.resolved"))
    corpus_norm, arch = _prepare(cfg)
    run = {"seeds": [], "metrics": [], "per_step_mse": []}
    for seed in seeds_of(cfg):
        preds, targets = eval_one(cfg, corpus_norm, arch, seed, out_dir)
        run["seeds"].append(seed)
        run["metrics"].append(metrics.compute_metrics(preds, targets))
        run["per_step_mse"].append(metrics.per_step_mse(preds, targets))
    report = metrics.emit_report({cfg["method"]: {arch.kind: run}}, out_dir, meta=_meta(cfg))
    _log(f"wrote report.json to {out_dir}")
    return 0


def _meta(cfg):
    return {"seeds": seeds_of(cfg), "method": cfg["method"], "target": cfg["arch.kind"]}


def cmd_gradcheck(cfg, args):
    results = gradcheck.run_all()
    failed = 0
    for name in sorted(results):
        err, tol, ok = results[name]
        print(f"{name}: max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if ok else 'FAIL'}")
        failed += 0 if ok else 1
    if failed:
        _log(f"{failed} gradient check(s) failed")
        return 2
    return 0


def cmd_bench(cfg, args):
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "config.resolved"))
    targets_list = args.target or [cfg["arch.kind"]]
    results = {"vanilla": {}, "hypergpa": {}}
    for kind in targets_list:
        kind_cfg = dict(cfg)
        kind_cfg["arch.kind"] = kind
        corpus_norm, arch = _prepare(kind_cfg)
        ref_hash = None
        for method in ("vanilla", "hypergpa"):
            mdir = os.path.join(out_dir, f"{method}-{kind}")
            os.makedirs(mdir, exist_ok=True)
            mcfg = dict(kind_cfg)
            mcfg["method"] = method
            mcfg["out"] = mdir
            run = {"seeds": [], "metrics": [], "per_step_mse": []}
            for seed in seeds_of(cfg):
                _log(f"bench: {method}/{kind} seed={seed}")
                train_one(mcfg, corpus_norm, arch, seed, mdir)
                preds, tgts = eval_one(mcfg, corpus_norm, arch, seed, mdir)
                wins, tgts_ref = eval_pairs(corpus_norm, corpus_norm.n, arch.s_in, arch.s_out)
                h = pair_hash(wins, tgts_ref)
                if ref_hash is None:
                    ref_hash = h
                elif h != ref_hash:
                    raise RuntimeError("evaluation pairs differ between methods")
                run["seeds"].append(seed)
                run["metrics"].append(metrics.compute_metrics(preds, tgts))
                run["per_step_mse"].append(metrics.per_step_mse(preds, tgts))
            results[method][kind] = run
    report = metrics.emit_report(results, out_dir, meta=_meta(cfg))
    for kind in targets_list:
        ratio = report["improvements"]["hypergpa"][kind]
        _log(f"bench improvement over vanilla ({kind}): {ratio:.1%}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="hypergpa", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("synth", cmd_synth),
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("gradcheck", cmd_gradcheck),
        ("bench", cmd_bench),
    ):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, action="append", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--target", action="append", choices=KINDS, default=None)
        p.add_argument("--method", choices=METHODS, default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--candidates", type=int, default=None)
        p.add_argument("--graph-fn", choices=GRAPH_FNS, default=None)
        p.add_argument("--no-agc", action="store_true")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--corpus", default=None, help="CSV corpus path (switches corpus.source)")
    return ap


def apply_flags(cfg, args):
    if args.seed:
        cfg["seeds"] = ",".join(str(s) for s in args.seed)
    if args.out and args.fn is not cmd_synth:
        cfg["out"] = args.out
    if args.target:
        cfg["arch.kind"] = args.target[0]
    if args.method:
        cfg["method"] = args.method
    if args.k is not None:
        cfg["train.k"] = args.k
    if args.lam is not None:
        cfg["train.lambda"] = args.lam
    if args.candidates is not None:
        cfg["l2.candidates"] = args.candidates
    if args.graph_fn:
        cfg["l2.graph_fn"] = args.graph_fn
    if args.no_agc:
        cfg["l1.agc"] = False
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    if args.corpus:
        cfg["corpus.source"] = "csv"
        cfg["corpus.csv"] = args.corpus
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else dict(DEFAULTS)
        cfg = apply_flags(cfg, args)
        validate(cfg)
    except (ConfigError, OSError) as e:
        _log(f"configuration error: {e}")
        return 1
    try:
        return args.fn(cfg, args)
    except ConfigError as e:
        _log(f"configuration error: {e}")
        return 1
    except (DivergenceError, RuntimeError, OSError, ValueError) as e:
        _log(f"runtime failure: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
