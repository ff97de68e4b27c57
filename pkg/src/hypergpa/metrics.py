"""Evaluation metrics and report emission.

Metrics are pooled over flattened prediction/truth arrays (all test pairs,
series, and features together) so numbers are self-consistent across
methods.  Reports serialize canonically: re-emitting identical results
yields byte-identical files.
"""

from __future__ import annotations

import json
import os

import numpy as np


class MetricsError(ValueError):
    pass


def compute_metrics(pred, truth):
    """MSE, MAE, PCC, R^2, and explained variance for aligned arrays.

    Zero-variance truth makes the correlation undefined; that is reported as
    ``pcc_undefined`` rather than a NaN.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricsError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size < 2:
        raise MetricsError("need at least two values")
    p = pred.reshape(-1)
    t = truth.reshape(-1)
    err = p - t
    out = {
        "mse": float(np.mean(err * err)),
        "mae": float(np.mean(np.abs(err))),
        "pcc_undefined": False,
    }
    t_var = t.var()
    p_var = p.var()
    if t_var == 0.0 or p_var == 0.0:
        out["pcc"] = None
        out["pcc_undefined"] = True
    else:
        cov = np.mean((p - p.mean()) * (t - t.mean()))
        out["pcc"] = float(cov / np.sqrt(p_var * t_var))
    sst = np.sum((t - t.mean()) ** 2)
    out["r2"] = float(1.0 - np.sum(err * err) / sst) if sst > 0 else None
    out["expvar"] = float(1.0 - err.var() / t_var) if t_var > 0 else None
    return out


def improvement_ratio(vanilla_mse, method_mse):
    """(vanilla - method) / vanilla; negative when the method is worse."""
    if vanilla_mse <= 0:
        raise MetricsError("vanilla MSE must be positive")
    return (vanilla_mse - method_mse) / vanilla_mse


def _float(v):
    return None if v is None else float(v)


def summarize(per_seed):
    """Mean (and std when >= 2 seeds) of each metric over per-seed dicts."""
    keys = [k for k in per_seed[0] if k != "pcc_undefined"]
    out = {}
    for k in keys:
        vals = [m[k] for m in per_seed if m[k] is not None]
        if not vals:
            continue
        entry = {"mean": float(np.mean(vals)), "per_seed": [_float(v) for v in vals]}
        if len(vals) >= 2:
            entry["std"] = float(np.std(vals))
        out[k] = entry
    return out


def emit_report(results, out_dir, meta=None):
    """Write report.json, a flat per-seed CSV, and per-step MSE series.

    ``results`` maps method -> target -> {"seeds": [...], "metrics":
    [per-seed dicts], "per_step_mse": [per-seed (t, mse) arrays]}.
    Improvement ratios against "vanilla" are included when present.
    """
    if not results:
        raise MetricsError("no results")
    os.makedirs(out_dir, exist_ok=True)
    report = {"meta": meta or {}, "per_method": {}, "improvements": {}}
    for method, targets in sorted(results.items()):
        report["per_method"][method] = {}
        for target, run in sorted(targets.items()):
            if not run["metrics"]:
                raise MetricsError("no results")
            report["per_method"][method][target] = summarize(run["metrics"])
    vanilla = report["per_method"].get("vanilla", {})
    for method, targets in sorted(report["per_method"].items()):
        if method == "vanilla":
            continue
        for target, summary in targets.items():
            if target in vanilla and "mse" in summary:
                base = vanilla[target]["mse"]["mean"]
                report["improvements"].setdefault(method, {})[target] = improvement_ratio(
                    base, summary["mse"]["mean"]
                )

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", newline="") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")

    csv_path = os.path.join(out_dir, "per_seed.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write("method,target,seed,metric,value\n")
        for method, targets in sorted(results.items()):
            for target, run in sorted(targets.items()):
                for seed, metrics in zip(run["seeds"], run["metrics"]):
                    for k in sorted(metrics):
                        if k == "pcc_undefined" or metrics[k] is None:
                            continue
                        fh.write(f"{method},{target},{seed},{k},{metrics[k]!r}\n")

    step_path = os.path.join(out_dir, "per_step_mse.csv")
    with open(step_path, "w", newline="") as fh:
        fh.write("t,method,mse\n")
        for method, targets in sorted(results.items()):
            for target, run in sorted(targets.items()):
                series = run.get("per_step_mse")
                if not series:
                    continue
                pooled = np.mean(np.stack(series), axis=0)
                for t, v in enumerate(pooled):
                    fh.write(f"{t},{method},{v!r}\n")
    return report


def per_step_mse(preds, targets):
    """MSE per pair start index, pooled over series and features."""
    err = (np.asarray(preds) - np.asarray(targets)) ** 2
    return err.mean(axis=tuple(i for i in range(err.ndim) if i != 1))
