"""Corpus representation, CSV ingestion, normalization, and drift synthesis.

A corpus holds M series over N disjoint periods.  Period indices are 1-based
in the API (period N is the test period, N-1 validation); the CSV schema on
disk uses 0-based ids.  Every period index must have the same length across
series, which the joint encoder requires.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DRIFT_KINDS = ("amplitude-ramp", "frequency-ramp", "regime-switch")

CSV_STD_FLOOR = 1e-8


class CorpusError(ValueError):
    pass


class TimeSeriesCorpus:
    """M series x N periods of (length_j, dim_x) observation blocks."""

    def __init__(self, blocks):
        if not blocks or not blocks[0]:
            raise CorpusError("corpus needs at least one series and one period")
        n = len(blocks[0])
        for i, series in enumerate(blocks):
            if len(series) != n:
                raise CorpusError(f"series {i} has {len(series)} periods, expected {n}")
        self.blocks = [[np.asarray(b, dtype=np.float64) for b in series] for series in blocks]
        dim = self.blocks[0][0].shape[1]
        for j in range(n):
            ref = self.blocks[0][j].shape[0]
            for i, series in enumerate(self.blocks):
                b = series[j]
                if b.ndim != 2 or b.shape[1] != dim:
                    raise CorpusError(f"period ({i},{j + 1}) is not a (steps, {dim}) block")
                if b.shape[0] != ref:
                    raise CorpusError(
                        f"period length mismatch at series {i}, period {j + 1}: {b.shape[0]} != {ref}"
                    )
                if not np.isfinite(b).all():
                    raise CorpusError(f"non-finite observation in series {i}, period {j + 1}")

    @property
    def m(self):
        return len(self.blocks)

    @property
    def n(self):
        return len(self.blocks[0])

    @property
    def dim(self):
        return self.blocks[0][0].shape[1]

    def period(self, i, j):
        """Observation block of series ``i`` (0-based) at period ``j`` (1-based)."""
        if not 1 <= j <= self.n:
            raise CorpusError(f"period index {j} out of range 1..{self.n}")
        return self.blocks[i][j - 1]

    def period_lengths(self):
        return [self.blocks[0][j].shape[0] for j in range(self.n)]

    def with_blocks(self, blocks):
        return TimeSeriesCorpus(blocks)


def split(corpus):
    """Train periods 1..N-2, validation period N-1, test period N."""
    n = corpus.n
    if n < 3:
        raise CorpusError("need at least three periods to split")
    return list(range(1, n - 1)), n - 1, n


@dataclass
class NormStats:
    mean: np.ndarray  # (M, dim)
    std: np.ndarray  # (M, dim)


def normalize(corpus):
    """Per-series, per-feature z-score fit on the training periods only."""
    train_periods, _, _ = split(corpus)
    mean = np.zeros((corpus.m, corpus.dim))
    std = np.zeros((corpus.m, corpus.dim))
    for i in range(corpus.m):
        rows = np.concatenate([corpus.period(i, j) for j in train_periods], axis=0)
        mean[i] = rows.mean(axis=0)
        std[i] = rows.std(axis=0)
    floored = std < CSV_STD_FLOOR
    if floored.any():
        warnings.warn("zero-variance feature(s); flooring std at 1e-8", RuntimeWarning)
        std = np.where(floored, CSV_STD_FLOOR, std)
    stats = NormStats(mean, std)
    blocks = [
        [(corpus.blocks[i][j] - mean[i]) / std[i] for j in range(corpus.n)] for i in range(corpus.m)
    ]
    return TimeSeriesCorpus(blocks), stats


def denormalize(corpus, stats):
    blocks = [
        [corpus.blocks[i][j] * stats.std[i] + stats.mean[i] for j in range(corpus.n)]
        for i in range(corpus.m)
    ]
    return TimeSeriesCorpus(blocks)


# ---------------------------------------------------------------------------
# CSV schema: header `series_id,period_id,step,f0,...,f{d-1}`;
# rows sorted by (series_id, period_id, step); all ids 0-based.


def write_csv(corpus, path):
    d = corpus.dim
    with open(path, "w", newline="") as fh:
        fh.write("series_id,period_id,step," + ",".join(f"f{k}" for k in range(d)) + "\n")
        for i in range(corpus.m):
            for j in range(corpus.n):
                block = corpus.blocks[i][j]
                for step in range(block.shape[0]):
                    vals = ",".join(repr(float(v)) for v in block[step])
                    fh.write(f"{i},{j},{step},{vals}\n")


def load_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[:3] != ["series_id", "period_id", "step"] or not cols[3:]:
            raise CorpusError(f"bad CSV header: {header!r}")
        d = len(cols) - 3
        rows = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + d:
                raise CorpusError(f"row {lineno}: expected {3 + d} columns, got {len(parts)}")
            try:
                sid, pid, step = int(parts[0]), int(parts[1]), int(parts[2])
                feats = [float(v) for v in parts[3:]]
            except ValueError:
                raise CorpusError(f"row {lineno}: non-numeric cell") from None
            rows.setdefault((sid, pid), []).append((step, feats))
    if not rows:
        raise CorpusError("empty CSV")
    m = max(sid for sid, _ in rows) + 1
    n = max(pid for _, pid in rows) + 1
    blocks = []
    for i in range(m):
        series = []
        for j in range(n):
            if (i, j) not in rows:
                raise CorpusError(f"missing data for series {i}, period {j + 1}")
            entries = rows[(i, j)]
            steps = [s for s, _ in entries]
            if steps != list(range(len(entries))):
                raise CorpusError(f"series {i} period {j + 1}: steps not contiguous from 0")
            series.append(np.array([f for _, f in entries], dtype=np.float64))
        blocks.append(series)
    try:
        return TimeSeriesCorpus(blocks)
    except CorpusError as e:
        raise CorpusError(f"period length mismatch: {e}") from None


# ---------------------------------------------------------------------------
# synthetic drift generator


@dataclass
class SynthConfig:
    m: int = 4
    n: int = 8
    period_len: int = 48
    dim_x: int = 2
    drift: str = "amplitude-ramp"
    coupling: float = 0.3
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.drift not in DRIFT_KINDS:
            raise ValueError(f"unknown drift kind {self.drift!r}")
        if self.m < 1 or self.n < 1 or self.period_len < 2 or self.dim_x < 1:
            raise ValueError("corpus dimensions must be positive")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")


AMP_RAMP = 0.12
FREQ_RAMP = 0.09
DRIVER_GAIN = 0.25


def synth_drift(cfg, return_latents=False):
    """Coupled drifting series: deterministic per-period latents plus noise.

    The per-period latent (amplitude / frequency / regime blend) follows a
    deterministic ramp or switch; stochastic per-step drivers are mixed
    across series by a random matrix scaled by the coupling strength, and
    Gaussian observation noise is added on top.  Fully seed-deterministic.
    """
    rng = np.random.default_rng(cfg.seed)
    m, n, plen, d = cfg.m, cfg.n, cfg.period_len, cfg.dim_x

    phases = rng.uniform(0.0, 2 * np.pi, size=(m, 2))
    feat_shift = rng.uniform(0.0, 2 * np.pi, size=(m, d))
    base_freq = rng.uniform(1.5, 2.5, size=m)

    mix_raw = rng.uniform(0.2, 1.0, size=(m, m))
    mix_raw /= mix_raw.sum(axis=1, keepdims=True)
    mix = (1.0 - cfg.coupling) * np.eye(m) + cfg.coupling * mix_raw

    drivers = mix @ rng.standard_normal((m, n * plen))
    obs_noise = rng.standard_normal((m, n, plen, d))

    k = np.arange(plen)
    blocks = []
    for i in range(m):
        series = []
        for j in range(1, n + 1):
            if cfg.drift == "amplitude-ramp":
                amp, freq, blend = 1.0 + AMP_RAMP * (j - 1), base_freq[i], 0.0
            elif cfg.drift == "frequency-ramp":
                amp, freq, blend = 1.0, base_freq[i] * (1.0 + FREQ_RAMP * (j - 1)), 0.0
            else:  # regime-switch
                amp, freq, blend = 1.0, base_freq[i], float((j - 1) % 2)
            block = np.zeros((plen, d))
            drv = drivers[i, (j - 1) * plen : j * plen]
            for p in range(d):
                w1 = np.sin(2 * np.pi * freq * k / plen + phases[i, 0] + feat_shift[i, p])
                w2 = np.sin(4 * np.pi * freq * k / plen + phases[i, 1] + 1.7 * feat_shift[i, p])
                u = w1 + 0.35 * w2
                if blend > 0:
                    alt = np.cos(2 * np.pi * freq * k / plen + phases[i, 0]) - 0.5 * np.sin(
                        6 * np.pi * freq * k / plen + feat_shift[i, p]
                    )
                    u = (1.0 - blend) * u + blend * alt
                if p >= 1:
                    u = u + 0.2 * (w1 * w1 - 0.5)
                amp_eff = amp * (1.0 + DRIVER_GAIN * cfg.noise * drv)
                block[:, p] = amp_eff * u + 0.5 * cfg.noise * obs_noise[i, j - 1, :, p]
            series.append(block)
        blocks.append(series)
    corpus = TimeSeriesCorpus(blocks)
    if return_latents:
        return corpus, drivers
    return corpus
