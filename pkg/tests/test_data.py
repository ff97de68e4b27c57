"""Corpus handling, CSV round-trips, normalization, and drift synthesis."""

import numpy as np
import pytest

from hypergpa.data import (
    CorpusError,
    SynthConfig,
    TimeSeriesCorpus,
    denormalize,
    load_csv,
    normalize,
    split,
    synth_drift,
    write_csv,
)


def tiny_corpus():
    blocks = []
    for i in range(2):
        series = []
        for j in range(3):
            series.append(np.arange(4, dtype=np.float64)[:, None] + i + 10 * j)
        blocks.append(series)
    return TimeSeriesCorpus(blocks)


class TestCorpus:
    def test_dimensions(self):
        c = tiny_corpus()
        assert (c.m, c.n, c.dim) == (2, 3, 1)
        assert c.period_lengths() == [4, 4, 4]

    def test_period_is_one_based(self):
        c = tiny_corpus()
        np.testing.assert_array_equal(c.period(0, 1)[:, 0], [0, 1, 2, 3])
        np.testing.assert_array_equal(c.period(1, 3)[:, 0], [21, 22, 23, 24])
        with pytest.raises(CorpusError):
            c.period(0, 0)

    def test_ragged_period_lengths_rejected(self):
        blocks = [[np.zeros((4, 1)), np.zeros((4, 1))], [np.zeros((4, 1)), np.zeros((3, 1))]]
        with pytest.raises(CorpusError, match="series 1, period 2"):
            TimeSeriesCorpus(blocks)

    def test_non_finite_rejected(self):
        blocks = [[np.array([[np.nan]])]]
        with pytest.raises(CorpusError, match="non-finite"):
            TimeSeriesCorpus(blocks)


class TestCsv:
    def test_parse_dimensions(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(tiny_corpus(), path)
        c = load_csv(path)
        assert (c.m, c.n, c.dim) == (2, 3, 1)
        assert c.period_lengths() == [4, 4, 4]

    def test_round_trip_bytes(self, tmp_path):
        c = synth_drift(SynthConfig(m=2, n=3, period_len=6, seed=5))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(c, p1)
        write_csv(load_csv(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_short_period_rejected(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(tiny_corpus(), path)
        lines = path.read_text().splitlines()
        del lines[-1]  # drop series 1, period 2 (0-based), last step
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="period length mismatch"):
            load_csv(path)

    def test_non_numeric_cell_reports_row(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(tiny_corpus(), path)
        lines = path.read_text().splitlines()
        parts = lines[3].split(",")
        parts[-1] = "oops"
        lines[3] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="row 4"):
            load_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("sid,pid,step,f0\n0,0,0,1.0\n")
        with pytest.raises(CorpusError, match="header"):
            load_csv(path)


class TestSplit:
    def test_ten_periods(self):
        c = synth_drift(SynthConfig(m=1, n=10, period_len=4, seed=0))
        tr, val, test = split(c)
        assert tr == list(range(1, 9))
        assert (val, test) == (9, 10)

    def test_three_periods_boundary(self):
        tr, val, test = split(tiny_corpus())
        assert (tr, val, test) == ([1], 2, 3)

    def test_too_few_periods(self):
        blocks = [[np.zeros((3, 1)), np.zeros((3, 1))]]
        with pytest.raises(CorpusError):
            split(TimeSeriesCorpus(blocks))

    def test_partition_is_disjoint_and_covers(self):
        for n in range(3, 12):
            c = synth_drift(SynthConfig(m=1, n=n, period_len=4, seed=1))
            tr, val, test = split(c)
            labels = sorted(tr + [val, test])
            assert labels == list(range(1, n + 1))


class TestNormalize:
    def test_training_stats_are_zero_one(self):
        c = synth_drift(SynthConfig(m=3, n=6, period_len=16, seed=2))
        cn, stats = normalize(c)
        tr, _, _ = split(cn)
        for i in range(cn.m):
            rows = np.concatenate([cn.period(i, j) for j in tr])
            np.testing.assert_allclose(rows.mean(axis=0), 0.0, atol=1e-10)
            np.testing.assert_allclose(rows.std(axis=0), 1.0, atol=1e-10)

    def test_already_standard_data_unchanged(self):
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(400, 2))
        rows = (rows - rows[:200].mean(axis=0)) / rows[:200].std(axis=0)
        blocks = [[rows[:200], rows[200:300], rows[300:]]]
        c = TimeSeriesCorpus(blocks)
        cn, _ = normalize(c)
        np.testing.assert_allclose(cn.period(0, 1), c.period(0, 1), atol=1e-12)

    def test_constant_feature_floors_std(self):
        blocks = [[np.full((4, 1), 2.0) for _ in range(3)]]
        c = TimeSeriesCorpus(blocks)
        with pytest.warns(RuntimeWarning, match="flooring"):
            cn, stats = normalize(c)
        np.testing.assert_array_equal(cn.period(0, 1), np.zeros((4, 1)))
        restored = denormalize(cn, stats)
        np.testing.assert_allclose(restored.period(0, 1), 2.0, atol=1e-10)

    def test_normalize_denormalize_identity(self):
        c = synth_drift(SynthConfig(m=2, n=5, period_len=8, seed=4))
        cn, stats = normalize(c)
        back = denormalize(cn, stats)
        for i in range(c.m):
            for j in range(1, c.n + 1):
                np.testing.assert_allclose(back.period(i, j), c.period(i, j), atol=1e-10)


class TestSynthDrift:
    def test_seed_determinism(self):
        a = synth_drift(SynthConfig(seed=9))
        b = synth_drift(SynthConfig(seed=9))
        for i in range(a.m):
            for j in range(1, a.n + 1):
                assert a.period(i, j).tobytes() == b.period(i, j).tobytes()

    def test_zero_coupling_latent_drivers_uncorrelated(self):
        _, drivers = synth_drift(SynthConfig(m=8, n=20, coupling=0.0, seed=7), return_latents=True)
        worst = 0.0
        for i in range(8):
            for j in range(i + 1, 8):
                c = np.corrcoef(drivers[i], drivers[j])[0, 1]
                worst = max(worst, abs(c))
        assert worst < 0.2

    def test_coupling_raises_driver_correlation(self):
        _, d0 = synth_drift(SynthConfig(m=4, n=10, coupling=0.0, seed=8), return_latents=True)
        _, d9 = synth_drift(SynthConfig(m=4, n=10, coupling=0.9, seed=8), return_latents=True)

        def mean_abs_corr(d):
            cs = [abs(np.corrcoef(d[i], d[j])[0, 1]) for i in range(4) for j in range(i + 1, 4)]
            return np.mean(cs)

        assert mean_abs_corr(d9) > mean_abs_corr(d0) + 0.1

    def test_amplitude_ramp_rms_strictly_increasing_noise_free(self):
        c = synth_drift(SynthConfig(m=3, n=6, noise=0.0, drift="amplitude-ramp", seed=10))
        for i in range(c.m):
            rms = [np.sqrt((c.period(i, j) ** 2).mean()) for j in range(1, c.n + 1)]
            assert all(a < b for a, b in zip(rms, rms[1:]))

    @pytest.mark.parametrize("drift", ["amplitude-ramp", "frequency-ramp", "regime-switch"])
    def test_all_kinds_produce_valid_corpora(self, drift):
        c = synth_drift(SynthConfig(m=2, n=4, period_len=8, drift=drift, seed=11))
        assert (c.m, c.n) == (2, 4)

    def test_bad_drift_kind(self):
        with pytest.raises(ValueError):
            SynthConfig(drift="sideways")
