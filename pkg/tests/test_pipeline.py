import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL_FEATURES
from phaserec import _kernels
from phaserec.core import CtScan, PhaseLabel
from phaserec.evaluate import SchemaError
from phaserec.model import DimensionMismatch, LinearModelParams
from phaserec.pipeline import (
    DEFAULT_R_GRID, SamplerConfig, classify_slices, derive_seed, predict_scan, predict_scans, r_sweep,
    read_predictions, sample_indices, sample_size, vote, vote_from_cache, write_predictions,
)
from phaserec.preprocess import DEFAULT_WINDOW


def one_hot_rows(classes):
    out = np.full((len(classes), 4), 0.1)
    out[np.arange(len(classes)), classes] = 0.9
    return out


class TestSampler:
    def test_splitmix64_reference_value(self):
        # first output of SplitMix64 from state 0, as published with the algorithm
        assert _kernels.splitmix64_next(0)[1] == 0xE220A8397B1DCDAF

    def test_thirty_of_hundred(self):
        idx = sample_indices(100, SamplerConfig(30, 5))
        assert len(idx) == 30 == len(set(idx.tolist()))
        assert idx.min() >= 0 and idx.max() < 100
        assert np.all(np.diff(idx) > 0)

    def test_single_slice(self):
        for r in (0.5, 1, 50, 100):
            assert sample_indices(1, SamplerConfig(r, 9)).tolist() == [0]

    def test_full_sample(self):
        assert sample_indices(200, SamplerConfig(100, 1)).tolist() == list(range(200))

    def test_size_rule_with_integer_oracle(self):
        for n in [*range(1, 51), 100, 281, 2350]:
            for r in DEFAULT_R_GRID:
                assert sample_size(n, r) == max(1, -(-n * r // 100))

    def test_decimal_r_is_exact(self):
        # 0.1 * 30 would be 3.0000000000000004 in binary floating point
        assert sample_size(30, 10) == 3
        assert sample_size(1000, 0.3) == 3
        assert sample_size(7, 14.29) == 2

    def test_uniform_inclusion(self):
        counts = np.zeros(10)
        for seed in range(10_000):
            counts[sample_indices(10, SamplerConfig(10, seed))] += 1
        np.testing.assert_allclose(counts / 10_000, 0.1, atol=0.01)

    def test_python_reference_matches_dispatch(self):
        for n, k, seed in [(10, 3, 0), (2350, 705, 2**63 + 5), (5, 4, 123), (281, 85, 42)]:
            np.testing.assert_array_equal(_kernels.sample_without_replacement(n, k, seed),
                                          _kernels.sample_without_replacement_py(n, k, seed))

    def test_config_validation(self):
        for r in (0, -1, 100.5):
            with pytest.raises(ValueError):
                SamplerConfig(r)
        with pytest.raises(ValueError):
            SamplerConfig(30, 2**64)
        with pytest.raises(ValueError):
            sample_indices(0, SamplerConfig())

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 3000), st.floats(0.01, 100), st.integers(0, 2**64 - 1))
    def test_size_distinct_deterministic(self, n, r, seed):
        cfg = SamplerConfig(r, seed)
        idx = sample_indices(n, cfg)
        assert len(idx) == sample_size(n, r) == max(1, math.ceil(n * r / 100 - 1e-9))
        assert len(np.unique(idx)) == len(idx)
        assert 0 <= idx.min() and idx.max() < n
        np.testing.assert_array_equal(idx, sample_indices(n, cfg))

    def test_derived_seed_depends_on_both_inputs(self):
        seeds = {derive_seed(s, uid) for s in range(5) for uid in ("1.2.3", "1.2.4")}
        assert len(seeds) == 10
        assert derive_seed(7, "1.2.3") == derive_seed(7, "1.2.3")


class TestVote:
    def test_unanimous(self):
        pred = vote(one_hot_rows([2] * 10))
        assert pred.phase == PhaseLabel.VENOUS
        assert pred.vote_counts == (0, 0, 10, 0)

    def test_tie_broken_by_summed_score(self):
        probs = np.zeros((7, 4))
        probs[:3, 1] = [0.95, 0.95, 1.0]   # arterial sum 2.9
        probs[3:6, 2] = [0.8, 0.8, 0.8]    # venous sum 2.4
        probs[6, 3] = 0.7
        pred = vote(probs)
        assert pred.vote_counts == (0, 3, 3, 1)
        assert pred.phase == PhaseLabel.ARTERIAL

    def test_tie_then_lowest_ordinal(self):
        probs = np.array([[0.0, 0.6, 0.0, 0.0], [0.0, 0.0, 0.0, 0.6]])
        assert vote(probs).phase == PhaseLabel.ARTERIAL

    def test_flat_scores(self):
        assert vote([[0.2, 0.2, 0.2, 0.2]]).phase == PhaseLabel.NON_CONTRAST

    def test_empty(self):
        with pytest.raises(ValueError):
            vote(np.zeros((0, 4)))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=40))
    def test_winner_has_most_votes(self, rows):
        pred = vote(rows)
        assert sum(pred.vote_counts) == len(rows)
        assert pred.vote_counts[pred.phase] == max(pred.vote_counts)


def flat_scan(values, uid="1.2.9", study="1.2"):
    return CtScan(uid, study, np.stack([np.full((16, 16), v, dtype=float) for v in values]))


class TestPredictScan:
    def test_composition(self, phantom_scans, phantom_model):
        scan = phantom_scans[1]
        cfg = SamplerConfig(30, 4)
        pred = predict_scan(scan, phantom_model, cfg, DEFAULT_WINDOW, SMALL_FEATURES)
        idx = sample_indices(len(scan), SamplerConfig(30, derive_seed(4, scan.series_uid)))
        assert pred.sampled_indices == tuple(idx.tolist())
        assert pred.probs.shape == (len(idx), 4)
        expected = vote(classify_slices(scan.volume, idx, phantom_model, DEFAULT_WINDOW, SMALL_FEATURES), idx)
        assert pred.phase == expected.phase and pred.vote_counts == expected.vote_counts
        assert pred == predict_scan(scan, phantom_model, cfg, DEFAULT_WINDOW, SMALL_FEATURES)
        assert (pred.series_uid, pred.study_uid, pred.seed) == (scan.series_uid, scan.study_uid, 4)

    def test_unanimous_classifier_ignores_seed(self):
        params = LinearModelParams(np.zeros((4, SMALL_FEATURES.dim)), [0, 1, 0, 0],
                                   SMALL_FEATURES.bins, SMALL_FEATURES.grid)
        scan = flat_scan(np.linspace(-100, 300, 40))
        for seed in range(20):
            assert predict_scan(scan, params, SamplerConfig(30, seed), features=SMALL_FEATURES).phase \
                == PhaseLabel.ARTERIAL

    def test_majority_of_noisy_scan(self):
        rng = np.random.default_rng(0)
        labels = np.full(100, 2)
        noisy = rng.choice(100, 20, replace=False)
        labels[noisy] = rng.choice([0, 1, 3], size=20)
        probs = one_hot_rows(labels)
        wins = sum(vote_from_cache(probs, "1.2.3", 50, seed) == PhaseLabel.VENOUS for seed in range(100))
        assert wins >= 99

    def test_voting_beats_single_slices(self):
        # i.i.d. slice correctness with p = 0.65 over 500 scans
        rng = np.random.default_rng(1)
        slice_hits = scan_hits = 0
        total_slices = 0
        for s in range(500):
            n = int(rng.integers(30, 120))
            truth = s % 4
            wrong = (truth + rng.integers(1, 4, size=n)) % 4
            labels = np.where(rng.random(n) < 0.65, truth, wrong)
            slice_hits += int(np.sum(labels == truth))
            total_slices += n
            scan_hits += vote_from_cache(one_hot_rows(labels), f"1.9.{s}", 30, 0) == truth
        assert scan_hits / 500 >= slice_hits / total_slices

    def test_dimension_mismatch_propagates(self):
        with pytest.raises(DimensionMismatch):
            predict_scan(flat_scan([0, 1]), LinearModelParams.zeros(5), features=SMALL_FEATURES)

    def test_predict_scans_sorted(self, phantom_scans, phantom_model):
        preds = predict_scans(phantom_scans[::-1][:5], phantom_model, features=SMALL_FEATURES)
        uids = [p.series_uid for p in preds]
        assert uids == sorted(uids)


class TestSweep:
    def test_full_sampling_has_no_spread(self, phantom_scans, phantom_model):
        rows = r_sweep(phantom_scans[:8], phantom_model, [100], seeds=5, features=SMALL_FEATURES)
        assert len(rows) == 1
        assert rows[0].lower == rows[0].upper == rows[0].mean_f1

    def test_perfect_classifier(self, phantom_scans, phantom_model):
        rows = r_sweep(phantom_scans, phantom_model, [1, 30, 100], seeds=10, features=SMALL_FEATURES)
        assert [r.mean_f1 for r in rows] == [1.0, 1.0, 1.0]

    def test_cache_equals_direct_prediction(self, phantom_scans, phantom_model):
        for scan in phantom_scans[:6]:
            probs = classify_slices(scan.volume, range(len(scan)), phantom_model, DEFAULT_WINDOW, SMALL_FEATURES)
            for seed in range(3):
                direct = predict_scan(scan, phantom_model, SamplerConfig(20, seed), DEFAULT_WINDOW, SMALL_FEATURES)
                assert vote_from_cache(probs, scan.series_uid, 20, seed) == direct.phase

    def test_bad_inputs(self, phantom_scans, phantom_model):
        with pytest.raises(ValueError):
            r_sweep(phantom_scans, phantom_model, [], features=SMALL_FEATURES)
        with pytest.raises(ValueError):
            r_sweep(phantom_scans, phantom_model, [0], features=SMALL_FEATURES)

    def test_default_grid(self):
        assert DEFAULT_R_GRID == (1, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100)


class TestPredictionCsv:
    def test_round_trip(self, tmp_path, phantom_scans, phantom_model):
        preds = predict_scans(phantom_scans[:3], phantom_model, SamplerConfig(30, 2), features=SMALL_FEATURES)
        path = tmp_path / "p.csv"
        with open(path, "w", newline="") as fh:
            write_predictions(fh, preds)
        text = path.read_text().splitlines()
        assert text[0] == "series_uid,study_uid,predicted_phase,votes_nc,votes_art,votes_ven,votes_other,k_sampled,seed"
        rows = read_predictions(path)
        assert [(r.series_uid, r.phase, r.vote_counts, r.k_sampled, r.seed) for r in rows] \
            == [(p.series_uid, p.phase, p.vote_counts, p.k_sampled, 2) for p in preds]

    def test_schema_errors_carry_line(self, tmp_path):
        path = tmp_path / "p.csv"
        buf = io.StringIO()
        write_predictions(buf, [])
        path.write_text(buf.getvalue() + "1.2,1,venous,0,0,3,0,3,0\n1.3,1,venous,0,0,3,0,4,0\n")
        with pytest.raises(SchemaError, match=r"p\.csv:3"):
            read_predictions(path)
        path.write_text(buf.getvalue() + "1.2,1,late,0,0,3,0,3,0\n")
        with pytest.raises(SchemaError, match=r"p\.csv:2"):
            read_predictions(path)
        path.write_text("series_uid,phase\n")
        with pytest.raises(SchemaError, match="header"):
            read_predictions(path)
