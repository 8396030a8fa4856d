"""Neuron coverage tests against a naive per-element reference."""
import math

import numpy as np
import pytest

from oracles import naive_coverage
from testprio.core import ActivationMatrix, DataError
from testprio.coverage import (CoverageProfile, NCConfig, coverage_profile,
                               fit_neuron_stats, iter_batches, load_profile,
                               pack_profile, save_profile, stream_profiles)


def make_am(values, offsets=(0,)):
    return ActivationMatrix(np.asarray(values, dtype=float), offsets)


class TestFitNeuronStats:
    def test_simple_column(self):
        stats = fit_neuron_stats(make_am([[0], [1], [2]]))
        assert stats.minimum[0] == 0
        assert stats.maximum[0] == 2
        assert stats.std[0] == pytest.approx(math.sqrt(2 / 3), abs=1e-12)

    def test_constant_column(self):
        stats = fit_neuron_stats(make_am([[5], [5], [5]]))
        assert stats.minimum[0] == stats.maximum[0] == 5
        assert stats.std[0] == 0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((100, 10))
        stats = fit_neuron_stats(make_am(values))
        for j in range(10):
            col = values[:, j]
            mean = sum(col) / len(col)
            var = sum((v - mean) ** 2 for v in col) / len(col)
            assert stats.minimum[j] == min(col)
            assert stats.maximum[j] == max(col)
            assert abs(stats.std[j] - math.sqrt(var)) < 1e-12

    def test_too_few_rows(self):
        with pytest.raises(DataError):
            fit_neuron_stats(make_am([[1.0, 2.0]]))


def profile_bits(test, stats, cfg):
    return coverage_profile(test, stats, cfg).to_bool()


class TestVariantSemantics:
    def setup_method(self):
        self.stats = fit_neuron_stats(make_am([[0.0, 0.0], [1.0, 1.0]]))

    def test_nac_example(self):
        bits = profile_bits(make_am([[0.8, 0.2]]), self.stats,
                            NCConfig("NAC", 0.75))
        assert bits.tolist() == [[True, False]]

    def test_kmnc_example(self):
        stats = fit_neuron_stats(make_am([[0.0], [1.0]]))
        cfg = NCConfig("KMNC", 2)
        assert profile_bits(make_am([[0.7]]), stats, cfg).tolist() == [[False, True]]
        assert profile_bits(make_am([[1.2]]), stats, cfg).tolist() == [[False, False]]

    def test_kmnc_max_covered(self):
        stats = fit_neuron_stats(make_am([[0.0], [1.0]]))
        bits = profile_bits(make_am([[1.0]]), stats, NCConfig("KMNC", 2))
        assert bits.tolist() == [[False, True]]

    def test_kmnc_constant_range(self):
        stats = fit_neuron_stats(make_am([[5.0], [5.0]]))
        cfg = NCConfig("KMNC", 3)
        assert profile_bits(make_am([[5.0]]), stats, cfg).tolist() == \
            [[True, False, False]]
        assert profile_bits(make_am([[4.0]]), stats, cfg).sum() == 0

    def test_nbc_snac_example(self):
        # range [0,1], sigma forced via training data is irrelevant at k=0
        stats = fit_neuron_stats(make_am([[0.0], [1.0]]))
        nbc = profile_bits(make_am([[1.2]]), stats, NCConfig("NBC", 0))
        assert nbc.tolist() == [[False, True]]
        snac = profile_bits(make_am([[1.2]]), stats, NCConfig("SNAC", 0))
        assert snac.tolist() == [[True]]

    def test_tknc_ties_covered(self):
        stats = fit_neuron_stats(make_am([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
        bits = profile_bits(make_am([[0.5, 0.5, 0.1]]), stats,
                            NCConfig("TKNC", 1))
        assert bits.tolist() == [[True, True, False]]

    def test_tknc_respects_layers(self):
        stats = fit_neuron_stats(make_am([[0.0] * 4, [1.0] * 4]))
        bits = profile_bits(make_am([[0.9, 0.1, 0.2, 0.8]], offsets=(0, 2)),
                            stats, NCConfig("TKNC", 1))
        assert bits.tolist() == [[True, False, False, True]]

    def test_tknc_k_exceeds_layer(self):
        stats = fit_neuron_stats(make_am([[0.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(DataError):
            profile_bits(make_am([[0.1, 0.2]], offsets=(0, 1)), stats,
                         NCConfig("TKNC", 2))

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            profile_bits(make_am([[0.1, 0.2, 0.3]]), self.stats,
                         NCConfig("NAC", 0.5))


def random_instance(rng, n_tests=None, a=None):
    n_tests = n_tests or int(rng.integers(1, 51))
    a = a or int(rng.integers(2, 21))
    train = rng.standard_normal((int(rng.integers(2, 30)), a)) * 2
    test = rng.standard_normal((n_tests, a)) * 3
    split = int(rng.integers(1, a)) if a > 1 else 0
    offsets = (0, split) if split > 0 else (0,)
    return make_am(train), make_am(test, offsets)


def variant_configs(rng, layer_widths):
    yield NCConfig("NAC", float(rng.normal()))
    yield NCConfig("KMNC", int(rng.integers(1, 6)))
    yield NCConfig("NBC", float(abs(rng.normal())))
    yield NCConfig("SNAC", float(abs(rng.normal())))
    yield NCConfig("TKNC", int(rng.integers(1, min(layer_widths) + 1)))


class TestReferenceEquality:
    def test_all_variants_match_naive_reference(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            train, test = random_instance(rng)
            stats = fit_neuron_stats(train)
            widths = [(s.indices(test.n_neurons)[1]
                       - s.indices(test.n_neurons)[0])
                      for s in test.layer_slices()]
            for cfg in variant_configs(rng, widths):
                got = profile_bits(test, stats, cfg)
                want = naive_coverage(test.values.tolist(),
                                      stats.minimum.tolist(),
                                      stats.maximum.tolist(),
                                      stats.std.tolist(),
                                      test.layer_offsets, cfg.method, cfg.k)
                assert got.tolist() == want, cfg


class TestStreaming:
    def test_batching_does_not_change_bits(self):
        rng = np.random.default_rng(5)
        train = make_am(rng.standard_normal((40, 20)))
        test = make_am(rng.standard_normal((200, 20)))
        stats = fit_neuron_stats(train)
        cfg = NCConfig("KMNC", 2)
        whole = coverage_profile(test, stats, cfg)
        for bs in (1, 7, 64):
            streamed = stream_profiles(iter_batches(test, bs), stats, cfg)
            assert np.array_equal(streamed.packed, whole.packed)
            assert streamed.n_targets == whole.n_targets

    def test_inconsistent_columns_rejected(self):
        stats = fit_neuron_stats(make_am([[0.0, 0.0], [1.0, 1.0]]))
        batches = [make_am([[0.1, 0.2]]), make_am([[0.1, 0.2, 0.3]])]
        with pytest.raises(DataError):
            stream_profiles(batches, stats, NCConfig("NAC", 0.5))


class TestProfileContainer:
    def test_payload_size_accounting(self, tmp_path):
        # 1000 tests x 100 NAC targets -> 12,500 payload bytes, no row padding
        rng = np.random.default_rng(1)
        profile = pack_profile(rng.random((1000, 100)) > 0.5, 1, "NAC", 0.75)
        path = tmp_path / "profile.bin"
        save_profile(path, profile)
        blob = path.read_bytes()
        header_end = blob.index(b"\n", blob.index(b"\n") + 1) + 1
        assert len(blob) - header_end == 100 * 1000 // 8

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        profile = pack_profile(rng.random((13, 21)) > 0.3, 3, "KMNC", 3)
        path = tmp_path / "profile.bin"
        save_profile(path, profile)
        loaded = load_profile(path)
        assert np.array_equal(loaded.packed, profile.packed)
        assert loaded.n_targets == 21
        assert loaded.method == "KMNC"


class TestInvariants:
    def test_kmnc_at_most_one_target_per_neuron(self):
        rng = np.random.default_rng(9)
        train = make_am(rng.standard_normal((20, 8)))
        test = make_am(rng.standard_normal((50, 8)) * 2)
        stats = fit_neuron_stats(train)
        k = 4
        bits = profile_bits(test, stats, NCConfig("KMNC", k))
        per_neuron = bits.reshape(50, 8, k).sum(axis=2)
        assert (per_neuron <= 1).all()

    def test_nbc_zero_high_equals_snac_zero(self):
        rng = np.random.default_rng(10)
        train = make_am(rng.standard_normal((20, 6)))
        test = make_am(rng.standard_normal((40, 6)) * 3)
        stats = fit_neuron_stats(train)
        nbc = profile_bits(test, stats, NCConfig("NBC", 0)).reshape(40, 6, 2)
        snac = profile_bits(test, stats, NCConfig("SNAC", 0))
        assert np.array_equal(nbc[:, :, 1], snac)

    def test_nac_monotone_in_k(self):
        rng = np.random.default_rng(11)
        test = make_am(rng.standard_normal((30, 5)))
        stats = fit_neuron_stats(make_am(rng.standard_normal((10, 5))))
        low = profile_bits(test, stats, NCConfig("NAC", 0.1))
        high = profile_bits(test, stats, NCConfig("NAC", 0.9))
        assert not (high & ~low).any()
