import numpy as np
import pytest

from nflbench.attack import (
    AttackerKind,
    AttackerSpec,
    AttackTrace,
    BigramModel,
    calibrated_constants,
    calibrated_radii,
    estimate_regret_exponent,
    invert_contextual,
    invert_nearest_neighbor,
    nearest_neighbor_trace,
    run_calibrated_attacker,
    run_iterative_attacker,
)
from nflbench.embedding import EmbeddingTable, EncoderG, Prompt
from nflbench.errors import (
    DegenerateTraceError,
    EmptyCorpusError,
    InvalidExponentError,
)
from nflbench.protection import Mechanism, ProtectionConfig, protect_prompt

from conftest import random_instance, rng_for


class TestNearestNeighborInversion:
    def test_exact_recovery_under_identity(self):
        vocab, table = random_instance(30)
        cfg = ProtectionConfig(Mechanism.IDENTITY)
        prompt = Prompt((0, 4, 9, 2))
        protected = protect_prompt(prompt, cfg, table)
        assert invert_nearest_neighbor(protected, table).token_ids == prompt.token_ids

    def test_recovers_nearest_when_shifted(self):
        table = EmbeddingTable(np.array([[0.0, 0.0], [1.0, 0.0]]))
        # observed 0.6 along the axis: distance 0.6 vs 0.4 favors token 1
        assert invert_nearest_neighbor(np.array([0.6, 0.0]), table).token_ids == (1,)

    def test_multi_position(self):
        table = EmbeddingTable(np.array([[0.0], [10.0]]))
        obs = np.array([[1.0], [9.0], [4.9]])
        assert invert_nearest_neighbor(obs, table).token_ids == (0, 1, 0)

    def test_output_ids_always_valid(self):
        vocab, table = random_instance(31)
        rng = rng_for(31)
        obs = rng.normal(0, 10, size=(50, table.dim))
        ids = invert_nearest_neighbor(obs, table).token_ids
        assert all(0 <= t < len(vocab) for t in ids)


class TestBigram:
    def test_predicts_from_counts(self):
        # corpus "a b a b": count(a->b) = 2 dominates
        model = BigramModel(2).fit([Prompt((0, 1, 0, 1))])
        prompt = Prompt((0, 0))
        assert invert_contextual(prompt, model, 1) == 1

    def test_single_token_type(self):
        model = BigramModel(3).fit([Prompt((0, 0, 0))])
        assert invert_contextual(Prompt((0, 0)), model, 1) == 0

    def test_position_zero_uniform_prior_tie(self):
        model = BigramModel(3).fit([Prompt((1, 2, 1))])
        assert invert_contextual(Prompt((1, 2)), model, 0) == 0

    def test_unseen_left_neighbor_falls_back_to_uniform(self):
        model = BigramModel(4).fit([Prompt((1, 2))])
        assert model.predict(3) == 0

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            BigramModel(3).fit([Prompt((0,)), Prompt((1,))])


class TestIterativeAttacker:
    def test_converges_to_vocab_token(self):
        vocab, table = random_instance(32)
        enc = EncoderG.identity(table.dim)
        spec = AttackerSpec(AttackerKind.ITERATIVE_GRADIENT, iterations=200)
        trace = run_iterative_attacker(table.row(5), table, enc, spec)
        assert trace.recovered_ids[-1, 0] == 5

    def test_single_iteration_trace_shape(self, tiny_table):
        spec = AttackerSpec(AttackerKind.ITERATIVE_GRADIENT, iterations=1)
        trace = run_iterative_attacker(np.array([0.2, 0.2]), tiny_table, EncoderG.identity(2), spec)
        assert trace.iterations == 1
        assert trace.regret_series.shape == (1,)

    def test_error_matches_analytic_recursion(self, tiny_table):
        # x_{i} - t = (1 - 1/(i+1)) (x_{i-1} - t), so |x_i - t| = |t| / (i+1)
        target = np.array([0.3, -0.4])
        spec = AttackerSpec(AttackerKind.ITERATIVE_GRADIENT, iterations=50)
        trace = run_iterative_attacker(target, tiny_table, EncoderG.identity(2), spec)
        e0 = np.linalg.norm(target)
        expected = np.array([e0 / (i + 1) for i in range(1, 51)])
        assert np.allclose(trace.regret_series, expected, rtol=1e-12)

    def test_log_log_slope_minus_one(self, tiny_table):
        spec = AttackerSpec(AttackerKind.ITERATIVE_GRADIENT, iterations=512)
        trace = run_iterative_attacker(np.array([1.0, 1.0]), tiny_table, EncoderG.identity(2), spec)
        i = np.arange(1, 513)
        window = i >= 128
        slope, _ = np.polyfit(np.log(i[window]), np.log(trace.regret_series[window]), 1)
        assert abs(slope - (-1.0)) <= 0.1


class TestCalibratedAttacker:
    def test_partial_sum_integral_bounds(self):
        # oracle: 2 sqrt(I) - 2 <= sum i^(-1/2) <= 2 sqrt(I) - 1
        spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=10_000, p=0.5, scale=1.0)
        total = calibrated_radii(spec).sum()
        assert 2 * np.sqrt(10_000) - 2 <= total <= 2 * np.sqrt(10_000) - 1

    def test_single_iteration_regret_is_scale(self):
        vocab, table = random_instance(33)
        spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=1, p=0.5, scale=1.7)
        trace = run_calibrated_attacker(Prompt((2,)), table, EncoderG.identity(table.dim), spec, rng_for(33))
        assert trace.regret_series[0] == pytest.approx(1.7)

    def test_exact_encoded_distance_under_generic_encoder(self):
        vocab, table = random_instance(34)
        rng = rng_for(34)
        enc = EncoderG(rng.normal(size=(table.dim, table.dim)) + 2 * np.eye(table.dim))
        spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=32, p=0.5, scale=0.9)
        target = Prompt((1, 5))
        trace = run_calibrated_attacker(target, table, enc, spec, rng)
        target_enc = enc.encode(table.rows(target.token_ids))
        dists = np.linalg.norm(trace.recovered_encoded - target_enc[None], axis=2)
        radii = calibrated_radii(spec)
        assert np.allclose(dists, radii[:, None], rtol=1e-10)
        # the canonical iterates must encode back to the stored points
        assert np.allclose(
            enc.encode(trace.recovered_canonical.reshape(-1, table.dim)),
            trace.recovered_encoded.reshape(-1, table.dim),
            atol=1e-10,
        )

    def test_prefix_bounds_hold_for_every_prefix(self):
        for p in (0.3, 0.5, 0.8):
            spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=4096, p=p, scale=1.0)
            c0, c2 = calibrated_constants(spec)
            cum = np.cumsum(calibrated_radii(spec))
            i = np.arange(1, 4097, dtype=float)
            assert np.all(c0 * i**p <= cum * (1 + 1e-12))
            assert np.all(cum <= c2 * i**p * (1 + 1e-12))

    def test_rejects_exponent_outside_open_interval(self):
        with pytest.raises(InvalidExponentError):
            AttackerSpec(AttackerKind.CALIBRATED, iterations=16, p=1.0)
        with pytest.raises(InvalidExponentError):
            AttackerSpec(AttackerKind.CALIBRATED, iterations=16, p=0.0)


class TestRegretExponent:
    def _trace(self, p, iterations=4096, scale=1.0):
        vocab, table = random_instance(35)
        spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=iterations, p=p, scale=scale)
        return run_calibrated_attacker(Prompt((0,)), table, EncoderG.identity(table.dim), spec, rng_for(35))

    def test_recovers_p_half(self):
        p_hat, c0_hat, c2_hat = estimate_regret_exponent(self._trace(0.5))
        assert abs(p_hat - 0.5) <= 0.05
        assert c0_hat <= c2_hat

    def test_recovers_p_eight_tenths(self):
        p_hat, _, _ = estimate_regret_exponent(self._trace(0.8))
        assert abs(p_hat - 0.8) <= 0.05

    def test_estimated_constants_bound_every_prefix(self):
        trace = self._trace(0.5, iterations=1024)
        p_hat, c0_hat, c2_hat = estimate_regret_exponent(trace)
        cum = trace.cumulative_regret()
        i = np.arange(1, 1025, dtype=float)
        assert np.all(c0_hat * i**p_hat <= cum * (1 + 1e-12))
        assert np.all(cum <= c2_hat * i**p_hat * (1 + 1e-12))

    def test_degenerate_all_zero(self, tiny_table):
        canon = np.repeat(tiny_table.row(0)[None, None, :], 16, axis=0)
        trace = AttackTrace(
            recovered_ids=np.zeros((16, 1), dtype=int),
            recovered_canonical=canon,
            recovered_encoded=canon,
            regret_series=np.zeros(16),
        )
        with pytest.raises(DegenerateTraceError):
            estimate_regret_exponent(trace)

    def test_needs_sixteen_iterations(self):
        trace = self._trace(0.5, iterations=8)
        with pytest.raises(ValueError):
            estimate_regret_exponent(trace)


class TestTraceExport:
    def test_csv_schema(self, tmp_path, tiny_table):
        spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=4, p=0.5, scale=1.0)
        trace = run_calibrated_attacker(Prompt((1,)), tiny_table, EncoderG.identity(2), spec, rng_for(36))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,mean_regret,cumulative"
        assert len(lines) == 5
        last = lines[-1].split(",")
        assert int(last[0]) == 4
        assert float(last[2]) == pytest.approx(trace.cumulative_regret()[-1], rel=1e-6)

    def test_nearest_neighbor_trace_wraps_inversion(self):
        vocab, table = random_instance(37)
        enc = EncoderG.identity(table.dim)
        obs = table.rows([3, 7]) + 0.01
        trace = nearest_neighbor_trace(obs, table, enc)
        assert trace.iterations == 1
        assert tuple(trace.recovered_ids[0]) == (3, 7)


class TestAttackerSpecJson:
    def test_documented_keys(self):
        spec = AttackerSpec.from_json('{"kind": "calibrated", "iterations": 1024, "p": 0.5, "scale": 1.0}')
        assert spec.kind is AttackerKind.CALIBRATED
        assert spec.iterations == 1024

    def test_roundtrip(self):
        spec = AttackerSpec(AttackerKind.CALIBRATED, iterations=64, p=0.3, scale=2.0)
        assert AttackerSpec.from_json(spec.to_json()) == spec
