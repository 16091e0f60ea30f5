import numpy as np
import pytest
from scipy import stats

from nflbench.distributions import DistributionSpec, sample_distribution
from nflbench.embedding import EmbeddingTable, Prompt
from nflbench.protection import (
    Mechanism,
    ProtectionConfig,
    gaussian_protected_distribution,
    perturb_embedding,
    protect_prompt,
    random_adjacency_list,
    sample_dchi_components,
    sample_dchi_noise,
    sample_unit_ball,
)

from conftest import random_instance, rng_for


class TestDchiNoise:
    def test_magnitude_mean_matches_gamma_oracle(self):
        # E[l] = shape * scale = pi / eta
        rng = rng_for(10)
        n = 100_000
        ls = np.array([sample_dchi_components(3, 2.0, rng)[0] for _ in range(n)])
        se = ls.std(ddof=1) / np.sqrt(n)
        assert abs(ls.mean() - 3 / 2.0) <= 3 * se

    def test_huge_eta_shrinks_noise(self):
        rng = rng_for(11)
        norms = [np.linalg.norm(sample_dchi_noise(3, 1e6, rng)) for _ in range(200)]
        assert np.mean(norms) < 1e-4

    def test_direction_stays_in_unit_ball(self):
        rng = rng_for(12)
        for _ in range(1000):
            _, v = sample_dchi_components(4, 1.0, rng)
            assert np.linalg.norm(v) <= 1.0 + 1e-12

    def test_ball_sampling_is_uniform_in_radius(self):
        # r^dim should be Uniform(0,1); KS test
        rng = rng_for(13)
        dim = 3
        radii = np.array([np.linalg.norm(sample_unit_ball(dim, rng)) for _ in range(4000)])
        p = stats.kstest(radii**dim, "uniform").pvalue
        assert p > 0.01

    def test_parameter_validation(self):
        rng = rng_for(14)
        with pytest.raises(ValueError):
            sample_dchi_noise(0, 1.0, rng)
        with pytest.raises(ValueError):
            sample_dchi_noise(3, -1.0, rng)


class TestPerturbEmbedding:
    def test_identity_mechanism(self):
        cfg = ProtectionConfig(Mechanism.IDENTITY)
        w = np.array([1.0, -2.0])
        assert np.array_equal(perturb_embedding(w, cfg, rng_for(15)), w)

    def test_gaussian_zero_sigma(self):
        cfg = ProtectionConfig(Mechanism.GAUSSIAN, sigma_eps=0.0)
        w = np.array([0.5, 0.5])
        assert np.array_equal(perturb_embedding(w, cfg, rng_for(16)), w)

    def test_gaussian_unit_variance_monte_carlo(self):
        cfg = ProtectionConfig(Mechanism.GAUSSIAN, sigma_eps=1.0)
        rng = rng_for(17)
        w = np.array([2.0, -1.0])
        n = 100_000
        draws = np.array([perturb_embedding(w, cfg, rng) - w for _ in range(n)])
        var = draws.var(axis=0, ddof=1)
        se_var = 1.0 * np.sqrt(2.0 / (n - 1))  # Var(s^2) ~ 2 sigma^4 / (n-1)
        assert np.all(np.abs(var - 1.0) <= 3 * se_var)

    def test_dchi_dimension_check(self):
        cfg = ProtectionConfig(Mechanism.DCHI, eta=1.0, pi_dim=3)
        with pytest.raises(ValueError, match="pi_dim"):
            perturb_embedding(np.zeros(2), cfg, rng_for(18))


class TestAdjacencyList:
    def test_zero_displacement_is_empty(self, tiny_table):
        w = tiny_table.row(0)
        assert random_adjacency_list(0, w, tiny_table).size == 0

    def test_displacement_beyond_diameter_includes_everyone(self, tiny_table):
        w_tilde = tiny_table.row(0) + np.array([100.0, 0.0])
        assert list(random_adjacency_list(0, w_tilde, tiny_table)) == [1, 2]

    def test_threshold_filters_by_distance(self):
        table = EmbeddingTable(np.array([[0.0], [1.0], [5.0]]))
        # displacement norm 2: token 1 at distance 1 is in, token 2 at 5 is out
        assert list(random_adjacency_list(0, np.array([2.0]), table)) == [1]

    def test_strict_inequality_on_boundary(self):
        table = EmbeddingTable(np.array([[0.0], [1.0], [3.0]]))
        assert list(random_adjacency_list(0, np.array([1.0]), table)) == []


class TestProtectPrompt:
    def test_identity_returns_prompt_unchanged(self, tiny_table):
        cfg = ProtectionConfig(Mechanism.IDENTITY, seed=5)
        prompt = Prompt((0, 1, 2))
        out = protect_prompt(prompt, cfg, tiny_table)
        assert out.token_ids == prompt.token_ids
        assert np.all(out.noise_draws == 0.0)

    def test_dchi_high_eta_rarely_replaces(self):
        vocab, table = random_instance(20)
        cfg = ProtectionConfig(Mechanism.DCHI, eta=1e5, pi_dim=table.dim, seed=0)
        prompt = Prompt((0, 3, 7))
        same = 0
        runs = 1000
        for r in range(runs):
            out = protect_prompt(prompt, cfg, table, root=np.random.SeedSequence((9, r)))
            same += out.token_ids == prompt.token_ids
        assert same >= 0.99 * runs

    def test_adjacency_uniform_when_everything_qualifies(self):
        # eta tiny -> displacement far beyond the diameter, so every other
        # token qualifies and the replacement should be uniform on them
        table = EmbeddingTable(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        cfg = ProtectionConfig(Mechanism.ADJACENCY, eta=1e-4, pi_dim=2, seed=0)
        prompt = Prompt((0,))
        counts = {1: 0, 2: 0, 3: 0}
        runs = 3000
        for r in range(runs):
            out = protect_prompt(prompt, cfg, table, root=np.random.SeedSequence((31, r)))
            assert out.token_ids[0] != 0
            counts[out.token_ids[0]] += 1
        chi2 = stats.chisquare(list(counts.values())).pvalue
        assert chi2 > 0.01

    def test_adjacency_empty_list_keeps_token_and_logs(self, tiny_table):
        cfg = ProtectionConfig(Mechanism.ADJACENCY, eta=1e6, pi_dim=2, seed=1)
        out = protect_prompt(Prompt((0, 1)), cfg, tiny_table)
        # displacement ~ Gamma(2, 1e-6) is tiny: adjacency lists are empty
        assert out.token_ids == (0, 1)
        assert out.unprotected_positions == (0, 1)

    @pytest.mark.parametrize("mech,kw", [
        (Mechanism.IDENTITY, {}),
        (Mechanism.GAUSSIAN, {"sigma_eps": 0.8}),
        (Mechanism.DCHI, {"eta": 1.0, "pi_dim": 3}),
        (Mechanism.ADJACENCY, {"eta": 1.0, "pi_dim": 3}),
    ])
    def test_length_preserved_and_ids_valid(self, mech, kw):
        vocab, table = random_instance(21)
        cfg = ProtectionConfig(mech, seed=3, **kw)
        for length in (1, 2, 5, 9):
            prompt = Prompt(tuple(rng_for(length).integers(len(vocab), size=length)))
            out = protect_prompt(prompt, cfg, table)
            assert len(out) == length
            assert all(0 <= t < len(vocab) for t in out.token_ids)

    def test_bit_reproducible_under_fixed_seed(self):
        vocab, table = random_instance(22)
        cfg = ProtectionConfig(Mechanism.DCHI, eta=0.7, pi_dim=table.dim, seed=1234)
        prompt = Prompt((1, 2, 3, 4))
        a = protect_prompt(prompt, cfg, table)
        b = protect_prompt(prompt, cfg, table)
        assert a.token_ids == b.token_ids
        assert np.array_equal(a.perturbed_embeddings, b.perturbed_embeddings)
        assert np.array_equal(a.noise_draws, b.noise_draws)

    def test_token_order_does_not_couple_streams(self):
        # position m gets the same draw regardless of the other tokens
        vocab, table = random_instance(23)
        cfg = ProtectionConfig(Mechanism.GAUSSIAN, sigma_eps=1.0, seed=7)
        long = protect_prompt(Prompt((0, 1, 2)), cfg, table)
        short = protect_prompt(Prompt((0, 5, 2)), cfg, table)
        assert np.array_equal(long.noise_draws[0], short.noise_draws[0])
        assert np.array_equal(long.noise_draws[2], short.noise_draws[2])

    def test_dchi_replacement_rate_monotone_in_eta(self):
        vocab, table = random_instance(24, vocab_size=16, dim=3, spread=1.0)
        etas = [0.3, 1.0, 3.0, 10.0, 30.0]
        rates = []
        prompts = [
            Prompt(tuple(rng_for(100 + k).integers(len(vocab), size=6)))
            for k in range(60)
        ]
        for gi, eta in enumerate(etas):
            cfg = ProtectionConfig(Mechanism.DCHI, eta=eta, pi_dim=table.dim, seed=0)
            replaced = total = 0
            for pi_, prompt in enumerate(prompts):
                out = protect_prompt(prompt, cfg, table, root=np.random.SeedSequence((gi, pi_)))
                replaced += sum(a != b for a, b in zip(out.token_ids, prompt.token_ids))
                total += len(prompt)
            rates.append(replaced / total)
        rho, p = stats.spearmanr(etas, rates)
        assert rho < 0
        assert p < 0.01


class TestGaussianProtectedDistribution:
    def test_zero_noise_returns_source(self):
        spec = gaussian_protected_distribution([0.0, 1.0], [1.0, 2.0], 0.0)
        assert np.array_equal(spec.mean, [0.0, 1.0])
        assert np.array_equal(spec.var, [1.0, 2.0])

    def test_covariances_add(self):
        # unit source plus unit noise gives variance 2 per coordinate
        spec = gaussian_protected_distribution([0.0], [1.0], 1.0)
        assert np.array_equal(spec.var, [2.0])

    def test_mechanism_samples_match_analytic_distribution(self):
        mean = np.array([0.3, -0.2])
        var = np.array([1.0, 0.5])
        sigma_eps = 0.7
        cfg = ProtectionConfig(Mechanism.GAUSSIAN, sigma_eps=sigma_eps)
        rng = rng_for(25)
        n = 20_000
        source = sample_distribution(DistributionSpec.gaussian(mean, var), n, rng)
        perturbed = np.array([perturb_embedding(w, cfg, rng) for w in source])
        analytic = gaussian_protected_distribution(mean, var, sigma_eps)
        for c in range(2):
            p = stats.kstest(
                perturbed[:, c],
                lambda x, c=c: stats.norm.cdf(x, analytic.mean[c], np.sqrt(analytic.var[c])),
            ).pvalue
            assert p > 0.01

    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            gaussian_protected_distribution([0.0], [-1.0], 0.5)


class TestProtectionConfigJson:
    def test_roundtrip(self):
        cfg = ProtectionConfig(Mechanism.DCHI, eta=2.0, pi_dim=3, sigma_eps=0.0, seed=42)
        again = ProtectionConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_documented_key_names(self):
        cfg = ProtectionConfig.from_json(
            '{"mechanism": "dchi", "eta": 2.0, "pi": 3, "sigma_eps": 0.0, "seed": 42}'
        )
        assert cfg.mechanism is Mechanism.DCHI
        assert cfg.pi_dim == 3
        assert cfg.seed == 42

    def test_validation(self):
        with pytest.raises(ValueError):
            ProtectionConfig(Mechanism.DCHI, eta=-1.0, pi_dim=2)
        with pytest.raises(ValueError):
            ProtectionConfig(Mechanism.GAUSSIAN, sigma_eps=-0.1)
