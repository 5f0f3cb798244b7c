import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dglab.harness.presets import label_coupled_preset, label_shift_preset
from dglab.scm import (
    ConfigError,
    DatasetFormatError,
    DomainSpec,
    IdentifiabilityError,
    SCMConfig,
    build_scm,
    check_causal_support,
    counterfactual_augment,
    oracle_invariant_encoder,
    oracle_posterior,
    read_dataset,
    sample_domain,
    write_dataset,
)

from .oracles import softmax_loop


def small_config(d_x=4, mixing=None, **kw) -> SCMConfig:
    base = dict(
        C=2,
        K=2,
        d_c=2,
        d_e=2,
        d_x=d_x,
        domains=[DomainSpec(0, np.array([0.5, 0.5]), np.zeros(2)), DomainSpec(1, np.array([0.2, 0.8]), np.ones(2))],
        component_means=np.array([[2.0, 0.0], [0.0, 2.0]]),
        label_weights=np.eye(2),
        mixing=np.eye(d_x, 4) if mixing is None else mixing,
    )
    base.update(kw)
    return SCMConfig(**base)


class TestBuildSCM:
    def test_identity_mixing(self):
        assert build_scm(small_config()).A.shape == (4, 4)

    def test_duplicated_columns(self):
        A = np.eye(4)
        A[:, 3] = A[:, 2]
        with pytest.raises(IdentifiabilityError):
            build_scm(small_config(mixing=A))

    def test_random_gaussian_tall(self):
        for seed in range(10):
            A = np.random.default_rng(seed).standard_normal((8, 4))
            assert np.linalg.matrix_rank(A) == 4
            build_scm(small_config(d_x=8, mixing=A))

    @pytest.mark.parametrize(
        "kw",
        [
            {"tau": 0.0},
            {"sigma_x": -1.0},
            {"mode": "other"},
            {"C": 3, "K": 2},
            {"domains": [DomainSpec(0, np.array([0.7, 0.7]), np.zeros(2))]},
            {"domains": [DomainSpec(0, np.array([0.5, 0.5]), np.zeros(2)), DomainSpec(0, np.array([0.5, 0.5]), np.zeros(2))]},
            {"label_weights": np.eye(3)},
        ],
    )
    def test_invalid_configs(self, kw):
        with pytest.raises(ConfigError):
            build_scm(small_config(**kw))


class TestSampleDomain:
    def test_n_zero(self):
        with pytest.raises(ValueError):
            sample_domain(build_scm(small_config()), 0, 0, 1)

    def test_unknown_domain(self):
        with pytest.raises(KeyError):
            sample_domain(build_scm(small_config()), 7, 10, 1)

    def test_degenerate_limit(self):
        scm = build_scm(small_config(sigma_c=0.0, sigma_e=0.0, sigma_x=0.0, tau=1e-9))
        ds = sample_domain(scm, 0, 500, 3)
        np.testing.assert_array_equal(ds.y, ds.k)
        assert len(np.unique(ds.x, axis=0)) == 2

    def test_label_marginal_against_quadrature(self):
        """Monte-Carlo marginal vs Gauss-Hermite integral of the softmax over each component."""
        cfg = label_shift_preset(0)
        scm = build_scm(cfg)
        dom = cfg.domain(0)
        nodes, w = np.polynomial.hermite_e.hermegauss(8)
        w = w / w.sum()
        grid = np.array(list(itertools.product(nodes, repeat=cfg.d_c)))
        gw = np.prod(np.array(list(itertools.product(w, repeat=cfg.d_c))), axis=1)
        analytic = np.zeros(cfg.C)
        for k in range(cfg.K):
            z = cfg.component_means[k] + cfg.sigma_c * grid
            post = np.array([softmax_loop(row) for row in z @ cfg.label_weights.T / cfg.tau])
            analytic += dom.weights[k] * (gw[:, None] * post).sum(0)
        empirical = sample_domain(scm, 0, 100_000, 11).label_marginal(cfg.C)
        assert 0.5 * np.abs(empirical - analytic).sum() < 0.01

    def test_deterministic(self):
        scm = build_scm(label_coupled_preset(0))
        a, b = sample_domain(scm, 2, 50, 9), sample_domain(scm, 2, 50, 9)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 3), st.integers(1, 200), st.integers(0, 2**31 - 1))
    def test_sample_invariants(self, e, n, seed):
        scm = build_scm(label_coupled_preset(0))
        ds = sample_domain(scm, e, n, seed)
        assert ds.n == n and np.all(ds.e == e)
        assert ds.y.min() >= 0 and ds.y.max() < scm.C
        np.testing.assert_allclose(ds.posterior.sum(1), 1.0, atol=1e-12)
        resid = ds.x - scm.mix(ds.z_c, ds.z_e)
        assert np.abs(resid).max() < 10 * scm.config.sigma_x + 1e-12


class TestOraclePosterior:
    def test_domain_independent(self):
        scm = build_scm(label_coupled_preset(0))
        a, b = sample_domain(scm, 0, 5, 1), sample_domain(scm, 3, 5, 1)
        z = a.z_c[:1]
        np.testing.assert_array_equal(oracle_posterior(scm, z), oracle_posterior(scm, z.copy()))
        b_post = oracle_posterior(scm, b.z_c)
        np.testing.assert_array_equal(b_post, b.posterior)

    def test_zero_weights_uniform(self):
        scm = build_scm(small_config(label_weights=np.zeros((2, 2))))
        np.testing.assert_allclose(oracle_posterior(scm, [[3.0, -1.0]]), [[0.5, 0.5]])

    def test_arithmetic(self):
        W = np.array([[1.0, -2.0], [0.5, 3.0]])
        scm = build_scm(small_config(label_weights=W, tau=0.7))
        z = np.array([0.3, -1.1])
        np.testing.assert_allclose(oracle_posterior(scm, z)[0], softmax_loop(list(W @ z / 0.7)), rtol=1e-14)


class TestOracleInvariantEncoder:
    def test_orthonormal_exact(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 4)))
        scm = build_scm(small_config(d_x=6, mixing=Q, sigma_x=0.0))
        ds = sample_domain(scm, 0, 200, 2)
        assert np.abs(oracle_invariant_encoder(scm, ds.x) - ds.z_c).max() < 1e-10

    def test_random_full_rank(self):
        A = np.random.default_rng(1).standard_normal((8, 4))
        scm = build_scm(small_config(d_x=8, mixing=A, sigma_x=0.0))
        ds = sample_domain(scm, 1, 200, 2)
        assert np.abs(oracle_invariant_encoder(scm, ds.x) - ds.z_c).max() <= 1e-8

    def test_ignores_environment(self):
        scm = build_scm(label_coupled_preset(0, sigma_x=0.0))
        z_c = np.array([[0.1, 0.2, 0.3, 0.4]])
        x1 = scm.mix(z_c, np.zeros((1, 4)))
        x2 = scm.mix(z_c, np.ones((1, 4)))
        np.testing.assert_allclose(oracle_invariant_encoder(scm, x1), oracle_invariant_encoder(scm, x2), atol=1e-12)


class TestCounterfactualAugment:
    def test_keeps_causal_latent(self, coupled_scm):
        s = sample_domain(coupled_scm, 0, 1, 4)[0]
        aug = counterfactual_augment(coupled_scm, s, 8)
        np.testing.assert_array_equal(aug.z_c, s.z_c)
        assert aug.y == s.y

    def test_encoder_unchanged_without_noise(self):
        scm = build_scm(label_coupled_preset(0, sigma_x=0.0))
        s = sample_domain(scm, 1, 1, 4)[0]
        aug = counterfactual_augment(scm, s, 8)
        np.testing.assert_allclose(oracle_invariant_encoder(scm, aug.x), oracle_invariant_encoder(scm, s.x), atol=1e-10)

    def test_covers_all_environment_clusters(self):
        cfg = label_shift_preset(0, sigma_e=0.02)
        scm = build_scm(cfg)
        s = sample_domain(scm, 0, 1, 4)[0]
        centres = np.stack([d.env_mean for d in cfg.domains])
        z_e = np.stack([counterfactual_augment(scm, s, seed).z_e for seed in range(10_000)])
        nearest = ((z_e[:, None, :] - centres[None]) ** 2).sum(-1).argmin(1)
        assert set(nearest.tolist()) == set(range(len(centres)))


class TestCausalSupport:
    def test_uniform_passes(self):
        assert check_causal_support(build_scm(small_config()), [0, 1]).passed

    def test_constructed_violation(self):
        cfg = label_shift_preset(0)
        for d in cfg.domains:
            w = d.weights.copy()
            w[3] = 0.0
            d.weights = w / w.sum()
        rep = check_causal_support(build_scm(cfg), cfg.domain_ids)
        assert not rep.passed and rep.missing == [3]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_scan(self, seed):
        rng = np.random.default_rng(seed)
        cfg = label_shift_preset(0)
        for d in cfg.domains:
            w = rng.uniform(size=cfg.K) * (rng.uniform(size=cfg.K) < 0.5)
            w[rng.integers(cfg.K)] += 0.1
            d.weights = w / w.sum()
        ids = [0, 1]
        brute = [k for k in range(cfg.K) if all(cfg.domain(e).weights[k] == 0 for e in ids)]
        rep = check_causal_support(build_scm(cfg), ids)
        assert rep.missing == brute and rep.passed == (not brute)


class TestDatasetFiles:
    def test_round_trip(self, tmp_path, coupled_scm):
        ds = sample_domain(coupled_scm, 2, 30, 5)
        write_dataset(ds, tmp_path / "d.txt", coupled_scm.C)
        back, C = read_dataset(tmp_path / "d.txt")
        assert C == coupled_scm.C and back.e == ds.e
        for f in ("x", "y", "z_c", "z_e", "k"):
            np.testing.assert_array_equal(getattr(back, f), getattr(ds, f))

    def test_truncated(self, tmp_path, coupled_scm):
        write_dataset(sample_domain(coupled_scm, 0, 5, 5), tmp_path / "d.txt", coupled_scm.C)
        lines = (tmp_path / "d.txt").read_text().splitlines()
        (tmp_path / "d.txt").write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(DatasetFormatError, match="row 4"):
            read_dataset(tmp_path / "d.txt")

    def test_header_width_mismatch(self, tmp_path, coupled_scm):
        write_dataset(sample_domain(coupled_scm, 0, 5, 5), tmp_path / "d.txt", coupled_scm.C)
        text = (tmp_path / "d.txt").read_text().replace("d_x=16", "d_x=15", 1)
        (tmp_path / "d.txt").write_text(text)
        with pytest.raises(DatasetFormatError, match="fields"):
            read_dataset(tmp_path / "d.txt")

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.txt").write_text("nonsense\n")
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "d.txt")
