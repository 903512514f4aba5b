"""Numerical checks of the expansion, chain and mixture inequalities."""

import numpy as np
import pytest

from class_stream import MixtureWeights
from consolidation.core.boundslab import (BoundLinkFixture, BoundTrialReport, LinearFixture, MixtureSpec,
                                          PairSample, QuadraticFixture, chain_links,
                                          channel_bound_link, check_cs_chain, check_importance_bound_link,
                                          check_proposition1, check_taylor, random_bound_link_fixture,
                                          random_network_fixture, run_cs_suite, run_importance_link_suite,
                                          run_proposition1_suite, run_taylor_suite)
from consolidation.core.errors import ContractError, NonDifferentiableError


class TestReport:
    def test_strict_suite(self):
        r = BoundTrialReport("x", trials=3)
        r.record(-0.5, False)
        assert r.passed
        r.record(0.1, True)
        assert not r.passed
        assert r.max_slack == 0.1

    def test_rate_suite(self):
        r = BoundTrialReport("x", trials=20, violations=1, required_pass_rate=0.95)
        assert r.passed
        r.violations = 2
        assert not r.passed

    def test_nothing_evaluated_fails(self):
        assert not BoundTrialReport("x", trials=2, excluded=2).passed

    def test_to_dict(self):
        d = BoundTrialReport("cs_chain").to_dict()
        assert d["max_slack"] is None and d["suite"] == "cs_chain"


class TestTaylor:
    def test_linear_is_exact(self, rng):
        z0 = rng.standard_normal((3, 4))
        fixture = LinearFixture(rng.standard_normal((3, 4)), 0.7, z0, rng.standard_normal((3, 4)))
        report = check_taylor(fixture)
        assert report.exact and report.passed
        assert report.ratios == []

    def test_zero_direction(self, rng):
        fixture = QuadraticFixture(rng.standard_normal((2, 3)), np.zeros((2, 3)))
        report = check_taylor(fixture)
        assert report.residuals == [0.0, 0.0, 0.0]
        assert report.passed

    def test_quadratic_quarters(self, rng):
        fixture = QuadraticFixture(rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
        report = check_taylor(fixture, eps_list=(0.1, 0.05, 0.025))
        d2 = np.sum(fixture.direction ** 2)
        np.testing.assert_allclose(report.residuals, [e * e * d2 for e in report.eps], rtol=1e-8)
        np.testing.assert_allclose(report.ratios, 4.0, rtol=1e-6)

    def test_step_sizes_must_halve(self, rng):
        fixture = QuadraticFixture(np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ContractError):
            check_taylor(fixture, eps_list=(0.1, 0.03))
        with pytest.raises(ContractError):
            check_taylor(fixture, eps_list=(0.1,))

    def test_smooth_networks_scale_quadratically(self):
        outcomes = []
        for seed in range(10):
            try:
                outcomes.append(check_taylor(random_network_fixture(seed=seed)).passed)
            except NonDifferentiableError:
                continue
        assert len(outcomes) >= 5
        assert sum(outcomes) >= 0.8 * len(outcomes)

    def test_zero_perturbation_on_network(self):
        fixture = random_network_fixture(seed=1)
        fixture.direction = np.zeros_like(fixture.z0)
        report = check_taylor(fixture)
        assert report.exact

    def test_kink_crossing_is_reported(self):
        fixture = random_network_fixture(seed=2, activation="relu")
        fixture.direction = fixture.direction / np.linalg.norm(fixture.direction) * 1e4
        with pytest.raises(NonDifferentiableError):
            check_taylor(fixture)

    def test_gradient_matches_finite_difference(self):
        fixture = random_network_fixture(seed=4)
        g = fixture.gradient(fixture.z0)
        eps = 1e-6
        up = fixture.loss(fixture.z0 + eps * fixture.direction)
        down = fixture.loss(fixture.z0 - eps * fixture.direction)
        assert (up - down) / (2 * eps) == pytest.approx(np.sum(g * fixture.direction), rel=1e-4, abs=1e-9)

    def test_suite(self):
        report = run_taylor_suite(trials=10, seed=0)
        assert report.trials == 10
        assert report.evaluated >= 5
        assert report.violations <= 0.2 * report.evaluated


class TestCsChain:
    def _aligned(self, rng):
        g = rng.standard_normal((5, 7))
        return PairSample(g, 2.5 * g)

    def test_aligned_is_tight(self, rng):
        links = chain_links(self._aligned(rng))
        assert links["inner"] == pytest.approx(links["abs_inner"], rel=1e-12)
        assert links["abs_inner"] == pytest.approx(links["norm_product"], rel=1e-12)

    def test_orthogonal_pairs(self):
        g = np.array([[1.0, 0.0], [0.0, 2.0]])
        d = np.array([[0.0, 3.0], [4.0, 0.0]])
        links = chain_links(PairSample(g, d))
        assert links["inner"] == 0.0 and links["abs_inner"] == 0.0
        assert links["norm_product"] > 0.0

    def test_constant_norms_make_jensen_tight(self, rng):
        g = rng.standard_normal((6, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        d = rng.standard_normal((6, 3))
        d *= 2.0 / np.linalg.norm(d, axis=1, keepdims=True)
        links = chain_links(PairSample(g, d))
        assert links["norm_product"] == pytest.approx(links["sqrt_moments"], rel=1e-12)

    def test_min_trials(self, rng):
        with pytest.raises(ContractError):
            check_cs_chain([self._aligned(rng)] * 10)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            chain_links(PairSample(np.ones((2, 3)), np.ones((2, 4))))

    def test_negative_weights(self):
        with pytest.raises(ContractError):
            PairSample(np.ones((2, 1)), np.ones((2, 1)), np.array([1.0, -1.0])).probabilities()

    def test_suite(self):
        report = run_cs_suite(trials=200, seed=3)
        assert report.trials == 200
        assert report.passed


class TestProposition1:
    def _spec(self, phi, old_values, new_values):
        return MixtureSpec(MixtureWeights(phi), np.ones(len(old_values)) / len(old_values), old_values,
                           np.ones(len(new_values)) / len(new_values), new_values)

    def test_arithmetic(self):
        report = check_proposition1(self._spec(0.5, [2.0], [4.0]))
        assert report.passed
        assert report.links[0]["mixture"] == 3.0
        assert report.links[0]["old_term"] == 1.0

    def test_no_new_share(self):
        report = check_proposition1(self._spec(1.0, [1.0, 3.0], [10.0]))
        link = report.links[0]
        assert link["old_term"] == link["mixture"] == 2.0

    def test_zero_new_discrepancy(self):
        link = check_proposition1(self._spec(0.3, [5.0], [0.0])).links[0]
        assert link["old_term"] == pytest.approx(link["mixture"], rel=1e-15)

    def test_negative_value(self):
        with pytest.raises(ContractError):
            check_proposition1(self._spec(0.5, [-1.0], [1.0]))

    def test_probabilities_validated(self):
        with pytest.raises(ContractError):
            MixtureSpec(MixtureWeights(0.5), [0.5, 0.6], [1.0, 1.0], [1.0], [1.0])

    def test_from_classes(self):
        spec = MixtureSpec.from_classes(MixtureWeights(0.25),
                                        old=[(0.5, [1.0], [2.0]), (0.5, [0.5, 0.5], [0.0, 4.0])],
                                        new=[(1.0, [1.0], [8.0])])
        probs, values = spec.mixture()
        assert float(np.sum(probs * values)) == pytest.approx(0.25 * 2.0 + 0.75 * 8.0)

    def test_suite(self):
        report = run_proposition1_suite(trials=200, seed=5)
        assert report.trials == 200 and report.passed


class TestImportanceLink:
    def test_constant_single_channel(self):
        g = np.tile(np.array([[1.0, 2.0], [0.5, -1.0]]), (4, 1, 1))
        d = np.tile(np.array([[0.3, 0.0], [1.0, 1.0]]), (4, 1, 1))
        lhs, rhs = channel_bound_link(g, d)
        assert lhs == pytest.approx(np.sum(g[0] * d[0]) ** 2)
        assert rhs == pytest.approx(np.sum(g[0] ** 2) * np.sum(d[0] ** 2))
        assert lhs <= rhs

    def test_identical_student(self):
        fixture = random_bound_link_fixture(seed=0)
        same = BoundLinkFixture(fixture.teacher, fixture.teacher, fixture.images, fixture.targets)
        report = check_importance_bound_link(same)
        assert report.passed
        assert all(link["lhs"] == 0.0 and link["rhs"] == 0.0 for link in report.links)

    def test_perturbed_student(self):
        report = check_importance_bound_link(random_bound_link_fixture(seed=11))
        assert report.trials == 3 + 4
        assert report.passed

    def test_suite(self):
        report = run_importance_link_suite(trials=5, seed=0)
        assert report.trials == 5 * 7 and report.passed

    @pytest.mark.slow
    def test_hundred_seeds(self):
        assert run_importance_link_suite(trials=100, seed=1).passed
