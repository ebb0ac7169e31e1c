import numpy as np
import pytest
from scipy.special import expit

from saeforest.areas import CensusFrame
from saeforest.baseline import cep_area_proportions, fit_glmm_pql
from saeforest.forest import ForestConfig
from saeforest.gmerf import GmerfConfig
from saeforest.mixedmodel import GroupedData, gll
from saeforest.simulation import draw_sample, generate_population, normal_small


def cfg():
    return GmerfConfig(forest=ForestConfig(n_trees=2, seed=0))


class TestFitGlmmPql:
    def test_intercept_only_model_recovery(self, rng):
        n, d = 5000, 20
        X = rng.normal(size=(n, 2))
        area = rng.integers(0, d, size=n)
        y = (rng.random(n) < 0.5).astype(int)  # beta = 0 everywhere
        model = fit_glmm_pql(y, X, area, cfg())
        assert abs(model.beta[0]) < 0.15
        assert np.all(np.abs(model.beta[1:]) < 0.15)

    def test_balanced_orthogonal_design_gives_null_slopes(self, rng):
        n = 2000
        X = rng.normal(size=(n, 2))
        area = np.repeat(np.arange(8), n // 8)
        y = np.tile([0, 1], n // 2)  # independent of X by construction
        model = fit_glmm_pql(y, X, area, cfg())
        assert np.all(np.abs(model.beta[1:]) < 0.1)

    def test_normal_small_recovers_negative_signs(self):
        s = normal_small()
        pop = generate_population(s, 5)
        sample = draw_sample(pop, s.allocation, 6)
        model = fit_glmm_pql(sample.y, sample.x, sample.area, cfg())
        assert model.beta[1] < 0
        assert model.beta[2] < 0

    def test_rank_deficiency_names_columns(self, rng):
        n = 60
        x1 = rng.normal(size=n)
        x2 = rng.normal(size=n)
        X = np.column_stack([x1, x2, x1 + x2])
        area = np.repeat([0, 1, 2], n // 3)
        y = (rng.random(n) < 0.5).astype(int)
        with pytest.raises(ValueError, match="rank deficient"):
            fit_glmm_pql(y, X, area, cfg())

    def test_gll_trace_matches_shared_criterion(self, rng):
        n, d = 300, 6
        X = rng.normal(size=(n, 2))
        area = np.repeat(np.arange(d), n // d)
        eta = 0.2 - 0.6 * X[:, 0] + rng.normal(0, 0.5, d)[area]
        y = (rng.random(n) < expit(eta)).astype(int)
        model = fit_glmm_pql(y, X, area, cfg())
        assert len(model.trace.gll) == model.trace.n_macro
        assert all(np.isfinite(g) for trace in model.trace.gll for g in trace)

        # the first recorded value must equal the shared criterion evaluated
        # at the first WLS state (nu = 0, initial linearization)
        from saeforest.baseline import _wls
        from saeforest.gmerf import initialize_mu, linearize
        from saeforest.mixedmodel import blup, estimate_sigma2

        y_l, w = linearize(y, initialize_mu(y))
        X1 = np.column_stack([np.ones(n), X])
        beta0 = _wls(X1, y_l, w)
        gd = GroupedData(y_l=y_l, offset=X1 @ beta0, weights=w, area=area)
        vc0 = estimate_sigma2(gd)
        nu0 = blup(gd, vc0)
        assert model.trace.gll[0][0] == pytest.approx(gll(gd, nu0, vc0), rel=1e-12)

    def test_affine_recoding_equivariance(self, rng):
        n, d = 400, 8
        X = rng.normal(size=(n, 2))
        area = np.repeat(np.arange(d), n // d)
        eta = 0.3 - 0.5 * X[:, 0] + 0.2 * X[:, 1] + rng.normal(0, 0.4, d)[area]
        y = (rng.random(n) < expit(eta)).astype(int)
        census = CensusFrame(area=np.repeat(np.arange(d), 30),
                             features=rng.normal(size=(30 * d, 2)))
        base = fit_glmm_pql(y, X, area, cfg())
        base_est = cep_area_proportions(base, census)

        X_re = X.copy()
        X_re[:, 0] = 2.0 * X[:, 0] + 3.0
        census_re = CensusFrame(
            area=census.area,
            features=np.column_stack([2.0 * census.features[:, 0] + 3.0,
                                      census.features[:, 1]]),
        )
        recoded = fit_glmm_pql(y, X_re, area, cfg())
        recoded_est = cep_area_proportions(recoded, census_re)
        np.testing.assert_allclose(
            [e.mu_hat for e in base_est], [e.mu_hat for e in recoded_est], atol=1e-6
        )

    def test_converges_on_scenario_data(self):
        s = normal_small()
        pop = generate_population(s, 12)
        sample = draw_sample(pop, s.allocation, 13)
        model = fit_glmm_pql(sample.y, sample.x, sample.area, cfg())
        assert model.converged


class TestCepAreaProportions:
    def make_model(self, beta, nu_hat):
        from saeforest.gmerf import FitTrace
        from saeforest.baseline import GlmmModel

        return GlmmModel(
            beta=np.asarray(beta, dtype=float),
            nu_hat=dict(nu_hat),
            sigma2_nu=0.3,
            area_ids_sampled=frozenset(nu_hat),
            trace=FitTrace(),
            n_by_area={a: 2 for a in nu_hat},
            eta_insample=np.zeros(2),
            mu_insample=np.full(2, 0.5),
        )

    def test_null_model_gives_half(self, rng):
        model = self.make_model([0.0, 0.0], {0: 0.0, 1: 0.0})
        census = CensusFrame(area=np.repeat([0, 1], 9),
                             features=rng.normal(size=(18, 1)))
        for e in cep_area_proportions(model, census):
            assert e.mu_hat == pytest.approx(0.5)

    def test_single_unit_area_is_pointwise_expit(self):
        model = self.make_model([0.0, 1.0], {0: 0.0, 1: 0.0})
        census = CensusFrame(area=np.array([0, 1]),
                             features=np.array([[0.0], [1.0986122886681098]]))
        ests = cep_area_proportions(model, census)
        assert ests[0].mu_hat == pytest.approx(0.5, abs=1e-12)
        assert ests[1].mu_hat == pytest.approx(0.75, abs=1e-10)

    def test_unsampled_area_drops_effect(self, rng):
        model = self.make_model([0.4, 0.0], {0: 5.0})
        census = CensusFrame(area=np.repeat([0, 1], 5),
                             features=np.zeros((10, 1)))
        ests = {e.area_id: e for e in cep_area_proportions(model, census)}
        assert ests[1].mu_hat == pytest.approx(float(expit(0.4)))
        assert ests[0].mu_hat == pytest.approx(float(expit(5.4)))
