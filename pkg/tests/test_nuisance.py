import warnings

import numpy as np
import pytest

from misscausal.data import UnknownColumn, from_arrays
from misscausal.nuisance import (ModelSpec, NuisanceSpecs, PositivityWarning, build_designs, check_positivity,
                                 fit_nuisances_mnar_a, fit_nuisances_mnar_b, floor_prob)
from misscausal.simulate import generate, scenario_iii

NAN = np.nan


@pytest.fixture(scope="module")
def data():
    return generate(scenario_iii(n=3000), seed=9)


def test_spec_round_trip_and_default():
    specs = NuisanceSpecs(outcome=ModelSpec(covariates=("lo",), interactions=True),
                          exposure=ModelSpec(saturated=True))
    assert NuisanceSpecs.from_dict(specs.to_dict()) == specs
    d = NuisanceSpecs.from_dict({"default": {"saturated": True}, "outcome": {"covariates": ["lo"]}})
    assert d.exposure.saturated and d.outcome.covariates == ("lo",)
    with pytest.raises(ValueError):
        NuisanceSpecs.from_dict({"propensity": {}})
    with pytest.raises(ValueError):
        ModelSpec.from_dict({"degree": 2})


def test_unknown_covariate_is_rejected(data):
    with pytest.raises(UnknownColumn):
        fit_nuisances_mnar_a(data, NuisanceSpecs(outcome=ModelSpec(covariates=("age",))))


def test_designs_share_layout_and_zero_missing_rows():
    m1 = np.array([[0, 1], [1, 1], [NAN, 0]], dtype=float)
    m2 = np.array([[1, 0], [1, 1], [0, 0]], dtype=float)
    X1, X2 = build_designs(ModelSpec(saturated=True), m1, m2)
    assert X1.shape[1] == X2.shape[1] == 4
    np.testing.assert_array_equal(X1.sum(axis=1), [1, 1, 0])
    np.testing.assert_array_equal(X1[1], X2[1])
    (Xi,) = build_designs(ModelSpec(interactions=True), m2)
    np.testing.assert_array_equal(Xi[:, -1], m2[:, 0] * m2[:, 1])
    (X0,) = build_designs(ModelSpec(), np.zeros((3, 0)))
    np.testing.assert_array_equal(X0, np.ones((3, 1)))


def test_saturated_missingness_fits_are_empirical_frequencies(data):
    ns = fit_nuisances_mnar_b(data, NuisanceSpecs.saturated(), ordering=["lm1", "lm2"])
    lo = data.l_o[:, 0]
    r1 = data.r_l[:, 0] == 1
    for v in (0, 1):
        m = lo == v
        assert np.allclose(ns.pi_rl_hat[m, 0], r1[m].mean())
    # second indicator among units with the first covariate observed, by (lo, lm1)
    r2 = data.r_l[:, 1] == 1
    for v in (0, 1):
        for u in (0, 1):
            m = r1 & (lo == v) & (data.l_m[:, 0] == u)
            assert np.allclose(ns.pi_rl_hat[m, 1], r2[m].mean())
    full = r1 & r2
    ra = data.r_a == 1
    cell = full & (lo == 1) & (data.l_m[:, 0] == 1) & (data.l_m[:, 1] == 0)
    assert np.allclose(ns.pi_ra_hat[cell], ra[cell].mean())
    tgt = cell & ra
    assert np.allclose(ns.pi_a_hat[tgt], (data.a[tgt] == 1).mean())


def test_block_setting_uses_joint_indicator(data):
    ns = fit_nuisances_mnar_a(data, NuisanceSpecs.saturated())
    r = np.all(data.r_l == 1, axis=1)
    assert ns.pi_rl_hat.shape == (data.n, 1)
    for v in (0, 1):
        m = data.l_o[:, 0] == v
        assert np.allclose(ns.pi_rl_hat[m, 0], r[m].mean())
    np.testing.assert_array_equal(ns.target_mask, r & (data.r_a == 1) & (data.a == 1))


def test_weight_denominator_and_floor(data):
    ns = fit_nuisances_mnar_a(data, NuisanceSpecs())
    den = ns.weight_denominator()
    ref = floor_prob(ns.pi_a_hat) * floor_prob(ns.pi_ra_hat) * floor_prob(ns.pi_rl_hat[:, 0])
    np.testing.assert_allclose(den, ref)
    assert floor_prob(0.001) == 0.01 and floor_prob(0.5) == 0.5


def test_positivity_report_counts_floored_values():
    # the exposure is almost never 1 when lo = 1: the fitted propensity is tiny there
    rng = np.random.default_rng(0)
    n = 4000
    lo = rng.binomial(1, 0.5, n)
    a = np.where(lo == 1, (rng.random(n) < 0.002), rng.binomial(1, 0.5, n)).astype(float)
    a[0], lo[0] = 1.0, 1
    lm = rng.binomial(1, 0.5, (n, 1)).astype(float)
    y = rng.binomial(1, 0.5, n)
    d = from_arrays(y, a, lo[:, None], lm, lo_names=("lo",), lm_names=("m",))
    with pytest.warns(PositivityWarning):
        ns = fit_nuisances_mnar_a(d, NuisanceSpecs.saturated())
    rep = check_positivity(ns)
    assert rep.floored["pi_a"] >= 1
    assert rep.minima["pi_a"] == pytest.approx(0.01)
    assert rep.max_weight >= 1 / 0.01 - 1e-9
    with warnings.catch_warnings():
        warnings.simplefilter("error", PositivityWarning)
        fit_nuisances_mnar_a(d, NuisanceSpecs.saturated(), p_floor=1e-4)
