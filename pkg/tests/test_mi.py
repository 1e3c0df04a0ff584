import numpy as np
import pytest

from misscausal.data import from_arrays
from misscausal.mi import (AllMissingVariable, GridImputer, ImputationConfig, NotBinary, all_binary, grid_mi_psi,
                           impute, mi_estimate)
from misscausal.nuisance import NuisanceSpecs
from misscausal.simulate import generate, generate_full, scenario_i, to_observed, true_psi

SPECS = NuisanceSpecs()


@pytest.fixture(scope="module")
def mar_data():
    return generate(scenario_i(n=1500), seed=5)


def test_config_validation_and_round_trip():
    cfg = ImputationConfig(m=5, max_sweeps=3, seed=9, models={"lm1": "identity"})
    assert ImputationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ImputationConfig(m=1)
    with pytest.raises(ValueError):
        ImputationConfig(max_sweeps=0)
    with pytest.raises(ValueError):
        ImputationConfig(models={"a": "probit"})
    with pytest.raises(ValueError):
        ImputationConfig.from_dict({"draws": 3})


def test_imputations_keep_observed_cells_and_fill_the_rest(mar_data):
    sets = impute(mar_data, ImputationConfig(m=3, max_sweeps=2, seed=1))
    assert len(sets) == 3
    obs_a = mar_data.r_a == 1
    for d in sets:
        assert d.is_complete()
        assert not np.any(np.isnan(d.a)) and not np.any(np.isnan(d.l_m))
        np.testing.assert_array_equal(d.a[obs_a], mar_data.a[obs_a])
        ok = mar_data.r_l == 1
        np.testing.assert_array_equal(d.l_m[ok], mar_data.l_m[ok])
        assert set(np.unique(d.a)) <= {0.0, 1.0}
    # different imputations differ, identical seeds reproduce
    assert not np.array_equal(sets[0].a, sets[1].a)
    again = impute(mar_data, ImputationConfig(m=3, max_sweeps=2, seed=1))
    np.testing.assert_array_equal(again[2].l_m, sets[2].l_m)


def test_imputed_marginals_recover_full_data_under_mar():
    spec = scenario_i(n=40000)
    full = generate_full(spec, spec.n, 17)
    obs = to_observed(full)
    sets = impute(obs, ImputationConfig(m=2, max_sweeps=5, seed=0))
    for d in sets:
        assert abs(d.a.mean() - full["a"].mean()) < 0.01
        for j, name in enumerate(("lm1", "lm2")):
            assert abs(d.l_m[:, j].mean() - full[name].mean()) < 0.01


def test_continuous_variable_uses_linear_model():
    rng = np.random.default_rng(2)
    n = 3000
    lo = rng.binomial(1, 0.5, n)
    x = 2.0 + 1.5 * lo + rng.normal(size=n)
    a = rng.binomial(1, 0.5, n)
    y = rng.binomial(1, 0.5, n)
    xm = np.where(rng.random(n) < 0.3, np.nan, x)
    d = from_arrays(y, a, lo[:, None], xm[:, None])
    assert not all_binary(d)
    (imp,) = impute(d, ImputationConfig(m=2, max_sweeps=3))[:1]
    filled = imp.l_m[np.isnan(xm), 0]
    assert len(np.unique(filled)) > 100
    # MCAR deletion: imputed values share the conditional mean and spread of the truth
    assert abs(filled.mean() - x[np.isnan(xm)].mean()) < 0.1
    assert abs(filled.std() - x[np.isnan(xm)].std()) < 0.1


@pytest.mark.filterwarnings("ignore::misscausal.glm.SingularDesignWarning")
def test_perfect_prediction_imputes_deterministically():
    # x equals y wherever observed: the imputation model separates and the draws follow y
    rng = np.random.default_rng(3)
    n = 400
    y = rng.binomial(1, 0.5, n).astype(float)
    x = y.copy()
    x[rng.random(n) < 0.25] = np.nan
    d = from_arrays(y, rng.binomial(1, 0.5, n), np.zeros((n, 1)), x[:, None])
    for imp in impute(d, ImputationConfig(m=3, max_sweeps=2)):
        np.testing.assert_array_equal(imp.l_m[:, 0], y)


def test_all_missing_variable_is_rejected():
    d = from_arrays([1, 0, 1], [1, 0, 1], [[0], [1], [1]], [[np.nan], [np.nan], [np.nan]])
    with pytest.raises(AllMissingVariable):
        impute(d, ImputationConfig())
    with pytest.raises(AllMissingVariable):
        GridImputer(d)


def test_grid_engine_requires_binary_data():
    d = from_arrays([1, 0, 1], [1, np.nan, 0], [[0.5], [1], [1]], [[1], [0], [1]])
    with pytest.raises(NotBinary):
        GridImputer(d)


def test_grid_counts_preserve_totals_and_observed_values(mar_data):
    imp = GridImputer(mar_data)
    rng = np.random.default_rng(0)
    w = np.ones((2, mar_data.n))
    w[1] = rng.multinomial(mar_data.n, np.full(mar_data.n, 1 / mar_data.n))
    counts = imp.impute_counts(w, 4, 3, rng)
    assert counts.shape == (2, 4, imp.C)
    np.testing.assert_allclose(counts.sum(axis=2), np.repeat(w.sum(axis=1)[:, None], 4, axis=1))
    # the outcome is never imputed, so its margin matches the weighted data
    y_bit = imp.cell_bits[:, 0] == 1
    np.testing.assert_allclose(counts[:, :, y_bit].sum(axis=2), np.repeat((w @ mar_data.y)[:, None], 4, axis=1))
    with pytest.raises(ValueError):
        imp.impute_counts(w * 0.5, 2, 1, rng)


def test_grid_and_unit_engines_agree_in_distribution():
    d = generate(scenario_i(n=600), seed=8)
    cfg = ImputationConfig(m=2, max_sweeps=3)
    imp = GridImputer(d)
    grid = []
    for s in range(150):
        psi, _ = grid_mi_psi(imp, SPECS, 1, np.ones((1, d.n)), cfg, np.random.default_rng([s]))
        grid.append(psi[0])
    units = [mi_estimate(d, ImputationConfig(m=2, max_sweeps=3, seed=s), SPECS, engine="units").psi_hat
             for s in range(150)]
    diff = np.mean(grid) - np.mean(units)
    se = np.sqrt(np.var(grid, ddof=1) / 150 + np.var(units, ddof=1) / 150)
    assert abs(diff) < 4 * se
    assert 0.5 < np.std(grid) / np.std(units) < 2.0


def test_mi_estimate_engines_and_complete_data(mar_data):
    cfg = ImputationConfig(m=5, seed=2)
    auto = mi_estimate(mar_data, cfg, SPECS, engine="auto")
    assert auto.diagnostics["engine"] == "grid"
    assert auto.psi_hat == mi_estimate(mar_data, cfg, SPECS, engine="grid").psi_hat
    with pytest.raises(ValueError):
        mi_estimate(mar_data, cfg, SPECS, engine="magic")
    supplied = impute(mar_data, cfg)
    res = mi_estimate(mar_data, cfg, SPECS, imputations=supplied)
    assert res.diagnostics["m"] == 5
    assert len(res.diagnostics["estimates"]) == 5


def test_mi_is_consistent_under_mar():
    spec = scenario_i(n=50000)
    d = generate(spec, seed=31)
    est = mi_estimate(d, ImputationConfig(m=5, seed=1), SPECS, engine="grid").psi_hat
    truth, _ = true_psi(spec, 1)
    assert abs(est - truth) < 0.01
