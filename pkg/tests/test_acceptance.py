"""End-to-end acceptance checks.

The Monte Carlo studies use the fixed master seed ``SEED`` and the on-disk
study cache, so the first run computes them (hours on one core, dominated
by the multiple-imputation bootstrap of Scenario I) and later runs read the
stored replications. Each criterion prints one PASS/FAIL line in the
terminal summary.
"""

import time
import warnings

import numpy as np
import pytest

from conftest import record
from misscausal.cli import main
from misscausal.estimators import estimate_ice_a, estimate_ice_b, estimate_ipw_a, estimate_ipw_b, \
    estimate_tmle_a, estimate_tmle_b, tmle_complete_data
from misscausal.data import fully_observed
from misscausal.glm import SingularDesignWarning
from misscausal.nuisance import NuisanceSpecs, PositivityWarning
from misscausal.simulate import (ARMS, arm_specs, assumption_audit, generate, ordering_experiment, run_study,
                                 scenario_i, scenario_ii, scenario_iii)
from oracles import block_formula, sequential_formula

SEED = 2024
REPS = 1000
B = 1000
SAT = NuisanceSpecs.saturated()


def _study(spec, boot, arms=ARMS):
    t0 = time.perf_counter()
    reports = run_study(spec, reps=REPS, b=B, master_seed=SEED, arms={a: arm_specs(a) for a in arms},
                        bootstrap_estimators=boot, cache=True)
    return {(r.estimator_id, r.arm): r for r in reports}, time.perf_counter() - t0


@pytest.fixture(scope="module")
def study_i():
    return _study(scenario_i(), {"mi"}, arms=("i",))


@pytest.fixture(scope="module")
def study_ii():
    return _study(scenario_ii(), {"tmle_a"})


@pytest.fixture(scope="module")
def study_iii():
    return _study(scenario_iii(), {"tmle_b"})


def _unbiased(r):
    return abs(r.bias) < max(0.005, 3 * r.mcse_bias)


def _biased(r):
    return abs(r.bias) > 3 * r.mcse_bias


def _cp_ok(cp):
    return 0.925 <= cp <= 0.97


def test_criterion_01_npmle_equivalence():
    t0 = time.perf_counter()
    worst = {}
    ok = True
    for family, make, oracle, fns in (
            ("A", scenario_ii, block_formula, (estimate_tmle_a, estimate_ice_a, estimate_ipw_a)),
            ("B", scenario_iii, sequential_formula, (estimate_tmle_b, estimate_ice_b, estimate_ipw_b))):
        d = generate(make(n=2000), seed=101)
        ref = oracle(d, 1)
        gaps = [abs(fn(d, SAT).psi_hat - ref) for fn in fns]
        worst[family] = gaps
        ok &= gaps[0] < 1e-6 and gaps[1] < 1e-8 and gaps[2] < 1e-8
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5
    record(1, ok, f"max |TMLE-oracle| {max(worst['A'][0], worst['B'][0]):.1e}, max |ICE/IPW-oracle| "
                  f"{max(worst['A'][1:] + worst['B'][1:]):.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_reductions():
    rng = np.random.default_rng(202)
    n = 1000
    lo = rng.binomial(1, 0.5, n)
    lm = rng.binomial(1, 0.3 + 0.3 * lo[:, None], (n, 2))
    a = rng.binomial(1, 0.3 + 0.2 * lm[:, 0] + 0.2 * lo)
    y = rng.binomial(1, 0.2 + 0.3 * a + 0.2 * lm[:, 1])
    full = fully_observed(y, a, lo[:, None], lm, lo_names=("lo",), lm_names=("lm1", "lm2"))
    d = generate(scenario_ii(n=2000), seed=202)
    one = d.replace(l_m=d.l_m[:, :1], lm_names=("lm1",), lm_groups=(0,), r_l=d.r_l[:, :1], group_names=None)
    specs = NuisanceSpecs()
    t0 = time.perf_counter()
    g1 = abs(estimate_tmle_a(full, specs).psi_hat - tmle_complete_data(full, specs).psi_hat)
    g2 = abs(estimate_tmle_b(one, specs).psi_hat - estimate_tmle_a(one, specs).psi_hat)
    elapsed = time.perf_counter() - t0
    ok = g1 < 1e-10 and g2 < 1e-10 and elapsed < 1
    record(2, ok, f"|TMLE-A - complete TMLE| {g1:.1e}, |TMLE-B - TMLE-A| (q=1) {g2:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_03_score_equations():
    worst_score = worst_mean = 0.0
    fits = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        for make, fn in ((scenario_ii, estimate_tmle_a), (scenario_iii, estimate_tmle_b)):
            for seed in range(5):
                d = generate(make(n=2500), seed=300 + seed)
                for arm in ARMS:
                    for a in (1, 0):
                        res = fn(d, arm_specs(arm), a)
                        worst_score = max(worst_score, *map(abs, res.diagnostics["scores"]))
                        worst_mean = max(worst_mean, abs(np.mean(res.influence_values)))
                        fits += 1
    ok = worst_score < 1e-6 and worst_mean < 1e-6
    record(3, ok, f"{fits} fits, max |score mean| {worst_score:.1e}, max |mean IF| {worst_mean:.1e}")
    assert ok


def _double_robustness(reports, fam):
    lines, ok = [], True
    for arm in ARMS:
        t = reports[(f"tmle_{fam}", arm)]
        good = _unbiased(t) and _cp_ok(t.cp)
        ok &= good
        lines.append(f"TMLE({arm}) bias {t.bias:+.4f} CP {100 * t.cp:.1f}")
        for est in ("mi", "cc"):
            ok &= _biased(reports[(est, arm)])
    ice = reports[(f"ice_{fam}", "ii")]
    ipw = reports[(f"ipw_{fam}", "iii")]
    ok &= _biased(ice) and _biased(ipw)
    lines.append(f"ICE(ii) bias {ice.bias:+.4f}, IPW(iii) bias {ipw.bias:+.4f}, "
                 f"MI bias {reports[('mi', 'i')].bias:+.4f}, CC bias {reports[('cc', 'i')].bias:+.4f}")
    return ok, "; ".join(lines)


def test_criterion_04_double_robustness(study_ii, study_iii):
    (r2, t2), (r3, t3) = study_ii, study_iii
    ok2, d2 = _double_robustness(r2, "a")
    ok3, d3 = _double_robustness(r3, "b")
    record(4, ok2 and ok3, f"II: {d2} | III: {d3} | wall {t2 / 60:.1f}+{t3 / 60:.1f} min")
    assert ok2 and ok3


def test_criterion_05_mar_validity_of_mi(study_i):
    reports, elapsed = study_i
    mi, cc = reports[("mi", "i")], reports[("cc", "i")]
    ok = _unbiased(mi) and _cp_ok(mi.cp) and _biased(cc) and cc.bias < 0
    record(5, ok, f"MI bias {mi.bias:+.4f} (MCSE {mi.mcse_bias:.4f}) CP {100 * mi.cp:.1f}; "
                  f"CC bias {cc.bias:+.4f} (MCSE {cc.mcse_bias:.4f}); wall {elapsed / 60:.1f} min")
    assert ok


def test_criterion_06_efficiency(study_i, study_ii, study_iii):
    ratios = {}
    for name, (reports, _), fam in (("I", study_i, "a"), ("II", study_ii, "a"), ("III", study_iii, "b")):
        ratios[name] = reports[(f"tmle_{fam}", "i")].emp_se / reports[(f"ipw_{fam}", "i")].emp_se
    ok = all(r <= 1.05 for r in ratios.values())
    record(6, ok, ", ".join(f"SE(TMLE)/SE(IPW) {k} = {v:.4f}" for k, v in ratios.items()))
    assert ok


def test_criterion_07_if_inference(study_i, study_ii, study_iii):
    ok, parts = True, []
    for name, (reports, _), fam in (("I", study_i, "a"), ("II", study_ii, "a"), ("III", study_iii, "b")):
        t = reports[(f"tmle_{fam}", "i")]
        rel = t.mean_if_se / t.emp_se - 1
        ok &= _cp_ok(t.cp_if) and abs(rel) <= 0.15
        parts.append(f"{name}: IF CP {100 * t.cp_if:.1f}, IF SE/emp SE - 1 = {rel:+.3f}")
    record(7, ok, "; ".join(parts))
    assert ok


def test_criterion_08_ordering():
    cmp_ = ordering_experiment(reps=REPS, master_seed=SEED, cache=True)
    inc, dec = cmp_.reports
    ok = _unbiased(inc) and _unbiased(dec) and cmp_.se_ratio <= 1.02
    record(8, ok, f"order {cmp_.increasing}: bias {inc.bias:+.4f}, order {cmp_.decreasing}: bias {dec.bias:+.4f}, "
                  f"SE ratio {cmp_.se_ratio:.4f} (missing rates {cmp_.missing_rates['lm1']:.3f}/"
                  f"{cmp_.missing_rates['lm2']:.3f})")
    assert ok


def test_criterion_09_assumption_audit():
    checks = []
    with warnings.catch_warnings():
        # sparse saturated cells can separate; the forbidden coefficients are unaffected
        warnings.simplefilter("ignore", SingularDesignWarning)
        for make in (scenario_i, scenario_ii, scenario_iii):
            checks += assumption_audit(make(), draws=1_000_000, seed=SEED)
    worst = max(checks, key=lambda c: abs(c.z))
    ok = all(c.passed for c in checks)
    record(9, ok, f"{len(checks)} coefficients, max |z| {abs(worst.z):.2f} ({worst.scenario}: {worst.statement}, "
                  f"{worst.forbidden})")
    assert ok


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(
        "command: simulate\n"
        "seed: 99\n"
        "output:\n  formats: [csv, json, text-table]\n"
        "bootstrap:\n  b: 100\n"
        "imputation:\n  m: 3\n"
        "simulate:\n  reps: 4\n  arms: [i, ii]\n  scenario:\n    scenario: I_MAR\n    n: 500\n")
    outs = []
    out = tmp_path / "out"
    for threads in ("1", "1", "3", "0"):
        assert main(["--config", str(cfg), "--out", str(out), "--threads", threads]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    ok = all(o == outs[0] for o in outs[1:]) and len(outs[0]) == 3
    record(10, ok, f"{len(outs)} runs (threads 1, 1, 3, auto), {len(outs[0])} files byte-identical")
    assert ok
