"""Data-generating processes, counterfactual truth and the Monte Carlo harness.

Every scenario shares one structural model over binary variables::

    U1, U2, U3, UA1, UA2 ~ N(0, 1) independent
    lo  ~ Bernoulli(expit(...U1, U3))            U1: common cause of lo and lm
    lm1 ~ Bernoulli(expit(...lo, U1, U2))        U2: common cause of lm and y
    lm2 ~ Bernoulli(expit(...lo, lm1, U1, U2))   U3: common cause of lo and y
    a   ~ Bernoulli(expit(...lo, lm1, lm2, UA1, UA2))
    y   ~ Bernoulli(expit(...a, lo, lm1, lm2, U2, U3))

and differs only in the observation equations. ``UA1`` is an unmeasured
common cause of the exposure and its observation indicator, ``UA2`` of the
exposure and the covariate indicators. Each equation is a mapping from term
to coefficient on the logit scale; ``"const"`` is the intercept and a term
``"x*z"`` is a product. Observation equations give P(R = 1).
"""

from __future__ import annotations

import ast
import csv
import hashlib
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ObservedDataset, atomic_write_text
from .estimators import ESTIMATORS, DegenerateWeights
from .glm import SingularDesignWarning, fit_glm, glm_covariance
from .inference import (CHUNK, BatchEvaluator, EstimatorSpec, TooManyFailedResamples, _map_chunks, chunk_rng,
                        if_variance, resample_counts, run_estimator, summarize)
from .mi import ImputationConfig
from .nuisance import EmptyStratum, ModelSpec, NuisanceSpecs, PositivityWarning, build_designs

SCENARIOS = ("I_MAR", "II_MNAR_A", "III_MNAR_B")

LATENTS = ("u1", "u2", "u3", "ua1", "ua2")
STRUCTURAL_ORDER = ("lo", "lm1", "lm2", "a", "y")
LO_NAMES = ("lo",)
LM_NAMES = ("lm1", "lm2")

DEFAULT_STRUCTURAL = {
    "lo": {"const": 0.0, "u1": 0.6, "u3": 0.6},
    "lm1": {"const": -0.4, "lo": 0.8, "u1": 0.6, "u2": 0.6},
    "lm2": {"const": -0.3, "lo": 0.4, "lm1": 0.6, "u1": 0.5, "u2": 0.5},
    "a": {"const": -1.6, "lo": 0.5, "lm1": 1.2, "lm2": 1.0, "ua1": 0.6, "ua2": 0.6},
    "y": {"const": -2.9, "a": 0.7, "lo": 0.9, "lm1": 1.0, "lm2": 0.8, "u2": 0.5, "u3": 0.5},
}

# observation equations per scenario; keys are indicator names
DEFAULT_MISSINGNESS = {
    "I_MAR": {
        "r": {"const": 2.2, "lo": -1.6},
    },
    "II_MNAR_A": {
        "r_l": {"const": 3.0, "lo": -1.4, "ua2": 0.5},
        "r_a": {"const": 3.4, "lo": -0.4, "lm1": -0.5, "lm2": -0.4, "a": -1.4, "ua1": 0.6},
    },
    "III_MNAR_B": {
        "r_l1": {"const": 3.6, "lo": -1.4, "ua2": 0.5},
        "r_l2": {"const": 3.4, "lo": -0.6, "lm1": -1.2, "ua2": 0.5},
        "r_a": {"const": 3.4, "lo": -0.4, "lm1": -0.5, "lm2": -0.4, "a": -1.4, "ua1": 0.6},
    },
}

INDICATORS = {"I_MAR": ("r",), "II_MNAR_A": ("r_l", "r_a"), "III_MNAR_B": ("r_l1", "r_l2", "r_a")}


def _freeze(eqs):
    return {k: {t: float(c) for t, c in sorted(v.items())} for k, v in sorted(eqs.items())}


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """One simulation scenario: structural and observation equations plus run settings.

    Equality and hashing use :meth:`key`, a content hash of every field.
    """

    scenario: str
    n: int = 2500
    a: int = 1
    seed: int = 0
    structural: dict = field(default_factory=lambda: _freeze(DEFAULT_STRUCTURAL))
    missingness: dict = field(default_factory=dict)
    target_missing: tuple = (0.2, 0.3)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.a not in (0, 1):
            raise ValueError("exposure level must be 0 or 1")
        miss = self.missingness or DEFAULT_MISSINGNESS[self.scenario]
        object.__setattr__(self, "structural", _freeze(self.structural))
        object.__setattr__(self, "missingness", _freeze(miss))
        object.__setattr__(self, "target_missing", tuple(float(x) for x in self.target_missing))
        if set(self.structural) != set(STRUCTURAL_ORDER):
            raise ValueError(f"structural equations must cover {STRUCTURAL_ORDER}")
        if set(self.missingness) != set(INDICATORS[self.scenario]):
            raise ValueError(f"{self.scenario} needs observation equations {INDICATORS[self.scenario]}")
        known = set(LATENTS) | set(STRUCTURAL_ORDER) | {"const"}
        for name, eq in {**self.structural, **self.missingness}.items():
            for term in eq:
                if not set(term.split("*")) <= known:
                    raise ValueError(f"equation {name!r} uses unknown term {term!r}")
        for pos, name in enumerate(STRUCTURAL_ORDER):
            later = set(STRUCTURAL_ORDER[pos:])
            if any(set(t.split("*")) & later for t in self.structural[name]):
                raise ValueError(f"equation {name!r} may only use variables generated before it")

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "n": self.n, "a": self.a, "seed": self.seed,
                "structural": self.structural, "missingness": self.missingness,
                "target_missing": list(self.target_missing)}

    @classmethod
    def from_dict(cls, d) -> "ScenarioSpec":
        d = dict(d)
        unknown = set(d) - {"scenario", "n", "a", "seed", "structural", "missingness", "target_missing"}
        if unknown:
            raise ValueError(f"unknown scenario fields {sorted(unknown)}")
        if "structural" in d:
            merged = _freeze(DEFAULT_STRUCTURAL)
            merged.update(d["structural"])
            d["structural"] = merged
        return cls(**d)

    def key(self, fields=None) -> str:
        d = self.to_dict()
        if fields is not None:
            d = {k: d[k] for k in fields}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, ScenarioSpec) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def with_(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)


def scenario_i(**kw) -> ScenarioSpec:
    """MAR: one indicator for the exposure and both covariates, driven by ``lo`` only."""
    return ScenarioSpec("I_MAR", **kw)


def scenario_ii(**kw) -> ScenarioSpec:
    """Block MNAR: the exposure indicator depends on the exposure and the covariates."""
    return ScenarioSpec("II_MNAR_A", **kw)


def scenario_iii(**kw) -> ScenarioSpec:
    """Sequential MNAR: separate covariate indicators, the second one driven by ``lm1``."""
    return ScenarioSpec("III_MNAR_B", **kw)


def ordering_scenario(rate_lm1=0.04, rate_lm2=0.30, **kw) -> ScenarioSpec:
    """Sequential variant with unequal covariate missingness and no cross dependence.

    Neither covariate affects any covariate indicator, so both orderings of
    the covariates satisfy the sequential assumption. ``rate_*`` are the
    approximate marginal missingness fractions.
    """
    base = DEFAULT_MISSINGNESS["III_MNAR_B"]
    miss = {
        "r_l1": {"const": _intercept_for(rate_lm1), "lo": -0.6},
        "r_l2": {"const": _intercept_for(rate_lm2), "lo": -0.6},
        "r_a": dict(base["r_a"]),
    }
    return ScenarioSpec("III_MNAR_B", missingness=miss, **kw)


def _intercept_for(rate):
    # P(R=0) ~ rate with a -0.6*lo term and lo ~ Bernoulli(0.5)
    from scipy.optimize import brentq

    return brentq(lambda c: 1 - 0.5 * (expit(c) + expit(c - 0.6)) - rate, -10, 10)


# ------------------------------------------------------------ generation


def _linear(eq, values, n):
    eta = np.zeros(n)
    for term, coef in eq.items():
        if term == "const":
            eta = eta + coef
            continue
        prod = np.ones(n)
        for v in term.split("*"):
            prod = prod * values[v]
        eta = eta + coef * prod
    return eta


def _draw_structural(spec: ScenarioSpec, rng, n, force_a=None):
    values = {u: rng.standard_normal(n) for u in LATENTS}
    probs = {}
    for name in STRUCTURAL_ORDER:
        p = expit(_linear(spec.structural[name], values, n))
        probs[name] = p
        if name == "a" and force_a is not None:
            values[name] = np.full(n, float(force_a))
        else:
            values[name] = (rng.random(n) < p).astype(float)
    return values, probs


def _indicators(spec: ScenarioSpec, values, rng, n):
    obs = {}
    for name in INDICATORS[spec.scenario]:
        obs[name] = (rng.random(n) < expit(_linear(spec.missingness[name], values, n))).astype(np.int8)
    if spec.scenario == "I_MAR":
        r = obs["r"]
        return r, np.column_stack([r, r])
    if spec.scenario == "II_MNAR_A":
        return obs["r_a"], np.column_stack([obs["r_l"], obs["r_l"]])
    return obs["r_a"], np.column_stack([obs["r_l1"], obs["r_l2"]])


def generate_full(spec: ScenarioSpec, n=None, seed=None):
    """All variables, latent ones included, plus the observation indicators.

    Returns a dict of arrays with keys for every latent and structural
    variable, ``r_a`` and ``r_l`` (``(n, 2)``).
    """
    n = spec.n if n is None else int(n)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    values, _ = _draw_structural(spec, rng, n)
    r_a, r_l = _indicators(spec, values, rng, n)
    out = dict(values)
    out["r_a"] = r_a
    out["r_l"] = r_l
    return out


def to_observed(full) -> ObservedDataset:
    r_a = full["r_a"]
    r_l = full["r_l"]
    lm = np.column_stack([full["lm1"], full["lm2"]])
    lm = np.where(r_l == 1, lm, np.nan)
    return ObservedDataset(y=full["y"], a=np.where(r_a == 1, full["a"], np.nan), l_o=full["lo"][:, None],
                           l_m=lm, r_a=r_a, r_l=r_l, lo_names=LO_NAMES, lm_names=LM_NAMES)


def generate(spec: ScenarioSpec, seed=None) -> ObservedDataset:
    """Draw ``spec.n`` units and mask them per the scenario's observation equations."""
    return to_observed(generate_full(spec, seed=seed))


def missing_fraction(data: ObservedDataset) -> float:
    """Fraction of units with the exposure or any covariate unobserved."""
    return float(np.mean((data.r_a == 0) | np.any(data.r_l == 0, axis=1)))


# ------------------------------------------------------------ truth


TRUTH_DRAWS = 10_000_000
_TRUTH_CHUNK = 1_000_000


def _cache_dir() -> Path:
    root = os.environ.get("MISSCAUSAL_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "misscausal"


def _truth_key(spec: ScenarioSpec, a, draws, seed):
    blob = json.dumps({"structural": spec.structural, "a": int(a), "draws": int(draws), "seed": seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def true_psi(spec: ScenarioSpec, a=None, *, draws=TRUTH_DRAWS, seed=20240917, cache=True):
    """Monte Carlo value of E(Y^a) under the structural equations with ``a`` forced.

    Each draw contributes P(Y=1 | a, lo, lm, U) rather than a Bernoulli
    outcome, which leaves the expectation unchanged and shrinks the Monte
    Carlo error well below 1.5e-4 at the default ten million draws.

    Returns
    -------
    (value, standard_error)
    """
    a = spec.a if a is None else a
    key = _truth_key(spec, a, draws, seed)
    path = _cache_dir() / "truth" / f"{key}.json"
    if cache and path.exists():
        d = json.loads(path.read_text())
        return d["value"], d["se"]
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    left = int(draws)
    while left > 0:
        m = min(left, _TRUTH_CHUNK)
        _, probs = _draw_structural(spec, rng, m, force_a=a)
        p = probs["y"]
        total += float(p.sum())
        total_sq += float((p * p).sum())
        left -= m
    mean = total / draws
    se = math.sqrt(max(total_sq / draws - mean * mean, 0.0) / draws)
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, json.dumps({"value": mean, "se": se}))
    return mean, se


def true_psi_quadrature(spec: ScenarioSpec, a=None, nodes=24):
    """E(Y^a) by Gauss-Hermite quadrature over the latent variables and exact
    summation over the binary covariate cells.
    """
    a = spec.a if a is None else a
    used = sorted({v for name in ("lo", "lm1", "lm2", "y") for t in spec.structural[name]
                   for v in t.split("*") if v in LATENTS})
    x, wts = np.polynomial.hermite_e.hermegauss(nodes)
    wts = wts / wts.sum()
    grids = np.meshgrid(*([x] * len(used)), indexing="ij")
    wgrid = np.ones_like(grids[0]) if used else np.ones(())
    for g in np.meshgrid(*([wts] * len(used)), indexing="ij"):
        wgrid = wgrid * g
    pts = {u: g.ravel() for u, g in zip(used, grids)}
    w = wgrid.ravel()
    m = w.shape[0]
    for u in LATENTS:
        pts.setdefault(u, np.zeros(m))
    total = np.zeros(m)
    for lo in (0.0, 1.0):
        for l1 in (0.0, 1.0):
            for l2 in (0.0, 1.0):
                vals = dict(pts)
                prob = np.ones(m)
                for name, v in (("lo", lo), ("lm1", l1), ("lm2", l2)):
                    p = expit(_linear(spec.structural[name], vals, m))
                    prob = prob * (p if v == 1.0 else 1 - p)
                    vals[name] = np.full(m, v)
                vals["a"] = np.full(m, float(a))
                total += prob * expit(_linear(spec.structural["y"], vals, m))
    return float(np.sum(w * total))


# ------------------------------------------------------------ arms and rosters


ARMS = ("i", "ii", "iii")
ARM_LABELS = {"i": "(i) correctly specified", "ii": "(ii) misspecified outcome model",
              "iii": "(iii) misspecified exposure model"}


def arm_specs(arm: str) -> NuisanceSpecs:
    """Nuisance specifications of one misspecification arm.

    With binary covariates the saturated model is the only parametric model
    guaranteed to contain the truth, so arm (i) is saturated throughout. Arm
    (ii) keeps the saturated missingness and exposure models and replaces
    every outcome regression by a main-effects logit in ``lo`` alone. Arm
    (iii) keeps the outcome chain and missingness models saturated and fits
    the exposure model on ``lo`` alone.
    """
    sat = NuisanceSpecs.saturated()
    wrong = ModelSpec(covariates=LO_NAMES)
    if arm == "i":
        return sat
    if arm == "ii":
        return replace(sat, outcome=wrong, outcome_chain=wrong)
    if arm == "iii":
        return replace(sat, exposure=wrong)
    raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")


def default_roster(scenario: str) -> tuple:
    fam = "b" if scenario == "III_MNAR_B" else "a"
    return ("cc", "mi", f"ice_{fam}", f"ipw_{fam}", f"tmle_{fam}")


DISPLAY = {"cc": "CC", "mi": "MI", "ice_a": "ICE-A", "ipw_a": "IPW-A", "tmle_a": "TMLE-A", "ice_b": "ICE-B",
           "ipw_b": "IPW-B", "tmle_b": "TMLE-B", "tmle_complete": "TMLE", "oracle": "Oracle"}


@dataclass(frozen=True)
class RosterEntry:
    """An estimator in a study; ``label`` defaults to the estimator id."""

    estimator: str
    ordering: tuple | None = None
    label: str | None = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS and self.estimator != "oracle":
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.ordering is not None:
            object.__setattr__(self, "ordering", tuple(self.ordering))
        if self.label is None:
            lab = self.estimator if self.ordering is None else f"{self.estimator}[{','.join(map(str, self.ordering))}]"
            object.__setattr__(self, "label", lab)

    def to_dict(self):
        return {"estimator": self.estimator, "ordering": None if self.ordering is None else list(self.ordering),
                "label": self.label}


def _entries(roster) -> list[RosterEntry]:
    out = [r if isinstance(r, RosterEntry) else RosterEntry(r) for r in roster]
    labels = [r.label for r in out]
    if len(set(labels)) != len(labels):
        raise ValueError("roster labels must be unique")
    if not out:
        raise ValueError("roster must not be empty")
    return out


# ------------------------------------------------------------ reports


@dataclass(frozen=True)
class SimulationReport:
    """Monte Carlo summary of one estimator under one arm.

    ``cp`` is the coverage of the bootstrap percentile interval and
    ``cp_if`` that of the influence-function Wald interval (NaN when the
    interval was not computed). Coverages are proportions in [0, 1].
    """

    estimator_id: str
    reps: int
    bias: float
    emp_se: float
    mean_if_se: float
    cp: float
    mcse_bias: float
    truth: float
    arm: str = "i"
    scenario: str = ""
    cp_if: float = float("nan")
    mean_boot_se: float = float("nan")
    n_failed: int = 0
    estimates: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("scenario", "arm", "estimator_id", "reps", "truth", "bias", "emp_se",
                                           "mcse_bias", "mean_if_se", "mean_boot_se", "cp", "cp_if", "n_failed")}
        return d


def _nanmean(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def _coverage(lo, hi, truth):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    ok = np.isfinite(lo) & np.isfinite(hi)
    if not ok.any():
        return float("nan")
    return float(np.mean((lo[ok] <= truth) & (truth <= hi[ok])))


def summarize_estimates(estimator_id, estimates, truth, ci_low=None, ci_high=None, if_se=None, *, arm="i",
                        scenario="", if_low=None, if_high=None, boot_se=None, n_failed=0) -> SimulationReport:
    """Aggregate per-replication results into a :class:`SimulationReport`.

    bias = mean(estimates) - truth, emp_se = sample SD (n-1 divisor),
    mcse_bias = emp_se / sqrt(reps), coverage = share of intervals that
    contain ``truth``.
    """
    est_ = np.asarray(estimates, dtype=float)
    reps = int(est_.size)
    emp_se = float(np.std(est_, ddof=1)) if reps > 1 else 0.0
    nan = [float("nan")] * reps
    return SimulationReport(
        estimator_id=estimator_id, reps=reps, bias=float(est_.mean() - truth) if reps else float("nan"),
        emp_se=emp_se, mean_if_se=_nanmean(nan if if_se is None else if_se),
        cp=_coverage(nan if ci_low is None else ci_low, nan if ci_high is None else ci_high, truth),
        mcse_bias=emp_se / math.sqrt(reps) if reps else float("nan"), truth=float(truth), arm=arm,
        scenario=scenario, cp_if=_coverage(nan if if_low is None else if_low, nan if if_high is None else if_high,
                                           truth),
        mean_boot_se=_nanmean(nan if boot_se is None else boot_se), n_failed=int(n_failed),
        estimates=tuple(float(v) for v in est_))


# ------------------------------------------------------------ study runner


NUMERIC_MODULES = ("data", "glm", "nuisance", "estimators", "mi", "inference", "simulate")


def _strip_docstrings(tree):
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def _source_hash() -> str:
    # code of the modules that produce numbers; comments, docstrings and layout do not count
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in NUMERIC_MODULES:
        tree = _strip_docstrings(ast.parse((root / f"{name}.py").read_text()))
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def _seed(master_seed, rep, stream) -> int:
    return int(np.random.SeedSequence([master_seed, rep, stream]).generate_state(1)[0])


@dataclass
class _Cell:
    psi: float = float("nan")
    boot_lo: float = float("nan")
    boot_hi: float = float("nan")
    boot_se: float = float("nan")
    if_lo: float = float("nan")
    if_hi: float = float("nan")
    if_se: float = float("nan")
    failed: bool = False


def _rep_results(spec, entries, arms, b, master_seed, rep, imputation, boot_set, truth):
    data = generate(spec, seed=np.random.SeedSequence([master_seed, rep, 0]))
    boot_seed = _seed(master_seed, rep, 1)
    cfg = replace(imputation, seed=_seed(master_seed, rep, 2))
    cells = {}
    todo_boot = []
    for entry in entries:
        for arm, specs in arms.items():
            cell = _Cell()
            cells[(entry.label, arm)] = cell
            if entry.estimator == "oracle":
                cell.psi = cell.boot_lo = cell.boot_hi = cell.if_lo = cell.if_hi = truth
                cell.boot_se = cell.if_se = 0.0
                continue
            es = EstimatorSpec(entry.estimator, specs, spec.a, entry.ordering, imputation=cfg)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", SingularDesignWarning)
                    warnings.simplefilter("ignore", PositivityWarning)
                    res = run_estimator(data, es)
            except (EmptyStratum, DegenerateWeights):
                cell.failed = True
                continue
            cell.psi = res.psi_hat
            if res.n:
                inf = if_variance(res)
                cell.if_lo, cell.if_hi, cell.if_se = inf.ci_low, inf.ci_high, inf.se
            if b and (boot_set is None or entry.estimator in boot_set):
                todo_boot.append((entry, arm, es))
    if todo_boot:
        unique, _, inverse = data.compress()
        evaluators = [(e, arm, BatchEvaluator(unique, es)) for e, arm, es in todo_boot]
        psi = {(e.label, arm): [] for e, arm, _ in evaluators}
        fail = {(e.label, arm): [] for e, arm, _ in evaluators}
        for c in range(-(-b // CHUNK)):
            start = c * CHUNK
            w = resample_counts(data.n, inverse, unique.n, min(CHUNK, b - start), boot_seed, start)
            rng = chunk_rng(boot_seed, c)
            shared = None
            for e, arm, ev in evaluators:
                counts = None
                if e.estimator == "mi":
                    # one set of imputations per chunk, reused by every arm
                    if shared is None:
                        shared = ev.imputer.impute_counts(w, cfg.m, cfg.max_sweeps, rng)
                    counts = shared
                p, f = ev.evaluate(w, rng, counts=counts)
                psi[(e.label, arm)].append(p)
                fail[(e.label, arm)].append(f)
        for key in psi:
            p = np.concatenate(psi[key])
            f = np.concatenate(fail[key])
            try:
                inf = summarize(p[~f], b, boot_seed, int(f.sum()))
            except TooManyFailedResamples:
                continue
            cell = cells[key]
            cell.boot_lo, cell.boot_hi, cell.boot_se = inf.ci_low, inf.ci_high, inf.se
    return {f"{k[0]}|{k[1]}": vars(v) for k, v in cells.items()}


def _study_key(spec, entries, arms, b, master_seed, imputation, boot_set):
    blob = json.dumps({"spec": spec.to_dict(), "roster": [e.to_dict() for e in entries],
                       "arms": {k: v.to_dict() for k, v in arms.items()}, "b": b, "seed": master_seed,
                       "imputation": imputation.to_dict(),
                       "boot": None if boot_set is None else sorted(boot_set), "source": _source_hash()},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_study(spec: ScenarioSpec, roster=None, reps=1000, b=1000, master_seed=0, *, arms=None,
              bootstrap_estimators=None, imputation=None, threads=1, truth=None, cache=False,
              progress=None) -> list[SimulationReport]:
    """Monte Carlo study of a roster of estimators under each misspecification arm.

    Replication ``r`` draws its data from the stream ``(master_seed, r, 0)``
    and its bootstrap and imputation streams from ``(master_seed, r, 1)`` and
    ``(master_seed, r, 2)``, so results do not depend on ``threads``.

    Parameters
    ----------
    roster : sequence of estimator ids or :class:`RosterEntry`
        Defaults to the five estimators of the scenario's family. The id
        ``"oracle"`` always returns the truth.
    b : int
        Bootstrap resamples per replication; 0 skips the bootstrap.
    arms : mapping of arm name to NuisanceSpecs
        Defaults to the three arms of :func:`arm_specs`.
    bootstrap_estimators : collection of estimator ids, optional
        Restrict the bootstrap to these estimators (all by default).
    cache : bool or path
        Store each replication's results on disk keyed by the full study
        configuration and the package source, so interrupted studies resume.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    entries = _entries(default_roster(spec.scenario) if roster is None else roster)
    arms = {a: arm_specs(a) for a in ARMS} if arms is None else dict(arms)
    imputation = ImputationConfig() if imputation is None else imputation
    boot_set = None if bootstrap_estimators is None else frozenset(bootstrap_estimators)
    if truth is None:
        truth = true_psi(spec)[0]
    cache_dir = None
    if cache:
        root = _cache_dir() if cache is True else Path(cache)
        cache_dir = root / "studies" / _study_key(spec, entries, arms, b, master_seed, imputation, boot_set)
        cache_dir.mkdir(parents=True, exist_ok=True)

    def one(rep):
        path = cache_dir / f"rep{rep:05d}.json" if cache_dir is not None else None
        if path is not None and path.exists():
            return json.loads(path.read_text())
        out = _rep_results(spec, entries, arms, b, master_seed, rep, imputation, boot_set, truth)
        if path is not None:
            atomic_write_text(path, json.dumps(out))
        if progress is not None:
            progress(rep)
        return out

    results = _map_chunks(one, reps, threads)
    reports = []
    for entry in entries:
        for arm in arms:
            rows = [r[f"{entry.label}|{arm}"] for r in results]
            ok = [r for r in rows if not r["failed"]]
            col = {k: [r[k] for r in ok] for k in ("psi", "boot_lo", "boot_hi", "boot_se", "if_lo", "if_hi",
                                                   "if_se")}
            reports.append(summarize_estimates(
                entry.label, col["psi"], truth, col["boot_lo"], col["boot_hi"], col["if_se"], arm=arm,
                scenario=spec.scenario, if_low=col["if_lo"], if_high=col["if_hi"], boot_se=col["boot_se"],
                n_failed=len(rows) - len(ok)))
    return reports


# ------------------------------------------------------------ tables


def _fmt(x, scale=100.0):
    return "NA" if not np.isfinite(x) else f"{x * scale:.2f}"


def format_table(reports, title=None) -> str:
    """Text table with one block per scenario and one column group per arm.

    Bias, SE (empirical) and CP are multiplied by 100 and printed with two
    decimals; CP is the bootstrap coverage, falling back to the
    influence-function coverage when no bootstrap was run.
    """
    scenarios = list(dict.fromkeys(r.scenario for r in reports))
    arms = list(dict.fromkeys(r.arm for r in reports))
    width = 8
    labels_of = {a: ARM_LABELS.get(a, a) for a in arms}
    gw = max(3 * width, *(len(v) + 2 for v in labels_of.values()))
    lines = []
    if title:
        lines.append(title)
    head = f"{'':<14}" + "".join(f"| {labels_of[a]:<{gw - 2}}" for a in arms)
    sub = f"{'':<14}" + "".join(f"|{'Bias':>{gw - 2 * width - 1}}{'SE':>{width}}{'CP':>{width}}" for _ in arms)
    lines += [head, sub]
    for sc in scenarios:
        truth = next(r.truth for r in reports if r.scenario == sc)
        lines.append("-" * len(head))
        lines.append(f"{sc} (truth {truth:.4f})")
        labels = list(dict.fromkeys(r.estimator_id for r in reports if r.scenario == sc))
        for lab in labels:
            row = f"{DISPLAY.get(lab, lab):<14}"
            for a in arms:
                rep = next((r for r in reports if r.scenario == sc and r.estimator_id == lab and r.arm == a), None)
                if rep is None:
                    row += f"|{'':>{gw - 1}}"
                    continue
                cp = rep.cp if np.isfinite(rep.cp) else rep.cp_if
                row += f"|{_fmt(rep.bias):>{gw - 2 * width - 1}}{_fmt(rep.emp_se):>{width}}{_fmt(cp):>{width}}"
            lines.append(row)
    return "\n".join(lines) + "\n"


CSV_FIELDS = ("scenario", "arm", "estimator_id", "reps", "truth", "bias", "emp_se", "mcse_bias", "mean_if_se",
              "mean_boot_se", "cp", "cp_if", "n_failed")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        d = r.to_dict()
        w.writerow([d[k] if isinstance(d[k], str) else repr(d[k]) for k in CSV_FIELDS])
    return buf.getvalue()


# ------------------------------------------------------------ ordering experiment


@dataclass(frozen=True)
class OrderingComparison:
    """Sequential-TMLE results under two covariate orderings of the same data."""

    increasing: tuple
    decreasing: tuple
    reports: tuple
    missing_rates: dict

    @property
    def se_ratio(self) -> float:
        """Empirical SE under the increasing-missingness ordering over the alternative."""
        inc, dec = self.reports
        return inc.emp_se / dec.emp_se


def ordering_experiment(spec: ScenarioSpec | None = None, reps=1000, master_seed=0, threads=1, cache=False,
                        truth=None) -> OrderingComparison:
    """Compare TMLE-B under the two orderings of the partially observed covariates.

    The ordering that places the covariate with less missingness first is
    labelled "increasing". Estimates use the correctly specified arm with
    influence-function intervals (no bootstrap).
    """
    spec = ordering_scenario() if spec is None else spec
    full = generate_full(spec, n=200_000, seed=np.random.SeedSequence([master_seed, 10 ** 6]))
    rates = {name: float(np.mean(full["r_l"][:, j] == 0)) for j, name in enumerate(LM_NAMES)}
    inc = tuple(sorted(LM_NAMES, key=lambda c: rates[c]))
    dec = tuple(reversed(inc))
    roster = [RosterEntry("tmle_b", inc, "tmle_b[increasing]"), RosterEntry("tmle_b", dec, "tmle_b[decreasing]")]
    reports = run_study(spec, roster, reps=reps, b=0, master_seed=master_seed, arms={"i": arm_specs("i")},
                        threads=threads, truth=truth, cache=cache)
    return OrderingComparison(inc, dec, tuple(reports), rates)


# ------------------------------------------------------------ assumption audit


@dataclass(frozen=True)
class AuditCheck:
    """One conditional-independence regression: the ``forbidden`` coefficient should be 0."""

    scenario: str
    statement: str
    forbidden: str
    coefficient: float
    se: float

    @property
    def z(self) -> float:
        return self.coefficient / self.se

    @property
    def passed(self) -> bool:
        return abs(self.z) < 3.0


def _ci_regression(cols, response, given, forbidden, mask):
    # saturated in the conditioning set, linear in the forbidden variables; fitted on compressed rows
    names = list(given) + list(forbidden)
    mat = np.column_stack([cols[c] for c in names] + [cols[response]])[mask]
    rows, counts = np.unique(mat, axis=0, return_counts=True)
    g = rows[:, :len(given)]
    (Xg,) = build_designs(ModelSpec(saturated=True), g) if given else (np.ones((rows.shape[0], 1)),)
    X = np.column_stack([Xg, rows[:, len(given):-1]])
    fit = fit_glm(X, rows[:, -1], counts.astype(float))
    cov = glm_covariance(fit, X, counts.astype(float))
    k = Xg.shape[1]
    return [(forbidden[j], float(fit.coefficients[k + j]), float(np.sqrt(cov[k + j, k + j])))
            for j in range(len(forbidden))]


def assumption_audit(spec: ScenarioSpec, draws=1_000_000, seed=0) -> list[AuditCheck]:
    """Regression checks of the identifying independences the scenario is built to satisfy.

    Each check regresses an observation indicator on a saturated model of the
    conditioning variables plus the variables it must not depend on, using
    ``draws`` simulated units with every value visible.
    """
    full = generate_full(spec, n=draws, seed=seed)
    cols = {k: full[k] for k in ("lo", "lm1", "lm2", "a", "y")}
    cols["r_a"] = full["r_a"].astype(float)
    cols["r_l1"] = full["r_l"][:, 0].astype(float)
    cols["r_l2"] = full["r_l"][:, 1].astype(float)
    everyone = np.ones(draws, dtype=bool)
    L = ["lo", "lm1", "lm2"]
    checks = []

    def add(statement, response, given, forbidden, mask=everyone):
        for name, coef, se in _ci_regression(cols, response, given, forbidden, mask):
            checks.append(AuditCheck(spec.scenario, statement, name, coef, se))

    if spec.scenario == "I_MAR":
        add("R indep (A, L_M) | Y, L_O", "r_a", ["y", "lo"], ["a", "lm1", "lm2"])
    elif spec.scenario == "II_MNAR_A":
        add("R_A indep Y | A, L", "r_a", ["a"] + L, ["y"])
        add("R_L indep Y | A, L, R_A", "r_l1", ["a"] + L + ["r_a"], ["y"])
        add("R_L indep L_M | L_O", "r_l1", ["lo"], ["lm1", "lm2"])
    else:
        add("R_A indep Y | A, L", "r_a", ["a"] + L, ["y"])
        add("R_L1 indep Y | A, L, R_A", "r_l1", ["a"] + L + ["r_a"], ["y"])
        add("R_L2 indep Y | A, L, R_A, R_L1", "r_l2", ["a"] + L + ["r_a", "r_l1"], ["y"])
        add("R_L1 indep (L_M1, L_M2) | L_O", "r_l1", ["lo"], ["lm1", "lm2"])
        add("R_L2 indep L_M2 | R_L1 = 1, L_M1, L_O", "r_l2", ["lo", "lm1"], ["lm2"], cols["r_l1"] == 1)
    return checks
