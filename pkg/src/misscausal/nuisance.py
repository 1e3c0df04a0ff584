"""Nuisance models: exposure propensity, missingness probabilities, outcome chain.

The block (MNAR-A) and sequential (MNAR-B) settings share one structure, a
chain of ``K`` ordered covariate groups with cumulative observation
indicators ``rbar_k``. The block setting is the chain with a single group
holding every partially observed covariate, which is why the two
coincide when there is exactly one such covariate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ObservedDataset, UnknownColumn, coarsen_monotone, resolve_ordering
from .glm import GlmFit, fit_glm, predict

P_FLOOR = 0.01


class EmptyStratum(RuntimeError):
    """A fitting subset required by an estimator has no units."""


class PositivityWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Working-model specification for one nuisance regression.

    ``covariates=None`` uses every covariate available at the fitting step;
    otherwise only the listed names that are available there. Saturated
    models use one indicator per observed cell of the selected covariates
    (discrete data only).
    """

    covariates: tuple[str, ...] | None = None
    interactions: bool = False
    saturated: bool = False

    def __post_init__(self):
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))

    def select(self, available: Sequence[str]) -> list[str]:
        if self.covariates is None:
            return list(available)
        return [c for c in available if c in self.covariates]

    def to_dict(self) -> dict:
        return {"covariates": None if self.covariates is None else list(self.covariates),
                "interactions": self.interactions, "saturated": self.saturated}

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        d = dict(d or {})
        unknown = set(d) - {"covariates", "interactions", "saturated"}
        if unknown:
            raise ValueError(f"unknown model spec keys {sorted(unknown)}")
        cov = d.get("covariates")
        return cls(None if cov is None else tuple(cov), bool(d.get("interactions", False)),
                   bool(d.get("saturated", False)))


ROLES = ("exposure", "exposure_missing", "covariate_missing", "outcome", "outcome_chain")


@dataclass(frozen=True)
class NuisanceSpecs:
    """One :class:`ModelSpec` per nuisance role.

    exposure          -- P(A=a | fully observed, L)
    exposure_missing  -- P(R_A=1 | L, covariates observed)
    covariate_missing -- P(R_L=1 | L_O) or P(R_Lk=1 | earlier covariates, L_O)
    outcome           -- E(Y | A, L) among fully observed units
    outcome_chain     -- the iterated regressions of the outcome chain
    """

    exposure: ModelSpec = field(default_factory=ModelSpec)
    exposure_missing: ModelSpec = field(default_factory=ModelSpec)
    covariate_missing: ModelSpec = field(default_factory=ModelSpec)
    outcome: ModelSpec = field(default_factory=ModelSpec)
    outcome_chain: ModelSpec = field(default_factory=ModelSpec)

    @classmethod
    def uniform(cls, spec: ModelSpec) -> "NuisanceSpecs":
        return cls(spec, spec, spec, spec, spec)

    @classmethod
    def saturated(cls) -> "NuisanceSpecs":
        return cls.uniform(ModelSpec(saturated=True))

    def to_dict(self) -> dict:
        return {r: getattr(self, r).to_dict() for r in ROLES}

    @classmethod
    def from_dict(cls, d) -> "NuisanceSpecs":
        d = dict(d or {})
        unknown = set(d) - set(ROLES) - {"default"}
        if unknown:
            raise ValueError(f"unknown nuisance roles {sorted(unknown)}")
        default = ModelSpec.from_dict(d.get("default"))
        return cls(**{r: ModelSpec.from_dict(d[r]) if r in d else default for r in ROLES})

    def check(self, data: ObservedDataset):
        names = set(data.column_names)
        for r in ROLES:
            cov = getattr(self, r).covariates
            if cov is not None:
                missing = [c for c in cov if c not in names]
                if missing:
                    raise UnknownColumn(f"{r} model selects unknown covariates {missing}")


# ------------------------------------------------------------- designs


def build_designs(spec: ModelSpec, *mats: np.ndarray) -> list[np.ndarray]:
    """Design matrices with a shared column layout for each ``(n, k)`` covariate matrix.

    Rows containing NaN (covariates not observed) become zero rows; callers
    give them zero weight.
    """
    k = mats[0].shape[1]
    if k == 0:
        return [np.ones((m.shape[0], 1)) for m in mats]
    if spec.saturated:
        ok = [~np.any(np.isnan(m), axis=1) for m in mats]
        pooled = np.concatenate([m[o] for m, o in zip(mats, ok)])
        code_of = []
        radix = 1
        codes = [np.zeros(m.shape[0], dtype=np.int64) for m in mats]
        for j in range(k):
            levels = np.unique(pooled[:, j])
            for c, m, o in zip(codes, mats, ok):
                idx = np.searchsorted(levels, np.where(o, m[:, j], levels[0]))
                c += idx * radix
            radix *= len(levels)
            code_of.append(levels)
        cells = np.unique(np.concatenate([c[o] for c, o in zip(codes, ok)]))
        out = []
        for c, o in zip(codes, ok):
            X = np.zeros((c.shape[0], len(cells)))
            rows = np.flatnonzero(o)
            X[rows, np.searchsorted(cells, c[rows])] = 1.0
            out.append(X)
        return out
    out = []
    for m in mats:
        m = np.nan_to_num(m, nan=0.0)
        cols = [np.ones(m.shape[0]), *m.T]
        if spec.interactions:
            cols += [m[:, i] * m[:, j] for i in range(k) for j in range(i + 1, k)]
        out.append(np.column_stack(cols))
    return out


def _columns(data: ObservedDataset, names: Sequence[str]) -> np.ndarray:
    idx = {c: ("o", j) for j, c in enumerate(data.lo_names)}
    idx.update({c: ("m", j) for j, c in enumerate(data.lm_names)})
    cols = []
    for c in names:
        src, j = idx[c]
        cols.append(data.l_o[:, j] if src == "o" else data.l_m[:, j])
    return np.column_stack(cols) if cols else np.zeros((data.n, 0))


def floor_prob(p, p_floor=P_FLOOR):
    return np.maximum(p, p_floor)


def _wsum(w, mask):
    return np.sum(w * mask, axis=-1)


# ------------------------------------------------------ chain structure


class SequentialChain:
    """Strata and design matrices for the ordered covariate-group chain.

    Parameters
    ----------
    data : ObservedDataset
    specs : NuisanceSpecs
    a : exposure level of interest
    groups : ordered list of covariate groups, each a list of ``l_m`` column
        indices; the block setting passes a single group with every column.
    indicators : (n, K) observation indicator for each ordered group
    """

    def __init__(self, data: ObservedDataset, specs: NuisanceSpecs, a, groups, indicators):
        specs.check(data)
        self.data = data
        self.specs = specs
        self.a = float(a)
        self.K = len(groups)
        n = data.n
        self.y = np.asarray(data.y, dtype=float)
        r = np.asarray(indicators, dtype=bool).reshape(n, self.K)
        rbar = np.ones((n, self.K + 1), dtype=bool)
        for k in range(self.K):
            rbar[:, k + 1] = rbar[:, k] & r[:, k]
        self.rbar = rbar
        self.r = r
        self.r_a = data.r_a == 1
        self.full = rbar[:, self.K] & self.r_a
        a_obs = np.where(self.r_a, data.a, np.nan)
        self.is_a = self.r_a & (a_obs == self.a)
        self.target = self.full & self.is_a

        lo = list(data.lo_names)
        prefix = [lo + [data.lm_names[j] for g in groups[:k] for j in g] for k in range(self.K + 1)]
        self.prefix_names = prefix
        L_names = prefix[self.K]

        def mats(names):
            return _columns(data, names)

        def masked(values, mask):
            # covariates outside the stratum where they are observed carry no information
            out = np.array(values, dtype=float)
            out[~mask] = np.nan
            return out

        self.X_rl = []
        for k in range(self.K):
            names = specs.covariate_missing.select(prefix[k])
            (X,) = build_designs(specs.covariate_missing, masked(mats(names), rbar[:, k]))
            self.X_rl.append(X)
        names = specs.exposure_missing.select(L_names)
        (self.X_ra,) = build_designs(specs.exposure_missing, masked(mats(names), rbar[:, self.K]))
        names = specs.exposure.select(L_names)
        (self.X_pa,) = build_designs(specs.exposure, masked(mats(names), rbar[:, self.K]))
        names = specs.outcome.select(L_names)
        Lm = masked(mats(names), rbar[:, self.K])
        A_fit = np.where(self.r_a, np.nan_to_num(a_obs, nan=self.a), np.nan)[:, None]
        A_cf = np.full((n, 1), self.a)
        fit_in = np.column_stack([A_fit, Lm])
        fit_in[~self.full] = np.nan
        self.X_out_fit, self.X_out_pred = build_designs(specs.outcome, fit_in, np.column_stack([A_cf, Lm]))
        self.outcome_names = names
        self.X_chain = []
        for k in range(self.K):
            names = specs.outcome_chain.select(prefix[k])
            (X,) = build_designs(specs.outcome_chain, masked(mats(names), rbar[:, k]))
            self.X_chain.append(X)

    # -- strata ------------------------------------------------------

    def strata(self):
        """Named fitting subsets used by the chain (boolean masks)."""
        s = {f"rbar_{k}": self.rbar[:, k] for k in range(self.K + 1)}
        s["full"] = self.full
        s["target"] = self.target
        return s

    def failed(self, w) -> np.ndarray:
        """Batch rows of ``w`` for which a required stratum is empty."""
        w = np.atleast_2d(w)
        bad = np.zeros(w.shape[0], dtype=bool)
        for mask in self.strata().values():
            bad |= _wsum(w, mask) <= 0
        return bad

    def stratum_counts(self, w=None) -> dict:
        w = np.ones(self.data.n) if w is None else w
        return {k: float(_wsum(w, m)) for k, m in self.strata().items()}

    # -- fits ----------------------------------------------------------

    def fit_missingness(self, w):
        """Fit P(R_Lk=1 | ...), P(R_A=1 | ...), P(A=a | ...). Returns fits and raw predictions."""
        fits_rl, pi_rl = [], []
        for k in range(self.K):
            f = fit_glm(self.X_rl[k], self.r[:, k].astype(float), w * self.rbar[:, k])
            fits_rl.append(f)
            pi_rl.append(predict(f, self.X_rl[k]))
        f_ra = fit_glm(self.X_ra, self.r_a.astype(float), w * self.rbar[:, self.K])
        f_pa = fit_glm(self.X_pa, self.is_a.astype(float), w * self.full)
        pi_rl = np.stack(pi_rl, axis=-1) if pi_rl else np.ones(np.shape(w) + (0,))
        return fits_rl, f_ra, f_pa, pi_rl, predict(f_ra, self.X_ra), predict(f_pa, self.X_pa)

    def fit_outcome(self, w):
        """Initial outcome regression among fully observed units, predicted at A=a."""
        f = fit_glm(self.X_out_fit, self.y, w * self.full)
        return f, predict(f, self.X_out_pred)

    def fit_chain_step(self, k, pseudo, w, offset=None):
        """Regress a pseudo-outcome on covariates of step ``k`` among ``rbar_{k+1}``."""
        f = fit_glm(self.X_chain[k], pseudo, w * self.rbar[:, k + 1])
        return f, predict(f, self.X_chain[k])


def block_chain(data: ObservedDataset, specs: NuisanceSpecs, a) -> SequentialChain:
    """Chain for the block setting: all partially observed covariates form one group."""
    if data.q == 0:
        return SequentialChain(data, specs, a, [], np.ones((data.n, 0)))
    r_l = np.all(data.r_l == 1, axis=1)
    group = list(range(data.l_m.shape[1]))
    lm = np.where(r_l[:, None], data.l_m, np.nan)
    view = data.replace(l_m=lm, r_l=np.repeat(r_l[:, None], data.q, axis=1).astype(np.int8))
    return SequentialChain(view, specs, a, [group], r_l[:, None])


def sequential_chain(data: ObservedDataset, specs: NuisanceSpecs, a, ordering=None) -> SequentialChain:
    """Chain for the sequential setting after enforcing monotone coarsening under ``ordering``."""
    order = resolve_ordering(data, ordering)
    mono = coarsen_monotone(data, order)
    groups = [mono.group_columns(g) for g in order]
    return SequentialChain(mono, specs, a, groups, mono.r_l[:, order])


# ------------------------------------------------------ public objects


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisance models and their raw (unfloored) predictions on the data.

    ``pi_rl`` has one column per ordered covariate group (one column in the
    block setting). ``outcome_chain`` holds the initial outcome fit first;
    later chain fits are produced by the estimators.
    """

    pi_a: GlmFit | None
    pi_ra: GlmFit | None
    pi_rl: tuple
    outcome_chain: tuple
    target_level: float
    pi_a_hat: np.ndarray
    pi_ra_hat: np.ndarray
    pi_rl_hat: np.ndarray
    outcome_hat: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    rbar: np.ndarray | None = None
    p_floor: float = P_FLOOR

    def weight_denominator(self) -> np.ndarray:
        """Floored product of every probability in the leading inverse weight."""
        f = self.p_floor
        return floor_prob(self.pi_a_hat, f) * floor_prob(self.pi_ra_hat, f) * \
            np.prod(floor_prob(self.pi_rl_hat, f), axis=-1)


def _nuisance_set(chain: SequentialChain, p_floor) -> NuisanceSet:
    n = chain.data.n
    w = np.ones(n)
    for name, cnt in chain.stratum_counts().items():
        if cnt <= 0:
            raise EmptyStratum(f"no units in stratum {name!r}")
    fits_rl, f_ra, f_pa, pi_rl, pi_ra, pi_a = chain.fit_missingness(w)
    f_out, t_init = chain.fit_outcome(w)
    ns = NuisanceSet(f_pa, f_ra, tuple(fits_rl), (f_out,), chain.a, pi_a, pi_ra, pi_rl, t_init,
                     chain.target, chain.rbar, p_floor)
    report = check_positivity(ns)
    if report.total_floored:
        warnings.warn(f"{report.total_floored} fitted probabilities floored at {p_floor}",
                      PositivityWarning, stacklevel=3)
    return ns


def fit_nuisances_mnar_a(data: ObservedDataset, specs: NuisanceSpecs, a=1, p_floor=P_FLOOR) -> NuisanceSet:
    """Block setting: one covariate-missingness model on L_O, exposure models among R=1."""
    return _nuisance_set(block_chain(data, specs, a), p_floor)


def fit_nuisances_mnar_b(data: ObservedDataset, specs: NuisanceSpecs, a=1, ordering=None,
                         p_floor=P_FLOOR) -> NuisanceSet:
    """Sequential setting: one missingness model per covariate group in ``ordering``."""
    return _nuisance_set(sequential_chain(data, specs, a, ordering), p_floor)


@dataclass(frozen=True)
class PositivityReport:
    minima: dict
    maxima: dict
    floored: dict
    max_weight: float
    p_floor: float

    @property
    def total_floored(self) -> int:
        return int(sum(self.floored.values()))

    def to_dict(self) -> dict:
        return {"min": self.minima, "max": self.maxima, "floored": self.floored,
                "max_weight": self.max_weight, "p_floor": self.p_floor}


def check_positivity(ns: NuisanceSet, data: ObservedDataset | None = None) -> PositivityReport:
    """Summarize fitted probabilities where they enter an inverse weight.

    Minima and maxima are reported after flooring. Exposure and
    exposure-missingness probabilities are assessed among the units of the
    leading weighted term; covariate group ``k`` among units with the first
    ``k`` groups observed.
    """
    f = ns.p_floor
    n = ns.pi_a_hat.shape[-1]
    target = np.ones(n, dtype=bool) if ns.target_mask is None else ns.target_mask
    K = ns.pi_rl_hat.shape[-1]
    rbar = np.ones((n, K + 1), dtype=bool) if ns.rbar is None else ns.rbar
    minima, maxima, floored = {}, {}, {}

    def record(name, p, mask):
        p = np.asarray(p)[mask]
        if p.size == 0:
            return
        floored[name] = int(np.sum(p < f))
        pf = floor_prob(p, f)
        minima[name] = float(pf.min())
        maxima[name] = float(pf.max())

    record("pi_a", ns.pi_a_hat, target)
    record("pi_ra", ns.pi_ra_hat, target)
    for k in range(K):
        record(f"pi_rl_{k + 1}", ns.pi_rl_hat[:, k], rbar[:, k + 1])
    denom = ns.weight_denominator()[target]
    max_w = float(np.max(1.0 / denom)) if denom.size else 0.0
    return PositivityReport(minima, maxima, floored, max_w, f)
