"""Point estimators of the average counterfactual outcome E(Y^a).

Every estimator has a batched core taking frequency weights of shape
``(B, n)`` and returning ``B`` estimates; the public functions run the core
once with unit weights and add influence values and diagnostics. The
bootstrap reuses the cores directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ObservedDataset
from .glm import bounded_logit, fit_glm, fluctuate, inv_link, predict
from .nuisance import (P_FLOOR, EmptyStratum, NuisanceSpecs, SequentialChain, block_chain,
                       build_designs, check_positivity, floor_prob, sequential_chain, _columns,
                       NuisanceSet)

SMALL_STRATUM = 5

ESTIMATORS = ("cc", "mi", "ice_a", "ipw_a", "tmle_a", "ice_b", "ipw_b", "tmle_b", "tmle_complete")


class DegenerateWeights(RuntimeError):
    pass


class MismatchedData(ValueError):
    pass


@dataclass(frozen=True)
class EstimateResult:
    psi_hat: float
    estimator_id: str
    influence_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    epsilons: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    data_id: str | None = None

    @property
    def n(self) -> int:
        return int(self.influence_values.shape[0])


@dataclass(frozen=True)
class CausalContrast:
    kind: str
    value: float
    components: tuple
    influence_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _wmean(w, v):
    return np.sum(w * v, axis=-1) / np.sum(w, axis=-1)



# ------------------------------------------------------------ complete data


class CompleteDataProblem:
    """Designs for the classic single time-point TMLE among units in ``mask``."""

    def __init__(self, data: ObservedDataset, specs: NuisanceSpecs, a, mask=None):
        specs.check(data)
        self.data = data
        self.a = float(a)
        n = data.n
        self.mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if np.any(self.mask & ~data.complete_mask()):
            raise ValueError("complete-data TMLE requires every included unit to be fully observed")
        names = list(data.column_names)
        L = _columns(data, names)
        L[~self.mask] = np.nan
        a_obs = np.where(self.mask, data.a, np.nan)
        self.y = data.y
        self.is_a = self.mask & (a_obs == self.a)
        (self.X_pa,) = build_designs(specs.exposure, L[:, [names.index(c) for c in specs.exposure.select(names)]])
        Lo = L[:, [names.index(c) for c in specs.outcome.select(names)]]
        fit_in = np.column_stack([a_obs, Lo])
        self.X_fit, self.X_pred = build_designs(specs.outcome, fit_in,
                                                np.column_stack([np.full(n, self.a), Lo]))

    def failed(self, w):
        w = np.atleast_2d(w)
        return (np.sum(w * self.mask, axis=1) <= 0) | (np.sum(w * self.is_a, axis=1) <= 0)

    def run(self, w, p_floor=P_FLOOR, want_if=False):
        f_pa = fit_glm(self.X_pa, self.is_a.astype(float), w * self.mask)
        pi_a = predict(f_pa, self.X_pa)
        f_q = fit_glm(self.X_fit, self.y, w * self.mask)
        q0 = predict(f_q, self.X_pred)
        H = np.where(self.is_a, 1.0 / floor_prob(pi_a, p_floor), 0.0)
        off = bounded_logit(q0)
        fl = fluctuate(self.y, off, w * H)
        eps = np.atleast_1d(fl.epsilon)
        q1 = inv_link(off + eps[:, None])
        wm = w * self.mask
        psi = _wmean(wm, q1)
        out = {"psi": psi, "eps": eps, "pi_a": pi_a, "converged": np.atleast_1d(fl.converged)}
        if want_if:
            ifv = H * (self.y - q1) + q1 - psi[:, None]
            out["if"] = ifv
            out["score"] = np.sum(wm * H * (self.y - q1), axis=-1) / np.sum(wm, axis=-1)
        return out


def _check_single(problem, what):
    if problem.failed(np.ones(problem.data.n))[0]:
        raise EmptyStratum(f"{what}: a required fitting stratum has no units")


def tmle_complete_data(data: ObservedDataset, specs: NuisanceSpecs, a=1, p_floor=P_FLOOR) -> EstimateResult:
    """Standard TMLE of E(Y^a) on fully observed data (weighted fluctuation variant)."""
    if not data.is_complete():
        raise ValueError("tmle_complete_data requires fully observed data")
    prob = CompleteDataProblem(data, specs, a)
    _check_single(prob, "tmle_complete_data")
    out = prob.run(np.ones((1, data.n)), p_floor, want_if=True)
    return _complete_result(out, prob, "tmle_complete", data, p_floor)


def _complete_result(out, prob, est_id, data, p_floor):
    m = prob.mask
    pa = out["pi_a"][0][prob.is_a]
    diag = {"n_used": int(m.sum()), "n_target": int(prob.is_a.sum()),
            "floored_pi_a": int(np.sum(pa < p_floor)), "score": float(out["score"][0]),
            "fluctuation_converged": bool(out["converged"][0])}
    if prob.is_a.sum() < SMALL_STRATUM:
        diag["warning"] = "small targeting stratum"
    return EstimateResult(float(out["psi"][0]), est_id, out["if"][0][m], (float(out["eps"][0]),), diag,
                          data.fingerprint())


def estimate_complete_case(data: ObservedDataset, specs: NuisanceSpecs, a=1, p_floor=P_FLOOR) -> EstimateResult:
    """Drop every unit with a missing entry, then apply the complete-data TMLE."""
    mask = data.complete_mask()
    if not np.any(mask):
        raise EmptyStratum("no fully observed units")
    prob = CompleteDataProblem(data, specs, a, mask)
    _check_single(prob, "complete case")
    out = prob.run(np.ones((1, data.n)), p_floor, want_if=True)
    return _complete_result(out, prob, "cc", data, p_floor)


# ------------------------------------------------------------ chain estimators


def _denominators(chain: SequentialChain, pi_a, pi_ra, pi_rl, p_floor):
    """Floored inverse-weight denominators: leading term and cumulative per-step products."""
    cum = [np.ones_like(pi_a)]
    for k in range(chain.K):
        cum.append(cum[-1] * floor_prob(pi_rl[..., k], p_floor))
    lead = floor_prob(pi_a, p_floor) * floor_prob(pi_ra, p_floor) * cum[-1]
    return lead, cum


def chain_ipw(chain: SequentialChain, w, p_floor=P_FLOOR):
    _, _, _, pi_rl, pi_ra, pi_a = chain.fit_missingness(w)
    lead, _ = _denominators(chain, pi_a, pi_ra, pi_rl, p_floor)
    H = np.where(chain.target, 1.0 / lead, 0.0)
    den = np.sum(w * H, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        psi = np.sum(w * H * chain.y, axis=-1) / den
    return {"psi": psi, "weights": H, "pi": (pi_a, pi_ra, pi_rl), "den": den}


def chain_ice(chain: SequentialChain, w):
    _, t = chain.fit_outcome(w)
    for k in range(chain.K, 0, -1):
        _, t = chain.fit_chain_step(k - 1, t, w)
    return {"psi": _wmean(w, t)}


def chain_tmle(chain: SequentialChain, w, p_floor=P_FLOOR, want_if=False):
    _, _, _, pi_rl, pi_ra, pi_a = chain.fit_missingness(w)
    lead, cum = _denominators(chain, pi_a, pi_ra, pi_rl, p_floor)
    _, t0 = chain.fit_outcome(w)
    H = np.where(chain.target, 1.0 / lead, 0.0)
    off = bounded_logit(t0)
    fl = fluctuate(chain.y, off, w * H)
    eps = [np.atleast_1d(fl.epsilon)]
    conv = [np.atleast_1d(fl.converged)]
    t_star = [None] * (chain.K + 1)
    t_star[chain.K] = inv_link(off + eps[0][:, None])
    step_w = {}
    for k in range(chain.K, 0, -1):
        _, init = chain.fit_chain_step(k - 1, t_star[k], w)
        Hk = np.where(chain.rbar[:, k], 1.0 / cum[k], 0.0)
        step_w[k] = Hk
        off_k = bounded_logit(init)
        fl = fluctuate(t_star[k], off_k, w * Hk)
        e = np.atleast_1d(fl.epsilon)
        eps.append(e)
        conv.append(np.atleast_1d(fl.converged))
        t_star[k - 1] = inv_link(off_k + e[:, None])
    psi = _wmean(w, t_star[0])
    out = {"psi": psi, "eps": eps, "converged": conv, "pi": (pi_a, pi_ra, pi_rl), "t_init": t0}
    if want_if:
        wsum = np.sum(w, axis=-1)
        resid = H * (chain.y - t_star[chain.K])
        ifv = resid + t_star[0] - psi[..., None]
        scores = [np.sum(w * resid, axis=-1) / wsum]
        for k in range(chain.K, 0, -1):
            term = step_w[k] * (t_star[k] - t_star[k - 1])
            ifv = ifv + term
            scores.append(np.sum(w * term, axis=-1) / wsum)
        out["if"] = ifv
        out["scores"] = scores
        out["t_star"] = t_star
    return out


def _chain_for(data, specs, a, family, ordering):
    if family == "a":
        return block_chain(data, specs, a)
    return sequential_chain(data, specs, a, ordering)


def _diagnostics(chain: SequentialChain, pis, p_floor):
    pi_a, pi_ra, pi_rl = (np.asarray(p)[0] for p in pis)
    ns = NuisanceSet(None, None, (), (), chain.a, pi_a, pi_ra, pi_rl, None, chain.target, chain.rbar, p_floor)
    rep = check_positivity(ns)
    counts = chain.stratum_counts()
    diag = {"positivity": rep.to_dict(), "strata": counts}
    if counts["target"] < SMALL_STRATUM:
        diag["warning"] = "small targeting stratum"
    return diag


def _run_chain(data, specs, a, family, ordering, kind, p_floor):
    chain = _chain_for(data, specs, a, family, ordering)
    _check_single(chain, f"{kind}_{family}")
    w = np.ones((1, data.n))
    est_id = f"{kind}_{family}"
    if kind == "ice":
        out = chain_ice(chain, w)
        return EstimateResult(float(out["psi"][0]), est_id, np.zeros(0), (),
                              {"strata": chain.stratum_counts()}, data.fingerprint())
    if kind == "ipw":
        out = chain_ipw(chain, w, p_floor)
        if not out["den"][0] > 0:
            raise DegenerateWeights("sum of inverse probability weights is zero")
        diag = _diagnostics(chain, out["pi"], p_floor)
        return EstimateResult(float(out["psi"][0]), est_id, np.zeros(0), (), diag, data.fingerprint())
    out = chain_tmle(chain, w, p_floor, want_if=True)
    diag = _diagnostics(chain, out["pi"], p_floor)
    diag["scores"] = [float(s[0]) for s in out["scores"]]
    diag["fluctuation_converged"] = [bool(c[0]) for c in out["converged"]]
    rep = diag["positivity"]
    if sum(rep["floored"].values()):
        from .nuisance import PositivityWarning

        warnings.warn(f"{sum(rep['floored'].values())} fitted probabilities floored at {p_floor}",
                      PositivityWarning, stacklevel=3)
    return EstimateResult(float(out["psi"][0]), est_id, out["if"][0], tuple(float(e[0]) for e in out["eps"]),
                          diag, data.fingerprint())


def estimate_ice_a(data, specs, a=1) -> EstimateResult:
    """Iterated-regression plug-in for the block identifying formula (no targeting)."""
    return _run_chain(data, specs, a, "a", None, "ice", P_FLOOR)


def estimate_ice_b(data, specs, a=1, ordering=None) -> EstimateResult:
    return _run_chain(data, specs, a, "b", ordering, "ice", P_FLOOR)


def estimate_ipw_a(data, specs, a=1, p_floor=P_FLOOR) -> EstimateResult:
    """Hajek inverse-probability-weighted mean among fully observed units with A=a."""
    return _run_chain(data, specs, a, "a", None, "ipw", p_floor)


def estimate_ipw_b(data, specs, a=1, ordering=None, p_floor=P_FLOOR) -> EstimateResult:
    return _run_chain(data, specs, a, "b", ordering, "ipw", p_floor)


def estimate_tmle_a(data, specs, a=1, p_floor=P_FLOOR) -> EstimateResult:
    """TMLE under the block assumption: target the fully observed regression, then
    the regression of its targeted predictions on L_O, and average the latter."""
    return _run_chain(data, specs, a, "a", None, "tmle", p_floor)


def estimate_tmle_b(data, specs, a=1, ordering=None, p_floor=P_FLOOR) -> EstimateResult:
    """TMLE under the sequential assumption, recursing backwards over the ordered
    covariate groups. ``data`` is coarsened to monotone missingness first."""
    return _run_chain(data, specs, a, "b", ordering, "tmle", p_floor)


# ------------------------------------------------------------ contrasts


def observed_mean(data: ObservedDataset) -> EstimateResult:
    """Sample mean of Y with influence values Y - mean(Y)."""
    m = float(np.mean(data.y))
    return EstimateResult(m, "observed", data.y - m, (), {}, data.fingerprint())


def contrast(first: EstimateResult, second: EstimateResult, kind="difference") -> CausalContrast:
    """``first - second``; influence values are differenced unit-wise when both exist.

    ``kind`` labels the contrast: "difference" for E(Y^1) - E(Y^0), or
    "observed_vs_counterfactual" for E(Y) - E(Y^a) with ``first`` from
    :func:`observed_mean`.
    """
    if kind not in ("difference", "observed_vs_counterfactual"):
        raise ValueError(f"unknown contrast kind {kind!r}")
    if first.data_id is not None and second.data_id is not None and first.data_id != second.data_id:
        raise MismatchedData("components were estimated on different datasets")
    ifv = np.zeros(0)
    if first.n and second.n:
        if first.n != second.n:
            raise MismatchedData("influence values have different lengths")
        ifv = first.influence_values - second.influence_values
    return CausalContrast(kind, first.psi_hat - second.psi_hat, (first, second), ifv)
