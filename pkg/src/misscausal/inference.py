"""Standard errors and confidence intervals.

``if_variance`` turns influence values into a Wald interval. ``bootstrap``
resamples units with replacement and reruns the whole estimation pipeline,
nuisance fits and imputation included, returning a percentile interval.

Resample ``r`` draws its units from the stream ``(seed, 0, r)``, so the
resamples themselves never depend on how work is split. Resamples are then
evaluated in fixed chunks of ``CHUNK`` as frequency weights over the
distinct rows of the data; imputation randomness for chunk ``c`` comes from
the stream ``(seed, 1, c)``. Chunks may run on several threads and the
results are identical for any thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .data import ObservedDataset
from .glm import SingularDesignWarning
from .mi import GridImputer, ImputationConfig, all_binary, grid_tmle, mi_estimate
from .nuisance import P_FLOOR, EmptyStratum, NuisanceSpecs, PositivityWarning

CHUNK = 250
Z = 1.959963984540054
CONTRASTS = (None, "difference", "observed_vs_counterfactual")


class NoInfluenceValues(ValueError):
    pass


class TooManyFailedResamples(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceResult:
    se: float
    ci_low: float
    ci_high: float
    method: str
    b: int | None = None
    seed: int | None = None
    n_failed: int = 0
    replicates: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def _point(result) -> float:
    return float(result.value if isinstance(result, est.CausalContrast) else result.psi_hat)


def if_variance(result) -> InferenceResult:
    """Wald interval from the influence values: ``se = sqrt(mean(IF^2) / n)``.

    The influence values are used as given, without recentering.
    """
    ifv = np.asarray(result.influence_values, dtype=float)
    if ifv.size == 0:
        name = result.kind if isinstance(result, est.CausalContrast) else result.estimator_id
        raise NoInfluenceValues(f"{name} carries no influence values")
    se = float(np.sqrt(np.mean(ifv ** 2) / ifv.size))
    psi = _point(result)
    return InferenceResult(se, psi - Z * se, psi + Z * se, "if_variance")


# ------------------------------------------------------------ estimator specs


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator id with everything needed to rerun it on resampled data.

    ``contrast`` of ``None`` targets E(Y^a); ``"difference"`` targets
    E(Y^1) - E(Y^0); ``"observed_vs_counterfactual"`` targets E(Y) - E(Y^a).
    """

    estimator: str
    specs: NuisanceSpecs = field(default_factory=NuisanceSpecs)
    a: int = 1
    ordering: tuple | None = None
    p_floor: float = P_FLOOR
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    contrast: str | None = None

    def __post_init__(self):
        if self.estimator not in est.ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {est.ESTIMATORS}")
        if self.contrast not in CONTRASTS:
            raise ValueError(f"unknown contrast {self.contrast!r}")
        if self.ordering is not None:
            object.__setattr__(self, "ordering", tuple(self.ordering))

    @property
    def levels(self) -> tuple:
        return (1, 0) if self.contrast == "difference" else (self.a,)


def _single(data: ObservedDataset, spec: EstimatorSpec, a) -> est.EstimateResult:
    e, s = spec.estimator, spec.specs
    if e == "cc":
        return est.estimate_complete_case(data, s, a, spec.p_floor)
    if e == "tmle_complete":
        return est.tmle_complete_data(data, s, a, spec.p_floor)
    if e == "mi":
        return mi_estimate(data, spec.imputation, s, a, engine="auto", p_floor=spec.p_floor)
    kind, fam = e.split("_")
    fn = getattr(est, f"estimate_{kind}_{fam}")
    kw = {}
    if fam == "b":
        kw["ordering"] = spec.ordering
    if kind != "ice":
        kw["p_floor"] = spec.p_floor
    return fn(data, s, a, **kw)


def run_estimator(data: ObservedDataset, spec: EstimatorSpec):
    """Point estimate (``EstimateResult``) or contrast (``CausalContrast``) for ``spec``."""
    if spec.contrast is None:
        return _single(data, spec, spec.a)
    if spec.contrast == "difference":
        return est.contrast(_single(data, spec, 1), _single(data, spec, 0), "difference")
    return est.contrast(est.observed_mean(data), _single(data, spec, spec.a), "observed_vs_counterfactual")


# ------------------------------------------------------------ batched evaluation


class BatchEvaluator:
    """Evaluates one estimator under many frequency-weight vectors over the rows of ``data``.

    ``data`` is normally the compressed dataset and the weights are bootstrap
    multiplicities. ``evaluate`` returns ``(psi, failed)`` with NaN where a
    resample could not be estimated.
    """

    def __init__(self, data: ObservedDataset, spec: EstimatorSpec):
        self.data = data
        self.spec = spec
        e = spec.estimator
        self.problems = {}
        if e in ("cc", "tmle_complete"):
            mask = data.complete_mask() if e == "cc" else None
            for a in spec.levels:
                self.problems[a] = est.CompleteDataProblem(data, spec.specs, a, mask)
        elif e == "mi":
            if not all_binary(data):
                self.imputer = None
            else:
                self.imputer = GridImputer(data)
        else:
            kind, fam = e.split("_")
            self.kind = kind
            for a in spec.levels:
                self.problems[a] = est._chain_for(data, spec.specs, a, fam, spec.ordering)

    def _psi_level(self, a, w, counts=None):
        e = self.spec.estimator
        if e == "mi":
            return grid_tmle(self.imputer, counts, self.spec.specs, a, self.spec.p_floor)
        prob = self.problems[a]
        failed = prob.failed(w)
        psi = np.full(w.shape[0], np.nan)
        ok = np.flatnonzero(~failed)
        if ok.size:
            ww = w[ok]
            if e in ("cc", "tmle_complete"):
                psi[ok] = prob.run(ww, self.spec.p_floor)["psi"]
            elif self.kind == "ice":
                psi[ok] = est.chain_ice(prob, ww)["psi"]
            elif self.kind == "ipw":
                psi[ok] = est.chain_ipw(prob, ww, self.spec.p_floor)["psi"]
            else:
                psi[ok] = est.chain_tmle(prob, ww, self.spec.p_floor)["psi"]
        failed = failed | ~np.isfinite(psi)
        return np.where(failed, np.nan, psi), failed

    def evaluate(self, w, rng=None, counts=None):
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if self.spec.estimator == "mi" and counts is None:
            if self.imputer is None:
                raise ValueError("batched MI needs all-binary data; use the callable bootstrap path")
            cfg = self.spec.imputation
            counts = self.imputer.impute_counts(w, cfg.m, cfg.max_sweeps, rng)
        with warnings.catch_warnings():
            # degenerate resamples are expected now and then; they are counted, not reported
            warnings.simplefilter("ignore", SingularDesignWarning)
            warnings.simplefilter("ignore", PositivityWarning)
            vals = [self._psi_level(a, w, counts) for a in self.spec.levels]
        if self.spec.contrast is None:
            return vals[0]
        if self.spec.contrast == "difference":
            psi = vals[0][0] - vals[1][0]
            return psi, vals[0][1] | vals[1][1]
        ybar = np.sum(w * self.data.y, axis=1) / np.sum(w, axis=1)
        return ybar - vals[0][0], vals[0][1]


# ------------------------------------------------------------ bootstrap


def resample_counts(n, inverse, n_rows, b, seed, start=0):
    """Multiplicities ``(b, n_rows)`` of the distinct rows in resamples ``start .. start+b-1``.

    Resample ``r`` draws ``n`` unit indices uniformly with replacement from
    the stream ``(seed, 0, r)``; ``inverse`` maps units to distinct rows.
    """
    out = np.empty((b, n_rows))
    for j in range(b):
        rng = np.random.default_rng([seed, 0, start + j])
        idx = rng.integers(0, n, n)
        out[j] = np.bincount(inverse[idx], minlength=n_rows)
    return out


def chunk_rng(seed, c):
    return np.random.default_rng([seed, 1, c])


def percentile_ci(replicates):
    """2.5th and 97.5th percentiles (linear interpolation) of the sorted replicates."""
    reps = np.sort(np.asarray(replicates, dtype=float))
    lo, hi = np.percentile(reps, [2.5, 97.5])
    return float(lo), float(hi)


def summarize(replicates, b, seed, n_failed) -> InferenceResult:
    if n_failed > 0.1 * b:
        raise TooManyFailedResamples(f"{n_failed} of {b} resamples failed (limit 10%)")
    reps = np.sort(np.asarray(replicates, dtype=float))
    lo, hi = percentile_ci(reps)
    se = float(np.std(reps, ddof=1)) if reps.size > 1 else 0.0
    return InferenceResult(se, lo, hi, "bootstrap_percentile", b, seed, int(n_failed), reps)


def _map_chunks(fn, n_chunks, threads):
    if threads is None or threads == 1 or n_chunks == 1:
        return [fn(c) for c in range(n_chunks)]
    workers = None if threads == 0 else threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_chunks)))


def bootstrap(data: ObservedDataset, estimator, b=1000, seed=0, threads=1) -> InferenceResult:
    """Nonparametric percentile bootstrap of ``estimator`` on ``data``.

    Parameters
    ----------
    estimator : EstimatorSpec or callable
        A spec is evaluated in batches over the distinct rows of ``data``.
        A callable maps an ``ObservedDataset`` to a float and is rerun on
        every materialized resample; it may raise ``EmptyStratum`` to mark a
        failed resample.
    b : int
        Number of resamples, at least 100.
    threads : int
        Worker threads; 0 picks automatically. Results do not depend on it.
    """
    if b < 100:
        raise ValueError("the bootstrap needs b >= 100 resamples")
    n = data.n
    if callable(estimator) and not isinstance(estimator, EstimatorSpec):
        return _bootstrap_callable(data, estimator, b, seed)
    spec = estimator
    if spec.estimator == "mi" and not all_binary(data):
        def fn(d):
            return _point(run_estimator(d, spec))

        return _bootstrap_callable(data, fn, b, seed)
    unique, _, inverse = data.compress()
    ev = BatchEvaluator(unique, spec)
    n_chunks = -(-b // CHUNK)

    def run(c):
        start = c * CHUNK
        size = min(CHUNK, b - start)
        w = resample_counts(n, inverse, unique.n, size, seed, start)
        return ev.evaluate(w, chunk_rng(seed, c))

    parts = _map_chunks(run, n_chunks, threads)
    psi = np.concatenate([p[0] for p in parts])
    failed = np.concatenate([p[1] for p in parts])
    return summarize(psi[~failed], b, seed, int(failed.sum()))


def _bootstrap_callable(data, fn, b, seed):
    n = data.n
    reps = []
    n_failed = 0
    for r in range(b):
        idx = np.random.default_rng([seed, 0, r]).integers(0, n, n)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SingularDesignWarning)
                warnings.simplefilter("ignore", PositivityWarning)
                v = float(fn(data.take(idx)))
        except (EmptyStratum, est.DegenerateWeights):
            n_failed += 1
            continue
        if not np.isfinite(v):
            n_failed += 1
            continue
        reps.append(v)
    return summarize(np.array(reps), b, seed, n_failed)
