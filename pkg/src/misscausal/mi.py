"""Chained-equation (FCS) multiple imputation followed by the complete-data TMLE.

Two engines share one algorithm. :func:`impute` works unit by unit and
handles binary and continuous variables. :class:`GridImputer` handles the
all-binary case on a table of cell counts: redrawing every unit of a cell
independently from Bernoulli(p) is the same as splitting the cell count
binomially, so the grid engine has the same distribution as the unit engine
while its cost does not grow with n. The bootstrap runs thousands of
imputations through the grid engine at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ObservedDataset
from .estimators import CompleteDataProblem, EstimateResult, tmle_complete_data
from .glm import fit_glm, predict
from .nuisance import P_FLOOR, EmptyStratum, NuisanceSpecs

MODEL_TYPES = ("logit", "identity")


class AllMissingVariable(ValueError):
    pass


@dataclass(frozen=True)
class ImputationConfig:
    """Settings for chained-equation imputation.

    ``models`` maps a variable name (``"a"`` or a covariate name) to
    ``"logit"`` or ``"identity"``; unlisted variables get ``"logit"`` when
    their observed values are 0/1 and ``"identity"`` otherwise.
    """

    m: int = 20
    max_sweeps: int = 10
    seed: int = 0
    models: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        for k, v in self.models.items():
            if v not in MODEL_TYPES:
                raise ValueError(f"imputation model for {k!r} must be one of {MODEL_TYPES}")

    def to_dict(self) -> dict:
        return {"m": self.m, "max_sweeps": self.max_sweeps, "seed": self.seed, "models": dict(self.models)}

    @classmethod
    def from_dict(cls, d) -> "ImputationConfig":
        unknown = set(d) - {"m", "max_sweeps", "seed", "models"}
        if unknown:
            raise ValueError(f"unknown imputation fields {sorted(unknown)}")
        return cls(**d)


def _variables(data: ObservedDataset):
    """Column matrix ``[y, l_o..., a, l_m...]`` and its names."""
    names = ["y", *data.lo_names, "a", *data.lm_names]
    mat = np.column_stack([data.y, data.l_o, data.a, data.l_m])
    return mat, names


def _model_types(mat, names, cfg):
    out = {}
    for j, name in enumerate(names):
        obs = mat[~np.isnan(mat[:, j]), j]
        default = "logit" if np.all(np.isin(obs, (0.0, 1.0))) else "identity"
        out[name] = cfg.models.get(name, default)
    return out


def _check_observed(mat, names, targets):
    for j in targets:
        if np.all(np.isnan(mat[:, j])):
            raise AllMissingVariable(f"variable {names[j]!r} has no observed values")


def _complete(data: ObservedDataset, mat) -> ObservedDataset:
    k = data.l_o.shape[1]
    return data.replace(a=mat[:, k + 1], l_m=mat[:, k + 2:], r_a=np.ones(data.n, dtype=np.int8),
                        r_l=np.ones((data.n, data.q), dtype=np.int8))


def impute(data: ObservedDataset, cfg: ImputationConfig) -> list[ObservedDataset]:
    """Draw ``cfg.m`` completed datasets by chained equations.

    Missing cells start as draws from the observed marginal of their
    variable. Each sweep visits the incomplete variables in column order
    (exposure first, then covariates) and redraws their missing cells from a
    main-effects regression on every other variable, outcome included,
    fitted on the units where that variable is observed. Observed cells are
    never changed. Imputation ``j`` uses the random stream ``(seed, j)``.
    """
    mat, names = _variables(data)
    miss = np.isnan(mat)
    targets = [j for j in range(mat.shape[1]) if miss[:, j].any()]
    _check_observed(mat, names, targets)
    if not targets:
        return [data for _ in range(cfg.m)]
    types = _model_types(mat, names, cfg)
    out = []
    for j in range(cfg.m):
        rng = np.random.default_rng([cfg.seed, j])
        cur = mat.copy()
        for t in targets:
            obs = cur[~miss[:, t], t]
            if types[names[t]] == "logit":
                cur[miss[:, t], t] = (rng.random(miss[:, t].sum()) < obs.mean()).astype(float)
            else:
                cur[miss[:, t], t] = rng.choice(obs, size=miss[:, t].sum(), replace=True)
        for _ in range(cfg.max_sweeps):
            for t in targets:
                _redraw(cur, miss[:, t], t, types[names[t]], rng)
        out.append(_complete(data, cur))
    return out


def _redraw(cur, miss_t, t, kind, rng):
    others = [c for c in range(cur.shape[1]) if c != t]
    X = np.column_stack([np.ones(cur.shape[0]), cur[:, others]])
    obs = ~miss_t
    if kind == "logit":
        fit = fit_glm(X[obs], cur[obs, t])
        p = predict(fit, X[miss_t])
        cur[miss_t, t] = (rng.random(p.shape[0]) < p).astype(float)
    else:
        fit = fit_glm(X[obs], cur[obs, t], link="identity")
        resid = cur[obs, t] - predict(fit, X[obs])
        dof = max(int(obs.sum()) - X.shape[1], 1)
        sd = np.sqrt(np.sum(resid ** 2) / dof)
        cur[miss_t, t] = predict(fit, X[miss_t]) + sd * rng.standard_normal(int(miss_t.sum()))


# ------------------------------------------------------------ grid engine


class NotBinary(ValueError):
    pass


class GridImputer:
    """Chained-equation imputation on cell counts for all-binary data.

    Parameters
    ----------
    data : ObservedDataset
        Every variable must be 0/1. Units are grouped by missingness pattern
        and observed values; the grid keeps, per pattern, the count of units
        in each of the ``2**p`` completed cells.
    """

    def __init__(self, data: ObservedDataset):
        mat, names = _variables(data)
        if not all_binary(data):
            raise NotBinary("the grid engine needs 0/1 variables throughout")
        self.data = data
        self.names = names
        p = mat.shape[1]
        self.p = p
        miss = np.isnan(mat)
        self.targets = [j for j in range(p) if miss[:, j].any()]
        _check_observed(mat, names, self.targets)
        pat_code = miss @ (1 << np.arange(p))
        self.patterns, pat_idx = np.unique(pat_code, return_inverse=True)
        self.pattern_missing = ((self.patterns[:, None] >> np.arange(p)) & 1).astype(bool)
        bits = np.nan_to_num(mat, nan=0.0).astype(np.int64)
        self.unit_pattern = pat_idx.reshape(-1)
        self.unit_cell = bits @ (1 << np.arange(p))
        self.C = 1 << p
        cells = np.arange(self.C)
        self.cell_bits = ((cells[:, None] >> np.arange(p)) & 1).astype(float)
        self.designs = {}
        for t in self.targets:
            others = [c for c in range(p) if c != t]
            self.designs[t] = np.column_stack([np.ones(self.C), self.cell_bits[:, others]])

    def initial_counts(self, w):
        """Per-pattern cell counts ``(B, P, C)`` of the observed data under unit weights ``w``."""
        w = np.atleast_2d(w)
        B = w.shape[0]
        counts = np.zeros((B, len(self.patterns), self.C))
        flat = self.unit_pattern * self.C + self.unit_cell
        for b in range(B):
            counts[b] = np.bincount(flat, weights=w[b], minlength=len(self.patterns) * self.C).reshape(-1, self.C)
        return counts

    def _move(self, counts, t, prob, rng):
        # redraw variable t for every pattern where it is missing; prob has shape (B, C) over cells with bit t = 0
        lo_cells = np.flatnonzero(self.cell_bits[:, t] == 0)
        hi_cells = lo_cells + (1 << t)
        rows = np.flatnonzero(self.pattern_missing[:, t])
        pool = counts[:, rows][:, :, lo_cells] + counts[:, rows][:, :, hi_cells]
        n_int = np.rint(pool).astype(np.int64)
        ones = np.zeros_like(n_int)
        live = n_int > 0
        ones[live] = rng.binomial(n_int[live], np.broadcast_to(prob[:, None, :], n_int.shape)[live])
        counts[:, rows[:, None], lo_cells[None, :]] = n_int - ones
        counts[:, rows[:, None], hi_cells[None, :]] = ones

    def impute_counts(self, w, m, max_sweeps, rng):
        """Completed cell counts ``(B, m, C)`` for ``m`` imputations of each weight row.

        Weights must be nonnegative integers (bootstrap multiplicities or
        ones); imputations of all rows are drawn from the single stream ``rng``.
        """
        w = np.atleast_2d(w)
        if np.any(w != np.rint(w)):
            raise ValueError("grid imputation needs integer unit weights")
        base = self.initial_counts(w)
        B = base.shape[0]
        counts = np.repeat(base, m, axis=0)
        if not self.targets:
            return counts.sum(axis=1).reshape(B, m, self.C)
        lo_mask = {t: self.cell_bits[:, t] == 0 for t in self.targets}
        for t in self.targets:
            obs_rows = ~self.pattern_missing[:, t]
            tot = counts[:, obs_rows].sum(axis=(1, 2))
            ones = counts[:, obs_rows][:, :, self.cell_bits[:, t] == 1].sum(axis=(1, 2))
            p = np.where(tot > 0, ones / np.where(tot > 0, tot, 1.0), 0.0)
            self._move(counts, t, np.repeat(p[:, None], int(lo_mask[t].sum()), axis=1), rng)
        starts = {}
        for _ in range(max_sweeps):
            for t in self.targets:
                obs_rows = ~self.pattern_missing[:, t]
                fit_w = counts[:, obs_rows].sum(axis=1)
                X = self.designs[t]
                fit = fit_glm(X, self.cell_bits[:, t], fit_w, start=starts.get(t))
                coef = np.atleast_2d(fit.coefficients)
                starts[t] = coef
                prob = predict(fit, X)
                self._move(counts, t, np.atleast_2d(prob)[:, lo_mask[t]], rng)
        return counts.sum(axis=1).reshape(B, m, self.C)

    def completed_dataset(self) -> ObservedDataset:
        """One fully observed unit per grid cell, matching the columns of the source data."""
        bits = self.cell_bits
        k = self.data.l_o.shape[1]
        return ObservedDataset(y=bits[:, 0], a=bits[:, k + 1], l_o=bits[:, 1:k + 1], l_m=bits[:, k + 2:],
                               r_a=np.ones(self.C), r_l=np.ones((self.C, self.data.q)),
                               lo_names=self.data.lo_names, lm_names=self.data.lm_names,
                               lm_groups=self.data.lm_groups, group_names=self.data.group_names)


def grid_tmle(imputer: GridImputer, counts, specs: NuisanceSpecs, a, p_floor=P_FLOOR):
    """Mean over imputations of the complete-data TMLE on completed cell counts ``(B, m, C)``.

    Returns ``(psi, failed)``; rows where some completed table lacks a
    required stratum are flagged and get NaN.
    """
    B, m, C = counts.shape
    flat = counts.reshape(B * m, C)
    prob = CompleteDataProblem(imputer.completed_dataset(), specs, a)
    bad = prob.failed(flat)
    psi = np.full(B * m, np.nan)
    good = np.flatnonzero(~bad)
    if good.size:
        psi[good] = prob.run(flat[good], p_floor)["psi"]
    psi = psi.reshape(B, m)
    failed = np.any(np.isnan(psi), axis=1)
    return np.where(failed, np.nan, psi.mean(axis=1)), failed


def grid_mi_psi(imputer: GridImputer, specs: NuisanceSpecs, a, w, cfg: ImputationConfig, rng,
                p_floor=P_FLOOR):
    """MI point estimates for each row of the integer unit weights ``w``."""
    counts = imputer.impute_counts(w, cfg.m, cfg.max_sweeps, rng)
    return grid_tmle(imputer, counts, specs, a, p_floor)


def all_binary(data: ObservedDataset) -> bool:
    mat, _ = _variables(data)
    obs = mat[~np.isnan(mat)]
    return bool(np.all(np.isin(obs, (0.0, 1.0))))


def mi_estimate(data: ObservedDataset, cfg: ImputationConfig, specs: NuisanceSpecs, a=1,
                imputations=None, engine="units", p_floor=P_FLOOR) -> EstimateResult:
    """Mean of complete-data TMLE estimates over the imputed datasets.

    ``engine="grid"`` draws the imputations on cell counts (all-binary data
    only) with the stream ``(seed,)``; ``"units"`` uses :func:`impute`;
    ``"auto"`` picks the grid whenever the data allow it. Passing
    ``imputations`` skips the imputation step.
    """
    if data.is_complete() and imputations is None:
        res = tmle_complete_data(data, specs, a, p_floor)
        return EstimateResult(res.psi_hat, "mi", np.zeros(0), (), {"m": cfg.m, "estimates": [res.psi_hat]},
                              data.fingerprint())
    if engine == "auto":
        engine = "grid" if all_binary(data) else "units"
    if engine == "grid" and imputations is None:
        imp = GridImputer(data)
        psi, failed = grid_mi_psi(imp, specs, a, np.ones((1, data.n)), cfg, np.random.default_rng([cfg.seed]),
                                  p_floor)
        if failed[0]:
            raise EmptyStratum("an imputed dataset has no units with the target exposure")
        return EstimateResult(float(psi[0]), "mi", np.zeros(0), (), {"m": cfg.m, "engine": "grid"},
                              data.fingerprint())
    if engine not in ("units", "grid"):
        raise ValueError(f"unknown imputation engine {engine!r}")
    sets = impute(data, cfg) if imputations is None else list(imputations)
    ests = [tmle_complete_data(d, specs, a, p_floor).psi_hat for d in sets]
    return EstimateResult(float(np.mean(ests)), "mi", np.zeros(0), (),
                          {"m": len(sets), "estimates": ests, "engine": "units"}, data.fingerprint())
