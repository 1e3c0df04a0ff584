"""Weighted GLM fitting with offsets (logit and identity links).

Every nuisance regression and every targeting step in the package goes
through this module. All vector arguments may carry a leading batch axis:
``weights`` of shape ``(B, n)`` fits ``B`` independent models that share one
design matrix, which is how bootstrap resamples are evaluated (as
multinomial frequency weights over the rows of a compressed dataset).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, xlogy

LINKS = ("logit", "identity")

COEF_BOUND = 30.0
EPS_BOUND = 10.0
TOL = 1e-8
MAX_ITER = 100
RCOND_MIN = 1e-12
RIDGE = 1e-8

# predictions never leave (expit(-30), expit(30)) on the logit scale
P_MIN = float(expit(-COEF_BOUND))
P_MAX = float(expit(COEF_BOUND))


class GlmError(RuntimeError):
    pass


class SingularDesign(GlmError):
    pass


class NoPositiveWeight(GlmError):
    pass


class DimensionMismatch(GlmError, ValueError):
    pass


class SingularDesignWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GlmFit:
    """Result of one (or a batch of) weighted GLM fits.

    ``coefficients`` has shape ``(p,)`` for a single fit and ``(B, p)`` for a
    batch; ``converged`` and ``deviance`` follow the batch shape.
    """

    link: str
    coefficients: np.ndarray
    converged: np.ndarray | bool
    iterations: int
    deviance: np.ndarray | float

    @property
    def batched(self) -> bool:
        return self.coefficients.ndim == 2


@dataclass(frozen=True)
class FluctuationFit:
    epsilon: np.ndarray | float
    converged: np.ndarray | bool


def inv_link(eta, link="logit"):
    if link == "identity":
        return eta
    return np.clip(expit(eta), P_MIN, P_MAX)


def bounded_logit(p):
    """Logit of ``p`` after clipping into the representable probability range."""
    return logit(np.clip(p, P_MIN, P_MAX))


def _as_batch(arr, n, name):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n:
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected (n,) or (B, n) with n={n}")
    return arr


def _prepare(design, response, weights, offset):
    X = np.asarray(design, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch("design must be a 2-D matrix")
    n = X.shape[0]
    single = np.ndim(weights if weights is not None else response) == 1 and np.ndim(response) == 1 \
        and (offset is None or np.ndim(offset) == 1)
    y = _as_batch(response, n, "response")
    w = _as_batch(np.ones(n) if weights is None else weights, n, "weights")
    off = _as_batch(np.zeros(n) if offset is None else offset, n, "offset")
    B = max(y.shape[0], w.shape[0], off.shape[0])
    for arr, name in ((y, "response"), (w, "weights"), (off, "offset")):
        if arr.shape[0] not in (1, B):
            raise DimensionMismatch(f"batch size of {name} does not match")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not np.all(np.isfinite(X)):
        raise ValueError("design contains non-finite values")
    return X, y, w, off, B, single


def _is_cell_indicator(X):
    return bool(np.all((X == 0.0) | (X == 1.0)) and np.all(X.sum(axis=1) <= 1.0))


def _deviance(y, mu, w, link):
    if link == "identity":
        return np.sum(w * (y - mu) ** 2, axis=-1)
    dev = xlogy(y, y) - xlogy(y, mu) + xlogy(1 - y, 1 - y) - xlogy(1 - y, 1 - mu)
    return 2.0 * np.sum(w * dev, axis=-1)


def _solve(G, rhs):
    """Batched solve with the ridge fallback for numerically singular Gram matrices.

    The reciprocal condition number is measured in the 1-norm,
    ``1 / (|G|_1 |G^-1|_1)``, from the inverse that also yields the solution.
    """
    p = G.shape[-1]
    with np.errstate(all="ignore"):
        try:
            inv = np.linalg.inv(G)
        except np.linalg.LinAlgError:
            inv = np.full_like(G, np.inf)
        norm = np.abs(G).sum(axis=-2).max(axis=-1)
        inv_norm = np.abs(inv).sum(axis=-2).max(axis=-1)
        rcond = 1.0 / (norm * inv_norm)
    bad = ~(rcond >= RCOND_MIN)
    if np.any(bad):
        warnings.warn("weighted Gram matrix numerically singular; adding ridge 1e-8*I",
                      SingularDesignWarning, stacklevel=3)
        try:
            inv[bad] = np.linalg.inv(G[bad] + RIDGE * np.eye(p))
        except np.linalg.LinAlgError as exc:
            raise SingularDesign("weighted Gram matrix is singular after ridge fallback") from exc
    beta = np.einsum("...pq,...q->...p", inv, rhs)
    if not np.all(np.isfinite(beta)):
        raise SingularDesign("non-finite coefficients after ridge fallback")
    return beta


def _fit_cells(X, y, w, link):
    # closed-form MLE when the columns are disjoint cell indicators and there is no offset
    wy = (w * y) @ X
    tot = w @ X
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(tot > 0, wy / np.where(tot > 0, tot, 1.0), 0.0)
    if link == "identity":
        return mean, np.ones(mean.shape[0], dtype=bool)
    beta = np.where(tot > 0, logit(np.clip(mean, 0.0, 1.0)), 0.0)
    clamped = np.abs(beta) >= COEF_BOUND
    beta = np.clip(beta, -COEF_BOUND, COEF_BOUND)
    return beta, ~np.any(clamped, axis=1)


def fit_glm(design, response, weights=None, offset=None, link="logit", *,
            tol=TOL, max_iter=MAX_ITER, start=None) -> GlmFit:
    """Maximize the weighted (quasi-)likelihood of a GLM with a fixed offset.

    Responses for the logit link may be fractional in [0, 1]; the score
    equations are the Bernoulli ones, so the same IRLS applies.

    Parameters
    ----------
    design : (n, p) array
    response, weights, offset : (n,) or (B, n) arrays
    link : {"logit", "identity"}
    start : optional (p,) or (B, p) starting coefficients (logit link only)

    Returns
    -------
    GlmFit
        Coefficients are clamped to +/-30 on the logit scale; a clamped fit
        reports ``converged=False``.
    """
    if link not in LINKS:
        raise ValueError(f"unknown link {link!r}")
    X, y, w, off, B, single = _prepare(design, response, weights, offset)
    n, p = X.shape
    if np.any(w.sum(axis=1) <= 0):
        raise NoPositiveWeight("at least one positive weight is required")
    if link == "logit" and (np.any(y < 0) or np.any(y > 1)):
        raise ValueError("logit link requires responses in [0, 1]")
    y = np.broadcast_to(y, (B, n))
    w = np.broadcast_to(w, (B, n))
    off = np.broadcast_to(off, (B, n))

    if not np.any(off) and _is_cell_indicator(X):
        beta, conv = _fit_cells(X, y, w, link)
        it = 1
    elif link == "identity":
        beta = _solve(_gram(w, X), (w * (y - off)) @ X)
        conv = np.ones(B, dtype=bool)
        it = 1
    else:
        beta, conv, it = _irls_logit(X, y, w, off, tol, max_iter, start, B)

    eta = beta @ X.T + off
    dev = _deviance(y, inv_link(eta, link), w, link)
    if single:
        return GlmFit(link, beta[0], bool(conv[0]), it, float(dev[0]))
    return GlmFit(link, beta, conv, it, dev)


def _gram(W, X, outer=None):
    # sum_i W[b, i] x_i x_i' for every batch row, as one matrix product
    n, p = X.shape
    if outer is None:
        outer = (X[:, :, None] * X[:, None, :]).reshape(n, p * p)
    return (W @ outer).reshape(W.shape[0], p, p)


def _irls_logit(X, y, w, off, tol, max_iter, start, B):
    n, p = X.shape
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, p * p)
    if start is not None:
        beta = np.broadcast_to(np.asarray(start, dtype=float), (B, p)).copy()
    else:
        mu0 = (w * y + 0.5) / (w + 1.0)
        z0 = logit(mu0) - off
        W0 = w * mu0 * (1 - mu0)
        beta = _solve(_gram(W0, X, outer), (W0 * z0) @ X)
        beta = np.clip(beta, -COEF_BOUND, COEF_BOUND)
    active = np.ones(B, dtype=bool)
    clamped = np.zeros(B, dtype=bool)
    it = 0
    while it < max_iter and np.any(active):
        it += 1
        idx = np.flatnonzero(active)
        b = beta[idx]
        eta = b @ X.T + off[idx]
        mu = expit(eta)
        wa = w[idx]
        W = wa * mu * (1 - mu)
        rhs = (W * (eta - off[idx]) + wa * (y[idx] - mu)) @ X
        new = _solve(_gram(W, X, outer), rhs)
        hit = np.any(np.abs(new) > COEF_BOUND, axis=1)
        new = np.clip(new, -COEF_BOUND, COEF_BOUND)
        step = np.max(np.abs(new - b), axis=1)
        beta[idx] = new
        clamped[idx] = hit
        done = step < tol
        active[idx[done]] = False
    converged = ~active & ~clamped
    return beta, converged, it


def predict(fit: GlmFit, design, offset=None):
    """Inverse link of ``design @ coefficients + offset``.

    Logit-link predictions are confined to ``[expit(-30), expit(30)]``.
    """
    X = np.asarray(design, dtype=float)
    coef = np.asarray(fit.coefficients)
    if X.ndim != 2 or X.shape[1] != coef.shape[-1]:
        raise DimensionMismatch(
            f"design has {X.shape[-1] if X.ndim == 2 else '?'} columns, fit has {coef.shape[-1]}")
    eta = coef @ X.T
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    return inv_link(eta, fit.link)


def fluctuate(response, offset_logits, weights, *, bound=EPS_BOUND, tol=1e-13, max_iter=200) -> FluctuationFit:
    """Solve ``sum w * (response - expit(offset + eps)) = 0`` for the scalar ``eps``.

    Safeguarded Newton iteration on the monotone score. When the root lies
    beyond ``+/-bound`` (degenerate responses) ``eps`` is clamped to the bound
    and ``converged`` is False. Accepts a leading batch axis like
    :func:`fit_glm`.
    """
    n = np.shape(offset_logits)[-1]
    single = np.ndim(response) == 1 and np.ndim(offset_logits) == 1 and np.ndim(weights) == 1
    y = _as_batch(response, n, "response")
    off = _as_batch(offset_logits, n, "offset")
    w = _as_batch(weights, n, "weights")
    B = max(y.shape[0], off.shape[0], w.shape[0])
    y, off, w = (np.broadcast_to(v, (B, n)) for v in (y, off, w))
    wsum = w.sum(axis=1)
    if np.any(wsum <= 0):
        raise NoPositiveWeight("fluctuation requires at least one positive weight")

    def score(e):
        return np.sum(w * (y - expit(off + e[:, None])), axis=1)

    lo = np.full(B, -bound)
    hi = np.full(B, bound)
    s_lo, s_hi = score(lo), score(hi)
    eps = np.zeros(B)
    converged = np.zeros(B, dtype=bool)
    # score is decreasing in eps: root beyond the bracket means clamp
    over = s_hi > 0
    under = s_lo < 0
    eps[over] = bound
    eps[under] = -bound
    active = ~(over | under)
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        e = eps[idx]
        mu = expit(off[idx] + e[:, None])
        s = np.sum(w[idx] * (y[idx] - mu), axis=1)
        d = np.sum(w[idx] * mu * (1 - mu), axis=1)
        pos = s > 0
        lo[idx[pos]] = np.maximum(lo[idx[pos]], e[pos])
        hi[idx[~pos]] = np.minimum(hi[idx[~pos]], e[~pos])
        small = np.abs(s) <= tol * wsum[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = e + s / d
        bad = ~np.isfinite(cand) | (cand <= lo[idx]) | (cand >= hi[idx])
        cand = np.where(bad, 0.5 * (lo[idx] + hi[idx]), cand)
        tiny = np.abs(cand - e) < 1e-15
        cand = np.where(small, e, cand)
        eps[idx] = cand
        fin = small | tiny
        converged[idx[fin]] = True
        active[idx[fin]] = False
    if single:
        return FluctuationFit(float(eps[0]), bool(converged[0]))
    return FluctuationFit(eps, converged)


def glm_covariance(fit: GlmFit, design, weights=None, offset=None):
    """Inverse Fisher information of a single logit or identity fit (model-based)."""
    X = np.asarray(design, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    mu = predict(fit, X, offset)
    if fit.link != "logit":
        raise NotImplementedError("only the logit link has a model-based covariance here")
    W = w * mu * (1 - mu)
    return np.linalg.inv(X.T @ (W[:, None] * X))
