"""Independent reference implementations used by the tests.

Everything here works unit by unit with Python dictionaries of empirical
frequencies and shares no code with the package.
"""

from collections import Counter, defaultdict
from itertools import product

import numpy as np


def _rows(data):
    out = []
    for i in range(data.n):
        out.append(dict(y=float(data.y[i]), a=None if data.r_a[i] == 0 else float(data.a[i]),
                        lo=tuple(float(v) for v in data.l_o[i]),
                        lm=tuple(None if np.isnan(v) else float(v) for v in data.l_m[i]),
                        ra=int(data.r_a[i]), rl=tuple(int(r) for r in data.r_l[i])))
    return out


def _mean_y(rows, a, lo, lm, need):
    hits = [r["y"] for r in rows if need(r) and r["a"] == a and r["lo"] == lo and r["lm"] == lm]
    if not hits:
        raise ZeroDivisionError("empty outcome cell")
    return sum(hits) / len(hits)


def block_formula(data, a=1):
    """sum_l E(Y | A=a, R_A=1, R_L=1, l) p(l_M | l_O, R_L=1) p(l_O) by direct summation."""
    rows = _rows(data)
    n = len(rows)
    p_lo = Counter(r["lo"] for r in rows)
    full_l = [r for r in rows if all(r["rl"])]
    joint = Counter((r["lo"], r["lm"]) for r in full_l)
    marg = Counter(r["lo"] for r in full_l)
    total = 0.0
    for (lo, lm), c in joint.items():
        ey = _mean_y(rows, a, lo, lm, lambda r: r["ra"] == 1 and all(r["rl"]))
        total += ey * (c / marg[lo]) * (p_lo[lo] / n)
    return total


def sequential_formula(data, a=1, ordering=None):
    """sum_l E(Y | A=a, R_A=1, all R_L=1, l) prod_k p(l_Mk | l_O, earlier l_M, R_L1..R_Lk = 1) p(l_O).

    ``ordering`` lists covariate column indices; each covariate has its own indicator.
    """
    rows = _rows(data)
    n = len(rows)
    q = data.l_m.shape[1]
    order = list(range(q)) if ordering is None else list(ordering)
    p_lo = Counter(r["lo"] for r in rows)
    # conditional frequencies of the k-th ordered covariate given its predecessors
    cond = []
    for k in range(q):
        num = defaultdict(Counter)
        for r in rows:
            if all(r["rl"][order[j]] for j in range(k + 1)):
                prev = tuple(r["lm"][order[j]] for j in range(k))
                num[(r["lo"], prev)][r["lm"][order[k]]] += 1
        cond.append(num)
    values = sorted({v for r in rows for v in r["lm"] if v is not None})
    total = 0.0
    for lo in p_lo:
        for combo in product(values, repeat=q):
            prob = p_lo[lo] / n
            for k in range(q):
                cnt = cond[k][(lo, combo[:k])]
                tot = sum(cnt.values())
                prob *= cnt[combo[k]] / tot if tot else 0.0
                if prob == 0:
                    break
            if prob == 0:
                continue
            lm = [None] * q
            for k in range(q):
                lm[order[k]] = combo[k]
            ey = _mean_y(rows, a, lo, tuple(lm), lambda r: r["ra"] == 1 and all(r["rl"]))
            total += ey * prob
    return total


def standardization(y, a, l, level=1):
    """Complete-data g-formula: sum_l E(Y | A=level, l) p(l)."""
    l = [tuple(row) for row in np.atleast_2d(np.asarray(l).T).T] if np.ndim(l) > 1 else [(v,) for v in l]
    n = len(y)
    total = 0.0
    for cell, c in Counter(l).items():
        ys = [y[i] for i in range(n) if l[i] == cell and a[i] == level]
        total += (sum(ys) / len(ys)) * c / n
    return total
