"""Compiled coordinate-descent sweeps over a CSC design.

The kernel minimizes the weighted quadratic

    (1 / 2n) * sum_i w_i (z_i - b0 - x_i . beta)^2 + lam * sum_j |beta_j|

subject to box bounds on beta. ``resid`` holds z - eta and is updated in place.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def column_weights(indptr, indices, data, w, p):
    out = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            acc += w[indices[k]] * data[k] * data[k]
        out[j] = acc
    return out


@njit(cache=True)
def cd_sweeps(indptr, indices, data, w, resid, beta, b0, lam, lower, upper, xw2,
              coords, max_sweeps, tol, fit_intercept):
    """Cycle over ``coords`` until the max relative change falls below tol.

    Returns (intercept, sweeps used, last max relative change).
    """
    n = resid.shape[0]
    lam_n = lam * n
    wsum = 0.0
    for i in range(n):
        wsum += w[i]
    change = 0.0
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        change = 0.0
        for c in range(coords.shape[0]):
            j = coords[c]
            denom = xw2[j]
            if denom <= 0.0:
                continue
            old = beta[j]
            g = 0.0
            for k in range(indptr[j], indptr[j + 1]):
                i = indices[k]
                g += w[i] * data[k] * resid[i]
            u = g + denom * old
            if u > lam_n:
                new = (u - lam_n) / denom
            elif u < -lam_n:
                new = (u + lam_n) / denom
            else:
                new = 0.0
            if new < lower[j]:
                new = lower[j]
            elif new > upper[j]:
                new = upper[j]
            delta = new - old
            if delta != 0.0:
                for k in range(indptr[j], indptr[j + 1]):
                    resid[indices[k]] -= data[k] * delta
                beta[j] = new
                rel = abs(delta) / max(1.0, abs(new))
                if rel > change:
                    change = rel
        if fit_intercept and wsum > 0.0:
            acc = 0.0
            for i in range(n):
                acc += w[i] * resid[i]
            delta = acc / wsum
            if delta != 0.0:
                for i in range(n):
                    resid[i] -= delta
                b0 += delta
                rel = abs(delta) / max(1.0, abs(b0))
                if rel > change:
                    change = rel
        if change < tol:
            break
    return b0, sweeps, change


@njit(cache=True)
def xt_vec(indptr, indices, data, v, p):
    """X^T v for a CSC matrix."""
    out = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            acc += data[k] * v[indices[k]]
        out[j] = acc
    return out
