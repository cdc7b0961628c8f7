"""Reference computations written independently of the package code."""
import numpy as np
from scipy.optimize import minimize
from scipy.special import expit


def penalized_objective(X, y, binomial, b0, beta, lam):
    eta = b0 + X @ beta
    if binomial:
        risk = np.mean(np.logaddexp(0.0, eta) - y * eta)
    else:
        risk = np.mean((y - eta) ** 2)
    return float(risk + lam * np.abs(beta).sum())


def projected_gradient_lasso(X, y, binomial, lam):
    """Lasso with unpenalized intercept via the split beta = u - v, u, v >= 0.

    The smooth bound-constrained problem is solved by L-BFGS-B (a projected
    quasi-Newton method) to machine-level tolerances.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape

    def fun(z):
        b0, u, v = z[0], z[1:p + 1], z[p + 1:]
        beta = u - v
        eta = b0 + X @ beta
        if binomial:
            r = expit(eta) - y
            f = np.mean(np.logaddexp(0.0, eta) - y * eta)
        else:
            r = 2.0 * (eta - y)
            f = np.mean((y - eta) ** 2)
        gb = X.T @ r / n
        f += lam * (u.sum() + v.sum())
        grad = np.concatenate([[r.mean()], gb + lam, -gb + lam])
        return f, grad

    z0 = np.zeros(2 * p + 1)
    bounds = [(None, None)] + [(0.0, None)] * (2 * p)
    best = None
    for _ in range(3):
        res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"ftol": 1e-16, "gtol": 1e-13, "maxiter": 20000, "maxcor": 30})
        z0 = res.x
        if best is None or res.fun <= best.fun:
            best = res
    z = best.x
    return z[0], z[1:p + 1] - z[p + 1:], best.fun


def l1_ball_refit(X, y, binomial, bound):
    """min risk(b0, beta) s.t. sum |beta_j| <= bound, by SLSQP on the split variables."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape

    def fun(z):
        b0, u, v = z[0], z[1:p + 1], z[p + 1:]
        eta = b0 + X @ (u - v)
        if binomial:
            return float(np.mean(np.logaddexp(0.0, eta) - y * eta))
        return float(np.mean((y - eta) ** 2))

    cons = [{"type": "ineq", "fun": lambda z: bound - z[1:].sum(), "jac": lambda z: np.r_[0.0, -np.ones(2 * p)]}]
    res = minimize(fun, np.zeros(2 * p + 1), method="SLSQP", bounds=[(None, None)] + [(0, None)] * (2 * p),
                   constraints=cons, options={"ftol": 1e-14, "maxiter": 2000})
    z = res.x
    return z[0], z[1:p + 1] - z[p + 1:], res.fun
