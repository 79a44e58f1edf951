"""Independent reference computations used by the tests.

None of these route through the package's solver.
"""

import numpy as np
from scipy import optimize


def nace_ml(y: np.ndarray, mz: np.ndarray) -> np.ndarray:
    """Direct maximiser of the zero-mean bivariate-normal ACE likelihood.

    Returns (sigma2_A, sigma2_C, sigma2_E).
    """
    stats = []
    for grp, w in ((mz, 1.0), (~mz, 0.5)):
        yy = y[grp]
        stats.append((w, len(yy), yy.T @ yy))

    def nll(a):
        A, C, E = a
        t = A + C + E
        out = 0.0
        for w, n, S in stats:
            c = w * A + C
            det = t * t - c * c
            if t <= 0 or det <= 0:
                return np.inf
            inv = np.array([[t, -c], [-c, t]]) / det
            out += 0.5 * n * np.log(det) + 0.5 * np.trace(inv @ S)
        return out

    v = np.mean(y**2) / 3
    res = optimize.minimize(nll, [v, v, v], method="Nelder-Mead",
                            options={"xatol": 1e-11, "fatol": 1e-13, "maxiter": 20000, "maxfev": 40000})
    res = optimize.minimize(nll, res.x, method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
    return res.x


def pooled_closed_form(y: np.ndarray, mz: np.ndarray) -> dict:
    """Per-group pooled variance and cross-product mean, plus the implied correlation."""
    out = {}
    for label, grp in (("MZ", mz), ("DZ", ~mz)):
        yy = y[grp]
        n = len(yy)
        s2 = (np.sum(yy[:, 0] ** 2) + np.sum(yy[:, 1] ** 2)) / (2 * n)
        cov = np.sum(yy[:, 0] * yy[:, 1]) / n
        out[label] = (s2, cov, cov / s2)
    return out


def central_jacobian(fun, x, step=1e-6):
    x = np.asarray(x, float)
    f0 = np.asarray(fun(x))
    J = np.zeros(f0.shape + (x.size,))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        J[..., j] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step)
    return J


def rel_close(a, b, rtol=1e-6, atol=1e-9):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.maximum(np.abs(a), np.abs(b))))


def normal_pairs(n_mz, n_dz, A, C, E, rng):
    ys, mz = [], []
    for w, n, flag in ((1.0, n_mz, True), (0.5, n_dz, False)):
        t, c = A + C + E, w * A + C
        ys.append(rng.multivariate_normal([0, 0], [[t, c], [c, t]], size=n))
        mz += [flag] * n
    return np.vstack(ys), np.array(mz)
