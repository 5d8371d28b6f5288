"""Fundamental solutions of ``phi'' = mu * phi`` continued across ``mu = 0``.

``cfun(mu, z)`` and ``sfun(mu, z)`` are the solutions with ``(phi, phi') = (1, 0)``
and ``(0, 1)`` at ``z = 0``, i.e. ``cos(sqrt(-mu) z)`` and
``sin(sqrt(-mu) z) / sqrt(-mu)`` for ``mu < 0``.  Both are entire in ``mu``,
so they are evaluated with cos/sin, cosh/sinh or a short Taylor series
depending on the sign and size of ``mu``.
"""

import numpy as np

SERIES_RADIUS = 1e-4


def _series(mu, z):
    # c = sum (mu z^2)^k / (2k)!, s = z * sum (mu z^2)^k / (2k+1)!, 6 terms
    x = mu * z * z
    c = np.zeros_like(x)
    s = np.zeros_like(x)
    term_c = np.ones_like(x)
    term_s = np.ones_like(x)
    for k in range(6):
        c = c + term_c
        s = s + term_s
        term_c = term_c * x / ((2 * k + 1) * (2 * k + 2))
        term_s = term_s * x / ((2 * k + 2) * (2 * k + 3))
    return c, s * z


def cfun_sfun(mu, z):
    """Return ``(cfun, sfun)`` evaluated elementwise (broadcasting)."""
    mu, z = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(z, dtype=float))
    c = np.empty(mu.shape)
    s = np.empty(mu.shape)

    small = np.abs(mu) < SERIES_RADIUS
    neg = (mu < 0) & ~small
    pos = (mu > 0) & ~small

    if neg.any():
        k = np.sqrt(-mu[neg])
        c[neg] = np.cos(k * z[neg])
        s[neg] = np.sin(k * z[neg]) / k
    if pos.any():
        k = np.sqrt(mu[pos])
        c[pos] = np.cosh(k * z[pos])
        s[pos] = np.sinh(k * z[pos]) / k
    if small.any():
        c[small], s[small] = _series(mu[small], z[small])
    return c, s


def robin_eigenfunction(mu, q0, z):
    """Eigenfunction ``cfun + q0 * sfun`` normalised to ``phi(0) = 1``."""
    c, s = cfun_sfun(mu, z)
    return c + q0 * s


def characteristic(mu, q0, q1):
    """Characteristic function whose zeros are the Robin eigenvalues ``mu``.

    With ``phi = cfun + q0 sfun`` the right boundary condition
    ``phi'(1) = q1 phi(1)`` reads ``(mu - q0 q1) sfun(1) + (q0 - q1) cfun(1) = 0``.
    For ``mu < 0`` this equals
    ``(-k - q0 q1 / k) sin k + (q0 - q1) cos k`` with ``k = sqrt(-mu)``.
    """
    c, s = cfun_sfun(mu, 1.0)
    return (np.asarray(mu) - q0 * q1) * s + (q0 - q1) * c


def bracket_roots(fun, grid):
    """Refine every sign change of ``fun`` on ``grid`` by bisection.

    ``fun`` must accept arrays.  Returns roots in the order of ``grid``.
    """
    grid = np.asarray(grid, dtype=float)
    vals = fun(grid)
    roots = []
    exact = vals == 0.0
    roots.extend(grid[exact].tolist())
    idx = np.nonzero((np.sign(vals[:-1]) * np.sign(vals[1:])) < 0)[0]
    if idx.size == 0:
        return np.sort(np.asarray(roots))
    lo = grid[idx].copy()
    hi = grid[idx + 1].copy()
    flo = vals[idx].copy()
    # vectorised bisection down to an absolute bracket width of 1e-12
    for _ in range(200):
        width = hi - lo
        if np.all(width <= 1e-12 * np.maximum(1.0, np.abs(lo))):
            break
        mid = 0.5 * (lo + hi)
        fmid = fun(mid)
        left = np.sign(fmid) * np.sign(flo) <= 0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fmid)
    roots.extend((0.5 * (lo + hi)).tolist())
    return np.sort(np.asarray(roots))
