"""Small shared quadrature grids (Gauss-Legendre on intervals and lines)."""

import numpy as np
from scipy.special import roots_legendre


def gl_interval(a, b, n):
    """Nodes/weights for the interval [a, b] (endpoints may be complex)."""
    x, w = roots_legendre(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def gl_panels(breaks, n_per_panel):
    """Composite rule over consecutive [breaks[i], breaks[i+1]] panels."""
    xs, ws = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        x, w = gl_interval(a, b, n_per_panel)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def tan_line(center, scale, n, span=0.499 * np.pi):
    """Whole-line rule y = center + scale*tan(theta), |theta| < pi/2.

    Geometrically convergent for functions analytic in a strip that decay
    at least like 1/y^2; span < pi/2 keeps the far tails finite.
    """
    th, w = gl_interval(-span, span, n)
    y = center + scale * np.tan(th)
    return y, w * scale / np.cos(th) ** 2
