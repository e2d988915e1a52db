"""Ordered-exponential kernels J_q mapping Laplace data back to time.

J_q(t; z_1..z_q) = (-i)^q times the integral of exp(i sum_p z_p t_p) over
the ordered simplex t > t_1 > ... > t_q > 0.  Algebraically this is
(-1)^q times the divided difference of sigma -> exp(i sigma t) over the
node set {0, x_1, ..., x_q} built from the partial sums x_p = z_1+...+z_p,
which is the form evaluated here: divided differences of an entire function
are themselves entire, so confluent node collisions are limits, not
singularities.

Production paths: explicit stable formulas for q <= 2 (phi-function series
near confluence, broadcastable over grids) and the nodes-matrix exponential
for general q (the [0, q] entry of expm of the bidiagonal node matrix gives
the divided difference exactly, Hermite/confluent cases included).
"""

import numpy as np
from scipy.linalg import expm

# switch to series once |x * t| drops below this; expansions below carry
# enough orders that the crossover error sits at ~1e-14 relative
_EPS_SWITCH = 1e-3


def _phi1(u):
    """(e^u - 1)/u, series-stabilized; u complex array."""
    u = np.asarray(u, dtype=complex)
    small = np.abs(u) < _EPS_SWITCH
    us = np.where(small, 0.0, u)
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = np.where(small, 1.0, (np.exp(us) - 1.0) / np.where(small, 1.0, us))
    ser = 1.0 + u / 2.0 * (1.0 + u / 3.0 * (1.0 + u / 4.0 * (1.0 + u / 5.0)))
    return np.where(small, ser, direct)


def _pair_dd(x, y, t):
    """First divided difference f[x, y] of f(s) = e^{ist}, stable near x = y."""
    return np.exp(1j * x * t) * (1j * t) * _phi1(1j * (y - x) * t)


def j_one(t, a):
    """J_1(t; a) = (1 - e^{iat})/a, broadcastable, confluent-safe."""
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=complex)
    return -_pair_dd(np.zeros_like(a), a, t)


def _h_poly(a, c, k):
    """Complete homogeneous symmetric polynomial h_k(a, c)."""
    out = np.zeros(np.broadcast(a, c).shape, dtype=complex)
    for i in range(k + 1):
        out = out + a**i * c ** (k - i)
    return out


def j_two(t, a, b):
    """J_2(t; a, b): divided difference over nodes {0, a, a+b}, broadcast.

    Three regimes: generic outer difference, expansion in the small node
    a+b (Hermite shift), and the doubly-confluent Taylor series.  Orders
    are chosen so each branch is ~1e-14 accurate at the switchover.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    t, a, b = np.broadcast_arrays(t, a, b)
    t = t.astype(float)
    a = a.astype(complex)
    b = b.astype(complex)
    c = a + b
    eps_a = np.abs(a * t)
    eps_c = np.abs(c * t)

    # generic: (f[a, c] - f[0, a]) / c
    c_safe = np.where(eps_c < _EPS_SWITCH, 1.0, c)
    generic = (_pair_dd(a, c, t) - _pair_dd(np.zeros_like(a), a, t)) / c_safe

    # D_m = f^{(m)}(0)/m! = (it)^m / m!
    it = 1j * t
    d = [np.ones_like(c)]
    for m in range(1, 7):
        d.append(d[-1] * it / m)

    # node-c expansion around {0, 0, a}: f[0,a,c] = sum_m c^m f[0^{m+1}, a]
    a_safe = np.where(eps_a < _EPS_SWITCH, 1.0, a)
    f0a = _pair_dd(np.zeros_like(a), a, t)
    reps = [f0a]  # f[0^m, a] for m = 1, 2, ...
    for m in range(2, 6):
        reps.append((reps[-1] - d[m - 1]) / a_safe)
    shifted = reps[1] + c * (reps[2] + c * (reps[3] + c * reps[4]))

    # both nodes tiny: f[0,a,c] = sum_m D_m h_{m-2}(a, c)
    taylor = sum(d[m] * _h_poly(a, c, m - 2) for m in range(2, 7))

    out = np.where(eps_c < _EPS_SWITCH, np.where(eps_a < _EPS_SWITCH, taylor, shifted), generic)
    return out


def dd_exp_nodes(t, nodes):
    """Divided difference of e^{ist} over an arbitrary 1-D node list.

    Exact for repeated nodes: the value is the [0, -1] entry of the matrix
    exponential of the bidiagonal node matrix.
    """
    nodes = np.asarray(nodes, dtype=complex)
    n = nodes.size
    if n == 1:
        return np.exp(1j * nodes[0] * t)
    m = np.diag(nodes) + np.diag(np.ones(n - 1), 1)
    return complex(expm(1j * float(t) * m)[0, -1])


def j_kernel(q, t, zq):
    """J_q(t; z_1..z_q) per the divided-difference closed form.

    Scalar evaluation for any q >= 0; q = 0 is the empty simplex, 1.
    Arguments enter only through the partial sums, so the outer Laplace
    variable never appears here.
    """
    zq = tuple(zq)
    if len(zq) != q:
        raise ValueError("expected %d kernel arguments, got %d" % (q, len(zq)))
    if q == 0:
        return 1.0 + 0.0j
    if q == 1:
        return complex(j_one(t, zq[0]))
    if q == 2:
        return complex(j_two(t, zq[0], zq[1]))
    nodes = np.concatenate([[0.0], np.cumsum(np.asarray(zq, dtype=complex))])
    return (-1.0) ** q * dd_exp_nodes(t, nodes)


def j_kernel_array(t, z_list):
    """Broadcast J_q over array-valued arguments; q = len(z_list).

    Fast vectorized paths exist for q <= 2 (the supported reconstruction
    envelope); larger q falls back to pointwise evaluation and is meant
    for tests, not grids.
    """
    q = len(z_list)
    if q == 0:
        return np.ones(np.broadcast(np.asarray(t)).shape, dtype=complex)
    if q == 1:
        return j_one(t, z_list[0])
    if q == 2:
        return j_two(t, z_list[0], z_list[1])
    bc = np.broadcast(np.asarray(t, dtype=float), *[np.asarray(z) for z in z_list])
    out = np.empty(bc.shape, dtype=complex)
    arrs = np.broadcast_arrays(np.asarray(t, dtype=float), *z_list)
    it = np.nditer(arrs[0], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        out[idx] = j_kernel(q, arrs[0][idx], [a[idx] for a in arrs[1:]])
    return out
