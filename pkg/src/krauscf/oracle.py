"""Independent reference implementations used to cross-check the engine.

Nothing in this module shares numerical machinery with the production
paths: kernels are integrated with spectral quadrature instead of divided
differences, densities come from exact diagonalization against explicitly
discretized baths or from time-domain iteration of the memory hierarchy.
Slow and simple on purpose.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.polynomial import chebyshev as _cheb

from .core import DensityMatrix
from .correlations import correlation_tensor
from .errors import ConvergenceError, ValidationError


def j_kernel_quadrature(q, t, zq, nodes=48, check=True):
    """Ordered-simplex kernel by repeated cumulative Chebyshev integration.

    Uses the defining recursion: the level-m kernel is -i times the
    cumulative integral of e^{i z u} times the level-(m-1) kernel,
    innermost variable first.  One-dimensional spectral integration per
    level stays well conditioned where a q-dimensional simplex rule would
    not.  With check=True the node count is escalated by half and the two
    values must agree to 1e-9 relative, else a fault is raised.
    """
    zq = tuple(zq)
    if len(zq) != q:
        raise ValidationError("expected %d arguments, got %d" % (q, len(zq)))

    def run(n):
        if q == 0:
            return 1.0 + 0.0j
        if t == 0.0:
            return 0.0 + 0.0j
        # Chebyshev points of [0, t] in the standard [-1, 1] variable
        u = -np.cos(np.pi * np.arange(n + 1) / n)
        xs = 0.5 * t * (u + 1.0)
        vals = np.ones(n + 1, dtype=complex)
        for z in reversed(zq):
            integrand = -1j * np.exp(1j * z * xs) * vals
            coef = _cheb.chebfit(u, integrand, deg=n)
            anti = _cheb.chebint(coef) * (0.5 * t)
            vals = _cheb.chebval(u, anti) - _cheb.chebval(-1.0, anti)
        return complex(vals[-1])

    val = run(nodes)
    if check:
        val2 = run(nodes + nodes // 2)
        scale = max(abs(val2), 1e-30)
        if abs(val - val2) / scale > 1e-9 and abs(val - val2) > 1e-12:
            raise ConvergenceError(
                "kernel quadrature q=%d t=%g did not stabilize (%.3e rel)"
                % (q, t, abs(val - val2) / scale)
            )
        val = val2
    return val


# ---------------------------------------------------------------------------
# exact diagonalization against an explicitly discretized reservoir


@dataclass(frozen=True)
class BathDiscretization:
    """Finite collection of harmonic modes standing in for the reservoir.

    frequencies : (M,) float array
        Mode frequencies.  At finite temperature these must be positive;
        at beta = inf negative frequencies are allowed (the reference
        state is then the empty reservoir, which is what reproduces the
        pure pair-correlation kernel of a full-line spectral function).
    couplings : mapping {(k, l): (M,) complex array}
        Per-mode amplitudes g_m attached to the system operator |k><l|
        (1-based levels).  Mode m contributes g_m a_m + conj(g'_m) a_m^+
        to the potential on pair (k, l), where g' is the amplitude stored
        under the reversed pair, exactly mirroring the correlation
        builder convention.
    beta : float
        Inverse temperature, numpy.inf for zero temperature.
    n_max : int
        Highest Fock level kept per mode.
    """

    frequencies: np.ndarray
    couplings: dict
    beta: float = np.inf
    n_max: int = 1

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        w.setflags(write=False)
        object.__setattr__(self, "frequencies", w)
        coup = {}
        for pair, g in dict(self.couplings).items():
            g = np.atleast_1d(np.asarray(g, dtype=complex))
            g.setflags(write=False)
            coup[tuple(int(x) for x in pair)] = g
        object.__setattr__(self, "couplings", coup)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "n_max", int(self.n_max))

    @property
    def modes(self):
        return self.frequencies.size

    def occupations(self):
        """Mean thermal occupation per mode (zero at beta = inf)."""
        if np.isinf(self.beta):
            return np.zeros(self.modes)
        return 1.0 / np.expm1(self.beta * self.frequencies)


def validate_bath(bath, spec):
    """Invariant violations of a BathDiscretization against a SystemSpec."""
    v = []
    if bath.modes < 1:
        v.append("bath needs at least one mode")
    if bath.n_max < 1:
        v.append("n_max must be at least 1, got %d" % bath.n_max)
    if not bath.couplings:
        v.append("bath has no coupled transition pairs")
    allowed = {t.as_tuple() for t in spec.transitions}
    for pair, g in bath.couplings.items():
        if pair not in allowed:
            v.append("bath couples pair %r absent from the system transitions" % (pair,))
        if g.size != bath.modes:
            v.append(
                "coupling array for pair %r has %d entries for %d modes"
                % (pair, g.size, bath.modes)
            )
    if not np.isinf(bath.beta):
        if bath.beta <= 0:
            v.append("inverse temperature must be positive, got %g" % bath.beta)
        elif np.any(bath.frequencies <= 0):
            v.append("finite temperature requires strictly positive mode frequencies")
        else:
            # Fock truncation must not clip thermal weight: occupancy tail
            # nbar^n_max below 1e-8 per mode.
            nbar = bath.occupations()
            tail = float(np.max(nbar**bath.n_max))
            if tail >= 1e-8:
                v.append(
                    "Fock truncation too low: max nbar^n_max = %.3e (need < 1e-8); "
                    "raise n_max or lower the temperature" % tail
                )
    return v


def bath_from_spectral(sd, n_max):
    """Discrete-modes SpectralDensity -> BathDiscretization, verbatim modes."""
    if sd.kind != "discrete-modes":
        raise ValidationError(
            "only discrete-modes densities map directly to a bath; got %r" % (sd.kind,)
        )
    freqs = np.array([w for w, _ in sd.modes], dtype=float)
    pairs = sorted({tuple(p) for _, coup in sd.modes for p in coup})
    couplings = {}
    for pair in pairs:
        couplings[pair] = np.array(
            [complex(coup.get(pair, 0.0)) for _, coup in sd.modes], dtype=complex
        )
    return BathDiscretization(freqs, couplings, beta=sd.beta, n_max=n_max)


def lorentzian_bath(center, halfwidth, strengths, modes=80):
    """Zero-temperature discretization of one Lorentzian line, full real line.

    Maps Gauss-Legendre nodes u through omega = center + halfwidth*tan(u),
    so the per-mode weight S(omega_m) d_omega is exactly glw/pi times the
    squared pair amplitude.  The pointwise kernel error is dominated by
    fast off-resonant beats that average out of any dynamics; the induced
    error in reduced-state trajectories falls off roughly quadratically in
    the mode count (about 1e-4 at 80 modes for unit-width lines over a few
    lifetimes).
    """
    if modes < 1:
        raise ValidationError("need at least one mode, got %d" % modes)
    u, glw = np.polynomial.legendre.leggauss(modes)
    u = 0.5 * np.pi * u
    glw = 0.5 * np.pi * glw
    freqs = center + halfwidth * np.tan(u)
    scale = np.sqrt(glw / np.pi)
    couplings = {tuple(p): complex(a) * scale for p, a in strengths.items()}
    return BathDiscretization(freqs, couplings, beta=np.inf, n_max=1)


def _thermal_weights(w, beta, n_max):
    # normalized truncated geometric distribution over Fock levels
    if np.isinf(beta):
        out = np.zeros(n_max + 1)
        out[0] = 1.0
        return out
    x = np.exp(-beta * w)
    out = x ** np.arange(n_max + 1)
    return out / out.sum()


def _single_excitation_eligible(spec, bath, force_full):
    if force_full or spec.dim != 2 or not np.isinf(bath.beta):
        return False
    for pair, g in bath.couplings.items():
        if np.any(np.abs(g) > 0) and pair != (2, 1):
            return False
    return True


def _ed_single_excitation(spec, bath, rho0, t_grid):
    # Number-conserving zero-temperature problem: the dynamics closes on
    # span{|e,vac>, |g,1_m>} plus the stationary |g,vac>, independent of
    # the mode count.  Level 1 is g, level 2 is e, coupling on (2,1).
    wg, we = spec.omega[0], spec.omega[1]
    g = bath.couplings.get((2, 1), np.zeros(bath.modes, dtype=complex))
    m = bath.modes
    h = np.zeros((m + 1, m + 1), dtype=complex)
    h[0, 0] = we
    h[np.arange(1, m + 1), np.arange(1, m + 1)] = wg + bath.frequencies
    h[0, 1:] = g
    h[1:, 0] = g.conj()
    lam, vecs = scipy.linalg.eigh(h)
    # amplitude on |e,vac> when starting from |e,vac>
    y0 = vecs.conj().T[:, 0]
    r = np.asarray(rho0.entries if isinstance(rho0, DensityMatrix) else rho0, dtype=complex)
    out = []
    for t in np.atleast_1d(np.asarray(t_grid, dtype=float)):
        phases = np.exp(-1j * lam * t)
        psi = vecs @ (phases * y0)
        c0 = psi[0]
        pe = abs(c0) ** 2
        rho = np.zeros((2, 2), dtype=complex)
        rho[1, 1] = r[1, 1] * pe
        rho[0, 0] = r[0, 0] + r[1, 1] * (1.0 - pe)
        rho[1, 0] = r[1, 0] * c0 * np.exp(1j * wg * t)
        rho[0, 1] = rho[1, 0].conjugate()
        out.append(DensityMatrix.from_matrix(rho))
    return out


def ed_simulate(spec, bath, rho0, t_grid, dim_limit=4096, force_full=False):
    """Reduced density matrices by exact diagonalization of system + modes.

    The bath starts in the renormalized truncated Gibbs state of each
    mode; the joint initial state is propagated as a batch of weighted
    eigenbasis vectors and traced back down.  A zero-temperature problem
    whose couplings all sit on the (2,1) pair of a two-level system is
    routed through the single-excitation sector instead, which removes
    the Fock-space dimension from the cost entirely (force_full=False).

    Faults if the truncated Hilbert space would exceed dim_limit, if the
    Fock truncation clips thermal weight, or if the assembled Hamiltonian
    fails Hermiticity.
    """
    bad = validate_bath(bath, spec)
    if bad:
        raise ValidationError("; ".join(bad))
    if not isinstance(rho0, DensityMatrix):
        rho0 = DensityMatrix.from_matrix(rho0)
    if rho0.dim != spec.dim:
        raise ValidationError(
            "initial state dim %d does not match system dim %d" % (rho0.dim, spec.dim)
        )
    if rho0.herm_dev() > 1e-10:
        raise ValidationError("initial state is not Hermitian within 1e-10")
    if _single_excitation_eligible(spec, bath, force_full):
        return _ed_single_excitation(spec, bath, rho0, t_grid)

    d = spec.dim
    m = bath.modes
    nfock = bath.n_max + 1
    dim_bath = nfock**m
    if d * dim_bath > dim_limit:
        raise ValidationError(
            "truncated Hilbert space dimension %d exceeds the limit %d; "
            "reduce n_max or the mode count" % (d * dim_bath, dim_limit)
        )

    # per-mode ladder operators on the product space
    a_single = np.diag(np.sqrt(np.arange(1, nfock)), k=1)
    eye_f = np.eye(nfock)
    a_ops = []
    for i in range(m):
        op = np.array([[1.0]])
        for j in range(m):
            op = np.kron(op, a_single if j == i else eye_f)
        a_ops.append(op)

    h = np.kron(np.diag(spec.omega_array), np.eye(dim_bath)).astype(complex)
    for i in range(m):
        h += np.kron(np.eye(d), bath.frequencies[i] * (a_ops[i].T @ a_ops[i]))
    for pair, g in bath.couplings.items():
        v = np.zeros((d, d), dtype=complex)
        v[pair[0] - 1, pair[1] - 1] = 1.0
        for i in range(m):
            if g[i] != 0:
                block = np.kron(v, g[i] * a_ops[i])
                h += block + block.conj().T
    herm = float(np.max(np.abs(h - h.conj().T)))
    if herm > 1e-12 * max(1.0, float(np.max(np.abs(h)))):
        raise ValidationError("assembled Hamiltonian is not Hermitian (dev %.3e)" % herm)
    lam, vecs = scipy.linalg.eigh(h, overwrite_a=True)

    # thermal product configurations above a relative weight floor
    per_mode = [_thermal_weights(bath.frequencies[i], bath.beta, bath.n_max) for i in range(m)]
    configs, weights = [], []
    for levels in itertools.product(range(nfock), repeat=m):
        wgt = 1.0
        for i, n in enumerate(levels):
            wgt *= per_mode[i][n]
        configs.append(levels)
        weights.append(wgt)
    weights = np.asarray(weights)
    keep = weights > 1e-10 * weights.max()
    configs = [c for c, k in zip(configs, keep) if k]
    weights = weights[keep]
    weights = weights / weights.sum()

    ps, psis = np.linalg.eigh(rho0.entries)
    sig = np.abs(ps) > 1e-14

    cols, col_w = [], []
    for ci, conf in enumerate(configs):
        flat = 0
        for n in conf:
            flat = flat * nfock + n
        for si in np.nonzero(sig)[0]:
            col = np.zeros(d * dim_bath, dtype=complex)
            col.reshape(d, dim_bath)[:, flat] = psis[:, si]
            cols.append(col)
            col_w.append(weights[ci] * ps[si])
    phi = np.stack(cols, axis=1)
    col_w = np.asarray(col_w)
    y = vecs.conj().T @ phi

    out = []
    for t in np.atleast_1d(np.asarray(t_grid, dtype=float)):
        cur = vecs @ (np.exp(-1j * lam * t)[:, None] * y)
        cur = cur.reshape(d, dim_bath, -1)
        rho = np.einsum("aBs,bBs,s->ab", cur, cur.conj(), col_w, optimize=True)
        dm = DensityMatrix.from_matrix(rho)
        if dm.herm_dev() > 1e-12 or dm.trace_dev() > 1e-12:
            raise ValidationError(
                "propagation lost exactness: herm %.2e trace %.2e at t=%g"
                % (dm.herm_dev(), dm.trace_dev(), t)
            )
        out.append(dm)
    return out


# ---------------------------------------------------------------------------
# time-domain iteration of the memory hierarchy on a uniform mesh


@dataclass(frozen=True)
class VolterraSolution:
    """Mesh solution of the truncated time-domain hierarchy.

    w0 : (nt, d, d) kernel operator at q = 0, interaction picture.
    w1 : (nt, nt, d^2, d^2) or None; entry [it, i1] is the q = 1 operator
        at (t_it; t_i1), zero where t_i1 > t_it.  Only stored when it is a
        genuine unknown (q_max = 2); at q_max = 1 it is the closed-form
        push-down of w0 and carries no independent content.
    Under truncation at q_max the top operator has no memory term, so the
    q = q_max operator never depends on the outermost time; consumers can
    rebuild it from the stored level below.
    """

    ts: np.ndarray
    h: float
    q_max: int
    w0: np.ndarray
    w1: np.ndarray
    sweeps: int
    residual: float
    step_error: float = None


def _cum_trapz(arr, h, axis):
    # running integral over the mesh along axis, node j holds int_0^{t_j}
    arr = np.moveaxis(arr, axis, 0)
    out = np.cumsum(arr, axis=0)
    out = out - 0.5 * arr - 0.5 * arr[:1]
    return np.moveaxis(h * out, 0, axis)


def volterra_solve(spec, cs, q_max, t_grid, h, tol=1e-12, max_iter=120, richardson=False):
    """Iterate the truncated hierarchy on a uniform mesh covering t_grid.

    Fixed-point (Picard) iteration: the level-1 operator is updated from
    the current family through the explicit top-level push-down, then the
    level-0 operator from level 1; repeats until the sweep-to-sweep change
    falls under tol.  Faults when the iteration stops contracting, which
    happens once coupling x window grows past order one; shrink the window
    or the coupling in that case.  richardson=True re-solves at h/2 and
    reports the largest w0 discrepancy on shared nodes as step_error.
    """
    if q_max not in (1, 2):
        raise ValidationError("time-domain iteration supports q_max 1 or 2, got %r" % (q_max,))
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t_grid < 0):
        raise ValidationError("time grid must be non-negative")
    tmax = float(t_grid.max())
    if tmax == 0.0:
        tmax = h
    nt = int(np.ceil(tmax / h - 1e-12)) + 1
    ts = np.linspace(0.0, tmax, nt)
    hh = ts[1] - ts[0]
    d = spec.dim

    ct = correlation_tensor(cs, ts[:, None] - ts[None, :])  # (nt, nt, d,d,d,d)
    omega = spec.omega_array
    eu = np.exp(1j * np.subtract.outer(omega, omega)[None, :, :] * ts[:, None, None])

    delta = np.eye(d)
    w0 = np.broadcast_to(delta, (nt, d, d)).astype(complex).copy()

    if q_max == 1:
        # only w0 is unknown: w1(u; v) = push-down of w0(v)
        def sweep(w0_in):
            # substituted push-down: w1(u; v) = delta e^{i phase v} w0(v), so
            # s0[u,v,a,o] = sum_{k,m} c[(a k)(k m)](u-v) e^{i w_(a k) u} e^{i w_(k m) v} w0(v)[m,o]
            s0 = np.einsum("uvakkm,uak,vkm,vmo->uvao", ct, eu, eu, w0_in, optimize=True)
            inner = _cum_trapz(s0, hh, axis=1)
            diag = inner[np.arange(nt), np.arange(nt)]
            outer = _cum_trapz(diag, hh, axis=0)
            return delta[None] - outer

        cur = w0
        prev_change = np.inf
        for it in range(1, max_iter + 1):
            new = sweep(cur)
            change = float(np.max(np.abs(new - cur)))
            cur = new
            if change < tol:
                break
            if change > 4.0 * prev_change and change > 1.0:
                raise ConvergenceError(
                    "hierarchy iteration diverging (sweep %d change %.3e); "
                    "reduce the time window or the coupling" % (it, change)
                )
            prev_change = change
        else:
            raise ConvergenceError(
                "hierarchy iteration did not reach %g in %d sweeps (last %.3e)"
                % (tol, max_iter, change)
            )
        sol = VolterraSolution(ts, hh, 1, cur, None, it, change)
    else:
        w1 = np.einsum("ac,vcb,be->vabce", delta, eu, delta)  # free pattern, [v=t1]
        w1 = np.broadcast_to(w1[None], (nt, nt, d, d, d, d)).astype(complex).copy()
        tri = ts[:, None] >= ts[None, :] - 1e-15
        w1 *= tri[:, :, None, None, None, None]

        def sweep_w1(w0_in, w1_in):
            new = np.zeros_like(w1_in)
            # t-independent correlation contraction shared by both moves
            for i1 in range(nt):
                # down: delta_{k1l1} e^{i w_(l1 k2) t1} w0(t1)
                down = np.einsum("ac,cb,be->abce", delta, eu[i1], w0_in[i1])
                # move j=1: child at (v, t1), v in [t1, u]
                s1 = np.einsum(
                    "uvakkm,uak,vkm,vmbce->uvabce",
                    ct[:, :, :, :, :, :],
                    eu,
                    eu,
                    w1_in[:, i1],
                    optimize=True,
                )
                cum1 = _cum_trapz(s1, hh, axis=1)
                i1v = cum1[np.arange(nt), np.arange(nt)] - cum1[:, i1]
                # move j=2: child at (t1, v), v in [0, t1]
                s2 = np.einsum(
                    "uvaclm,uac,cb,vbmle->uvabce",
                    ct,
                    eu,
                    eu[i1],
                    w1_in[i1],
                    optimize=True,
                )
                cum2 = _cum_trapz(s2, hh, axis=1)
                i2v = cum2[:, i1]
                outer = _cum_trapz(i1v + i2v, hh, axis=0)
                outer = outer - outer[i1]
                new[i1:, i1] = down[None] - outer[i1:]
            return new

        def sweep_w0(w1_in):
            s0 = np.einsum("uvaklm,uak,uvkmlo->uvao", ct, eu, w1_in, optimize=True)
            inner = _cum_trapz(s0, hh, axis=1)
            diag = inner[np.arange(nt), np.arange(nt)]
            return delta[None] - _cum_trapz(diag, hh, axis=0)

        cur0, cur1 = w0, w1
        prev_change = np.inf
        for it in range(1, max_iter + 1):
            new1 = sweep_w1(cur0, cur1)
            new0 = sweep_w0(new1)
            change = max(float(np.max(np.abs(new0 - cur0))), float(np.max(np.abs(new1 - cur1))))
            cur0, cur1 = new0, new1
            if change < tol:
                break
            if change > 4.0 * prev_change and change > 1.0:
                raise ConvergenceError(
                    "hierarchy iteration diverging (sweep %d change %.3e); "
                    "reduce the time window or the coupling" % (it, change)
                )
            prev_change = change
        else:
            raise ConvergenceError(
                "hierarchy iteration did not reach %g in %d sweeps (last %.3e)"
                % (tol, max_iter, change)
            )
        sol = VolterraSolution(
            ts, hh, 2, cur0, cur1.reshape(nt, nt, d * d, d * d), it, change
        )

    if richardson:
        fine = volterra_solve(spec, cs, q_max, t_grid, h / 2.0, tol, max_iter, False)
        dev = float(np.max(np.abs(fine.w0[::2] - sol.w0)))
        sol = VolterraSolution(
            sol.ts, sol.h, sol.q_max, sol.w0, sol.w1, sol.sweeps, sol.residual, dev
        )
    return sol


# ---------------------------------------------------------------------------
# direct resummation of the expansion on the mesh


def _trap_weights(it, h):
    if it == 0:
        return np.zeros(1)
    w = np.full(it + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def dyson_density(spec, cs, rho0, q_max, t_grid, h=None, sol=None):
    """Reduced density matrix from the order-by-order expansion.

    Sums the q = 0..q_max terms built from the mesh operators of
    volterra_solve, pairing the primed and unprimed sides through the
    correlation tensor over all slot bijections (the permutation pair
    (P, Q) collapses to the single bijection Q P^{-1}, cancelling the
    1/q! prefactor).  Operators are contracted in the rotating frame and
    dressed back at the end.  Every requested time must sit on the
    integration mesh; pass h to control the mesh step (default T/48).
    """
    if q_max not in (1, 2):
        raise ValidationError("series evaluation supports q_max 1 or 2, got %r" % (q_max,))
    if not isinstance(rho0, DensityMatrix):
        rho0 = DensityMatrix.from_matrix(rho0)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    tmax = float(t_grid.max())
    if h is None:
        h = tmax / 48.0 if tmax > 0 else 1.0
    if sol is None:
        sol = volterra_solve(spec, cs, q_max, t_grid, h)
    ts, hh = sol.ts, sol.h
    nt = ts.size
    d = spec.dim
    idxs = []
    for t in t_grid:
        i = int(round(t / hh))
        if not (0 <= i < nt) or abs(ts[i] - t) > 1e-9:
            raise ValidationError(
                "output time %g does not sit on the integration mesh (step %g)" % (t, hh)
            )
        idxs.append(i)

    omega = spec.omega_array
    eu = np.exp(1j * np.subtract.outer(omega, omega)[None, :, :] * ts[:, None, None])
    cgrid = correlation_tensor(cs, ts[:, None] - ts[None, :]).reshape(nt, nt, d * d, d * d)
    delta = np.eye(d)
    r0 = rho0.entries

    # q = 1 operator grid in the two index layouts used by the pairing;
    # at q_max = 1 it is the t-independent push-down of w0
    if q_max == 1:
        w1u = np.einsum("ac,icb,ibe->iabce", delta, eu, sol.w0)
        w1_of = lambda it: w1u  # noqa: E731
    else:
        w1full = sol.w1.reshape(nt, nt, d, d, d, d)
        w1_of = lambda it: w1full[it]  # noqa: E731

    if q_max == 2:
        # top operator never depends on the outer time under truncation
        w2u = np.einsum("ac,icb,ijbfeg->ijabfceg", delta, eu, w1full)
        mask = np.where(
            np.arange(nt)[:, None] > np.arange(nt)[None, :],
            1.0,
            np.where(np.arange(nt)[:, None] == np.arange(nt)[None, :], 0.5, 0.0),
        )
        # unprimed layout [i1,i2, k1, (l1 k2), (l2 k3), l3]
        x2 = w2u.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(nt, nt, d, d * d, d * d, d)
        x2 = x2 * mask[:, :, None, None, None, None]
        # primed layout [j1,j2, k1', (k2' l1'), (k3' l2'), l3']
        x2p = w2u.transpose(0, 1, 2, 3, 5, 4, 6, 7).reshape(nt, nt, d, d * d, d * d, d)
        x2p = x2p * mask[:, :, None, None, None, None]

    out = []
    for t, it in zip(t_grid, idxs):
        w = _trap_weights(it, hh)
        n = it + 1
        rho_i = sol.w0[it] @ r0 @ sol.w0[it].conj().T

        # pairing layouts: unprimed slots pack (l_j, k_{j+1}), primed (k'_{j+1}, l'_j)
        w1g = w1_of(it)[:n]
        x1 = w1g.transpose(0, 1, 3, 2, 4).reshape(n, d, d * d, d)
        x1p = w1g.reshape(n, d, d * d, d)
        cg = cgrid[:n, :n]
        rho_i += np.einsum(
            "i,j,isxb,jpue,jiux,be->sp", w, w, x1, x1p.conj(), cg, r0, optimize=True
        )

        if q_max == 2:
            a2 = x2[:n, :n] * (w[:, None] * w[None, :])[:, :, None, None, None, None]
            b2 = x2p[:n, :n].conj() * (w[:, None] * w[None, :])[:, :, None, None, None, None]
            # identity pairing: slots (1,1) and (2,2)
            z1 = np.einsum("iksxyb,jiux->jksuyb", a2, cg, optimize=True)
            z2 = np.einsum("jksuyb,lkvy->jlsuvb", z1, cg, optimize=True)
            rho_i += np.einsum("jlsuvb,jlpuve,be->sp", z2, b2, r0, optimize=True)
            # swapped pairing: primed slot 2 against unprimed slot 1 and vice versa
            z1s = np.einsum("iksxyb,livx->lksvyb", a2, cg, optimize=True)
            z2s = np.einsum("lksvyb,jkuy->ljsvub", z1s, cg, optimize=True)
            rho_i += np.einsum("ljsvub,jlpuve,be->sp", z2s, b2, r0, optimize=True)

        rho_s = rho_i * np.exp(-1j * np.subtract.outer(omega, omega) * t)
        out.append(DensityMatrix.from_matrix(rho_s))
    return out


def compare(t_a, rhos_a, t_b, rhos_b):
    """Elementwise deviation between two density-matrix time series.

    Both series must live on the same time grid (to 1e-9); anything else
    is a grid mismatch fault, never silently interpolated.  Returns the
    overall max deviation plus the full (nt, d, d) deviation table.
    """
    t_a = np.atleast_1d(np.asarray(t_a, dtype=float))
    t_b = np.atleast_1d(np.asarray(t_b, dtype=float))
    if t_a.shape != t_b.shape or np.max(np.abs(t_a - t_b), initial=0.0) > 1e-9:
        raise ValidationError("time grids differ; refusing to compare across grids")
    if len(rhos_a) != t_a.size or len(rhos_b) != t_b.size:
        raise ValidationError("series length does not match its time grid")
    ma = np.stack([r.entries if isinstance(r, DensityMatrix) else np.asarray(r) for r in rhos_a])
    mb = np.stack([r.entries if isinstance(r, DensityMatrix) else np.asarray(r) for r in rhos_b])
    if ma.shape != mb.shape:
        raise ValidationError("matrix dimensions differ between the series")
    table = np.abs(ma - mb)
    return {
        "max_abs_dev": float(table.max(initial=0.0)),
        "per_element_table": table,
        "times": t_a,
    }
