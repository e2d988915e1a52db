"""Domain types: system spectrum, transition labels, multi-indices, Laplace points.

The reduced dynamics is built from rank-q Kraus tensors carrying two level
multi-indices K = (k_1 ... k_{q+1}) and L = (l_1 ... l_{q+1}).  This module
fixes the conventions every other module leans on:

* level indices are 1-based at all interfaces (k = 1 ... dim); internal dense
  arrays are 0-based and the level axes are flattened row-major,
* a transition pair (k, l) names the system operator |k><l| with transition
  frequency omega_(kl) = omega_k - omega_l,
* a LaplacePoint carries the outer argument z together with the attached
  convolution variables (z_1 ... z_q); every partial sum z + z_1 + ... + z_j
  must stay above the analyticity floor gamma_j of the correlation
  transforms for the hierarchy to be evaluable at that point.

All types are immutable after construction and safe to share between
workers.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

DEFAULT_TOL_HERM = 1e-10


@dataclass(frozen=True)
class TransitionIndex:
    """Ordered level pair (k, l) naming the operator |k><l|.  1-based."""

    k: int
    l: int

    def reversed(self):
        return TransitionIndex(self.l, self.k)

    def as_tuple(self):
        return (self.k, self.l)


@dataclass(frozen=True)
class SystemSpec:
    """Discrete system: level frequencies and the coupled transition pairs.

    Parameters
    ----------
    dim : int
        Number of levels d, at least 2.
    omega : tuple of float
        The d eigenfrequencies of H_S (inverse time, hbar = 1).
    transitions : tuple of TransitionIndex
        Which |k><l| operators appear in the system-reservoir coupling.
        Coupling strengths live with the spectral density, not here.
    """

    dim: int
    omega: tuple
    transitions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        object.__setattr__(
            self,
            "transitions",
            tuple(
                t if isinstance(t, TransitionIndex) else TransitionIndex(*t)
                for t in self.transitions
            ),
        )

    @property
    def omega_array(self):
        return np.asarray(self.omega, dtype=float)

    def omega_level(self, k):
        """Frequency of level k (1-based)."""
        return self.omega[k - 1]

    def omega_pair(self, k, l):
        """Transition frequency omega_(kl) = omega_k - omega_l (1-based)."""
        return self.omega[k - 1] - self.omega[l - 1]


def validate_system(spec):
    """Collect human-readable invariant violations; empty list means valid."""
    violations = []
    if spec.dim < 2:
        violations.append("dim must be at least 2, got %d" % spec.dim)
    if len(spec.omega) != spec.dim:
        violations.append(
            "omega length mismatch: %d entries for dim %d" % (len(spec.omega), spec.dim)
        )
    for w in spec.omega:
        if not np.isfinite(w):
            violations.append("non-finite eigenfrequency %r" % (w,))
            break
    for t in spec.transitions:
        for lev in (t.k, t.l):
            if not (1 <= lev <= spec.dim):
                violations.append(
                    "level index %d out of range [1, %d] in transition (%d,%d)"
                    % (lev, spec.dim, t.k, t.l)
                )
    return violations


@dataclass(frozen=True)
class MultiIndex:
    """Ordered tuple of q+1 level indices K = (k_1 ... k_{q+1}), 1-based."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(k) for k in self.levels))
        if len(self.levels) < 1:
            raise ValidationError("MultiIndex needs at least one level")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def flat(self, dim):
        """Row-major position of this index on a dim^len axis."""
        return pack_levels(self.levels, dim)


def pack_levels(levels, dim):
    """Flatten 1-based levels (k_1 ... k_m) to a row-major 0-based offset."""
    flat = 0
    for k in levels:
        if not (1 <= k <= dim):
            raise ValidationError("level index %d out of range [1, %d]" % (k, dim))
        flat = flat * dim + (k - 1)
    return flat


def unpack_levels(flat, length, dim):
    """Inverse of pack_levels; returns the 1-based level tuple."""
    out = []
    for _ in range(length):
        out.append(flat % dim + 1)
        flat //= dim
    return tuple(reversed(out))


def level_grid(dim, length):
    """(dim**length, length) array of 0-based labels in row-major order.

    Row r of the result is unpack_levels(r, length, dim) minus one; used to
    vectorize sums over whole multi-index axes.
    """
    idx = np.indices((dim,) * length).reshape(length, -1).T
    return np.ascontiguousarray(idx)


@dataclass(frozen=True)
class LaplacePoint:
    """Outer Laplace argument z with attached convolution variables z_1..z_q.

    The hierarchy only converges where every partial sum
    Z+_j = z + z_1 + ... + z_j lies above the analyticity floor gamma_j of
    the half-transformed correlations; strip_margin measures the worst
    clearance so callers can fail loudly instead of integrating garbage.
    """

    z: complex
    zs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "z", complex(self.z))
        object.__setattr__(self, "zs", tuple(complex(v) for v in self.zs))

    @property
    def q(self):
        return len(self.zs)

    def partial_sums(self):
        """Array [Z+_0, Z+_1, ..., Z+_q] with Z+_0 = z."""
        out = np.empty(len(self.zs) + 1, dtype=complex)
        out[0] = self.z
        if self.zs:
            out[1:] = self.z + np.cumsum(np.asarray(self.zs, dtype=complex))
        return out

    def strip_margin(self, gammas):
        """min_j Im(Z+_j) - gamma_j; positive iff the point is admissible.

        gammas may be a scalar floor or a per-j sequence (padded with its
        last entry when shorter than q+1).
        """
        sums = self.partial_sums()
        g = np.atleast_1d(np.asarray(gammas, dtype=float))
        if g.size < sums.size:
            g = np.concatenate([g, np.full(sums.size - g.size, g[-1])])
        return float(np.min(sums.imag - g[: sums.size]))

    def shifted(self, delta):
        """Same attached variables, outer argument moved by delta."""
        return LaplacePoint(self.z + delta, self.zs)


@dataclass(frozen=True)
class DensityMatrix:
    """dim x dim complex matrix expected to be Hermitian with unit trace.

    Construction only enforces shape; physical validity (Hermiticity,
    trace, positivity) is checked by psd_trace_check against the error
    budget of whoever produced the matrix.
    """

    dim: int
    entries: np.ndarray

    def __post_init__(self):
        m = np.array(self.entries, dtype=complex)
        if m.shape != (self.dim, self.dim):
            raise ValidationError(
                "entries shape %r does not match dim %d" % (m.shape, self.dim)
            )
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("density matrix must be square, got %r" % (m.shape,))
        return cls(m.shape[0], m)

    def herm_dev(self):
        return float(np.max(np.abs(self.entries - self.entries.conj().T)))

    def trace_dev(self):
        return abs(complex(np.trace(self.entries)) - 1.0)


@dataclass(frozen=True)
class CheckReport:
    """Validity report: worst eigenvalue, trace offset, Hermiticity defect."""

    min_eig: float
    trace_dev: float
    herm_dev: float
    ok: bool


def psd_trace_check(rho, tol):
    """Check positivity, unit trace, and Hermiticity of a density matrix.

    min_eig is computed from the Hermitized matrix so the three reported
    numbers are independent diagnostics.  ok means every deviation stays
    within tol (min_eig may undershoot zero by at most tol).
    """
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    herm_dev = float(np.max(np.abs(m - m.conj().T)))
    trace_dev = abs(complex(np.trace(m)) - 1.0)
    sym = 0.5 * (m + m.conj().T)
    min_eig = float(np.linalg.eigvalsh(sym)[0])
    ok = herm_dev <= tol and trace_dev <= tol and min_eig >= -tol
    return CheckReport(min_eig=min_eig, trace_dev=trace_dev, herm_dev=herm_dev, ok=ok)


def free_propagate(rho0, spec, t):
    """Evolve rho0 under H_S alone: rho_kl(t) = rho_kl(0) e^{-i(w_k-w_l)t}."""
    if not isinstance(rho0, DensityMatrix):
        rho0 = DensityMatrix.from_matrix(rho0)
    if rho0.dim != spec.dim:
        raise ValidationError(
            "density matrix dim %d does not match system dim %d" % (rho0.dim, spec.dim)
        )
    if rho0.herm_dev() > DEFAULT_TOL_HERM:
        raise ValidationError(
            "rho0 is not Hermitian within %g (deviation %g)"
            % (DEFAULT_TOL_HERM, rho0.herm_dev())
        )
    w = spec.omega_array
    phase = np.exp(-1j * (w[:, None] - w[None, :]) * float(t))
    return DensityMatrix(spec.dim, rho0.entries * phase)
