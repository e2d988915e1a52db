"""Reservoir pair correlations as finite pole/residue families.

Everything downstream (hierarchy moves, continued-fraction feedback,
reconstruction atoms) consumes the correlations through contour integrals,
so the whole bath model is reduced here to rational structure: the forward
half-transform

    c_+(y) = sum_f r_f / (y - p_f),      c(t>0) = sum_f r_f e^{-i p_f t},

with poles in the closed lower half-plane, and the backward

    c_-(y) = sum_b s_b / (y - P_b),      c(t<0) = -sum_b s_b e^{-i P_b t},

with poles in the closed upper half-plane.  Residues carry the full
transition-pair tensor structure r[(k,l),(m,n)] stored as (N, d, d, d, d)
arrays.

Poles sitting exactly on the real axis (discrete bath modes) belong to both
half-transforms with opposite residues; the rational parts cancel and what
remains is the distributional weight -2*pi*i*r*delta(y - p) of the combined
transform.  They are stored as a separate "axis" family so evaluators can
treat them as exact delta atoms instead of squeezing contours around them.

Continuum (Lorentzian) baths at finite temperature are rationalized with the
antisymmetrized line shape J(w) = S(w) - S(-w) and a truncated Matsubara
expansion of the Bose factor; J(0) = 0 cancels the w = 0 pole exactly, so
no principal values enter.  Zero temperature is the exact beta = infinity
limit of the one-pole-per-term form, not a large-beta surrogate.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import TransitionIndex
from .errors import ValidationError

_PRUNE = 1e-15


@dataclass(frozen=True)
class SpectralDensity:
    """Bath model: either discrete modes or a sum of Lorentzian terms.

    Parameters
    ----------
    kind : {"discrete-modes", "lorentzian-sum"}
    modes : tuple of (omega_m, couplings)
        discrete-modes only; omega_m > 0, couplings a mapping
        {(k, l): complex amplitude} over system transition pairs (1-based).
    terms : tuple of (center, halfwidth, strengths)
        lorentzian-sum only; halfwidth > 0, strengths a mapping like above.
        The line shape is normalized to unit weight, so a single strength g
        on one pair gives c(t>0) = g^2 e^{-i*center*t - halfwidth*t} at
        zero temperature.
    beta : float
        Inverse temperature; numpy.inf means exact zero temperature.
    bose_poles : int
        Matsubara order used to rationalize the Bose factor for
        finite-temperature Lorentzian baths.
    """

    kind: str
    modes: tuple = ()
    terms: tuple = ()
    beta: float = np.inf
    bose_poles: int = 10

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple((float(w), dict(c)) for w, c in self.modes))
        object.__setattr__(
            self, "terms", tuple((float(a), float(b), dict(c)) for a, b, c in self.terms)
        )


def validate_spectral(sd, spec):
    """Invariant violations of a SpectralDensity against a SystemSpec."""
    v = []
    if sd.kind not in ("discrete-modes", "lorentzian-sum"):
        v.append("unknown spectral density kind %r" % (sd.kind,))
        return v
    if sd.beta < 0:
        v.append("negative inverse temperature beta = %g" % sd.beta)
    allowed = {t.as_tuple() for t in spec.transitions}
    entries = sd.modes if sd.kind == "discrete-modes" else sd.terms

    def check_pairs(couplings, what):
        if not couplings:
            v.append("%s has an empty coupling list" % what)
        for pair in couplings:
            if tuple(pair) not in allowed:
                v.append("%s couples pair %r absent from the system transitions" % (what, pair))

    if sd.kind == "discrete-modes":
        for i, (w, coup) in enumerate(entries):
            if not w > 0:
                v.append(
                    "mode %d has frequency %g; discrete modes must sit at positive "
                    "frequency%s" % (i, w, " (zero temperature)" if np.isinf(sd.beta) else "")
                )
            check_pairs(coup, "mode %d" % i)
    else:
        for i, (_, kappa, coup) in enumerate(entries):
            if not kappa > 0:
                v.append("lorentzian term %d has non-positive half-width %g" % (i, kappa))
            check_pairs(coup, "lorentzian term %d" % i)
        if not np.isinf(sd.beta) and sd.bose_poles < 1:
            v.append("finite temperature needs bose_poles >= 1, got %d" % sd.bose_poles)
    if not entries:
        v.append("spectral density has no modes/terms")
    return v


@dataclass(frozen=True)
class CorrelationSet:
    """Immutable pole/residue data for all ordered transition-pair tensors.

    axis_* hold real poles (both half-transforms, delta atoms of the
    combined transform); fwd_* strictly lower half-plane poles of c_+;
    bwd_* strictly upper half-plane poles of c_-.  Residue arrays have
    shape (N, d, d, d, d) indexed by [pole, k, l, m, n] for the ordered
    component c_{(k l)(m n)} with 0-based level axes.
    """

    dim: int
    axis_poles: np.ndarray
    axis_res: np.ndarray
    fwd_poles: np.ndarray
    fwd_res: np.ndarray
    bwd_poles: np.ndarray
    bwd_res: np.ndarray

    def __post_init__(self):
        for name in ("axis_poles", "fwd_poles", "bwd_poles"):
            arr = np.asarray(getattr(self, name), dtype=complex).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        d = self.dim
        for name in ("axis_res", "fwd_res", "bwd_res"):
            arr = np.asarray(getattr(self, name), dtype=complex).reshape(-1, d, d, d, d)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def forward_family(self):
        """Poles/residues of c_+ (axis and lower combined), for the hierarchy."""
        return (
            np.concatenate([self.axis_poles, self.fwd_poles]),
            np.concatenate([self.axis_res, self.fwd_res]),
        )

    def residue_scale(self):
        """sum_p max|r_p|; crude magnitude for tail bounds and defaults."""
        tot = 0.0
        for res in (self.axis_res, self.fwd_res, self.bwd_res):
            if len(res):
                tot += float(np.sum(np.max(np.abs(res), axis=(1, 2, 3, 4))))
        return tot

    def pole_depth(self):
        """max |Im p| over off-axis poles; sets natural contour scales."""
        depths = [0.0]
        for p in (self.fwd_poles, self.bwd_poles):
            if len(p):
                depths.append(float(np.max(np.abs(p.imag))))
        return max(depths)


def _pair_index(pair, dim):
    k, l = (pair.k, pair.l) if isinstance(pair, TransitionIndex) else tuple(pair)
    if not (1 <= k <= dim and 1 <= l <= dim):
        raise ValidationError("transition pair (%r, %r) outside [1, %d]" % (k, l, dim))
    return k - 1, l - 1


def _coupling_matrix(couplings, dim):
    lam = np.zeros((dim, dim), dtype=complex)
    for pair, amp in couplings.items():
        i, j = _pair_index(pair, dim)
        lam[i, j] = complex(amp)
    return lam


def _emission_tensor(lam):
    # E[(k,l),(m,n)] = lam_(kl) * conj(lam_(nm)); pairs <U_(kl)(t) U_(mn)(0)>
    # through the annihilator part of the first potential.
    return np.einsum("kl,nm->klmn", lam, lam.conj())


def _absorption_tensor(lam):
    # A[(k,l),(m,n)] = conj(lam_(lk)) * lam_(mn); the creator-part pairing.
    return np.einsum("lk,mn->klmn", lam.conj(), lam)


def _occ_upper(beta, kmax, w):
    """Rationalized 1 + nbar: 1/2 + 1/(beta w) + sum_k 2w/(beta(w^2+nu_k^2))."""
    w = np.asarray(w, dtype=complex)
    out = 0.5 + 1.0 / (beta * w)
    for k in range(1, kmax + 1):
        nu = 2.0 * np.pi * k / beta
        out = out + 2.0 * w / (beta * (w * w + nu * nu))
    return out


def build_correlations(sd, spec):
    """Assemble the CorrelationSet for a bath model and system.

    Discrete modes stay exact at any temperature (Bose factors evaluated,
    not expanded); Lorentzian terms produce one lower/upper pole pair at
    zero temperature and additionally the Matsubara family at finite
    temperature.  See the module docstring for the family semantics.
    """
    bad = validate_spectral(sd, spec)
    if bad:
        raise ValidationError("; ".join(bad))
    d = spec.dim
    axis, fwd, bwd = [], [], []  # lists of (pole, residue tensor)

    if sd.kind == "discrete-modes":
        for w, coup in sd.modes:
            lam = _coupling_matrix(coup, d)
            emit, absorb = _emission_tensor(lam), _absorption_tensor(lam)
            nbar = 0.0 if np.isinf(sd.beta) else 1.0 / np.expm1(sd.beta * w)
            axis.append((w, (nbar + 1.0) * emit))
            if nbar > 0:
                axis.append((-w, nbar * absorb))
    elif np.isinf(sd.beta):
        for center, kappa, coup in sd.terms:
            g = _coupling_matrix(coup, d)
            emit = _emission_tensor(g)
            fwd.append((center - 1j * kappa, emit))
            bwd.append((center + 1j * kappa, -emit))
    else:
        beta, kmax = sd.beta, sd.bose_poles
        for center, kappa, coup in sd.terms:
            g = _coupling_matrix(coup, d)
            emit, absorb = _emission_tensor(g), _absorption_tensor(g)

            def shape(w):
                # unit-weight line and its antisymmetrized (odd) combination
                s = (kappa / np.pi) / ((w - center) ** 2 + kappa**2)
                s_m = (kappa / np.pi) / ((w + center) ** 2 + kappa**2)
                return s - s_m

            def occ_pair(w):
                up = _occ_upper(beta, kmax, w)
                return up * emit + (up - 1.0) * absorb

            # line-shape poles; residue of the unit Lorentzian at its own
            # lower pole is -1/(2 pi i), upper +1/(2 pi i)
            fwd.append((center - 1j * kappa, occ_pair(center - 1j * kappa)))
            fwd.append((-center - 1j * kappa, -occ_pair(-center - 1j * kappa)))
            bwd.append((center + 1j * kappa, -occ_pair(center + 1j * kappa)))
            bwd.append((-center + 1j * kappa, occ_pair(-center + 1j * kappa)))
            # Matsubara poles of the occupancy factor; both tensors share
            # the residue 1/beta of the expansion term
            both = emit + absorb
            for k in range(1, kmax + 1):
                nu = 2.0 * np.pi * k / beta
                fwd.append((-1j * nu, -2j * np.pi / beta * shape(-1j * nu) * both))
                bwd.append((+1j * nu, -2j * np.pi / beta * shape(+1j * nu) * both))

    def pack(entries):
        keep = [(p, r) for p, r in entries if np.max(np.abs(r)) > _PRUNE]
        if not keep:
            return np.zeros(0, dtype=complex), np.zeros((0, d, d, d, d), dtype=complex)
        return (
            np.array([p for p, _ in keep], dtype=complex),
            np.array([r for _, r in keep], dtype=complex),
        )

    ap, ar = pack(axis)
    fp, fr = pack(fwd)
    bp, br = pack(bwd)
    return CorrelationSet(
        dim=d, axis_poles=ap, axis_res=ar, fwd_poles=fp, fwd_res=fr, bwd_poles=bp, bwd_res=br
    )


def _resolvent_sum(poles, res, y):
    """sum_p res_p / (y - p); y any shape, result y.shape + (d,d,d,d)."""
    y = np.asarray(y, dtype=complex)
    if len(poles) == 0:
        return np.zeros(y.shape + res.shape[1:], dtype=complex)
    weights = 1.0 / (y.reshape(-1)[:, None] - poles[None, :])
    flat = weights @ res.reshape(len(poles), -1)
    return flat.reshape(y.shape + res.shape[1:])


def laplace_forward(cs, y):
    """c_+(y) tensor; analytic for Im y > 0."""
    return _resolvent_sum(cs.axis_poles, cs.axis_res, y) + _resolvent_sum(
        cs.fwd_poles, cs.fwd_res, y
    )


def laplace_backward(cs, y):
    """c_-(y) tensor; analytic for Im y < 0."""
    return -_resolvent_sum(cs.axis_poles, cs.axis_res, y) + _resolvent_sum(
        cs.bwd_poles, cs.bwd_res, y
    )


def laplace_combined_smooth(cs, y):
    """Smooth part of the combined transform c_+ + c_-.

    The axis family cancels rationally and survives only as delta atoms
    (see delta_atoms); this evaluator returns the genuinely smooth
    remainder used for real-axis quadrature.
    """
    return _resolvent_sum(cs.fwd_poles, cs.fwd_res, y) + _resolvent_sum(
        cs.bwd_poles, cs.bwd_res, y
    )


def delta_atoms(cs):
    """List of (y_real, weight tensor) for int dy/(2 pi i) chat(y) G(y).

    Each axis pole contributes -r * G(p): the delta weight of the combined
    transform divided by the 2 pi i measure.
    """
    return [(float(p.real), -cs.axis_res[i]) for i, p in enumerate(cs.axis_poles)]


def correlation_tensor(cs, t):
    """Full time-domain tensor c(t, 0); t scalar or array of any shape.

    Forward family for t >= 0, backward with its sign rule for t < 0; the
    axis family is entire in t and contributes on both sides.
    """
    t = np.asarray(t, dtype=float)
    shape = t.shape
    t = np.atleast_1d(t).ravel()
    d = cs.dim
    out = np.zeros((t.size, d, d, d, d), dtype=complex)
    if len(cs.axis_poles):
        ph = np.exp(-1j * np.outer(t, cs.axis_poles))
        out += (ph @ cs.axis_res.reshape(len(cs.axis_poles), -1)).reshape(out.shape)
    pos = t >= 0
    if np.any(pos) and len(cs.fwd_poles):
        ph = np.exp(-1j * np.outer(t[pos], cs.fwd_poles))
        out[pos] += (ph @ cs.fwd_res.reshape(len(cs.fwd_poles), -1)).reshape(
            (int(pos.sum()),) + out.shape[1:]
        )
    neg = ~pos
    if np.any(neg) and len(cs.bwd_poles):
        ph = np.exp(-1j * np.outer(t[neg], cs.bwd_poles))
        out[neg] -= (ph @ cs.bwd_res.reshape(len(cs.bwd_poles), -1)).reshape(
            (int(neg.sum()),) + out.shape[1:]
        )
    return out.reshape(shape + (d, d, d, d))


def time_correlation(cs, alpha_p, alpha, t):
    """Component c_{alpha' alpha}(t, 0); stationary, so c(t', t) = c(t'-t, 0)."""
    k, l = _pair_index(alpha_p, cs.dim)
    m, n = _pair_index(alpha, cs.dim)
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = np.zeros(t.shape, dtype=complex)
    if len(cs.axis_poles):
        out += np.exp(-1j * np.outer(t, cs.axis_poles)) @ cs.axis_res[:, k, l, m, n]
    pos = t >= 0
    if np.any(pos) and len(cs.fwd_poles):
        out[pos] += np.exp(-1j * np.outer(t[pos], cs.fwd_poles)) @ cs.fwd_res[:, k, l, m, n]
    if np.any(~pos) and len(cs.bwd_poles):
        out[~pos] -= np.exp(-1j * np.outer(t[~pos], cs.bwd_poles)) @ cs.bwd_res[:, k, l, m, n]
    return complex(out[0]) if scalar else out


def ordered_correlation(cs, eta, alpha1, alpha2, t1, t2):
    """Time-ordered kernels c^{(+/-)}_{alpha1 alpha2}(t1, t2).

    c^{(+)} orders the later argument first, c^{(-)} the earlier first;
    equal times use the symmetric theta(0) = 1/2 convention.
    """
    if eta not in (+1, -1):
        raise ValidationError("eta must be +1 or -1, got %r" % (eta,))
    if eta == -1:
        t1, t2 = t2, t1
    if t1 > t2:
        return time_correlation(cs, alpha1, alpha2, t1 - t2)
    if t2 > t1:
        return time_correlation(cs, alpha2, alpha1, t2 - t1)
    return 0.5 * (
        time_correlation(cs, alpha1, alpha2, 0.0) + time_correlation(cs, alpha2, alpha1, 0.0)
    )


def hermiticity_residual(cs, t_grid):
    """max |c(t)^* - c~(-t)| over the grid; ~ swaps and reverses both pairs.

    The kernel of a Hermitian coupling obeys c_{a'a}(t)^* =
    c_{a~ a~'}(-t) with (k,l)~ = (l,k); this is the numerical check the
    stored families must pass regardless of builder.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    fwd = correlation_tensor(cs, t_grid)
    rev = correlation_tensor(cs, -t_grid)
    # component [k,l,m,n] of the tilde side is rev transposed to [n,m,l,k]
    return float(np.max(np.abs(fwd.conj() - rev.transpose(0, 4, 3, 2, 1))))
