import warnings

import numpy as np
import pytest

from krauscf.core import DensityMatrix, LaplacePoint, SystemSpec
from krauscf.correlations import SpectralDensity, build_correlations
from krauscf.cfengine import KrausTensor, free_kraus
from krauscf.errors import ValidationError
from krauscf.oracle import compare, dyson_density
from krauscf.reconstruction import (
    AssemblyResult,
    ContourSpec,
    adjoint_kraus,
    assemble_density,
    default_gamma,
    grid_reach,
    pairing_sum,
)

TWO_LEVEL = SystemSpec(dim=2, omega=(0.0, 1.0), transitions=((2, 1),))
DETUNED = SystemSpec(dim=2, omega=(0.0, 1.15), transitions=((2, 1),))

MIXED = DensityMatrix.from_matrix(
    np.array([[0.3, 0.25 - 0.1j], [0.25 + 0.1j, 0.7]]))
EXCITED = DensityMatrix.from_matrix(np.array([[0.0, 0.0], [0.0, 1.0]]))


def axis_modes():
    sd = SpectralDensity(kind="discrete-modes",
                         modes=((0.9, {(2, 1): 0.18}), (1.15, {(2, 1): 0.12})))
    return build_correlations(sd, TWO_LEVEL)


def thermal_modes():
    sd = SpectralDensity(kind="discrete-modes",
                         modes=((0.85, {(2, 1): 0.16}), (1.2, {(2, 1): 0.1})),
                         beta=2.4)
    return build_correlations(sd, TWO_LEVEL)


def lorentzian(beta=float("inf")):
    sd = SpectralDensity(kind="lorentzian-sum",
                         terms=((1.0, 0.35, {(2, 1): 0.25}),), beta=beta)
    return build_correlations(sd, DETUNED)


def quiet_assemble(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return assemble_density(*args, **kwargs)


def max_dev(states_a, states_b):
    return max(np.max(np.abs(a.entries - b.entries))
               for a, b in zip(states_a, states_b))


def two_pole_excited(ts, g=0.25, center=1.0, kappa=0.35, we=1.15):
    # amplitude model for one excitation against a single Lorentzian
    # line: roots of (z - we)(z - (center - i kappa)) = g^2
    b = we + (center - 1j * kappa)
    disc = np.sqrt((we - (center - 1j * kappa)) ** 2 + 4 * g * g)
    zp = (b + disc) / 2
    zm = (b - disc) / 2
    ap = (zp - (center - 1j * kappa)) / (zp - zm)
    am = (zm - (center - 1j * kappa)) / (zm - zp)
    return np.abs(ap * np.exp(-1j * zp * ts) + am * np.exp(-1j * zm * ts)) ** 2


class TestContourSpec:
    def test_defaults_clear_floor(self):
        cs = axis_modes()
        for q in (0, 1, 2):
            c = ContourSpec.defaults(cs, q, TWO_LEVEL)
            c.validate(q)
            assert len(c.nodes) == max(q, 1) + 1 or q == 0

    def test_width_tracks_exchange_reach(self):
        on = ContourSpec.defaults(lorentzian(), 1, DETUNED)
        off = ContourSpec.defaults(axis_modes(), 1, TWO_LEVEL)
        assert grid_reach(lorentzian(), DETUNED) >= 24.0
        assert grid_reach(axis_modes(), TWO_LEVEL) == 0.0
        assert on.half_width > off.half_width + 20.0

    def test_rejects_short_tuples(self):
        c = ContourSpec(heights=(1.0,), half_width=30.0, nodes=(64,))
        with pytest.raises(ValidationError):
            c.validate(1)

    def test_rejects_nonpositive_geometry(self):
        with pytest.raises(ValidationError):
            ContourSpec(heights=(0.0, 1.0), half_width=30.0,
                        nodes=(64, 64)).validate(1)
        with pytest.raises(ValidationError):
            ContourSpec(heights=(1.0, 1.0), half_width=-2.0,
                        nodes=(64, 64)).validate(1)

    def test_rejects_line_below_floor(self):
        c = ContourSpec(heights=(0.5, 0.1), half_width=30.0, nodes=(64, 64),
                        gamma=1.0)
        with pytest.raises(ValidationError):
            c.validate(1)

    def test_rejects_unknown_rule(self):
        c = ContourSpec(heights=(2.0,), half_width=30.0, nodes=(64,),
                        rule="simpson")
        with pytest.raises(ValidationError):
            c.panel_order()

    def test_line_geometry(self):
        c = ContourSpec(heights=(1.0, 0.5), half_width=20.0, nodes=(64, 32))
        u, w = c.line(1, 1)
        assert np.allclose(u.imag, 1.5)
        assert np.max(np.abs(u.real)) < 20.0
        assert abs(np.sum(w).real - 40.0) < 1e-9
        assert len(u) >= 32


class TestPairingStructure:
    def test_identity_pairing_slots(self):
        term = pairing_sum(2, (1, 2), (1, 2))
        assert term.a_slots == (1, 2)
        assert term.b_slots == (1, 2)
        assert term.weight == pytest.approx(0.5)
        assert term.c_indices == ((2, 1, 1, 2), (3, 2, 2, 3))

    def test_swapped_pairing_slots(self):
        term = pairing_sum(2, (2, 1), (1, 2))
        assert term.a_slots == (2, 1)
        assert term.c_indices == ((2, 1, 2, 3), (3, 2, 1, 2))

    def test_rejects_non_permutation(self):
        with pytest.raises(ValidationError):
            pairing_sum(2, (1, 1), (1, 2))

    def test_adjoint_is_involution(self):
        pt = LaplacePoint(0.4 + 0.9j, (0.2 + 1.1j,))
        w = free_kraus(1, pt, TWO_LEVEL)
        back = adjoint_kraus(adjoint_kraus(w))
        assert back.point.z == w.point.z
        assert np.array_equal(back.values, w.values)

    def test_adjoint_mirrors_arguments(self):
        pt = LaplacePoint(0.4 + 0.9j, (0.2 + 1.1j,))
        w = free_kraus(1, pt, TWO_LEVEL)
        adj = adjoint_kraus(w)
        assert adj.point.z == np.conj(pt.z)
        assert adj.point.zs[0] == np.conj(pt.zs[0])


class TestAssemblyValidation:
    def test_rejects_bad_order(self):
        cs = axis_modes()
        for q in (-1, 3, 1.5):
            with pytest.raises(ValidationError):
                assemble_density(MIXED, [0.0, 1.0], q, None, cs, TWO_LEVEL)

    def test_rejects_bad_time_grid(self):
        cs = axis_modes()
        with pytest.raises(ValidationError):
            assemble_density(MIXED, [], 1, None, cs, TWO_LEVEL)
        with pytest.raises(ValidationError):
            assemble_density(MIXED, [-0.5, 1.0], 1, None, cs, TWO_LEVEL)

    def test_rejects_dim_mismatch(self):
        cs = axis_modes()
        bad = DensityMatrix.from_matrix(np.eye(3) / 3.0)
        with pytest.raises(ValidationError):
            assemble_density(bad, [0.0, 1.0], 1, None, cs, TWO_LEVEL)

    def test_rejects_undersized_contour(self):
        cs = axis_modes()
        c = ContourSpec(heights=(2.0,), half_width=30.0, nodes=(64,))
        with pytest.raises(ValidationError):
            assemble_density(MIXED, [0.0, 1.0], 1, c, cs, TWO_LEVEL)

    def test_order2_table_budget_guard(self):
        cs = lorentzian()
        base = ContourSpec.defaults(cs, 2, DETUNED)
        huge = ContourSpec(heights=base.heights, half_width=base.half_width,
                           nodes=(8 * base.nodes[0],) + base.nodes[1:],
                           gamma=base.gamma)
        with pytest.raises(ValidationError):
            quiet_assemble(EXCITED, [0.0, 1.0], 2, huge, cs, DETUNED)


class TestAssemblyAgainstReferences:
    def test_zero_coupling_is_free_evolution(self):
        sd = SpectralDensity(kind="discrete-modes", modes=((0.9, {(2, 1): 0.0}),))
        cs = build_correlations(sd, TWO_LEVEL)
        ts = np.linspace(0.0, 3.0, 7)
        res = quiet_assemble(MIXED, ts, 1, None, cs, TWO_LEVEL)
        w = TWO_LEVEL.omega_array
        for t, st in zip(ts, res.states):
            free = np.exp(-1j * np.subtract.outer(w, w) * t) * MIXED.entries
            assert np.max(np.abs(st.entries - free)) < 1e-10

    def test_result_shape_and_t0_defect(self):
        cs = axis_modes()
        ts = np.linspace(0.5, 2.0, 4)  # grid without t = 0
        res = quiet_assemble(MIXED, ts, 1, None, cs, TWO_LEVEL)
        assert isinstance(res, AssemblyResult)
        assert np.array_equal(res.t, ts)
        assert len(res.states) == 4
        assert res.trunc_est.shape == (4,)
        assert res.quad_resid.shape == (4,)
        assert res.t0_dev < 1e-5

    def test_order1_matches_series_oracle_on_axis(self):
        cs = axis_modes()
        ts = np.linspace(0.0, 3.0, 13)
        res = quiet_assemble(MIXED, ts, 1, None, cs, TWO_LEVEL)
        ref = dyson_density(TWO_LEVEL, cs, MIXED, 1, ts, h=3.0 / 480)
        assert max_dev(res.states, ref) < 1e-5

    def test_order1_lorentzian_matches_amplitude_model(self):
        cs = lorentzian()
        ts = np.linspace(0.0, 6.0, 25)
        res = quiet_assemble(EXCITED, ts, 1, None, cs, DETUNED)
        pee = two_pole_excited(ts)
        ee = np.array([s.entries[1, 1].real for s in res.states])
        gg = np.array([s.entries[0, 0].real for s in res.states])
        eg = np.array([s.entries[0, 1] for s in res.states])
        assert np.max(np.abs(ee - pee)) < 5e-5
        assert np.max(np.abs(gg - (1.0 - pee))) < 5e-5
        assert np.max(np.abs(eg)) < 1e-12
        assert res.t0_dev < 1e-6

    def test_order1_thermal_lorentzian_matches_series_oracle(self):
        cs = lorentzian(beta=3.0)
        assert len(cs.fwd_poles) > 2  # pair lines plus a Matsubara tail
        ts = np.linspace(0.0, 3.0, 13)
        res = quiet_assemble(EXCITED, ts, 1, None, cs, DETUNED)
        ref = dyson_density(DETUNED, cs, EXCITED, 1, ts, h=3.0 / 480)
        assert max_dev(res.states, ref) < 1e-5

    def test_order2_thermal_modes_match_series_oracle(self):
        cs = thermal_modes()
        ts = np.linspace(0.0, 2.0, 5)
        g = default_gamma(cs)
        c = ContourSpec(heights=(1.25 * g, 0.25 * g, 0.25 * g),
                        half_width=91.0, nodes=(400, 160, 112), gamma=g)
        res = quiet_assemble(MIXED, ts, 2, c, cs, TWO_LEVEL)
        ref = dyson_density(TWO_LEVEL, cs, MIXED, 2, ts, h=2.0 / 160)
        # the reference carries O(h^2) stepping error of its own
        assert max_dev(res.states, ref) < 5e-4

    def test_order2_term_is_small_correction(self):
        cs = thermal_modes()
        ts = np.linspace(0.0, 2.0, 5)
        g = default_gamma(cs)
        c = ContourSpec(heights=(1.25 * g, 0.25 * g, 0.25 * g),
                        half_width=91.0, nodes=(400, 160, 112), gamma=g)
        res = quiet_assemble(MIXED, ts, 2, c, cs, TWO_LEVEL)
        assert np.all(res.trunc_est <= 0.05)
        assert res.trunc_est[0] < 1e-12


class TestAssemblyInvariants:
    def test_states_hermitian_unit_trace_positive(self):
        cs = lorentzian(beta=3.0)
        ts = np.linspace(0.0, 4.0, 9)
        res = quiet_assemble(MIXED, ts, 1, None, cs, DETUNED)
        for st in res.states:
            m = st.entries
            assert np.max(np.abs(m - m.conj().T)) < 1e-14
            assert abs(np.trace(m).real - 1.0) < 2e-5
            assert np.min(np.linalg.eigvalsh(m)) > -1e-5

    def test_node_doubling_is_converged(self):
        cs = lorentzian()
        ts = np.linspace(0.0, 6.0, 13)
        base = ContourSpec.defaults(cs, 1, DETUNED)
        dbl = ContourSpec(heights=base.heights, half_width=base.half_width,
                          nodes=tuple(2 * n for n in base.nodes),
                          gamma=base.gamma)
        ra = quiet_assemble(EXCITED, ts, 1, base, cs, DETUNED)
        rb = quiet_assemble(EXCITED, ts, 1, dbl, cs, DETUNED)
        assert max_dev(ra.states, rb.states) < 1e-6

    def test_exchange_density_rides_node_knob(self):
        # doubling the outer nodes must refine the pairing grid too,
        # so the refined run has to stay hermitian and normalized
        cs = lorentzian()
        base = ContourSpec.defaults(cs, 1, DETUNED)
        dbl = ContourSpec(heights=base.heights, half_width=base.half_width,
                          nodes=(2 * base.nodes[0], base.nodes[1]),
                          gamma=base.gamma)
        res = quiet_assemble(EXCITED, [0.0, 2.0], 1, dbl, cs, DETUNED)
        m = res.states[-1].entries
        assert abs(np.trace(m).real - 1.0) < 2e-5

    def test_compare_helper_round_trip(self):
        cs = axis_modes()
        ts = np.linspace(0.0, 1.0, 3)
        res = quiet_assemble(MIXED, ts, 1, None, cs, TWO_LEVEL)
        out = compare(ts, res.states, ts, res.states)
        assert out["max_abs_dev"] == 0.0
