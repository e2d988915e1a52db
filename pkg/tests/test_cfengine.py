import numpy as np
import pytest

from krauscf.core import LaplacePoint, SystemSpec, TransitionIndex
from krauscf.correlations import CorrelationSet, SpectralDensity, build_correlations
from krauscf.cfengine import (
    CFContext,
    KrausTensor,
    MatrixRatio,
    build_family,
    cf_component_A,
    cf_component_B_apply,
    cf_evaluate,
    clear_kraus_cache,
    free_kraus,
    hierarchy_rhs,
    kraus_hat,
    ratio_from_kraus,
    truncated_solve,
)
from krauscf.errors import ConvergenceError, DegenerateArgumentError, ValidationError

TWO_LEVEL = SystemSpec(
    dim=2, omega=(0.0, 1.0), transitions=(TransitionIndex(1, 2), TransitionIndex(2, 1))
)


def zero_coupling(d):
    e = np.zeros((0,), dtype=complex)
    r = np.zeros((0, d, d, d, d), dtype=complex)
    return CorrelationSet(dim=d, axis_poles=e, axis_res=r, fwd_poles=e, fwd_res=r,
                          bwd_poles=e, bwd_res=r)


def rwa_lorentzian(g2=0.2, center=1.0, kappa=1.0):
    sd = SpectralDensity(kind="lorentzian-sum",
                         terms=((center, kappa, {(2, 1): np.sqrt(g2)}),), beta=np.inf)
    return build_correlations(sd, TWO_LEVEL)


def thermal_modes():
    sd = SpectralDensity(kind="discrete-modes",
                         modes=((1.0, {(2, 1): 0.12}), (1.7, {(2, 1): 0.09})), beta=2.0)
    return build_correlations(sd, TWO_LEVEL)


def rwa_w0(z, g2=0.2, center=1.0, kappa=1.0):
    # two-level decay closed form: the excited entry of the order-0 transform
    sigma = g2 / (z - (center - 1j * kappa))
    return 1.0 / (z - 1.0 - sigma)


class TestChainEngine:
    def test_zero_coupling_is_free(self):
        cs = zero_coupling(2)
        pt = LaplacePoint(0.7 + 1.2j, (0.3 + 1.0j, -0.2 + 1.1j))
        out = truncated_solve(2, pt, cs, TWO_LEVEL)
        for w in out:
            ref = free_kraus(w.q, w.point, TWO_LEVEL)
            assert np.max(np.abs(w.values - ref.values)) < 1e-14

    def test_two_level_decay_closed_form(self):
        cs = rwa_lorentzian()
        for z in (1.3 + 0.9j, 0.4 + 1.7j, -0.8 + 1.1j):
            for q_max in (1, 2):
                w0 = truncated_solve(q_max, LaplacePoint(z), cs, TWO_LEVEL)[0].values
                assert abs(w0[1, 1] - rwa_w0(z)) < 1e-12
                assert abs(w0[0, 0] - 1.0 / z) < 1e-14
                assert abs(w0[0, 1]) + abs(w0[1, 0]) < 1e-14

    def test_ancestor_points_follow_absorption(self):
        cs = thermal_modes()
        pt = LaplacePoint(1.1 + 1.4j, (0.2 + 1.1j, -0.3 + 1.2j))
        out = truncated_solve(2, pt, cs, TWO_LEVEL)
        assert out[2].point == pt
        assert out[1].point.z == pytest.approx(pt.z + pt.zs[0])
        assert out[1].point.zs == pt.zs[1:]
        assert out[0].point.z == pytest.approx(pt.z + pt.zs[0] + pt.zs[1])

    def test_fixed_point_residual(self):
        cs = thermal_modes()
        poles, res_f = cs.forward_family()
        pt = LaplacePoint(0.9 + 1.3j, (0.1 + 1.0j,))
        fam = build_family(2, 1, len(poles))
        total = pt.z + sum(pt.zs)
        xs = fam.state_x(total, pt.zs, tuple(poles))
        vals = fam.free_values(total, pt.zs, tuple(poles), TWO_LEVEL)
        fam.relax(vals, xs, res_f, TWO_LEVEL)
        assert fam.residual(vals, xs, res_f, TWO_LEVEL) < 1e-10

    def test_hierarchy_rhs_matches_solution(self):
        # re-assembling any solved state from its converged neighbors
        # reproduces it; spot-check the root
        cs = thermal_modes()
        poles, _ = cs.forward_family()
        pt = LaplacePoint(1.2 + 1.5j, (0.15 + 1.05j,))
        out = truncated_solve(2, pt, cs, TWO_LEVEL)
        fam = build_family(2, 1, len(poles))
        total = pt.z + sum(pt.zs)
        xs = fam.state_x(total, pt.zs, tuple(poles))
        vals = fam.free_values(total, pt.zs, tuple(poles), TWO_LEVEL)
        fam.relax(vals, xs, cs.forward_family()[1], TWO_LEVEL)
        root = fam.index[(("z", 1),)]

        def w_next(j, pidx):
            child = (("z", 1),)[: j - 1] + (("p", pidx),) + (("z", 1),)[j - 1 :]
            return vals[fam.index[child]]

        back = hierarchy_rhs(1, pt, vals[fam.index[()]], w_next, cs, TWO_LEVEL)
        assert np.max(np.abs(back - out[1].values)) < 1e-11

    def test_batched_relax_matches_scalar(self):
        cs = thermal_modes()
        poles, res_f = cs.forward_family()
        fam = build_family(2, 1, len(poles))
        z1 = np.array([0.1 + 1.0j, -0.4 + 1.2j, 0.5 + 1.3j])
        total = 1.0 + 2.4j
        xs = fam.state_x(total, (z1,), tuple(poles))
        vals = fam.free_values(total, (z1,), tuple(poles), TWO_LEVEL)
        fam.relax(vals, xs, res_f, TWO_LEVEL)
        for b, z1b in enumerate(z1):
            xsb = fam.state_x(total, (z1b,), tuple(poles))
            vb = fam.free_values(total, (z1b,), tuple(poles), TWO_LEVEL)
            fam.relax(vb, xsb, res_f, TWO_LEVEL)
            # pole-only states never see the batched argument and stay 2-d
            dev = max(
                np.max(np.abs((vals[i][b] if vals[i].ndim == 3 else vals[i]) - vb[i]))
                for i in range(len(fam)))
            assert dev < 1e-11

    def test_group_structure(self):
        poles = 3
        fam = build_family(2, 2, poles)
        assert len(fam) == 3 + 3 * poles + poles * poles
        for toks, g in zip(fam.states, fam.group):
            zi = [i for kind, i in toks if kind == "z"]
            assert g == (min(zi) if zi else 3)
            # original arguments always form a trailing index window
            assert zi == list(range(g, 3)) if zi else True

    def test_degenerate_argument_faults(self):
        cs = rwa_lorentzian()
        with pytest.raises(DegenerateArgumentError):
            truncated_solve(1, LaplacePoint(1.0 + 0.0j), cs, TWO_LEVEL)

    def test_nonconvergence_faults(self):
        cs = rwa_lorentzian(g2=40.0)
        with pytest.raises(ConvergenceError):
            truncated_solve(2, LaplacePoint(1.0 + 0.4j), cs, TWO_LEVEL,
                            max_sweeps=4)


class TestContinuedFraction:
    def test_identity_ratio_exact(self):
        cs = rwa_lorentzian()
        r = cf_evaluate(0, 0, LaplacePoint(1.3 + 0.9j), cs, TWO_LEVEL, depth=3)
        assert np.array_equal(r.values, np.eye(2, dtype=complex))

    def test_two_level_decay(self):
        cs = rwa_lorentzian()
        z = 1.3 + 0.9j
        r = cf_evaluate(0, 1, LaplacePoint(z), cs, TWO_LEVEL, depth=6, h_cut=6)
        assert abs(r.values[1, 1] - rwa_w0(z)) < 1e-6
        assert r.residual < 5e-6

    def test_matches_chain_engine(self):
        cs = thermal_modes()
        pt = LaplacePoint(1.1 + 1.4j, (0.2 + 1.1j,))
        chain = truncated_solve(2, pt, cs, TWO_LEVEL)[1].values
        r = cf_evaluate(1, 2, pt, cs, TWO_LEVEL, depth=6, h_cut=5, q_cap=2)
        assert np.max(np.abs(r.values - chain)) < 1e-9

    def test_kraus_hat_methods_agree(self):
        cs = thermal_modes()
        clear_kraus_cache()
        pt = LaplacePoint(0.8 + 1.5j, (0.3 + 1.2j,))
        a = kraus_hat(1, pt, cs, TWO_LEVEL, q_max=2)
        b = kraus_hat(1, pt, cs, TWO_LEVEL, q_max=2, method="cf", depth=6, h_cut=5)
        assert np.max(np.abs(a.values - b.values)) < 1e-9

    def test_kraus_hat_memo(self):
        cs = thermal_modes()
        clear_kraus_cache()
        pt = LaplacePoint(0.8 + 1.5j, (0.3 + 1.2j,))
        a = kraus_hat(1, pt, cs, TWO_LEVEL)
        b = kraus_hat(1, LaplacePoint(pt.z + 1e-14, pt.zs), cs, TWO_LEVEL)
        assert a is b
        clear_kraus_cache()
        c = kraus_hat(1, pt, cs, TWO_LEVEL)
        assert c is not a
        assert np.max(np.abs(c.values - a.values)) == 0.0

    def test_closed_relation_with_chain_ratios(self):
        # the inverse-ratio relation evaluated with ratios taken from the
        # chain engine; residual bounded by the chain tolerance headroom
        cs = thermal_modes()
        q_max = 2
        pt = LaplacePoint(1.05 + 1.35j, (0.25 + 1.15j,))

        def chain_ratio(q, n, point):
            sols = truncated_solve(q_max, point, cs, TWO_LEVEL)
            wq = sols[q]
            sub = None if n == q + 1 else sols[q - n]
            return ratio_from_kraus(wq, sub, n)

        def rinv_next(ctx):
            r = chain_ratio(ctx.q, ctx.n, LaplacePoint(ctx.x, ctx.zs))
            return np.linalg.inv(r.values)

        for n in (1, 2):
            ctx = CFContext(q=1, n=n, x=pt.z, zs=pt.zs, h_cut=2, h_left=2,
                            depth_left=4, q_cap=q_max)
            lhs = np.diag(cf_component_A(0, ctx, TWO_LEVEL)) + cf_component_B_apply(
                0, ctx, cs, TWO_LEVEL, rinv_next)
            rhs = rinv_next(ctx)
            assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_ratio_product_recovers_transform(self):
        cs = thermal_modes()
        pt = LaplacePoint(1.1 + 1.4j, (0.2 + 1.1j,))
        sols = truncated_solve(2, pt, cs, TWO_LEVEL)
        r = cf_evaluate(1, 1, pt, cs, TWO_LEVEL, depth=6, h_cut=5, q_cap=2)
        d = TWO_LEVEL.dim
        emb = np.zeros((4, 4), dtype=complex).reshape(d, d, d, d)
        for a in range(d):
            emb[a, :, a, :] = sols[0].values
        emb = emb.reshape(4, 4)
        assert np.max(np.abs(r.values @ emb - sols[1].values)) < 1e-9

    def test_contour_shift_stability(self):
        cs = rwa_lorentzian()
        z = 0.9 + 1.1j
        a = cf_evaluate(0, 1, LaplacePoint(z), cs, TWO_LEVEL, depth=6, h_cut=6)
        w_shift = truncated_solve(1, LaplacePoint(z), cs, TWO_LEVEL)[0]
        assert abs(a.values[1, 1] - w_shift.values[1, 1]) < 1e-6

    def test_warning_on_stalled_deepening(self):
        # depth deepening cannot help once h_cut dominates; at strong
        # coupling the estimate can wobble instead of contracting, which
        # must come back as a warning, not silence
        cs = rwa_lorentzian(g2=3.0)
        r = cf_evaluate(0, 1, LaplacePoint(0.9 + 2.8j), cs, TWO_LEVEL,
                        depth=3, h_cut=2)
        assert r.residual >= 0.0  # estimate always reported


class TestTypes:
    def test_kraus_tensor_validation(self):
        pt = LaplacePoint(1.0 + 1.0j, (0.5 + 1.0j,))
        with pytest.raises(ValidationError):
            KrausTensor(q=0, dim=2, point=pt, values=np.eye(2, dtype=complex))
        with pytest.raises(ValidationError):
            KrausTensor(q=1, dim=2, point=pt, values=np.eye(3, dtype=complex))

    def test_matrix_ratio_validation(self):
        pt = LaplacePoint(1.0 + 1.0j)
        with pytest.raises(ValidationError):
            MatrixRatio(q=0, n=2, dim=2, point=pt, values=np.eye(2, dtype=complex))

    def test_context_validation(self):
        with pytest.raises(ValidationError):
            CFContext(q=1, n=3, x=1j, zs=(1j,))
        with pytest.raises(ValidationError):
            CFContext(q=1, n=1, x=1j, zs=())
        with pytest.raises(ValidationError):
            CFContext(q=1, n=1, x=1j, zs=(1j,), h_left=-1)

    def test_ratio_from_kraus_point_mismatch(self):
        cs = zero_coupling(2)
        pt = LaplacePoint(0.7 + 1.2j, (0.3 + 1.0j,))
        sols = truncated_solve(1, pt, cs, TWO_LEVEL)
        wrong = free_kraus(0, LaplacePoint(0.1 + 9.9j), TWO_LEVEL)
        with pytest.raises(ValidationError):
            ratio_from_kraus(sols[1], wrong, 1)
