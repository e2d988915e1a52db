"""Truncated resolvent chains and their continued-fraction evaluation.

The half-line transforms of the process maps obey a two-sided recursion
in the order q: the order-q object couples down to q-1 with its first
attached argument absorbed, and up to q+1 with one correlation pole
inserted among the attached arguments.  Closing the recursion at q_max
turns it into a finite linear system over every argument tuple reachable
from the requested one.  Two evaluation strategies live here.

chain   enumerate the reachable tuples symbolically and relax the
        closed system by Gauss-Seidel sweeps.  Supports a batch axis on
        the scalar arguments so whole contour lines solve at once.
        Production path.

cf      evaluate ratios of consecutive orders through their nested
        inverse relation, truncating branch sums at h_cut factors per
        level and the nesting at a fixed depth.  Slow per point; used
        to cross-check the chain results and the closed-set identity.
"""

import string
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .core import LaplacePoint, level_grid
from .errors import ConvergenceError, DegenerateArgumentError, ValidationError
from .perms import BranchPath, perm_C

DEG_GUARD = 1e-12
CHAIN_TOL = 1e-13
CHAIN_SWEEPS = 200


@dataclass(frozen=True)
class KrausTensor:
    """Transform of an order-q process map at one argument tuple.

    values[K, L] is indexed by row-major packed level tuples
    K = (k_1 ... k_{q+1}), L = (l_1 ... l_{q+1}).  The scalar argument
    of `point` is the raw strip variable; the row free line omega_{k_1}
    is subtracted inside, so at zero coupling
    values[K, K] = prod_s 1 / (Z+_{s-1} - omega_{k_s}).
    """

    q: int
    dim: int
    point: LaplacePoint
    values: np.ndarray

    def __post_init__(self):
        if self.point.q != self.q:
            raise ValidationError(
                f"KrausTensor: point carries {self.point.q} arguments, expected {self.q}")
        n = self.dim ** (self.q + 1)
        if self.values.shape != (n, n):
            raise ValidationError(
                f"KrausTensor: values shape {self.values.shape} != {(n, n)}")

    def block(self):
        """View with one axis per level label (rows first, then columns)."""
        return self.values.reshape((self.dim,) * (2 * self.q + 2))


@dataclass(frozen=True)
class MatrixRatio:
    """Ratio of the order-q transform against its order q-n suffix.

    n = 0 is the identity, n = q+1 the full transform.  residual is the
    change under one extra nesting level of the evaluator that produced
    it; warning is set when that estimate failed to shrink.
    """

    q: int
    n: int
    dim: int
    point: LaplacePoint
    values: np.ndarray
    residual: float = 0.0
    warning: str = None

    def __post_init__(self):
        if not 0 <= self.n <= self.q + 1:
            raise ValidationError(f"MatrixRatio: order n={self.n} outside [0, {self.q + 1}]")
        m = self.dim ** (self.q + 1)
        if self.values.shape != (m, m):
            raise ValidationError(
                f"MatrixRatio: values shape {self.values.shape} != {(m, m)}")


@dataclass(frozen=True)
class CFContext:
    """One frame of the nested-inverse evaluation.

    q is the chain order of the frame, n the ratio order being built,
    x the scalar strip variable and zs the attached arguments.  h_left
    counts the branch factors still allowed at this level, depth_left
    the nesting levels below.  path records the descent choices, for
    diagnostics and the label shuffles.
    """

    q: int
    n: int
    x: complex
    zs: tuple
    h_cut: int = 2
    h_left: int = 2
    depth_left: int = 8
    level: int = 0
    path: BranchPath = field(default_factory=BranchPath)
    q_cap: int = None

    def __post_init__(self):
        object.__setattr__(self, "x", complex(self.x))
        object.__setattr__(self, "zs", tuple(complex(v) for v in self.zs))
        if len(self.zs) != self.q:
            raise ValidationError(
                f"CFContext: {len(self.zs)} attached arguments for order q={self.q}")
        if not 0 <= self.n <= self.q + 1:
            raise ValidationError(f"CFContext: ratio order n={self.n} outside [0, {self.q + 1}]")
        if self.h_left < 0 or self.depth_left < 0 or self.h_cut < 1:
            raise ValidationError("CFContext: budgets must be non-negative (h_cut >= 1)")
        if self.path.depth != self.level:
            raise ValidationError(
                f"CFContext: path depth {self.path.depth} != level {self.level}")

    def partial_sums(self):
        out = np.empty(self.q + 1, dtype=complex)
        out[0] = self.x
        if self.zs:
            out[1:] = self.x + np.cumsum(np.asarray(self.zs, dtype=complex))
        return out


def _guard_divisors(vals, what):
    bad = np.abs(vals) < DEG_GUARD
    if np.any(bad):
        raise DegenerateArgumentError(
            f"{what} within {DEG_GUARD:g} of a free-propagator line; "
            "shift the contour instead of perturbing")


def free_kraus(q, point, spec):
    """Zero-coupling transform: diagonal of inverse free denominators."""
    d = spec.dim
    psums = point.partial_sums()
    grid = level_grid(d, q + 1)
    omega = spec.omega_array
    den = psums[None, :] - omega[grid]
    _guard_divisors(den, "free denominator")
    diag = 1.0 / np.prod(den, axis=1)
    n = d ** (q + 1)
    values = np.zeros((n, n), dtype=complex)
    values[np.arange(n), np.arange(n)] = diag
    return KrausTensor(q=q, dim=d, point=point, values=values)


def _down_embed(wd, d, q):
    """delta_{k1 l1} embedding of the order q-1 block into order q shape."""
    m = d ** q
    wd = np.asarray(wd)
    lead = wd.shape[:-2]
    out = np.zeros(lead + (d * m, d * m), dtype=complex)
    v = out.reshape(lead + (d, m, d, m))
    for a in range(d):
        v[..., a, :, a, :] = wd
    return out


def _prefix_embed(sub, d, n, q):
    """delta on the first n labels times the order q-n block, order-q shape."""
    dp = d ** n
    dr = d ** (q + 1 - n)
    out = np.zeros((dp * dr, dp * dr), dtype=complex)
    v = out.reshape(dp, dr, dp, dr)
    for a in range(dp):
        v[a, :, a, :] = sub
    return out


@lru_cache(maxsize=None)
def _up_subscripts(q, j):
    # parent row letters R[0..q] label k_1..k_{q+1}, columns L likewise
    R = list(string.ascii_lowercase[: q + 1])
    L = list(string.ascii_lowercase[q + 1 : 2 * q + 2])
    b, a, m = "x", "y", "z"
    crow = [b] + R[1:j] + [m] + R[j:]
    ccol = L[: j - 1] + [a] + L[j - 1 :]
    res_sub = R[0] + b + a + m
    child_sub = "..." + "".join(crow + ccol)
    out_sub = "..." + "".join(R + L)
    return f"{res_sub},{child_sub}->{out_sub}"


def _up_contract(q, j, d, res_p, wc):
    """Order q+1 block contracted down to an order-q contribution.

    The child's first row label and the label at row slot j+1 are summed
    against the pole residue tensor, as is the column label at slot j.
    """
    lead = wc.shape[:-2]
    block = wc.reshape(lead + (d,) * (2 * q + 4))
    out = np.einsum(_up_subscripts(q, j), res_p, block)
    n = d ** (q + 1)
    return out.reshape(lead + (n, n))


def _assemble(q, x, down_val, up_terms, omega, res_f, d):
    """One right-hand-side evaluation of the order-q recursion.

    down_val is the order q-1 block (scalar 1 embedded when q = 0),
    up_terms a list of (slot j, pole index, order q+1 block); the down
    neighbor is evaluated by the caller at its own absorbed point.
    """
    rhs = _down_embed(down_val, d, q)
    for j, pidx, wc in up_terms:
        rhs = rhs + _up_contract(q, j, d, res_f[pidx], wc)
    x = np.asarray(x, dtype=complex)
    den = x[..., None] - omega
    _guard_divisors(den, f"order-{q} scalar argument")
    n = d ** q
    v = rhs.reshape(rhs.shape[:-2] + (d, n, d ** (q + 1)))
    # x may carry batch axes the neighbor blocks lack (or vice versa);
    # the division broadcasts, so the output lead comes from its result
    v = v / den[..., :, None, None]
    return v.reshape(v.shape[:-3] + (d ** (q + 1), d ** (q + 1)))


def hierarchy_rhs(q, point, w_prev, w_next, cs, spec):
    """Single recursion step at one argument tuple.

    w_prev is the order q-1 block at the absorbed point (ignored for
    q = 0), w_next a callable (j, pole_index) -> order q+1 block at the
    inserted point, or None when the order above is truncated away.
    Returns the assembled order-q block.
    """
    d = spec.dim
    if q > 0 and w_prev is None:
        raise ValidationError("hierarchy_rhs: q >= 1 needs the order q-1 block")
    down_val = np.ones((1, 1), dtype=complex) if q == 0 else np.asarray(w_prev)
    poles, res_f = cs.forward_family()
    ups = []
    if w_next is not None:
        for j in range(1, q + 2):
            for pidx in range(len(poles)):
                ups.append((j, pidx, np.asarray(w_next(j, pidx))))
    return _assemble(q, point.z, down_val, ups, spec.omega_array, res_f, d)


class ChainFamily:
    """Closed set of argument tuples reachable from a root tuple.

    Tokens name arguments symbolically: ('z', i) is the i-th original
    attached argument, ('p', k) the k-th forward-family pole.  Down
    moves drop the leading token, up moves insert a pole token, capped
    at order q_max.  Original arguments are only ever consumed from the
    front, so the set of surviving ('z', i) tokens is always a trailing
    window {a..n_z}; `group` records that a, with n_z+1 for pole-only
    states.  States in group a couple only to groups a and a+1, which
    is what lets grid drivers freeze outer lines and re-relax inner
    groups alone.
    """

    def __init__(self, q_max, n_z, n_poles):
        if n_z > q_max:
            raise ValidationError(f"root order {n_z} exceeds q_max={q_max}")
        root = tuple(("z", i) for i in range(1, n_z + 1))
        seen = {root}
        queue = [root]
        while queue:
            toks = queue.pop()
            q = len(toks)
            nxt = []
            if q >= 1:
                nxt.append(toks[1:])
            if q < q_max:
                for j in range(1, q + 2):
                    for k in range(n_poles):
                        nxt.append(toks[: j - 1] + (("p", k),) + toks[j - 1 :])
            for t in nxt:
                if t not in seen:
                    seen.add(t)
                    queue.append(t)
        self.q_max = q_max
        self.n_z = n_z
        self.n_poles = n_poles
        self.states = sorted(seen, key=lambda t: (len(t), t))
        self.index = {t: i for i, t in enumerate(self.states)}
        self.down = [self.index[t[1:]] if t else None for t in self.states]
        self.ups = []
        self.group = []
        for t in self.states:
            q = len(t)
            lst = []
            if q < q_max:
                for j in range(1, q + 2):
                    for k in range(n_poles):
                        child = t[: j - 1] + (("p", k),) + t[j - 1 :]
                        lst.append((j, k, self.index[child]))
            self.ups.append(lst)
            zi = [i for kind, i in t if kind == "z"]
            self.group.append(min(zi) if zi else n_z + 1)

    def __len__(self):
        return len(self.states)

    def token_values(self, zvals, pvals):
        """Per-state token value tuples under the given substitutions."""
        table = []
        for t in self.states:
            table.append(tuple(zvals[i - 1] if kind == "z" else pvals[i]
                               for kind, i in t))
        return table

    def state_x(self, total, zvals, pvals):
        """Scalar argument per state: the conserved total minus its tokens."""
        return [np.asarray(total - sum(tv, 0j), dtype=complex)
                for tv in self.token_values(zvals, pvals)]

    def free_values(self, total, zvals, pvals, spec):
        """Zero-coupling block per state, broadcast over any batch axes."""
        d = spec.dim
        omega = spec.omega_array
        out = []
        for tv, x in zip(self.token_values(zvals, pvals), self.state_x(total, zvals, pvals)):
            q = len(tv)
            psums = [x]
            for v in tv:
                psums.append(psums[-1] + v)
            psums = [np.asarray(p, dtype=complex) for p in psums]
            lead = np.broadcast_shapes(*(p.shape for p in psums))
            grid = level_grid(d, q + 1)
            n = d ** (q + 1)
            diag = np.ones(lead + (n,), dtype=complex)
            for s, p in enumerate(psums):
                den = p[..., None] - omega[grid[:, s]]
                _guard_divisors(den, "free denominator")
                diag = diag / den
            vals = np.zeros(lead + (n, n), dtype=complex)
            idx = np.arange(n)
            vals[..., idx, idx] = diag
            out.append(vals)
        return out

    def relax(self, vals, xs, res_f, spec, groups=None, tol=CHAIN_TOL,
              max_sweeps=CHAIN_SWEEPS):
        """Gauss-Seidel sweeps over the (selected groups of the) family.

        vals is mutated in place; states outside `groups` are treated as
        fixed boundary data.  Returns the final sweep's max relative
        change.  Raises when the sweep cap is hit first.
        """
        d = spec.dim
        omega = spec.omega_array
        active = [i for i in range(len(self.states))
                  if groups is None or self.group[i] in groups]
        # high orders first: their values feed the lower-order updates
        active.sort(key=lambda i: (-len(self.states[i]), self.states[i]))
        delta = np.inf
        for _ in range(max_sweeps):
            delta = 0.0
            worst = None
            for i in active:
                toks = self.states[i]
                q = len(toks)
                down_val = vals[self.down[i]] if q else np.ones((1, 1), dtype=complex)
                ups = [(j, k, vals[ci]) for j, k, ci in self.ups[i]]
                new = _assemble(q, xs[i], down_val, ups, omega, res_f, d)
                scale = np.max(np.abs(new)) + 1e-300
                dev = float(np.max(np.abs(new - vals[i])) / scale)
                if dev > delta:
                    delta, worst = dev, toks
                vals[i] = new
            if delta <= tol:
                return delta
        raise ConvergenceError(
            f"chain relaxation stalled at {delta:.3e} (tol {tol:g}) on state "
            f"{worst}; weaken the coupling or move the contour up")

    def residual(self, vals, xs, res_f, spec):
        """Max relative defect of the fixed point over all states."""
        d = spec.dim
        omega = spec.omega_array
        out = 0.0
        for i, toks in enumerate(self.states):
            q = len(toks)
            down_val = vals[self.down[i]] if q else np.ones((1, 1), dtype=complex)
            ups = [(j, k, vals[ci]) for j, k, ci in self.ups[i]]
            new = _assemble(q, xs[i], down_val, ups, omega, res_f, d)
            scale = np.max(np.abs(new)) + 1e-300
            out = max(out, float(np.max(np.abs(new - vals[i])) / scale))
        return out


@lru_cache(maxsize=32)
def build_family(q_max, n_z, n_poles):
    return ChainFamily(q_max, n_z, n_poles)


def truncated_solve(q_max, point, cs, spec, tol=CHAIN_TOL, max_sweeps=CHAIN_SWEEPS):
    """Solve the closed chain at one argument tuple.

    Returns the transforms along the pure absorption path as a list
    indexed by order: entry q is taken at the point whose leading
    arguments have been absorbed into the scalar.  The last entry sits
    at the requested point itself.
    """
    n_z = point.q
    poles, res_f = cs.forward_family()
    fam = build_family(q_max, n_z, len(poles))
    total = point.z + sum(point.zs)
    xs = fam.state_x(total, point.zs, tuple(poles))
    vals = fam.free_values(total, point.zs, tuple(poles), spec)
    fam.relax(vals, xs, res_f, spec, tol=tol, max_sweeps=max_sweeps)
    out = []
    for q in range(n_z + 1):
        toks = tuple(("z", i) for i in range(n_z - q + 1, n_z + 1))
        idx = fam.index[toks]
        sub = LaplacePoint(complex(xs[idx]), point.zs[n_z - q:])
        out.append(KrausTensor(q=q, dim=spec.dim, point=sub, values=vals[idx]))
    return out


_KRAUS_CACHE = {}


def _round_sig(c):
    c = complex(c)
    return (float(f"{c.real:.12g}"), float(f"{c.imag:.12g}"))


def clear_kraus_cache():
    _KRAUS_CACHE.clear()


def kraus_hat(q, point, cs, spec, q_max=None, method="chain", tol=CHAIN_TOL,
              depth=8, h_cut=2):
    """Memoized transform of the order-q map at one argument tuple.

    method 'chain' relaxes the closed family at q_max; 'cf' evaluates
    the order q+1 ratio by nested inversion, capped at the same q_max.
    Arguments are rounded to 12 significant digits for the cache key.
    """
    if point.q != q:
        raise ValidationError(f"kraus_hat: point carries {point.q} arguments for q={q}")
    if q_max is None:
        q_max = max(q, 2)
    key = (id(cs), id(spec), method, q, q_max, depth if method == "cf" else 0,
           h_cut if method == "cf" else 0, _round_sig(point.z),
           tuple(_round_sig(v) for v in point.zs))
    hit = _KRAUS_CACHE.get(key)
    if hit is not None:
        return hit
    if method == "chain":
        result = truncated_solve(q_max, point, cs, spec, tol=tol)[-1]
    elif method == "cf":
        ratio = cf_evaluate(q, q + 1, point, cs, spec, depth=depth, h_cut=h_cut,
                            q_cap=q_max)
        result = KrausTensor(q=q, dim=spec.dim, point=point, values=ratio.values)
    else:
        raise ValidationError(f"kraus_hat: unknown method {method!r}")
    return _KRAUS_CACHE.setdefault(key, result)


# ---------------------------------------------------------------------------
# nested-inverse (continued fraction) evaluation


def cf_component_A(N, ctx, spec):
    """Diagonal free part of the inverse ratio at this frame.

    Entry K carries prod_{s=1..n} (X+_{s-1} - omega_{k_s}); the empty
    product at n = 0 makes the order-0 ratio exactly the identity.
    """
    if N != ctx.level:
        raise ValidationError(f"cf_component_A: level {N} != context level {ctx.level}")
    d = spec.dim
    psums = ctx.partial_sums()
    grid = level_grid(d, ctx.q + 1)
    diag = np.ones(d ** (ctx.q + 1), dtype=complex)
    for s in range(1, ctx.n + 1):
        fac = psums[s - 1] - spec.omega_array[grid[:, s - 1]]
        _guard_divisors(fac, f"ratio free factor s={s}")
        diag = diag * fac
    return diag


@lru_cache(maxsize=None)
def _branch_subscripts(q, p, j, n):
    rest = q - p  # labels k_{p+2}..k_{q+1}
    K = list(string.ascii_lowercase[:rest])
    M = list(string.ascii_lowercase[rest : 2 * rest])
    b, a, c = "x", "y", "z"
    res_sub = K[0] + b + a + c
    crow = [b] + K[1 : j - p - 1] + [c] + K[j - p - 1 :]
    ccol = M[: j - p - 2] + [a] + M[j - p - 2 :]
    child_sub = "".join(crow + ccol)
    vec_subs = [K[s - (p + 2)] for s in range(p + 3, n + 1)]
    out_sub = "".join(K + M)
    return res_sub, child_sub, vec_subs, out_sub


def _branch_factor(ctx, p, j, res_p, child_ratio, spec):
    """Coupling matrix of one (p, j, pole) branch at the current frame.

    Diagonal on the first p+1 labels, free factors on slots p+3..n,
    the pole residue contracted against three child labels.  child_ratio
    is the next-level ratio matrix.
    """
    d = spec.dim
    q, n = ctx.q, ctx.n
    psums = ctx.partial_sums()
    rest = q - p
    res_sub, child_sub, vec_subs, out_sub = _branch_subscripts(q, p, j, n)
    ops = [res_p, child_ratio.reshape((d,) * (2 * (q - p + 1)))]
    subs = [res_sub, child_sub]
    for s, letter in zip(range(p + 3, n + 1), vec_subs):
        ops.append(psums[s - 1] - spec.omega_array)
        subs.append(letter)
    core = np.einsum(",".join(subs) + "->" + out_sub, *ops)
    dr = d ** rest
    core = core.reshape(dr, dr)
    dp = d ** (p + 1)
    out = np.zeros((dp * dr, dp * dr), dtype=complex)
    v = out.reshape(dp, dr, dp, dr)
    for t in range(dp):
        v[t, :, t, :] = core
    return out


def cf_component_B_apply(N, ctx, cs, spec, rinv_next):
    """Branch sum of the inverse-ratio relation at this frame.

    rinv_next(child_ctx) must return the INVERSE ratio matrix for any
    requested frame; child frames descend one nesting level with a
    fresh h budget, same-frame tails keep the level and spend one h.
    The pole sum runs over the forward family with closed-contour
    weight, hence the minus sign on the residues.
    """
    if N != ctx.level:
        raise ValidationError(f"cf_component_B_apply: level {N} != context level {ctx.level}")
    d = spec.dim
    q, n = ctx.q, ctx.n
    poles, res_f = cs.forward_family()
    psums = ctx.partial_sums()
    size = d ** (q + 1)
    total = np.zeros((size, size), dtype=complex)
    for p in range(-1, n - 1):
        for j in range(p + 2, q + 2):
            child_q = q - p
            if ctx.q_cap is not None and child_q > ctx.q_cap:
                continue
            tail_ctx = replace(ctx, n=j, h_left=ctx.h_left - 1)
            tail = rinv_next(tail_ctx)
            dropped = ctx.zs[p + 1:]
            for pidx in range(len(poles)):
                pole = poles[pidx]
                ext = dropped + (pole,)
                child_zs = tuple(ext[perm_C(j - p - 1, q - p - 1, i) - 1]
                                 for i in range(1, q - p + 1))
                child_ctx = CFContext(
                    q=child_q, n=j - p, x=psums[p + 1] - pole, zs=child_zs,
                    h_cut=ctx.h_cut, h_left=ctx.h_cut,
                    depth_left=ctx.depth_left - 1, level=N + 1,
                    path=ctx.path.extended(N + 1 if not ctx.path.ms else ctx.path.ms[-1] + 1, p, j),
                    q_cap=ctx.q_cap)
                child_rinv = rinv_next(child_ctx)
                try:
                    child_ratio = np.linalg.inv(child_rinv)
                except np.linalg.LinAlgError:
                    raise ConvergenceError(
                        f"singular ratio inverse at nesting level {N + 1} "
                        f"(q={child_q}, n={j - p})")
                factor = _branch_factor(ctx, p, j, -res_f[pidx], child_ratio, spec)
                total = total + factor @ tail
    return total


def cf_evaluate(q, j0, point, cs, spec, depth=8, h_cut=2, q_cap=None,
                tol=CHAIN_TOL):
    """Order (q, j0) ratio by nested inversion.

    Evaluates at the requested depth and one and two levels shallower;
    the residual is the max change over the last deepening, with a
    warning attached when it failed to shrink.  q_cap drops branches
    whose child order exceeds it, matching a chain closed at q_max.
    """
    if point.q != q:
        raise ValidationError(f"cf_evaluate: point carries {point.q} arguments for q={q}")
    if depth < 1:
        raise ValidationError("cf_evaluate: depth must be >= 1")
    memo = {}

    def rinv(ctx):
        key = (ctx.q, ctx.n, _round_sig(ctx.x), tuple(_round_sig(v) for v in ctx.zs),
               ctx.h_left, ctx.depth_left)
        hit = memo.get(key)
        if hit is not None:
            return hit
        diag = cf_component_A(ctx.level, ctx, spec)
        val = np.diag(diag)
        if ctx.h_left > 0 and ctx.depth_left > 0:
            val = val + cf_component_B_apply(ctx.level, ctx, cs, spec, rinv)
        return memo.setdefault(key, val)

    def ratio_at(d_left):
        ctx = CFContext(q=q, n=j0, x=point.z, zs=point.zs, h_cut=h_cut,
                        h_left=h_cut, depth_left=d_left, q_cap=q_cap)
        m = rinv(ctx)
        try:
            return np.linalg.inv(m)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular ratio inverse at nesting level 0")

    r_now = ratio_at(depth)
    residual = np.inf
    warning = None
    if depth >= 1:
        r_prev = ratio_at(depth - 1)
        residual = float(np.max(np.abs(r_now - r_prev)))
    if depth >= 2:
        r_prev2 = ratio_at(depth - 2)
        before = float(np.max(np.abs(r_prev - r_prev2)))
        if residual > before and residual > 64 * np.finfo(float).eps:
            warning = (f"deepening did not contract: step {residual:.3e} "
                       f"after {before:.3e}; raise depth or h_cut with care")
    return MatrixRatio(q=q, n=j0, dim=spec.dim, point=point, values=r_now,
                       residual=residual, warning=warning)


def ratio_from_kraus(w_q, w_sub, n):
    """Ratio built directly from two transforms per its definition.

    w_sub must be the order q-n transform at the n-fold absorbed point;
    pass None for n = q+1 where the denominator is the scalar unit.
    """
    q, d = w_q.q, w_q.dim
    if not 0 <= n <= q + 1:
        raise ValidationError(f"ratio_from_kraus: n={n} outside [0, {q + 1}]")
    if n == q + 1:
        emb = np.eye(d ** (q + 1), dtype=complex)
    else:
        if w_sub is None or w_sub.q != q - n:
            raise ValidationError("ratio_from_kraus: denominator order mismatch")
        psums = w_q.point.partial_sums()
        want = psums[n]
        if abs(w_sub.point.z - want) > 1e-9 or \
                any(abs(a - b) > 1e-9 for a, b in zip(w_sub.point.zs, w_q.point.zs[n:])):
            raise ValidationError("ratio_from_kraus: denominator point mismatch")
        emb = _prefix_embed(w_sub.values, d, n, q)
    vals = w_q.values @ np.linalg.inv(emb)
    return MatrixRatio(q=q, n=n, dim=d, point=w_q.point, values=vals)
