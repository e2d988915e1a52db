"""Index permutations for the continued-fraction label bookkeeping.

Branch expansions reorder argument tuples and label arrays in a rigid
combinatorial pattern.  Everything here acts on 1-based positions and
returns 1-based positions.  Four families:

  perm_C  insertion map: where each slot of a child tuple reads from
          after a new entry (stored at the end) is inserted at slot j.
  perm_D  row-label shuffle across one descent level.
  perm_E  column-label shuffle across one descent level.
  perm_F  accumulated insertion maps along a whole descent path.

The level data (which factor descended, at which slot pair) comes from
a BranchPath.  Level 0 has special reduced forms with narrow domains;
out-of-domain arguments are faults, not identities.
"""

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class BranchPath:
    """Descent choices, one triple per level.

    ms[t-1] is the factor index m_t at which level t descended, ps and
    js the slot pair (p, j) of that factor.  Levels are 1-based.
    """

    ms: tuple = ()
    ps: tuple = ()
    js: tuple = ()

    def __post_init__(self):
        if not (len(self.ms) == len(self.ps) == len(self.js)):
            raise ValidationError("BranchPath: ms, ps, js lengths differ")
        prev = 0
        for t, (m, p, j) in enumerate(zip(self.ms, self.ps, self.js), start=1):
            if m <= prev:
                raise ValidationError(
                    f"BranchPath: factor indices must increase, level {t} has m={m} after {prev}")
            prev = m
            if p < -1:
                raise ValidationError(f"BranchPath: level {t} slot p={p} below -1")
            if j < p + 2:
                raise ValidationError(
                    f"BranchPath: level {t} slot j={j} below p+2={p + 2}")

    @property
    def depth(self):
        return len(self.ms)

    def m(self, level):
        self._check_level(level)
        return self.ms[level - 1]

    def p_m(self, level):
        self._check_level(level)
        return self.ps[level - 1]

    def j_m(self, level):
        self._check_level(level)
        return self.js[level - 1]

    def extended(self, m, p, j):
        return BranchPath(self.ms + (m,), self.ps + (p,), self.js + (j,))

    def _check_level(self, level):
        if not 1 <= level <= len(self.ms):
            raise ValidationError(
                f"BranchPath: level {level} outside recorded depth {len(self.ms)}")


def perm_C(j, q, i):
    """Insertion map for a length q tuple extended at slot j.

    The child tuple of length q+1 reads entry i from position
    perm_C(j, q, i) of the parent tuple with the new value appended at
    position q+1.  Identity for i >= q+2.
    """
    if not 1 <= j <= q + 1:
        raise ValidationError(f"perm_C: slot j={j} outside [1, {q + 1}]")
    if i < 1:
        raise ValidationError(f"perm_C: position i={i} must be positive")
    if i <= j - 1:
        return i
    if i == j:
        return q + 1
    if i <= q + 1:
        return i - 1
    return i


def perm_D(N, q, i, path=None):
    """Row-label shuffle at descent level N.

    For N >= 1 the two fresh labels of the level-N factor land at
    output slots q+3 and q+4 while the surviving labels close ranks.
    The level-0 reduced form only shifts a window down by two and has
    domain [3, q+3].
    """
    if i < 1:
        raise ValidationError(f"perm_D: position i={i} must be positive")
    if N == 0:
        if not 3 <= i <= q + 3:
            raise ValidationError(
                f"perm_D: level-0 position i={i} outside [3, {q + 3}]")
        return i - 2
    if path is None:
        raise ValidationError("perm_D: levels N >= 1 need a BranchPath")
    p = path.p_m(N)
    jj = path.j_m(N)
    if i <= p + 2:
        return i
    if i == p + 3:
        return q + 3
    if i <= jj + 1:
        return i - 1
    if i == jj + 2:
        return q + 4
    if i <= q + 4:
        return i - 2
    return i


def perm_E(N, q, i, path=None):
    """Column-label shuffle at descent level N.

    N >= 1 delegates to the insertion map at the level's j slot.  The
    level-0 reduced form shifts [2, q+2] down by one.
    """
    if i < 1:
        raise ValidationError(f"perm_E: position i={i} must be positive")
    if N == 0:
        if not 2 <= i <= q + 2:
            raise ValidationError(
                f"perm_E: level-0 position i={i} outside [2, {q + 2}]")
        return i - 1
    if path is None:
        raise ValidationError("perm_E: levels N >= 1 need a BranchPath")
    return perm_C(path.j_m(N), q, i)


def perm_F(N, q, i, path=None):
    """Accumulated insertion maps along the first N descent levels.

    Composes one insertion map per level, innermost level first:
    level t contributes perm_C with slot j_m(t)+t-1 acting on tuples of
    length q+m_t-1.  N = 0 is the identity.
    """
    if i < 1:
        raise ValidationError(f"perm_F: position i={i} must be positive")
    if N == 0:
        return i
    if path is None:
        raise ValidationError("perm_F: levels N >= 1 need a BranchPath")
    val = i
    for t in range(N, 0, -1):
        val = perm_C(path.j_m(t) + t - 1, q + path.m(t) - 1, val)
    return val


def perm_table(func, length, *args, **kwargs):
    """Images (func(1), ..., func(length)) as a tuple, for table checks."""
    return tuple(func(*(args + (i,)), **kwargs) for i in range(1, length + 1))
