"""
Update families, stable directions and the supercritical / critical /
subcritical classification.

Directions are never stored as angles. A direction of the plane is a reduced
integer vector (its "normal"), and every comparison is made with integer
dot and cross products, so the stable set and the classification are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, cmp_to_key
from math import gcd
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Vector = tuple[int, ...]

__all__ = [
    "Vector",
    "UpdateFamily",
    "ArcSet",
    "Universality",
    "Classification",
    "NotSupercritical",
    "BUILTIN_FAMILIES",
    "load_family",
    "family_range",
    "is_stable",
    "stable_set_2d",
    "classify",
    "unstable_semicircle_midpoint",
    "witness_directions",
    "reduce_vector",
    "angle_cmp",
    "apply_lattice_map",
]


class NotSupercritical(ValueError):
    pass


# ---------------------------------------------------------------------------
# integer direction helpers


def reduce_vector(v: Sequence[int]) -> Vector:
    v = tuple(int(c) for c in v)
    g = 0
    for c in v:
        g = gcd(g, c)
    if g == 0:
        raise ValueError("zero vector has no direction")
    return tuple(c // g for c in v)


def _dot(a: Sequence[int], b: Sequence[int]) -> int:
    return sum(x * y for x, y in zip(a, b))


def _cross(a: Sequence[int], b: Sequence[int]) -> int:
    return a[0] * b[1] - a[1] * b[0]


def _rot90(v: Vector) -> Vector:
    return (-v[1], v[0])


def _rot270(v: Vector) -> Vector:
    return (v[1], -v[0])


def _neg(v: Vector) -> Vector:
    return tuple(-c for c in v)


def _half(v: Sequence[int]) -> int:
    # 0 for angles in [0, pi), 1 for [pi, 2pi)
    return 0 if v[1] > 0 or (v[1] == 0 and v[0] > 0) else 1


def angle_cmp(a: Sequence[int], b: Sequence[int]) -> int:
    """Three-way comparison of the polar angles of ``a`` and ``b`` in [0, 2pi)."""
    ha, hb = _half(a), _half(b)
    if ha != hb:
        return -1 if ha < hb else 1
    c = _cross(a, b)
    return -1 if c > 0 else (1 if c < 0 else 0)


_angle_key = cmp_to_key(angle_cmp)


def _frame(a: Vector, v: Vector) -> tuple[int, int]:
    """``v`` expressed in the (unnormalised) frame whose first axis is ``a``."""
    return (_dot(a, v), _cross(a, v))


def _same_direction(a: Vector, b: Vector) -> bool:
    return _cross(a, b) == 0 and _dot(a, b) > 0


def _in_closed_arc(a: Vector, b: Vector, u: Vector) -> bool:
    """u lies on the closed counter-clockwise arc from a to b (a != b)."""
    return angle_cmp(_frame(a, u), _frame(a, b)) <= 0


# ---------------------------------------------------------------------------
# families


def _as_vector(x, dimension: int) -> Vector:
    if isinstance(x, (int, np.integer)):
        x = (int(x),)
    v = tuple(int(c) for c in x)
    if len(v) != dimension:
        raise ValueError(f"rule element {v} does not have dimension {dimension}")
    return v


@dataclass(frozen=True)
class UpdateFamily:
    """A finite list of update rules, each a finite set of nonzero vectors.

    Rules are kept in the order given (with elements sorted) so that every
    downstream tie-break is reproducible.
    """

    dimension: int
    rules: tuple[tuple[Vector, ...], ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if not self.rules:
            raise ValueError("an update family needs at least one rule")
        rules = []
        for rule in self.rules:
            elems = sorted({_as_vector(x, self.dimension) for x in rule})
            if not elems:
                raise ValueError("update rules must be nonempty")
            if any(all(c == 0 for c in x) for x in elems):
                raise ValueError("update rules may not contain the origin")
            rules.append(tuple(elems))
        object.__setattr__(self, "rules", tuple(rules))

    @classmethod
    def from_rules(cls, rules: Iterable[Iterable], dimension: int | None = None, name: str = ""):
        rules = [list(r) for r in rules]
        if dimension is None:
            first = rules[0][0]
            dimension = 1 if isinstance(first, (int, np.integer)) else len(first)
        return cls(dimension, tuple(tuple(r) for r in rules), name)

    @classmethod
    def from_json(cls, obj: dict) -> "UpdateFamily":
        return cls.from_rules(obj["rules"], obj["dimension"], obj.get("name", ""))

    def to_json(self) -> dict:
        out = {"dimension": self.dimension, "rules": [[list(x) for x in r] for r in self.rules]}
        if self.name:
            out["name"] = self.name
        return out

    @property
    def size(self) -> int:
        return len(self.rules)

    @cached_property
    def range(self) -> int:
        return max(max(abs(c) for c in x) for rule in self.rules for x in rule)

    @cached_property
    def elements(self) -> tuple[Vector, ...]:
        return tuple(sorted({x for rule in self.rules for x in rule}))


def family_range(family: UpdateFamily) -> int:
    return family.range


def _two_neighbour_rules():
    units = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    return [[units[i], units[j]] for i in range(4) for j in range(i + 1, 4)]


BUILTIN_FAMILIES: dict[str, UpdateFamily] = {
    "fa1f": UpdateFamily.from_rules([[-1], [1]], 1, "fa1f"),
    "east": UpdateFamily.from_rules([[-1]], 1, "east"),
    "fa1f-2d": UpdateFamily.from_rules([[(1, 0)], [(-1, 0)], [(0, 1)], [(0, -1)]], 2, "fa1f-2d"),
    "west-2d": UpdateFamily.from_rules([[(-1, 0)]], 2, "west-2d"),
    "north-east": UpdateFamily.from_rules([[(-1, 0), (0, -1)]], 2, "north-east"),
    "two-neighbour": UpdateFamily.from_rules(_two_neighbour_rules(), 2, "two-neighbour"),
    "line-2d": UpdateFamily.from_rules([[(1, 0), (-1, 0)]], 2, "line-2d"),
}


def load_family(spec: str | Path | dict | UpdateFamily) -> UpdateFamily:
    """Resolve a built-in name, a JSON file path or an already-parsed dict."""
    if isinstance(spec, UpdateFamily):
        return spec
    if isinstance(spec, dict):
        return UpdateFamily.from_json(spec)
    key = str(spec)
    if key in BUILTIN_FAMILIES:
        return BUILTIN_FAMILIES[key]
    with open(key) as fh:
        return UpdateFamily.from_json(json.load(fh))


def apply_lattice_map(family: UpdateFamily, matrix: Sequence[Sequence[int]]) -> UpdateFamily:
    """Image of a planar family under an integer linear map (e.g. a symmetry of Z^2)."""
    m = [[int(c) for c in row] for row in matrix]
    rules = [
        [(m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]) for x in rule]
        for rule in family.rules
    ]
    return UpdateFamily.from_rules(rules, 2)


# ---------------------------------------------------------------------------
# stability


def is_stable(family: UpdateFamily, u: Sequence[int]) -> bool:
    """True iff no rule lies entirely in the open half-space {x : <x, u> < 0}."""
    u = tuple(int(c) for c in u)
    if len(u) != family.dimension:
        raise ValueError("direction and family dimensions differ")
    if all(c == 0 for c in u):
        raise ValueError("zero vector is not a direction")
    for rule in family.rules:
        if all(_dot(x, u) < 0 for x in rule):
            return False
    return True


def _is_stable_many(family: UpdateFamily, dirs: np.ndarray) -> np.ndarray:
    dirs = np.asarray(dirs, dtype=np.int64)
    unstable = np.zeros(len(dirs), dtype=bool)
    for rule in family.rules:
        elems = np.asarray(rule, dtype=np.int64)
        unstable |= np.all(dirs @ elems.T < 0, axis=1)
    return ~unstable


@dataclass(frozen=True)
class ArcSet:
    """Closed subset of the circle: disjoint closed arcs sorted by start angle.

    Each arc ``(a, b)`` runs counter-clockwise from ``a`` to ``b``; ``a == b``
    is a single direction. The whole circle is flagged with ``full``.
    """

    arcs: tuple[tuple[Vector, Vector], ...] = ()
    full: bool = False

    @property
    def empty(self) -> bool:
        return not self.full and not self.arcs

    @property
    def is_finite(self) -> bool:
        return not self.full and all(a == b for a, b in self.arcs)

    def __contains__(self, u) -> bool:
        u = reduce_vector(u)
        if self.full:
            return True
        for a, b in self.arcs:
            if a == b:
                if _same_direction(a, u):
                    return True
            elif _in_closed_arc(a, b, u):
                return True
        return False

    def contains_many(self, dirs: np.ndarray) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.int64)
        if self.full:
            return np.ones(len(dirs), dtype=bool)
        out = np.zeros(len(dirs), dtype=bool)
        ux, uy = dirs[:, 0], dirs[:, 1]
        for a, b in self.arcs:
            dot = a[0] * ux + a[1] * uy
            crs = a[0] * uy - a[1] * ux
            if a == b:
                out |= (crs == 0) & (dot > 0)
                continue
            fb = _frame(a, b)
            hb = _half(fb)
            hu = np.where((crs > 0) | ((crs == 0) & (dot > 0)), 0, 1)
            # cross(frame(u), frame(b)) >= 0 means frame(u) is not past frame(b)
            cr = dot * fb[1] - crs * fb[0]
            out |= (hu < hb) | ((hu == hb) & (cr >= 0))
        return out

    def to_json(self) -> dict:
        return {"full": self.full, "arcs": [[list(a), list(b)] for a, b in self.arcs]}


def _critical_directions(family: UpdateFamily) -> list[Vector]:
    crit = set()
    for x in family.elements:
        p = reduce_vector(_rot90(x))
        crit.add(p)
        crit.add(_neg(p))
    return sorted(crit, key=_angle_key)


def _interior_direction(a: Vector, b: Vector) -> Vector:
    """A rational direction strictly inside the open ccw arc from a to b."""
    if _cross(a, b) > 0:
        return reduce_vector((a[0] + b[0], a[1] + b[1]))
    return _rot90(a)


def stable_set_2d(family: UpdateFamily) -> ArcSet:
    """The set of stable directions of a planar family, exactly.

    Stability can only change at directions orthogonal to a rule element, so
    the circle is cut at those directions and each point and each open gap
    between consecutive cut points is tested once.
    """
    if family.dimension != 2:
        raise ValueError("stable_set_2d needs a two-dimensional family")
    pts = _critical_directions(family)
    k = len(pts)
    flags = []
    for i in range(k):
        flags.append(is_stable(family, pts[i]))
        flags.append(is_stable(family, _interior_direction(pts[i], pts[(i + 1) % k])))
    if all(flags):
        return ArcSet(full=True)
    if not any(flags):
        return ArcSet()
    n = len(flags)
    start = next(i for i in range(n) if not flags[i]) + 1
    arcs = []
    run: list[int] = []
    for step in range(n + 1):
        i = (start + step) % n
        if step < n and flags[i]:
            run.append(i)
            continue
        if run:
            # the stable set is closed, so a run always begins and ends on a cut point
            assert run[0] % 2 == 0 and run[-1] % 2 == 0, "stable set not closed"
            arcs.append((pts[run[0] // 2], pts[run[-1] // 2]))
            run = []
    arcs.sort(key=lambda arc: _angle_key(arc[0]))
    return ArcSet(tuple(arcs))


# ---------------------------------------------------------------------------
# classification


class Universality(str, Enum):
    SUPERCRITICAL = "supercritical"
    CRITICAL = "critical"
    SUBCRITICAL = "subcritical"


@dataclass(frozen=True)
class Classification:
    kind: Universality
    # centre of an open semicircle (half-line in d=1) containing no stable direction
    witness: Vector | None = None
    stable_set: ArcSet | None = None

    def to_json(self) -> dict:
        out = {"class": self.kind.value, "witness": list(self.witness) if self.witness else None}
        if self.stable_set is not None:
            out["stable_set"] = self.stable_set.to_json()
        return out


# returned when every direction is unstable
DEFAULT_DIRECTION: Vector = (0, 1)


def _gaps(S: ArcSet) -> list[tuple[Vector, Vector]]:
    arcs = S.arcs
    return [(arcs[i][1], arcs[(i + 1) % len(arcs)][0]) for i in range(len(arcs))]


def _center_arcs(S: ArcSet) -> list[tuple[Vector, Vector]]:
    """Closed arcs of centres c whose open semicircle {<u, c> > 0} misses S."""
    out = []
    for e, s in _gaps(S):
        if _cross(e, s) <= 0:  # gap of angle >= pi
            out.append((_rot90(e), _rot270(s)))
    return out


def _arc_representative(c1: Vector, c2: Vector) -> Vector:
    if _same_direction(c1, c2):
        return c1
    return _interior_direction(c1, c2)


def classify(family: UpdateFamily) -> Classification:
    if family.dimension == 1:
        unstable = [u for u in ((1,), (-1,)) if not is_stable(family, u)]
        if unstable:
            return Classification(Universality.SUPERCRITICAL, unstable[0])
        return Classification(Universality.SUBCRITICAL)

    S = stable_set_2d(family)
    if S.empty:
        return Classification(Universality.SUPERCRITICAL, DEFAULT_DIRECTION, S)
    if S.full:
        return Classification(Universality.SUBCRITICAL, None, S)
    centers = _center_arcs(S)
    if centers:
        witness = min(_arc_representative(c1, c2) for c1, c2 in centers)
        return Classification(Universality.SUPERCRITICAL, witness, S)

    thick = [(a, b) for a, b in S.arcs if a != b]
    if not thick:
        return Classification(Universality.CRITICAL, None, S)
    if len(thick) == 1:
        a, b = thick[0]
        critical = _cross(a, b) >= 0  # the only thick arc spans at most pi
    else:
        critical = any(
            _cross(thick[i][1], thick[(i + 1) % len(thick)][0]) <= 0 for i in range(len(thick))
        )
    kind = Universality.CRITICAL if critical else Universality.SUBCRITICAL
    return Classification(kind, None, S)


def unstable_semicircle_midpoint(family: UpdateFamily) -> Vector:
    cls = classify(family)
    if cls.kind is not Universality.SUPERCRITICAL:
        raise NotSupercritical(f"family is {cls.kind.value}")
    return cls.witness


def witness_directions(family: UpdateFamily, depth: int = 4) -> list[Vector]:
    """Candidate directions for the spread search, preferred one first.

    After the classification witness come rational directions from a mediant
    sweep of each arc of admissible semicircle centres, then the arc endpoints.
    """
    cls = classify(family)
    if cls.kind is not Universality.SUPERCRITICAL:
        raise NotSupercritical(f"family is {cls.kind.value}")
    if family.dimension == 1:
        return [u for u in ((1,), (-1,)) if not is_stable(family, u)]
    S = cls.stable_set
    out = [cls.witness]
    if S.empty:
        circle = [(1, 0), (0, 1), (-1, 0), (0, -1)]
        arcs = [(circle[i], circle[(i + 1) % 4]) for i in range(4)]
    else:
        arcs = _center_arcs(S)
    for c1, c2 in arcs:
        if _same_direction(c1, c2):
            out.append(c1)
            continue
        level = [c1, _arc_representative(c1, c2), c2]
        for _ in range(depth):
            nxt = [level[0]]
            for a, b in zip(level, level[1:]):
                nxt.extend([_interior_direction(a, b), b])
            level = nxt
        out.extend(level[1:-1])
        out.extend([c1, c2])
    seen = set()
    uniq = []
    for d in out:
        if d not in seen:
            seen.add(d)
            uniq.append(d)
    return uniq
