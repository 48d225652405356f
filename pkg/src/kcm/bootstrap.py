"""
Bootstrap percolation on finite regions and the search for local spread
certificates: a rectangle R, a direction u and an ordered list of sites whose
successive infection, starting from R, infects the translate a1*u + R.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .family import (
    NotSupercritical,
    UpdateFamily,
    Universality,
    Vector,
    classify,
    witness_directions,
)

__all__ = [
    "Region",
    "InfectionState",
    "SpreadCertificate",
    "ReplayResult",
    "BudgetExhausted",
    "NotSupercritical",
    "initial_state",
    "step",
    "closure",
    "rectangle_sites",
    "find_spread_certificate",
    "validate_certificate",
]


class BudgetExhausted(RuntimeError):
    pass


def _add(a: Sequence[int], b: Sequence[int]) -> Vector:
    return tuple(x + y for x, y in zip(a, b))


def _scale(k: int, a: Sequence[int]) -> Vector:
    return tuple(k * x for x in a)


@dataclass(frozen=True)
class Region:
    """A finite set of sites: either the box ``lower..upper`` (inclusive) or an explicit list."""

    dimension: int
    lower: Vector | None = None
    upper: Vector | None = None
    explicit: frozenset | None = None

    @classmethod
    def box(cls, lower: Sequence[int], upper: Sequence[int]) -> "Region":
        lower, upper = tuple(lower), tuple(upper)
        if len(lower) != len(upper) or any(lo > hi for lo, hi in zip(lower, upper)):
            raise ValueError("empty or malformed box")
        return cls(len(lower), lower, upper)

    @classmethod
    def of_sites(cls, sites: Iterable[Sequence[int]]) -> "Region":
        sites = frozenset(tuple(int(c) for c in s) for s in sites)
        if not sites:
            raise ValueError("a region needs at least one site")
        dims = {len(s) for s in sites}
        if len(dims) != 1:
            raise ValueError("mixed dimensions")
        return cls(dims.pop(), explicit=sites)

    def __contains__(self, site) -> bool:
        if self.explicit is not None:
            return tuple(site) in self.explicit
        return all(lo <= c <= hi for c, lo, hi in zip(site, self.lower, self.upper))

    def sites(self) -> list[Vector]:
        if self.explicit is not None:
            return sorted(self.explicit)
        return list(itertools.product(*(range(lo, hi + 1) for lo, hi in zip(self.lower, self.upper))))

    def __len__(self) -> int:
        if self.explicit is not None:
            return len(self.explicit)
        return math.prod(hi - lo + 1 for lo, hi in zip(self.lower, self.upper))


@dataclass(frozen=True)
class InfectionState:
    region: Region
    rounds: dict = field(default_factory=dict)  # site -> round of infection
    time: int = 0

    @property
    def infected(self) -> frozenset:
        return frozenset(self.rounds)

    def __contains__(self, site) -> bool:
        return tuple(site) in self.rounds


def initial_state(region: Region, infected: Iterable[Sequence[int]]) -> InfectionState:
    rounds = {}
    for s in infected:
        s = tuple(int(c) for c in s)
        if s not in region:
            raise ValueError(f"initially infected site {s} lies outside the region")
        rounds[s] = 0
    return InfectionState(region, rounds, 0)


def _witness_rule(family: UpdateFamily, x: Vector, infected) -> tuple | None:
    for rule in family.rules:
        if all(_add(x, v) in infected for v in rule):
            return rule
    return None


def _round(family: UpdateFamily, state: InfectionState, candidates) -> InfectionState:
    rounds = state.rounds
    t = state.time + 1
    new = {x: t for x in candidates if x not in rounds and _witness_rule(family, x, rounds)}
    return InfectionState(state.region, {**rounds, **new}, t)


def step(family: UpdateFamily, state: InfectionState) -> InfectionState:
    """One synchronous round: x is infected if some rule translated to x is fully infected.

    Rule elements outside the region count as healthy.
    """
    return _round(family, state, state.region.sites())


def closure(family: UpdateFamily, initial: InfectionState) -> InfectionState:
    """Iterate rounds to the least fixed point, recording infection rounds."""
    state = initial
    region = initial.region
    elems = family.elements
    frontier = [s for s, r in state.rounds.items() if r == state.time]
    if state.time == 0:
        frontier = list(state.rounds)
    while frontier:
        cands = set()
        for y in frontier:
            for v in elems:
                x = tuple(a - b for a, b in zip(y, v))
                if x in region and x not in state.rounds:
                    cands.add(x)
        nxt = _round(family, state, sorted(cands))
        frontier = [s for s, r in nxt.rounds.items() if r == nxt.time]
        state = nxt if frontier else InfectionState(region, state.rounds, state.time)
    return state


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class SpreadCertificate:
    """Data of a local spread mechanism.

    ``direction`` is the integer normal of u, ``a1_offset`` the lattice vector
    a1*u, ``rectangle`` the sites of R and ``sequence`` the ordered sites
    x_1..x_m. ``steps`` is the integer j with a1*u = j*direction, and
    ``width`` (planar only) is the integer bound on <z, u_perp_normal>.
    """

    direction: Vector
    steps: int
    width: int | None
    a1_offset: Vector
    rectangle: tuple[Vector, ...]
    sequence: tuple[Vector, ...]

    @property
    def dimension(self) -> int:
        return len(self.direction)

    @property
    def size(self) -> int:
        return len(self.rectangle)

    @property
    def m(self) -> int:
        return len(self.sequence)

    @property
    def a1(self) -> float:
        return self.steps * math.sqrt(sum(c * c for c in self.direction))

    @property
    def a2(self) -> float | None:
        if self.width is None:
            return None
        return self.width / math.sqrt(sum(c * c for c in self.direction))

    def to_json(self) -> dict:
        return {
            "u": list(self.direction),
            "steps": self.steps,
            "width": self.width,
            "a1_offset": list(self.a1_offset),
            "R": [list(s) for s in self.rectangle],
            "sequence": [list(s) for s in self.sequence],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SpreadCertificate":
        return cls(
            tuple(obj["u"]),
            int(obj["steps"]),
            None if obj.get("width") is None else int(obj["width"]),
            tuple(obj["a1_offset"]),
            tuple(tuple(s) for s in obj["R"]),
            tuple(tuple(s) for s in obj["sequence"]),
        )


def rectangle_sites(direction: Vector, steps: int, width: int | None) -> tuple[tuple[Vector, ...], Vector]:
    """Lattice points of R and the offset a1*u, for d = 1 or 2.

    d=1: R = {0, s, ..., (steps-1)s} with s = +-1.
    d=2: R = {z : 0 <= <z,n> < steps*|n|^2, 0 <= <z,n_perp> <= width} with n the
    integer normal and n_perp its quarter-turn rotation.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(direction) == 1:
        s = direction[0]
        if s not in (1, -1):
            raise ValueError("one-dimensional directions are +1 or -1")
        return tuple((k * s,) for k in range(steps)), (steps * s,)
    n1, n2 = direction
    if math.gcd(n1, n2) != 1:
        raise ValueError("direction must be a reduced integer vector")
    if width is None or width < 0:
        raise ValueError("planar rectangles need a width >= 0")
    nn = n1 * n1 + n2 * n2
    p1, p2 = -n2, n1
    a_hi = steps * nn  # exclusive
    # bounding box from the corners 0, steps*n, (width/nn)*n_perp and their sum
    cx = [0.0, steps * n1, width * p1 / nn, steps * n1 + width * p1 / nn]
    cy = [0.0, steps * n2, width * p2 / nn, steps * n2 + width * p2 / nn]
    sites = []
    for x in range(math.floor(min(cx)) - 1, math.ceil(max(cx)) + 2):
        for y in range(math.floor(min(cy)) - 1, math.ceil(max(cy)) + 2):
            along = x * n1 + y * n2
            across = x * p1 + y * p2
            if 0 <= along < a_hi and 0 <= across <= width:
                sites.append((x, y))
    return tuple(sorted(sites)), (steps * n1, steps * n2)


def _try_rectangle(family: UpdateFamily, rect: tuple[Vector, ...], offset: Vector):
    shifted = [_add(z, offset) for z in rect]
    twice = [_add(z, _scale(2, offset)) for z in rect]
    region = Region.of_sites(list(rect) + shifted + twice)
    final = closure(family, initial_state(region, rect))
    rounds = final.rounds
    if not all(z in rounds for z in shifted):
        return None
    base = set(rect)
    needed = set(shifted)
    for x in sorted(rounds, key=lambda s: (rounds[s], s), reverse=True):
        if x in needed and x not in base:
            earlier = {s for s, r in rounds.items() if r < rounds[x]}
            rule = _witness_rule(family, x, earlier)
            needed.update(_add(x, v) for v in rule if _add(x, v) not in base)
    needed -= base
    return tuple(sorted(needed, key=lambda s: (rounds[s], s)))


def _candidates_1d(direction: Vector, max_a1: int):
    for steps in range(1, max_a1 + 1):
        yield steps, None


def _candidates_2d(max_a1: int, max_a2: int):
    for total in range(1, max_a1 + max_a2 + 1):
        for steps in range(1, min(total, max_a1) + 1):
            width = total - steps
            if width <= max_a2:
                yield steps, width


def find_spread_certificate(
    family: UpdateFamily,
    max_a1: int = 30,
    max_a2: int = 30,
    directions: Sequence[Vector] | None = None,
    max_directions: int = 8,
) -> SpreadCertificate:
    """Smallest rectangle (in the fixed enumeration order) whose infection spreads by a1*u.

    Directions are tried in the order of :func:`witness_directions`; the first
    accepting (direction, rectangle) pair wins.
    """
    cls = classify(family)
    if cls.kind is not Universality.SUPERCRITICAL:
        raise NotSupercritical(f"family is {cls.kind.value}")
    if directions is None:
        directions = witness_directions(family)[:max_directions]
    for u in directions:
        cands = _candidates_1d(u, max_a1) if family.dimension == 1 else _candidates_2d(max_a1, max_a2)
        for steps, width in cands:
            rect, offset = rectangle_sites(u, steps, width)
            seq = _try_rectangle(family, rect, offset)
            if seq is not None:
                return SpreadCertificate(tuple(u), steps, width, offset, rect, seq)
    raise BudgetExhausted(
        f"no certificate with a1 <= {max_a1}, a2 <= {max_a2} in {len(directions)} directions"
    )


@dataclass(frozen=True)
class ReplayResult:
    ok: bool
    failed_index: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate_certificate(family: UpdateFamily, cert: SpreadCertificate) -> ReplayResult:
    """Replay the infection sequence from R and check every stated property.

    ``failed_index`` is the first offending position of the sequence, or
    ``m`` when the replay succeeds but a1*u + R is not covered.
    """
    if cert.dimension != family.dimension:
        return ReplayResult(False, None, "dimension mismatch")
    try:
        rect, offset = rectangle_sites(cert.direction, cert.steps, cert.width)
    except ValueError as exc:
        return ReplayResult(False, None, f"malformed rectangle: {exc}")
    if set(rect) != set(cert.rectangle) or tuple(offset) != tuple(cert.a1_offset):
        return ReplayResult(False, None, "rectangle or offset not of the stated form")
    strip = {_add(z, offset) for z in rect} | {_add(z, _scale(2, offset)) for z in rect}
    infected = set(rect)
    for i, x in enumerate(cert.sequence):
        x = tuple(x)
        if x not in strip:
            return ReplayResult(False, i, f"site {x} outside a1u+R and 2a1u+R")
        if _witness_rule(family, x, infected) is None:
            return ReplayResult(False, i, f"site {x} has no fully infected rule")
        infected.add(x)
    missing = [z for z in rect if _add(z, offset) not in infected]
    if missing:
        return ReplayResult(False, len(cert.sequence), f"{len(missing)} sites of a1u+R not infected")
    return ReplayResult(True)
