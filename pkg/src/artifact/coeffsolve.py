"""Coefficients of the time-weighted quadratic forms Gamma^(n) and Q^(n).

A table holds every level ``l = 1..n``: ``a`` is keyed by words of length
``l`` and ``b`` by words of length ``l`` whose first index is at least 1.
``varsigma[l-1]`` is the factor that rescales level ``l-1`` so that its
dissipation absorbs the positive leftovers at level ``l``, and
``d_levels[l] = varsigma[l-1] * d_levels[l-1]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping

Word = tuple[int, ...]


class CoefficientError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientTable:
    n: int
    N: int
    a: Mapping[Word, float]
    b: Mapping[Word, float]
    d_levels: tuple[float, ...]
    varsigma: tuple[float, ...]
    epsilon: float
    C: float
    Cprime: float

    def words(self, level: int) -> list[Word]:
        return list(itertools.product(range(self.N + 1), repeat=level))

    def a_of(self, k: Word) -> float:
        return self.a.get(k, 0.0)

    def b_of(self, k: Word) -> float:
        """``b_k`` with the convention that out-of-range indices give 0."""
        if not k or k[0] < 1 or any(x < 0 or x > self.N for x in k):
            return 0.0
        return self.b.get(k, 0.0)


def _plus(k: Word, j: int, delta: int) -> Word:
    out = list(k)
    out[j] += delta
    return tuple(out)


def _dissipation(eps: float, level: int, N: int) -> float:
    return 0.5 * (1.0 - eps * level * (2 * N + 1))


# --------------------------------------------------------------------------
# verify


@dataclass
class LevelReport:
    level: int
    B_terms: dict[Word, float]
    A_terms: dict[Word, float]
    cond1: dict[Word, float]

    @property
    def worst_B(self) -> float:
        return max(self.B_terms.values(), default=float("-inf"))

    @property
    def min_cond1(self) -> float:
        return min(self.cond1.values(), default=float("inf"))


@dataclass
class DissipativityReport:
    levels: list[LevelReport]
    eps_ok: bool
    positive: bool
    varsigma: tuple[float, ...]
    failures: list[str] = field(default_factory=list)

    @property
    def worst_margin(self) -> float:
        """Largest B term over all levels; negative means dissipative."""
        return max((lv.worst_B for lv in self.levels), default=float("-inf"))

    @property
    def passed(self) -> bool:
        return not self.failures


def B_term(table: CoefficientTable, k: Word) -> float:
    l, N, eps = len(k), table.N, table.epsilon
    up = _plus(k, 0, 1)
    b_up = table.b_of(up)
    a_k = table.a_of(k)
    side = sum(
        table.b_of(_plus(up, j, -1)) for j in range(1, l) if k[j] != N
    )
    return (
        -_dissipation(eps, l, N) * table.b_of(k)
        + (2 * l * N + l) * (a_k + b_up / eps)
        + a_k**2
        + l**2
        + 0.5 * (l - 1) * side
        + 0.5 * b_up**2
        + 0.5 * l**2
    )


def A_term(table: CoefficientTable, tail: Word) -> float:
    l = len(tail) + 1
    N, eps = table.N, table.epsilon
    a0 = table.a_of((0, *tail))
    b1 = table.b_of((1, *tail))
    return (2 * l * N + l) * (a0 + 0.5 * eps * b1) + a0**2 + l**2 + 0.5 * b1**2


def cond1_margin(table: CoefficientTable, k: Word) -> float:
    """``a_k / 2 - b_{k+e1}^2 - 1``; must be positive."""
    return 0.5 * table.a_of(k) - table.b_of(_plus(k, 0, 1)) ** 2 - 1.0


def level_margins(table: CoefficientTable, level: int) -> list[float]:
    """Dissipation margins of level ``level``, used to absorb the A terms above it."""
    if level == 0:
        return [2.0 * table.d_levels[0]]
    return [
        2.0 * (table.a_of(k) - table.b_of(_plus(k, 0, 1)) ** 2 - (1.0 if k[0] >= 1 else 0.0))
        for k in table.words(level)
    ]


def compute_varsigma(table: CoefficientTable) -> tuple[float, ...]:
    out = []
    for l in range(1, table.n + 1):
        A_max = max(A_term(table, tail) for tail in itertools.product(range(table.N + 1), repeat=l - 1))
        low = min(level_margins(table, l - 1))
        if low <= 0:
            raise CoefficientError(f"level {l - 1} has a non-positive margin")
        out.append(2.0 * A_max / low)
    return tuple(out)


def verify(table: CoefficientTable) -> DissipativityReport:
    failures: list[str] = []
    eps_ok = table.n == 0 or 0 < table.epsilon * table.n * (2 * table.N + 1) < 1
    if not eps_ok:
        failures.append(f"eps*n*(2N+1) = {table.epsilon * table.n * (2 * table.N + 1)} not in (0,1)")
    positive = (
        all(v > 0 for v in table.a.values())
        and all(v > 0 for v in table.b.values())
        and all(v > 0 for v in table.d_levels)
    )
    if not positive:
        failures.append("non-positive coefficient")
    levels = []
    for l in range(1, table.n + 1):
        words = table.words(l)
        missing = [k for k in words if k not in table.a] + [k for k in words if k[0] >= 1 and k not in table.b]
        if missing:
            failures.append(f"level {l}: missing coefficients for {missing[0]}")
            continue
        rep = LevelReport(
            level=l,
            B_terms={k: B_term(table, k) for k in words if k[0] >= 1},
            A_terms={t: A_term(table, t) for t in itertools.product(range(table.N + 1), repeat=l - 1)},
            cond1={k: cond1_margin(table, k) for k in words},
        )
        for k, v in rep.B_terms.items():
            if not v < 0:
                failures.append(f"B{k} = {v:.6g} >= 0")
        for k, v in rep.cond1.items():
            if not v > 0:
                failures.append(f"cond.1 fails at {k}: a/2 - b^2 - 1 = {v:.6g}")
        levels.append(rep)
    try:
        vs = compute_varsigma(table) if table.n else ()
    except CoefficientError as exc:
        failures.append(str(exc))
        vs = ()
    return DissipativityReport(levels=levels, eps_ok=eps_ok, positive=positive, varsigma=vs, failures=failures)


# --------------------------------------------------------------------------
# synthesize


class Infeasible(CoefficientError):
    pass


def _fill_level(a: dict, b: dict, level: int, N: int, C: float, Cp: float, eps: float) -> None:
    scale = _dissipation(eps, level, N)
    tails = list(itertools.product(range(N + 1), repeat=level - 1))
    for k1 in range(N, -1, -1):
        for tail in tails:
            k = (k1, *tail)
            up = _plus(k, 0, 1)
            b_up = b.get(up, 0.0) if k1 < N else 0.0
            a[k] = 2.0 * (C * b_up**2 + Cp + 1.0)
            if k1 >= 1:
                side = [
                    b.get(_plus(up, j, -1), 0.0)
                    for j in range(1, level)
                    if k1 < N and k[j] >= 1
                ]
                m = max([a[k], b_up, *side])
                # divide by the dissipation factor so the quadratic terms are dominated
                b[k] = (C * m**2 + Cp) / scale


def _assemble(n: int, N: int, C: float, Cp: float) -> CoefficientTable:
    eps = 1.0 / (2 * n * (2 * N + 1))
    a: dict[Word, float] = {}
    b: dict[Word, float] = {}
    for level in range(1, n + 1):
        _fill_level(a, b, level, N, C, Cp, eps)
    draft = CoefficientTable(n, N, a, b, (1.0,), (), eps, C, Cp)
    vs = compute_varsigma(draft)
    d = [1.0]
    for s in vs:
        d.append(d[-1] * s)
    return CoefficientTable(n, N, a, b, tuple(d), vs, eps, C, Cp)


def synthesize(n: int, N: int, C: float = 4.0, Cprime: float = 4.0, max_rounds: int = 60) -> CoefficientTable:
    """Deterministic schedule plus geometric escalation of ``C'``."""
    if n == 0:
        return CoefficientTable(0, N, {}, {}, (1.0,), (), 0.0, C, Cprime)
    if n < 0 or N < 1 or C < 1 or Cprime < 1:
        raise CoefficientError("need n >= 0, N >= 1, C >= 1, C' >= 1")
    Cp = float(Cprime)
    last = None
    for _ in range(max_rounds):
        table = _assemble(n, N, float(C), Cp)
        last = verify(table)
        if last.passed:
            return table
        Cp *= 2.0
    raise Infeasible(f"escalation exhausted; first violation: {last.failures[0] if last else '?'}")


# --------------------------------------------------------------------------
# comparability and evaluation


def comparability(table: CoefficientTable, level: int | None = None) -> float:
    """Largest ``d`` with ``Gamma >= d * barGamma`` obtainable from Young's inequality."""
    level = table.n if level is None else level
    if level == 0:
        return 1.0
    best = float("inf")
    for k in table.words(level):
        a_k = table.a_of(k)
        num = a_k - table.b_of(_plus(k, 0, 1)) ** 2 - (1.0 if k[0] >= 1 else 0.0)
        if num <= 0 or a_k <= 0:
            raise CoefficientError(f"comparability fails at word {k}: numerator {num:.6g}")
        best = min(best, num / a_k)
    return best


def evaluate_gamma(
    table: CoefficientTable, derivative_values: Mapping[Word, float], t: float, level: int | None = None
) -> tuple[float, float]:
    """``(Gamma, barGamma)`` from pointwise values of ``Z_k f``."""
    if t <= 0:
        raise CoefficientError("t must be positive")
    level = table.n if level is None else level
    if level == 0:
        return 0.0, 0.0
    vals = {tuple(k): v for k, v in derivative_values.items()}
    bar = 0.0
    cross = 0.0
    for k in table.words(level):
        if k not in vals:
            raise CoefficientError(f"missing derivative value for word {k}")
        r = 2 * sum(k) + level
        bar += table.a_of(k) * t**r * vals[k] ** 2
        if k[0] >= 1:
            lower = _plus(k, 0, -1)
            if lower not in vals:
                raise CoefficientError(f"missing derivative value for word {lower}")
            cross += table.b_of(k) * t ** (r - 1) * vals[lower] * vals[k]
    return bar + cross, bar


# --------------------------------------------------------------------------
# text format


def dumps(table: CoefficientTable) -> str:
    lines = [f"n={table.n},N={table.N},eps={table.epsilon!r},C={table.C!r},Cprime={table.Cprime!r}"]
    for k in sorted(table.a, key=lambda w: (len(w), w)):
        lines.append(f"a {' '.join(map(str, k))} = {table.a[k]!r}")
    for k in sorted(table.b, key=lambda w: (len(w), w)):
        lines.append(f"b {' '.join(map(str, k))} = {table.b[k]!r}")
    for i, v in enumerate(table.d_levels):
        lines.append(f"d {i} = {v!r}")
    for i, v in enumerate(table.varsigma, start=1):
        lines.append(f"varsigma {i} = {v!r}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> CoefficientTable:
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        raise CoefficientError("empty table")
    try:
        head = dict(item.split("=", 1) for item in rows[0].split(","))
        n, N = int(head["n"]), int(head["N"])
        eps, C, Cp = float(head["eps"]), float(head["C"]), float(head["Cprime"])
    except (KeyError, ValueError) as exc:
        raise CoefficientError(f"bad header {rows[0]!r}") from exc
    a: dict[Word, float] = {}
    b: dict[Word, float] = {}
    d: dict[int, float] = {}
    vs: dict[int, float] = {}
    for row in rows[1:]:
        lhs, _, rhs = row.partition("=")
        parts = lhs.split()
        if not parts or not rhs.strip():
            raise CoefficientError(f"bad line {row!r}")
        kind, idx, val = parts[0], tuple(int(p) for p in parts[1:]), float(rhs)
        if kind == "a":
            a[idx] = val
        elif kind == "b":
            b[idx] = val
        elif kind == "d":
            d[idx[0]] = val
        elif kind == "varsigma":
            vs[idx[0]] = val
        else:
            raise CoefficientError(f"unknown key {kind!r}")
    return CoefficientTable(
        n, N, a, b,
        tuple(d[i] for i in sorted(d)) or (1.0,),
        tuple(vs[i] for i in sorted(vs)),
        eps, C, Cp,
    )
