"""Exact algebra of polynomial vector fields.

Coefficients are :class:`fractions.Fraction` throughout, so every identity
checked here holds with zero tolerance. Words of fields act right to left:
``Z_(k1, k2)`` applied to ``g`` is ``Z_k1(Z_k2(g))``.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from sympy import Matrix, Rational
from sympy.polys.domains import QQ
from sympy.polys.matrices import DomainMatrix

Exponent = tuple[int, ...]
Number = int | Fraction


class AlgebraError(ValueError):
    """Rejected input or an internal consistency failure in the algebra."""


# --------------------------------------------------------------------------
# Polynomials


class Polynomial:
    """Sparse polynomial in ``dim`` variables with rational coefficients."""

    __slots__ = ("dim", "_terms", "_hash")

    def __init__(self, dim: int, terms: Mapping[Exponent, Number] | None = None):
        if dim < 1:
            raise AlgebraError("polynomial dimension must be positive")
        clean: dict[Exponent, Fraction] = {}
        for exp, coef in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != dim or any(e < 0 for e in exp):
                raise AlgebraError(f"bad exponent {exp} for dimension {dim}")
            c = Fraction(coef)
            if c:
                clean[exp] = clean.get(exp, Fraction(0)) + c
                if not clean[exp]:
                    del clean[exp]
        self.dim = dim
        self._terms = clean
        self._hash = None

    # constructors
    @classmethod
    def zero(cls, dim: int) -> "Polynomial":
        return cls(dim)

    @classmethod
    def constant(cls, dim: int, value: Number) -> "Polynomial":
        return cls(dim, {(0,) * dim: value})

    @classmethod
    def variable(cls, dim: int, i: int) -> "Polynomial":
        exp = [0] * dim
        exp[i] = 1
        return cls(dim, {tuple(exp): 1})

    @property
    def terms(self) -> Mapping[Exponent, Fraction]:
        return dict(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(not any(e) for e in self._terms)

    def constant_term(self) -> Fraction:
        return self._terms.get((0,) * self.dim, Fraction(0))

    def degree(self) -> int:
        return max((sum(e) for e in self._terms), default=0)

    def variables(self) -> set[int]:
        """Indices of variables that actually occur."""
        return {i for e in self._terms for i, p in enumerate(e) if p}

    # arithmetic
    def _check(self, other: "Polynomial") -> None:
        if other.dim != self.dim:
            raise AlgebraError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, Fraction)):
            return Polynomial.constant(self.dim, other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for e, c in other._terms.items():
            out[e] = out.get(e, Fraction(0)) + c
        return Polynomial(self.dim, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.dim, {e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, Fraction)):
            return Polynomial(self.dim, {e: c * other for e, c in self._terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict[Exponent, Fraction] = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, Fraction(0)) + c1 * c2
        return Polynomial(self.dim, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0:
            raise AlgebraError("negative power of a polynomial")
        out = Polynomial.constant(self.dim, 1)
        for _ in range(k):
            out = out * self
        return out

    def __eq__(self, other):
        if isinstance(other, (int, Fraction)):
            other = Polynomial.constant(self.dim, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.dim == other.dim and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.dim, frozenset(self._terms.items())))
        return self._hash

    def diff(self, i: int) -> "Polynomial":
        out = {}
        for e, c in self._terms.items():
            if e[i]:
                ne = list(e)
                ne[i] -= 1
                out[tuple(ne)] = c * e[i]
        return Polynomial(self.dim, out)

    def __call__(self, point: Sequence[Number]) -> Fraction:
        """Exact evaluation at a rational point."""
        if len(point) != self.dim:
            raise AlgebraError("point has wrong dimension")
        pt = [Fraction(p) for p in point]
        total = Fraction(0)
        for e, c in self._terms.items():
            term = c
            for p, k in zip(pt, e):
                if k:
                    term *= p**k
            total += term
        return total

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Float evaluation on an array whose last axis has length ``dim``."""
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for e, c in self._terms.items():
            term = np.full(pts.shape[:-1], float(c))
            for i, k in enumerate(e):
                if k:
                    term = term * pts[..., i] ** k
            out = out + term
        return out

    def __repr__(self):
        return f"Polynomial({self})"

    def __str__(self):
        if not self._terms:
            return "0"
        parts = []
        for e in sorted(self._terms, key=lambda x: (-sum(x), tuple(-v for v in x))):
            c = self._terms[e]
            mono = "*".join(
                f"x{i + 1}" if k == 1 else f"x{i + 1}^{k}" for i, k in enumerate(e) if k
            )
            mag = abs(c)
            if not mono:
                body = str(mag)
            elif mag == 1:
                body = mono
            else:
                body = f"{mag}*{mono}"
            parts.append(("- " if c < 0 else "+ ") + body)
        text = " ".join(parts)
        return text[2:] if text.startswith("+ ") else "-" + text[2:]


# --------------------------------------------------------------------------
# Vector fields


@dataclass(frozen=True)
class VectorField:
    """First-order operator ``sum_i p_i(x) d_i`` on R^m."""

    components: tuple[Polynomial, ...]

    def __post_init__(self):
        if not self.components:
            raise AlgebraError("a vector field needs at least one component")
        dims = {p.dim for p in self.components}
        if dims != {len(self.components)}:
            raise AlgebraError("components must all have dimension m = number of components")

    @property
    def dim(self) -> int:
        return len(self.components)

    @classmethod
    def zero(cls, m: int) -> "VectorField":
        return cls(tuple(Polynomial.zero(m) for _ in range(m)))

    @classmethod
    def coordinate(cls, m: int, i: int, coef: Polynomial | Number = 1) -> "VectorField":
        """``coef * d_i``."""
        if not isinstance(coef, Polynomial):
            coef = Polynomial.constant(m, coef)
        comps = [Polynomial.zero(m)] * m
        comps[i] = coef
        return cls(tuple(comps))

    def is_zero(self) -> bool:
        return all(p.is_zero() for p in self.components)

    def __add__(self, other: "VectorField") -> "VectorField":
        _same_dim(self, other)
        return VectorField(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        _same_dim(self, other)
        return VectorField(tuple(a - b for a, b in zip(self.components, other.components)))

    def __neg__(self) -> "VectorField":
        return VectorField(tuple(-a for a in self.components))

    def scale(self, s: Number | Polynomial) -> "VectorField":
        return VectorField(tuple(a * s for a in self.components))

    def __call__(self, g: Polynomial) -> Polynomial:
        return apply(self, g)

    def at(self, point: Sequence[Number]) -> tuple[Fraction, ...]:
        return tuple(p(point) for p in self.components)

    def degree(self) -> int:
        return max(p.degree() for p in self.components)

    def __str__(self):
        return "[" + "; ".join(str(p) for p in self.components) + "]"


def _same_dim(X: VectorField, Y: VectorField) -> None:
    if X.dim != Y.dim:
        raise AlgebraError(f"dimension mismatch: {X.dim} vs {Y.dim}")


def apply(X: VectorField, g: Polynomial) -> Polynomial:
    """Exact ``X g``."""
    if g.dim != X.dim:
        raise AlgebraError(f"dimension mismatch: field {X.dim}, polynomial {g.dim}")
    out = Polynomial.zero(g.dim)
    for i, p in enumerate(X.components):
        if not p.is_zero():
            out = out + p * g.diff(i)
    return out


def commutator(X: VectorField, Y: VectorField) -> VectorField:
    """``[X, Y]`` with components ``X(Y_i) - Y(X_i)``."""
    _same_dim(X, Y)
    return VectorField(
        tuple(apply(X, q) - apply(Y, p) for p, q in zip(X.components, Y.components))
    )


# --------------------------------------------------------------------------
# Text grammar: "[p1; p2; ...]" with variables x1..xm


_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d+)?)|x(\d+)|(.))")


class _Parser:
    def __init__(self, text: str, dim: int):
        self.dim = dim
        self.tokens: list[tuple[str, str]] = []
        pos = 0
        text = text.strip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                break
            if m.group(1):
                self.tokens.append(("num", m.group(1)))
            elif m.group(2):
                self.tokens.append(("var", m.group(2)))
            elif m.group(3) and not m.group(3).isspace():
                self.tokens.append(("op", m.group(3)))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> Polynomial:
        if not self.tokens:
            raise AlgebraError("empty polynomial expression")
        p = self.expr()
        if self.i != len(self.tokens):
            raise AlgebraError(f"unexpected token {self.peek()[1]!r}")
        return p

    def expr(self) -> Polynomial:
        sign = 1
        kind, val = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            sign = -1 if val == "-" else 1
        out = self.term() * sign
        while True:
            kind, val = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                t = self.term()
                out = out + t if val == "+" else out - t
            else:
                return out

    def term(self) -> Polynomial:
        out = self.power()
        while True:
            kind, val = self.peek()
            if kind == "op" and val == "*":
                self.take()
                out = out * self.power()
            elif kind == "op" and val == "/":
                self.take()
                den = self.power()
                if not den.is_constant() or den.is_zero():
                    raise AlgebraError("division only by nonzero constants")
                out = out * (1 / den.constant_term())
            else:
                return out

    def power(self) -> Polynomial:
        base = self.atom()
        kind, val = self.peek()
        if kind == "op" and val == "^":
            self.take()
            kind, val = self.take()
            if kind != "num" or "." in val:
                raise AlgebraError("exponent must be a non-negative integer literal")
            return base ** int(val)
        return base

    def atom(self) -> Polynomial:
        kind, val = self.take()
        if kind == "num":
            return Polynomial.constant(self.dim, Fraction(val))  # decimals are read exactly
        if kind == "var":
            idx = int(val)
            if not 1 <= idx <= self.dim:
                raise AlgebraError(f"variable x{idx} out of range for dimension {self.dim}")
            return Polynomial.variable(self.dim, idx - 1)
        if kind == "op" and val == "(":
            p = self.expr()
            if self.take() != ("op", ")"):
                raise AlgebraError("missing ')'")
            return p
        if kind == "op" and val == "-":
            return -self.atom()
        raise AlgebraError(f"unexpected token {val!r}")


def parse_polynomial(text: str, dim: int) -> Polynomial:
    return _Parser(text, dim).parse()


def parse_field(text: str) -> VectorField:
    """Parse ``[p1; p2; ...; pm]``; the number of entries fixes m."""
    s = text.strip()
    if not (s.startswith("[") and s.endswith("]")):
        raise AlgebraError("a field must be written as [p1; p2; ...]")
    parts = s[1:-1].split(";")
    m = len(parts)
    return VectorField(tuple(parse_polynomial(p, m) for p in parts))


# --------------------------------------------------------------------------
# Words


@dataclass(frozen=True)
class OperatorWord:
    """Index tuple ``k`` standing for ``Z_k1 ... Z_kn``."""

    indices: tuple[int, ...]

    def __post_init__(self):
        if any(k < 0 for k in self.indices):
            raise AlgebraError("word indices must be non-negative")

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def weight(self) -> int:
        return sum(self.indices)

    @property
    def rank(self) -> int:
        return 2 * self.weight + self.n

    def shift(self, j: int, delta: int = 1) -> "OperatorWord":
        k = list(self.indices)
        k[j] += delta
        return OperatorWord(tuple(k))

    def replace(self, j: int, value: int) -> "OperatorWord":
        k = list(self.indices)
        k[j] = value
        return OperatorWord(tuple(k))

    def __add__(self, other: "OperatorWord") -> "OperatorWord":
        return OperatorWord(self.indices + other.indices)

    def __str__(self):
        return "(" + ",".join(map(str, self.indices)) + ")"


def rank(word: OperatorWord | Sequence[int]) -> int:
    """Hoermander rank ``2|k| + n``."""
    if not isinstance(word, OperatorWord):
        word = OperatorWord(tuple(word))
    return word.rank


def apply_word(word: OperatorWord | Sequence[int], fields: Sequence[VectorField], g: Polynomial) -> Polynomial:
    """``Z_k1(Z_k2(...(Z_kn g)))``."""
    idx = word.indices if isinstance(word, OperatorWord) else tuple(word)
    for k in reversed(idx):
        g = apply(fields[k], g)
    return g


# --------------------------------------------------------------------------
# Linear algebra over Q (sympy does the row reduction)


def _solve_constant_combination(
    target: VectorField, basis: Sequence[VectorField]
) -> tuple[list[Fraction] | None, VectorField]:
    """Constant ``c`` with ``target = sum c_j basis_j``, else ``None`` and the residual.

    The residual is ``target`` minus its best exact partial fit on the pivot
    columns, which is a useful diagnostic but not a least-squares projection.
    """
    keys = sorted(
        {(i, e) for X in [target, *basis] for i, p in enumerate(X.components) for e in p.terms}
    )
    if not basis:
        return ([] if target.is_zero() else None), target
    if not keys:
        return [Fraction(0)] * len(basis), target
    rows = []
    for i, e in keys:
        row = [QQ(*_frac_pair(X.components[i].terms.get(e, 0))) for X in basis]
        row.append(QQ(*_frac_pair(target.components[i].terms.get(e, 0))))
        rows.append(row)
    M = DomainMatrix(rows, (len(keys), len(basis) + 1), QQ)
    rref, pivots = M.rref()
    ncol = len(basis)
    if ncol in pivots:
        coeffs = [Fraction(0)] * ncol
        for r, pc in enumerate(pivots):
            if pc < ncol:
                coeffs[pc] = _to_fraction(rref.to_Matrix()[r, ncol])
        fit = VectorField.zero(target.dim)
        for c, X in zip(coeffs, basis):
            fit = fit + X.scale(c)
        return None, target - fit
    dense = rref.to_Matrix()
    coeffs = [Fraction(0)] * ncol
    for r, pc in enumerate(pivots):
        coeffs[pc] = _to_fraction(dense[r, ncol])
    return coeffs, VectorField.zero(target.dim)


def _frac_pair(x) -> tuple[int, int]:
    f = Fraction(x)
    return f.numerator, f.denominator


def _to_fraction(x) -> Fraction:
    r = Rational(x)
    return Fraction(int(r.p), int(r.q))


# --------------------------------------------------------------------------
# Chains and structure constants


@dataclass(frozen=True)
class StructureConstants:
    """Constants of the chain ``[B, Z_j] = Z_{j+1}``, ``[B, Z_N] = sum c_j Z_j``.

    ``cijh`` holds only nonzero entries of ``[Z_i, Z_j] = sum_h c_ijh Z_h``.
    """

    N: int
    c: tuple[Fraction, ...]
    cijh: Mapping[tuple[int, int, int], Fraction] = field(default_factory=dict)
    cri: bool = False

    def bracket(self, i: int, j: int, h: int) -> Fraction:
        return self.cijh.get((i, j, h), Fraction(0))

    @classmethod
    def from_brackets(cls, N: int, cijh: Mapping[tuple[int, int, int], Number]) -> "StructureConstants":
        """Hand-built constants; antisymmetric partners are filled in."""
        full: dict[tuple[int, int, int], Fraction] = {}
        for (i, j, h), v in cijh.items():
            v = Fraction(v)
            if v:
                full[(i, j, h)] = v
                full[(j, i, h)] = -v
        return cls(N=N, c=(Fraction(0),) * (N + 1), cijh=full, cri=lemma_form_ok(full))


class ChainDoesNotClose(AlgebraError):
    def __init__(self, depth: int, last: VectorField):
        super().__init__(f"chain does not close within max_depth={depth}; last bracket {last}")
        self.depth = depth
        self.last = last


def generate_chain(
    Z0: VectorField, B: VectorField, max_depth: int = 8
) -> tuple[list[VectorField], StructureConstants]:
    """Iterate ``Z_{j+1} = [B, Z_j]`` until ``[B, Z_N]`` is a constant combination."""
    if max_depth < 1:
        raise AlgebraError("max_depth must be at least 1")
    _same_dim(Z0, B)
    chain = [Z0]
    for _ in range(max_depth + 1):
        nxt = commutator(B, chain[-1])
        coeffs, _ = _solve_constant_combination(nxt, chain)
        if coeffs is not None:
            return chain, StructureConstants(N=len(chain) - 1, c=tuple(coeffs))
        if len(chain) > max_depth:
            raise ChainDoesNotClose(max_depth, nxt)
        chain.append(nxt)
    raise ChainDoesNotClose(max_depth, chain[-1])  # pragma: no cover


def lemma_form_ok(cijh: Mapping[tuple[int, int, int], Fraction]) -> bool:
    """``c_0jh = 0`` unless ``h < j - 1``: the form ``[Z_k, Z_0]`` takes in the expansion lemma."""
    return all(not (i == 0 and h >= j - 1) for (i, j, h), v in cijh.items() if v)


def literal_form_ok(cijh: Mapping[tuple[int, int, int], Fraction]) -> bool:
    """``c_0jh = 0`` for ``h >= j - 2``, as the assumption is printed."""
    return all(not (i == 0 and h >= j - 2) for (i, j, h), v in cijh.items() if v)


@dataclass(frozen=True)
class CRIReport:
    closed: bool
    offending: tuple[tuple[int, int, VectorField], ...]
    constants: StructureConstants
    c0_restriction: bool
    c0_restriction_literal: bool
    cN_sign: int
    t_infinite: bool

    @property
    def passed(self) -> bool:
        return self.closed and self.c0_restriction

    def records(self) -> dict[str, str]:
        return {
            "N": str(self.constants.N),
            "closed": str(self.closed).lower(),
            "c0_restriction": str(self.c0_restriction).lower(),
            "c0_restriction_literal": str(self.c0_restriction_literal).lower(),
            "cN_sign": str(self.cN_sign),
            "t_infinite": str(self.t_infinite).lower(),
            "c": " ".join(str(x) for x in self.constants.c),
            "cijh": " ".join(f"{i},{j},{h}:{v}" for (i, j, h), v in sorted(self.constants.cijh.items())),
            "offending": " ".join(f"[Z{i},Z{j}]" for i, j, _ in self.offending),
        }


def bracket_table(
    fields: Sequence[VectorField],
) -> tuple[dict[tuple[int, int, int], Fraction], list[tuple[int, int, VectorField]]]:
    """Solve every ``[Z_i, Z_j]`` in the constant span of ``fields``."""
    cijh: dict[tuple[int, int, int], Fraction] = {}
    bad: list[tuple[int, int, VectorField]] = []
    for i, j in itertools.combinations(range(len(fields)), 2):
        br = commutator(fields[i], fields[j])
        coeffs, resid = _solve_constant_combination(br, fields)
        if coeffs is None:
            bad.append((i, j, resid))
            continue
        for h, v in enumerate(coeffs):
            if v:
                cijh[(i, j, h)] = v
                cijh[(j, i, h)] = -v
    return cijh, bad


def verify_cri(chain: Sequence[VectorField], constants: StructureConstants) -> CRIReport:
    cijh, bad = bracket_table(chain)
    c0 = lemma_form_ok(cijh)
    lit = literal_form_ok(cijh)
    cN = constants.c[-1] if constants.c else Fraction(0)
    sign = (cN > 0) - (cN < 0)
    t_inf = not bad and all(v == 0 for v in constants.c) and not any(
        i == 0 for (i, _, _) in cijh
    )
    filled = StructureConstants(N=constants.N, c=constants.c, cijh=cijh, cri=not bad and c0)
    return CRIReport(
        closed=not bad,
        offending=tuple(bad),
        constants=filled,
        c0_restriction=c0,
        c0_restriction_literal=lit,
        cN_sign=sign,
        t_infinite=t_inf,
    )


# --------------------------------------------------------------------------
# Word commutators


Term = tuple[Fraction, OperatorWord]


def word_commutator_with_B(word: OperatorWord, N: int) -> list[Term]:
    """``[Z_k, B] = -sum_{j: k_j != N} Z_{k + e_j}`` (regime ``c_j = 0``)."""
    if any(k > N for k in word.indices):
        raise AlgebraError(f"word {word} has an index above N={N}")
    return [(Fraction(-1), word.shift(j)) for j, k in enumerate(word.indices) if k != N]


def word_commutator_with_Z0sq(
    word: OperatorWord, constants: StructureConstants
) -> tuple[list[Term], list[Term]]:
    """Expand ``[Z_k, Z_0^2]`` into ``sum eta Z_0 Z_k' + sum zeta Z_k'``.

    Built from ``[Z_a, Z_0^2] = -2 sum_l c_0al Z_0 Z_l + sum_h gamma_ah Z_h``
    with ``gamma_ah = sum_l c_0al c_0lh``, followed by moving each ``Z_0``
    to the front through ``Z_b Z_0 = Z_0 Z_b - sum_h c_0bh Z_h``.
    """
    if not lemma_form_ok(constants.cijh):
        raise AlgebraError("constants violate c_0jh = 0 for h >= j - 1")
    N = constants.N

    def c0(a: int, l: int) -> Fraction:
        return constants.bracket(0, a, l)

    eta: dict[OperatorWord, Fraction] = {}
    zeta: dict[OperatorWord, Fraction] = {}

    def emit(bucket: dict, coef: Fraction, w: OperatorWord) -> None:
        if w.weight >= word.weight - 1:
            raise AlgebraError(f"emitted word {w} breaks |k'| < |k| - 1 for {word}")
        bucket[w] = bucket.get(w, Fraction(0)) + coef

    idx = word.indices
    for j, a in enumerate(idx):
        for l in range(N + 1):
            cal = c0(a, l)
            if cal:
                coef = -2 * cal
                inner = word.replace(j, l)
                # Z_0 sits just left of position j; walk it to the front
                for i in range(j - 1, -1, -1):
                    b = idx[i]
                    for h in range(N + 1):
                        cbh = c0(b, h)
                        if cbh:
                            emit(zeta, -coef * cbh, inner.replace(i, h))
                emit(eta, coef, inner)
            gam = sum((c0(a, m) * c0(m, l) for m in range(N + 1)), Fraction(0))
            if gam:
                emit(zeta, gam, word.replace(j, l))

    def clean(bucket):
        return [(v, w) for w, v in sorted(bucket.items(), key=lambda kv: kv[0].indices) if v]

    return clean(eta), clean(zeta)


# --------------------------------------------------------------------------
# Hoermander span


def hormander_span_check(
    fields: Sequence[VectorField],
    point: Sequence[Number],
    max_bracket_depth: int | None = None,
) -> tuple[bool, int]:
    """Rank at ``point`` of the fields and their brackets up to the given depth.

    Default depth is ``2N + 2`` with ``N = len(fields) - 1``.
    """
    if not fields:
        raise AlgebraError("no fields supplied")
    m = fields[0].dim
    for X in fields:
        _same_dim(fields[0], X)
    if max_bracket_depth is None:
        max_bracket_depth = 2 * (len(fields) - 1) + 2
    seen: set[VectorField] = set()
    level = [X for X in fields if not X.is_zero()]
    vectors = [X.at(point) for X in level]
    seen.update(level)
    r = Matrix(vectors).rank() if vectors else 0
    for _ in range(max_bracket_depth):
        if r == m:
            break
        nxt = []
        for X in fields:
            for Y in level:
                br = commutator(X, Y)
                if not br.is_zero() and br not in seen:
                    seen.add(br)
                    nxt.append(br)
        if not nxt:
            break
        level = nxt
        vectors.extend(X.at(point) for X in nxt)
        r = Matrix(vectors).rank()
    return r == m, int(r)


def kappa_of(Y: VectorField, D: VectorField) -> Fraction | None:
    """``kappa`` with ``[Y, D] = kappa Y``, or ``None`` if no such constant exists."""
    coeffs, _ = _solve_constant_combination(commutator(Y, D), [Y])
    return None if coeffs is None else coeffs[0]


def fields_from_text(lines: Iterable[str]) -> list[VectorField]:
    return [parse_field(s) for s in lines]
