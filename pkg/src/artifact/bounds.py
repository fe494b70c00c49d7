"""Structural constants of the derivative energy estimates and the Gronwall
propagation that turns them into finite-speed envelopes.

The constants are upper-bound evaluators: every sup-norm or lattice sum of
``q``, ``S`` and their Y-derivatives enters as an aggregated non-negative
number, either supplied by the caller or read off a :class:`LatticeModel`
by :func:`model_inputs`.

The propagation works on a one-dimensional reduction of the lattice: index
``k`` stands for the class of sites at distance ``|k|`` from the support,
and every level couples to the ``2R + 1`` classes within range ``R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import gammainc

from .lattice import BoundEnvelope, LatticeModel, Lift, check_gcr
from .liealg import Polynomial, apply


class BoundsError(ValueError):
    """Invalid inputs or a propagation that failed its sanity checks."""


def _check_eps(epsilon: float) -> None:
    if not 0 < epsilon <= 1:
        raise BoundsError(f"epsilon must lie in (0, 1], got {epsilon}")


def _nonneg(**kw: float) -> None:
    for k, v in kw.items():
        if not v >= 0:
            raise BoundsError(f"{k} must be non-negative, got {v}")


def _times(a: float, b: float) -> float:
    # a vanishing commutator kills the term even when the sup-norm is infinite
    return 0.0 if a == 0 or b == 0 else a * b


@dataclass(frozen=True)
class StructuralConstants:
    n: int
    cardI: int
    c: float
    b: float
    kappa: float
    lam: float
    epsilon: float
    qbar: float
    S_row_sum: float
    S_sup: float
    A_n: float
    B_n: float
    T3: float
    C_n: float
    C_bar: float
    v_n: float

    @property
    def rate(self) -> float:
        """Diagonal growth rate of the level-n energy: ``v_n`` plus the q and S terms."""
        return self.v_n + self.T3 + self.C_n + self.B_n / self.epsilon


def structural_constants(
    n: int,
    cardI: int,
    c: float,
    b: float,
    kappa: float,
    lam: float,
    epsilon: float,
    qbar: float = 0.0,
    S_row_sum: float = 0.0,
    S_sup: float = 0.0,
    qY_sum: float = 0.0,
) -> StructuralConstants:
    """Direct evaluation of ``A_n``, ``2 n qbar c |I|``, ``C_n``, ``C_bar_n`` and ``v_n``.

    ``qY_sum`` is the aggregated sum of sup-norms of Y-derivatives of ``q``
    and is returned as ``B_n``.
    """
    if n < 1:
        raise BoundsError("n must be at least 1")
    _check_eps(epsilon)
    _nonneg(cardI=cardI, c=c, b=b, kappa=kappa, lam=lam, qbar=qbar, S_row_sum=S_row_sum, S_sup=S_sup, qY_sum=qY_sum)
    I = float(cardI)
    A = 2 * n * b * c * I + n * I / epsilon + 0.5 * n**2 * c**2 * I**2 * (I + 1)
    T3 = _times(2 * n * c * I, qbar)
    C_bar = _times(2 * c, S_sup)
    C = _times(n**3 * c * I / epsilon, S_row_sum) + 0.5 * n**2 * C_bar * (I**2 + 1)
    v = -lam * n * kappa + A
    out = StructuralConstants(n, cardI, c, b, kappa, lam, epsilon, qbar, S_row_sum, S_sup, A, qY_sum, T3, C, C_bar, v)
    for k in ("A_n", "B_n", "T3", "C_n", "C_bar", "v_n"):
        if not math.isfinite(getattr(out, k)):
            raise BoundsError(f"{k} is not finite for these inputs")
    return out


@dataclass(frozen=True)
class SDerivativeSums:
    """Aggregated sup-norms of first Y-derivatives of ``S``.

    row: ``sup_z sum_y sum_{g g' i} |Y_{i,z} S_{g g', z y}|``
    row_rev: the same with ``S_{g g', y z}``
    sup_each: ``sum_{g g' i} sup_{y,z} |Y_{i,z} S_{g g', z y}|``
    pair: ``sup_{y,z} sum_{g g' i} |Y_{i,z} S_{g g', z y}|``
    single: ``sup |Y_{a,z} S_{g g', z z'}|``
    """

    row: float = 0.0
    row_rev: float = 0.0
    sup_each: float = 0.0
    pair: float = 0.0
    single: float = 0.0


@dataclass(frozen=True)
class DConstants:
    D_bar: float
    D_n: float
    D_n_minus_1: float
    D_J: float


def d_constants(n: int, cardI: int, c: float, epsilon: float, ys: SDerivativeSums) -> DConstants:
    """Upper bounds on the constants multiplying the ``[Y^(n), S]`` terms."""
    _check_eps(epsilon)
    I = float(cardI)
    e1 = 1 / epsilon
    D_bar = (
        _times(ys.row, e1 * n + 0.5 * n * (n - 1) * c * I)
        + _times(ys.sup_each, n * ((n - 1) * c * I + 0.5 * n * (n - 1) * c**2 * I + c * I + n * c**2 * I**2))
        + _times(ys.row_rev, n * e1 + n * (n - 1) * c * I)
        + _times(ys.pair, n * (n - 1) * c * I + 0.5 * n**2 * (n - 1) * c**2 * I**2)
    )
    D_n = D_bar + _times(n**2 * c * I**2 + n * c * I, ys.pair) + _times(0.5 * n * (n - 1) * c * I**2, ys.row_rev)
    D_nm1 = _times(0.5 * n * (n - 1) * c**2 * I**2, ys.row_rev) + _times(2 * n**2 * c**2 * I**2, ys.pair)
    D_J = _times(n * c * I**2, ys.single)
    return DConstants(D_bar, D_n, D_nm1, D_J)


def e_constants(n: int, cardI: int, c: float, epsilon: float, cardJ: int,
                higher_sum: Sequence[float], higher_inner: Sequence[float], higher_sup: float) -> tuple[float, float]:
    """``(E_n, E'_n)`` from per-``l`` aggregates of ``Y^(n-l) S``, ``l = 1..n-2``.

    ``higher_sum[l-1]`` sums over ``y' in Lambda``, ``higher_inner[l-1]`` over
    ``y' in z`` only. Both sums are empty for ``n <= 2``.
    """
    _check_eps(epsilon)
    ls = max(n - 2, 0)
    if len(higher_sum) < ls or len(higher_inner) < ls:
        raise BoundsError(f"need {ls} higher-derivative aggregates")
    E = sum(higher_sum[:ls]) / epsilon + _times(c * cardI, sum(higher_inner[:ls]))
    Ep = _times((n - 2) * c * cardJ, higher_sup) if ls else 0.0
    return E, Ep


def f_constants(n: int, cardI: int, c: float, epsilon: float,
                higher_sum: Sequence[float], higher_inner: Sequence[float], higher_sup: float) -> tuple[float, float]:
    """``(F_n, F'_n)``, same aggregate conventions as :func:`e_constants`."""
    _check_eps(epsilon)
    ls = max(n - 2, 0)
    if len(higher_sum) < ls or len(higher_inner) < ls:
        raise BoundsError(f"need {ls} higher-derivative aggregates")
    F = sum(higher_sum[:ls]) / epsilon + _times(c * cardI, sum(higher_inner[:ls]))
    Fp = _times(c * cardI, higher_sup) if ls else 0.0
    return F, Fp


# --------------------------------------------------------------------------
# model-derived inputs


def _sup(p: Polynomial) -> float:
    if p.is_zero():
        return 0.0
    if p.is_constant():
        return abs(float(p.constant_term()))
    return math.inf


@dataclass(frozen=True)
class ModelInputs:
    cardI: int
    cardJ: int
    c: float
    b: float
    kappa: float
    lam: float
    R: int
    qbar: float
    qY_sum: float
    qY_pair: float
    S_row_sum: float
    S_sup: float
    ys: SDerivativeSums = field(default_factory=SDerivativeSums)

    def constants(self, n: int, epsilon: float) -> StructuralConstants:
        return structural_constants(n, self.cardI, self.c, self.b, self.kappa, self.lam, epsilon,
                                    self.qbar, self.S_row_sum, self.S_sup, self.qY_sum)

    def coupling(self, n: int, epsilon: float) -> float:
        """``C0``: the weight each level-n energy puts on a neighbour within range."""
        st = self.constants(n, epsilon)
        dc = d_constants(n, self.cardI, self.c, epsilon, self.ys)
        return epsilon * self.qY_pair + st.C_bar + dc.D_n_minus_1 + epsilon * dc.D_J


def model_inputs(model: LatticeModel) -> ModelInputs:
    """Aggregated sup-norms read from the model's polynomials.

    Non-constant polynomials have infinite sup-norm on ``R^m``; they are kept
    as ``inf`` and only tolerated where a vanishing factor removes them.
    """
    gcr = check_gcr(model)
    kap = gcr["kappa"]
    if any(k is None for k in kap):
        raise BoundsError("D must satisfy [Y_a, D] = kappa_a Y_a for every site field")
    origin = (0,) * model.d
    window = {origin, *model.offsets, *model.S}
    window |= {tuple(-v for v in r) for r in window}
    lift = Lift(model, tuple(sorted(window)))
    I = range(len(model.Y))
    qbar = max((_sup(p) for p in model.q.values()), default=0.0)
    qY_sum, qY_pair = 0.0, 0.0
    for z in lift.window:
        per = sum(_sup(apply(lift.field(model.Y[a], z), lift.q(bt, origin))) for a in I for bt in model.q)
        qY_sum += per
        qY_pair = max(qY_pair, per)
    S_row, S_sup = 0.0, 0.0
    ys_row = ys_pair = ys_single = 0.0
    ys_each: dict[tuple, float] = {}
    k = len(model.J)
    for r, mat in model.S.items():
        S_row += 2 * sum(_sup(p) for row in mat for p in row)
        for g in range(k):
            S_sup = max(S_sup, sum(_sup(mat[gp][g]) for gp in range(k)))
        y = r
        for zsite in (origin, y):
            pair = 0.0
            for a in I:
                Yf = lift.field(model.Y[a], zsite)
                for g in range(k):
                    for gp in range(k):
                        s = _sup(apply(Yf, lift.S(r, g, gp, origin)))
                        pair += s
                        ys_single = max(ys_single, s)
                        key = (g, gp, a)
                        ys_each[key] = max(ys_each.get(key, 0.0), s)
            ys_row += pair
            ys_pair = max(ys_pair, pair)
    ys = SDerivativeSums(ys_row, ys_row, sum(ys_each.values()), ys_pair, ys_single)
    return ModelInputs(
        cardI=len(model.Y), cardJ=k, c=float(gcr["c"]), b=max((abs(x) for x in model.b), default=0.0),
        kappa=float(min(kap, default=Fraction(0))), lam=float(model.lam), R=max(model.R, 1),
        qbar=qbar, qY_sum=qY_sum, qY_pair=qY_pair, S_row_sum=S_row, S_sup=S_sup, ys=ys,
    )


# --------------------------------------------------------------------------
# Gronwall propagation


@dataclass
class Propagation:
    """Bound surface ``values[level - 1, time, distance]`` for the squared level norms."""

    t: np.ndarray
    distances: np.ndarray
    values: np.ndarray
    richardson: float
    envelope: BoundEnvelope
    rates: tuple[float, ...]
    C0: float
    R: int

    def at(self, level: int, t: float, distance: int) -> float:
        i = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise BoundsError(f"t = {t} is not on the reported grid")
        return float(self.values[level - 1, i, distance])


def _march(rates: np.ndarray, G: np.ndarray, u0: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Trapezoid solution of ``u(t) = e^{Vt} u0 + int_0^t e^{V(t-s)} G u(s) ds``.

    Each step solves the implicit trapezoid equation exactly, so the result
    is the fixed point of the discretised integral recursion.
    """
    n = len(u0)
    out = np.empty((len(grid), n))
    out[0] = u0
    w = np.zeros(n)
    g_prev = G @ u0
    lu_cache: dict[float, tuple] = {}
    for i in range(1, len(grid)):
        h = grid[i] - grid[i - 1]
        eh = np.exp(rates * h)
        key = round(h, 15)
        if key not in lu_cache:
            lu_cache[key] = scipy.linalg.lu_factor(np.eye(n) - 0.5 * h * G)
        w_part = eh * (w + 0.5 * h * g_prev)
        rhs = np.exp(rates * grid[i]) * u0 + w_part
        u = scipy.linalg.lu_solve(lu_cache[key], rhs)
        g = G @ u
        w = w_part + 0.5 * h * g
        out[i] = u
        g_prev = g
    return out


def _coupling_matrix(levels: int, K: int, R: int, C0: float) -> np.ndarray:
    """``C0`` times the within-range sum, same level and every lower level.

    Lower levels carry the number of ways to drop sites, ``binom(n, l)``.
    """
    size = 2 * K + 1
    M = np.zeros((size, size))
    for k in range(size):
        M[k, max(0, k - R):min(size, k + R + 1)] = 1.0
    G = np.zeros((levels * size, levels * size))
    for l in range(levels):
        for lp in range(l + 1):
            G[l * size:(l + 1) * size, lp * size:(lp + 1) * size] = math.comb(l + 1, lp + 1) * M
    return C0 * G


def gronwall_envelope(
    n: int,
    rates: Sequence[float | StructuralConstants],
    C0: float,
    R: int,
    initial_norms: Sequence[Sequence[float]],
    t: float | Sequence[float],
    N_steps: int = 400,
    max_distance: int | None = None,
    richardson_tol: float = 1e-2,
) -> Propagation:
    """Iterate the level recursions up to level ``n``.

    ``rates[l-1]`` is the diagonal rate of level ``l`` (a float or the
    :class:`StructuralConstants` whose ``rate`` is used). ``initial_norms[l-1][k]``
    is the squared norm at distance ``k`` at time 0; it must vanish beyond
    its last entry. The surface is the Richardson extrapolation of runs with
    ``N_steps`` and ``2 N_steps``.
    """
    if n < 1 or len(rates) < n or len(initial_norms) < n:
        raise BoundsError("need one rate and one initial profile per level")
    if R < 1:
        raise BoundsError("R must be at least 1")
    _nonneg(C0=C0)
    v = np.array([r.rate if isinstance(r, StructuralConstants) else float(r) for r in rates[:n]])
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0) or not np.all(np.isfinite(ts)):
        raise BoundsError("times must be finite and non-negative")
    tmax = float(ts.max())
    support = max(len(p) for p in initial_norms[:n]) - 1
    Dmax = max_distance if max_distance is not None else support + 8 * R
    Cp = C0 * (2 * R + 1)
    pad = R * int(max(20, math.ceil(3 * math.e * Cp * n * tmax)))
    K = Dmax + pad
    size = 2 * K + 1
    u0 = np.zeros(n * size)
    for l in range(n):
        prof = np.asarray(initial_norms[l], dtype=float)
        if np.any(prof < 0):
            raise BoundsError("initial norms must be non-negative")
        for k, val in enumerate(prof):
            u0[l * size + K + k] = val
            u0[l * size + K - k] = val
    rate_vec = np.repeat(v, size)
    G = _coupling_matrix(n, K, R, C0)

    def solve(steps: int) -> np.ndarray:
        grid = np.union1d(np.linspace(0.0, tmax, steps + 1), ts) if tmax > 0 else np.array([0.0])
        sol = _march(rate_vec, G, u0, grid)
        return sol[np.searchsorted(grid, ts)]

    coarse, fine = solve(N_steps), solve(2 * N_steps)
    vals = (4 * fine - coarse) / 3
    floor = 1e-300
    # the check covers the reported distances only, not the padding
    sl = np.zeros(size, bool)
    sl[K - Dmax:K + Dmax + 1] = True
    sl = np.tile(sl, n)
    fr, cr = fine[:, sl], coarse[:, sl]
    mask = np.abs(fr) > floor
    rich = float(np.max(np.abs(fr - cr)[mask] / np.abs(fr[mask]))) if mask.any() else 0.0
    if not np.all(np.isfinite(vals)):
        raise BoundsError("propagation produced non-finite values")
    cap_rate = 2 * (float(np.max(np.abs(v))) + Cp * 2**n)
    cap = np.exp(cap_rate * ts)[:, None] * max(float(u0.max()), floor)
    if np.any(vals.reshape(len(ts), n, size).max(axis=1) > cap * (1 + 1e-9)):
        raise BoundsError(f"non-convergent iteration: growth beyond exp({cap_rate:.3g} t)")
    if rich > richardson_tol:
        raise BoundsError(f"Richardson check failed: relative change {rich:.3g} between {N_steps} and {2 * N_steps} steps")
    vals = np.maximum(vals, 0.0)
    surf = vals.reshape(len(ts), n, size)[:, :, K:K + Dmax + 1].transpose(1, 0, 2)
    dists = np.arange(Dmax + 1)
    return Propagation(ts, dists, surf, rich, dominating_envelope(ts, dists, surf[n - 1]), tuple(v), C0, R)


def dominating_envelope(t: np.ndarray, dists: np.ndarray, values: np.ndarray) -> BoundEnvelope:
    """``B e^{ct - v dist}`` fitted in log space, then lifted until it dominates every value."""
    T, Dg = np.meshgrid(t, dists, indexing="ij")
    pos = values > 1e-300
    if not pos.any():
        return BoundEnvelope(0.0, 0.0, 0.0, 1.0, True, "identically zero", "propagated")
    y = np.log(values[pos])
    A = np.column_stack([np.ones(pos.sum()), T[pos], -Dg[pos]])
    coef = np.linalg.lstsq(A, y, rcond=None)[0] if pos.sum() >= 3 else np.array([y.max(), 0.0, 0.0])
    c, v = max(float(coef[1]), 0.0), max(float(coef[2]), 0.0)
    logB = float(np.max(y - c * T[pos] + v * Dg[pos]))
    pred = logB + c * T[pos] - v * Dg[pos]
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
    return BoundEnvelope(math.exp(logB), c, v, r2, True, "", "propagated")


# --------------------------------------------------------------------------
# closed forms for the n = 1 chain


def walk_counts(j: int, R: int) -> list[int]:
    """Number of ``j``-step walks with steps in ``[-R, R]`` ending at each of ``-jR..jR``."""
    w = [1]
    for _ in range(j):
        nw = [0] * (len(w) + 2 * R)
        for i, a in enumerate(w):
            if a:
                for s in range(2 * R + 1):
                    nw[i + s] += a
        w = nw
    return w


def walk_series(v: float, C: float, R: int, t: float, distance: int, u0: float = 1.0, tol: float = 1e-17) -> float:
    """Exact fixed point of the n = 1 recursion with ``u0`` at the origin:
    ``e^{vt} sum_j (Ct)^j / j! W_j(distance)``."""
    x = C * t
    j0 = -(-distance // R)
    total, w = 0.0, walk_counts(j0, R)
    j = j0
    while True:
        mid = len(w) // 2
        term = (math.exp(j * math.log(x) - math.lgamma(j + 1)) if x > 0 else float(j == 0)) * w[mid + distance]
        total += term
        if j > j0 and (x == 0 or term <= tol * total) and j > x:
            break
        j += 1
        nw = [0] * (len(w) + 2 * R)
        for i, a in enumerate(w):
            for s in range(2 * R + 1):
                nw[i + s] += a
        w = nw
    return math.exp(v * t) * total * u0


def factorial_majorant(v: float, C: float, R: int, t: float, N: int, u0: float = 1.0) -> float:
    """``e^{(v + C')t} sum_{j >= N} (C't)^j / j!`` with ``C' = C (2R + 1)``."""
    Cp = C * (2 * R + 1)
    tail = math.exp(Cp * t) * float(gammainc(N, Cp * t)) if N > 0 else math.exp(Cp * t)
    return math.exp((v + Cp) * t) * tail * u0


@dataclass(frozen=True)
class DecayCheck:
    threshold: float
    ratios: tuple[float, ...]
    max_ratio: float
    ok: bool


def factorial_decay(values: Sequence[float], t: float, C0: float, R: int) -> DecayCheck:
    """Successive ratios of a distance profile beyond ``e C' t / R``.

    Geometric (or faster) decay means every ratio stays below one and the
    ratios do not increase.
    """
    Cp = C0 * (2 * R + 1)
    thr = math.e * Cp * t / R
    v = np.asarray(values, dtype=float)
    start = int(math.floor(thr)) + 1
    idx = [k for k in range(start, len(v) - 1) if v[k] > 1e-280 and v[k + 1] > 1e-280]
    ratios = tuple(float(v[k + 1] / v[k]) for k in idx)
    if not ratios:
        return DecayCheck(thr, (), 0.0, False)
    mono = all(b <= a * (1 + 1e-6) for a, b in zip(ratios, ratios[1:]))
    return DecayCheck(thr, ratios, max(ratios), max(ratios) < 1 and mono)


def consistency(fitted: BoundEnvelope, prop: Propagation, points: Sequence[tuple[float, int]], level: int = 1) -> tuple[bool, float]:
    """Whether the squared fitted lattice envelope lies below the propagated surface.

    Returns the verdict and the largest ratio fitted^2 / propagated.
    """
    worst = 0.0
    for t, d in points:
        f2 = float(fitted(t, d)) ** 2
        p = prop.at(level, t, d)
        worst = max(worst, math.inf if p <= 0 and f2 > 0 else (f2 / p if p > 0 else 0.0))
    return worst <= 1.0, worst
