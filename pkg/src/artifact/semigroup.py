"""Numerical semigroup ``P_t = exp(tL)`` for ``L = Z_0^2 + B - lambda D``.

Three oracles live here:

* an Euler-Maruyama Monte Carlo engine whose randomness is a pure function
  of ``(seed, path index)``;
* an explicit finite-difference solver on a uniform box with frozen
  boundary values (``grid_evolve``);
* a co-moving-frame solver for linear drift and constant ``Z_0``
  (``frame_evolve``). Writing ``u(t, x) = w(t, e^{tM} x)`` turns
  ``u_t = Lu`` into ``w_s = (d(s) . grad)^2 w`` with ``d(s) = e^{sM} z_0``,
  a pure degenerate diffusion. With no transport left, the grid can be
  fitted to the shrinking length scales of short times.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .coeffsolve import CoefficientTable, evaluate_gamma
from .liealg import (
    CRIReport,
    OperatorWord,
    Polynomial,
    VectorField,
    apply,
    commutator,
    generate_chain,
    kappa_of,
    verify_cri,
)

ScalarField = Callable[[np.ndarray], np.ndarray]

BLOCK = 1024  # paths per RNG block; fixed so results do not depend on scheduling


class SemigroupError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Operator and SDE


@dataclass(frozen=True)
class ModelOperator:
    m: int
    Z_fields: tuple[VectorField, ...]
    B: VectorField
    lam: float = 0.0
    D: VectorField | None = None
    report: CRIReport | None = None
    kappa: tuple[Fraction | None, ...] = ()

    @property
    def Z0(self) -> VectorField:
        return self.Z_fields[0]

    @classmethod
    def build(
        cls, Z0: VectorField, B: VectorField, lam: float = 0.0, D: VectorField | None = None, max_depth: int = 8
    ) -> "ModelOperator":
        chain, sc = generate_chain(Z0, B, max_depth)
        rep = verify_cri(chain, sc)
        kap: tuple = ()
        if D is not None:
            kap = tuple(kappa_of(Z, D) for Z in chain)
        return cls(Z0.dim, tuple(chain), B, float(lam), D, rep, kap)

    def drift_field(self) -> VectorField:
        """``B - lambda D`` plus ``Z_0`` applied to its own coefficients."""
        sig = self.Z0.components
        ito = VectorField(tuple(apply(self.Z0, s) for s in sig))
        out = self.B + ito
        if self.D is not None and self.lam:
            out = out - self.D.scale(Fraction(self.lam).limit_denominator(10**12))
        return out

    def apply_exact(self, g: Polynomial) -> Polynomial:
        out = apply(self.Z0, apply(self.Z0, g)) + apply(self.B, g)
        if self.D is not None and self.lam:
            out = out - apply(self.D, g) * Fraction(self.lam).limit_denominator(10**12)
        return out


@dataclass(frozen=True)
class SdeSystem:
    """``dX = drift(X) dt + scale * sum_j sigma_j(X) dW_j``."""

    m: int
    drift: tuple[Polynomial, ...]
    sigma: tuple[tuple[Polynomial, ...], ...]
    scale: float = math.sqrt(2.0)

    def drift_at(self, X: np.ndarray) -> np.ndarray:
        return np.stack([p.evaluate(X) for p in self.drift], axis=-1)

    def sigma_at(self, X: np.ndarray) -> np.ndarray:
        """Shape ``(..., m, k)``."""
        return np.stack([np.stack([p.evaluate(X) for p in col], axis=-1) for col in self.sigma], axis=-1)


def to_sde(op: ModelOperator) -> SdeSystem:
    return SdeSystem(op.m, op.drift_field().components, (op.Z0.components,))


def generator_match(op: ModelOperator, sde: SdeSystem, max_degree: int = 3) -> bool:
    """Exact check that ``drift . grad + (scale^2/2) sigma sigma^T : Hess`` equals ``L`` on monomials."""
    half_s2 = Fraction(1)  # scale**2 / 2 with scale = sqrt(2)
    if not math.isclose(sde.scale**2 / 2, 1.0):
        raise SemigroupError("generator check assumes scale sqrt(2)")
    m = op.m
    for deg in range(max_degree + 1):
        for exp in _exponents(m, deg):
            g = Polynomial(m, {exp: 1})
            lhs = Polynomial.zero(m)
            for i, p in enumerate(sde.drift):
                lhs = lhs + p * g.diff(i)
            for col in sde.sigma:
                for i in range(m):
                    for j in range(m):
                        lhs = lhs + col[i] * col[j] * g.diff(i).diff(j) * half_s2
            if lhs != op.apply_exact(g):
                return False
    return True


def _exponents(m: int, deg: int):
    if m == 1:
        yield (deg,)
        return
    for first in range(deg, -1, -1):
        for rest in _exponents(m - 1, deg - first):
            yield (first, *rest)


# --------------------------------------------------------------------------
# Monte Carlo


def block_rng(seed: int, block: int, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(block), *extra])))


def run_blocks(n_paths: int, work: Callable[[int, int], np.ndarray], threads: int = 1, block: int = BLOCK) -> np.ndarray:
    """Evaluate ``work(block_index, size)`` for every block and concatenate in block order."""
    jobs = [(b, min(block, n_paths - b * block)) for b in range(math.ceil(n_paths / block))]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda j: work(*j), jobs))
    else:
        parts = [work(b, n) for b, n in jobs]
    return np.concatenate(parts, axis=0)


def euler_maruyama(
    sde: SdeSystem, x0: Sequence[float], t: float, paths: int, dt: float, seed: int, threads: int = 1
) -> np.ndarray:
    """Terminal states, shape ``(paths, m)``."""
    x0 = np.asarray(x0, dtype=float)
    n_steps = max(1, math.ceil(t / dt - 1e-12))
    h = t / n_steps
    k = len(sde.sigma)

    def work(b: int, n: int) -> np.ndarray:
        rng = block_rng(seed, b)
        X = np.tile(x0, (n, 1))
        with np.errstate(all="ignore"):
            for _ in range(n_steps):
                dW = rng.standard_normal((n, k)) * math.sqrt(h)
                X = X + sde.drift_at(X) * h + sde.scale * np.einsum("pik,pk->pi", sde.sigma_at(X), dW)
        return X

    return run_blocks(paths, work, threads)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    excluded: int = 0

    def __iter__(self):
        yield self.mean
        yield self.stderr


def summarize(values: np.ndarray, max_bad_fraction: float = 1e-3) -> MCEstimate:
    """Mean and standard error with the non-finite path policy."""
    ok = np.isfinite(values)
    bad = int(values.size - ok.sum())
    if bad > max_bad_fraction * values.size:
        raise SemigroupError(f"{bad} of {values.size} paths non-finite (limit {max_bad_fraction:.1%})")
    v = values[ok]
    mean = float(np.sum(v) / v.size)
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return MCEstimate(mean, se, bad)


def mc_expectation(
    sde: SdeSystem,
    f: ScalarField,
    x0: Sequence[float],
    t: float,
    paths: int,
    dt: float,
    seed: int,
    threads: int = 1,
) -> MCEstimate:
    if t < 0 or paths < 1:
        raise SemigroupError("need t >= 0 and paths >= 1")
    x0 = np.asarray(x0, dtype=float)
    if t == 0:
        return MCEstimate(float(f(x0[None, :])[0]), 0.0)
    X = euler_maruyama(sde, x0, t, paths, dt, seed, threads)
    with np.errstate(all="ignore"):
        vals = np.asarray(f(X), dtype=float)
    return summarize(vals)


# --------------------------------------------------------------------------
# Uniform grid with frozen boundary


@dataclass(frozen=True)
class GridConfig:
    lower: tuple[float, ...] = (-4.0, -4.0)
    upper: tuple[float, ...] = (4.0, 4.0)
    nodes: tuple[int, ...] = (201, 201)
    dt: float | None = None
    scheme: str = "rk4"
    interior_margin: float = 0.15
    safety: float = 0.5

    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes)]

    def mesh(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def nearest_index(self, point: Sequence[float]) -> tuple[int, ...]:
        return tuple(
            int(np.clip(round((p - lo) / h), 0, n - 1))
            for p, lo, h, n in zip(point, self.lower, self.h, self.nodes)
        )

    def interior_slices(self) -> tuple[slice, ...]:
        out = []
        for n in self.nodes:
            cut = max(1, int(round(self.interior_margin * (n - 1))))
            out.append(slice(cut, n - cut))
        return tuple(out)


def _sl(m: int, axis_offsets: dict[int, int]) -> tuple[slice, ...]:
    """View of the interior shifted by the given offsets."""
    out = []
    for ax in range(m):
        o = axis_offsets.get(ax, 0)
        out.append(slice(1 + o, -1 + o if -1 + o != 0 else None))
    return tuple(out)


def stencil_apply(u: np.ndarray, a: dict, c: dict, h: Sequence[float]) -> np.ndarray:
    """``sum a_ij d_ij u + sum c_i d_i u`` on interior nodes, zero on the boundary.

    ``a`` maps ``(i, j)`` with ``i <= j`` to coefficients (arrays sized like the
    interior, or scalars); off-diagonal entries count once for ``ij`` and ``ji``.
    """
    m = u.ndim
    out = np.zeros_like(u)
    core = u[_sl(m, {})]
    acc = np.zeros_like(core)
    for (i, j), aij in a.items():
        if i == j:
            d2 = (u[_sl(m, {i: 1})] - 2 * core + u[_sl(m, {i: -1})]) / h[i] ** 2
            acc += aij * d2
        else:
            dij = (
                u[_sl(m, {i: 1, j: 1})] - u[_sl(m, {i: 1, j: -1})]
                - u[_sl(m, {i: -1, j: 1})] + u[_sl(m, {i: -1, j: -1})]
            ) / (4 * h[i] * h[j])
            acc += 2 * aij * dij
    for i, ci in c.items():
        acc += ci * (u[_sl(m, {i: 1})] - u[_sl(m, {i: -1})]) / (2 * h[i])
    out[_sl(m, {})] = acc
    return out


class DiscreteGenerator:
    """Finite-difference ``L`` on a :class:`GridConfig` box."""

    def __init__(self, op: ModelOperator, config: GridConfig):
        if config.m != op.m:
            raise SemigroupError(f"grid has {config.m} axes, operator acts on R^{op.m}")
        self.op, self.config = op, config
        mesh = config.mesh()
        interior = mesh[_sl(op.m, {})]
        sig = [p.evaluate(interior) for p in op.Z0.components]
        self.a = {}
        for i in range(op.m):
            for j in range(i, op.m):
                if not (op.Z0.components[i].is_zero() or op.Z0.components[j].is_zero()):
                    self.a[(i, j)] = sig[i] * sig[j]
        drift = op.drift_field()
        self.c = {i: p.evaluate(interior) for i, p in enumerate(drift.components) if not p.is_zero()}
        h = config.h
        amax = max((float(np.max(np.abs(v))) for (i, j), v in self.a.items() if i == j), default=0.0)
        cmax = [float(np.max(np.abs(self.c[i]))) / h[i] if i in self.c else 0.0 for i in range(op.m)]
        bounds = []
        if amax > 0:
            bounds.append(min(h) ** 2 / (2 * op.m * amax))
        if max(cmax) > 0:
            bounds.append(1.0 / sum(cmax))
        self.dt_bound = min(bounds) if bounds else math.inf
        dt = config.dt if config.dt is not None else config.safety * self.dt_bound
        if dt > self.dt_bound * (1 + 1e-12):
            raise SemigroupError(f"dt={dt:.3g} exceeds the stability bound {self.dt_bound:.3g}")
        self.dt = dt

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return stencil_apply(u, self.a, self.c, self.config.h)


@dataclass
class GridResult:
    u: np.ndarray
    contamination: float
    steps: int
    config: GridConfig


def _rk4(rhs: Callable[[float, np.ndarray], np.ndarray], u: np.ndarray, s: float, dt: float) -> np.ndarray:
    k1 = rhs(s, u)
    k2 = rhs(s + dt / 2, u + dt / 2 * k1)
    k3 = rhs(s + dt / 2, u + dt / 2 * k2)
    k4 = rhs(s + dt, u + dt * k3)
    return u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _ring(m: int, nodes: Sequence[int]) -> np.ndarray:
    """Mask of nodes adjacent to the frozen boundary."""
    mask = np.zeros(nodes, dtype=bool)
    inner = np.zeros(nodes, dtype=bool)
    inner[tuple(slice(1, n - 1) for n in nodes)] = True
    core = np.zeros(nodes, dtype=bool)
    core[tuple(slice(2, n - 2) for n in nodes)] = True
    mask[inner & ~core] = True
    return mask


def grid_evolve(
    op: ModelOperator, f_grid: np.ndarray, t: float, config: GridConfig, gen: DiscreteGenerator | None = None
) -> GridResult:
    if t < 0:
        raise SemigroupError("t must be non-negative")
    gen = gen or DiscreteGenerator(op, config)
    u0 = np.array(f_grid, dtype=float)
    if u0.shape != tuple(config.nodes):
        raise SemigroupError("grid function has the wrong shape")
    u = u0.copy()
    steps = 0
    if t > 0:
        steps = max(1, math.ceil(t / gen.dt - 1e-9))
        dt = t / steps
        rhs = lambda s, v: gen(v)  # noqa: E731
        for i in range(steps):
            if config.scheme == "rk4":
                u = _rk4(rhs, u, i * dt, dt)
            elif config.scheme == "euler":
                u = u + dt * gen(u)
            else:
                raise SemigroupError(f"unknown scheme {config.scheme!r}")
    ring = _ring(config.m, config.nodes)
    contamination = float(np.max(np.abs(u - u0)[ring])) if ring.any() else 0.0
    return GridResult(u, contamination, steps, config)


def _central(g: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.full_like(g, np.nan)
    lo = [slice(None)] * g.ndim
    hi = [slice(None)] * g.ndim
    mid = [slice(None)] * g.ndim
    lo[axis], hi[axis], mid[axis] = slice(None, -2), slice(2, None), slice(1, -1)
    out[tuple(mid)] = (g[tuple(hi)] - g[tuple(lo)]) / (2 * h)
    return out


def word_derivative(
    u: np.ndarray, word: OperatorWord | Sequence[int], Z_fields: Sequence[VectorField], config: GridConfig
) -> np.ndarray:
    """``Z_k1(...(Z_kn u))`` by central differences; stencils that leave the box give NaN."""
    idx = word.indices if isinstance(word, OperatorWord) else tuple(word)
    if any(k >= len(Z_fields) for k in idx):
        raise SemigroupError(f"word {idx} uses a field beyond the chain")
    mesh = config.mesh()
    g = np.asarray(u, dtype=float)
    for k in reversed(idx):
        X = Z_fields[k]
        acc = np.zeros_like(g)
        for i, p in enumerate(X.components):
            if not p.is_zero():
                acc = acc + p.evaluate(mesh) * _central(g, i, config.h[i])
        g = acc
    return g


def sup_interior(g: np.ndarray, config: GridConfig) -> float:
    return float(np.nanmax(np.abs(g[config.interior_slices()])))


# --------------------------------------------------------------------------
# Co-moving frame for linear drift and constant Z_0


@dataclass(frozen=True)
class LinearStructure:
    M: np.ndarray
    z0: np.ndarray

    def flow(self, t: float) -> np.ndarray:
        return expm(t * self.M)

    def covariance(self, t: float) -> np.ndarray:
        """``2 int_0^t e^{sM} z0 z0^T e^{sM^T} ds`` (Van Loan block exponential)."""
        m = self.M.shape[0]
        Q = 2.0 * np.outer(self.z0, self.z0)
        big = np.zeros((2 * m, 2 * m))
        big[:m, :m] = -self.M
        big[:m, m:] = Q
        big[m:, m:] = self.M.T
        F = expm(big * t)
        return F[m:, m:].T @ F[:m, m:]


def linear_structure(op: ModelOperator) -> LinearStructure:
    drift = op.drift_field()
    M = np.zeros((op.m, op.m))
    for i, p in enumerate(drift.components):
        for e, c in p.terms.items():
            if sum(e) != 1:
                raise SemigroupError("frame oracle needs a linear drift without constant term")
            M[i, e.index(1)] = float(c)
    if not all(p.is_constant() for p in op.Z0.components):
        raise SemigroupError("frame oracle needs a constant Z_0")
    return LinearStructure(M, np.array([float(p.constant_term()) for p in op.Z0.components]))


def gaussian_expectation(ls: LinearStructure, A: np.ndarray, x: np.ndarray, t: float) -> np.ndarray:
    """Exact ``P_t f`` for ``f(x) = exp(-x^T A x / 2)`` under linear dynamics."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = x @ ls.flow(t).T
    S = ls.covariance(t)
    m = A.shape[0]
    K = A @ np.linalg.inv(np.eye(m) + S @ A)
    det = np.linalg.det(np.eye(m) + A @ S)
    return det**-0.5 * np.exp(-0.5 * np.einsum("pi,ij,pj->p", mean, K, mean))


@dataclass(frozen=True)
class FrameWindow:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    nodes: tuple[int, ...]

    def as_grid(self) -> GridConfig:
        return GridConfig(self.lower, self.upper, self.nodes, interior_margin=0.0)


@dataclass
class FrameSolution:
    t: float
    w: np.ndarray
    window: FrameWindow
    structure: LinearStructure
    steps: int

    def direction(self, z: np.ndarray) -> np.ndarray:
        """A constant field ``z`` seen in frame coordinates."""
        return self.structure.flow(self.t) @ z


def _neumann_apply(w: np.ndarray, d: np.ndarray, h: Sequence[float]) -> np.ndarray:
    p = np.pad(w, 1, mode="edge")
    a = {}
    m = w.ndim
    for i in range(m):
        for j in range(i, m):
            if d[i] and d[j]:
                a[(i, j)] = d[i] * d[j]
    return stencil_apply(p, a, {}, h)[_sl(m, {})]


def frame_evolve(
    op: ModelOperator, f: ScalarField, t: float, window: FrameWindow, courant: float = 1.0
) -> FrameSolution:
    """Solve ``w_s = (d(s) . grad)^2 w`` on ``window`` with reflecting edges.

    ``f`` is evaluated on the window, so the window is in frame coordinates
    ``y = e^{tM} x``; ``u(t, x) = w(t, e^{tM} x)``.
    """
    ls = linear_structure(op)
    grid = window.as_grid()
    h = grid.h
    w = np.asarray(f(grid.mesh()), dtype=float)
    s, steps = 0.0, 0
    def lam_at(r: float) -> float:
        d = ls.flow(r) @ ls.z0
        return 4.0 * (sum(abs(di) / hi for di, hi in zip(d, h))) ** 2

    while s < t * (1 - 1e-12):
        # the direction turns during a step, so bound lambda over the whole step
        dt = t - s
        for _ in range(60):
            lam = max(lam_at(s + dt * k / 4) for k in range(5))
            if lam * dt <= courant:
                break
            dt = courant / lam
        rhs = lambda r, v: _neumann_apply(v, ls.flow(r) @ ls.z0, h)  # noqa: E731
        w = _rk4(rhs, w, s, dt)
        s += dt
        steps += 1
    return FrameSolution(t, w, window, ls, steps)


def frame_word_derivative(sol: FrameSolution, word: OperatorWord | Sequence[int], Z_fields: Sequence[VectorField]) -> np.ndarray:
    idx = word.indices if isinstance(word, OperatorWord) else tuple(word)
    h = sol.window.as_grid().h
    g = sol.w
    for k in reversed(idx):
        X = Z_fields[k]
        if not all(p.is_constant() for p in X.components):
            raise SemigroupError("frame derivatives need constant fields")
        d = sol.direction(np.array([float(p.constant_term()) for p in X.components]))
        acc = np.zeros_like(g)
        for i, di in enumerate(d):
            if abs(di) > 1e-15:
                acc = acc + di * _central(g, i, h[i])
        g = acc
    return g


# --------------------------------------------------------------------------
# Measurements


@dataclass
class SmoothingFit:
    word: tuple[int, ...]
    fitted_slope: float
    predicted_slope: float
    residual: float
    r2: float
    t: np.ndarray
    norms: np.ndarray
    contamination: np.ndarray = field(default_factory=lambda: np.zeros(0))


def fit_loglog(t: Sequence[float], norms: Sequence[float]) -> tuple[float, float, float]:
    """Slope, rms residual and R^2 of ``log norm`` against ``log t``."""
    x, y = np.log(np.asarray(t)), np.log(np.asarray(norms))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res**2)) / ss if ss > 0 else 1.0
    return float(coef[0]), float(np.sqrt(np.mean(res**2))), r2


NOISE_FLOOR = 1e-10


def smoothing_exponent(
    op: ModelOperator,
    f: ScalarField,
    word: Sequence[int],
    t_list: Sequence[float],
    config: GridConfig | Callable[[float], FrameWindow],
    contamination_limit: float = 1e-6,
) -> SmoothingFit:
    """Fit the short-time exponent of ``sup |Z_k f_t|``.

    ``config`` is either a :class:`GridConfig` (frozen-boundary oracle) or a
    map ``t -> FrameWindow`` selecting the co-moving-frame oracle.
    """
    word = tuple(word)
    w_obj = OperatorWord(word)
    norms, contam = [], []
    if isinstance(config, GridConfig):
        gen = DiscreteGenerator(op, config)
        f0 = f(config.mesh())
        scale = float(np.max(np.abs(f0)))
        for t in t_list:
            res = grid_evolve(op, f0, t, config, gen)
            if res.contamination > contamination_limit * scale:
                raise SemigroupError(f"boundary contamination {res.contamination:.3g} at t={t}")
            norms.append(sup_interior(word_derivative(res.u, word, op.Z_fields, config), config))
            contam.append(res.contamination)
    else:
        for t in t_list:
            sol = frame_evolve(op, f, t, config(t))
            g = frame_word_derivative(sol, word, op.Z_fields)
            norms.append(float(np.nanmax(np.abs(g[2:-2, 2:-2] if g.ndim == 2 else g[2:-2]))))
            contam.append(0.0)
    norms = np.array(norms)
    if np.any(norms < NOISE_FLOOR):
        raise SemigroupError(f"norm below noise floor {NOISE_FLOOR:g} for word {word}: {norms.min():.3g}")
    slope, resid, r2 = fit_loglog(t_list, norms)
    return SmoothingFit(word, slope, -w_obj.rank / 2, resid, r2, np.asarray(t_list), norms, np.array(contam))


def _gamma_grid(table: CoefficientTable, u: np.ndarray, s: float, fields, config, level: int) -> np.ndarray:
    if level == 0 or s == 0:
        return np.zeros_like(u)
    vals = {k: word_derivative(u, k, fields, config) for k in table.words(level)}
    g, _ = evaluate_gamma(table, vals, s, level)
    return g


def _Q_grid(table: CoefficientTable, u: np.ndarray, s: float, fields, config, level: int) -> np.ndarray:
    """``Q^(l) = Gamma^(l) + varsigma_l Q^(l-1)``, ``Q^(0) = d_0 u^2``."""
    if level == 0:
        return table.d_levels[0] * u**2
    return _gamma_grid(table, u, s, fields, config, level) + table.varsigma[level - 1] * _Q_grid(
        table, u, s, fields, config, level - 1
    )


@dataclass
class VarianceCheck:
    worst_margin: float
    lhs: np.ndarray
    rhs: np.ndarray
    contamination: float
    required_d: float = 0.0  # smallest d_l that would still pass at these points


def variance_bound_check(
    op: ModelOperator,
    f: ScalarField,
    table: CoefficientTable,
    t: float,
    sample_points: np.ndarray,
    config: GridConfig = GridConfig(),
    level: int | None = None,
) -> VarianceCheck:
    """``min (d_l Var - Gamma^(l))`` over the sample points (nearest grid nodes)."""
    level = table.n if level is None else level
    gen = DiscreteGenerator(op, config)
    f0 = f(config.mesh())
    r1 = grid_evolve(op, f0, t, config, gen)
    r2 = grid_evolve(op, f0**2, t, config, gen)
    idx = tuple(np.array([config.nearest_index(p) for p in np.atleast_2d(sample_points)]).T)
    var = (r2.u - r1.u**2)[idx]
    if t > 0 and level > 0:
        vals = {k: word_derivative(r1.u, k, op.Z_fields, config)[idx] for k in table.words(level)}
        lhs, _ = evaluate_gamma(table, vals, t, level)
    else:
        lhs = np.zeros_like(var)
    rhs = table.d_levels[level] * var
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(var > 0, lhs / var, np.where(lhs > 0, np.inf, 0.0))
    return VarianceCheck(
        float(np.min(rhs - lhs)), np.asarray(lhs), rhs, max(r1.contamination, r2.contamination), float(np.max(need))
    )


@dataclass
class ProbeReport:
    s: np.ndarray
    values: np.ndarray
    tolerance: float
    violations: list[int]
    identity: tuple[float, float, float] | None = None

    @property
    def monotone(self) -> bool:
        return not self.violations


def lemma_identity(
    op: ModelOperator,
    f: ScalarField,
    s: float,
    point: Sequence[float],
    W: VectorField,
    V: VectorField,
    config: GridConfig = GridConfig(),
    ds: float | None = None,
) -> tuple[float, float, float]:
    """Both sides of ``(-L + d_s)(Wh Vh) = -2 Z0Wh Z0Vh + [W,L]h Vh + Wh [V,L]h``.

    Returns ``(lhs, rhs, relative error)`` at the grid node nearest ``point``.
    """
    gen = DiscreteGenerator(op, config)
    ds = ds if ds is not None else 20 * gen.dt
    f0 = f(config.mesh())
    mesh = config.mesh()

    def first(X: VectorField, g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(g)
        for i, p in enumerate(X.components):
            if not p.is_zero():
                acc = acc + p.evaluate(mesh) * _central(g, i, config.h[i])
        return acc

    def bracket_L(X: VectorField, g: np.ndarray) -> np.ndarray:
        Z0 = op.Z0
        XZ = commutator(X, Z0)
        out = first(commutator(X, op.B), g) + first(Z0, first(XZ, g)) + first(XZ, first(Z0, g))
        if op.D is not None and op.lam:
            out = out - op.lam * first(commutator(X, op.D), g)
        return out

    hs = {k: grid_evolve(op, f0, s + k * ds, config, gen).u for k in (-1, 0, 1)}
    prod = {k: first(W, h) * first(V, h) for k, h in hs.items()}
    h = hs[0]
    lhs_grid = (prod[1] - prod[-1]) / (2 * ds) - gen(np.nan_to_num(prod[0]))
    rhs_grid = (
        -2 * first(op.Z0, first(W, h)) * first(op.Z0, first(V, h))
        + bracket_L(W, h) * first(V, h)
        + first(W, h) * bracket_L(V, h)
    )
    i = config.nearest_index(point)
    lhs, rhs = float(lhs_grid[i]), float(rhs_grid[i])
    return lhs, rhs, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def q_monotonicity_probe(
    op: ModelOperator,
    f: ScalarField,
    table: CoefficientTable,
    t: float,
    s_list: Sequence[float],
    x0: Sequence[float],
    config: GridConfig = GridConfig(),
    level: int | None = None,
    rel_tol: float = 1e-4,
    check_identity: bool = True,
) -> ProbeReport:
    """``P_{t-s}(Q_s f_s)(x0)`` for each ``s``; flags increases above ``rel_tol`` times the first value."""
    level = table.n if level is None else level
    gen = DiscreteGenerator(op, config)
    f0 = f(config.mesh())
    idx = config.nearest_index(x0)
    vals = []
    for s in s_list:
        fs = grid_evolve(op, f0, s, config, gen).u
        Q = np.nan_to_num(_Q_grid(table, fs, s, op.Z_fields, config, level))
        vals.append(float(grid_evolve(op, Q, t - s, config, gen).u[idx]))
    vals = np.array(vals)
    tol = rel_tol * abs(vals[0])
    bad = [i for i in range(1, len(vals)) if vals[i] > vals[i - 1] + tol]
    ident = None
    if check_identity:
        mid = float(s_list[len(s_list) // 2]) or t / 2
        ident = lemma_identity(op, f, mid, x0, op.Z0, op.Z0, config)
    return ProbeReport(np.asarray(s_list, dtype=float), vals, tol, bad, ident)


def estimate_horizon(
    op: ModelOperator,
    f: ScalarField,
    table: CoefficientTable,
    t_candidates: Sequence[float],
    x0: Sequence[float],
    config: GridConfig = GridConfig(),
    n_s: int = 5,
) -> float:
    """Largest candidate ``t <= 1`` at which the monotonicity probe passes (0 if none)."""
    best = 0.0
    for t in sorted(t_candidates):
        if t > 1:
            break
        rep = q_monotonicity_probe(op, f, table, t, np.linspace(0, t, n_s), x0, config, check_identity=False)
        if rep.monotone:
            best = t
    return best
