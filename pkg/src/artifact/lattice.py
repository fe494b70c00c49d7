"""Finite truncations of the lattice generator

    L_Lambda = sum_x (Y_{J,x}^2 + B_x - lambda D_x) + sum_{y in Lambda} q_y . Y_y
               + sum_{y != y' in Lambda} S_{yy'} . Y_y Y_{y'}

with translation-invariant, finite-range ``q`` and ``S``.

Sites within interaction range of the box (the halo) are simulated with
their free dynamics ``L_x`` only, because ``q_y`` for ``y`` in the box may
read them. Every simulated site owns a noise stream keyed by
``(seed, block, site)``, so runs on nested boxes share noise site by site
and differences between them are common-random-number estimates.

Interaction polynomials use a fixed variable layout: for offsets
``r_0, r_1, ...`` variable ``x{k*m + i + 1}`` is coordinate ``i`` of
``omega_{x + r_k}``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy
from scipy.optimize import minimize_scalar

from .liealg import (
    Polynomial,
    VectorField,
    apply,
    bracket_table,
    commutator,
    kappa_of,
)
from .semigroup import MCEstimate, run_blocks, summarize

Site = tuple[int, ...]


class LatticeError(RuntimeError):
    pass


def box(radius: int, d: int = 1) -> tuple[Site, ...]:
    return tuple(itertools.product(range(-radius, radius + 1), repeat=d))


def dist(x: Site, y: Site) -> int:
    return sum(abs(a - b) for a, b in zip(x, y))


def tree_distance(points: Sequence[Site], support: Sequence[Site]) -> int:
    """Shortest rectilinear tree joining ``points`` to ``support`` (exact for up to two points)."""
    if len(points) > 2:
        raise LatticeError("tree distance implemented for at most two probe sites")
    best = None
    for z in support:
        pts = [*points, z]
        length = sum(max(p[i] for p in pts) - min(p[i] for p in pts) for i in range(len(z)))
        best = length if best is None else min(best, length)
    return int(best)


def _site_code(s: Site) -> list[int]:
    return [len(s), *(c + (1 << 20) for c in s)]


# --------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class LatticeModel:
    d: int
    sites: tuple[Site, ...]
    m: int
    Y: tuple[VectorField, ...]
    J: tuple[int, ...]
    b: tuple[float, ...] = ()
    lam: float = 0.0
    D: VectorField | None = None
    offsets: tuple[Site, ...] = ()
    q: Mapping[int, Polynomial] = field(default_factory=dict)
    S: Mapping[Site, tuple[tuple[Polynomial, ...], ...]] = field(default_factory=dict)
    delta: float = 0.0

    def __post_init__(self):
        if any(Y.dim != self.m for Y in self.Y):
            raise LatticeError("site fields must act on R^m")
        if not set(self.J) <= set(range(len(self.Y))):
            raise LatticeError("J must index site fields")
        if self.b and len(self.b) != len(self.Y):
            raise LatticeError("b needs one entry per site field")
        nvar = len(self.offsets) * self.m
        for a, p in self.q.items():
            if not 0 <= a < len(self.Y):
                raise LatticeError(f"q component {a} has no field")
            if p.dim != nvar:
                raise LatticeError(f"q_{a} must be a polynomial in {nvar} variables")
        for r, mat in self.S.items():
            if not any(r):
                raise LatticeError("S must vanish on the diagonal (offset 0)")
            if len(mat) != len(self.J) or any(len(row) != len(self.J) for row in mat):
                raise LatticeError("S blocks are |J| x |J|")
            for row in mat:
                for p in row:
                    if p.dim != 2 * self.m:
                        raise LatticeError("S entries are polynomials in (omega_x, omega_{x+r})")
        if self.S and self.s_constant():
            lo = float(np.linalg.eigvalsh(self.diffusion_matrix()).min())
            if lo < 1 - self.delta - 1e-12 or lo <= 0:
                raise LatticeError(f"Id + sym(S) has eigenvalue {lo:.4g} below 1 - delta = {1 - self.delta:.4g}")

    # geometry
    @property
    def R(self) -> int:
        ds = [dist(r, (0,) * self.d) for r in self.offsets if self._offset_used(r)]
        ds += [dist(r, (0,) * self.d) for r in self.S]
        return max(ds, default=0)

    def _offset_used(self, r: Site) -> bool:
        k = self.offsets.index(r)
        block = set(range(k * self.m, (k + 1) * self.m))
        return any(p.variables() & block for p in self.q.values())

    @property
    def sim_sites(self) -> tuple[Site, ...]:
        """The box followed by the halo within range R, in a fixed order."""
        inside = set(self.sites)
        halo = set()
        for x in self.sites:
            for r in self.offsets:
                y = tuple(a + b for a, b in zip(x, r))
                if y not in inside:
                    halo.add(y)
        return tuple(self.sites) + tuple(sorted(halo))

    def index(self) -> dict[Site, int]:
        return {s: i for i, s in enumerate(self.sim_sites)}

    def s_constant(self) -> bool:
        return all(p.is_constant() for mat in self.S.values() for row in mat for p in row)

    def diffusion_matrix(self, omega: np.ndarray | None = None) -> np.ndarray:
        """``Id + sym(S)`` over channels (site, alpha in J) of the simulated sites."""
        idx = self.index()
        k = len(self.J)
        n = len(idx) * k
        A = np.eye(n)
        for x in self.sites:
            for r, mat in self.S.items():
                y = tuple(a + b for a, b in zip(x, r))
                if y not in idx or y not in set(self.sites):
                    continue
                for i in range(k):
                    for j in range(k):
                        p = mat[i][j]
                        if omega is None:
                            v = float(p.constant_term())
                        else:
                            v = float(p.evaluate(np.concatenate([omega[idx[x]], omega[idx[y]]])))
                        A[idx[x] * k + i, idx[y] * k + j] += 0.5 * v
                        A[idx[y] * k + j, idx[x] * k + i] += 0.5 * v
        return A

    def with_sites(self, sites: Sequence[Site]) -> "LatticeModel":
        return LatticeModel(**{**self.__dict__, "sites": tuple(sites)})

    def with_lambda(self, lam: float) -> "LatticeModel":
        return LatticeModel(**{**self.__dict__, "lam": float(lam)})

    def decoupled(self) -> "LatticeModel":
        return LatticeModel(**{**self.__dict__, "q": {}, "S": {}})

    def kappas(self) -> tuple[Fraction | None, ...]:
        if self.D is None:
            return tuple(None for _ in self.Y)
        return tuple(kappa_of(Y, self.D) for Y in self.Y)

    def structure_constants(self) -> dict[tuple[int, int, int], Fraction]:
        cijh, bad = bracket_table(list(self.Y))
        if bad:
            raise LatticeError(f"site fields do not close: [Y{bad[0][0]}, Y{bad[0][1]}]")
        return cijh


def ou_chain(radius: int, coupling: float = 0.2, lam: float = 1.0, d: int = 1) -> LatticeModel:
    """m = 1 Ornstein-Uhlenbeck fibres, ``Y = d/du``, ``D = u d/du``, ``q_x = coupling * sum of neighbours``."""
    offsets = tuple(r for r in itertools.product((-1, 0, 1), repeat=d) if dist(r, (0,) * d) == 1)
    nvar = len(offsets)
    c = Fraction(coupling).limit_denominator(10**9)
    q = {0: Polynomial(nvar, {tuple(int(i == k) for i in range(nvar)): c for k in range(nvar)})} if coupling else {}
    return LatticeModel(
        d=d,
        sites=box(radius, d),
        m=1,
        Y=(VectorField.coordinate(1, 0),),
        J=(0,),
        b=(0.0,),
        lam=lam,
        D=VectorField.coordinate(1, 0, Polynomial.variable(1, 0)),
        offsets=offsets,
        q=q,
    )


# --------------------------------------------------------------------------
# SDE


@dataclass
class LatticeSde:
    model: LatticeModel
    sim_sites: tuple[Site, ...]
    n_box: int
    nbr: np.ndarray
    ito: tuple[Polynomial, ...]
    base_drift: tuple[Polynomial, ...]
    chol: np.ndarray | None

    @property
    def n_sim(self) -> int:
        return len(self.sim_sites)


def build_coupled_sde(model: LatticeModel) -> LatticeSde:
    sim = model.sim_sites
    idx = {s: i for i, s in enumerate(sim)}
    nbr = np.array(
        [[idx[tuple(a + b for a, b in zip(x, r))] for r in model.offsets] for x in model.sites], dtype=int
    ).reshape(len(model.sites), len(model.offsets))
    m = model.m
    ito = VectorField.zero(m)
    for a in model.J:
        Ya = model.Y[a]
        ito = ito + VectorField(tuple(apply(Ya, p) for p in Ya.components))
    base = ito
    for a, Ya in enumerate(model.Y):
        if model.b and model.b[a]:
            base = base + Ya.scale(Fraction(model.b[a]).limit_denominator(10**12))
    if model.D is not None and model.lam:
        base = base - model.D.scale(Fraction(model.lam).limit_denominator(10**12))
    chol = None
    if model.S and model.s_constant():
        chol = _cholesky(model.diffusion_matrix(), None)
    return LatticeSde(model, sim, len(model.sites), nbr, ito.components, base.components, chol)


def _cholesky(A: np.ndarray, omega) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise LatticeError(f"diffusion matrix not positive definite at configuration {omega}") from None


def _eval_field(Y: VectorField, X: np.ndarray) -> np.ndarray:
    return np.stack([p.evaluate(X) for p in Y.components], axis=-1)


def _drift(sde: LatticeSde, X: np.ndarray) -> np.ndarray:
    """``X`` has shape ``(..., n_sim, m)``."""
    model = sde.model
    out = np.stack([p.evaluate(X) for p in sde.base_drift], axis=-1)
    if model.q:
        nb = X[..., sde.nbr, :]  # (..., n_box, K, m)
        flat = nb.reshape(*nb.shape[:-2], -1)
        inner = X[..., : sde.n_box, :]
        add = np.zeros_like(inner)
        for a, p in model.q.items():
            add = add + p.evaluate(flat)[..., None] * _eval_field(model.Y[a], inner)
        out[..., : sde.n_box, :] += add
    return out


def _diffusion_step(sde: LatticeSde, X: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``sqrt(2) sum_alpha sigma_alpha (L xi)_alpha`` per site; ``xi`` is ``(P, n_sim, |J|)``."""
    model = sde.model
    k = len(model.J)
    if model.S:
        flat = xi.reshape(xi.shape[0], -1)
        if sde.chol is not None:
            mixed = flat @ sde.chol.T
            mixed = mixed.reshape(xi.shape)
            mixed = np.broadcast_to(mixed[:, None], X.shape[:-1] + (k,))
        else:
            P, B = X.shape[0], X.shape[1]
            mixed = np.empty(X.shape[:-1] + (k,))
            for p in range(P):
                for bb in range(B):
                    A = model.diffusion_matrix(X[p, bb])
                    mixed[p, bb] = (_cholesky(A, X[p, bb]) @ flat[p]).reshape(-1, k)
    else:
        mixed = np.broadcast_to(xi[:, None], X.shape[:-1] + (k,))
    out = np.zeros_like(X)
    for c, a in enumerate(model.J):
        out = out + _eval_field(model.Y[a], X) * mixed[..., c : c + 1]
    return math.sqrt(2.0) * out


def simulate(
    sde: LatticeSde,
    omegas: np.ndarray,
    t_grid: Sequence[float],
    paths: int,
    dt: float,
    seed: int,
    threads: int = 1,
) -> np.ndarray:
    """States at the requested times for a batch of initial configurations sharing all noise.

    ``omegas`` has shape ``(B, n_sim, m)``; the result ``(len(t_grid), paths, B, n_sim, m)``.
    """
    omegas = np.asarray(omegas, dtype=float)
    if omegas.ndim == 2:
        omegas = omegas[None]
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0) or t_grid[0] < 0:
        raise LatticeError("t_grid must be non-decreasing and non-negative")
    n_steps = max(0, math.ceil(t_grid[-1] / dt - 1e-9))
    h = t_grid[-1] / n_steps if n_steps else 0.0
    record = [int(round(t / h)) if h else 0 for t in t_grid]
    k = len(sde.model.J)
    sites = sde.sim_sites

    def work(b: int, n: int) -> np.ndarray:
        gens = [np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), b, *_site_code(s)]))) for s in sites]
        noise = np.stack([g.standard_normal((n_steps, n, k)) for g in gens], axis=2) if n_steps else None
        X = np.broadcast_to(omegas, (n,) + omegas.shape).copy()
        out = np.empty((len(t_grid), n) + omegas.shape)
        step = 0
        with np.errstate(all="ignore"):
            for j, target in enumerate(record):
                while step < target:
                    X = X + _drift(sde, X) * h + _diffusion_step(sde, X, noise[step]) * math.sqrt(h)
                    step += 1
                out[j] = X
        return np.moveaxis(out, 1, 0)

    res = run_blocks(paths, work, threads)
    return np.moveaxis(res, 0, 1)


# --------------------------------------------------------------------------
# Observables


@dataclass(frozen=True)
class Cylinder:
    """Cylinder function ``f(omega) = phi(omega_{support})``; ``phi`` sees ``(..., |support|, m)``."""

    support: tuple[Site, ...]
    phi: Callable[[np.ndarray], np.ndarray]

    def __call__(self, model: LatticeModel, X: np.ndarray) -> np.ndarray:
        idx = model.index()
        try:
            cols = [idx[s] for s in self.support]
        except KeyError as exc:
            raise LatticeError(f"support site {exc.args[0]} outside the simulated region") from None
        return self.phi(X[..., cols, :])


def sin_observable(site: Site = (0,), coord: int = 0) -> Cylinder:
    return Cylinder((site,), lambda V: np.sin(V[..., 0, coord]))


def sample_configuration(sites: Sequence[Site], m: int, seed: int, scale: float = 1.0) -> dict[Site, np.ndarray]:
    """Site-keyed Gaussian configuration; the value at a site does not depend on the box."""
    return {
        s: scale * np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7919, *_site_code(s)]))).standard_normal(m)
        for s in sites
    }


def configuration_array(model: LatticeModel, omega: Mapping[Site, np.ndarray] | None = None) -> np.ndarray:
    arr = np.zeros((len(model.sim_sites), model.m))
    if omega:
        for i, s in enumerate(model.sim_sites):
            if s in omega:
                arr[i] = omega[s]
    return arr


def lattice_expectation(
    model: LatticeModel, f: Cylinder, omega: np.ndarray, t: float, paths: int, dt: float, seed: int, threads: int = 1
) -> MCEstimate:
    sde = build_coupled_sde(model)
    if t == 0:
        return MCEstimate(float(f(model, omega[None])[0]), 0.0)
    X = simulate(sde, omega[None], [t], paths, dt, seed, threads)[0, :, 0]
    return summarize(f(model, X))


# --------------------------------------------------------------------------
# Finite speed of propagation


@dataclass
class SiteNorm:
    sites: tuple[Site, ...]
    distance: int
    t: float
    norm: float
    stderr: float
    inconclusive: bool


def fd_step(value: float) -> float:
    return 1e-3 * (1.0 + abs(value))


def derivative_profile(
    model: LatticeModel,
    f: Cylinder,
    t: float,
    probe_sites: Sequence[Site] | Sequence[tuple[Site, Site]],
    configurations: Sequence[np.ndarray],
    order: int = 1,
    paths: int = 2048,
    dt: float = 0.01,
    seed: int = 0,
    threads: int = 1,
) -> list[SiteNorm]:
    """``sup_omega |Y_x f_t(omega)|`` (order 1) or ``|Y_x Y_y f_t|`` (order 2) by CRN differences.

    For order 2 each probe is a pair of distinct sites. Perturbations move
    ``omega_x`` along ``Y_alpha(omega_x)`` by ``+-h`` with ``h = 1e-3 (1 + |omega_x|)``.
    """
    if order not in (1, 2):
        raise LatticeError("order must be 1 or 2")
    sde = build_coupled_sde(model)
    idx = model.index()
    I = range(len(model.Y))
    probes = [(p,) if order == 1 else tuple(p) for p in probe_sites]
    for pr in probes:
        for s in pr:
            if s not in set(model.sites):
                raise LatticeError(f"probe site {s} is outside the box")
    best: dict[tuple, tuple[float, float, bool]] = {}
    for omega in configurations:
        variants = [omega]
        plan = []
        for pr in probes:
            for alphas in itertools.product(I, repeat=len(pr)):
                signs = list(itertools.product((1, -1), repeat=len(pr)))
                start = len(variants)
                hs = []
                for sgn in signs:
                    w = omega.copy()
                    for s, a, e in zip(pr, alphas, sgn):
                        i = idx[s]
                        h = fd_step(float(np.linalg.norm(omega[i])))
                        direction = _eval_field(model.Y[a], omega[i][None])[0]
                        w[i] = w[i] + e * h * direction
                    variants.append(w)
                hs = [fd_step(float(np.linalg.norm(omega[idx[s]]))) for s in pr]
                plan.append((pr, start, signs, hs))
        V = np.array(variants)
        if t == 0:
            vals = f(model, V)[None]
        else:
            X = simulate(sde, V, [t], paths, dt, seed, threads)[0]
            vals = f(model, X)
        per_probe: dict[tuple, list[tuple[float, float]]] = {}
        for pr, start, signs, hs in plan:
            diff = sum(
                math.prod(sgn) * vals[:, start + j] for j, sgn in enumerate(signs)
            ) / (2.0 ** len(pr) * math.prod(hs))
            est = summarize(np.asarray(diff))
            per_probe.setdefault(pr, []).append((est.mean, est.stderr))
        for pr, comps in per_probe.items():
            norm = math.sqrt(sum(mu**2 for mu, _ in comps))
            se = math.sqrt(sum(s**2 for _, s in comps))
            if pr not in best or norm > best[pr][0]:
                best[pr] = (norm, se, se > norm and norm > 0)
    return [
        SiteNorm(pr, tree_distance(pr, f.support), t, *best[pr]) for pr in probes
    ]


@dataclass
class BoundEnvelope:
    B: float
    c: float
    v: float
    r2: float = 1.0
    ok: bool = True
    message: str = ""
    provenance: str = "fitted"

    def __call__(self, t, distance):
        return self.B * np.exp(self.c * np.asarray(t) - self.v * np.asarray(distance))


NORM_FLOOR = 1e-12


def fsp_fit(records: Sequence[SiteNorm] | Sequence[tuple[float, float, float]]) -> BoundEnvelope:
    """Least squares ``log norm = log B + c t - v dist``; ``c = 0`` when only one time is present."""
    rows = [(r.distance, r.t, r.norm) if isinstance(r, SiteNorm) else tuple(r) for r in records]
    dists = {r[0] for r in rows}
    if len(dists) < 4:
        return BoundEnvelope(0, 0, 0, 0, False, "need at least 4 distinct distances")
    if any(not r[2] > NORM_FLOOR for r in rows):
        return BoundEnvelope(0, 0, 0, 0, False, "norm below noise floor")
    d = np.array([r[0] for r in rows], float)
    t = np.array([r[1] for r in rows], float)
    y = np.log([r[2] for r in rows])
    single_t = np.ptp(t) == 0
    cols = [np.ones_like(d), -d] if single_t else [np.ones_like(d), t, -d]
    A = np.vstack(cols).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1 - float(np.sum(res**2)) / ss if ss > 0 else 1.0
    logB, c, v = (coef[0], 0.0, coef[1]) if single_t else coef
    ok = v > 0
    return BoundEnvelope(float(math.exp(logB)), float(c), float(v), r2, bool(ok), "" if ok else "non-negative distance slope")


# --------------------------------------------------------------------------
# Volume convergence


@dataclass
class Convergence:
    radii: list[int]
    sup_diff: list[float]
    stderr: list[float]
    ratios: list[float]

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios else float("nan")


def volume_convergence(
    model: LatticeModel,
    radii: Sequence[int],
    f: Cylinder,
    t: float,
    configurations: Sequence[Mapping[Site, np.ndarray]],
    paths: int = 2048,
    dt: float = 0.01,
    seed: int = 0,
    threads: int = 1,
) -> Convergence:
    """``sup_omega |P^{Lambda_{k+1}}_t f - P^{Lambda_k}_t f|`` for boxes of the given radii."""
    per_radius = []
    for r in radii:
        mdl = model.with_sites(box(r, model.d))
        if not set(f.support) <= set(mdl.sites):
            raise LatticeError("Lambda(f) must lie inside the smallest box")
        omegas = np.array([configuration_array(mdl, w) for w in configurations])
        if t == 0:
            vals = f(mdl, omegas)[None]
        else:
            X = simulate(build_coupled_sde(mdl), omegas, [t], paths, dt, seed, threads)[0]
            vals = f(mdl, X)
        per_radius.append(vals)
    sups, ses = [], []
    for k in range(len(radii) - 1):
        diff = per_radius[k + 1] - per_radius[k]
        best = (0.0, 0.0)
        for c in range(diff.shape[1]):
            est = summarize(diff[:, c])
            if abs(est.mean) >= best[0]:
                best = (abs(est.mean), est.stderr)
        sups.append(best[0])
        ses.append(best[1])
    ratios = [sups[k + 1] / sups[k] for k in range(len(sups) - 1) if sups[k] > 0]
    return Convergence(list(radii), sups, ses, ratios)


# --------------------------------------------------------------------------
# Lyapunov tightness (m = 1 fibres, rho(u) = sqrt(1 + u^2))


@dataclass(frozen=True)
class LyapunovSpec:
    C1: float
    C2: float
    C3: float
    tail_window: float
    eta: np.ndarray
    weights: np.ndarray
    S_sup: float
    C4: float

    @property
    def kappa_bar(self) -> float:
        return self.C4 / self.C2

    @property
    def C_bar(self) -> float:
        return self.C1 + self.C3

    def bound(self, F0: float) -> float:
        """``(1 - kappa_bar)^{-1} (C_bar S + F0)``: the stated tightness bound."""
        return (self.C_bar * self.S_sup + F0) / (1 - self.kappa_bar)

    def bound_gronwall(self, F0: float) -> float:
        """The same Gronwall step carried out with ``sum eps_x``: ``(C_bar sum eps / C2 + F0) / (1 - kappa_bar)``."""
        return (self.C_bar * float(np.sum(self.weights)) / self.C2 + F0) / (1 - self.kappa_bar)


def rho(u: np.ndarray) -> np.ndarray:
    return np.sqrt(1.0 + u**2)


def _site_polys_1d(model: LatticeModel) -> tuple[sympy.Expr, sympy.Expr, sympy.Symbol]:
    """Drift ``p(u)`` (with Ito term, b and -lambda D) and diffusion ``sum_J sigma^2``."""
    if model.m != 1:
        raise LatticeError("Lyapunov certification implemented for m = 1 fibres")
    u = sympy.Symbol("u", real=True)

    def to_sym(p: Polynomial):
        return sum(sympy.Rational(c.numerator, c.denominator) * u ** e[0] for e, c in p.terms.items())

    sde = build_coupled_sde(model.decoupled())
    p = to_sym(sde.base_drift[0])
    s2 = sum(to_sym(model.Y[a].components[0]) ** 2 for a in model.J)
    return sympy.expand(p), sympy.expand(s2), u


def certify_site_lyapunov(model: LatticeModel, C2: float = 0.8, samples: int = 200001) -> tuple[float, float]:
    """``(C1, W)`` with ``L rho + C2 rho <= C1`` everywhere.

    On ``|u| >= W`` the polynomial ``H = sum sigma^2 + p u + C2 (1 + u^2)``
    dominates ``(L rho + C2 rho) rho`` and is shown negative by exact root
    isolation; inside, the maximum is located on a dense grid and refined.
    """
    p, s2, u = _site_polys_1d(model)
    C2r = sympy.Rational(str(C2))
    H = sympy.Poly(sympy.expand(s2 + p * u + C2r * (1 + u**2)), u)
    if H.degree() < 1 or H.LC() >= 0 or H.degree() % 2:
        raise LatticeError("tail polynomial does not tend to -infinity; no Lyapunov bound")
    roots = [abs(float(sympy.Rational(hi))) for (lo, hi), _ in H.intervals()] + [
        abs(float(sympy.Rational(lo))) for (lo, hi), _ in H.intervals()
    ]
    W = math.ceil(max(roots, default=0.0) + 1.0)
    g = sympy.lambdify(u, s2 / (1 + u**2) ** sympy.Rational(3, 2) + p * u / sympy.sqrt(1 + u**2) + C2r * sympy.sqrt(1 + u**2), "numpy")
    grid = np.linspace(-W, W, samples)
    vals = np.asarray(g(grid), dtype=float) * np.ones_like(grid)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, samples - 1)]
    ref = minimize_scalar(lambda z: -float(g(z)), bounds=(lo, hi), method="bounded")
    C1 = max(float(vals[i]), -float(ref.fun))
    return max(C1, 0.0), float(W)


def lyapunov_spec(model: LatticeModel, C2: float = 0.8, weights: np.ndarray | None = None) -> LyapunovSpec:
    """Constants for ``q . Y rho_x <= C3 + sum_y eta_xy rho_y`` and the weighted condition.

    Requires ``q`` affine in neighbour coordinates and constant ``Y`` (so ``|Y rho| <= |sigma|``).
    """
    if model.m != 1:
        raise LatticeError("Lyapunov spec implemented for m = 1 fibres")
    C1, W = certify_site_lyapunov(model, C2)
    sim = model.sim_sites
    idx = model.index()
    n = len(sim)
    eta = [[Fraction(0)] * n for _ in range(n)]
    C3 = Fraction(0)
    for a, poly in model.q.items():
        sig = model.Y[a].components[0]
        if not sig.is_constant():
            raise LatticeError("eta construction needs constant site fields")
        yrho = abs(sig.constant_term())  # sup |sigma u / rho| = |sigma|
        if poly.degree() > 1:
            raise LatticeError("eta construction needs q affine in neighbour coordinates")
        for e, c in poly.terms.items():
            if not any(e):
                C3 = max(C3, abs(c) * yrho)
                continue
            k = e.index(1)
            for x in model.sites:
                y = tuple(a_ + b_ for a_, b_ in zip(x, model.offsets[k]))
                eta[idx[x]][idx[y]] += abs(c) * yrho
    if weights is None:
        w = [Fraction(1, n)] * n
    else:
        w = [Fraction(float(v)).limit_denominator(10**12) for v in weights]
    C4 = max((sum((w[x] * eta[x][y] for x in range(n)), Fraction(0)) / w[y] for y in range(n)), default=Fraction(0))
    for y in range(n):
        if sum((w[x] * eta[x][y] for x in range(n)), Fraction(0)) > C4 * w[y]:
            raise LatticeError("weighted eta condition fails")  # pragma: no cover - C4 is the max
    S_sup = max((sum(row) for row in eta), default=Fraction(0))
    spec = LyapunovSpec(
        C1=C1,
        C2=C2,
        C3=float(C3),
        tail_window=W,
        eta=np.array([[float(v) for v in row] for row in eta]),
        weights=np.array([float(v) for v in w]),
        S_sup=float(S_sup),
        C4=float(C4),
    )
    if not 0 <= spec.kappa_bar < 1:
        raise LatticeError(f"kappa_bar = {spec.kappa_bar:.3g} outside [0, 1)")
    return spec


@dataclass
class LyapunovRun:
    t: np.ndarray
    F: np.ndarray
    stderr: np.ndarray
    bound: float
    bound_gronwall: float
    F0: float

    @property
    def violations(self) -> list[float]:
        return [float(t) for t, f, s in zip(self.t, self.F, self.stderr) if f - 3 * s > self.bound]


def lyapunov_drift(
    model: LatticeModel,
    spec: LyapunovSpec,
    omega0: np.ndarray,
    t_grid: Sequence[float],
    paths: int = 2048,
    dt: float = 0.01,
    seed: int = 0,
    threads: int = 1,
) -> LyapunovRun:
    F0 = float(np.sum(spec.weights * rho(omega0[:, 0])))
    t_grid = np.asarray(t_grid, float)
    X = simulate(build_coupled_sde(model), omega0[None], t_grid, paths, dt, seed, threads)[:, :, 0]
    F, se = [], []
    for j in range(len(t_grid)):
        est = summarize(rho(X[j, :, :, 0]) @ spec.weights)
        F.append(est.mean)
        se.append(est.stderr)
    return LyapunovRun(t_grid, np.array(F), np.array(se), spec.bound(F0), spec.bound_gronwall(F0), F0)


def tightness_probe(spec: LyapunovSpec, omega0: np.ndarray, L_list: Sequence[float]) -> np.ndarray:
    """Markov lower bounds ``mu(Omega_L) >= 1 - bound / L`` (clipped at 0)."""
    F0 = float(np.sum(spec.weights * rho(omega0[:, 0])))
    b = spec.bound(F0)
    return np.array([max(0.0, 1.0 - b / L) for L in L_list])


# --------------------------------------------------------------------------
# Ergodic contraction


@dataclass
class ErgodicRun:
    t: np.ndarray
    diff: np.ndarray
    stderr: np.ndarray
    terms: np.ndarray
    rate: float
    inconclusive: bool
    grad_sum: np.ndarray | None = None


def fit_rate(t: np.ndarray, diff: np.ndarray, se: np.ndarray, t_min: float = 0.0) -> tuple[float, bool]:
    """Exponential rate from points resolved above three standard errors."""
    mask = (np.abs(diff) > 3 * se) & (np.abs(diff) > 0) & (t >= t_min)
    if mask.sum() < 3:
        return float("nan"), True
    slope = np.polyfit(t[mask], np.log(np.abs(diff[mask])), 1)[0]
    return float(-slope), False


def ergodic_contraction(
    model: LatticeModel,
    f: Cylinder,
    omega: np.ndarray,
    omega_prime: np.ndarray,
    t_grid: Sequence[float],
    paths: int = 2048,
    dt: float = 0.01,
    seed: int = 0,
    threads: int = 1,
    t_fit_min: float = 0.0,
    gradient_sum: bool = False,
) -> ErgodicRun:
    """``|P_t f(omega) - P_t f(omega')|`` via site-by-site telescoping with shared noise."""
    t_grid = np.asarray(t_grid, float)
    differ = [i for i in range(len(omega)) if not np.array_equal(omega[i], omega_prime[i])]
    chain = [omega.copy()]
    for i in differ:
        nxt = chain[-1].copy()
        nxt[i] = omega_prime[i]
        chain.append(nxt)
    sde = build_coupled_sde(model)
    X = simulate(sde, np.array(chain), t_grid, paths, dt, seed, threads)
    diffs, ses, terms = [], [], []
    for j in range(len(t_grid)):
        vals = f(model, X[j])
        total = vals[:, 0] - vals[:, -1]
        est = summarize(total)
        diffs.append(abs(est.mean))
        ses.append(est.stderr)
        terms.append([float(np.mean(vals[:, k] - vals[:, k + 1])) for k in range(len(differ))])
    diffs, ses = np.array(diffs), np.array(ses)
    rate, inconc = fit_rate(t_grid, diffs, ses, t_fit_min)
    grad = None
    if gradient_sum:
        grad = []
        for t in t_grid:
            prof = derivative_profile(model, f, float(t), list(model.sites), [omega], 1, paths, dt, seed, threads)
            grad.append(sum(p.norm**2 for p in prof))
        grad = np.array(grad)
    return ErgodicRun(t_grid, diffs, ses, np.array(terms), rate, inconc, grad)


def contraction_sweep(
    model: LatticeModel,
    lambdas: Sequence[float],
    f: Cylinder,
    omega: np.ndarray,
    omega_prime: np.ndarray,
    t_grid: Sequence[float],
    **mc,
) -> list[tuple[float, float]]:
    """Fitted rate per ``lambda``; the empirical onset is the first positive rate."""
    return [
        (lam, ergodic_contraction(model.with_lambda(lam), f, omega, omega_prime, t_grid, **mc).rate)
        for lam in lambdas
    ]


# --------------------------------------------------------------------------
# Symbolic checks on a lifted window


@dataclass
class Lift:
    """Site fields and interactions embedded in ``R^{|window| m}``."""

    model: LatticeModel
    window: tuple[Site, ...]

    @property
    def dim(self) -> int:
        return len(self.window) * self.model.m

    def block(self, s: Site) -> int:
        return self.window.index(s) * self.model.m

    def poly(self, p: Polynomial, var_map: Sequence[int]) -> Polynomial:
        out = {}
        for e, c in p.terms.items():
            ne = [0] * self.dim
            for i, k in enumerate(e):
                if k:
                    ne[var_map[i]] += k
            out[tuple(ne)] = out.get(tuple(ne), 0) + c
        return Polynomial(self.dim, out)

    def site_map(self, s: Site) -> list[int]:
        b = self.block(s)
        return [b + i for i in range(self.model.m)]

    def field(self, Y: VectorField, s: Site) -> VectorField:
        comps = [Polynomial.zero(self.dim)] * self.dim
        vm = self.site_map(s)
        for i, p in enumerate(Y.components):
            comps[vm[i]] = self.poly(p, vm)
        return VectorField(tuple(comps))

    def q(self, a: int, x: Site) -> Polynomial:
        vm = []
        for r in self.model.offsets:
            vm += self.site_map(tuple(u + v for u, v in zip(x, r)))
        return self.poly(self.model.q.get(a, Polynomial.zero(len(self.model.offsets) * self.model.m)), vm)

    def S(self, r: Site, i: int, j: int, x: Site) -> Polynomial:
        y = tuple(u + v for u, v in zip(x, r))
        return self.poly(self.model.S[r][i][j], self.site_map(x) + self.site_map(y))


def lifted_generator_match(model: LatticeModel, max_degree: int = 2) -> bool:
    """Exact check of the lattice SDE against ``L_Lambda`` on monomials, for constant ``S``."""
    if not model.s_constant():
        raise LatticeError("lifted check needs constant S")
    sim = model.sim_sites
    lift = Lift(model, sim)
    n = lift.dim
    sde = build_coupled_sde(model)
    inside = set(model.sites)
    drift = VectorField.zero(n)
    for s in sim:
        drift = drift + lift.field(VectorField(sde.base_drift), s)
    for x in model.sites:
        for a in model.q:
            drift = drift + lift.field(model.Y[a], x).scale(lift.q(a, x))
    A = model.diffusion_matrix()
    chans = [(s, a) for s in sim for a in model.J]
    sig = {(s, a): lift.field(model.Y[a], s) for s, a in chans}
    from .semigroup import _exponents

    for deg in range(max_degree + 1):
        for exp in _exponents(n, deg):
            g = Polynomial(n, {exp: 1})
            implied = apply(drift, g)
            for I, (s, a) in enumerate(chans):
                for Jc, (s2, b2) in enumerate(chans):
                    aij = A[I, Jc]
                    if aij == 0:
                        continue
                    X, Yf = sig[(s, a)], sig[(s2, b2)]
                    hess = Polynomial.zero(n)
                    for i in range(n):
                        for j in range(n):
                            if not X.components[i].is_zero() and not Yf.components[j].is_zero():
                                hess = hess + X.components[i] * Yf.components[j] * g.diff(i).diff(j)
                    implied = implied + hess * Fraction(aij).limit_denominator(10**12)
            exact = Polynomial.zero(n)
            for s in sim:
                for a in model.J:
                    Ya = lift.field(model.Y[a], s)
                    exact = exact + apply(Ya, apply(Ya, g))
                if model.b:
                    for a, Ya in enumerate(model.Y):
                        if model.b[a]:
                            exact = exact + apply(lift.field(Ya, s), g) * Fraction(model.b[a]).limit_denominator(10**12)
                if model.D is not None and model.lam:
                    exact = exact - apply(lift.field(model.D, s), g) * Fraction(model.lam).limit_denominator(10**12)
            for x in model.sites:
                for a in model.q:
                    exact = exact + lift.q(a, x) * apply(lift.field(model.Y[a], x), g)
                for r, mat in model.S.items():
                    y = tuple(u + v for u, v in zip(x, r))
                    if y not in inside:
                        continue
                    for i, a in enumerate(model.J):
                        for j, b2 in enumerate(model.J):
                            c = lift.S(r, i, j, x)
                            if not c.is_zero():
                                exact = exact + c * apply(lift.field(model.Y[a], x), apply(lift.field(model.Y[b2], y), g))
            if implied != exact:
                return False
    return True


@dataclass
class ConditionReport:
    results: dict[str, bool]
    violations: dict[str, list[str]]

    @property
    def all_pass(self) -> bool:
        return all(self.results.values())


def smoothing_conditions_check(model: LatticeModel) -> ConditionReport:
    """Checks the interaction hypotheses for smoothing (si1a-si4a) and the two extra
    ergodicity requirements, treating ``model.Y`` as the chain ``Z_0..Z_N``."""
    N = len(model.Y) - 1
    c = model.structure_constants()

    def cc(i, j, k):
        return c.get((i, j, k), Fraction(0))

    origin = (0,) * model.d
    window = tuple(sorted({origin, *model.offsets, *(tuple(model.S))}))
    lift = Lift(model, tuple(sorted(set(window) | {tuple(-v for v in r) for r in window})))
    xs = [s for s in lift.window]
    viol: dict[str, list[str]] = {k: [] for k in ("si1a", "si2a", "si3a", "si4a", "q_diag", "S_const")}
    for i in range(N + 1):
        for x in xs:
            Zix = lift.field(model.Y[i], x)
            for j in range(N + 1):
                qj = lift.q(j, origin)
                if qj.is_zero():
                    continue
                if not apply(Zix, qj).is_zero():
                    tag = f"Z_{i},{x} q_{j},{origin} != 0"
                    if j > i:
                        viol["si1a"].append(tag)
                    if j != i:
                        viol["q_diag"].append(tag)
            for r in model.S:
                for a in range(len(model.J)):
                    for b2 in range(len(model.J)):
                        if not apply(Zix, lift.S(r, a, b2, origin)).is_zero():
                            viol["S_const"].append(f"Z_{i},{x} S_{r} != 0")
    for i in range(N + 1):
        for k in range(i + 1, N + 1):
            comb = Polynomial.zero(lift.dim)
            for j in range(1, N + 1):
                if cc(i, j, k):
                    comb = comb + lift.q(j, origin) * cc(i, j, k)
            if not comb.is_zero():
                viol["si2a"].append(f"sum_j c_{i}j{k} q_j = {comb}")
            if cc(i, 0, k):
                viol["si3a"].append(f"c_{i}0{k} = {cc(i, 0, k)}")
        for l in range(i + 1, N + 1):
            tot = sum((cc(i, 0, k) * cc(k, 0, l) for k in range(1, N + 1)), Fraction(0))
            if tot:
                viol["si4a"].append(f"sum_k c_{i}0k c_k0{l} = {tot}")
    return ConditionReport({k: not v for k, v in viol.items()}, viol)


def check_gcr(model: LatticeModel) -> dict[str, object]:
    """Single-site commutation data: closure constants, ``kappa_alpha`` and ``c = max |c_abg|``."""
    cijh = model.structure_constants()
    kap = model.kappas()
    return {
        "c": float(max((abs(v) for v in cijh.values()), default=0)),
        "kappa": kap,
        "kappa_ok": all(k is not None and k >= 0 for k in kap) if model.D is not None else True,
        "cross_site_commute": all(commutator(Y, Y).is_zero() for Y in model.Y),
    }
