"""Command-line entry point: ``hypoco <group> <action> --config FILE``.

Every run writes delimited tables into the output directory plus a
``manifest.json``. Each table row carries the manifest hash, which covers
the config text, seed, command and package versions but not the wall time,
so identical (config, seed) pairs give byte-identical tables.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy
import sympy
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ndtr

from . import __version__
from .bounds import BoundsError, gronwall_envelope, model_inputs, structural_constants
from .coeffsolve import CoefficientError, comparability, dumps, loads, synthesize, verify
from .lattice import (
    LatticeError,
    LatticeModel,
    box,
    configuration_array,
    derivative_profile,
    ergodic_contraction,
    fsp_fit,
    lyapunov_drift,
    lyapunov_spec,
    ou_chain,
    sample_configuration,
    sin_observable,
    smoothing_conditions_check,
    volume_convergence,
)
from .liealg import AlgebraError, generate_chain, hormander_span_check, parse_field, parse_polynomial, verify_cri
from .semigroup import (
    FrameWindow,
    GridConfig,
    ModelOperator,
    SemigroupError,
    fit_loglog,
    generator_match,
    grid_evolve,
    linear_structure,
    mc_expectation,
    q_monotonicity_probe,
    smoothing_exponent,
    to_sde,
)

COMMANDS = {
    "algebra": ("chain", "verify", "span"),
    "coeffs": ("synth", "verify", "compare"),
    "smooth": ("run", "fit", "probe"),
    "sde": ("check",),
    "lattice": ("fsp", "converge", "lyapunov", "ergodic", "check-conditions"),
    "bounds": ("constants", "envelope"),
}


class ConfigError(ValueError):
    pass


_REQUIRED = object()


class Config:
    def __init__(self, text: str):
        self.text = text
        self.cp = configparser.ConfigParser(interpolation=None)
        self.cp.optionxform = str  # n and N are different keys
        try:
            self.cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config does not parse: {exc}") from None

    def has(self, section: str, key: str | None = None) -> bool:
        if key is None:
            return self.cp.has_section(section)
        return self.cp.has_option(section, key)

    def get(self, section: str, key: str, conv: Callable = str, default=_REQUIRED):
        name = f"{section}.{key}"
        if not self.cp.has_option(section, key):
            if default is _REQUIRED:
                raise ConfigError(f"missing {name}")
            return default
        raw = self.cp.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, TypeError, AlgebraError) as exc:
            raise ConfigError(f"invalid {name}: {exc}") from None


def floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def ints(s: str) -> list[int]:
    return [int(v) for v in s.replace(",", " ").split()]


def boolean(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def words(s: str) -> list[tuple[int, ...]]:
    """``0; 1; 0 0`` -> ``[(0,), (1,), (0, 0)]``."""
    return [tuple(ints(w)) for w in s.split(";") if w.strip()]


def sites(s: str) -> list[tuple[int, ...]]:
    """``-1; 1`` or ``1,0; -1,0``."""
    return [tuple(int(v) for v in part.replace(",", " ").split()) for part in s.split(";") if part.strip()]


def field_list(s: str):
    return [parse_field(part) for part in s.split("|") if part.strip()]


def tgrid(s: str) -> list[float]:
    """Explicit list, or ``geom a b k`` / ``lin a b k``."""
    parts = s.split()
    if parts and parts[0] in ("geom", "lin"):
        a, b, k = float(parts[1]), float(parts[2]), int(parts[3])
        g = np.geomspace(a, b, k) if parts[0] == "geom" else np.linspace(a, b, k)
        return [float(v) for v in g]
    return floats(s)


# --------------------------------------------------------------------------
# outputs


@dataclass
class Table:
    header: list[str]
    rows: list[list] = field(default_factory=list)


@dataclass
class Outcome:
    tables: dict[str, Table]
    ok: bool
    notes: list[str] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, tuple):
        return " ".join(fmt(x) for x in v)
    return str(v)


def write_table(path: Path, table: Table, mhash: str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header + ["manifest"])
    for row in table.rows:
        w.writerow([fmt(v) for v in row] + [mhash])
    path.write_text(buf.getvalue())


def versions() -> dict[str, str]:
    return {
        "artifact": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "sympy": sympy.__version__,
    }


# --------------------------------------------------------------------------
# model construction


def operator_from(cfg: Config) -> ModelOperator:
    Z0 = cfg.get("operator", "Z0", parse_field)
    B = cfg.get("operator", "B", parse_field)
    lam = cfg.get("operator", "lam", float, 0.0)
    D = cfg.get("operator", "D", parse_field, None)
    return ModelOperator.build(Z0, B, lam, D, cfg.get("operator", "max_depth", int, 8))


def _gauss(X):
    return np.exp(-0.5 * np.sum(X**2, axis=-1))


def _bump(X, R=1.5):
    r2 = np.sum(X**2, axis=-1) / R**2
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(r2 < 1, np.exp(1 - 1 / (1 - np.minimum(r2, 1 - 1e-300))), 0.0)


def _front(X):
    # a sharp front in x1 with a smooth profile in the other coordinates
    rest = np.sum(X[..., 1:] ** 2, axis=-1)
    return ndtr(X[..., 0] / 1e-7) * (1 + 0.2 * np.exp(-rest))


OBSERVABLES = {"gauss": _gauss, "bump": _bump, "front": _front}


def observable(cfg: Config, section: str = "simulation"):
    name = cfg.get(section, "observable", str, "gauss")
    if name not in OBSERVABLES:
        raise ConfigError(f"invalid {section}.observable: choose one of {', '.join(OBSERVABLES)}")
    return OBSERVABLES[name]


def grid_from(cfg: Config, m: int) -> GridConfig:
    lower = cfg.get("simulation", "lower", floats, [-4.0] * m)
    upper = cfg.get("simulation", "upper", floats, [4.0] * m)
    nodes = cfg.get("simulation", "nodes", ints, [81] * m)
    if not len(lower) == len(upper) == len(nodes) == m:
        raise ConfigError(f"invalid simulation.nodes: grid needs {m} entries per bound")
    return GridConfig(tuple(lower), tuple(upper), tuple(nodes), scheme=cfg.get("simulation", "scheme", str, "rk4"))


def lattice_from(cfg: Config) -> LatticeModel:
    s = "lattice"
    kind = cfg.get(s, "model", str, "ou")
    d = cfg.get(s, "d", int, 1)
    radius = cfg.get(s, "radius", int, 4)
    lam = cfg.get(s, "lam", float, 1.0)
    if kind == "ou":
        return ou_chain(radius, cfg.get(s, "coupling", float, 0.2), lam, d)
    if kind != "custom":
        raise ConfigError("invalid lattice.model: expected ou or custom")
    Y = cfg.get(s, "Y", field_list)
    m = Y[0].dim
    offsets = tuple(cfg.get(s, "offsets", sites, []))
    nvar = len(offsets) * m
    q = {}
    for a in range(len(Y)):
        if cfg.has(s, f"q{a}"):
            q[a] = cfg.get(s, f"q{a}", lambda t: parse_polynomial(t, nvar))
    J = tuple(cfg.get(s, "J", ints, list(range(len(Y)))))
    S = {}
    for entry in cfg.get(s, "S", lambda t: [e for e in t.split(";") if e.strip()], []):
        try:
            off, i, j, val = entry.split(":")
            r = tuple(int(v) for v in off.split(","))
            i, j = int(i), int(j)
        except ValueError:
            raise ConfigError(f"invalid lattice.S: entries are offset:i:j:polynomial, got {entry!r}") from None
        mat = S.setdefault(r, [[parse_polynomial("0", 2 * m) for _ in J] for _ in J])
        mat[i][j] = parse_polynomial(val, 2 * m)
    S = {r: tuple(tuple(row) for row in mat) for r, mat in S.items()}
    return LatticeModel(
        d=d,
        sites=box(radius, d),
        m=m,
        Y=tuple(Y),
        J=J,
        b=tuple(cfg.get(s, "b", floats, [0.0] * len(Y))),
        lam=lam,
        D=cfg.get(s, "D", parse_field, None),
        offsets=offsets,
        q=q,
        S=S,
        delta=cfg.get(s, "delta", float, 0.0),
    )


# --------------------------------------------------------------------------
# commands


@dataclass
class Ctx:
    cfg: Config
    seed: int
    threads: int
    out: Path


def _records(rec: dict[str, str]) -> Table:
    return Table(["key", "value"], [[k, v] for k, v in rec.items()])


def algebra_chain(ctx: Ctx) -> Outcome:
    op = operator_from(ctx.cfg)
    rep = op.report
    return Outcome({"algebra": _records(rep.records())}, rep.passed,
                   [f"N = {rep.constants.N}, CR.I {'pass' if rep.passed else 'fail'}"])


def algebra_verify(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    if cfg.has("operator", "chain"):
        chain = cfg.get("operator", "chain", field_list)
        _, sc = generate_chain(chain[0], cfg.get("operator", "B", parse_field), len(chain) + 1)
        rep = verify_cri(chain, sc)
    else:
        rep = operator_from(cfg).report
    rec = rep.records()
    return Outcome({"algebra": _records(rec)}, rep.passed, [f"closed={rec['closed']} c0_restriction={rec['c0_restriction']}"])


def algebra_span(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    op = operator_from(cfg)
    fields = cfg.get("operator", "span_fields", field_list, [op.Z0, op.B])
    depth = cfg.get("operator", "span_depth", int, None)
    count = cfg.get("operator", "span_points", int, 10)
    rng = np.random.default_rng(ctx.seed)
    pts = np.round(rng.uniform(-2, 2, (count, op.m)) * 8) / 8  # dyadic, so exact
    t = Table(["point", "rank", "spans"])
    ok = True
    for p in pts:
        spans, r = hormander_span_check(fields, [Fraction(str(v)) for v in p], depth)
        ok &= spans
        t.rows.append([tuple(float(v) for v in p), r, spans])
    return Outcome({"span": t}, ok, [f"spans at {sum(r[2] for r in t.rows)}/{count} points"])


def _table_from(cfg: Config):
    if cfg.has("coefficients", "table"):
        path = Path(cfg.get("coefficients", "table"))
        try:
            return loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"invalid coefficients.table: {exc}") from None
    n = cfg.get("coefficients", "n", int)
    N = cfg.get("coefficients", "N", int)
    return synthesize(n, N, cfg.get("coefficients", "C", float, 4.0), cfg.get("coefficients", "Cprime", float, 4.0))


def _verify_table(rep) -> Table:
    t = Table(["level", "worst_B", "min_cond1"])
    for lv in rep.levels:
        t.rows.append([lv.level, lv.worst_B, lv.min_cond1])
    return t


def coeffs_synth(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    table = synthesize(cfg.get("coefficients", "n", int), cfg.get("coefficients", "N", int),
                       cfg.get("coefficients", "C", float, 4.0), cfg.get("coefficients", "Cprime", float, 4.0))
    rep = verify(table)
    return Outcome({"verify": _verify_table(rep)}, rep.passed, [f"verify {'pass' if rep.passed else 'fail'}"],
                   {"table.txt": dumps(table)})


def coeffs_verify(ctx: Ctx) -> Outcome:
    rep = verify(_table_from(ctx.cfg))
    return Outcome({"verify": _verify_table(rep)}, rep.passed, [f"verify {'pass' if rep.passed else 'fail'}"])


def coeffs_compare(ctx: Ctx) -> Outcome:
    table = _table_from(ctx.cfg)
    t = Table(["level", "bar_d"])
    for lvl in range(1, table.n + 1):
        t.rows.append([lvl, comparability(table, lvl)])
    d = comparability(table) if table.n else 1.0
    t.rows.append(["all", d])
    return Outcome({"comparability": t}, 0 < d < 1 or table.n == 0, [f"bar_d = {d:.6g}"])


def _smooth_config(cfg: Config, op: ModelOperator):
    oracle = cfg.get("simulation", "oracle", str, "grid")
    if oracle == "grid":
        return grid_from(cfg, op.m)
    if oracle != "frame":
        raise ConfigError("invalid simulation.oracle: expected grid or frame")
    ls = linear_structure(op)
    g = grid_from(cfg, op.m)
    scale = cfg.get("simulation", "frame_scale", floats, [0.0] * op.m)

    def window(t: float) -> FrameWindow:
        sd = np.sqrt(np.diag(ls.covariance(t)))
        lo = [-k * s if k > 0 else a for k, s, a in zip(scale, sd, g.lower)]
        hi = [k * s if k > 0 else b for k, s, b in zip(scale, sd, g.upper)]
        return FrameWindow(tuple(lo), tuple(hi), g.nodes)

    return window


def smooth_run(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    op = operator_from(cfg)
    f = observable(cfg)
    ts = cfg.get("simulation", "t", tgrid)
    ws = cfg.get("simulation", "words", words, [(0,), (1,)])
    conf = _smooth_config(cfg, op)
    sm, fits = Table(["t", "word", "sup_norm", "contamination"]), Table(["word", "fitted_slope", "predicted_slope", "r2"])
    tol = cfg.get("simulation", "slope_tol", float, None)
    ok = True
    for w in ws:
        fit = smoothing_exponent(op, f, w, ts, conf)
        for t, nrm, c in zip(fit.t, fit.norms, fit.contamination):
            sm.rows.append([float(t), w, float(nrm), float(c)])
        fits.rows.append([w, fit.fitted_slope, fit.predicted_slope, fit.r2])
        if tol is not None:
            ok &= abs(fit.fitted_slope - fit.predicted_slope) <= tol
    return Outcome({"smoothing": sm, "fits": fits}, ok)


def smooth_fit(ctx: Ctx) -> Outcome:
    from .liealg import OperatorWord

    src = ctx.out / "smoothing.csv"
    if not src.exists():
        raise ConfigError(f"smooth fit needs {src} from smooth run")
    by_word: dict[tuple, list[tuple[float, float]]] = {}
    with src.open() as fh:
        for row in csv.DictReader(fh):
            by_word.setdefault(tuple(ints(row["word"])), []).append((float(row["t"]), float(row["sup_norm"])))
    fits = Table(["word", "fitted_slope", "predicted_slope", "r2"])
    for w, pts in by_word.items():
        slope, _, r2 = fit_loglog([p[0] for p in pts], [p[1] for p in pts])
        fits.rows.append([w, slope, -OperatorWord(w).rank / 2, r2])
    return Outcome({"fits": fits}, True)


def smooth_probe(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    op = operator_from(cfg)
    table = _table_from(cfg)
    t = cfg.get("simulation", "probe_t", float, 0.05)
    s = np.linspace(0, t, cfg.get("simulation", "probe_points", int, 5))
    x0 = cfg.get("simulation", "x0", floats, [0.5] + [-0.5] * (op.m - 1))
    rep = q_monotonicity_probe(op, observable(cfg), table, t, s, x0, grid_from(cfg, op.m), check_identity=False)
    tab = Table(["s", "value"], [[float(a), float(b)] for a, b in zip(rep.s, rep.values)])
    return Outcome({"probe": tab}, rep.monotone, [f"violations at s index {rep.violations}" if rep.violations else "monotone"])


def sde_check(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    op = operator_from(cfg)
    sde = to_sde(op)
    match = generator_match(op, sde)
    f = observable(cfg)
    g = grid_from(cfg, op.m)
    coarse = GridConfig(g.lower, g.upper, tuple((n - 1) // 2 + 1 for n in g.nodes), scheme=g.scheme)
    t = cfg.get("simulation", "check_t", float, 0.1)
    paths = cfg.get("simulation", "paths", int, 4096)
    dt = cfg.get("simulation", "dt", float, 0.005)
    count = cfg.get("simulation", "check_points", int, 20)
    pts = np.random.default_rng(ctx.seed).uniform(-1, 1, (count, op.m))
    fine = RegularGridInterpolator(g.axes(), grid_evolve(op, f(g.mesh()), t, g).u, method="cubic")
    fine_lin = RegularGridInterpolator(g.axes(), fine.values, method="linear")
    coarse_i = RegularGridInterpolator(coarse.axes(), grid_evolve(op, f(coarse.mesh()), t, coarse).u, method="cubic")
    tab = Table(["point", "mc", "stderr", "grid", "budget", "ok"])
    ok = match
    for i, p in enumerate(pts):
        est = mc_expectation(sde, f, p, t, paths, dt, ctx.seed + i, ctx.threads)
        gv = float(fine(p[None])[0])
        # resolution change plus interpolation order change
        budget = abs(gv - float(coarse_i(p[None])[0])) + abs(gv - float(fine_lin(p[None])[0]))
        good = abs(est.mean - gv) <= 3 * est.stderr + budget
        ok &= good
        tab.rows.append([tuple(float(v) for v in p), est.mean, est.stderr, gv, budget, good])
    unit = mc_expectation(sde, lambda X: np.ones(len(X)), pts[0], t, paths, dt, ctx.seed, ctx.threads)
    ok &= unit.mean == 1.0
    notes = [f"generator match {match}", f"P_t 1 = {unit.mean!r}"]
    return Outcome({"sde": tab}, bool(ok), notes)


# lattice


def _mc(cfg: Config) -> tuple[int, float]:
    return cfg.get("lattice", "paths", int, 2048), cfg.get("lattice", "dt", float, 0.01)


def _configs(cfg: Config, model: LatticeModel, seed: int, region=None) -> list[dict]:
    count = cfg.get("lattice", "configurations", int, 3)
    scale = cfg.get("lattice", "config_scale", float, 0.5)
    region = region if region is not None else model.sim_sites
    return [sample_configuration(region, model.m, seed + k, scale) for k in range(count)]


def lattice_fsp(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    model = lattice_from(cfg)
    paths, dt = _mc(cfg)
    ts = cfg.get("lattice", "t", floats, [0.5])
    origin = (0,) * model.d
    f = sin_observable(origin)
    probes = [s for s in model.sites if all(v >= 0 for v in s)]
    confs = [configuration_array(model, w) for w in _configs(cfg, model, ctx.seed)]
    recs = []
    tab = Table(["site", "distance", "t", "norm", "stderr"])
    for t in ts:
        for r in derivative_profile(model, f, t, probes, confs, 1, paths, dt, ctx.seed, ctx.threads):
            recs.append(r)
            tab.rows.append([r.sites[0], r.distance, r.t, r.norm, r.stderr])
    env = fsp_fit(recs)
    fit = Table(["B", "c", "v", "r2", "ok", "message"], [[env.B, env.c, env.v, env.r2, env.ok, env.message]])
    r2_min = cfg.get("lattice", "r2_min", float, 0.9)
    return Outcome({"propagation": tab, "fsp_fit": fit}, env.ok and env.r2 >= r2_min,
                   [f"v = {env.v:.4g}, R2 = {env.r2:.4g}"])


def lattice_converge(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    model = lattice_from(cfg)
    paths, dt = _mc(cfg)
    radii = cfg.get("lattice", "radii", ints, [2, 3, 4, 5, 6])
    t = cfg.get("lattice", "t", float, 0.5)
    big = model.with_sites(box(max(radii), model.d))
    cv = volume_convergence(model, radii, sin_observable((0,) * model.d), t,
                            _configs(cfg, model, ctx.seed, big.sim_sites), paths, dt, ctx.seed, ctx.threads)
    tab = Table(["k", "sup_diff", "stderr", "ratio"])
    for k in range(len(cv.sup_diff)):
        ratio = cv.sup_diff[k] / cv.sup_diff[k - 1] if k and cv.sup_diff[k - 1] > 0 else math.nan
        tab.rows.append([radii[k], cv.sup_diff[k], cv.stderr[k], ratio])
    limit = cfg.get("lattice", "ratio_max", float, 0.8)
    ok = all(s == 0 for s in cv.sup_diff) or cv.mean_ratio < limit
    return Outcome({"convergence": tab}, bool(ok), [f"mean ratio {cv.mean_ratio:.4g}"])


def lattice_lyapunov(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    model = lattice_from(cfg)
    paths, dt = _mc(cfg)
    spec = lyapunov_spec(model, cfg.get("lyapunov", "C2", float, 0.8), cfg.get("lyapunov", "weights", floats, None))
    ts = cfg.get("lyapunov", "t", tgrid, list(np.linspace(0.5, 5.0, 10)))
    scale = cfg.get("lyapunov", "initial_scale", float, 2.0)
    w = configuration_array(model, sample_configuration(model.sim_sites, model.m, ctx.seed, scale))
    run = lyapunov_drift(model, spec, w, ts, paths, dt, ctx.seed, ctx.threads)
    tab = Table(["t", "F_t", "stderr", "bound"], [[float(t), float(F), float(s), run.bound] for t, F, s in zip(run.t, run.F, run.stderr)])
    notes = [f"C1 = {spec.C1:.6g}, C2 = {spec.C2}, kappa_bar = {spec.kappa_bar:.4g}, bound = {run.bound:.6g}"]
    return Outcome({"lyapunov": tab}, not run.violations, notes)


def lattice_ergodic(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    model = lattice_from(cfg)
    paths, dt = _mc(cfg)
    ts = cfg.get("lattice", "t_grid", tgrid, list(np.linspace(0.25, 2.5, 10)))
    origin = (0,) * model.d
    w = configuration_array(model)
    w2 = w.copy()
    a = cfg.get("lattice", "pair", floats, [1.0, -1.0])
    w[model.index()[origin]] = a[0]
    w2[model.index()[origin]] = a[1]
    run = ergodic_contraction(model, sin_observable(origin), w, w2, ts, paths, dt, ctx.seed, ctx.threads,
                              t_fit_min=cfg.get("lattice", "t_fit_min", float, 0.0))
    tab = Table(["t", "diff", "stderr"], [[float(t), float(d), float(s)] for t, d, s in zip(run.t, run.diff, run.stderr)])
    ok = not run.inconclusive and run.rate > 0
    expected = cfg.get("lattice", "expected_rate", float, None)
    if expected is not None and ok:
        ok = abs(run.rate - expected) <= 0.2 * expected
    return Outcome({"ergodic": tab}, ok, [f"rate = {run.rate:.4g}" + (" (inconclusive)" if run.inconclusive else "")])


def lattice_conditions(ctx: Ctx) -> Outcome:
    rep = smoothing_conditions_check(lattice_from(ctx.cfg))
    tab = Table(["condition", "pass", "detail"])
    for k, v in rep.results.items():
        tab.rows.append([k, v, " | ".join(rep.violations[k])])
    return Outcome({"conditions": tab}, rep.all_pass)


# bounds


def _bounds_constants(cfg: Config, n: int, eps: float):
    if cfg.has("lattice"):
        mi = model_inputs(lattice_from(cfg))
        return [mi.constants(k, eps) for k in range(1, n + 1)], mi.coupling(n, eps), mi.R
    s = "bounds"
    args = {k: cfg.get(s, k, float, 0.0) for k in ("c", "b", "kappa", "lam", "qbar", "S_row_sum", "S_sup", "qY_sum")}
    cardI = cfg.get(s, "cardI", int)
    consts = [
        structural_constants(k, cardI, args["c"], args["b"], args["kappa"], args["lam"], eps,
                             args["qbar"], args["S_row_sum"], args["S_sup"], args["qY_sum"])
        for k in range(1, n + 1)
    ]
    return consts, cfg.get(s, "C0", float), cfg.get(s, "R", int, 1)


def bounds_constants(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    n = cfg.get("bounds", "n", int, 1)
    consts, C0, R = _bounds_constants(cfg, n, cfg.get("bounds", "epsilon", float, 1.0))
    tab = Table(["n", "A_n", "B_n", "T3", "C_n", "C_bar", "v_n", "rate", "C0", "R"])
    for sc in consts:
        tab.rows.append([sc.n, sc.A_n, sc.B_n, sc.T3, sc.C_n, sc.C_bar, sc.v_n, sc.rate, C0, R])
    return Outcome({"constants": tab}, True)


def bounds_envelope(ctx: Ctx) -> Outcome:
    cfg = ctx.cfg
    n = cfg.get("bounds", "n", int, 1)
    consts, C0, R = _bounds_constants(cfg, n, cfg.get("bounds", "epsilon", float, 1.0))
    ts = cfg.get("bounds", "t", tgrid, [0.5, 1.0])
    init = [[cfg.get("bounds", "initial_norm", float, 1.0)] for _ in range(n)]
    prop = gronwall_envelope(n, consts, C0, R, init, ts, cfg.get("bounds", "steps", int, 400),
                             cfg.get("bounds", "max_distance", int, 6 * R))
    tab = Table(["level", "distance", "t", "bound"])
    for lvl in range(n):
        for i, t in enumerate(prop.t):
            for d in prop.distances:
                tab.rows.append([lvl + 1, int(d), float(t), float(prop.values[lvl, i, d])])
    env = prop.envelope
    fit = Table(["B", "c", "v", "richardson"], [[env.B, env.c, env.v, prop.richardson]])
    return Outcome({"envelope": tab, "envelope_fit": fit}, True, [f"Richardson change {prop.richardson:.3g}"])


HANDLERS: dict[tuple[str, str], Callable[[Ctx], Outcome]] = {
    ("algebra", "chain"): algebra_chain,
    ("algebra", "verify"): algebra_verify,
    ("algebra", "span"): algebra_span,
    ("coeffs", "synth"): coeffs_synth,
    ("coeffs", "verify"): coeffs_verify,
    ("coeffs", "compare"): coeffs_compare,
    ("smooth", "run"): smooth_run,
    ("smooth", "fit"): smooth_fit,
    ("smooth", "probe"): smooth_probe,
    ("sde", "check"): sde_check,
    ("lattice", "fsp"): lattice_fsp,
    ("lattice", "converge"): lattice_converge,
    ("lattice", "lyapunov"): lattice_lyapunov,
    ("lattice", "ergodic"): lattice_ergodic,
    ("lattice", "check-conditions"): lattice_conditions,
    ("bounds", "constants"): bounds_constants,
    ("bounds", "envelope"): bounds_envelope,
}


# --------------------------------------------------------------------------
# figures (optional)


def render_figures(out: Path, tables: dict[str, Table]) -> list[Path]:
    """One PNG per table: numeric columns against the first one."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("--figures needs matplotlib (install the 'plot' extra)") from None
    written = []
    for name, tab in tables.items():
        cols = list(zip(*tab.rows)) if tab.rows else []
        numeric = [i for i, c in enumerate(cols) if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in c)]
        if len(numeric) < 2:
            continue
        x = np.array(cols[numeric[0]], float)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for i in numeric[1:]:
            y = np.array(cols[i], float)
            ax.plot(x, y, "o-", ms=3, label=tab.header[i])
        positive = all(np.all(np.array(cols[i], float) > 0) for i in numeric[1:])
        if positive:
            ax.set_yscale("log")
        ax.set_xlabel(tab.header[numeric[0]])
        ax.legend(fontsize=7)
        ax.set_title(name)
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypoco", description="Hypocoercive generator toolkit")
    sub = p.add_subparsers(dest="group", required=True)
    for group, actions in COMMANDS.items():
        g = sub.add_parser(group)
        gs = g.add_subparsers(dest="action", required=True)
        for a in actions:
            ap = gs.add_parser(a)
            ap.add_argument("--config", required=True, type=Path)
            ap.add_argument("--out", type=Path, default=None, help="output directory (default: output.dir or ./out)")
            ap.add_argument("--seed", type=int, default=None, help="overrides simulation.seed")
            ap.add_argument("--threads", type=int, default=1)
            ap.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    return p


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=stderr)
        return 2
    try:
        cfg = Config(text)
        seed = args.seed if args.seed is not None else cfg.get("simulation", "seed", int)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = args.out or Path(cfg.get("output", "dir", str, "out"))
        out.mkdir(parents=True, exist_ok=True)
        ctx = Ctx(cfg, seed, args.threads, out)
        command = f"{args.group} {args.action}"
        chash = hashlib.sha256(text.encode()).hexdigest()
        ident = {"command": command, "config_sha256": chash, "seed": seed, "versions": versions()}
        mhash = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]
        outcome = HANDLERS[(args.group, args.action)](ctx)
    except ConfigError as exc:
        print(f"error: {exc}", file=stderr)
        return 2
    except (AlgebraError, CoefficientError, SemigroupError, LatticeError, BoundsError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=stderr)
        return 3
    for name, tab in outcome.tables.items():
        write_table(out / f"{name}.csv", tab, mhash)
    for name, content in outcome.files.items():
        (out / name).write_text(content)
    figures = []
    if args.figures:
        try:
            figures = render_figures(out, outcome.tables)
        except ConfigError as exc:
            print(f"error: {exc}", file=stderr)
            return 2
    manifest = {
        **ident,
        "manifest_hash": mhash,
        "threads": args.threads,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "outputs": sorted([f"{n}.csv" for n in outcome.tables] + list(outcome.files) + [p.name for p in figures]),
        "passed": outcome.ok,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for note in outcome.notes:
        print(note, file=stdout)
    print(f"{command}: {'PASS' if outcome.ok else 'FAIL'} ({out})", file=stdout)
    return 0 if outcome.ok else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
