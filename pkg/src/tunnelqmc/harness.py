"""Experiment configuration, orchestration, statistics and CSV reports.

Configurations are INI documents with a single ``[experiment]`` section::

    [experiment]
    kind = escape-scaling
    family = shamrock
    K = 1-5
    runs = 200

Unset keys take per-kind defaults (see :data:`DEFAULTS`); unknown keys are
rejected with the offending line number.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, asdict, replace
import configparser
import csv
import io
import math

import numpy as np
from scipy.optimize import brentq

from . import ctqmc, exactdiag, perturbation, resolvent
from .errors import ConfigError, InsufficientSamplingError
from .model import (IsingProblem, all_down, all_up, classical_minima, config_to_index,
                    make_frustrated_ring, make_shamrock, make_uniform_ferromagnet)

__all__ = [
    "KINDS",
    "FAMILIES",
    "DEFAULTS",
    "ExperimentConfig",
    "ScalingRow",
    "AggregateStats",
    "parse_config",
    "serialize_config",
    "load_config",
    "aggregate_stats",
    "build_instance",
    "random_instance",
    "loglog_slope",
    "run_spectrum",
    "run_perturbation_report",
    "run_equilibrium_check",
    "run_zb_ratio",
    "run_escape_scaling",
    "run_profiles",
    "tune_delta_for_ratio",
    "SCALING_CSV_HEADER",
]

KINDS = ("spectrum", "perturbation-report", "equilibrium-check", "zb-ratio", "escape-scaling",
         "profiles")
FAMILIES = ("ring", "shamrock", "uniform", "random")

# escape-scaling defaults follow the shamrock benchmark: Delta=0.5, B=1, beta=20, J=6, eps=0.2
DEFAULTS = {
    "spectrum": dict(family="ring", sizes=(4, 5, 6, 7, 8), J=6.0, eps=0.5, delta=0.02),
    "perturbation-report": dict(family="ring", sizes=(4, 5, 6, 7, 8), J=6.0, eps=0.5,
                                delta=0.02),
    "equilibrium-check": dict(family="random", sizes=(1, 2, 3, 4, 5, 6), runs=20,
                              betas=(2.0, 5.0), sweeps=200_000),
    "zb-ratio": dict(family="ring", sizes=(4,), J=6.0, eps=2.0, beta=20.0, delta=0.0,
                     target=0.03, sweeps=400_000_000),
    "escape-scaling": dict(family="shamrock", sizes=(1, 2, 3, 4, 5), J=6.0, eps=0.2, delta=0.5,
                           beta=20.0, runs=1000),
    "profiles": dict(family="ring", sizes=(6,), J=6.0, eps=0.2, delta=0.1, beta=20.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.

    ``sizes`` holds ``N`` values (ring, uniform, random) or ``K`` values
    (shamrock). ``delta = 0`` in a ``zb-ratio`` config means "tune Delta so
    that beta^2 g^2 equals ``target``".
    """

    kind: str
    family: str = "ring"
    sizes: tuple = (4,)
    J: float = 6.0
    eps: float = 0.2
    delta: float = 0.5
    B: float = 1.0
    beta: float = 20.0
    betas: tuple = (2.0, 5.0)
    runs: int = 1
    seed: int = 2024
    sweeps: int = 200_000
    thermalize: int = 2000
    cap: int = 100_000_000
    threshold: float = 0.05
    target: float = 0.03
    threads: int = 1
    corrupt_acceptance: float = 1.0

    def __post_init__(self):
        _validate(self)


_KEY_ALIASES = {"k": "sizes", "n": "sizes", "sizes": "sizes", "b": "B", "j": "J"}
_INT_KEYS = {"runs", "seed", "sweeps", "thermalize", "cap", "threads"}
_TUPLE_INT = {"sizes"}
_TUPLE_FLOAT = {"betas"}


def _validate(c):
    if c.kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {c.kind!r}")
    if c.family not in FAMILIES:
        raise ConfigError(f"family: unknown instance family {c.family!r}")
    if c.runs < 1:
        raise ConfigError("runs: must be >= 1")
    if c.threads < 1:
        raise ConfigError("threads: must be >= 1")
    if c.sweeps < 1 or c.cap < 1 or c.thermalize < 0:
        raise ConfigError("sweeps/cap must be >= 1 and thermalize >= 0")
    if not c.sizes:
        raise ConfigError("sizes: empty")
    if c.B <= 0 or c.beta <= 0 or any(b <= 0 for b in c.betas):
        raise ConfigError("B and beta must be positive")
    if c.delta < 0:
        raise ConfigError("delta: must be >= 0")
    if not 0 <= c.threshold <= 1:
        raise ConfigError("threshold: must lie in [0, 1]")
    if c.family == "shamrock":
        if min(c.sizes) < 1:
            raise ConfigError("K: must be >= 1")
    elif c.family in ("ring",):
        if min(c.sizes) < 3:
            raise ConfigError("N: ring needs N >= 3")
    elif c.family == "uniform":
        if min(c.sizes) < 2:
            raise ConfigError("N: uniform ferromagnet needs N >= 2")
    elif min(c.sizes) < 1:
        raise ConfigError("N: must be >= 1")
    if c.family in ("ring", "shamrock") and not (c.J > 0 and 0 < c.eps < c.J):
        raise ConfigError("J, eps: need J > 0 and 0 < eps < J")
    if c.kind == "escape-scaling" and c.family != "shamrock" and c.family != "uniform":
        raise ConfigError("family: escape-scaling supports shamrock and uniform")
    if c.kind == "equilibrium-check" and max(c.sizes) > 6:
        raise ConfigError("N: equilibrium-check is limited to N <= 6")


def _parse_sizes(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def parse_config(text):
    """Parse an INI document into an :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = parser.sections()
    if sections != ["experiment"]:
        raise ConfigError(f"expected exactly one [experiment] section, found {sections}")
    sec = parser["experiment"]
    lines = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        key = line.split("=", 1)[0].strip() if "=" in line else None
        if key:
            lines.setdefault(key, lineno)
    if "kind" not in sec:
        raise ConfigError("kind: required")
    kind = sec["kind"].strip()
    if kind not in KINDS:
        raise ConfigError(f"kind (line {lines.get('kind')}): unknown experiment kind {kind!r}")
    values = dict(DEFAULTS[kind])
    names = {f.name for f in fields(ExperimentConfig)}
    for key, raw in sec.items():
        if key == "kind":
            continue
        name = _KEY_ALIASES.get(key.lower(), key)
        if name not in names:
            raise ConfigError(f"{key} (line {lines.get(key)}): unknown key")
        try:
            if name in _TUPLE_INT:
                val = _parse_sizes(raw)
            elif name in _TUPLE_FLOAT:
                val = tuple(float(x) for x in raw.split(",") if x.strip())
            elif name in _INT_KEYS:
                val = int(float(raw)) if "e" in raw.lower() else int(raw)
            elif name == "family":
                val = raw.strip()
            else:
                val = float(raw)
        except ValueError:
            raise ConfigError(f"{key} (line {lines.get(key)}): bad value {raw!r}") from None
        values[name] = val
    try:
        return ExperimentConfig(kind=kind, **values)
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(config):
    """INI text that :func:`parse_config` maps back to ``config``."""
    lines = ["[experiment]"]
    for f in fields(ExperimentConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# --- statistics ----------------------------------------------------------------

@dataclass(frozen=True)
class AggregateStats:
    mean: float
    stderr: float
    count: int
    timeouts: int


def aggregate_stats(samples):
    """Mean and standard error over non-timeout samples (``None`` marks a timeout).

    Summation order is the input order (``math.fsum``, so exactly rounded);
    ``stderr`` is the sample standard deviation over ``sqrt(count)`` and is
    ``nan`` for a single sample.
    """
    vals = [float(s) for s in samples if s is not None]
    timeouts = sum(1 for s in samples if s is None)
    if not vals:
        raise InsufficientSamplingError("no non-timeout samples")
    n = len(vals)
    mean = math.fsum(vals) / n
    if n == 1:
        return AggregateStats(mean, math.nan, 1, timeouts)
    var = math.fsum((x - mean) ** 2 for x in vals) / (n - 1)
    return AggregateStats(mean, math.sqrt(var / n), n, timeouts)


def loglog_slope(x, y, y_err=None):
    """Least-squares slope of ``log y`` against ``log x`` with its standard error.

    With ``y_err`` the fit is weighted by ``(y / y_err)^2``.
    """
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if y_err is None:
        w = np.ones_like(lx)
    else:
        rel = np.asarray(y_err, float) / np.asarray(y, float)
        w = 1.0 / np.maximum(rel, 1e-12) ** 2
    W = w.sum()
    mx, my = (w * lx).sum() / W, (w * ly).sum() / W
    sxx = (w * (lx - mx) ** 2).sum()
    slope = (w * (lx - mx) * (ly - my)).sum() / sxx
    return float(slope), float(math.sqrt(1.0 / sxx)) if y_err is not None else math.nan


# --- instances -----------------------------------------------------------------

def build_instance(config, size, delta=None):
    """Problem for one entry of ``config.sizes``."""
    d = config.delta if delta is None else delta
    if config.family == "ring":
        return make_frustrated_ring(size, config.J, config.eps, config.B, d)
    if config.family == "shamrock":
        return make_shamrock(size, config.J, config.eps, config.B, d)
    if config.family == "uniform":
        return make_uniform_ferromagnet(size, config.J, config.B, d)
    raise ConfigError(f"family {config.family!r} has no deterministic instance")


def random_instance(n, rng):
    """Random instance: fields and couplings uniform in [-1, 1] (each pair present
    with probability 0.6), Delta uniform in [0.3, 1]."""
    h = {i: float(rng.uniform(-1, 1)) for i in range(n)}
    J = {}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.6:
                J[(i, j)] = float(rng.uniform(-1, 1))
    return IsingProblem(n, h, J, 1.0, float(rng.uniform(0.3, 1.0)))


def _wells(problem):
    n = problem.n_spins
    return config_to_index(all_up(n)), config_to_index(all_down(n))


def _exact_g(problem):
    if problem.n_spins <= exactdiag.MATRIX_FREE_MAX_SPINS:
        return exactdiag.tunneling_gap(problem).g
    u, d = _wells(problem)
    return resolvent.two_level_reduction(problem, u, d).g_allorders


# --- experiments ---------------------------------------------------------------

def run_spectrum(config):
    """Two lowest levels, ``g`` and the gap to the third level for each size."""
    rows, summaries = [], []
    for size in config.sizes:
        p = build_instance(config, size)
        s = exactdiag.tunneling_gap(p)
        k = size if config.family == "shamrock" else None
        summaries.append((p.n_spins, k, p.transverse_field, config.beta, s))
        rows.append({"N": p.n_spins, "K": "" if k is None else k,
                     "Delta": p.transverse_field, "beta": config.beta, "E_minus": s.e_minus,
                     "E_plus": s.e_plus, "g": s.g, "delta_e": s.delta_e})
    return rows, exactdiag.spectrum_csv(summaries)


def run_perturbation_report(config):
    """Lowest-order, all-orders and exact ``g`` per instance.

    ``n_paths`` counts deformation classes of minimum-barrier paths (2 for the
    ring, ``2^K`` for the shamrock, 1 for the uniform ferromagnet).
    """
    rows = []
    for size in config.sizes:
        p = build_instance(config, size)
        u, d = _wells(p)
        g_pert = perturbation.g_lowest_order(p, u, d)
        g_exact = exactdiag.tunneling_gap(p).g
        try:
            g_all = resolvent.two_level_reduction(p, u, d).g_allorders
        except Exception:  # reduction can fail far from the perturbative regime
            g_all = math.nan
        try:
            n_paths = perturbation.count_homotopy_classes(p, u, d)
        except Exception:
            n_paths = ""
        rows.append({"N": p.n_spins, "Delta": p.transverse_field, "eps": config.eps,
                     "J": config.J, "L": p.n_spins, "n_paths": n_paths, "g_pert": g_pert,
                     "g_exact": g_exact, "ratio": g_pert / g_exact, "g_allorders": g_all})
    buf = io.StringIO()
    header = perturbation.PERTURBATION_CSV_HEADER + ["g_allorders"]
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return rows, buf.getvalue()


def _compare(name, value, err, exact, nsig=3.0):
    """One check row; a zero-variance estimate must match the exact value closely."""
    tol = nsig * err if err > 0 else 1e-9
    ok = abs(value - exact) <= tol + 1e-12
    return {"observable": name, "qmc": value, "stderr": err, "exact": exact,
            "z": (value - exact) / err if err > 0 else (0.0 if ok else math.inf), "pass": ok}


def _boltzmann(problem, beta):
    from .model import energy_table
    e = energy_table(problem)
    w = np.exp(-beta * (e - e.min()))
    w /= w.sum()
    n = problem.n_spins
    idx = np.arange(1 << n)
    sz = np.array([np.sum(w * (1.0 - 2.0 * ((idx >> i) & 1))) for i in range(n)])
    return {"mean_energy": float(np.sum(w * e)), "sz": sz, "sx": np.zeros(n),
            "pop_up": float(w[0]), "pop_down": float(w[-1])}


def _equilibrium_case(label, problem, beta, params, exact, chain):
    res = ctqmc.measure_equilibrium(problem, params, chain=chain)
    rows = []
    for key in ("mean_energy", "pop_up", "pop_down"):
        rows.append(_compare(key, res[key][0], res[key][1], exact[key]))
    for i in range(problem.n_spins):
        rows.append(_compare(f"sz[{i}]", res["sz"][i], res["sz_err"][i], exact["sz"][i]))
        if problem.transverse_field > 0:
            rows.append(_compare(f"sx[{i}]", res["sx"][i], res["sx_err"][i], exact["sx"][i]))
    if problem.n_spins == 1 and not problem.fields:
        bd = beta * problem.transverse_field
        rows.append(_compare("n_flips", res["n_flips"][0], res["n_flips"][1], bd * math.tanh(bd)))
    for r in rows:
        r.update(case=label, N=problem.n_spins, beta=beta)
    return rows


def run_equilibrium_check(config):
    """QMC against exact thermal averages on small instances.

    Cases: a free spin (``<n> = beta Delta tanh(beta Delta)``), ``config.runs``
    random instances with ``N`` drawn from ``config.sizes`` at every beta in
    ``config.betas``, and one classical (``Delta = 0``) instance sampled with
    whole-line flips against the Boltzmann distribution. Returns
    ``(rows, csv_text, n_failed)``.
    """
    rng = np.random.default_rng(config.seed)
    base = dict(sweeps=config.sweeps, thermalize=config.thermalize,
                acceptance_bias=config.corrupt_acceptance)
    jobs = []
    free = IsingProblem(1, {}, {}, 1.0, 0.5)
    for beta in config.betas:
        jobs.append((f"free-spin", free, beta, exactdiag.equilibrium_observables(free, beta)))
    for k in range(config.runs):
        n = int(rng.choice(config.sizes))
        p = random_instance(n, rng)
        for beta in config.betas:
            jobs.append((f"random-{k}", p, beta, exactdiag.equilibrium_observables(p, beta)))
    classical = replace(random_instance(min(4, max(config.sizes)), rng), transverse_field=0.0)
    cb = config.betas[0]
    jobs.append(("classical", classical, cb, _boltzmann(classical, cb)))

    def work(item):
        idx, (label, p, beta, exact) = item
        if p.transverse_field == 0:
            params = ctqmc.QmcParams(beta=beta, seed=config.seed, move_mix=(0.0, 0.0, 0.0),
                                     line_flip=1.0, sweeps=config.sweeps,
                                     thermalize=config.thermalize)
        else:
            params = ctqmc.QmcParams(beta=beta, seed=config.seed, **base)
        return _equilibrium_case(label, p, beta, params, exact, chain=idx)

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        results = list(pool.map(work, enumerate(jobs)))
    rows = [r for block in results for r in block]
    buf = io.StringIO()
    cols = ["case", "N", "beta", "observable", "qmc", "stderr", "exact", "z", "pass"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (int(r[c]) if c == "pass" else r[c]) for c in cols})
    failed = sum(1 for r in rows if not r["pass"])
    return rows, buf.getvalue(), failed


def tune_delta_for_ratio(problem, beta, target, lo=1e-3, hi=None):
    """Delta such that ``beta^2 g_exact^2 = target``."""
    if hi is None:
        hi = problem.classical_scale
    f = lambda d: math.log(beta * _exact_g(replace(problem, transverse_field=d))) - 0.5 * math.log(target)
    return brentq(f, lo, hi, xtol=1e-12)


def run_zb_ratio(config):
    """Round-trip estimate of ``Z_B / Z_0`` against ``beta^2 g_exact^2``."""
    rows = []
    for size in config.sizes:
        p = build_instance(config, size, delta=config.delta or 0.1)
        if config.delta == 0:
            p = replace(p, transverse_field=tune_delta_for_ratio(p, config.beta, config.target))
        g = _exact_g(p)
        u, d = _wells(p)
        # consecutive sweeps are strongly correlated; measuring every other one halves the cost
        params = ctqmc.QmcParams(beta=config.beta, seed=config.seed, sweeps=config.sweeps,
                                 thermalize=config.thermalize, measure_every=2)
        est = ctqmc.measure_zb_ratio(p, params, u, d)
        pred = (config.beta * g) ** 2
        diff = est["ratio"] - pred
        if est["stderr"] > 0:
            z = diff / est["stderr"]
        else:
            z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
        rows.append({"N": p.n_spins, "beta": config.beta, "Delta": p.transverse_field,
                     "p_r0": est["p_r0"], "p_r1": est["p_r1"], "ratio": est["ratio"],
                     "stderr": est["stderr"], "prediction": pred,
                     "z": z})
    cols = ["N", "beta", "Delta", "p_r0", "p_r1", "ratio", "stderr", "prediction", "z"]
    return rows, _dict_csv(rows, cols)


SCALING_CSV_HEADER = ["K", "N", "g_exact", "mean_sweeps", "stderr", "count", "timeouts",
                      "normalized_sweeps", "normalized_stderr", "pred_inv_g2_normalized",
                      "pred_2K_inv_g2_normalized"]


@dataclass(frozen=True)
class ScalingRow:
    K: int
    N: int
    g_exact: float
    mean_sweeps: float
    stderr: float
    count: int
    timeouts: int
    normalized_sweeps: float
    normalized_stderr: float
    pred_inv_g2_normalized: float
    pred_2K_inv_g2_normalized: float


def _escape_runs(problem, config, threads):
    u, d = _wells(problem)
    params = ctqmc.QmcParams(beta=config.beta, seed=config.seed)

    def one(chain):
        return ctqmc.escape_time(problem, params, u, d, config.threshold, config.cap, chain)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(config.runs)))


def run_escape_scaling(config, progress=None):
    """Mean first-passage sweeps per size with both ``1/g^2`` predictions.

    For the shamrock the second prediction is ``2^K / g^2``; for the uniform
    ferromagnet (single deformation class) it is ``1/g^2`` as well. Everything
    is normalized to the first size. Returns ``(rows, csv_text, raw)`` where
    ``raw`` lists ``(N, K, EscapeResult)`` for the per-run CSV.
    """
    raw = []
    stats = []
    for size in config.sizes:
        p = build_instance(config, size)
        g = _exact_g(p)
        results = _escape_runs(p, config, config.threads)
        raw.extend((p.n_spins, size, r) for r in results)
        agg = aggregate_stats([r.sweeps_to_passage for r in results])
        n_paths = 2 ** size if config.family == "shamrock" else 1
        stats.append((size, p.n_spins, g, agg, n_paths))
        if progress:
            progress(size, agg)
    s0 = stats[0]
    m0, e0, g0, c0 = s0[3].mean, s0[3].stderr, s0[2], s0[4]
    rows = []
    for size, n, g, agg, c in stats:
        norm = agg.mean / m0
        rel = math.hypot(agg.stderr / agg.mean, e0 / m0) if size != s0[0] else agg.stderr / agg.mean
        rows.append(ScalingRow(size, n, g, agg.mean, agg.stderr, agg.count, agg.timeouts, norm,
                               norm * rel, (g0 / g) ** 2, (c / c0) * (g0 / g) ** 2))
    return rows, _dict_csv([asdict(r) for r in rows], SCALING_CSV_HEADER), raw


def run_profiles(config):
    """Intra- and inter-path loop free-energy profiles for the ring's two paths."""
    rows = []
    for size in config.sizes:
        p = build_instance(config, size)
        u, d = _wells(p)
        paths = perturbation.enumerate_minimal_paths(p, u, d)
        intra, inter = perturbation.stretch_profiles(p, config.beta, paths[0],
                                                     paths[1] if len(paths) > 1 else None)
        for name, prof in (("intra", intra), ("inter", inter or [])):
            for pt in prof:
                rows.append({"N": p.n_spins, "J": config.J, "profile": name, "label": pt.label,
                             "step": pt.step,
                             "length": pt.loop.length if pt.loop is not None else "",
                             "free_energy": pt.free_energy,
                             "obstruction": pt.obstruction.report() if pt.obstruction else ""})
    cols = ["N", "J", "profile", "label", "step", "length", "free_energy", "obstruction"]
    return rows, _dict_csv(rows, cols)


def _dict_csv(rows, cols):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
