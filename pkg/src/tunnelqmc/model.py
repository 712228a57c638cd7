"""Ising problems at a fixed annealing point, plus the benchmark instance families.

The classical energy of a spin configuration ``s`` (entries +1/-1) is::

    E(s) = B * (sum_i h_i s_i + sum_{i<j} J_ij s_i s_j)

with every unordered pair counted once. The transverse field ``Delta`` is stored
alongside so that a problem fully specifies ``H = E(sigma^z) - Delta sum_i sigma^x_i``.

Configurations are indexed as integers where bit ``i`` set means spin ``i`` is
down (-1); the all-up state is index 0 and the all-down state is ``2**N - 1``.
"""

from dataclasses import dataclass, field
from types import MappingProxyType
import math

import numpy as np

from .errors import CapabilityError, ContractViolation

__all__ = [
    "IsingProblem",
    "as_config",
    "config_to_index",
    "index_to_config",
    "classical_energy",
    "energy_delta",
    "hamming_distance",
    "energy_table",
    "classical_minima",
    "make_uniform_ferromagnet",
    "make_frustrated_ring",
    "make_shamrock",
    "all_up",
    "all_down",
    "parse_problem",
    "format_problem",
    "load_problem",
    "save_problem",
]

MAX_EXHAUSTIVE_SPINS = 24


@dataclass(frozen=True)
class IsingProblem:
    """Two-local Ising problem with a uniform transverse field.

    Parameters
    ----------
    n_spins : int
        Number of spins ``N``.
    fields : mapping int -> float
        Dimensionless longitudinal fields ``h_i``; missing spins have ``h_i = 0``.
    couplings : mapping (i, j) -> float
        Dimensionless couplings ``J_ij`` keyed by ordered pairs ``i < j``.
        Keys given as ``(j, i)`` are normalized; a pair may appear only once.
    classical_scale : float
        Energy scale ``B > 0`` multiplying the problem Hamiltonian.
    transverse_field : float
        Single-spin tunneling amplitude ``Delta >= 0``.
    """

    n_spins: int
    fields: dict = field(default_factory=dict)
    couplings: dict = field(default_factory=dict)
    classical_scale: float = 1.0
    transverse_field: float = 0.0

    def __post_init__(self):
        n = self.n_spins
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ContractViolation(f"n_spins must be a positive integer, got {n!r}")
        object.__setattr__(self, "n_spins", int(n))
        h = {}
        for i, v in dict(self.fields).items():
            i = int(i)
            if not 0 <= i < n:
                raise ContractViolation(f"field index {i} outside [0, {n})")
            h[i] = float(v)
        cpl = {}
        for key, v in dict(self.couplings).items():
            i, j = (int(k) for k in key)
            if i == j:
                raise ContractViolation(f"self-coupling on spin {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ContractViolation(f"coupling ({i}, {j}) outside [0, {n})")
            pair = (min(i, j), max(i, j))
            if pair in cpl:
                raise ContractViolation(f"pair {pair} listed twice")
            cpl[pair] = float(v)
        B = float(self.classical_scale)
        D = float(self.transverse_field)
        if not (math.isfinite(B) and B > 0):
            raise ContractViolation(f"classical_scale must be finite and > 0, got {B}")
        if not (math.isfinite(D) and D >= 0):
            raise ContractViolation(f"transverse_field must be finite and >= 0, got {D}")
        object.__setattr__(self, "fields", MappingProxyType(dict(sorted(h.items()))))
        object.__setattr__(self, "couplings", MappingProxyType(dict(sorted(cpl.items()))))
        object.__setattr__(self, "classical_scale", B)
        object.__setattr__(self, "transverse_field", D)

    # Frozen dataclass with mapping proxies: hash on the canonical content.
    def __hash__(self):
        return hash((self.n_spins, tuple(self.fields.items()),
                     tuple(self.couplings.items()), self.classical_scale,
                     self.transverse_field))

    def __eq__(self, other):
        if not isinstance(other, IsingProblem):
            return NotImplemented
        return (self.n_spins == other.n_spins
                and dict(self.fields) == dict(other.fields)
                and dict(self.couplings) == dict(other.couplings)
                and self.classical_scale == other.classical_scale
                and self.transverse_field == other.transverse_field)

    def with_transverse_field(self, delta):
        """Copy of the problem with a different ``Delta``."""
        return IsingProblem(self.n_spins, self.fields, self.couplings,
                            self.classical_scale, delta)

    def with_classical_scale(self, scale):
        return IsingProblem(self.n_spins, self.fields, self.couplings,
                            scale, self.transverse_field)

    def field_array(self):
        """Dense ``h`` vector (unscaled)."""
        h = np.zeros(self.n_spins)
        for i, v in self.fields.items():
            h[i] = v
        return h

    def coupling_matrix(self):
        """Symmetric dense ``J`` matrix (unscaled), zero diagonal."""
        J = np.zeros((self.n_spins, self.n_spins))
        for (i, j), v in self.couplings.items():
            J[i, j] = J[j, i] = v
        return J

    def adjacency(self):
        """CSR-style neighbor lists with *scaled* couplings ``B*J_ij``.

        Returns ``(indptr, indices, weights)`` suitable for numba kernels.
        """
        nbrs = [[] for _ in range(self.n_spins)]
        for (i, j), v in self.couplings.items():
            nbrs[i].append((j, v))
            nbrs[j].append((i, v))
        indptr = np.zeros(self.n_spins + 1, dtype=np.int64)
        for i, lst in enumerate(nbrs):
            indptr[i + 1] = indptr[i] + len(lst)
        indices = np.empty(indptr[-1], dtype=np.int64)
        weights = np.empty(indptr[-1])
        for i, lst in enumerate(nbrs):
            for k, (j, v) in enumerate(sorted(lst)):
                indices[indptr[i] + k] = j
                weights[indptr[i] + k] = self.classical_scale * v
        return indptr, indices, weights


def as_config(config, n_spins=None):
    """Validate a configuration and return it as an ``int8`` array of +-1."""
    s = np.asarray(config)
    if s.ndim != 1:
        raise ContractViolation("configuration must be one-dimensional")
    if not np.all((s == 1) | (s == -1)):
        raise ContractViolation("configuration entries must be +1 or -1")
    if n_spins is not None and s.shape[0] != n_spins:
        raise ContractViolation(
            f"configuration has length {s.shape[0]}, problem has {n_spins} spins")
    return s.astype(np.int8)


def config_to_index(config):
    s = as_config(config)
    return int(sum(1 << i for i, v in enumerate(s) if v < 0))


def index_to_config(index, n_spins):
    return np.array([-1 if (index >> i) & 1 else 1 for i in range(n_spins)], dtype=np.int8)


def all_up(n_spins):
    return np.ones(n_spins, dtype=np.int8)


def all_down(n_spins):
    return -np.ones(n_spins, dtype=np.int8)


def classical_energy(problem, config):
    """Energy ``B (sum h_i s_i + sum_{i<j} J_ij s_i s_j)`` of one configuration."""
    s = as_config(config, problem.n_spins).astype(float)
    e = math.fsum(v * s[i] for i, v in problem.fields.items())
    e += math.fsum(v * s[i] * s[j] for (i, j), v in problem.couplings.items())
    return problem.classical_scale * e


def energy_delta(problem, config, i):
    """Energy change from flipping spin ``i``; cost proportional to its degree."""
    s = as_config(config, problem.n_spins)
    if not 0 <= i < problem.n_spins:
        raise ContractViolation(f"spin index {i} outside [0, {problem.n_spins})")
    local = problem.fields.get(i, 0.0)
    for (a, b), v in problem.couplings.items():
        if a == i:
            local += v * s[b]
        elif b == i:
            local += v * s[a]
    return -2.0 * problem.classical_scale * float(s[i]) * local


def hamming_distance(a, b):
    a = as_config(a)
    b = as_config(b)
    if a.shape != b.shape:
        raise ContractViolation("configurations have different lengths")
    return int(np.count_nonzero(a != b))


def spin_table(n_spins, i):
    """Value of spin ``i`` (+1/-1) across all ``2**N`` basis indices."""
    idx = np.arange(1 << n_spins, dtype=np.int64)
    return 1.0 - 2.0 * ((idx >> i) & 1)


def energy_table(problem):
    """Classical energies of all ``2**N`` configurations, ordered by index."""
    n = problem.n_spins
    if n > MAX_EXHAUSTIVE_SPINS:
        raise CapabilityError(f"exhaustive energies limited to N <= {MAX_EXHAUSTIVE_SPINS}")
    e = np.zeros(1 << n)
    cache = {}

    def spin(i):
        if i not in cache:
            cache[i] = spin_table(n, i)
        return cache[i]

    for i, v in problem.fields.items():
        e += v * spin(i)
    for (i, j), v in problem.couplings.items():
        e += v * spin(i) * spin(j)
    return problem.classical_scale * e


def classical_minima(problem, rtol=1e-12):
    """All configurations attaining the minimum classical energy.

    Enumerates every configuration, so ``N <= 24``. The result is in
    lexicographic order of the +-1 tuples (so -1 entries sort first).
    """
    e = energy_table(problem)
    emin = e.min()
    tol = rtol * max(1.0, abs(emin))
    hits = np.flatnonzero(e <= emin + tol)
    configs = [index_to_config(int(k), problem.n_spins) for k in hits]
    configs.sort(key=lambda c: tuple(int(v) for v in c))
    return configs


# --- instance families -------------------------------------------------------

def _check_positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise ContractViolation(f"{name} must be finite and > 0, got {value}")


def make_uniform_ferromagnet(N, J, classical_scale=1.0, transverse_field=0.0):
    """Fully connected ferromagnet: every pair coupled with ``-J``."""
    if N < 2:
        raise ContractViolation("uniform ferromagnet needs N >= 2")
    _check_positive("J", J)
    couplings = {(i, j): -float(J) for i in range(N) for j in range(i + 1, N)}
    return IsingProblem(N, {}, couplings, classical_scale, transverse_field)


def _check_frustration(J, eps):
    _check_positive("J", J)
    if not (0 < eps < J):
        raise ContractViolation(f"need 0 < eps < J, got eps={eps}, J={J}")


def make_frustrated_ring(N, J, eps, classical_scale=1.0, transverse_field=0.0):
    """Ring of ``N`` spins, ferromagnetic ``-J`` bonds except ``J - eps`` between 0 and N-1."""
    if N < 3:
        raise ContractViolation("frustrated ring needs N >= 3")
    _check_frustration(J, eps)
    couplings = {(i, i + 1): -float(J) for i in range(N - 1)}
    couplings[(0, N - 1)] = float(J) - float(eps)
    return IsingProblem(N, {}, couplings, classical_scale, transverse_field)


def make_shamrock(K, J, eps, classical_scale=1.0, transverse_field=0.0):
    """``K`` three-spin frustrated rings sharing the central spin 0.

    Ring ``k`` uses outer spins ``2k+1`` and ``2k+2``: both centre-outer bonds are
    ferromagnetic (``-J``) and the outer-outer bond is ``J - eps``. The two
    ferromagnetic states are the only ground states and the dominant barrier is
    ``2 K eps`` (checked here so a wrong orientation fails loudly).
    """
    if K < 1:
        raise ContractViolation("shamrock needs K >= 1")
    _check_frustration(J, eps)
    couplings = {}
    for k in range(K):
        a, b = 2 * k + 1, 2 * k + 2
        couplings[(0, a)] = -float(J)
        couplings[(0, b)] = -float(J)
        couplings[(a, b)] = float(J) - float(eps)
    problem = IsingProblem(2 * K + 1, {}, couplings, classical_scale, transverse_field)
    if problem.n_spins <= 13:
        _verify_shamrock(problem, K, eps)
    return problem


def _verify_shamrock(problem, K, eps):
    minima = classical_minima(problem)
    n = problem.n_spins
    ferro = {tuple(all_up(n)), tuple(all_down(n))}
    if {tuple(int(v) for v in m) for m in minima} != ferro:
        raise AssertionError("shamrock construction lost its two ferromagnetic ground states")
    s = all_up(n)
    e0 = classical_energy(problem, s)
    for k in range(K):
        s[2 * k + 1] = -1
    barrier = (classical_energy(problem, s) - e0) / problem.classical_scale
    if not math.isclose(barrier, 2 * K * eps, rel_tol=1e-9, abs_tol=1e-12):
        raise AssertionError(f"shamrock barrier {barrier} != 2 K eps = {2 * K * eps}")


# --- text format -------------------------------------------------------------

def format_problem(problem):
    """Serialize to the line-oriented instance format (see :func:`parse_problem`)."""
    lines = [str(problem.n_spins)]
    lines += [f"h {i} {v!r}" for i, v in problem.fields.items()]
    lines += [f"J {i} {j} {v!r}" for (i, j), v in problem.couplings.items()]
    lines.append(f"B {problem.classical_scale!r}")
    lines.append(f"Delta {problem.transverse_field!r}")
    return "\n".join(lines) + "\n"


def parse_problem(text):
    """Parse an instance file.

    Format: the first non-comment line holds ``N``; then ``h i value``,
    ``J i j value``, ``B value`` and ``Delta value`` lines in any order. Indices
    are 0-based and ``#`` starts a comment. ``B`` defaults to 1, ``Delta`` to 0.
    """
    n = None
    fields, couplings = {}, {}
    scale, delta = 1.0, 0.0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if n is None:
                if len(parts) != 1:
                    raise ValueError("expected a single integer N")
                n = int(parts[0])
                continue
            tag = parts[0]
            if tag == "h" and len(parts) == 3:
                i = int(parts[1])
                if i in fields:
                    raise ValueError(f"duplicate field for spin {i}")
                fields[i] = float(parts[2])
            elif tag == "J" and len(parts) == 4:
                i, j = int(parts[1]), int(parts[2])
                key = (min(i, j), max(i, j))
                if key in couplings:
                    raise ValueError(f"duplicate coupling {key}")
                couplings[key] = float(parts[3])
            elif tag == "B" and len(parts) == 2:
                scale = float(parts[1])
            elif tag == "Delta" and len(parts) == 2:
                delta = float(parts[1])
            else:
                raise ValueError(f"unrecognized line {raw!r}")
        except ValueError as exc:
            raise ContractViolation(f"line {lineno}: {exc}") from None
    if n is None:
        raise ContractViolation("missing spin count header")
    return IsingProblem(n, fields, couplings, scale, delta)


def load_problem(path):
    with open(path) as fh:
        return parse_problem(fh.read())


def save_problem(problem, path):
    with open(path, "w") as fh:
        fh.write(format_problem(problem))
