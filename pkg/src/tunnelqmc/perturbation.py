"""Perturbative tunneling amplitudes, loop free energies and stretch profiles.

Conventions
-----------
* States are integer configuration indices (bit ``i`` set = spin ``i`` down).
* A *minimal path* from ``u`` to ``d`` flips each disagreeing spin exactly once,
  so it is an ordering of the ``L = hamming(u, d)`` flip positions.
* A *ceiling* is an energy above the well energy ``E0``: states with
  ``E - E0 > ceiling`` are excluded. ``ceiling=None`` keeps everything,
  ``ceiling="dominant"`` keeps exactly the paths whose highest state does not
  exceed the minimax barrier between the wells.

The divided-difference kernel and the resolvent reduction live in
:mod:`tunnelqmc.divdiff` and :mod:`tunnelqmc.resolvent` and are re-exported
here.
"""

from dataclasses import dataclass, field
from collections import Counter
import csv
import io
import itertools
import math

import numpy as np

from .divdiff import divided_difference_exp, log_simplex_exp_integral
from .errors import CapabilityError, ContractViolation, DegeneratePathError
from .model import config_to_index, energy_table, index_to_config
from .resolvent import TwoLevelReduction, eigenvalues_from_ab, resolvent_ab, two_level_reduction

__all__ = [
    "TunnelingPath",
    "LoopRecord",
    "ProfilePoint",
    "Obstruction",
    "minimax_barrier",
    "enumerate_minimal_paths",
    "count_minimal_paths",
    "count_homotopy_classes",
    "g_lowest_order",
    "loop_symmetry_factor",
    "make_loop",
    "loop_free_energy",
    "loop_weight",
    "low_temperature_loop_weight",
    "lambda0_mean",
    "round_trip_loop",
    "out_and_back_loop",
    "z0_zb_lowest_order",
    "stretch_profiles",
    "perturbation_csv",
    "PERTURBATION_CSV_HEADER",
    "divided_difference_exp",
    "TwoLevelReduction",
    "resolvent_ab",
    "two_level_reduction",
    "eigenvalues_from_ab",
]

MAX_ENUMERATION_LENGTH = 12
MAX_DP_LENGTH = 22
PERTURBATION_CSV_HEADER = ["N", "Delta", "eps", "J", "L", "n_paths", "g_pert", "g_exact", "ratio"]


def _index(config_or_index):
    if isinstance(config_or_index, (int, np.integer)):
        return int(config_or_index)
    return config_to_index(config_or_index)


class _Landscape:
    """Energies of the subcube spanned by the bits where ``u`` and ``d`` differ."""

    def __init__(self, problem, u, d, table=None):
        self.problem = problem
        self.u = _index(u)
        self.d = _index(d)
        diff = self.u ^ self.d
        self.bits = [i for i in range(problem.n_spins) if (diff >> i) & 1]
        self.L = len(self.bits)
        if self.L == 0:
            raise ContractViolation("u and d coincide")
        self.table = energy_table(problem) if table is None else table
        self.e0 = float(self.table[self.u])
        ed = float(self.table[self.d])
        if not math.isclose(self.e0, ed, rel_tol=1e-12, abs_tol=1e-12):
            raise ContractViolation(f"wells are not degenerate: E(u)={self.e0}, E(d)={ed}")
        self.tol = 1e-12 * max(1.0, abs(self.e0))

    def state(self, mask):
        """Configuration index after flipping the subset ``mask`` of the differing bits."""
        s = self.u
        for k, b in enumerate(self.bits):
            if (mask >> k) & 1:
                s ^= 1 << b
        return s

    def subset_excess(self):
        """``E - E0`` for every subset of the differing bits, indexed by mask."""
        L = self.L
        masks = np.arange(1 << L)
        states = np.full(1 << L, self.u, dtype=np.int64)
        for k, b in enumerate(self.bits):
            states ^= ((masks >> k) & 1) << b
        return self.table[states] - self.e0, states


def minimax_barrier(problem, u, d):
    """Lowest achievable maximum of ``E - E0`` over minimal paths from ``u`` to ``d``."""
    land = _Landscape(problem, u, d)
    if land.L > MAX_DP_LENGTH:
        raise CapabilityError(f"Hamming distance {land.L} too large")
    excess, _ = land.subset_excess()
    full = (1 << land.L) - 1
    best = np.full(1 << land.L, np.inf)
    best[0] = 0.0
    for mask in range(1, full + 1):
        m = np.inf
        rest = mask
        while rest:
            low = rest & -rest
            m = min(m, best[mask ^ low])
            rest ^= low
        e = 0.0 if mask == full else excess[mask]
        best[mask] = max(m, e)
    return float(best[full])


def _resolve_ceiling(problem, u, d, ceiling):
    if ceiling is None:
        return math.inf
    if ceiling == "dominant":
        b = minimax_barrier(problem, u, d)
        return b + 1e-9 * max(1.0, abs(b))
    return float(ceiling)


@dataclass(frozen=True)
class TunnelingPath:
    """Sequence of configuration indices from ``u`` to ``d`` differing by single flips.

    ``amplitude`` is the path's lowest-order contribution
    ``Delta^L / prod_{l=1}^{L-1} (E_l - E_0)``.
    """

    states: tuple
    energies: tuple
    n_spins: int
    amplitude: float

    @property
    def length(self):
        return len(self.states) - 1

    @property
    def configs(self):
        return [index_to_config(s, self.n_spins) for s in self.states]

    @property
    def flip_order(self):
        return tuple((a ^ b).bit_length() - 1 for a, b in zip(self.states, self.states[1:]))


def _walk(land, ceiling, exhaustive_ok=True):
    """Yield admissible flip orders (tuples of positions in ``land.bits``)."""
    L = land.L
    full = (1 << L) - 1
    excess, _ = land.subset_excess()

    def rec(mask, order):
        if mask == full:
            yield tuple(order)
            return
        for k in range(L):
            if (mask >> k) & 1:
                continue
            nxt = mask | (1 << k)
            if nxt != full:
                ex = excess[nxt]
                if ex > ceiling:
                    continue
                if ex <= land.tol:
                    raise DegeneratePathError(
                        f"interior state {land.state(nxt)} has energy E0{ex:+.3g}")
            order.append(k)
            yield from rec(nxt, order)
            order.pop()

    yield from rec(0, [])


def enumerate_minimal_paths(problem, u, d, ceiling="dominant"):
    """All admissible minimal paths from ``u`` to ``d``.

    Each path carries its amplitude ``Delta^L / prod (E_l - E0)``. Prefixes that
    climb above the ceiling are pruned; an interior state at or below ``E0``
    raises :class:`DegeneratePathError`.
    """
    land = _Landscape(problem, u, d)
    if land.L > MAX_ENUMERATION_LENGTH:
        raise CapabilityError(f"explicit enumeration limited to L <= {MAX_ENUMERATION_LENGTH}")
    cap = _resolve_ceiling(problem, u, d, ceiling)
    delta = problem.transverse_field
    paths = []
    for order in _walk(land, cap):
        mask = 0
        states = [land.u]
        for k in order:
            mask |= 1 << k
            states.append(land.state(mask))
        energies = tuple(float(land.table[s]) for s in states)
        denom = math.prod(e - land.e0 for e in energies[1:-1])
        paths.append(TunnelingPath(tuple(states), energies, problem.n_spins,
                                   delta ** land.L / denom))
    return paths


def _subset_dp(land, ceiling, weight):
    """Sum over admissible orderings by dynamic programming on the subset lattice.

    ``weight(excess)`` is the factor contributed by each interior state.
    """
    L = land.L
    if L > MAX_DP_LENGTH:
        raise CapabilityError(f"Hamming distance {L} too large")
    excess, _ = land.subset_excess()
    full = (1 << L) - 1
    f = np.zeros(1 << L)
    f[0] = 1.0
    for mask in range(1, full + 1):
        if mask != full:
            ex = excess[mask]
            if ex > ceiling:
                continue
            if ex <= land.tol:
                raise DegeneratePathError(
                    f"interior state {land.state(mask)} has energy E0{ex:+.3g}")
        acc = 0.0
        rest = mask
        while rest:
            low = rest & -rest
            acc += f[mask ^ low]
            rest ^= low
        f[mask] = acc if mask == full else acc * weight(excess[mask])
    return float(f[full])


def count_minimal_paths(problem, u, d, ceiling="dominant"):
    """Number of admissible minimal paths (no explicit enumeration)."""
    land = _Landscape(problem, u, d)
    cap = _resolve_ceiling(problem, u, d, ceiling)
    return int(round(_subset_dp(land, cap, lambda ex: 1.0)))


def g_lowest_order(problem, u, d, ceiling=None):
    """Lowest-order tunneling amplitude: sum over admissible minimal paths.

    By default every minimal path with interior energies above ``E0`` is
    included. Pass ``ceiling="dominant"`` to keep only minimum-barrier paths.
    """
    land = _Landscape(problem, u, d)
    delta = problem.transverse_field
    if delta == 0.0:
        return 0.0
    cap = _resolve_ceiling(problem, u, d, ceiling)
    # scale each factor by Delta to keep the running products in range
    s = _subset_dp(land, cap, lambda ex: delta / ex)
    return delta * s


def count_homotopy_classes(problem, u, d, ceiling="dominant", max_paths=2_000_000):
    """Number of deformation classes of admissible minimal paths.

    Two paths are merged when they differ by swapping two consecutive flips
    whose alternative intermediate state also lies under the ceiling (an
    elementary square inside the low-energy subspace).
    """
    land = _Landscape(problem, u, d)
    cap = _resolve_ceiling(problem, u, d, ceiling)
    excess, _ = land.subset_excess()
    n = count_minimal_paths(problem, u, d, ceiling)
    if n > max_paths:
        raise CapabilityError(f"{n} paths exceed max_paths={max_paths}")
    orders = list(_walk(land, cap))
    index = {o: k for k, o in enumerate(orders)}
    parent = list(range(len(orders)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    full = (1 << land.L) - 1
    for k, order in enumerate(orders):
        mask = 0
        for pos in range(land.L - 1):
            a, b = order[pos], order[pos + 1]
            alt_mask = mask | (1 << b)
            mask |= 1 << a
            if alt_mask != full and (excess[alt_mask] > cap or excess[alt_mask] <= land.tol):
                continue
            swapped = order[:pos] + (b, a) + order[pos + 2:]
            j = index.get(swapped)
            if j is not None:
                ra, rb = find(k), find(j)
                if ra != rb:
                    parent[ra] = rb
    return len({find(k) for k in range(len(orders))})


# --- loops -------------------------------------------------------------------

def loop_symmetry_factor(states):
    """Order of the cyclic-shift subgroup leaving the state sequence unchanged."""
    seq = tuple(states)
    n = len(seq)
    if n == 0:
        return 1
    return sum(1 for k in range(n) if seq[k:] + seq[:k] == seq)


@dataclass(frozen=True)
class LoopRecord:
    """Directed closed sequence of configurations (indices), with cached energies."""

    states: tuple
    energies: tuple
    symmetry_factor: int
    n_spins: int

    @property
    def length(self):
        return len(self.states) if len(self.states) > 1 else 0

    @property
    def energy_multiset(self):
        """Sorted ``[(E_k, m_k)]`` of distinct energies and multiplicities."""
        return sorted(Counter(self.energies).items())


def make_loop(problem, states, table=None):
    """Validate a closed single-flip sequence and attach energies and symmetry factor.

    A single state denotes the empty (length-0) loop sitting in that state.
    """
    seq = tuple(_index(s) for s in states)
    if not seq:
        raise ContractViolation("a loop needs at least one state")
    if len(seq) > 1:
        for a, b in zip(seq, seq[1:] + seq[:1]):
            if bin(a ^ b).count("1") != 1:
                raise ContractViolation(f"states {a} and {b} are not one flip apart")
    if table is None:
        table = energy_table(problem)
    energies = tuple(float(table[s]) for s in seq)
    w = loop_symmetry_factor(seq) if len(seq) > 1 else 1
    return LoopRecord(seq, energies, w, problem.n_spins)


def loop_free_energy(problem, loop, beta):
    """Dimensionless loop free energy ``F`` with ``exp(-F) = (beta Delta)^n / w * I_n``.

    ``I_n`` is the simplex integral of ``exp(-beta sum lambda_l E_l)`` over the
    loop's energies. The empty loop has ``F = beta E``. Computed in log space,
    so large ``beta |E|`` is fine.
    """
    n = loop.length
    if n == 0:
        return beta * loop.energies[0]
    delta = problem.transverse_field
    if delta <= 0:
        return math.inf
    log_w = (n * math.log(beta * delta) - math.log(loop.symmetry_factor)
             + log_simplex_exp_integral(loop.energies, beta))
    return -log_w


def loop_weight(problem, loop, beta):
    """``exp(-F)``; may overflow for large ``beta |E|`` (use :func:`loop_free_energy`)."""
    return math.exp(-loop_free_energy(problem, loop, beta))


def low_temperature_loop_weight(problem, loop, beta, e0=None):
    """Leading low-temperature weight of a loop through well energy ``E0``.

    ``beta^r Delta^n exp(-beta E0) / prod_{interior} (E_l - E0)`` where ``r`` is
    the number of visits to states at ``E0`` (1 for a loop through one minimum,
    2 for a round trip) and the product runs over all other states.
    """
    if e0 is None:
        e0 = min(loop.energies)
    tol = 1e-12 * max(1.0, abs(e0))
    at_min = [e for e in loop.energies if abs(e - e0) <= tol]
    rest = [e - e0 for e in loop.energies if abs(e - e0) > tol]
    r = len(at_min)
    return (beta ** r * problem.transverse_field ** loop.length * math.exp(-beta * e0)
            / math.prod(rest) / loop.symmetry_factor)


def lambda0_mean(energies, beta):
    """Mean imaginary-time fraction spent in the segment with energy ``energies[0]``.

    ``<lambda_0> = -(1/beta) d/dE_0 log I``, evaluated as the ratio of the
    simplex integral with node 0 repeated to the plain simplex integral.
    """
    nodes = [float(e) for e in energies]
    if not nodes:
        raise ContractViolation("empty energy list")
    if len(nodes) == 1:
        return 1.0
    num = log_simplex_exp_integral([nodes[0]] + nodes, beta)
    den = log_simplex_exp_integral(nodes, beta)
    return math.exp(num - den)


def round_trip_loop(problem, forward, backward, table=None):
    """Loop ``u -> forward -> d -> backward -> u`` from a ``u->d`` and a ``d->u`` path.

    Either argument may be a :class:`TunnelingPath` or a state sequence; a
    ``u->d`` path given as ``backward`` is reversed automatically.
    """
    f = tuple(forward.states if isinstance(forward, TunnelingPath) else forward)
    b = tuple(backward.states if isinstance(backward, TunnelingPath) else backward)
    if b[0] == f[0]:
        b = b[::-1]
    if f[-1] != b[0] or b[-1] != f[0]:
        raise ContractViolation("paths do not close into a loop")
    return make_loop(problem, f + b[1:-1], table)


def out_and_back_loop(problem, path_states, k, table=None):
    """Loop stretching ``k`` steps along a path and retracing: ``s0 .. s_k .. s1``."""
    s = tuple(path_states)
    if k == 0:
        return make_loop(problem, s[:1], table)
    return make_loop(problem, s[: k + 1] + s[k - 1:0:-1], table)


def z0_zb_lowest_order(problem, u, d, beta, ceiling=None):
    """Well and boundary partition functions at lowest order.

    Returns a dict with ``Z0 = exp(-beta E0)``, ``ZB = Z0 beta^2 g^2``,
    ``ratio = beta^2 g^2`` and ``log_Z0`` (useful when ``Z0`` overflows).
    """
    land = _Landscape(problem, u, d)
    g = g_lowest_order(problem, u, d, ceiling)
    ratio = beta * beta * g * g
    log_z0 = -beta * land.e0
    z0 = math.exp(log_z0) if log_z0 < 700 else math.inf
    return {"Z0": z0, "ZB": z0 * ratio, "ratio": ratio, "log_Z0": log_z0, "g": g}


# --- stretch profiles --------------------------------------------------------

@dataclass(frozen=True)
class ProfilePoint:
    """One loop along a stretch profile.

    ``label`` is ``"A"`` (empty loop at u), ``"B"`` (partially stretched),
    ``"C"`` (full round trip), ``"D"`` (partially stretched from d) or ``"E"``
    (empty loop at d); ``step`` counts strand advances from the nearest well.
    """

    label: str
    step: int
    loop: LoopRecord = None
    free_energy: float = math.inf
    obstruction: "Obstruction" = None


@dataclass(frozen=True)
class Obstruction:
    """No connecting states under the ceiling between two strand tips."""

    tip_a: int
    tip_b: int
    ceiling: float
    message: str

    def report(self):
        return (f"obstruction: tips {self.tip_a} -> {self.tip_b}: {self.message} "
                f"(ceiling E0+{self.ceiling:g})")


def _bridge(land, a, b, ceiling, forbidden):
    """Interior states of the best minimal-Hamming connection from ``a`` to ``b``.

    Maximizes the low-temperature weight ``prod 1/(E - E0)`` over orderings of
    the flips, avoiding ``forbidden`` states and anything above the ceiling.
    Returns ``None`` when no connection exists.
    """
    diff = a ^ b
    bits = [i for i in range(land.problem.n_spins) if (diff >> i) & 1]
    m = len(bits)
    if m <= 1:
        return ()
    full = (1 << m) - 1
    score = np.full(1 << m, -np.inf)
    back = np.full(1 << m, -1, dtype=np.int64)
    score[0] = 0.0

    def state(mask):
        s = a
        for k, bit in enumerate(bits):
            if (mask >> k) & 1:
                s ^= 1 << bit
        return s

    for mask in range(1, full + 1):
        if mask != full:
            s = state(mask)
            ex = land.table[s] - land.e0
            if s in forbidden or ex > ceiling or ex <= land.tol:
                continue
            gain = -math.log(ex)
        else:
            gain = 0.0
        rest = mask
        while rest:
            low = rest & -rest
            prev = mask ^ low
            if score[prev] + gain > score[mask]:
                score[mask] = score[prev] + gain
                back[mask] = prev
            rest ^= low
    if not np.isfinite(score[full]):
        return None
    chain = []
    mask = int(back[full])
    while mask > 0:
        chain.append(state(mask))
        mask = int(back[mask])
    return tuple(reversed(chain))


def _profile_side(problem, land, beta, strand1, strand2, ceiling, labels, table):
    """Loops whose two strands start at ``strand[0]`` and advance ``k`` steps."""
    L = len(strand1) - 1
    points = []
    forbidden = {land.u, land.d}
    start_label, mid_label = labels
    for k in range(0, L):
        if k == 0:
            loop = make_loop(problem, strand1[:1], table)
        else:
            tip1, tip2 = strand1[k], strand2[k]
            if tip1 == tip2:
                bridge = ()
                seq = strand1[: k + 1] + strand2[k - 1:0:-1]
            else:
                bridge = _bridge(land, tip1, tip2, ceiling, forbidden)
                if bridge is None:
                    obs = Obstruction(tip1, tip2, ceiling,
                                      "no connecting states under the ceiling")
                    points.append(ProfilePoint(mid_label, k, None, math.inf, obs))
                    continue
                seq = strand1[: k + 1] + bridge + strand2[k:0:-1]
            loop = make_loop(problem, seq, table)
        label = start_label if k == 0 else mid_label
        points.append(ProfilePoint(label, k, loop, loop_free_energy(problem, loop, beta)))
    return points


def stretch_profiles(problem, beta, path1, path2=None, ceiling=None, both_sides=True):
    """Free-energy profiles of loops stretching from ``u`` towards ``d``.

    Returns ``(intra, inter)``. ``intra`` follows loops that go out along
    ``path1`` and retrace it, ending with the full round trip along ``path1``.
    ``inter`` (``None`` when ``path2`` is not given) follows loops whose two
    strands advance along ``path1`` and ``path2``; the tips are joined by the
    cheapest minimal-Hamming bridge that avoids both wells, and the sequence
    ends with the round trip ``u -> path1 -> d -> path2 -> u``. When no bridge
    fits under ``ceiling`` the point carries an :class:`Obstruction` and
    ``F = inf``. With ``both_sides`` the mirror-image half starting from ``d``
    is appended (labels ``D``/``E``).
    """
    p1 = tuple(path1.states if isinstance(path1, TunnelingPath) else path1)
    table = energy_table(problem)
    land = _Landscape(problem, p1[0], p1[-1], table)
    cap = math.inf if ceiling is None else float(ceiling)

    def build(q1, q2):
        first = _profile_side(problem, land, beta, q1, q2, cap, ("A", "B"), table)
        c_loop = round_trip_loop(problem, q1, q2, table)
        pts = first + [ProfilePoint("C", len(q1) - 1, c_loop,
                                    loop_free_energy(problem, c_loop, beta))]
        if both_sides:
            r1, r2 = q2[::-1], q1[::-1]
            second = _profile_side(problem, land, beta, r1, r2, cap, ("E", "D"), table)
            pts += list(reversed(second))
        return pts

    intra = build(p1, p1)
    inter = None
    if path2 is not None:
        p2 = tuple(path2.states if isinstance(path2, TunnelingPath) else path2)
        if p2[0] != p1[0] or p2[-1] != p1[-1]:
            raise ContractViolation("paths must share endpoints")
        inter = build(p1, p2)
    return intra, inter


def max_free_energy(profile):
    return max(p.free_energy for p in profile)


def perturbation_csv(rows):
    """CSV text from dict rows keyed by :data:`PERTURBATION_CSV_HEADER`."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PERTURBATION_CSV_HEADER, lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
