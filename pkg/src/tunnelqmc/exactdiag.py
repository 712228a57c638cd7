"""Exact spectra of ``H = E(sigma^z) - Delta sum_i sigma^x_i`` for small systems.

Dense diagonalization is used up to ``N = 12``; beyond that a matrix-free
Lanczos solver (ARPACK through :func:`scipy.sparse.linalg.eigsh`) with a fixed,
seeded starting vector.

The tunneling splitting of a Z2-symmetric problem (all ``h_i = 0``) can be
many orders of magnitude below machine precision times the spectral radius,
so :func:`tunneling_gap` does not subtract the two eigenvalues. It
diagonalizes the even and odd parity sectors separately and evaluates
``E_odd - E_even`` from the eigenvectors through the probability flux across a
cut separating each configuration from its global flip. Every term in that sum
has the same sign, so the splitting keeps full relative precision.
"""

from dataclasses import dataclass
import csv
import io

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as sla

from .errors import CapabilityError, ContractViolation, NumericalFailure
from .model import energy_table

__all__ = [
    "SpectrumSummary",
    "apply_hamiltonian",
    "dense_hamiltonian",
    "lowest_eigenpairs",
    "tunneling_gap",
    "equilibrium_observables",
    "round_trip_distribution",
    "spectrum_csv",
    "SPECTRUM_CSV_HEADER",
]

DENSE_MAX_SPINS = 12
MATRIX_FREE_MAX_SPINS = 24
RESIDUAL_TOL = 1e-9
SPECTRUM_CSV_HEADER = ["N", "K", "Delta", "beta", "E_minus", "E_plus", "g", "delta_e"]


@dataclass(frozen=True)
class SpectrumSummary:
    """Two lowest levels, half-splitting ``g`` and the gap to the third level."""

    e_minus: float
    e_plus: float
    g: float
    delta_e: float


def _check_size(problem, limit):
    if problem.n_spins > limit:
        raise CapabilityError(f"N = {problem.n_spins} exceeds supported maximum {limit}")


def apply_hamiltonian(problem, state_vector, diag=None):
    """Matrix-free product ``H v``.

    ``diag`` may carry a precomputed :func:`~tunnelqmc.model.energy_table` to
    avoid rebuilding it on every call.
    """
    _check_size(problem, MATRIX_FREE_MAX_SPINS)
    v = np.asarray(state_vector)
    dim = 1 << problem.n_spins
    if v.shape != (dim,):
        raise ContractViolation(f"state vector must have shape ({dim},), got {v.shape}")
    if diag is None:
        diag = energy_table(problem)
    out = diag * v
    delta = problem.transverse_field
    if delta != 0.0:
        vv = v.reshape((2,) * problem.n_spins)
        flipped = np.zeros_like(vv, dtype=np.result_type(v, float))
        for axis in range(problem.n_spins):
            flipped += np.flip(vv, axis=axis)
        out = out - delta * flipped.reshape(dim)
    return out


def dense_hamiltonian(problem):
    """Full ``2**N x 2**N`` matrix; intended for ``N <= 12``."""
    _check_size(problem, 14)
    n = problem.n_spins
    dim = 1 << n
    H = np.diag(energy_table(problem))
    idx = np.arange(dim)
    for i in range(n):
        H[idx, idx ^ (1 << i)] -= problem.transverse_field
    return H


def _seeded_start(dim, seed):
    rng = np.random.default_rng(seed)
    return rng.random(dim) + 0.5


def _check_residuals(apply, vals, vecs):
    for lam, vec in zip(vals, vecs.T):
        res = np.linalg.norm(apply(vec) - lam * vec)
        if res > RESIDUAL_TOL * max(1.0, np.linalg.norm(vec)):
            raise NumericalFailure(f"eigenpair residual {res:.3e} above tolerance", res)


def _lowest(apply, dim, k, dense_builder, seed, maxiter):
    """k lowest eigenpairs of a symmetric operator of size ``dim``."""
    if dim <= (1 << DENSE_MAX_SPINS):
        vals, vecs = scipy.linalg.eigh(dense_builder(), subset_by_index=[0, k - 1])
        return vals, vecs
    op = sla.LinearOperator((dim, dim), matvec=apply, dtype=float)
    try:
        vals, vecs = sla.eigsh(op, k=k, which="SA", v0=_seeded_start(dim, seed),
                               tol=1e-13, maxiter=maxiter, ncv=max(2 * k + 1, 24))
    except sla.ArpackNoConvergence as exc:
        raise NumericalFailure("Lanczos did not converge", None) from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    _check_residuals(apply, vals, vecs)
    return vals, vecs


def lowest_eigenpairs(problem, k, seed=12345, maxiter=20000):
    """The ``k`` lowest eigenvalues (nondecreasing) with unit eigenvectors.

    Returns a list of ``(eigenvalue, eigenvector)`` tuples.
    """
    _check_size(problem, MATRIX_FREE_MAX_SPINS)
    dim = 1 << problem.n_spins
    if not 1 <= k <= min(8, dim):
        raise ContractViolation(f"k must be in [1, {min(8, dim)}], got {k}")
    diag = energy_table(problem)
    vals, vecs = _lowest(lambda v: apply_hamiltonian(problem, v, diag), dim, k,
                         lambda: dense_hamiltonian(problem), seed, maxiter)
    return [(float(vals[m]), vecs[:, m]) for m in range(k)]


# --- parity sectors -----------------------------------------------------------

class _Sector:
    """Even/odd combinations ``(|a> +- |~a>)/sqrt 2`` over representatives ``a``.

    Representatives are the indices with the top spin up (bit N-1 clear), so
    ``a`` and its global flip ``~a`` are never both representatives.
    """

    def __init__(self, problem, parity):
        self.problem = problem
        self.parity = parity
        n = problem.n_spins
        self.n = n
        self.half = 1 << (n - 1)
        self.mask = (1 << n) - 1
        self.diag = energy_table(problem)[: self.half]
        self.delta = problem.transverse_field

    def apply(self, w):
        out = self.diag * w
        if self.delta:
            reps = np.arange(self.half)
            acc = np.zeros_like(w)
            for i in range(self.n - 1):
                acc += w[reps ^ (1 << i)]
            # flipping the top spin lands on ~(a ^ top) which is a representative
            acc += self.parity * w[(reps ^ (1 << (self.n - 1))) ^ self.mask]
            out = out - self.delta * acc
        return out

    def dense(self):
        reps = np.arange(self.half)
        H = np.diag(self.diag.copy())
        for i in range(self.n - 1):
            H[reps, reps ^ (1 << i)] -= self.delta
        H[reps, (reps ^ (1 << (self.n - 1))) ^ self.mask] -= self.parity * self.delta
        return H

    def lowest(self, k, seed, maxiter):
        k = min(k, self.half)
        vals, vecs = _lowest(self.apply, self.half, k, self.dense, seed, maxiter)
        # Perron-Frobenius: the even ground state can be chosen positive
        for m in range(vecs.shape[1]):
            if vecs[:, m].sum() < 0:
                vecs[:, m] = -vecs[:, m]
        return vals, vecs


def _is_z2_symmetric(problem):
    return problem.n_spins >= 2 and all(v == 0.0 for v in problem.fields.values())


def _split_from_sectors(problem, seed, maxiter):
    even = _Sector(problem, +1)
    odd = _Sector(problem, -1)
    ve, we = even.lowest(2, seed, maxiter)
    vo, wo = odd.lowest(2, seed + 1, maxiter)
    return ve, vo, we[:, 0], wo[:, 0]


def _full_from_sector(w, parity, n):
    """Full-basis amplitudes of a sector vector."""
    dim = 1 << n
    half = dim >> 1
    psi = np.empty(dim)
    psi[:half] = w / np.sqrt(2.0)
    psi[(np.arange(half) ^ (dim - 1))] = parity * w / np.sqrt(2.0)
    return psi


def _u_side(n):
    """Boolean mask of configurations on the all-up side of the cut.

    Fewer than N/2 down spins, ties broken by the top spin being up; the mask
    and its global flip partition the basis.
    """
    idx = np.arange(1 << n)
    weight = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        weight += (idx >> i) & 1
    top_up = ((idx >> (n - 1)) & 1) == 0
    return (2 * weight < n) | ((2 * weight == n) & top_up)


def tunneling_gap(problem, seed=12345, maxiter=20000):
    """Two lowest levels, ``g = (E_+ - E_-)/2`` and the gap ``delta_e`` above ``E_+``."""
    _check_size(problem, MATRIX_FREE_MAX_SPINS)
    if not _is_z2_symmetric(problem):
        pairs = lowest_eigenpairs(problem, min(3, 1 << problem.n_spins), seed, maxiter)
        vals = [p[0] for p in pairs]
        e_minus, e_plus = vals[0], vals[1]
        third = vals[2] if len(vals) > 2 else e_plus
        return SpectrumSummary(e_minus, e_plus, 0.5 * (e_plus - e_minus),
                               max(third - e_plus, 0.0))
    ve, vo, psi_e, psi_o = _split_from_sectors(problem, seed, maxiter)
    split = _sector_splitting(problem, psi_e, psi_o, ve[0], vo[0])
    e_minus = min(ve[0], vo[0])
    e_plus = e_minus + abs(split)
    levels = sorted([ve[0], vo[0]] + list(ve[1:]) + list(vo[1:]))
    third = levels[2] if len(levels) > 2 else e_plus
    return SpectrumSummary(float(e_minus), float(e_plus), 0.5 * abs(float(split)),
                           max(float(third - e_plus), 0.0))


def _sector_splitting(problem, w_even, w_odd, e_even, e_odd):
    """``E_odd - E_even`` from the sector ground states.

    With ``P_A`` projecting on the up side ``A`` of a cut,
    ``<e|[H, P_A]|o> = (E_e - E_o) <e|P_A|o>``; the commutator only involves
    single flips crossing the cut, where both amplitudes are small.
    """
    if problem.transverse_field == 0.0:
        return e_odd - e_even
    n = problem.n_spins
    psi_e = _full_from_sector(w_even, +1, n)
    psi_o = _full_from_sector(w_odd, -1, n)
    side = _u_side(n)
    if np.sum(psi_o[side] * psi_e[side]) < 0:
        psi_o = -psi_o
    overlap = np.sum(psi_e[side] * psi_o[side])
    if overlap <= 1e-3:
        # wells not localized: no useful cut, plain difference is accurate enough
        return e_odd - e_even
    x = np.flatnonzero(side)
    flux = 0.0
    for i in range(n):
        y = x ^ (1 << i)
        cross = ~side[y]
        xa, yb = x[cross], y[cross]
        flux += np.sum(psi_e[yb] * psi_o[xa] - psi_e[xa] * psi_o[yb])
    return problem.transverse_field * flux / overlap


def equilibrium_observables(problem, beta):
    """Thermal averages at inverse temperature ``beta`` from the full spectrum.

    Returns a dict with ``mean_energy``, ``sz`` (per spin), ``sx`` (per spin),
    ``pop_up`` and ``pop_down`` (populations of the all-up and all-down
    configurations).
    """
    if problem.n_spins > DENSE_MAX_SPINS:
        raise CapabilityError("equilibrium_observables needs the full spectrum (N <= 12)")
    H = dense_hamiltonian(problem)
    vals, vecs = np.linalg.eigh(H)
    w = np.exp(-beta * (vals - vals[0]))
    p = w / w.sum()
    n = problem.n_spins
    dim = 1 << n
    probs = (vecs ** 2) @ p  # diagonal of the density matrix
    idx = np.arange(dim)
    sz = np.array([np.sum(probs * (1.0 - 2.0 * ((idx >> i) & 1))) for i in range(n)])
    sx = np.empty(n)
    for i in range(n):
        flipped = vecs[idx ^ (1 << i), :]
        sx[i] = np.sum(p * np.sum(vecs * flipped, axis=0))
    return {
        "mean_energy": float(np.sum(p * vals)),
        "sz": sz,
        "sx": sx,
        "pop_up": float(probs[0]),
        "pop_down": float(probs[dim - 1]),
    }


ROUND_TRIP_MAX_SPINS = 8


def round_trip_distribution(problem, beta, u, d, r_max=3, n_points=32):
    """Exact probabilities that a thermal world-line makes ``r`` round trips
    between configurations ``u`` and ``d`` (indices), for ``r = 0..r_max``.

    Imaginary-time evolution runs on configurations tagged with the last
    visited member of ``{u, d}``; each change of tag carries a factor ``z``.
    The trace of the tagged propagator is then a power series in ``z`` whose
    ``z^(2r)`` coefficient is the weight of world-lines with ``r`` round trips
    (world-lines that visit neither state are counted under both tags and
    corrected once). Coefficients are read off by sampling ``z`` on the unit
    circle. Returns ``{"p": array, "ratio": 2 p[1] / p[0]}``.
    """
    n = problem.n_spins
    if n > ROUND_TRIP_MAX_SPINS:
        raise CapabilityError(f"round_trip_distribution supports N <= {ROUND_TRIP_MAX_SPINS}")
    if u == d:
        raise ContractViolation("u and d must differ")
    if n_points <= 2 * r_max:
        raise ContractViolation("n_points must exceed 2 * r_max")
    H = dense_hamiltonian(problem)
    dim = H.shape[0]
    vals = np.linalg.eigvalsh(H)
    shift = vals[0]
    Hs = H - shift * np.eye(dim)
    # tag 0: last visited u; tag 1: last visited d; state index = tag * dim + config
    a0 = np.zeros((2 * dim, 2 * dim))
    a1 = np.zeros((2 * dim, 2 * dim))
    for tag in (0, 1):
        for x in range(dim):
            col = tag * dim + x
            a0[col, col] = -Hs[x, x]
            for i in range(n):
                y = x ^ (1 << i)
                new = 0 if y == u else (1 if y == d else tag)
                (a1 if new != tag else a0)[new * dim + y, col] += -Hs[y, x]
    # (u, tag 1) and (d, tag 0) are unreachable; exclude them from the trace
    keep = np.ones(2 * dim, dtype=bool)
    keep[dim + u] = False
    keep[d] = False
    zs = np.exp(2j * np.pi * np.arange(n_points) / n_points)
    traces = np.array([np.trace(scipy.linalg.expm(beta * (a0 + z * a1))[np.ix_(keep, keep)])
                       for z in zs])
    coef = np.real(np.fft.fft(traces)) / n_points
    rest = [k for k in range(dim) if k not in (u, d)]
    neither = np.trace(scipy.linalg.expm(-beta * Hs[np.ix_(rest, rest)])) if rest else 0.0
    z_total = np.sum(np.exp(-beta * (vals - shift)))
    weights = coef[0:2 * r_max + 1:2].copy()
    weights[0] -= neither
    p = weights / z_total
    return {"p": p, "ratio": 2.0 * p[1] / p[0]}


def spectrum_csv(rows):
    """CSV text for ``(N, K, Delta, beta, SpectrumSummary)`` rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SPECTRUM_CSV_HEADER)
    for N, K, delta, beta, s in rows:
        writer.writerow([N, "" if K is None else K, repr(float(delta)),
                         "" if beta is None else repr(float(beta)),
                         repr(s.e_minus), repr(s.e_plus), repr(s.g), repr(s.delta_e)])
    return buf.getvalue()
