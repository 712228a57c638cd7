"""Exact two-level reduction by projecting out everything but the two wells.

With ``P`` the projector on ``{|u>, |d>}`` and ``Q = 1 - P``, the eigenvalue
problem of ``H = H0 + V`` (``V = -Delta sum sigma^x``) restricted to the wells
reads ``a(x) +- b(x) = x`` with ``x = E - E0`` and

    a(x) = <u| V Q (x - Q(H0 - E0 + V)Q)^-1 Q V |u>
    b(x) = <u| V Q (x - Q(H0 - E0 + V)Q)^-1 Q V |d>

Both are evaluated by a single linear solve each. For ``x`` below the spectrum
of the projected operator ``b < 0``, so the tunneling amplitude is ``-b``.
"""

from dataclasses import dataclass
import math

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .errors import CapabilityError, ContractViolation, NumericalFailure
from .model import config_to_index, energy_table

__all__ = ["ProjectedSystem", "TwoLevelReduction", "resolvent_ab", "two_level_reduction",
           "eigenvalues_from_ab"]

MAX_SPINS = 14
DENSE_LIMIT = 2048
RESIDUAL_TOL = 1e-9
# finite-difference steps, in units of min(1, distance to the nearest pole)
FD_STEP = 1e-6
FD_STEP_SECOND = 1e-4


def _index(s):
    if isinstance(s, (int, np.integer)):
        return int(s)
    return config_to_index(s)


class ProjectedSystem:
    """``Q(H0 - E0 + V)Q`` on the complement of two wells, with solve helpers."""

    def __init__(self, problem, u, d):
        n = problem.n_spins
        if n > MAX_SPINS:
            raise CapabilityError(f"N={n} exceeds the resolvent limit N <= {MAX_SPINS}")
        self.problem = problem
        self.u, self.d = _index(u), _index(d)
        if self.u == self.d:
            raise ContractViolation("u and d coincide")
        table = energy_table(problem)
        self.e0 = float(table[self.u])
        if not math.isclose(self.e0, float(table[self.d]), rel_tol=1e-12, abs_tol=1e-12):
            raise ContractViolation("wells are not degenerate")
        dim_full = 1 << n
        keep = np.ones(dim_full, dtype=bool)
        keep[[self.u, self.d]] = False
        self.states = np.nonzero(keep)[0]
        pos = -np.ones(dim_full, dtype=np.int64)
        pos[self.states] = np.arange(self.states.size)
        self.dim = self.states.size
        delta = problem.transverse_field
        self.delta = delta

        rows, cols = [], []
        for i in range(n):
            nb = self.states ^ (1 << i)
            ok = keep[nb]
            rows.append(np.arange(self.dim)[ok])
            cols.append(pos[nb[ok]])
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        off = sp.coo_matrix((np.full(rows.size, -delta), (rows, cols)), shape=(self.dim, self.dim))
        self.diag = table[self.states] - self.e0
        self.H = (sp.diags(self.diag) + off).tocsc()

        def coupling(w):
            v = np.zeros(self.dim)
            for i in range(n):
                nb = w ^ (1 << i)
                if keep[nb]:
                    v[pos[nb]] = -delta
            return v

        self.v_u = coupling(self.u)
        self.v_d = coupling(self.d)
        self._dense = self.H.toarray() if self.dim <= DENSE_LIMIT else None
        self._eig = None

    def spectrum(self, k=8):
        """Lowest eigenvalues and eigenvectors of the projected operator."""
        if self._eig is None:
            if self.dim <= 4096:
                dense = self._dense if self._dense is not None else self.H.toarray()
                self._eig = scipy.linalg.eigh(dense)
            else:
                rng = np.random.default_rng(12345)
                vals, vecs = spla.eigsh(self.H, k=k, which="SA", tol=1e-12,
                                        v0=rng.standard_normal(self.dim))
                order = np.argsort(vals)
                self._eig = (vals[order], vecs[:, order])
        return self._eig

    def lowest_pole(self, rhs):
        """Smallest eigenvalue whose eigenvector overlaps ``rhs``."""
        vals, vecs = self.spectrum()
        norm = np.linalg.norm(rhs)
        if norm == 0:
            return math.inf
        overlap = np.abs(vecs.T @ rhs) / norm
        hit = np.nonzero(overlap > 1e-9)[0]
        if hit.size == 0:
            raise NumericalFailure("no pole found in the computed spectrum")
        return float(vals[hit[0]])

    def solve(self, x, rhs):
        """``(x - Q H Q)^-1 rhs`` with a residual check."""
        if self._dense is not None:
            A = x * np.eye(self.dim) - self._dense
            try:
                y = scipy.linalg.solve(A, rhs, assume_a="sym")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
                raise NumericalFailure(f"singular resolvent at x={x}") from exc
            res = A @ y - rhs
        else:
            A = (x * sp.identity(self.dim, format="csc") - self.H).tocsc()
            try:
                y = spla.splu(A).solve(rhs)
            except RuntimeError as exc:
                raise NumericalFailure(f"singular resolvent at x={x}") from exc
            res = A @ y - rhs
        # normwise backward error, meaningful even when y is huge near a pole
        scale = self._norm_bound(x) * float(np.linalg.norm(y)) + float(np.linalg.norm(rhs))
        r = float(np.linalg.norm(res)) / max(scale, 1e-300)
        if not np.all(np.isfinite(y)) or r > RESIDUAL_TOL:
            raise NumericalFailure(f"resolvent solve residual {r:.2e} at x={x}", residual=r)
        return y

    def _norm_bound(self, x):
        return abs(x) + float(np.max(np.abs(self.diag), initial=0.0)) + self.problem.n_spins * abs(self.delta)

    def ab(self, x):
        if self.delta == 0:
            return 0.0, 0.0
        y = self.solve(x, self.v_u)
        return float(self.v_u @ y), float(self.v_d @ y)

    def branch(self, x, sign):
        """``a(x) + sign * b(x)`` from a single solve."""
        if self.delta == 0:
            return 0.0
        y = self.solve(x, self.v_u + sign * self.v_d)
        return float(self.v_u @ y)


def resolvent_ab(problem, u, d, delta_e):
    """Return ``(a, b)`` at energy offset ``delta_e`` (below the projected spectrum)."""
    system = ProjectedSystem(problem, u, d)
    if problem.transverse_field == 0:
        return 0.0, 0.0
    lam = float(system.spectrum()[0][0])
    if delta_e >= lam:
        raise NumericalFailure(f"delta_e={delta_e} not below projected spectrum {lam}")
    return system.ab(delta_e)


def _fixed_point(f, pole, what):
    """Root of the decreasing function ``f`` on ``(-inf, pole)``."""
    scale = max(1.0, abs(pole)) if math.isfinite(pole) else 1.0
    if math.isfinite(pole):
        # approach the pole until f turns negative
        for eta in 10.0 ** -np.arange(1, 13):
            hi = pole - eta * scale
            if f(hi) < 0:
                break
        else:
            raise NumericalFailure(f"no bracket for {what} below pole {pole}")
    else:
        hi = 1.0
    lo = min(0.0, hi) - 1.0
    for _ in range(200):
        if f(lo) > 0:
            break
        lo = 2.0 * lo - 1.0
    else:
        raise NumericalFailure(f"no bracket for {what}")
    return brentq(f, lo, hi, xtol=1e-14 * scale, rtol=4 * np.finfo(float).eps, maxiter=500)


@dataclass(frozen=True)
class TwoLevelReduction:
    """Effective two-level description of the tunneling doublet.

    ``error_estimate`` is ``(g / gap)^2`` with ``gap`` the distance from
    ``delta_e0`` to the nearest pole of the resolvent, the size of the terms
    neglected by the truncation in ``b``.
    """

    e0: float
    delta_e0: float
    a0: float
    b0: float
    a_prime: float
    b_prime: float
    a_second: float
    g_allorders: float
    e0_tilde: float
    error_estimate: float


def two_level_reduction(problem, u, d):
    """Solve ``a(x) = x`` for the smallest root and expand around it."""
    system = ProjectedSystem(problem, u, d)
    if problem.transverse_field == 0:
        return TwoLevelReduction(system.e0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, system.e0, 0.0)
    pole = system.lowest_pole(system.v_u)
    x0 = _fixed_point(lambda x: system.ab(x)[0] - x, pole, "a(x) = x")
    scale = min(1.0, pole - x0)
    h1 = FD_STEP * scale
    h2 = FD_STEP_SECOND * scale
    a0, b0 = system.ab(x0)
    ap, bp = system.ab(x0 + h1)
    am, bm = system.ab(x0 - h1)
    a_prime = (ap - am) / (2 * h1)
    b_prime = (bp - bm) / (2 * h1)
    a2p, _ = system.ab(x0 + h2)
    a2m, _ = system.ab(x0 - h2)
    a_second = (a2p - 2 * a0 + a2m) / (h2 * h2)
    denom = 1.0 - a_prime
    if denom <= 0:
        raise NumericalFailure(f"1 - a' = {denom} is not positive")
    g = abs(b0) / denom
    e0_tilde = (system.e0 + x0 + b0 * b_prime / denom ** 2
                + a_second * b0 * b0 / (2 * denom ** 3))
    return TwoLevelReduction(system.e0, x0, a0, b0, a_prime, b_prime, a_second, g, e0_tilde,
                             (g / (pole - x0)) ** 2)


def eigenvalues_from_ab(problem, u, d):
    """Two lowest eigenvalues ``(E_plus, E_minus)`` from ``a(x) -+ |b(x)| = x``.

    Each branch is solved self-consistently below its own lowest pole; the
    reduction is exact, so these agree with full diagonalization.
    """
    system = ProjectedSystem(problem, u, d)
    if problem.transverse_field == 0:
        return system.e0, system.e0
    roots = {}
    for sign in (1, -1):
        rhs = system.v_u + sign * system.v_d
        pole = system.lowest_pole(rhs)
        roots[sign] = _fixed_point(lambda x, s=sign: system.branch(x, s) - x, pole,
                                   f"a {'+' if sign > 0 else '-'} b = x")
    lo, hi = sorted(roots.values())
    return system.e0 + hi, system.e0 + lo
