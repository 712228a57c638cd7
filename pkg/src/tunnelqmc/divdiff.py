"""Divided differences of the exponential, i.e. simplex integrals of exp.

For energies ``E_0..E_{n-1}`` (repeats allowed) we need

    I = integral over the simplex {lambda >= 0, sum lambda = 1} of
        exp(-beta * sum_l lambda_l E_l)

with Lebesgue measure on the first ``n-1`` coordinates (total volume
``1/(n-1)!``). By Hermite-Genocchi this equals the divided difference of
``exp`` at the nodes ``-beta E_l``, which is the top-right entry of
``expm(M)`` with ``M`` upper bidiagonal: ``-beta E`` on the diagonal and ones
above it.

Writing ``M = -c I + A`` with ``A`` entrywise nonnegative turns every step of
scaling-and-squaring into sums of products of nonnegative numbers, so there is
no cancellation however close (or equal) the nodes are.
"""

import math

import numpy as np

from .errors import ContractViolation

__all__ = ["expand_nodes", "simplex_exp_integral", "log_simplex_exp_integral",
           "divided_difference_exp"]

_TAYLOR_TERMS = 40


def expand_nodes(energies):
    """Turn ``[(E_k, m_k), ...]`` into a flat node list with repeats."""
    nodes = []
    for item in energies:
        e, m = item
        m = int(m)
        if m < 1:
            raise ContractViolation(f"multiplicity must be >= 1, got {m}")
        nodes.extend([float(e)] * m)
    return nodes


def _expm_nonneg_bidiagonal(d):
    """``expm`` of the upper bidiagonal matrix with diagonal ``d <= 0`` and unit superdiagonal.

    Returns ``(top_right, log_scale)`` with the entry represented as
    ``top_right * exp(log_scale)`` to stay clear of under/overflow.
    """
    n = len(d)
    spread = -float(np.min(d)) if n else 0.0
    # A = M + spread*I is nonnegative; choose s so ||A / 2^s|| <= 1/2
    norm = spread + 1.0
    s = max(0, int(math.ceil(math.log2(2.0 * norm))))
    h = 2.0 ** -s
    A = np.zeros((n, n))
    A[np.arange(n), np.arange(n)] = (np.asarray(d) + spread) * h
    if n > 1:
        A[np.arange(n - 1), np.arange(1, n)] = h
    # Taylor series of exp(A): all terms nonnegative. Entry (i, j) starts at
    # order j - i, so convergence is judged entrywise once k >= n.
    E = np.eye(n)
    term = np.eye(n)
    for k in range(1, n + _TAYLOR_TERMS):
        term = term @ A / k
        E = E + term
        if k >= n and np.all(term <= 1e-17 * E):
            break
    # exp(M/2^s) = exp(-spread h) exp(A); square s times while tracking a log scale
    log_scale = -spread * h
    for _ in range(s):
        E = E @ E
        log_scale *= 2.0
        top = E.max()
        if top > 1e150 or top < 1e-150:
            E /= top
            log_scale += math.log(top)
    return E[0, n - 1], log_scale


def log_simplex_exp_integral(nodes, beta=1.0):
    """Natural log of the simplex integral of ``exp(-beta sum lambda_l E_l)``."""
    e = np.asarray(nodes, dtype=float)
    if e.ndim != 1 or e.size == 0:
        raise ContractViolation("need at least one node")
    if not np.all(np.isfinite(e)):
        raise ContractViolation("nodes must be finite")
    if beta <= 0:
        raise ContractViolation("beta must be positive")
    z = beta * e
    zmin = float(z.min())
    # shift so the smallest node sits at 0: diagonal entries -(z - zmin) <= 0
    top, log_scale = _expm_nonneg_bidiagonal(-(z - zmin))
    if top <= 0.0:
        return -math.inf
    return math.log(top) + log_scale - zmin


def simplex_exp_integral(nodes, beta=1.0):
    return math.exp(log_simplex_exp_integral(nodes, beta))


def divided_difference_exp(energies, beta):
    """Confluent divided difference of ``exp(-beta E)`` in simplex-integral form.

    Parameters
    ----------
    energies : sequence of (E_k, m_k)
        Distinct energies with multiplicities; ``sum m_k = n >= 1``.
    beta : float
        Inverse temperature.

    Returns
    -------
    float
        ``beta^(1-n) sum_l [(-d/dE_l)^(m_l-1)/(m_l-1)!] exp(-beta E_l) / prod_{l' != l}(E_l' - E_l)``,
        which equals the integral of ``exp(-beta sum lambda E)`` over the
        ``(n-1)``-simplex.
    """
    nodes = expand_nodes(energies)
    if not nodes:
        raise ContractViolation("empty energy list")
    return simplex_exp_integral(nodes, beta)
