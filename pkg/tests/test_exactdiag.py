import math

import numpy as np
import pytest

from tunnelqmc import exactdiag
from tunnelqmc.errors import CapabilityError, ContractViolation
from tunnelqmc.exactdiag import (SPECTRUM_CSV_HEADER, apply_hamiltonian, dense_hamiltonian,
                                 equilibrium_observables, lowest_eigenpairs,
                                 round_trip_distribution, spectrum_csv, tunneling_gap)
from tunnelqmc.model import (IsingProblem, classical_energy, index_to_config,
                             make_frustrated_ring, make_shamrock, make_uniform_ferromagnet)

from tunnelqmc.perturbation import g_lowest_order

from test_model import random_problem


def explicit_hamiltonian(problem):
    """Kronecker-product construction; independent of the bit-index code path."""
    n = problem.n_spins
    sx = np.array([[0.0, 1.0], [1.0, 0.0]])
    eye = np.eye(2)

    def site(op, i):
        # basis index bit i is the i-th least significant factor
        out = np.array([[1.0]])
        for k in reversed(range(n)):
            out = np.kron(out, op if k == i else eye)
        return out

    diag = np.array([classical_energy(problem, index_to_config(k, n)) for k in range(1 << n)])
    H = np.diag(diag)
    for i in range(n):
        H -= problem.transverse_field * site(sx, i)
    return H


def test_apply_diagonal_when_delta_zero():
    rng = np.random.default_rng(0)
    p = random_problem(rng, 4).with_transverse_field(0.0)
    for k in (0, 5, 15):
        v = np.zeros(16)
        v[k] = 1.0
        out = apply_hamiltonian(p, v)
        assert out[k] == pytest.approx(classical_energy(p, index_to_config(k, 4)), abs=1e-12)
        assert np.count_nonzero(out) <= 1


def test_apply_single_spin():
    out = apply_hamiltonian(IsingProblem(1, {}, {}, 1.0, 0.5), np.array([1.0, 0.0]))
    assert np.allclose(out, [0.0, -0.5])


def test_apply_matches_dense():
    rng = np.random.default_rng(1)
    p = random_problem(rng, 4)
    H = explicit_hamiltonian(p)
    assert np.allclose(dense_hamiltonian(p), H, atol=1e-12)
    for _ in range(5):
        v = rng.normal(size=16)
        assert np.allclose(apply_hamiltonian(p, v), H @ v, atol=1e-12)
    with pytest.raises(ContractViolation):
        apply_hamiltonian(p, np.zeros(8))


def test_eigenpairs_single_spin():
    pairs = lowest_eigenpairs(IsingProblem(1, {}, {}, 1.0, 0.5), 2)
    assert [lam for lam, _ in pairs] == pytest.approx([-0.5, 0.5], abs=1e-12)


def test_eigenpairs_degenerate_ferromagnet():
    pairs = lowest_eigenpairs(IsingProblem(2, {}, {(0, 1): -1.0}), 3)
    lams = [lam for lam, _ in pairs]
    assert lams[:2] == pytest.approx([-1.0, -1.0], abs=1e-12)
    assert lams[2] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", [3, 6, 8])
def test_eigenpairs_match_dense(n):
    rng = np.random.default_rng(n)
    p = random_problem(rng, n)
    ref = np.linalg.eigvalsh(explicit_hamiltonian(p))[:4]
    pairs = lowest_eigenpairs(p, 4)
    assert [lam for lam, _ in pairs] == pytest.approx(ref, abs=1e-8)
    for lam, vec in pairs:
        assert np.linalg.norm(apply_hamiltonian(p, vec) - lam * vec) <= 1e-9 * np.linalg.norm(vec)


@pytest.mark.parametrize("n", [4, 6, 8])
def test_matrix_free_matches_dense(monkeypatch, n):
    rng = np.random.default_rng(20 + n)
    p = random_problem(rng, n)
    ref = np.linalg.eigvalsh(dense_hamiltonian(p))[:3]
    monkeypatch.setattr(exactdiag, "DENSE_MAX_SPINS", 2)
    lams = [lam for lam, _ in lowest_eigenpairs(p, 3)]
    assert lams == pytest.approx(ref, abs=1e-8)
    # fixed starting vector: bit-identical reruns
    assert lams == [lam for lam, _ in lowest_eigenpairs(p, 3)]


def test_eigenpairs_bad_k():
    with pytest.raises(ContractViolation):
        lowest_eigenpairs(IsingProblem(2), 0)
    with pytest.raises(ContractViolation):
        lowest_eigenpairs(IsingProblem(2), 9)


def test_gap_ring_small_delta():
    s = tunneling_gap(make_frustrated_ring(4, 6.0, 0.5, 1.0, 0.05))
    # lowest-order value 2 Delta^4 / (2 eps)^3 plus the other minimal-path orderings
    assert s.g == pytest.approx(1.25e-5, rel=0.2)
    assert s.e_minus <= s.e_plus and s.delta_e > 0


def test_gap_zero_delta():
    s = tunneling_gap(make_frustrated_ring(5, 6.0, 0.5))
    assert s.g == 0.0
    assert s.delta_e == pytest.approx(1.0, abs=1e-12)


def test_gap_matches_eigenvalue_difference():
    p = make_shamrock(2, 6.0, 0.2, 1.0, 0.5)
    s = tunneling_gap(p)
    lams = np.linalg.eigvalsh(dense_hamiltonian(p))
    assert s.g == pytest.approx((lams[1] - lams[0]) / 2, rel=1e-8)
    assert s.delta_e == pytest.approx(lams[2] - lams[1], rel=1e-8)
    assert s.e_minus == pytest.approx(lams[0], rel=1e-12)


def test_gap_symmetries():
    rng = np.random.default_rng(5)
    J = {(i, j): rng.uniform(-1, 1) for i in range(6) for j in range(i + 1, 6)}
    p = IsingProblem(6, {}, J, 1.0, 0.4)
    g = tunneling_gap(p).g
    perm = rng.permutation(6)
    q = IsingProblem(6, {}, {(perm[i], perm[j]): v for (i, j), v in J.items()}, 1.0, 0.4)
    assert tunneling_gap(q).g == pytest.approx(g, rel=1e-8)


def test_gap_resolves_tiny_splitting():
    # the splitting is far below eps * spectral radius; the sector method keeps it
    p = make_frustrated_ring(8, 6.0, 0.5, 1.0, 0.02)
    s = tunneling_gap(p)
    assert s.g < 1e-12
    assert s.g == pytest.approx(g_lowest_order(p, 0, 255), rel=0.01)


def test_equilibrium_z2_symmetric():
    obs = equilibrium_observables(make_frustrated_ring(4, 6.0, 0.5, 1.0, 0.3), 2.0)
    assert np.allclose(obs["sz"], 0.0, atol=1e-12)
    assert obs["pop_up"] == pytest.approx(obs["pop_down"], rel=1e-10)


@pytest.mark.parametrize("beta,delta", [(0.5, 0.3), (2.0, 0.5), (7.0, 1.2)])
def test_equilibrium_single_spin(beta, delta):
    obs = equilibrium_observables(IsingProblem(1, {}, {}, 1.0, delta), beta)
    assert obs["sx"][0] == pytest.approx(math.tanh(beta * delta), rel=1e-12)
    assert obs["mean_energy"] == pytest.approx(-delta * math.tanh(beta * delta), rel=1e-12)


def test_equilibrium_high_temperature():
    rng = np.random.default_rng(6)
    p = random_problem(rng, 4)
    obs = equilibrium_observables(p, 1e-9)
    assert obs["mean_energy"] == pytest.approx(np.trace(dense_hamiltonian(p)) / 16, abs=1e-7)


def test_equilibrium_capability():
    with pytest.raises(CapabilityError):
        equilibrium_observables(IsingProblem(13), 1.0)


def test_round_trip_single_spin():
    # a single spin alternates u, d at every flip: P(r) = 2 x^(2r) / (2r)! / (2 cosh x)
    x = 0.7
    res = round_trip_distribution(IsingProblem(1, {}, {}, 1.0, x), 1.0, 0, 1, r_max=3)
    ref = [2 * x ** (2 * r) / math.factorial(2 * r) / (2 * math.cosh(x)) for r in range(4)]
    assert np.allclose(res["p"], ref, rtol=1e-10)
    assert res["ratio"] == pytest.approx(x * x, rel=1e-10)


def test_round_trip_ring_approaches_two_level_limit():
    # exact ratio tends to beta^2 g^2 as beta grows at fixed beta * g
    base = make_frustrated_ring(4, 6.0, 2.0)
    gaps = []
    for beta, delta in ((10.0, 0.7953), (40.0, 0.549)):
        p = base.with_transverse_field(delta)
        g = tunneling_gap(p).g
        res = round_trip_distribution(p, beta, 0, 15)
        gaps.append(abs(res["ratio"] / (beta * g) ** 2 - 1))
        assert res["p"].sum() == pytest.approx(1.0, abs=1e-6)
    assert gaps[1] < gaps[0] < 0.2


def test_round_trip_rejects():
    with pytest.raises(ContractViolation):
        round_trip_distribution(IsingProblem(2), 1.0, 0, 0)
    with pytest.raises(CapabilityError):
        round_trip_distribution(IsingProblem(9), 1.0, 0, 1)


def test_spectrum_csv_header():
    assert SPECTRUM_CSV_HEADER == ["N", "K", "Delta", "beta", "E_minus", "E_plus", "g", "delta_e"]
    s = tunneling_gap(make_uniform_ferromagnet(3, 1.0, 1.0, 0.3))
    text = spectrum_csv([(3, None, 0.3, None, s)])
    lines = text.splitlines()
    assert lines[0] == "N,K,Delta,beta,E_minus,E_plus,g,delta_e"
    assert lines[1].startswith("3,,0.3,,")
