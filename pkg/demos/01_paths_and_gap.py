"""Tunneling amplitude of the frustrated ring: minimal paths against exact diagonalization.

The ring has two admissible dominant flip orderings (clockwise and counterclockwise),
each contributing ``Delta^L / prod(E_l - E_0)``. Summing every admissible minimal path
converges to the exact half-splitting ``g`` as ``Delta`` shrinks, while the all-orders
resolvent reduction is accurate even when ``Delta`` is not small.

Run with ``python3 demos/01_paths_and_gap.py``.
"""

from tunnelqmc import all_down, all_up, make_frustrated_ring
from tunnelqmc.exactdiag import tunneling_gap
from tunnelqmc.perturbation import (count_homotopy_classes, count_minimal_paths,
                                    g_lowest_order, two_level_reduction)

N = 6
print(f"ring N={N}, J=6, eps=0.5")
print(f"{'Delta':>7} {'dominant':>8} {'classes':>7} {'g_exact':>11} {'g_pert/g':>9} {'g_all/g':>9}")
for delta in (0.08, 0.04, 0.02, 0.01):
    p = make_frustrated_ring(N, 6.0, 0.5, 1.0, delta)
    u, d = all_up(N), all_down(N)
    g = tunneling_gap(p).g
    g1 = g_lowest_order(p, u, d)
    red = two_level_reduction(p, u, d)
    print(f"{delta:7.3f} {count_minimal_paths(p, u, d):8d} {count_homotopy_classes(p, u, d):7d} "
          f"{g:11.4e} {g1 / g:9.5f} {red.g_allorders / g:9.5f}")
