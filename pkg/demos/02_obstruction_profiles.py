"""Free-energy profiles of loops stretched along one path or across both paths.

A loop that stays on a single tunneling path (intra) can grow smoothly from ``u``
to ``d``. A loop that straddles both paths of the ring (inter) must pass through
states with an extra domain wall, so its free-energy maximum is higher. The gap
shrinks as ``J/eps`` approaches 1.

Run with ``python3 demos/02_obstruction_profiles.py``.
"""

from tunnelqmc import all_down, all_up, make_frustrated_ring
from tunnelqmc.perturbation import enumerate_minimal_paths, max_free_energy, stretch_profiles

N, eps, beta = 6, 0.2, 20.0
for J in (6.0, 3.0, 1.5):
    p = make_frustrated_ring(N, J, eps, 1.0, 0.1)
    a, b = enumerate_minimal_paths(p, all_up(N), all_down(N))
    intra, inter = stretch_profiles(p, beta, a, b)
    f_intra, f_inter = max_free_energy(intra), max_free_energy(inter)
    print(f"J={J:4.1f}  max F intra {f_intra:8.3f}  inter {f_inter:8.3f}  gap {f_inter - f_intra:7.3f}")
