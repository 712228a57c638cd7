"""Mean QMC escape time of small shamrocks against the 1/g^2 and 2^K/g^2 predictions.

Each run starts a world-line at all-up and counts sweeps until 5% of imaginary
time sits in all-down. With ``2^K`` homotopy-inequivalent paths, a loop can use
only one of them at a time, so the escape time grows like ``2^K/g^2`` rather
than ``1/g^2``. Values are normalised to ``K=1``. This demo stops at K=3 and
takes under a minute; the full comparison is the ``escape`` CLI subcommand.

Run with ``python3 demos/03_shamrock_escape.py``.
"""

from tunnelqmc import harness

cfg = harness.ExperimentConfig(kind="escape-scaling", family="shamrock", sizes=(1, 2, 3),
                               J=6.0, eps=0.2, delta=0.5, B=1.0, beta=20.0, runs=200, seed=7)
rows, _, _ = harness.run_escape_scaling(cfg)
print(f"{'K':>2} {'mean sweeps':>12} {'normalised':>11} {'1/g^2':>8} {'2^K/g^2':>8}")
for r in rows:
    print(f"{r.K:2d} {r.mean_sweeps:12.4g} {r.normalized_sweeps:11.3g} "
          f"{r.pred_inv_g2_normalized:8.3g} {r.pred_2K_inv_g2_normalized:8.3g}")
