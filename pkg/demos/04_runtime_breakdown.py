"""Where the time goes: the per-phase runtime split across strategies.

The run divides into strategy setup, session-wide precomputation (the
feasibility projectors), per-step precomputation (restricting the measured
state to row supports), the solver iterations, and the plant stepping. For
the single-threaded baseline the solver phase dominates; the batched
schedules compress exactly that phase.
"""

from locality_mpc import Scenario, bench
from locality_mpc.report import PHASES
from locality_mpc.strategies import STRATEGY_NAMES

sizes = [10, 25]
base = Scenario(horizon=5, d=2, t_sim=20, seed=1, strategy="sequential")
rows = bench.breakdown_rows(sizes, list(STRATEGY_NAMES), base)

for n in sizes:
    print(f"\nN = {n}  (wall ms per phase)")
    header = f"{'strategy':<12s}" + "".join(f"{p:>20s}" for p in PHASES) + f"{'total':>12s}"
    print(header)
    for strategy in STRATEGY_NAMES:
        cells = {r[6]: float(r[7]) for r in rows
                 if r[0] == strategy and int(r[1]) == n}
        line = f"{strategy:<12s}" + "".join(f"{cells[p]:>20.1f}" for p in PHASES)
        print(line + f"{cells['total']:>12.1f}")

print("\nthe same table is available from the command line:")
print("  locality-mpc breakdown --n 10,25 --strategy all --out breakdown.csv")
