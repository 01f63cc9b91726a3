"""Build the chain benchmark plant and inspect its locality structure.

The plant is a chain of two-state nodes; each node couples to its chain
neighbors. A hop radius d turns into a sparsity mask on the stacked
closed-loop response: row r may touch column c only when the owning
subsystems are within d hops. The longest row/column supports (the padded
work-item sizes) stay small and obey an analytical bound independent of
the network size.
"""

import numpy as np

import locality_mpc as lm

system = lm.build_chain_network(8)
print("chain with", system.partition.subsystem_count, "subsystems:",
      system.n_states, "states,", system.n_inputs, "inputs")
print("A block for one node:\n", system.a.toarray()[:2, :2])
print("coupling block to a neighbor:\n", system.a.toarray()[:2, 2:4])

print("\nhop distances from node 0:",
      [lm.graph_distance(system.graph, 0, j) for j in range(8)])

horizon = 5
for d in range(4):
    mask = lm.build_locality_mask(system, d, horizon)
    d_row, d_col = lm.longest_vector_lengths(mask)
    row_bound, col_bound = lm.lemma1_bounds(2, 2, d, horizon)
    print(f"d={d}: longest row support {d_row:3d} (bound {row_bound:3d}), "
          f"longest column support {d_col:3d} (bound {col_bound:3d})")

mask = lm.build_locality_mask(system, 1, horizon)
print("\nwith d=1, a row owned by node 3 may touch columns",
      mask.row_supports[6].tolist())
print("the mask admits", mask.n_entries, "of", mask.n_rows * mask.n_cols,
      "possible entries")
