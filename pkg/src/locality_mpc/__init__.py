"""Locality-aware distributed MPC with schedulable consensus stages.

A receding-horizon controller for interconnected LTI systems whose
closed-loop response is constrained to d-hop locality. The horizon problem
is solved by a three-stage consensus iteration (row-wise explicit solve,
column-wise dynamics projection, dual update) whose stages can be driven
by five execution schedules modeling different degrees of device offload,
each with an exactly accounted communication ledger.
"""

from .admm import (AdmmState, FixedPointReport, Trajectory, admm_solve,
                   closed_loop_cost, column_residuals, dlmpc_simulate,
                   extract_control, lambda_update, phi_row_solve,
                   psi_column_solve, step_dynamics, verify_fixed_point)
from .bench import (Scenario, SweepConfig, make_benchmark_spec, parse_config,
                    run_scenario, sample_initial_state)
from .errors import (ConfigError, LocalityInfeasible, LocalityMpcError,
                     NotConverged, OracleFailure, RowInfeasible)
from .oracle import kkt_oracle_equality, simulate_with_oracle
from .report import PHASES, RunReport
from .sls_core import (ColumnPrecomp, DynamicsOperator, LayoutTables, PhiTriple,
                       ProblemSpec, RowData, RowMeta, RowPrecomp,
                       build_dynamics_operator, precompute_column_solvers,
                       precompute_row_data, row_index_map)
from .strategies import (ColumnPatch, ExecStrategy, Executor, SyncLedger,
                         WorkerPool, build_patches, patch_duplication,
                         reduce_convergence)
from .system_model import (UNREACHABLE, LocalityMask, LtiSystem, SubsystemGraph,
                           SubsystemPartition, build_chain_network,
                           build_locality_mask, graph_distance, lemma1_bounds,
                           longest_vector_lengths)

__version__ = "0.1.0"
