"""Run reports: phase timings, per-step iteration counts, and the ledger."""

from __future__ import annotations

from dataclasses import dataclass

from .strategies import SyncLedger

# The four runtime phases, with precomputation split into the session-wide
# part and the per-step part.
PHASES = ("setup", "precompute_global", "precompute_per_step", "optimize", "dynamics")


@dataclass
class RunReport:
    """Instrumented outcome of one closed-loop run."""

    scenario: dict
    phase_times_ms: dict
    per_step_iters: list
    ledger: SyncLedger
    closed_loop_cost: float
    converged_all_steps: bool
    total_wall_ms: float
    audit_worst: dict | None = None

    @property
    def iters_total(self) -> int:
        return int(sum(self.per_step_iters))

    def mean_per_mpc_step_ms(self) -> float:
        """Average runtime per MPC step: the recurring phases over the step count."""
        steps = max(1, len(self.per_step_iters))
        recurring = (self.phase_times_ms["optimize"]
                     + self.phase_times_ms["precompute_per_step"]
                     + self.phase_times_ms["dynamics"])
        return recurring / steps

    def as_dict(self) -> dict:
        return {
            "scenario": dict(self.scenario),
            "phase_times_ms": {k: float(v) for k, v in self.phase_times_ms.items()},
            "per_step_iters": [int(i) for i in self.per_step_iters],
            "iters_total": self.iters_total,
            "mean_per_mpc_step_ms": self.mean_per_mpc_step_ms(),
            "ledger": self.ledger.as_dict(),
            "closed_loop_cost": float(self.closed_loop_cost),
            "converged_all_steps": bool(self.converged_all_steps),
            "total_wall_ms": float(self.total_wall_ms),
            "audit_worst": self.audit_worst,
        }
