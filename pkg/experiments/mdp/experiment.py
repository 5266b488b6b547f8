from pathlib import Path

import numpy as np

from experiments.base_experiment import BaseExperiment, ExperimentError, run_summary
from experiments.config import ExperimentInfo, RunJob, RunOutcome
from solvers.mdp import (
    MdpProblem,
    exhaustive_policy_search,
    load_mdp,
    policy_iteration,
    q_iteration,
    value_iteration,
)
from solvers.trace import IterationTrace, TraceStatus

# Enumeration of all A^S policies is only done up to this many.
EXHAUSTIVE_LIMIT = 4096


def _policy_text(policy) -> str:
    return " ".join(str(int(a)) for a in policy)


class MdpExperiment(BaseExperiment):
    """Value, policy and Q iteration on a fixture MDP, checked against enumeration."""

    def problem(self) -> MdpProblem:
        path = Path(self.config.mdp_file)
        if not path.exists():
            raise ExperimentError(f"MDP file not found: {path}")
        return load_mdp(path)

    def methods(self) -> list[str]:
        method = self.config.method
        return ["value", "policy", "q"] if method == "all" else [method]

    def reference(self, p: MdpProblem):
        if p.actions**p.states > EXHAUSTIVE_LIMIT:
            return None
        return exhaustive_policy_search(p)

    def plan(self) -> list[RunJob]:
        p = self.problem()
        best = self.reference(p)
        best_u = None if best is None else best[0]
        return [RunJob(run=method, task=self._task(method, p, best_u)) for method in self.methods()]

    def _task(self, method: str, p: MdpProblem, best_u):
        cfg = self.config

        def task() -> RunOutcome:
            if method == "value":
                result = value_iteration(p, cfg.max_iter)
                status = (
                    TraceStatus.CONVERGED
                    if result.changes and result.changes[-1] < cfg.tolerance
                    else TraceStatus.MAX_ITER
                )
                trace = IterationTrace(distances=result.changes, tolerance=cfg.tolerance, status=status)
                u, policy = result.u, result.policy
            elif method == "policy":
                result = policy_iteration(p, max_iter=cfg.max_iter)
                trace, u, policy = result.trace, result.u, result.policy
            else:
                result = q_iteration(p, max_iter=cfg.max_iter, tol=cfg.tolerance)
                trace, policy = result.trace, result.policy
                u = result.q[np.arange(p.states), policy]
            extras: dict[str, float | int | bool | str] = {
                "policy": _policy_text(policy),
                "value": " ".join(f"{v:.12g}" for v in u),
            }
            if best_u is not None:
                extras["max_deviation"] = float(np.max(np.abs(u - best_u)))
            return RunOutcome(run=method, trace=trace, extras=extras)

        return task

    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        p = self.problem()
        summary: dict[str, float | int | bool | str] = {
            "kind": "mdp",
            "mdp_file": self.config.mdp_file,
            "states": p.states,
            "actions": p.actions,
            "discount": p.alpha,
        }
        best = self.reference(p)
        if best is not None:
            summary["exhaustive_policy"] = _policy_text(best[1])
            summary["exhaustive_value"] = " ".join(f"{v:.12g}" for v in best[0])
        for outcome in outcomes:
            summary.update(run_summary(outcome))
        return summary

    @staticmethod
    def describe() -> ExperimentInfo:
        return ExperimentInfo(
            kind="mdp",
            description="Discounted MDP iteration schemes on a fixture file",
            problems=["file"],
            keys=["mdp_file", "method"],
            metric="sup-norm change (value, q) or number of changed actions (policy)",
        )
