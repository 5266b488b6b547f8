import numpy as np

from experiments.base_experiment import BaseExperiment, run_summary
from experiments.config import ExperimentInfo, RunJob, RunOutcome
from solvers.grid import GridSpec
from solvers.splitting import (
    SplitIterate,
    TransportProblem,
    amplification_estimate,
    residual_check,
    solve_transport,
)


def manufactured_problem(alpha: float, drift: list[float], nodes: int, inflow: bool) -> TransportProblem:
    """
    Constant drift G on [0, 1]^d with exact solution sin(x_1 + ... + x_d),
    so F = alpha sin(s) - cos(s) sum(G).
    """
    G = np.asarray(drift, dtype=float)
    grid = GridSpec.cube(0.0, 1.0, nodes, len(G))

    def exact(mesh):
        return np.sin(np.sum(mesh, axis=-1))

    return TransportProblem(
        drift=lambda mesh: np.broadcast_to(G, mesh.shape).copy(),
        source=lambda mesh: alpha * exact(mesh) - np.cos(np.sum(mesh, axis=-1)) * G.sum(),
        alpha=alpha,
        grid=grid,
        inflow=exact if inflow else None,
    )


class TransportExperiment(BaseExperiment):
    """Splitting-up sweeps on a manufactured transport problem."""

    def problem(self) -> TransportProblem:
        cfg = self.config
        return manufactured_problem(cfg.alpha[0], cfg.drift, cfg.nodes, cfg.inflow)

    def plan(self) -> list[RunJob]:
        return [RunJob(run="sweeps", task=self._task)]

    def _task(self) -> RunOutcome:
        cfg = self.config
        p = self.problem()
        lam, trace = solve_transport(
            p, SplitIterate.zeros(p.grid), tol=cfg.tolerance, max_sweeps=cfg.max_iter
        )
        exact = np.sin(np.sum(p.grid.mesh(), axis=-1))
        error = np.abs(lam.values[..., 0] - exact)[p.grid.interior_mask()]
        return RunOutcome(
            run="sweeps",
            trace=trace,
            extras={"max_error": float(np.max(error)), "residual": residual_check(p, lam)},
        )

    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        cfg = self.config
        p = self.problem()
        summary: dict[str, float | int | bool | str] = {
            "kind": "transport",
            "dim": cfg.dim,
            "nodes": cfg.nodes,
            "alpha": cfg.alpha[0],
            "spacing": float(p.grid.spacing()[0]),
            "amplification": amplification_estimate(p),
        }
        for outcome in outcomes:
            summary.update(run_summary(outcome))
        return summary

    @staticmethod
    def describe() -> ExperimentInfo:
        return ExperimentInfo(
            kind="transport",
            description="Splitting-up solver on a manufactured first-order linear system",
            problems=["manufactured"],
            keys=["alpha", "dim", "nodes", "drift", "inflow"],
            metric="max |lam(j+1) - lam(j)| over the grid",
        )
