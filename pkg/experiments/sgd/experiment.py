import numpy as np

from experiments.base_experiment import BaseExperiment, run_summary
from experiments.config import ExperimentInfo, RunJob, RunOutcome
from solvers.sgd_control import (
    noise_covariance,
    ou_terminal_variance,
    quadratic_objective,
    schedule_search,
)
from solvers.trace import IterationTrace, TraceStatus


class SgdExperiment(BaseExperiment):
    """
    Constant-control search for the terminal-variance objective of the SGD
    diffusion on f(x, Z) = |x - Z|^2 / 2 with standard normal Z.
    """

    def sigma(self, dim: int):
        cfg = self.config
        if cfg.noise_scale is not None:
            return cfg.noise_scale * np.eye(dim)
        return None

    def plan(self) -> list[RunJob]:
        return [RunJob(run="schedule", task=self._task)]

    def _task(self) -> RunOutcome:
        cfg = self.config
        obj = quadratic_objective(cfg.dim)
        x0 = np.full(cfg.dim, cfg.x0)
        estimate = noise_covariance(obj, x0, cfg.noise_samples, cfg.seed)
        sigma = self.sigma(cfg.dim)
        result = schedule_search(
            obj, x0, cfg.controls, cfg.eta, cfg.horizon, cfg.replicas, cfg.seed,
            floor=cfg.floor, step=cfg.step, sigma=estimate.factor if sigma is None else sigma,
        )
        extras: dict[str, float | int | bool | str] = {
            "best_control": result.best,
            "sigma_trace": float(np.trace(estimate.covariance)),
        }
        for index, row in enumerate(result.table):
            extras[f"u{index}.control"] = row.control
            extras[f"u{index}.variance"] = row.value
            extras[f"u{index}.stderr"] = row.standard_error
            if cfg.noise_scale is not None:
                extras[f"u{index}.ou_variance"] = cfg.dim * ou_terminal_variance(
                    cfg.eta, cfg.noise_scale, row.control, cfg.horizon
                )
        trace = IterationTrace(
            distances=[row.value for row in result.table],
            tolerance=cfg.tolerance,
            status=TraceStatus.CONVERGED,
        )
        return RunOutcome(run="schedule", trace=trace, extras=extras)

    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        cfg = self.config
        summary: dict[str, float | int | bool | str] = {
            "kind": "sgd",
            "dim": cfg.dim,
            "eta": cfg.eta,
            "horizon": cfg.horizon,
            "replicas": cfg.replicas,
            "floor": cfg.floor,
        }
        for outcome in outcomes:
            summary.update(run_summary(outcome))
        return summary

    @staticmethod
    def describe() -> ExperimentInfo:
        return ExperimentInfo(
            kind="sgd",
            description="Terminal-variance comparison of constant step-size controls for the SGD diffusion",
            problems=["quadratic"],
            keys=["controls", "floor", "eta", "horizon", "replicas", "step", "noise_scale", "x0"],
            metric="terminal variance per candidate control",
        )
