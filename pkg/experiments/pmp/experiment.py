import numpy as np

from experiments.base_experiment import BaseExperiment, run_summary
from experiments.config import ExperimentInfo, RunJob, RunOutcome
from solvers.deep_pmp import (
    ContinuousNet,
    ControlDynamics,
    ControlPath,
    SingleLayerDynamics,
    TrainingSet,
    TrainStatus,
    cost,
    forward_states,
    load_training_set,
    predictions,
    train,
)
from solvers.trace import IterationTrace, TraceStatus

REALIZABLE_SAMPLES = 10


class PmpExperiment(BaseExperiment):
    """Successive-approximation training of a continuous-depth network."""

    def setup(self) -> tuple[ContinuousNet, TrainingSet]:
        cfg = self.config
        if cfg.problem == "toy":
            net = ContinuousNet(
                dynamics=ControlDynamics(), input_map=[[1.0]], readout=[1.0],
                horizon=cfg.horizon, steps=cfg.steps, method=cfg.integrator,
            )
            data = TrainingSet(inputs=[[0.0]], targets=[1.0], regularization=cfg.penalty, weighting=cfg.weighting)
            return net, data

        if cfg.problem == "realizable":
            net = self._single_layer(1)
            inputs = np.linspace(-1.0, 1.0, REALIZABLE_SAMPLES)[:, None]
            star = ControlPath.constant(net, cfg.theta_star)
            probe = TrainingSet(inputs=inputs, targets=np.zeros(len(inputs)))
            targets = predictions(net, forward_states(net, star, probe))
            data = TrainingSet(inputs=inputs, targets=targets, regularization=cfg.penalty, weighting=cfg.weighting)
            return net, data

        data = load_training_set(cfg.training_file, regularization=cfg.penalty, weighting=cfg.weighting)
        return self._single_layer(data.inputs.shape[1]), data

    def _single_layer(self, dim: int) -> ContinuousNet:
        cfg = self.config
        return ContinuousNet(
            dynamics=SingleLayerDynamics(cfg.activation),
            input_map=np.eye(dim),
            readout=np.full(dim, 1.0 / dim),
            horizon=cfg.horizon,
            steps=cfg.steps,
            method=cfg.integrator,
        )

    def plan(self) -> list[RunJob]:
        return [RunJob(run="msa", task=self._task)]

    def _task(self) -> RunOutcome:
        cfg = self.config
        net, data = self.setup()
        theta0 = ControlPath.constant(net, 0.0)
        result = train(
            net, theta0, data, epochs=cfg.max_iter, tol=cfg.tolerance,
            lr=cfg.lr, inner_steps=cfg.inner_steps, exact_argmin=cfg.exact_argmin,
        )
        status = {
            TrainStatus.CONVERGED: TraceStatus.CONVERGED,
            TrainStatus.MAX_EPOCHS: TraceStatus.MAX_ITER,
            TrainStatus.STAGNATED: TraceStatus.MAX_ITER,
        }[result.status]
        trace = IterationTrace(distances=result.costs, tolerance=cfg.tolerance, status=status)
        thetas = result.path.thetas
        return RunOutcome(
            run="msa",
            trace=trace,
            extras={
                "train_status": result.status.value,
                "final_cost": cost(net, result.path, data),
                "halvings": result.halvings,
                "final_lr": result.final_lr,
                "theta_mean": float(np.mean(thetas)),
                "theta_spread": float(np.max(thetas) - np.min(thetas)),
            },
        )

    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        cfg = self.config
        summary: dict[str, float | int | bool | str] = {
            "kind": "pmp",
            "problem": cfg.problem,
            "steps": cfg.steps,
            "horizon": cfg.horizon,
            "integrator": cfg.integrator,
            "weighting": cfg.weighting,
        }
        for outcome in outcomes:
            summary.update(run_summary(outcome))
        return summary

    @staticmethod
    def describe() -> ExperimentInfo:
        return ExperimentInfo(
            kind="pmp",
            description="Method of successive approximations for continuous-depth networks",
            problems=["toy", "realizable", "file"],
            keys=["steps", "horizon", "lr", "inner_steps", "penalty", "integrator", "theta_star", "training_file"],
            metric="training cost J per accepted epoch",
        )
