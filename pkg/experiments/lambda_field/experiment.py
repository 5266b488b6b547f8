import numpy as np

from experiments.base_experiment import BaseExperiment, certificate_report, run_summary
from experiments.config import CertificateReport, ExperimentInfo, RunJob, RunOutcome
from solvers.approx import InterpolatorSpec
from solvers.grid import GridSpec, low_discrepancy_points
from solvers.lambda_solver import (
    GradientField,
    NonlinearProblem,
    cone_violation,
    equation_residual,
    lambda_fixed_point,
)
from solvers.lqr import LqProblem

CROSS_CHECK_LQ = LqProblem(
    A=[[0.1, 0.2], [-0.1, 0.0]],
    B=[[1.0], [0.5]],
    N=[[1.0]],
    M=np.eye(2),
    alpha=4.0,
)


def tanh_problem(alpha: float, scale: float = 0.2) -> NonlinearProblem:
    """
    Scalar dynamics scale * tanh(x) + a with cost x^2 / 2 + a^2 / 2.
    |A(x)| <= scale |x| and |A'(x) - A'(y)| <= 2 scale |x - y| / (1 + |x| + |y|).
    """
    return NonlinearProblem(
        drift=lambda x: scale * np.tanh(x),
        drift_jacobian=lambda x: (scale / np.cosh(x) ** 2)[..., None],
        gamma=scale,
        b_modulus=2.0 * scale,
        B=[[1.0]],
        N=[[1.0]],
        cost_gradient=lambda x: x,
        m_bound=1.0,
        alpha=alpha,
        state_cost=lambda x: 0.5 * np.sum(x * x, axis=-1),
    )


class LambdaExperiment(BaseExperiment):
    """Value-gradient fixed point on a collocation set, one run per discount value."""

    def problem_for(self, alpha: float) -> NonlinearProblem:
        if self.config.problem == "lq":
            return NonlinearProblem.from_lq(CROSS_CHECK_LQ.with_alpha(alpha))
        return tanh_problem(alpha, self.config.drift_scale)

    def grid(self, dim: int) -> GridSpec:
        cfg = self.config
        lower = -cfg.box if cfg.lower is None else cfg.lower
        return GridSpec.cube(lower, cfg.box, cfg.points, dim)

    def interpolator(self) -> InterpolatorSpec:
        cfg = self.config
        return InterpolatorSpec(
            kind=cfg.interpolator,
            degree=cfg.degree,
            regularization=cfg.regularization,
            include_constant=False,
            scale=max(abs(cfg.box), abs(cfg.lower or 0.0)),
        )

    def certify(self) -> list[CertificateReport]:
        return [
            certificate_report(f"alpha={alpha:.12g}", self.problem_for(alpha).certificate())
            for alpha in self.config.alpha
        ]

    def plan(self) -> list[RunJob]:
        return [
            RunJob(run=f"a{index}", task=self._task(f"a{index}", alpha))
            for index, alpha in enumerate(self.config.alpha)
        ]

    def _task(self, run: str, alpha: float):
        cfg = self.config

        def task() -> RunOutcome:
            p = self.problem_for(alpha)
            grid = self.grid(p.state_dim)
            points = grid.points()
            lam0 = GradientField(
                points=points,
                values=np.zeros((len(points), p.state_dim)),
                interpolator=self.interpolator(),
            )
            lam, trace = lambda_fixed_point(
                p,
                lam0,
                tol=cfg.tolerance,
                max_iter=cfg.max_iter,
                backend=cfg.backend,
                grid=grid if cfg.backend == "transport" else None,
            )
            # Checks stay inside the box so finite differences do not extrapolate.
            checks = low_discrepancy_points(grid.lo, grid.hi, 256, seed=cfg.seed)
            inner = checks[np.all(np.abs(checks) <= 0.95 * cfg.box, axis=-1)]
            certificate = p.certificate()
            growth, slope = cone_violation(lam, inner, certificate.varpi, certificate.nu)
            return RunOutcome(
                run=run,
                trace=trace,
                extras={
                    "alpha": alpha,
                    "equation_residual": equation_residual(p, lam, inner),
                    "cone_growth_excess": growth,
                    "cone_slope_excess": slope,
                },
            )

        return task

    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        cfg = self.config
        summary: dict[str, float | int | bool | str] = {
            "kind": "lambda",
            "problem": cfg.problem,
            "backend": cfg.backend,
            "seed": cfg.seed,
            "runs": len(outcomes),
        }
        for index, alpha in enumerate(cfg.alpha):
            certificate = self.problem_for(alpha).certificate()
            summary[f"a{index}.gamma"] = certificate.gamma
            summary[f"a{index}.beta"] = certificate.beta
            summary[f"a{index}.varpi"] = certificate.varpi
            summary[f"a{index}.nu"] = certificate.nu
            summary[f"a{index}.alpha_ok"] = certificate.alpha_ok
        summary["all_converged"] = all(o.trace.converged for o in outcomes)
        for outcome in outcomes:
            summary.update(run_summary(outcome))
        return summary

    @staticmethod
    def describe() -> ExperimentInfo:
        return ExperimentInfo(
            kind="lambda",
            description="Fixed point of the value-gradient map on a collocation grid",
            problems=["tanh", "lq"],
            keys=["alpha", "box", "lower", "points", "interpolator", "degree", "backend"],
            metric="weighted sup distance sup |lam(k+1) - lam(k)| / |x|",
        )
