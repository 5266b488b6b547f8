import math

from experiments.base_experiment import BaseExperiment, certificate_report, run_summary
from experiments.config import CertificateReport, ExperimentInfo, RunJob, RunOutcome
from solvers.lqr import (
    LqProblem,
    compute_certificate,
    riccati_residual,
    sample_initial_guesses,
    solve_riccati,
)
from solvers.numerics import spectral_norm


class RiccatiExperiment(BaseExperiment):
    """
    Fixed-point Riccati iteration from several seeded P0 per discount value.
    The problem is drawn from `seed`, the initial guesses from `seed + 1`.
    """

    def base_problem(self) -> LqProblem:
        cfg = self.config
        if cfg.problem == "scalar":
            return LqProblem.scalar(
                a=cfg.scalar_a, b=cfg.scalar_b, n=cfg.scalar_n, m=cfg.scalar_m,
                alpha=cfg.alpha[0] if cfg.alpha else 1.0,
            )
        return LqProblem.random(cfg.state_dim, cfg.control_dim, alpha=1.0, seed=cfg.seed)

    def alphas(self, base: LqProblem) -> list[float]:
        if self.config.alpha_scale is not None:
            return [self.config.alpha_scale * compute_certificate(base).threshold]
        return list(self.config.alpha) or [base.alpha]

    def problems(self) -> list[LqProblem]:
        base = self.base_problem()
        return [base.with_alpha(alpha) for alpha in self.alphas(base)]

    def certify(self) -> list[CertificateReport]:
        return [
            certificate_report(f"alpha={p.alpha:.12g}", compute_certificate(p))
            for p in self.problems()
        ]

    def plan(self) -> list[RunJob]:
        cfg = self.config
        problems = self.problems()
        sweep = len(problems) > 1
        jobs = []
        for index, p in enumerate(problems):
            certificate = compute_certificate(p)
            if cfg.p0_radius is not None:
                radius = cfg.p0_radius
            elif math.isfinite(certificate.varpi):
                radius = cfg.p0_fraction * certificate.varpi
            else:
                radius = 1.0
            guesses = sample_initial_guesses(p.state_dim, cfg.samples, radius, seed=cfg.seed + 1)
            group = f"alpha_{p.alpha:g}" if sweep else ""
            for s, P0 in enumerate(guesses):
                run = f"a{index}.p{s}" if sweep else f"p{s}"
                jobs.append(RunJob(run=run, task=self._task(run, group, p, P0)))
        return jobs

    def _task(self, run: str, group: str, p: LqProblem, P0):
        def task() -> RunOutcome:
            P, trace = solve_riccati(p, P0, tol=self.config.tolerance, max_iter=self.config.max_iter)
            try:
                residual = riccati_residual(p, P)
            except ValueError:
                residual = math.inf
            return RunOutcome(
                run=run,
                group=group,
                trace=trace,
                extras={"p0_norm": spectral_norm(P0), "residual": residual},
            )

        return task

    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        problems = self.problems()
        first = compute_certificate(problems[0])
        summary: dict[str, float | int | bool | str] = {
            "kind": "riccati",
            "problem": self.config.problem,
            "seed": self.config.seed,
            "state_dim": problems[0].state_dim,
            "control_dim": problems[0].control_dim,
            "runs": len(outcomes),
            "gamma": first.gamma,
            "m_bound": first.m_bound,
            "bnb_norm": first.bnb_norm,
            "threshold": first.threshold,
        }
        for index, p in enumerate(problems):
            certificate = compute_certificate(p)
            prefix = f"a{index}." if len(problems) > 1 else ""
            summary[f"{prefix}alpha"] = p.alpha
            summary[f"{prefix}beta"] = certificate.beta
            summary[f"{prefix}varpi"] = certificate.varpi
            summary[f"{prefix}nu"] = certificate.nu
            summary[f"{prefix}alpha_ok"] = certificate.alpha_ok
            summary[f"{prefix}contraction_bound"] = certificate.contraction_bound
        summary["all_converged"] = all(o.trace.converged for o in outcomes)
        summary["any_diverged"] = any(o.trace.diverged for o in outcomes)
        for outcome in outcomes:
            summary.update(run_summary(outcome))
        return summary

    @staticmethod
    def describe() -> ExperimentInfo:
        return ExperimentInfo(
            kind="riccati",
            description="Fixed-point iteration for the discounted algebraic Riccati equation",
            problems=["random", "scalar"],
            keys=["alpha | alpha_scale", "state_dim", "control_dim", "samples", "p0_radius", "p0_fraction"],
            metric="spectral norm |P(k+1) - P(k)|",
        )
