import logging
from abc import ABC, abstractmethod

from experiments.config import (
    CertificateReport,
    ExperimentConfig,
    ExperimentInfo,
    RunJob,
    RunOutcome,
)
from solvers.lqr import ConvergenceCertificate

logger = logging.getLogger(__name__)


class BaseExperiment(ABC):
    """
    Abstract base class for all experiment kinds.

    An experiment splits into independent runs (plan) that the runner may
    execute concurrently, and a summary built from their outcomes.
    """

    def __init__(self, config: ExperimentConfig):
        self.config: ExperimentConfig = config

    def log_started(self) -> None:
        logger.info(
            "starting %s: %s", self.__class__.__name__, self.config.model_dump_json(indent=2)
        )

    @abstractmethod
    def plan(self) -> list[RunJob]:
        """
        Build the independent runs of this experiment.
        """
        pass

    @abstractmethod
    def summarize(self, outcomes: list[RunOutcome]) -> dict[str, float | int | bool | str]:
        """
        Summary values in a fixed key order.
        """
        pass

    def certify(self) -> list[CertificateReport]:
        raise ExperimentError(f"experiment kind '{self.config.kind}' has no convergence certificate")

    @staticmethod
    @abstractmethod
    def describe() -> ExperimentInfo:
        pass


class ExperimentError(Exception):
    """Base error for all experiment-related exceptions."""

    def __init__(self, message, details=None):
        self.message = message
        self.details = details
        super().__init__(message)


def certificate_report(label: str, certificate: ConvergenceCertificate) -> CertificateReport:
    return CertificateReport(
        label=label,
        gamma=certificate.gamma,
        bnb_norm=certificate.bnb_norm,
        m_bound=certificate.m_bound,
        threshold=certificate.threshold,
        alpha=certificate.alpha,
        beta=certificate.beta,
        varpi=certificate.varpi,
        nu=certificate.nu,
        alpha_ok=certificate.alpha_ok,
        b_ok=certificate.b_ok,
    )


def run_summary(outcome: RunOutcome) -> dict[str, float | int | bool | str]:
    """Per-run keys shared by every iterative experiment."""
    trace = outcome.trace
    summary: dict[str, float | int | bool | str] = {
        f"{outcome.run}.status": trace.status.value,
        f"{outcome.run}.converged": trace.converged,
        f"{outcome.run}.diverged": trace.diverged,
        f"{outcome.run}.iterations": trace.iterations,
        f"{outcome.run}.last_distance": trace.last_distance,
    }
    for key, value in outcome.extras.items():
        summary[f"{outcome.run}.{key}"] = value
    return summary
