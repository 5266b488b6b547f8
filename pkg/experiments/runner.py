import asyncio
import logging

from config import get_runtime_settings
from experiments.base_experiment import BaseExperiment, ExperimentError
from experiments.config import (
    CertificateReport,
    ExperimentConfig,
    ExperimentResult,
    RunJob,
    RunOutcome,
    TraceRow,
)
from experiments.lambda_field.experiment import LambdaExperiment
from experiments.mdp.experiment import MdpExperiment
from experiments.pmp.experiment import PmpExperiment
from experiments.riccati.experiment import RiccatiExperiment
from experiments.sgd.experiment import SgdExperiment
from experiments.transport.experiment import TransportExperiment
from solvers.errors import SolverError
from solvers.trace import TraceStatus

logger = logging.getLogger(__name__)

EXPERIMENTS: dict[str, type[BaseExperiment]] = {
    "riccati": RiccatiExperiment,
    "lambda": LambdaExperiment,
    "transport": TransportExperiment,
    "mdp": MdpExperiment,
    "pmp": PmpExperiment,
    "sgd": SgdExperiment,
}


def get_experiment(config: ExperimentConfig) -> BaseExperiment:
    return EXPERIMENTS[config.kind](config)


def trace_rows(outcome: RunOutcome, every: int, timing: bool) -> list[TraceRow]:
    """Rows for every `every`-th iteration, always keeping the last one."""
    trace = outcome.trace
    rows = []
    for k, distance in enumerate(trace.distances, start=1):
        if k % every and k != trace.iterations:
            continue
        ms = trace.elapsed_ms[k - 1] if timing and k <= len(trace.elapsed_ms) else None
        rows.append(TraceRow(run=outcome.run, iteration=k, distance=distance, ms=ms))
    return rows


async def _run_jobs(jobs: list[RunJob], limit: int) -> list[RunOutcome]:
    semaphore = asyncio.Semaphore(max(1, limit))

    async def run_job(job: RunJob) -> RunOutcome:
        async with semaphore:
            logger.debug("run %s started", job.run)
            try:
                return await asyncio.to_thread(job.task)
            except (SolverError, ValueError) as ex:
                raise ExperimentError(f"run {job.run}: {ex}") from ex

    return list(await asyncio.gather(*(run_job(job) for job in jobs)))


async def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """
    Execute every run of the experiment concurrently and collect the summary
    and trace rows. Rows keep the planned run order.
    """
    experiment = get_experiment(config)
    experiment.log_started()
    try:
        jobs = experiment.plan()
    except (SolverError, ValueError) as ex:
        raise ExperimentError(str(ex)) from ex
    outcomes = await _run_jobs(jobs, get_runtime_settings().threads)
    try:
        summary = experiment.summarize(outcomes)
    except (SolverError, ValueError) as ex:
        raise ExperimentError(str(ex)) from ex

    rows: list[TraceRow] = []
    groups: dict[str, list[TraceRow]] = {}
    for outcome in outcomes:
        run_rows = trace_rows(outcome, config.trace_every, config.timing)
        rows.extend(run_rows)
        if outcome.group:
            groups.setdefault(outcome.group, []).extend(run_rows)
    aborted = any(o.trace.status == TraceStatus.ABORTED for o in outcomes)
    logger.info("%s finished: %d runs, aborted=%s", config.kind, len(outcomes), aborted)
    return ExperimentResult(kind=config.kind, summary=summary, rows=rows, groups=groups, aborted=aborted)


def certify(config: ExperimentConfig) -> list[CertificateReport]:
    try:
        return get_experiment(config).certify()
    except (SolverError, ValueError) as ex:
        raise ExperimentError(str(ex)) from ex
