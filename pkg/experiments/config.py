from typing import Any, Callable, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from solvers.trace import IterationTrace

ExperimentKind = Literal["riccati", "lambda", "transport", "mdp", "pmp", "sgd"]

PROBLEMS: dict[str, tuple[str, ...]] = {
    "riccati": ("random", "scalar"),
    "lambda": ("tanh", "lq"),
    "transport": ("manufactured",),
    "mdp": ("file",),
    "pmp": ("toy", "realizable", "file"),
    "sgd": ("quadratic",),
}

LIST_KEYS = ("alpha", "drift", "controls", "theta_star")


class ExperimentConfig(BaseModel):
    # Not all keys are used by all kinds; each kind checks the ones it needs.
    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind
    problem: str = ""
    name: str = ""
    seed: int = Field(default=0, ge=0)
    output: str = "out"
    tolerance: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=100, ge=1)
    timing: bool = False
    trace_every: int = Field(default=1, ge=1)

    # riccati
    state_dim: int = Field(default=10, ge=1)
    control_dim: int = Field(default=30, ge=1)
    alpha: list[float] = []
    alpha_scale: float | None = Field(default=None, gt=0)
    samples: int = Field(default=4, ge=1)
    p0_radius: float | None = Field(default=None, ge=0)
    p0_fraction: float = Field(default=0.9, ge=0)
    scalar_a: float = 0.0
    scalar_b: float = 1.0
    scalar_n: float = 1.0
    scalar_m: float = 1.0

    # lambda
    drift_scale: float = Field(default=0.2, ge=0)
    lower: float | None = None
    box: float = Field(default=1.0, gt=0)
    points: int = Field(default=21, ge=3)
    interpolator: Literal["kernel", "polynomial"] = "polynomial"
    degree: int = Field(default=9, ge=1)
    regularization: float = Field(default=1e-10, ge=0)
    backend: Literal["gamma", "transport"] = "gamma"

    # transport
    dim: int = Field(default=2, ge=1, le=3)
    nodes: int = Field(default=21, ge=3)
    drift: list[float] = []
    inflow: bool = True

    # mdp
    mdp_file: str = ""
    method: Literal["value", "policy", "q", "all"] = "all"

    # pmp
    steps: int = Field(default=10, ge=1)
    horizon: float = Field(default=1.0, gt=0)
    lr: float = Field(default=0.1, gt=0)
    inner_steps: int = Field(default=1, ge=1)
    penalty: float = Field(default=0.0, ge=0)
    integrator: Literal["rk4", "euler"] = "rk4"
    activation: Literal["relu", "tanh", "sigmoid"] = "tanh"
    weighting: Literal["sum", "mean"] = "sum"
    exact_argmin: bool = False
    theta_star: list[float] = []
    training_file: str = ""

    # sgd
    eta: float = Field(default=1.0, ge=0)
    replicas: int = Field(default=10000, ge=2)
    step: float | None = Field(default=None, gt=0)
    noise_scale: float | None = Field(default=None, ge=0)
    controls: list[float] = []
    floor: float = Field(default=0.1, gt=0, le=1)
    x0: float = 1.0
    noise_samples: int = Field(default=1000, ge=2)

    @field_validator(*LIST_KEYS, mode="before")
    @classmethod
    def _split(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @model_validator(mode="after")
    def _check_kind(self):
        allowed = PROBLEMS[self.kind]
        if not self.problem:
            self.problem = allowed[0]
        if self.problem not in allowed:
            raise ValueError(f"problem '{self.problem}' is not one of {', '.join(allowed)} for kind {self.kind}")
        if any(not a > 0 for a in self.alpha):
            raise ValueError("alpha values must be positive")

        if self.kind == "riccati" and self.problem == "random" and not self.alpha and self.alpha_scale is None:
            raise ValueError("riccati needs 'alpha' or 'alpha_scale'")
        if self.kind == "lambda" and not self.alpha:
            raise ValueError("lambda needs 'alpha'")
        if self.kind == "transport":
            if len(self.alpha) != 1:
                raise ValueError("transport needs exactly one 'alpha'")
            if len(self.drift) != self.dim:
                raise ValueError(f"'drift' needs {self.dim} components")
        if self.kind == "mdp" and not self.mdp_file:
            raise ValueError("mdp needs 'mdp_file'")
        if self.kind == "pmp":
            if self.problem == "realizable" and len(self.theta_star) != 2:
                raise ValueError("'theta_star' needs two values (W, b)")
            if self.problem == "file" and not self.training_file:
                raise ValueError("pmp problem 'file' needs 'training_file'")
        if self.kind == "sgd":
            if not self.controls:
                raise ValueError("sgd needs 'controls'")
            if any(u < self.floor or u > 1 for u in self.controls):
                raise ValueError(f"controls must lie in [floor, 1] = [{self.floor}, 1]")
        return self

    def with_overrides(self, seed: int | None = None, output: str | None = None) -> "ExperimentConfig":
        update: dict[str, Any] = {}
        if seed is not None:
            update["seed"] = seed
        if output is not None:
            update["output"] = output
        return self.model_copy(update=update)


class TraceRow(BaseModel):
    run: str
    iteration: int
    distance: float
    ms: float | None = None


class RunOutcome(BaseModel):
    run: str
    # Runs sharing a group go to the same per-group trace file.
    group: str = ""
    trace: IterationTrace
    extras: dict[str, float | int | bool | str] = {}


class RunJob(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    run: str
    task: Callable[[], RunOutcome]


class CertificateReport(BaseModel):
    label: str
    gamma: float
    bnb_norm: float
    m_bound: float
    threshold: float
    alpha: float
    beta: float
    varpi: float
    nu: float
    alpha_ok: bool
    b_ok: bool

    @property
    def passed(self) -> bool:
        return self.alpha_ok and self.b_ok


class ExperimentResult(BaseModel):
    kind: ExperimentKind
    summary: dict[str, float | int | bool | str]
    rows: list[TraceRow]
    groups: dict[str, list[TraceRow]] = {}
    aborted: bool = False


class ExperimentInfo(BaseModel):
    kind: ExperimentKind
    description: str
    problems: list[str]
    keys: list[str]
    metric: str
