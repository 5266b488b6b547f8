import os
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from experiments.config import ExperimentConfig

load_dotenv()


class ConfigError(Exception):
    """Unreadable or invalid experiment configuration."""

    def __init__(self, message, details=None):
        self.message = message
        self.details = details
        super().__init__(message)


class RuntimeSettings(BaseModel):
    threads: int
    log_level: str
    version: str


def get_runtime_settings() -> RuntimeSettings:
    raw = os.getenv("CTRL_ITER_THREADS", "")
    if raw:
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"CTRL_ITER_THREADS must be a positive integer, got '{raw}'") from None
        if threads < 1:
            raise ConfigError(f"CTRL_ITER_THREADS must be a positive integer, got '{raw}'")
    else:
        threads = os.cpu_count() or 1
    return RuntimeSettings(
        threads=threads,
        log_level=os.getenv("CTRL_ITER_LOG_LEVEL", "WARNING").upper(),
        version=os.getenv("VERSION", ""),
    )


def parse_key_values(text: str, source: str = "<config>") -> tuple[dict[str, str], dict[str, int]]:
    """
    Read `key = value` lines. '#' starts a comment; blank lines are skipped.
    Returns the values and the line each key was set on.
    """
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: missing key before '='")
        if key in values:
            raise ConfigError(
                f"{source}:{number}: key '{key}': already set on line {lines[key]}"
            )
        values[key] = value
        lines[key] = number
    return values, lines


def parse_experiment_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values, lines = parse_key_values(text, source)
    if "kind" not in values:
        raise ConfigError(f"{source}: key 'kind': missing")
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as ex:
        messages = []
        for error in ex.errors():
            key = str(error["loc"][0]) if error["loc"] else "kind"
            line = lines.get(key, lines["kind"])
            reason = "unknown key" if error["type"] == "extra_forbidden" else error["msg"]
            messages.append(f"{source}:{line}: key '{key}': {reason}")
        raise ConfigError("\n".join(messages), details=ex.errors()) from None


def load_experiment_config(
    path: str | Path, seed: int | None = None, output: str | None = None
) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as ex:
        raise ConfigError(f"{path}: cannot read config ({ex.strerror})") from None
    config = parse_experiment_config(text, str(path))
    # Relative data paths are resolved against the config file.
    for key in ("mdp_file", "training_file"):
        value = getattr(config, key)
        if value and not Path(value).is_absolute():
            config = config.model_copy(update={key: str(path.parent / value)})
    return config.with_overrides(seed=seed, output=output)
