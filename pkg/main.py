import logging
import math
import os
from typing import Any, Dict

from fastapi import FastAPI
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from config import ConfigError, parse_experiment_config
from experiments.base_experiment import ExperimentError
from experiments.runner import EXPERIMENTS, certify, run_experiment
from utils import error_message, format_float

logger = logging.getLogger(__name__)

app = FastAPI()


class ConfigRequest(BaseModel):
    config: str
    seed: int | None = None


def _json_safe(value: Any) -> Any:
    """Non-finite floats become strings; JSON has no inf or nan."""
    if isinstance(value, float) and not math.isfinite(value):
        return format_float(value)
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def _parse(request: ConfigRequest):
    config = parse_experiment_config(request.config, source="<request>")
    return config.with_overrides(seed=request.seed)


@app.get("/ctrl-iter/api/experiment-kinds", response_model=Dict[str, Any])
async def get_experiment_kinds():
    kinds: Dict[str, Any] = {}
    for name, experiment_class in EXPERIMENTS.items():
        kinds[name] = experiment_class.describe()
    return kinds


@app.post("/ctrl-iter/api/certify")
async def post_certify(request: ConfigRequest):
    try:
        reports = certify(_parse(request))
    except ConfigError as ex:
        return JSONResponse(status_code=400, content=error_message(source="config", message=ex.message))
    except ExperimentError as ex:
        return JSONResponse(status_code=422, content=error_message(source="certificate", message=ex.message))
    return _json_safe(
        {
            "passed": all(r.passed for r in reports),
            "certificates": [dict(r.model_dump(), passed=r.passed) for r in reports],
        }
    )


@app.post("/ctrl-iter/api/experiments")
async def post_experiment(request: ConfigRequest):
    try:
        config = _parse(request)
        result = await run_experiment(config)
    except ConfigError as ex:
        return JSONResponse(status_code=400, content=error_message(source="config", message=ex.message))
    except ExperimentError as ex:
        logger.warning("experiment failed: %s", ex.message)
        return JSONResponse(status_code=500, content=error_message(source="experiment", message=ex.message))
    return _json_safe(result.model_dump(mode="json"))


@app.get("/.well-known/health/ctrl-iter", response_class=PlainTextResponse)
def health() -> str:
    return "ok"


@app.get("/.well-known/version/ctrl-iter", response_class=PlainTextResponse)
def version() -> str:
    return os.getenv("VERSION", "")
