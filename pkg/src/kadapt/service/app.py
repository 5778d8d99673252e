"""FastAPI application. Endpoints are synchronous and run in the worker pool."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..analysis import DivisibilityError
from ..harness.bench import DEFAULT_STRATEGIES
from ..harness.data import IDXFormatError
from ..harness.train import GridFailedError
from ..peft import KINDS, NotMergeableError, StrategyError
from ..tensor import ShapeError
from . import runtime
from . import schemas as S

app = FastAPI(title="kadapt", version=__version__)

_CLIENT_ERRORS = (StrategyError, NotMergeableError, DivisibilityError, IDXFormatError, ShapeError, ValueError, FileNotFoundError)


def _run(fn, req):
    try:
        return fn(req)
    except GridFailedError as exc:
        raise HTTPException(status_code=422, detail=f"all grid cells failed: {exc}") from exc
    except _CLIENT_ERRORS as exc:
        raise HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}") from exc


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/strategies")
def strategies() -> dict:
    return {"kinds": list(KINDS), "bench_defaults": list(DEFAULT_STRATEGIES)}


@app.post("/train", response_model=S.TrainResponse)
def train(req: S.TrainRequest) -> S.TrainResponse:
    return _run(runtime.run_train, req)


@app.post("/bench", response_model=S.BenchResponse)
def bench(req: S.BenchRequest) -> S.BenchResponse:
    return _run(runtime.run_bench, req)


@app.post("/measure-id", response_model=S.MeasureIDResponse)
def measure_id(req: S.MeasureIDRequest) -> S.MeasureIDResponse:
    return _run(runtime.run_measure_id, req)


@app.post("/count", response_model=S.CountResponse)
def count(req: S.CountRequest) -> S.CountResponse:
    return _run(runtime.run_count, req)


@app.post("/merge", response_model=S.MergeResponse)
def merge(req: S.MergeRequest) -> S.MergeResponse:
    return _run(runtime.run_merge, req)
