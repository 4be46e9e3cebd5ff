"""FastAPI application wrapping the pipeline commands.

One POST endpoint per pipeline step under /v1; the CLI is a thin client of
this app (in-process by default, over HTTP with --server).  Failures map to
two kinds: "validation" (bad paths, malformed configs or artifacts; HTTP
422) and "numerical" (training divergence; HTTP 500), which the CLI turns
into exit codes 1 and 2.
"""

from __future__ import annotations

import functools

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..training import TrainingDiverged
from .schemas import (CommandResponse, ErrorResponse, EvaluateRequest,
                      ExtractMeshRequest, GradcheckRequest, HealthResponse,
                      RelightRequest, RenderRequest, SynthRequest,
                      TrainStage1Request, TrainStage2Request)

_VALIDATION_ERRORS = (ValueError, KeyError, FileNotFoundError,
                      NotADirectoryError, IsADirectoryError, OSError)


def _error(status: int, kind: str, message: str) -> JSONResponse:
    body = ErrorResponse(kind=kind, error=message)
    return JSONResponse(status_code=status, content=body.model_dump())


def _command(name: str):
    """Run one pipeline step and wrap the outcome in the response envelope."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(req):
            try:
                result = fn(req)
            except TrainingDiverged as e:
                return _error(500, "numerical", str(e))
            except _VALIDATION_ERRORS as e:
                return _error(422, "validation", f"{type(e).__name__}: {e}")
            return CommandResponse(command=name, result=result)

        return wrapper

    return deco


def create_app() -> FastAPI:
    app = FastAPI(title="surfelight", version=__version__)

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/v1/synth", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse}})
    @_command("synth")
    def synth(req: SynthRequest):
        return pipeline.run_synth(req.config, req.out_dir)

    @app.post("/v1/train-stage1", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse},
                         500: {"model": ErrorResponse}})
    @_command("train-stage1")
    def train_stage1(req: TrainStage1Request):
        return pipeline.run_train_stage1(req.dataset_dir, req.config,
                                         req.out_dir)

    @app.post("/v1/extract-mesh", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse}})
    @_command("extract-mesh")
    def extract_mesh(req: ExtractMeshRequest):
        return pipeline.run_extract_mesh(req.checkpoint_dir, req.dataset_dir,
                                         req.config, req.out_dir)

    @app.post("/v1/train-stage2", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse},
                         500: {"model": ErrorResponse}})
    @_command("train-stage2")
    def train_stage2(req: TrainStage2Request):
        return pipeline.run_train_stage2(req.dataset_dir, req.stage1_dir,
                                         req.mesh_path, req.config,
                                         req.out_dir)

    @app.post("/v1/render", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse}})
    @_command("render")
    def render(req: RenderRequest):
        return pipeline.run_render(req.checkpoint_dir, req.dataset_dir,
                                   req.config, req.out_dir,
                                   mesh_path=req.mesh_path)

    @app.post("/v1/relight", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse}})
    @_command("relight")
    def relight(req: RelightRequest):
        return pipeline.run_relight(req.checkpoint_dir, req.dataset_dir,
                                    req.config, req.out_dir,
                                    mesh_path=req.mesh_path)

    @app.post("/v1/evaluate", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse}})
    @_command("evaluate")
    def evaluate(req: EvaluateRequest):
        return pipeline.run_evaluate(req.pred, req.ref, req.out_path,
                                     kind=req.kind, mask_root=req.mask_root,
                                     mask=req.mask, config=req.config)

    @app.post("/v1/gradcheck", response_model=CommandResponse,
              responses={422: {"model": ErrorResponse}})
    @_command("gradcheck")
    def gradcheck(req: GradcheckRequest):
        return pipeline.run_gradcheck(req.config, req.out_dir)

    return app
