"""Per-site function service hosting the Gaussian convolution endpoint.

The service performs no authentication; it is meant to sit behind the site
gatekeeper.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, Field
from pydantic import ValidationError as PydanticValidationError
from starlette.concurrency import run_in_threadpool

from . import fits
from .datasets import IvoId, ParseError, parse_ivoid
from .gaussconv import SIGMA_MAX, SIGMA_MESSAGE, SIGMA_MIN, GaussConvParams, gaussconv
from .sitecaps import FunctionDescriptor, ParameterSpec

FUNCTION_NAME = "gaussconv"
FUNCTION_VERSION = "1.0.0"
INTERNAL_PATH = "/gaussconv_fitsimg/"
DEFAULT_ABS_PATH = "/data"
FITS_MEDIA_TYPE = "image/fits"

_UUID_NAMESPACE = uuid.UUID("6f1c9a52-5d1e-4b0e-9a51-2f3c7c1d0a11")


def function_uuid(name: str, version: str) -> str:
    """Stable uuid for a function build, identical at every site that deploys it."""
    return str(uuid.uuid5(_UUID_NAMESPACE, f"{name}/{version}"))


def gaussconv_descriptor(storage_id: str = "") -> FunctionDescriptor:
    return FunctionDescriptor(
        uuid=function_uuid(FUNCTION_NAME, FUNCTION_VERSION),
        name=FUNCTION_NAME,
        version=FUNCTION_VERSION,
        route="/gaussconv",
        internal_path=INTERNAL_PATH,
        parameters=(ParameterSpec("sigma", "double", SIGMA_MIN, SIGMA_MAX, 1.0),),
        storage_id=storage_id,
    )


def gaussconv_gpu_descriptor(storage_id: str = "") -> FunctionDescriptor:
    # registered for discovery only; there is no GPU runtime
    return FunctionDescriptor(
        uuid=function_uuid("gaussconv-gpu", FUNCTION_VERSION),
        name="gaussconv-gpu",
        version=FUNCTION_VERSION,
        route="/gaussconv-gpu",
        internal_path=INTERNAL_PATH,
        parameters=(ParameterSpec("sigma", "double", SIGMA_MIN, SIGMA_MAX, 1.0),),
        hardware_tags=("gpu",),
        storage_id=storage_id,
    )


class PathTraversalRejected(ValueError):
    pass


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RuntimeConfig:
    abs_path: Path
    listen_port: int = 8000
    site_id: str = "local"

    def __post_init__(self):
        object.__setattr__(self, "abs_path", Path(self.abs_path))

    @classmethod
    def from_env(cls, abs_path=None, listen_port: int = 8000, site_id: str = "local") -> RuntimeConfig:
        return cls(Path(abs_path or os.getenv("ABS_PATH", DEFAULT_ABS_PATH)), listen_port, site_id)

    def check(self):
        if not self.abs_path.is_dir() or not os.access(self.abs_path, os.R_OK):
            raise FileNotFoundError(f"storage mount {self.abs_path} is not a readable directory")


def resolve_local_path(config: RuntimeConfig, ivoid: IvoId) -> Path:
    root = config.abs_path.resolve()
    path = (root / ivoid.storage_path).resolve()
    if not path.is_relative_to(root):
        raise PathTraversalRejected(f"{ivoid.storage_path!r} escapes the storage mount")
    if not path.is_file():
        raise DatasetNotFound(f"{ivoid.storage_path} not found at this site")
    return path


class GaussConvRequest(BaseModel):
    """Request model for Gaussian convolution parameters."""

    ivo: str = Field(..., strict=True)
    sigma: float = Field(..., strict=True, ge=SIGMA_MIN, le=SIGMA_MAX, description=SIGMA_MESSAGE)


_RANGE_ERRORS = {"greater_than_equal", "less_than_equal", "finite_number"}


def _error(status: int, code: str, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error_code": code, "message": message, **extra}, status_code=status)


def _convolve_file(path: Path, params: GaussConvParams) -> fits.FitsImage:
    return gaussconv(fits.read_fits(path.read_bytes()), params)


class Meter:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.bytes_served = 0

    def add(self, requests=0, nbytes=0):
        with self._lock:
            self.requests += requests
            self.bytes_served += nbytes


def create_app(config: RuntimeConfig) -> FastAPI:
    app = FastAPI(title="FITS Image Convolution Service")
    meter = Meter()
    app.state.meter = meter

    @app.post(INTERNAL_PATH, summary="Generate Gaussian convolution of a FITS image")
    async def gaussconvolution_fitsimage(request: Request):
        meter.add(requests=1)
        raw = await request.body()
        try:
            doc = json.loads(raw)
        except ValueError as exc:
            return _error(400, "malformed_body", f"body is not JSON: {exc}")
        if not isinstance(doc, dict):
            return _error(400, "malformed_body", "body must be a JSON object")
        try:
            req = GaussConvRequest.model_validate(doc)
        except PydanticValidationError as exc:
            errors = exc.errors()
            if all(e["loc"] == ("sigma",) and e["type"] in _RANGE_ERRORS for e in errors):
                return _error(422, "sigma_out_of_range", SIGMA_MESSAGE, field="sigma")
            fields = ", ".join(".".join(map(str, e["loc"])) for e in errors)
            return _error(400, "malformed_body", f"missing or invalid fields: {fields}")
        try:
            params = GaussConvParams(parse_ivoid(req.ivo), req.sigma)
            path = resolve_local_path(config, params.ivo)
        except ParseError as exc:
            return _error(400, "invalid_ivoid", str(exc))
        except PathTraversalRejected as exc:
            return _error(400, "path_traversal_rejected", str(exc))
        except DatasetNotFound as exc:
            return _error(404, "dataset_not_found", str(exc))

        try:
            result = await run_in_threadpool(_convolve_file, path, params)
        except fits.FormatError as exc:
            return _error(500, "invalid_fits", f"{type(exc).__name__}: {exc}")

        def body():
            for chunk in fits.iter_fits(result):
                meter.add(nbytes=len(chunk))
                yield chunk

        return StreamingResponse(body(), media_type=FITS_MEDIA_TYPE)

    @app.get("/health")
    def health():
        return {"status": "ok", "site_id": config.site_id, "function": FUNCTION_NAME, "version": FUNCTION_VERSION}

    @app.get("/metrics")
    def metrics():
        return {"requests": meter.requests, "bytes_served": meter.bytes_served}

    return app
