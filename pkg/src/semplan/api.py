"""HTTP API over the service layer.

Every operation is ``POST /<operation>`` with its request document as the
JSON body. Failures return status 400 (bad request), 404 (missing file) or
500 with an ``{"error": {"type", "message"}}`` body.
"""

import typing

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import __version__
from . import service
from .schemas import ErrorResponse

app = FastAPI(title="semplan", version=__version__)


def _status(exc: Exception) -> int:
    if isinstance(exc, FileNotFoundError):
        return 404
    if isinstance(exc, (ValueError, KeyError)):
        return 400
    return 500


@app.exception_handler(RequestValidationError)
async def _validation(_: Request, exc: RequestValidationError):
    errors = [{"loc": list(e.get("loc", ())), "msg": e.get("msg", "")} for e in exc.errors()]
    return JSONResponse(status_code=400, content={
        "error": {"type": "ValidationError", "message": "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}"
                                                               for e in errors)}})


@app.exception_handler(Exception)
async def _failure(_: Request, exc: Exception):
    return JSONResponse(status_code=_status(exc), content=service.error_body(exc))


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


def _register(name, request_model, fn):
    response_model = typing.get_type_hints(fn)["return"]

    def endpoint(req):
        try:
            return fn(req)
        except Exception as exc:  # mapped to a JSON error with a fitting status
            return JSONResponse(status_code=_status(exc), content=service.error_body(exc))

    endpoint.__name__ = name.replace("-", "_")
    endpoint.__annotations__ = {"req": request_model}
    app.post(f"/{name}", response_model=response_model,
             responses={400: {"model": ErrorResponse}, 404: {"model": ErrorResponse}})(endpoint)


for _name, (_req, _fn) in service.OPERATIONS.items():
    _register(_name, _req, _fn)
