"""HTTP front end: ``POST /recommend`` and ``GET /healthz``.

One process serves one bundle. Requests run in the worker thread pool
against the shared read-only bundle. At most ``max_inflight`` requests are
processed at once; further requests are shed immediately with 503, and a
request still unfinished after ``deadline_ms`` also gets 503.
"""

from __future__ import annotations

import asyncio

from fastapi import FastAPI
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, PlainTextResponse

from ..errors import RequestError
from .bundle import ServingBundle, recommend
from .schemas import RecommendRequest, RecommendResponse


def _error(status: int, error: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": error, "detail": detail})


def create_app(bundle: ServingBundle, deadline_ms: float = 1000.0, max_inflight: int = 8) -> FastAPI:
    app = FastAPI(title="seqkd recommender", version="0.1.0")
    app.state.bundle = bundle
    inflight = 0  # only touched from the event loop thread
    timeout = deadline_ms / 1000.0

    @app.get("/healthz", response_class=PlainTextResponse)
    async def healthz():
        return "ok"

    @app.post("/recommend", response_model=RecommendResponse)
    async def recommend_endpoint(req: RecommendRequest):
        nonlocal inflight
        if inflight >= max_inflight:
            return _error(503, "overloaded", f"{max_inflight} requests already in flight")
        inflight += 1
        try:
            rec = await asyncio.wait_for(
                run_in_threadpool(recommend, bundle, req.items, req.k), timeout
            )
        except asyncio.TimeoutError:
            return _error(503, "deadline_exceeded", f"no result within {deadline_ms:g} ms")
        except RequestError as exc:
            return _error(422, "request", str(exc))
        finally:
            inflight -= 1
        return RecommendResponse(
            items=rec.items, scores=rec.scores, dropped_unknown=rec.dropped_unknown,
            clamped=rec.clamped,
        )

    return app
