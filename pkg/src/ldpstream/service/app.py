"""HTTP front end for the aggregator.

Windows close on the wall clock when ``tick_seconds`` is set; otherwise a
caller drives time through ``POST /advance`` (used by tests and replays).
The optional raw ingestion socket shares the same aggregator.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query as Param
from fastapi.responses import StreamingResponse

from ..aggregator import Aggregator
from ..errors import LDPStreamError, QueryParseError, UnknownQueryError
from ..experiments import ExperimentSpec, run_experiment
from ..query import Query, now_ms, parse_query, validate_query
from ..wire import start_ingest_server
from .schemas import (
    BatchEstimateModel,
    ExperimentRequest,
    ExperimentResponse,
    ExperimentRowModel,
    QueryModel,
    RegisteredModel,
    SubmissionModel,
    ValidationModel,
    VerdictModel,
)

log = logging.getLogger(__name__)


@dataclass
class ServiceSettings:
    window_ms: int = 1000
    retention_epochs: int = 2
    publication_log: str | None = None
    registration_files: tuple[str, ...] = ()
    tick_seconds: float | None = 0.05
    ingest_host: str = "127.0.0.1"
    ingest_port: int | None = None


def load_registrations(path: str | Path) -> list[Query]:
    """A registration file holds one query document or a JSON array of them."""
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text)
    if isinstance(doc, list):
        return [parse_query(json.dumps(d)) for d in doc]
    return [parse_query(text)]


def _nan_to_none(x: float) -> float | None:
    return None if math.isnan(x) else x


def _report(query: Query) -> ValidationModel:
    report = validate_query(query)
    return ValidationModel(
        ok=report.ok,
        violations=[{"code": v.code, "message": v.message} for v in report.violations],
    )


def create_app(settings: ServiceSettings | None = None, aggregator: Aggregator | None = None) -> FastAPI:
    settings = settings or ServiceSettings()
    agg = aggregator or Aggregator(
        settings.window_ms, settings.retention_epochs, settings.publication_log
    )
    for path in settings.registration_files:
        for query in load_registrations(path):
            agg.register(query, start_ms=now_ms())

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        tasks = []
        server = None
        if settings.tick_seconds:
            async def ticker():
                while True:
                    await asyncio.sleep(settings.tick_seconds)
                    agg.advance()
            tasks.append(asyncio.create_task(ticker()))
        if settings.ingest_port is not None:
            server = await start_ingest_server(agg, settings.ingest_host, settings.ingest_port)
            app.state.ingest_address = server.sockets[0].getsockname()
        try:
            yield
        finally:
            for t in tasks:
                t.cancel()
            if server is not None:
                server.close()
                await server.wait_closed()

    app = FastAPI(title="ldpstream aggregator", lifespan=lifespan)
    app.state.aggregator = agg
    app.state.settings = settings

    def shard_or_404(query_id: str):
        try:
            return agg.query(query_id)
        except UnknownQueryError:
            raise HTTPException(404, f"unknown query {query_id!r}") from None

    @app.get("/health")
    def health():
        return {"status": "ok", "queries": len(agg.queries()), "window_ms": agg.window_ms}

    @app.post("/validate", response_model=ValidationModel)
    def validate(body: QueryModel):
        try:
            query = body.to_query()
        except QueryParseError as exc:
            raise HTTPException(422, str(exc)) from None
        return _report(query)

    @app.post("/queries", response_model=RegisteredModel, status_code=201)
    def register(body: QueryModel):
        try:
            query = body.to_query()
        except QueryParseError as exc:
            raise HTTPException(422, str(exc)) from None
        report = _report(query)
        if not report.ok:
            raise HTTPException(422, report.model_dump())
        try:
            batch = agg.register(query, start_ms=now_ms())
        except ValueError as exc:
            raise HTTPException(409, str(exc)) from None
        return RegisteredModel(query_id=query.query_id, window_start_ms=batch.window_start, window_ms=agg.window_ms)

    @app.get("/queries", response_model=list[str])
    def list_queries():
        return [q.query_id for q in agg.queries()]

    @app.get("/queries/{query_id}", response_model=QueryModel)
    def get_query(query_id: str):
        return QueryModel.from_query(shard_or_404(query_id))

    @app.delete("/queries/{query_id}", status_code=204)
    def delete_query(query_id: str):
        shard_or_404(query_id)
        agg.unregister(query_id)

    @app.post("/submissions", response_model=VerdictModel)
    def submit(body: SubmissionModel):
        try:
            decision = agg.accept_answer(body.to_submission())
        except UnknownQueryError:
            raise HTTPException(404, f"unknown query {body.query_id!r}") from None
        return VerdictModel(accepted=decision.accepted, reason=decision.reason)

    @app.post("/submissions/batch", response_model=list[VerdictModel])
    def submit_many(body: list[SubmissionModel]):
        out = []
        for item in body:
            try:
                d = agg.accept_answer(item.to_submission())
                out.append(VerdictModel(accepted=d.accepted, reason=d.reason))
            except UnknownQueryError:
                out.append(VerdictModel(accepted=False, reason="unknown_query"))
        return out

    @app.post("/advance", response_model=list[BatchEstimateModel])
    def advance(now: int | None = Param(default=None, alias="now_ms")):
        return [BatchEstimateModel.of(e) for e in agg.advance(now)]

    @app.post("/queries/{query_id}/close", response_model=BatchEstimateModel)
    def close_now(query_id: str):
        shard_or_404(query_id)
        return BatchEstimateModel.of(agg.close_current(query_id))

    @app.get("/queries/{query_id}/estimates", response_model=list[BatchEstimateModel])
    def estimates(query_id: str, since_ms: int | None = None):
        shard_or_404(query_id)
        return [BatchEstimateModel.of(e) for e in agg.published(query_id, since_ms)]

    @app.get("/queries/{query_id}/stream")
    async def stream(query_id: str, limit: int | None = None, timeout: float = 30.0):
        """Newline-delimited estimates from the currently open window on."""
        shard_or_404(query_id)
        sub = agg.publish_stream(query_id)

        async def lines():
            sent = 0
            try:
                while limit is None or sent < limit:
                    est = await asyncio.to_thread(sub.get, timeout)
                    if est is None:
                        break
                    yield est.to_json() + "\n"
                    sent += 1
            finally:
                agg.detach(sub)

        return StreamingResponse(lines(), media_type="application/x-ndjson")

    @app.post("/experiments", response_model=ExperimentResponse)
    def experiments(body: ExperimentRequest):
        overrides = {k: (int(v) if k == "n_devices" else v) for k, v in body.overrides.items()}
        spec = ExperimentSpec(body.name, overrides, body.repetitions, body.master_seed, body.p, body.q)
        problems = spec.violations()
        if problems:
            raise HTTPException(422, problems)
        try:
            result = run_experiment(spec)
        except (ValueError, LDPStreamError) as exc:
            raise HTTPException(422, str(exc)) from None
        rows = [
            ExperimentRowModel(
                n_devices=r.config.n_devices,
                fraction=r.config.sensitive_fraction,
                p=r.p,
                q=r.q,
                window_s=r.config.window_seconds,
                interval_s=r.config.answer_interval_seconds,
                median_eta=_nan_to_none(r.median_eta),
                mean_eta=_nan_to_none(r.mean_eta),
                std_eta=_nan_to_none(r.std_eta),
                n_windows=r.n_windows,
            )
            for r in result.rows
        ]
        return ExperimentResponse(summary=result.summary_line, rows=rows, csv=result.summary_csv)

    return app
