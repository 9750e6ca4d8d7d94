"""HTTP job service.

Images, banks and edit jobs are content-addressed resources: uploading the
same image, inverting the same inputs, or submitting the same (bank, spec,
config) triple always lands on the same id, so repeated requests are free.
Job progress streams as server-sent events replayed from the persisted event
log, which also makes streams resumable after a restart.
"""

from __future__ import annotations

import time
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse

from ..config import make_backend
from ..errors import ContractError
from ..imaging import image_from_bytes
from ..inversion import invert, read_manifest, save_bank
from ..tasks import SpecValidationError, from_payload
from . import models
from .jobs import JobRunner
from .store import Storage, TERMINAL_PHASES, canonical_json, content_id

API_VERSION = 1


def _error_response(status: int, errors: list[dict]) -> JSONResponse:
    return JSONResponse(status_code=status, content={"v": API_VERSION, "errors": errors})


def create_app(settings: dict) -> FastAPI:
    storage = Storage(settings["storage_dir"])
    backend = make_backend(settings["backend_profile"])
    runner = JobRunner(storage, backend, settings.get("workers", 1))

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        runner.start()
        yield
        runner.stop()

    app = FastAPI(title="dragedit", lifespan=lifespan)
    app.state.storage = storage
    app.state.backend = backend
    app.state.runner = runner

    @app.exception_handler(RequestValidationError)
    async def _on_validation_error(_req: Request, exc: RequestValidationError):
        errors = [
            {"field": ".".join(str(p) for p in e["loc"] if p != "body"), "message": e["msg"]}
            for e in exc.errors()
        ]
        return _error_response(422, errors)

    @app.exception_handler(SpecValidationError)
    async def _on_spec_error(_req: Request, exc: SpecValidationError):
        return _error_response(422, exc.errors)

    @app.exception_handler(ContractError)
    async def _on_contract_error(_req: Request, exc: ContractError):
        return _error_response(422, [{"field": "", "message": str(exc)}])

    # -- images -------------------------------------------------------------

    @app.post("/images", response_model=models.ImageResponse)
    async def post_image(request: Request):
        raw = await request.body()
        if not raw:
            return _error_response(422, [{"field": "body", "message": "empty image body"}])
        image = image_from_bytes(raw)  # raises ContractError on garbage
        image_id = storage.put_image(raw)
        return models.ImageResponse(
            image_id=image_id, size=(image.shape[1], image.shape[2])
        )

    @app.get("/images/{image_id}")
    def get_image(image_id: str):
        path = storage.image_path(image_id)
        if not path.exists():
            return _error_response(404, [{"field": "image_id", "message": "unknown image"}])
        return Response(content=path.read_bytes(), media_type="image/png")

    # -- banks --------------------------------------------------------------

    @app.post("/banks", response_model=models.BankResponse)
    def post_bank(body: models.BankRequest):
        for field_name, image_id in (
            ("image_id", body.image_id),
            ("ref_image_id", body.ref_image_id),
        ):
            if image_id is not None and not storage.has_image(image_id):
                return _error_response(
                    404, [{"field": field_name, "message": f"unknown image {image_id}"}]
                )
        bank_id = content_id(
            "bank",
            body.image_id,
            body.ref_image_id or "",
            str(body.steps),
            backend.profile.content_hash(),
            body.prompt or "",
        )
        if storage.has_bank(bank_id):
            manifest = read_manifest(storage.bank_dir(bank_id))
            return models.BankResponse(
                bank_id=bank_id,
                preparing_seconds=manifest.get("preparing_seconds", 0.0),
                has_reference=manifest["has_reference"],
                reused=True,
            )
        z0 = backend.encode(image_from_bytes(storage.image_path(body.image_id).read_bytes()))
        z0_ref = None
        if body.ref_image_id:
            z0_ref = backend.encode(
                image_from_bytes(storage.image_path(body.ref_image_id).read_bytes())
            )
        cond = backend.condition(body.prompt)
        started = time.perf_counter()
        bank = invert(backend, z0, z0_ref, body.steps, cond)
        preparing = time.perf_counter() - started
        save_bank(
            bank,
            storage.bank_dir(bank_id),
            extras={
                "prompt": body.prompt,
                "preparing_seconds": preparing,
                "image_id": body.image_id,
                "ref_image_id": body.ref_image_id,
            },
        )
        return models.BankResponse(
            bank_id=bank_id,
            preparing_seconds=preparing,
            has_reference=bank.has_reference,
            reused=False,
        )

    # -- edits ----------------------------------------------------------------

    @app.post("/edits", response_model=models.EditResponse)
    def post_edit(body: models.EditRequest):
        if not storage.has_bank(body.bank_id):
            return _error_response(
                404, [{"field": "bank_id", "message": f"unknown bank {body.bank_id}"}]
            )
        from_payload(body.spec)  # 422 with field diagnostics on bad specs
        job_id = content_id(
            "edit", body.bank_id, canonical_json(body.spec), canonical_json(body.config)
        )
        if storage.has_job(job_id):
            return models.EditResponse(
                job_id=job_id, status_url=f"/edits/{job_id}", reused=True
            )
        storage.new_job(job_id, body.bank_id, body.spec, body.config)
        storage.append_event(job_id, {"event": "phase", "phase": "queued"})
        runner.submit(job_id)
        return models.EditResponse(job_id=job_id, status_url=f"/edits/{job_id}", reused=False)

    def _job_or_404(job_id: str):
        if not storage.has_job(job_id):
            return None
        return storage.load_job(job_id)

    def _status(record: dict) -> models.JobStatus:
        job_id = record["job_id"]
        artifacts = record["artifacts"]
        return models.JobStatus(
            job_id=job_id,
            phase=record["phase"],
            spec_kind=record["spec"].get("kind"),
            cancel_requested=record["cancel_requested"],
            error=record["error"],
            timings=models.JobTimings(**record["timings"]),
            artifacts=models.JobArtifacts(
                result_url=f"/edits/{job_id}/result" if artifacts["result"] else None,
                preview_urls=[
                    f"/edits/{job_id}/previews/{i}"
                    for i in range(len(artifacts["previews"]))
                ],
                step_log_url=f"/edits/{job_id}/log" if artifacts["step_log"] else None,
            ),
        )

    @app.get("/edits/{job_id}", response_model=models.JobStatus)
    def get_edit(job_id: str):
        record = _job_or_404(job_id)
        if record is None:
            return _error_response(404, [{"field": "job_id", "message": "unknown job"}])
        return _status(record)

    @app.get("/edits/{job_id}/result")
    def get_result(job_id: str):
        record = _job_or_404(job_id)
        if record is None:
            return _error_response(404, [{"field": "job_id", "message": "unknown job"}])
        if record["phase"] != "done" or not record["artifacts"]["result"]:
            return _error_response(
                404, [{"field": "phase", "message": f"job is {record['phase']}, not done"}]
            )
        path = storage.job_dir(job_id) / record["artifacts"]["result"]
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/edits/{job_id}/previews/{index}")
    def get_preview(job_id: str, index: int):
        record = _job_or_404(job_id)
        if record is None:
            return _error_response(404, [{"field": "job_id", "message": "unknown job"}])
        previews = record["artifacts"]["previews"]
        if not 0 <= index < len(previews):
            return _error_response(404, [{"field": "index", "message": "no such preview"}])
        path = storage.job_dir(job_id) / previews[index]
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/edits/{job_id}/log")
    def get_step_log(job_id: str):
        record = _job_or_404(job_id)
        if record is None or not record["artifacts"]["step_log"]:
            return _error_response(404, [{"field": "job_id", "message": "no step log"}])
        path = storage.job_dir(job_id) / record["artifacts"]["step_log"]
        return Response(content=path.read_bytes(), media_type="application/jsonl")

    @app.post("/edits/{job_id}/cancel", response_model=models.CancelResponse)
    def post_cancel(job_id: str):
        record = _job_or_404(job_id)
        if record is None:
            return _error_response(404, [{"field": "job_id", "message": "unknown job"}])
        if record["phase"] in TERMINAL_PHASES:
            return _error_response(
                409,
                [{"field": "phase", "message": f"job already {record['phase']}"}],
            )
        record = storage.update_job(job_id, cancel_requested=True)
        return models.CancelResponse(
            job_id=job_id, phase=record["phase"], cancel_requested=True
        )

    @app.get("/edits/{job_id}/events")
    def get_events(job_id: str):
        if not storage.has_job(job_id):
            return _error_response(404, [{"field": "job_id", "message": "unknown job"}])

        def stream():
            sent = 0
            while True:
                events = storage.read_events(job_id, start=sent)
                for event in events:
                    sent += 1
                    yield f"event: {event['event']}\ndata: {canonical_json(event)}\n\n"
                    if event["event"] == "end":
                        return
                if not events:
                    record = storage.load_job(job_id)
                    if record["phase"] in TERMINAL_PHASES and sent >= len(
                        storage.read_events(job_id)
                    ):
                        return
                    time.sleep(0.05)

        return StreamingResponse(stream(), media_type="text/event-stream")

    # -- spec validation (used by UI golden tests) -----------------------------

    @app.post("/specs/validate", response_model=models.SpecValidationResponse)
    def validate_spec(payload: dict):
        spec = from_payload(payload)
        return models.SpecValidationResponse(
            ok=True, kind=spec.kind, image_size=spec.image_shape
        )

    return app
