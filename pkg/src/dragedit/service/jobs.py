"""Job execution: a FIFO queue feeding worker threads that run the sampling
pipeline and publish progress into the event log."""

from __future__ import annotations

import queue
import threading
import time
import traceback
from typing import Optional

from ..backend.base import Backend
from ..config import config_for_task
from ..errors import ContractError
from ..imaging import image_to_png_bytes
from ..inversion import load_bank, read_manifest
from ..sampler import run
from ..tasks import from_payload
from .store import Storage, TERMINAL_PHASES


class JobRunner:
    def __init__(self, storage: Storage, backend: Backend, workers: int = 1):
        self.storage = storage
        self.backend = backend
        self.queue: "queue.Queue[Optional[str]]" = queue.Queue()
        self.workers = [
            threading.Thread(target=self._worker, daemon=True, name=f"dragedit-worker-{i}")
            for i in range(max(1, workers))
        ]
        self._started = False

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for record in self.storage.list_jobs():
            if record["phase"] not in TERMINAL_PHASES:
                self.queue.put(record["job_id"])
        for w in self.workers:
            w.start()

    def stop(self) -> None:
        for _ in self.workers:
            self.queue.put(None)
        for w in self.workers:
            if w.is_alive():
                w.join(timeout=10)

    def submit(self, job_id: str) -> None:
        self.queue.put(job_id)

    def _worker(self) -> None:
        while True:
            job_id = self.queue.get()
            if job_id is None:
                return
            try:
                self.execute(job_id)
            except Exception:  # the job record carries the error; keep serving
                traceback.print_exc()
            finally:
                self.queue.task_done()

    # -- pipeline -----------------------------------------------------------

    def _terminal(self, job_id: str, phase: str, error: Optional[str] = None) -> None:
        self.storage.update_job(job_id, phase=phase, error=error)
        self.storage.append_event(job_id, {"event": "end", "phase": phase, "error": error})

    def execute(self, job_id: str) -> None:
        storage = self.storage
        record = storage.load_job(job_id)
        if record["phase"] in TERMINAL_PHASES:
            return
        if record["cancel_requested"]:
            self._terminal(job_id, "cancelled")
            return
        try:
            record = storage.update_job(job_id, phase="inverting")
            storage.append_event(job_id, {"event": "phase", "phase": record["phase"]})
            bank = load_bank(
                storage.bank_dir(record["bank_id"]),
                expected_profile_hash=self.backend.profile.content_hash(),
            )
            manifest = read_manifest(storage.bank_dir(record["bank_id"]))
            spec = from_payload(record["spec"])
            overrides = dict(spec.weight_overrides)
            overrides.update(record["config"] or {})
            overrides.setdefault("steps", bank.t_max)
            cfg = config_for_task(spec.kind, overrides)
            cond = self.backend.condition(manifest.get("prompt"))
            storage.update_job(
                job_id,
                timings={"preparing_seconds": manifest.get("preparing_seconds", 0.0)},
            )

            record = storage.update_job(job_id, phase="sampling")
            storage.append_event(job_id, {"event": "phase", "phase": record["phase"]})
            job_dir = storage.job_dir(job_id)
            previews: list[str] = []

            def on_step(step, preview_image):
                storage.append_event(
                    job_id,
                    {
                        "event": "step",
                        "t": step.t,
                        "seconds": step.seconds,
                        "gradient_norm": step.gradient_norm,
                        "energy": (step.energy or {}).get("total")
                        if step.energy
                        else None,
                    },
                )
                if preview_image is not None:
                    name = f"preview_{len(previews):03d}.png"
                    (job_dir / name).write_bytes(image_to_png_bytes(preview_image))
                    previews.append(name)
                    storage.append_event(
                        job_id,
                        {"event": "preview", "t": step.t, "index": len(previews) - 1},
                    )

            started = time.perf_counter()
            result, state = run(
                self.backend,
                bank,
                spec,
                cfg,
                cond,
                step_callback=on_step,
                cancel_check=lambda: storage.cancel_requested(job_id),
            )
            inference = time.perf_counter() - started
            if state.cancelled:
                storage.update_job(job_id, timings={"inference_seconds": inference})
                self._terminal(job_id, "cancelled")
                return
            (job_dir / "result.png").write_bytes(
                image_to_png_bytes(self.backend.decode(result))
            )
            (job_dir / "steps.jsonl").write_text(state.to_jsonl() + "\n")
            storage.update_job(
                job_id,
                timings={"inference_seconds": inference},
                artifacts={
                    "result": "result.png",
                    "previews": previews,
                    "step_log": "steps.jsonl",
                },
            )
            self._terminal(job_id, "done")
        except ContractError as exc:
            self._terminal(job_id, "failed", str(exc))
        except Exception as exc:  # surface unexpected failures in the record
            self._terminal(job_id, "failed", f"{type(exc).__name__}: {exc}")
            raise
