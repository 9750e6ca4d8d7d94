"""Durable content-addressed storage for the job service.

Layout under the storage root:

    images/<id>.png            uploaded images, id = content hash
    banks/<id>/                memory-bank containers
    jobs/<id>.json             job records (atomic rewrite)
    jobs/<id>.events.jsonl     append-only event log backing SSE
    jobs/<id>/                 result / preview / step-log artifacts

One process owns writes; a lock serializes record updates. Phases only move
forward; a crash-recovered job is re-executed without its phase moving
backward.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path
from typing import Optional

from ..errors import ContractError

PHASES = ("queued", "inverting", "sampling", "done", "failed", "cancelled")
TERMINAL_PHASES = frozenset({"done", "failed", "cancelled"})
_PHASE_RANK = {name: i for i, name in enumerate(PHASES)}


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def content_id(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


class Storage:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("images", "banks", "jobs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    # -- images -----------------------------------------------------------

    def put_image(self, raw: bytes) -> str:
        image_id = hashlib.sha256(raw).hexdigest()[:16]
        path = self.image_path(image_id)
        if not path.exists():
            path.write_bytes(raw)
        return image_id

    def image_path(self, image_id: str) -> Path:
        return self.root / "images" / f"{image_id}.png"

    def has_image(self, image_id: str) -> bool:
        return self.image_path(image_id).exists()

    # -- banks ------------------------------------------------------------

    def bank_dir(self, bank_id: str) -> Path:
        return self.root / "banks" / bank_id

    def has_bank(self, bank_id: str) -> bool:
        return (self.bank_dir(bank_id) / "manifest.json").exists()

    # -- job records --------------------------------------------------------

    def job_path(self, job_id: str) -> Path:
        return self.root / "jobs" / f"{job_id}.json"

    def job_dir(self, job_id: str) -> Path:
        d = self.root / "jobs" / job_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def has_job(self, job_id: str) -> bool:
        return self.job_path(job_id).exists()

    def new_job(self, job_id: str, bank_id: str, spec_payload: dict, config: dict) -> dict:
        record = {
            "v": 1,
            "job_id": job_id,
            "bank_id": bank_id,
            "spec": spec_payload,
            "config": config,
            "phase": "queued",
            "cancel_requested": False,
            "created_at": time.time(),
            "error": None,
            "timings": {"preparing_seconds": None, "inference_seconds": None},
            "artifacts": {"result": None, "previews": [], "step_log": None},
        }
        self._write_job(record)
        return record

    def load_job(self, job_id: str) -> dict:
        path = self.job_path(job_id)
        if not path.exists():
            raise ContractError(f"unknown job {job_id}")
        return json.loads(path.read_text())

    def list_jobs(self) -> list[dict]:
        records = []
        for path in sorted((self.root / "jobs").glob("*.json")):
            records.append(json.loads(path.read_text()))
        return records

    def _write_job(self, record: dict) -> None:
        path = self.job_path(record["job_id"])
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(record, sort_keys=True))
        os.replace(tmp, path)

    def update_job(self, job_id: str, **changes) -> dict:
        """Apply changes under the writer lock; phases never move backward."""
        with self._lock:
            record = self.load_job(job_id)
            if "phase" in changes:
                new, cur = changes["phase"], record["phase"]
                if new not in _PHASE_RANK:
                    raise ContractError(f"unknown phase {new!r}")
                if cur in TERMINAL_PHASES or _PHASE_RANK[new] < _PHASE_RANK[cur]:
                    changes = {k: v for k, v in changes.items() if k != "phase"}
            for key, value in changes.items():
                if isinstance(value, dict) and isinstance(record.get(key), dict):
                    record[key] = {**record[key], **value}
                else:
                    record[key] = value
            self._write_job(record)
            return record

    def cancel_requested(self, job_id: str) -> bool:
        return bool(self.load_job(job_id).get("cancel_requested"))

    # -- event log ----------------------------------------------------------

    def events_path(self, job_id: str) -> Path:
        return self.root / "jobs" / f"{job_id}.events.jsonl"

    def append_event(self, job_id: str, event: dict) -> None:
        line = canonical_json({"v": 1, **event})
        with self._lock:
            with open(self.events_path(job_id), "a") as f:
                f.write(line + "\n")

    def read_events(self, job_id: str, start: int = 0) -> list[dict]:
        path = self.events_path(job_id)
        if not path.exists():
            return []
        lines = path.read_text().splitlines()[start:]
        return [json.loads(line) for line in lines if line.strip()]
