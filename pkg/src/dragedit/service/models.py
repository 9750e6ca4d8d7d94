"""Wire schemas. Every payload carries a schema version field "v"."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class ImageResponse(BaseModel):
    v: int = 1
    image_id: str
    size: tuple[int, int]  # (height, width)


class BankRequest(BaseModel):
    v: int = 1
    image_id: str
    ref_image_id: Optional[str] = None
    steps: int = Field(default=50, ge=1)
    prompt: Optional[str] = None


class BankResponse(BaseModel):
    v: int = 1
    bank_id: str
    preparing_seconds: float
    has_reference: bool
    reused: bool


class EditRequest(BaseModel):
    v: int = 1
    bank_id: str
    spec: dict
    config: dict = Field(default_factory=dict)


class EditResponse(BaseModel):
    v: int = 1
    job_id: str
    status_url: str
    reused: bool


class JobTimings(BaseModel):
    preparing_seconds: Optional[float] = None
    inference_seconds: Optional[float] = None


class JobArtifacts(BaseModel):
    result_url: Optional[str] = None
    preview_urls: list[str] = Field(default_factory=list)
    step_log_url: Optional[str] = None


class JobStatus(BaseModel):
    v: int = 1
    job_id: str
    phase: str
    spec_kind: Optional[str] = None
    cancel_requested: bool = False
    error: Optional[str] = None
    timings: JobTimings = Field(default_factory=JobTimings)
    artifacts: JobArtifacts = Field(default_factory=JobArtifacts)


class CancelResponse(BaseModel):
    v: int = 1
    job_id: str
    phase: str
    cancel_requested: bool


class FieldError(BaseModel):
    field: str
    message: str


class ErrorResponse(BaseModel):
    v: int = 1
    errors: list[FieldError]


class SpecValidationResponse(BaseModel):
    v: int = 1
    ok: bool
    kind: str
    image_size: tuple[int, int]
