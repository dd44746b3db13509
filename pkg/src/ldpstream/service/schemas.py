"""Request and response models for the aggregator service."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..aggregator import BatchEstimate
from ..device import Submission
from ..query import Query, query_from_dict, query_to_dict


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BucketModel(Strict):
    lo: float
    hi: float | None


class QueryModel(Strict):
    query_id: str
    analyst_id: str
    sensor: str
    buckets: list[BucketModel]
    p: float
    q: float
    epoch_seconds: float
    t_start: int
    t_end: int
    signature: str = ""

    def to_query(self) -> Query:
        return query_from_dict(self.model_dump())

    @classmethod
    def from_query(cls, query: Query) -> "QueryModel":
        return cls(**query_to_dict(query))


class SubmissionModel(Strict):
    query_id: str
    epoch_index: int
    pseudonym: str
    bits: list[int]
    sent_at: int

    def to_submission(self) -> Submission:
        return Submission(self.query_id, self.epoch_index, self.pseudonym, tuple(self.bits), self.sent_at)


class VerdictModel(BaseModel):
    accepted: bool
    reason: str | None = None


class ViolationModel(BaseModel):
    code: str
    message: str


class ValidationModel(BaseModel):
    ok: bool
    violations: list[ViolationModel]


class RegisteredModel(BaseModel):
    query_id: str
    window_start_ms: int
    window_ms: int


class EstimateModel(BaseModel):
    index: int
    y_raw: float
    y_clamped: float
    stddev: float


class BatchEstimateModel(BaseModel):
    query_id: str
    window_start_ms: int
    window_end_ms: int
    n_answers: int
    empty: bool
    estimates: list[EstimateModel]

    @classmethod
    def of(cls, est: BatchEstimate) -> "BatchEstimateModel":
        return cls(**est.to_record())


class ExperimentRequest(Strict):
    name: str
    overrides: dict[str, float] = Field(default_factory=dict)
    repetitions: int | None = None
    master_seed: int = 0
    p: float | None = None
    q: float | None = None


class ExperimentRowModel(BaseModel):
    n_devices: int
    fraction: float
    p: float
    q: float
    window_s: float
    interval_s: float
    median_eta: float | None
    mean_eta: float | None
    std_eta: float | None
    n_windows: int


class ExperimentResponse(BaseModel):
    summary: str
    rows: list[ExperimentRowModel]
    csv: str
