"""Analyst queries: bucket layout, validation, one-hot encoding, wire format.

A query asks every device for one sensor's current reading, bucketed into
``n`` disjoint half-open ranges ``[lo, hi)``; the last bucket may be open
ended (``hi`` is ``None``). Timestamps are integer milliseconds since the
Unix epoch.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import QueryParseError
from .privacy import DEFAULT_P_MIN, RandomizationParams, param_violations

FIELDS = (
    "query_id",
    "analyst_id",
    "sensor",
    "buckets",
    "p",
    "q",
    "epoch_seconds",
    "t_start",
    "t_end",
    "signature",
)


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class Bucket:
    lo: float
    hi: float | None = None

    def contains(self, value: float) -> bool:
        return self.lo <= value and (self.hi is None or value < self.hi)

    @property
    def upper(self) -> float:
        return math.inf if self.hi is None else self.hi


@dataclass(frozen=True)
class Query:
    query_id: str
    analyst_id: str
    sensor: str
    buckets: tuple[Bucket, ...]
    p: float
    q: float
    epoch_seconds: float
    t_start: int
    t_end: int
    signature: bytes = b""
    p_min: float = field(default=DEFAULT_P_MIN, compare=False)

    @property
    def n(self) -> int:
        return len(self.buckets)

    @property
    def params(self) -> RandomizationParams:
        return RandomizationParams(self.p, self.q, self.p_min)

    @property
    def epoch_ms(self) -> float:
        return self.epoch_seconds * 1000

    def epoch_index(self, at_ms: int) -> int:
        return max(0, math.floor((at_ms - self.t_start) / self.epoch_ms))

    def epochs_remaining(self, at_ms: int) -> int:
        """Epochs (including the current one) left before ``t_end``."""
        start = max(at_ms, self.t_start)
        if start >= self.t_end:
            return 0
        return self.epoch_index(self.t_end - 1) - self.epoch_index(start) + 1


@dataclass(frozen=True)
class TruthfulAnswer:
    query_id: str
    epoch_index: int
    bits: tuple[int, ...]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def __bool__(self) -> bool:
        return self.ok


SignatureVerifier = Callable[[Query], bool]


def accept_any_signature(query: Query) -> bool:
    return True


def validate_query(
    query: Query,
    now: int | None = None,
    verify_signature: SignatureVerifier = accept_any_signature,
) -> ValidationReport:
    """Collect every violation of the query invariants (never raises)."""
    now = now_ms() if now is None else now
    out: list[Violation] = []

    def bad(code: str, message: str) -> None:
        out.append(Violation(code, message))

    if not query.query_id:
        bad("missing_id", "query_id must be non-empty")
    if not query.sensor:
        bad("missing_sensor", "sensor must be non-empty")

    buckets = query.buckets
    if not buckets:
        bad("empty_buckets", "at least one bucket is required")
    for i, b in enumerate(buckets):
        if b.hi is not None and not b.lo < b.hi:
            bad("bucket_bounds", f"bucket {i} has lo={b.lo} >= hi={b.hi}")
        if b.hi is None and i != len(buckets) - 1:
            bad("open_bucket_not_last", f"bucket {i} is open-ended but not last")
    for i in range(len(buckets) - 1):
        a, b = buckets[i], buckets[i + 1]
        if b.lo < a.lo:
            bad("unsorted_buckets", f"bucket {i + 1} (lo={b.lo}) sorts before bucket {i} (lo={a.lo})")
    # pairwise so that an unsorted layout still reports every overlap
    for i in range(len(buckets)):
        for j in range(i + 1, len(buckets)):
            a, b = buckets[i], buckets[j]
            if a.lo < b.upper and b.lo < a.upper:
                bad("overlapping_buckets", f"buckets {i} and {j} overlap")

    for problem in param_violations(query.p, query.q, query.p_min):
        bad("parameter_domain", problem)
    if not query.epoch_seconds > 0:
        bad("epoch_nonpositive", f"epoch_seconds={query.epoch_seconds!r} must be positive")
    if query.t_end <= query.t_start:
        bad("t_end_before_start", "t_end must come after t_start")
    if query.t_end <= now:
        bad("expired", f"t_end={query.t_end} is not in the future (now={now})")
    if not verify_signature(query):
        bad("bad_signature", "signature verification failed")
    return ValidationReport(out)


def bucket_index(value: float, buckets: Sequence[Bucket]) -> int | None:
    for i, b in enumerate(buckets):
        if b.contains(value):
            return i
    return None


def encode_value(value: float, query: Query, epoch_index: int = 0) -> TruthfulAnswer:
    """One-hot vector marking the bucket that holds ``value``.

    Readings outside every bucket encode as all zeros; the device still
    answers so that it counts towards the batch size.
    """
    bits = [0] * query.n
    i = bucket_index(value, query.buckets)
    if i is not None:
        bits[i] = 1
    return TruthfulAnswer(query.query_id, epoch_index, tuple(bits))


def speed_buckets() -> tuple[Bucket, ...]:
    """Vehicle speed in mph: 0, 1~10, ..., 191~200, >200 (22 buckets)."""
    return (
        (Bucket(0, 1),)
        + tuple(Bucket(lo, lo + 10) for lo in range(1, 201, 10))
        + (Bucket(201, None),)
    )


# -- wire format ------------------------------------------------------------


def query_to_dict(query: Query) -> dict:
    return {
        "query_id": query.query_id,
        "analyst_id": query.analyst_id,
        "sensor": query.sensor,
        "buckets": [{"lo": b.lo, "hi": b.hi} for b in query.buckets],
        "p": query.p,
        "q": query.q,
        "epoch_seconds": query.epoch_seconds,
        "t_start": query.t_start,
        "t_end": query.t_end,
        "signature": base64.b64encode(query.signature).decode("ascii"),
    }


def serialize_query(query: Query) -> bytes:
    return (json.dumps(query_to_dict(query), indent=2) + "\n").encode("utf-8")


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _key_offset(text: str, key: str) -> int:
    pos = text.find(json.dumps(key))
    return _byte_offset(text, pos) if pos >= 0 else 0


def _number(doc: dict, key: str, text: str, integral: bool = False):
    value = doc[key]
    kinds = (int,) if integral else (int, float)
    if isinstance(value, bool) or not isinstance(value, kinds):
        kind = "an integer" if integral else "a number"
        raise QueryParseError(f"field {key!r} must be {kind}", _key_offset(text, key), key)
    return value


def _string(doc: dict, key: str, text: str) -> str:
    value = doc[key]
    if not isinstance(value, str):
        raise QueryParseError(f"field {key!r} must be a string", _key_offset(text, key), key)
    return value


def query_from_dict(doc, strict: bool = True, text: str = "") -> Query:
    """Build a Query from an already-decoded document."""
    if not isinstance(doc, dict):
        raise QueryParseError("query document must be a JSON object", 0)
    for key in FIELDS:
        if key not in doc:
            raise QueryParseError(
                f"missing required field {key!r}", len(text.encode("utf-8")), key
            )
    if strict:
        for key in doc:
            if key not in FIELDS:
                raise QueryParseError(f"unknown field {key!r}", _key_offset(text, key), key)

    raw_buckets = doc["buckets"]
    if not isinstance(raw_buckets, list):
        raise QueryParseError("field 'buckets' must be an array", _key_offset(text, "buckets"), "buckets")
    buckets = []
    for item in raw_buckets:
        if not isinstance(item, dict) or "lo" not in item or "hi" not in item:
            raise QueryParseError(
                "each bucket must be an object with 'lo' and 'hi'",
                _key_offset(text, "buckets"),
                "buckets",
            )
        if strict and set(item) - {"lo", "hi"}:
            raise QueryParseError("unknown field in bucket", _key_offset(text, "buckets"), "buckets")
        lo = _number(item, "lo", text)
        hi = None if item["hi"] is None else _number(item, "hi", text)
        buckets.append(Bucket(lo, hi))

    try:
        signature = base64.b64decode(_string(doc, "signature", text), validate=True)
    except binascii.Error:
        raise QueryParseError(
            "field 'signature' is not valid base64", _key_offset(text, "signature"), "signature"
        ) from None

    return Query(
        query_id=_string(doc, "query_id", text),
        analyst_id=_string(doc, "analyst_id", text),
        sensor=_string(doc, "sensor", text),
        buckets=tuple(buckets),
        p=_number(doc, "p", text),
        q=_number(doc, "q", text),
        epoch_seconds=_number(doc, "epoch_seconds", text),
        t_start=_number(doc, "t_start", text, integral=True),
        t_end=_number(doc, "t_end", text, integral=True),
        signature=signature,
    )


def parse_query(data: bytes | str, strict: bool = True) -> Query:
    """Parse a query document. Expiry is *not* checked here; see validate_query."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise QueryParseError("document is not valid UTF-8", exc.start) from None
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise QueryParseError(exc.msg, _byte_offset(text, exc.pos)) from None
    return query_from_dict(doc, strict=strict, text=text)
