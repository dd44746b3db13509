"""Data-owner side: local sample store, sanity checks, per-epoch answers.

Raw readings never leave the device. Each epoch the device encodes its
latest reading as a one-hot vector, privatizes it bit by bit and submits it
under a pseudonym derived from its secret token, the query and the epoch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable


from .errors import NotSubscribedError, QueryExpiredError, QueryParseError
from .privacy import epsilon_of, make_rng, randomize_answer
from .query import Query, encode_value, validate_query

log = logging.getLogger(__name__)

SUBMISSION_FIELDS = ("query_id", "epoch_index", "pseudonym", "bits", "sent_at")


@dataclass(frozen=True)
class DevicePolicy:
    epsilon_threshold_per_query: float
    sensor_blacklist: frozenset[str] = frozenset()
    analyst_blacklist: frozenset[str] = frozenset()
    cumulative_budget_per_analyst: float | None = None
    skip_without_sample: bool = False

    def __post_init__(self) -> None:
        if not self.epsilon_threshold_per_query > 0:
            raise ValueError("epsilon_threshold_per_query must be positive")
        if self.cumulative_budget_per_analyst is not None and not self.cumulative_budget_per_analyst > 0:
            raise ValueError("cumulative_budget_per_analyst must be positive when set")
        object.__setattr__(self, "sensor_blacklist", frozenset(self.sensor_blacklist))
        object.__setattr__(self, "analyst_blacklist", frozenset(self.analyst_blacklist))


@dataclass
class DeviceState:
    device_id: str
    auth_token: bytes
    rng_seed: int | None = 0
    os_entropy: bool = False
    latest_samples: dict[str, tuple[float, int]] = field(default_factory=dict)
    accepted_queries: dict[str, Query] = field(default_factory=dict)
    spent_budget: dict[str, float] = field(default_factory=dict)
    submitted: dict[str, set[int]] = field(default_factory=dict)
    dropped_samples: int = 0

    def __post_init__(self) -> None:
        self.rng = make_rng(self.rng_seed, os_entropy=self.os_entropy)

    @classmethod
    def fresh(cls, device_id: str, rng_seed: int | None = 0) -> "DeviceState":
        return cls(device_id, os.urandom(16), rng_seed)


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Decision(True)


@dataclass(frozen=True)
class Submission:
    query_id: str
    epoch_index: int
    pseudonym: str
    bits: tuple[int, ...]
    sent_at: int

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "epoch_index": self.epoch_index,
            "pseudonym": self.pseudonym,
            "bits": list(self.bits),
            "sent_at": self.sent_at,
        }

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")


def submission_from_dict(doc) -> Submission:
    """Decode a submission record. Bit values are not range-checked here;
    that is the aggregator's job."""
    if not isinstance(doc, dict):
        raise QueryParseError("submission must be a JSON object", 0)
    for key in SUBMISSION_FIELDS:
        if key not in doc:
            raise QueryParseError(f"missing required field {key!r}", 0, key)
    extra = set(doc) - set(SUBMISSION_FIELDS)
    if extra:
        name = sorted(extra)[0]
        raise QueryParseError(f"unknown field {name!r}", 0, name)
    for key in ("epoch_index", "sent_at"):
        if isinstance(doc[key], bool) or not isinstance(doc[key], int):
            raise QueryParseError(f"field {key!r} must be an integer", 0, key)
    for key in ("query_id", "pseudonym"):
        if not isinstance(doc[key], str):
            raise QueryParseError(f"field {key!r} must be a string", 0, key)
    if not isinstance(doc["bits"], list):
        raise QueryParseError("field 'bits' must be an array", 0, "bits")
    return Submission(
        doc["query_id"], doc["epoch_index"], doc["pseudonym"], tuple(doc["bits"]), doc["sent_at"]
    )


def parse_submission(data: bytes | str) -> Submission:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise QueryParseError(exc.msg, exc.pos) from None
    except UnicodeDecodeError as exc:
        raise QueryParseError("submission is not valid UTF-8", exc.start) from None
    return submission_from_dict(doc)


def pseudonym_for_epoch(auth_token: bytes, query_id: str, epoch_index: int) -> str:
    """Keyed one-way pseudonym; unlinkable across epochs without the token."""
    if len(auth_token) > 64:
        auth_token = hashlib.sha256(auth_token).digest()
    msg = f"{query_id}|{epoch_index}".encode("utf-8")
    return hashlib.blake2b(msg, key=auth_token, digest_size=16).hexdigest()


def sanity_check(
    query: Query,
    policy: DevicePolicy,
    state: DeviceState | None = None,
    now: int | None = None,
) -> Decision:
    """Decide whether to run ``query``; reserves lifetime budget on accept.

    Budget is reserved only when ``state`` is given.
    """
    if state is not None and query.query_id in state.accepted_queries:
        return ACCEPT
    report = validate_query(query, now=now)
    if not report.ok:
        return Decision(False, "invalid_query")
    if query.analyst_id in policy.analyst_blacklist:
        return Decision(False, "analyst_blacklisted")
    if query.sensor in policy.sensor_blacklist:
        return Decision(False, "sensor_blacklisted")

    per_query = epsilon_of(query.params).epsilon_per_query
    if per_query > policy.epsilon_threshold_per_query:
        return Decision(False, "privacy_cost")

    limit = policy.cumulative_budget_per_analyst
    if limit is not None:
        start = query.t_start if now is None else now
        lifetime = per_query * query.epochs_remaining(start)
        spent = state.spent_budget.get(query.analyst_id, 0.0) if state is not None else 0.0
        if spent + lifetime > limit:
            return Decision(False, "budget_exhausted")
        if state is not None:
            state.spent_budget[query.analyst_id] = spent + lifetime

    if state is not None:
        state.accepted_queries[query.query_id] = query
        state.submitted.setdefault(query.query_id, set())
    return ACCEPT


def ingest_sample(state: DeviceState, sensor: str, value: float, timestamp: int) -> DeviceState:
    """Keep only the newest reading per sensor; stale readings are dropped."""
    current = state.latest_samples.get(sensor)
    if current is not None and timestamp < current[1]:
        state.dropped_samples += 1
        return state
    state.latest_samples[sensor] = (value, timestamp)
    return state


def execute_epoch(
    state: DeviceState,
    query: Query,
    now: int,
    policy: DevicePolicy | None = None,
) -> Submission | None:
    """Produce this epoch's privatized answer, or None if already answered.

    Raises QueryExpiredError (and drops the subscription) once ``now``
    reaches the query's end time.
    """
    if query.query_id not in state.accepted_queries:
        raise NotSubscribedError(query.query_id)
    if now >= query.t_end:
        state.accepted_queries.pop(query.query_id, None)
        state.submitted.pop(query.query_id, None)
        raise QueryExpiredError(query.query_id)
    if now < query.t_start:
        return None

    epoch = query.epoch_index(now)
    done = state.submitted.setdefault(query.query_id, set())
    if epoch in done:
        return None

    sample = state.latest_samples.get(query.sensor)
    if sample is None:
        if policy is not None and policy.skip_without_sample:
            return None
        truthful = (0,) * query.n
    else:
        truthful = encode_value(sample[0], query, epoch).bits

    bits = randomize_answer(truthful, query.params, state.rng, n=query.n)
    done.add(epoch)
    return Submission(
        query_id=query.query_id,
        epoch_index=epoch,
        pseudonym=pseudonym_for_epoch(state.auth_token, query.query_id, epoch),
        bits=tuple(int(b) for b in bits),
        sent_at=now,
    )


class DeviceAgent:
    """One simulated or real device, pushing submissions into ``outbox``.

    ``outbox`` is any callable taking a Submission, e.g. ``queue.put`` or an
    aggregator's ``accept_answer``; it may be consumed on another thread.
    """

    def __init__(
        self,
        state: DeviceState,
        policy: DevicePolicy,
        outbox: Callable[[Submission], object] | None = None,
    ):
        self.state = state
        self.policy = policy
        self.outbox = outbox

    def offer(self, query: Query, now: int | None = None) -> Decision:
        decision = sanity_check(query, self.policy, self.state, now)
        if not decision:
            log.debug("device %s rejected %s: %s", self.state.device_id, query.query_id, decision.reason)
        return decision

    def ingest(self, sensor: str, value: float, timestamp: int) -> None:
        ingest_sample(self.state, sensor, value, timestamp)

    def tick(self, now: int) -> list[Submission]:
        """Run every accepted query once for the epoch containing ``now``."""
        sent = []
        for query in list(self.state.accepted_queries.values()):
            try:
                sub = execute_epoch(self.state, query, now, self.policy)
            except QueryExpiredError:
                log.debug("device %s unsubscribed from %s", self.state.device_id, query.query_id)
                continue
            if sub is None:
                continue
            if self.outbox is not None:
                self.outbox(sub)
            sent.append(sub)
        return sent
