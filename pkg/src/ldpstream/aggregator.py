"""Untrusted aggregator: windowed batching of privatized answers.

The aggregator only ever sees randomized bits. For each registered query it
keeps one open window; accepted answers add to per-index bit counts, and
when the window ends the counts are turned into per-index estimates and
published to every attached consumer.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .device import Decision, Submission
from .errors import UnknownQueryError
from .privacy import EstimateResult, estimate_true_count
from .query import Query, now_ms

log = logging.getLogger(__name__)

_BITSET = frozenset((0, 1))

ACCEPTED = Decision(True)
REJECT_LENGTH = Decision(False, "wrong_length")
REJECT_BITS = Decision(False, "malformed_bits")
REJECT_DUPLICATE = Decision(False, "duplicate")
REJECT_EPOCH = Decision(False, "epoch_out_of_window")
REJECT_EXPIRED = Decision(False, "expired")


@dataclass
class Batch:
    """Open aggregation window for one query.

    ``seen_pseudonyms`` maps epoch index to the pseudonyms already accepted
    for that epoch. It outlives a single window: a 1 s window usually sits
    inside a longer device epoch.
    """

    query_id: str
    n_buckets: int
    window_start: int
    window_end: int
    epoch_lo: int
    epoch_hi: int
    retention_epochs: int = 2
    n_answers: int = 0
    seen_pseudonyms: dict[int, set[str]] = field(default_factory=dict)
    _rows: list = field(default_factory=list, repr=False)
    _sums: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self._sums is None:
            self._sums = np.zeros(self.n_buckets, dtype=np.int64)

    @property
    def window(self) -> tuple[int, int]:
        return self.window_start, self.window_end

    @property
    def bit_sums(self) -> np.ndarray:
        if self._rows:
            self._sums += np.array(self._rows, dtype=np.int64).sum(axis=0)
            self._rows.clear()
        return self._sums.copy()


def open_batch(
    query: Query,
    window_start: int,
    window_ms: int,
    seen: dict[int, set[str]] | None = None,
    retention_epochs: int = 2,
) -> Batch:
    window_end = window_start + window_ms
    epoch_hi = query.epoch_index(window_end - 1)
    # a submission may be one epoch behind (sent late in the previous epoch)
    epoch_lo = max(0, query.epoch_index(window_start) - (retention_epochs - 1))
    seen = {} if seen is None else seen
    for epoch in [e for e in seen if e < epoch_lo]:
        del seen[epoch]
    return Batch(
        query.query_id, query.n, window_start, window_end, epoch_lo, epoch_hi,
        retention_epochs=retention_epochs, seen_pseudonyms=seen,
    )


def accept_answer(batch: Batch, submission: Submission, query: Query) -> Decision:
    if submission.query_id != batch.query_id:
        raise UnknownQueryError(submission.query_id)
    bits = submission.bits
    if len(bits) != batch.n_buckets:
        return REJECT_LENGTH
    try:
        if not _BITSET.issuperset(bits):
            return REJECT_BITS
    except TypeError:
        return REJECT_BITS
    if submission.sent_at >= query.t_end:
        return REJECT_EXPIRED
    epoch = submission.epoch_index
    if not batch.epoch_lo <= epoch <= batch.epoch_hi:
        return REJECT_EPOCH
    seen = batch.seen_pseudonyms.get(epoch)
    if seen is None:
        seen = batch.seen_pseudonyms[epoch] = set()
    elif submission.pseudonym in seen:
        return REJECT_DUPLICATE
    seen.add(submission.pseudonym)
    batch._rows.append(bits)
    batch.n_answers += 1
    return ACCEPTED


def accept_bulk(
    batch: Batch,
    query: Query,
    epochs: np.ndarray,
    pseudonyms: Sequence[str],
    bits: np.ndarray,
    sent_at: np.ndarray,
) -> np.ndarray:
    """Vectorized accept_answer for many submissions at once.

    Applies the same rules in the same order and returns the boolean mask of
    accepted rows. Within the call, the first occurrence of a pseudonym wins.
    """
    bits = np.asarray(bits)
    m = len(pseudonyms)
    if bits.ndim != 2 or bits.shape[1] != batch.n_buckets:
        return np.zeros(m, dtype=bool)
    epochs = np.asarray(epochs, dtype=np.int64)
    sent_at = np.asarray(sent_at, dtype=np.int64)
    ok = (bits <= 1).all(axis=1) & (bits >= 0).all(axis=1)
    ok &= sent_at < query.t_end
    ok &= (epochs >= batch.epoch_lo) & (epochs <= batch.epoch_hi)
    seen_by_epoch = batch.seen_pseudonyms
    for i in np.flatnonzero(ok):
        epoch = int(epochs[i])
        seen = seen_by_epoch.get(epoch)
        if seen is None:
            seen = seen_by_epoch[epoch] = set()
        name = pseudonyms[i]
        if name in seen:
            ok[i] = False
        else:
            seen.add(name)
    batch._sums += bits[ok].sum(axis=0, dtype=np.int64)
    batch.n_answers += int(ok.sum())
    return ok


@dataclass(frozen=True)
class BatchEstimate:
    query_id: str
    window: tuple[int, int]
    per_index: tuple[EstimateResult, ...]
    n_answers: int
    empty: bool = False

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "window_start_ms": self.window[0],
            "window_end_ms": self.window[1],
            "n_answers": self.n_answers,
            "empty": self.empty,
            "estimates": [
                {"index": i, "y_raw": e.y_raw, "y_clamped": e.y_clamped, "stddev": e.stddev}
                for i, e in enumerate(self.per_index)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


def close_batch(batch: Batch, query: Query) -> BatchEstimate:
    """Estimate every index of the window, then reset the batch in place to
    the following window."""
    sums = batch.bit_sums
    n = batch.n_answers
    window = batch.window
    if n == 0:
        est = BatchEstimate(query.query_id, window, (), 0, empty=True)
    else:
        params = query.params
        per_index = tuple(estimate_true_count(int(s), n, params) for s in sums)
        est = BatchEstimate(query.query_id, window, per_index, n)

    nxt = open_batch(
        query, batch.window_end, batch.window_end - batch.window_start,
        batch.seen_pseudonyms, batch.retention_epochs,
    )
    batch.window_start, batch.window_end = nxt.window_start, nxt.window_end
    batch.epoch_lo, batch.epoch_hi = nxt.epoch_lo, nxt.epoch_hi
    batch.n_answers = 0
    batch._rows.clear()
    batch._sums = nxt._sums
    return est


_CLOSED = object()


class Subscription:
    """Reader attached to one query's estimate stream.

    Iterating blocks until the next estimate arrives; :meth:`close` ends
    the iteration.
    """

    def __init__(self, query_id: str, maxsize: int = 0):
        self.query_id = query_id
        self._queue: queue.Queue = queue.Queue(maxsize)
        self.closed = False

    def _deliver(self, item) -> None:
        try:
            self._queue.put_nowait(item)
        except queue.Full:
            log.warning("subscriber on %s is full; dropping window", self.query_id)

    def get(self, timeout: float | None = None) -> BatchEstimate | None:
        """Next estimate, or None on timeout or after close."""
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _CLOSED:
            self.closed = True
            return None
        return item

    def drain(self) -> list[BatchEstimate]:
        out = []
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return out
            if item is _CLOSED:
                self.closed = True
                return out
            out.append(item)

    def close(self) -> None:
        self._queue.put(_CLOSED)

    def __iter__(self) -> Iterator[BatchEstimate]:
        while not self.closed:
            item = self.get()
            if item is not None:
                yield item


class _Shard:
    def __init__(self, query: Query, batch: Batch, history: int):
        self.query = query
        self.batch = batch
        self.lock = threading.Lock()
        self.subscribers: list[Subscription] = []
        self.published: deque[BatchEstimate] = deque(maxlen=history)


class Aggregator:
    """All registered queries, one single-writer shard per query.

    Windows are anchored at the query's ``t_start`` and are ``window_ms``
    long; :meth:`advance` closes every window that has ended by ``now``.
    Nothing here holds a truthful answer.
    """

    def __init__(
        self,
        window_ms: int = 1000,
        retention_epochs: int = 2,
        publication_log: str | Path | None = None,
        history: int = 10_000,
    ):
        if window_ms <= 0:
            raise ValueError("window_ms must be positive")
        self.window_ms = int(window_ms)
        self.retention_epochs = retention_epochs
        self.history = history
        self._shards: dict[str, _Shard] = {}
        self._registry_lock = threading.Lock()
        self._log_path = Path(publication_log) if publication_log else None
        self._log_lock = threading.Lock()

    # -- registration -----------------------------------------------------

    def register(self, query: Query, start_ms: int | None = None) -> Batch:
        """Register ``query``; the first window is the one containing
        ``start_ms`` (default: the query's start)."""
        start = query.t_start if start_ms is None else max(start_ms, query.t_start)
        k = (start - query.t_start) // self.window_ms
        batch = open_batch(query, query.t_start + k * self.window_ms, self.window_ms,
                           retention_epochs=self.retention_epochs)
        with self._registry_lock:
            if query.query_id in self._shards:
                raise ValueError(f"query {query.query_id!r} is already registered")
            self._shards[query.query_id] = _Shard(query, batch, self.history)
        return batch

    def unregister(self, query_id: str) -> None:
        with self._registry_lock:
            shard = self._shards.pop(query_id, None)
        if shard is not None:
            for sub in shard.subscribers:
                sub.close()

    def queries(self) -> list[Query]:
        return [s.query for s in self._shards.values()]

    def query(self, query_id: str) -> Query:
        return self._shard(query_id).query

    def batch(self, query_id: str) -> Batch:
        return self._shard(query_id).batch

    def _shard(self, query_id: str) -> _Shard:
        try:
            return self._shards[query_id]
        except KeyError:
            raise UnknownQueryError(query_id) from None

    # -- ingestion --------------------------------------------------------

    def accept_answer(self, submission: Submission) -> Decision:
        shard = self._shards.get(submission.query_id)
        if shard is None:
            raise UnknownQueryError(submission.query_id)
        with shard.lock:
            return accept_answer(shard.batch, submission, shard.query)

    def accept_bulk(self, query_id, epochs, pseudonyms, bits, sent_at) -> np.ndarray:
        shard = self._shard(query_id)
        with shard.lock:
            return accept_bulk(shard.batch, shard.query, epochs, pseudonyms, bits, sent_at)

    # -- windows and publication ------------------------------------------

    def advance(self, now: int | None = None) -> list[BatchEstimate]:
        """Close every window that ended at or before ``now``, in order."""
        now = now_ms() if now is None else now
        closed = []
        for shard in list(self._shards.values()):
            while True:
                with shard.lock:
                    if shard.batch.window_end > now:
                        break
                    est = close_batch(shard.batch, shard.query)
                self._publish(shard, est)
                closed.append(est)
        return closed

    def close_current(self, query_id: str) -> BatchEstimate:
        """Close the open window of one query immediately."""
        shard = self._shard(query_id)
        with shard.lock:
            est = close_batch(shard.batch, shard.query)
        self._publish(shard, est)
        return est

    def _publish(self, shard: _Shard, est: BatchEstimate) -> None:
        shard.published.append(est)
        for sub in list(shard.subscribers):
            sub._deliver(est)
        if self._log_path is not None:
            with self._log_lock, self._log_path.open("a", encoding="utf-8") as fh:
                fh.write(est.to_json() + "\n")

    def publish_stream(self, query_id: str, maxsize: int = 0) -> Subscription:
        """Attach a consumer; it receives the currently open window's estimate
        first, then every later one, in window order."""
        shard = self._shard(query_id)
        sub = Subscription(query_id, maxsize)
        with shard.lock:
            shard.subscribers.append(sub)
        return sub

    def detach(self, sub: Subscription) -> None:
        shard = self._shards.get(sub.query_id)
        if shard is not None:
            with shard.lock:
                if sub in shard.subscribers:
                    shard.subscribers.remove(sub)
        sub.close()

    def published(self, query_id: str, since_ms: int | None = None) -> list[BatchEstimate]:
        items = list(self._shard(query_id).published)
        if since_ms is not None:
            items = [e for e in items if e.window[0] >= since_ms]
        return items
