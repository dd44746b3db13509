"""Deterministic synthetic fleets driven in virtual time.

A fleet is a set of devices with fixed truthful readings. Each device
answers once per answer interval at a phase drawn uniformly from the
interval; the aggregator closes a window every ``window_seconds`` of
virtual time. Every estimate is paired with the true per-index counts of
the devices that actually got an answer accepted in that window.

Two engines share those semantics. ``"agents"`` instantiates one
:class:`~ldpstream.device.DeviceAgent` per device and feeds the aggregator
one submission at a time; ``"vectorized"`` runs the same per-device steps
(encode, randomize, pseudonym, submit) on arrays and uses the aggregator's
bulk path, which is what makes million-device runs take seconds.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .aggregator import Aggregator, BatchEstimate
from .device import DevicePolicy, DeviceAgent, DeviceState, pseudonym_for_epoch
from .errors import CapacityError
from .privacy import randomize_bits, relative_error
from .query import Query

DEFAULT_MEMORY_LIMIT = 3 * 2**30
AGENT_ENGINE_MAX_DEVICES = 20_000
TOKEN_BYTES = 16


@dataclass(frozen=True)
class FleetConfig:
    n_devices: int
    sensitive_fraction: float
    answer_interval_seconds: float = 10.0
    window_seconds: float = 1.0
    churn_rate: float = 0.0
    duration_seconds: float = 10.0
    seed: int = 0
    # bucket holding the sensitive value; negative counts from the end
    sensitive_index: int = -1

    def violations(self) -> list[str]:
        out = []
        if not isinstance(self.n_devices, int) or self.n_devices < 0:
            out.append(f"n_devices={self.n_devices!r} must be a nonnegative integer")
        for name in ("sensitive_fraction", "churn_rate"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                out.append(f"{name}={value!r} must lie in [0, 1]")
        for name in ("answer_interval_seconds", "window_seconds", "duration_seconds"):
            value = getattr(self, name)
            if not value > 0:
                out.append(f"{name}={value!r} must be positive")
            elif round(value * 1000) < 1:
                out.append(f"{name}={value!r} is below the 1 ms time resolution")
        return out

    def check(self) -> None:
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def replace(self, **changes) -> "FleetConfig":
        return dataclasses.replace(self, **changes)

    @property
    def interval_ms(self) -> int:
        return round(self.answer_interval_seconds * 1000)

    @property
    def window_ms(self) -> int:
        return round(self.window_seconds * 1000)

    @property
    def duration_ms(self) -> int:
        return round(self.duration_seconds * 1000)

    @property
    def n_windows(self) -> int:
        return -(-self.duration_ms // self.window_ms)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "FleetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown FleetConfig fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "FleetConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Population:
    values: np.ndarray
    truth_index: np.ndarray
    sensitive: np.ndarray
    phases_ms: np.ndarray
    tokens: bytes

    def __len__(self) -> int:
        return len(self.values)

    def token(self, i: int) -> bytes:
        return self.tokens[TOKEN_BYTES * i : TOKEN_BYTES * (i + 1)]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def generate_population(config: FleetConfig, query: Query) -> Population:
    """Devices with fixed readings; exactly round(n * fraction) are sensitive."""
    config.check()
    n = config.n_devices
    n_buckets = query.n
    target = config.sensitive_index % n_buckets
    n_sensitive = int(math.floor(n * config.sensitive_fraction + 0.5))
    if n_buckets == 1 and n_sensitive != n:
        raise ValueError("a one-bucket query cannot hold non-sensitive devices")

    rng = _rng(config.seed, 0)
    sensitive = np.zeros(n, dtype=bool)
    sensitive[rng.permutation(n)[:n_sensitive]] = True
    others = np.array([i for i in range(n_buckets) if i != target], dtype=np.int64)
    truth_index = np.full(n, target, dtype=np.int64)
    if len(others):
        truth_index[~sensitive] = others[rng.integers(0, len(others), size=n - n_sensitive)]
    lows = np.array([b.lo for b in query.buckets], dtype=np.float64)
    phases = rng.integers(0, config.interval_ms, size=n, dtype=np.int64)
    tokens = rng.bytes(TOKEN_BYTES * n)
    return Population(lows[truth_index], truth_index, sensitive, phases, tokens)


@dataclass(frozen=True)
class WindowRecord:
    index: int
    ground_truth: tuple[int, ...]
    estimate: BatchEstimate
    relative_error: tuple[float | None, ...]

    @property
    def n_answers(self) -> int:
        return self.estimate.n_answers

    def to_record(self) -> dict:
        return {
            "window_index": self.index,
            "ground_truth": list(self.ground_truth),
            "estimate": self.estimate.to_record(),
            "relative_error": list(self.relative_error),
        }


@dataclass
class RunRecord:
    config: FleetConfig
    query: Query
    windows: list[WindowRecord] = field(default_factory=list)

    @property
    def sensitive_index(self) -> int:
        return self.config.sensitive_index % self.query.n

    def to_ndjson(self) -> str:
        return "".join(json.dumps(w.to_record(), separators=(",", ":")) + "\n" for w in self.windows)


def _window_record(index: int, truth_counts: np.ndarray, est: BatchEstimate) -> WindowRecord:
    gt = tuple(int(c) for c in truth_counts)
    if est.empty:
        errs = (None,) * len(gt)
    else:
        errs = tuple(
            relative_error(gt[i], e.y_raw) if gt[i] else None for i, e in enumerate(est.per_index)
        )
    return WindowRecord(index, gt, est, errs)


def sim_query(config: FleetConfig, query: Query) -> Query:
    """The query as seen by a simulated run: virtual clock starting at 0,
    one epoch per answer interval, ending with the run."""
    return dataclasses.replace(
        query,
        epoch_seconds=config.interval_ms / 1000,
        t_start=0,
        t_end=config.duration_ms,
    )


def estimate_memory(config: FleetConfig, query: Query, engine: str) -> int:
    n = config.n_devices
    if engine == "agents":
        return n * 6_000
    # expected firings per window plus slack for phase clustering
    per_window = int(n * config.window_ms / config.interval_ms * 1.1) + 1000
    per_device = 8 * 5 + TOKEN_BYTES
    per_answer = query.n * (8 * 2 + 3) + 200
    return n * per_device + per_window * per_answer


def run(
    config: FleetConfig,
    query: Query,
    engine: str = "auto",
    memory_limit: int = DEFAULT_MEMORY_LIMIT,
) -> RunRecord:
    """Simulate ``config.duration_seconds`` of virtual time."""
    config.check()
    if engine == "auto":
        engine = "agents" if config.n_devices <= AGENT_ENGINE_MAX_DEVICES else "vectorized"
    if engine not in ("agents", "vectorized"):
        raise ValueError(f"unknown engine {engine!r}")
    need = estimate_memory(config, query, engine)
    if need > memory_limit:
        raise CapacityError(need, memory_limit)
    q = sim_query(config, query)
    pop = generate_population(config, q)
    if engine == "agents":
        return _run_agents(config, q, pop)
    return _run_vectorized(config, q, pop)


def _firings(sorted_phases: np.ndarray, order: np.ndarray, config: FleetConfig, w: int):
    """Devices firing in window ``w``, as (device indices, epoch indices, times)."""
    W, I, D = config.window_ms, config.interval_ms, config.duration_ms
    lo_t, hi_t = w * W, min((w + 1) * W, D)
    devices, epochs, times = [], [], []
    for k in range(max(0, lo_t // I - 1), (hi_t - 1) // I + 1):
        a = np.searchsorted(sorted_phases, lo_t - k * I, side="left")
        b = np.searchsorted(sorted_phases, hi_t - k * I, side="left")
        if b > a:
            idx = order[a:b]
            devices.append(idx)
            epochs.append(np.full(b - a, k, dtype=np.int64))
            times.append(sorted_phases[a:b] + k * I)
    if not devices:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(devices), np.concatenate(epochs), np.concatenate(times)


def _run_vectorized(config: FleetConfig, query: Query, pop: Population) -> RunRecord:
    agg = Aggregator(config.window_ms)
    agg.register(query)
    params = query.params
    order = np.argsort(pop.phases_ms, kind="stable")
    sorted_phases = pop.phases_ms[order]
    record = RunRecord(config, query)
    eye = np.eye(query.n, dtype=np.uint8)

    for w in range(config.n_windows):
        rng = _rng(config.seed, 1, w)
        devices, epochs, times = _firings(sorted_phases, order, config, w)
        live = rng.random(len(devices)) >= config.churn_rate
        devices, epochs, times = devices[live], epochs[live], times[live]

        truthful = eye[pop.truth_index[devices]]
        bits = randomize_bits(truthful, params, rng)
        names = [
            pseudonym_for_epoch(pop.token(int(d)), query.query_id, int(e))
            for d, e in zip(devices, epochs)
        ]
        ok = agg.accept_bulk(query.query_id, epochs, names, bits, times)

        truth_counts = np.bincount(pop.truth_index[devices[ok]], minlength=query.n)
        (est,) = agg.advance((w + 1) * config.window_ms)
        record.windows.append(_window_record(w, truth_counts, est))
    return record


def _run_agents(config: FleetConfig, query: Query, pop: Population) -> RunRecord:
    agg = Aggregator(config.window_ms)
    agg.register(query)
    policy = DevicePolicy(epsilon_threshold_per_query=math.inf)
    W, I, D = config.window_ms, config.interval_ms, config.duration_ms
    churn_rng = _rng(config.seed, 3)

    agents = []
    pending = {}
    for i in range(len(pop)):
        state = DeviceState(f"dev-{i}", pop.token(i), rng_seed=[config.seed, 2, i])
        agent = DeviceAgent(state, policy)
        agent.ingest(query.sensor, float(pop.values[i]), 0)
        if not agent.offer(query, now=0):
            raise ValueError(f"device {i} rejected the simulation query")
        agents.append(agent)

    events = [(int(pop.phases_ms[i]), i) for i in range(len(pop))]
    heapq.heapify(events)
    record = RunRecord(config, query)
    truth_counts = np.zeros(query.n, dtype=np.int64)

    def close_until(t: int) -> None:
        nonlocal truth_counts
        for est in agg.advance(t):
            w = (est.window[0] - query.t_start) // W
            record.windows.append(_window_record(w, truth_counts, est))
            truth_counts = np.zeros(query.n, dtype=np.int64)

    while events and events[0][0] < D:
        t, i = heapq.heappop(events)
        close_until(t)
        heapq.heappush(events, (t + I, i))
        if churn_rng.random() < config.churn_rate:
            continue
        for sub in agents[i].tick(t):
            if agg.accept_answer(sub):
                truth_counts[pop.truth_index[i]] += 1
    close_until(config.n_windows * W)
    return record


# -- sweeps -------------------------------------------------------------------


@dataclass
class SweepRow:
    config: FleetConfig
    p: float
    q: float
    etas: list[float]
    details: list[dict]

    @property
    def median_eta(self) -> float:
        return float(np.median(self.etas)) if self.etas else math.nan

    @property
    def mean_eta(self) -> float:
        return float(np.mean(self.etas)) if self.etas else math.nan

    @property
    def std_eta(self) -> float:
        return float(np.std(self.etas)) if self.etas else math.nan

    @property
    def n_windows(self) -> int:
        return len(self.etas)


def derive_seed(master_seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([master_seed, *path]).generate_state(1)[0])


def sweep(
    configs: Sequence[FleetConfig] | Iterable[FleetConfig],
    query: Query,
    repetitions: int = 1,
    master_seed: int = 0,
    engine: str = "auto",
) -> list[SweepRow]:
    """Run each config ``repetitions`` times and summarize the relative
    error on the sensitive index over every non-empty window."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    for c, config in enumerate(configs):
        etas: list[float] = []
        details: list[dict] = []
        for r in range(repetitions):
            rec = run(config.replace(seed=derive_seed(master_seed, c, r)), query, engine=engine)
            s = rec.sensitive_index
            for win in rec.windows:
                eta = win.relative_error[s]
                if eta is None:
                    continue
                etas.append(eta)
                details.append({
                    "rep": r,
                    "window_index": win.index,
                    "n_answers": win.n_answers,
                    "y_true": win.ground_truth[s],
                    "y_est": win.estimate.per_index[s].y_raw,
                    "eta": eta,
                })
        rows.append(SweepRow(config, query.p, query.q, etas, details))
    return rows
