import dataclasses
import math
import queue

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldpstream.device import (
    DeviceAgent,
    DevicePolicy,
    DeviceState,
    Submission,
    execute_epoch,
    ingest_sample,
    parse_submission,
    pseudonym_for_epoch,
    sanity_check,
)
from ldpstream.errors import NotSubscribedError, QueryExpiredError, QueryParseError
from ldpstream.privacy import epsilon_of

T0 = 1_000_000  # speed_query.t_start
EPOCH = 10_000


def make_state(seed=0, token=b"token-0"):
    return DeviceState("dev", token, rng_seed=seed)


def permissive():
    return DevicePolicy(epsilon_threshold_per_query=math.inf)


# -- sanity_check -----------------------------------------------------------------


def test_accepts_cheap_query(speed_query):
    assert epsilon_of(speed_query.params).epsilon_per_query == pytest.approx(2 * math.log(3))
    assert sanity_check(speed_query, DevicePolicy(3.0), now=T0)


def test_rejects_blacklisted_sensor(speed_query):
    q = dataclasses.replace(speed_query, sensor="microphone")
    d = sanity_check(q, DevicePolicy(3.0, sensor_blacklist={"microphone"}), now=T0)
    assert not d and d.reason == "sensor_blacklisted"


def test_rejects_blacklisted_analyst(speed_query):
    d = sanity_check(speed_query, DevicePolicy(3.0, analyst_blacklist={"analyst-1"}), now=T0)
    assert d.reason == "analyst_blacklisted"


def test_rejects_expensive_query(speed_query):
    q = dataclasses.replace(speed_query, p=0.99)
    assert epsilon_of(q.params).epsilon_per_query == pytest.approx(2 * math.log(199))
    d = sanity_check(q, DevicePolicy(3.0), now=T0)
    assert d.reason == "privacy_cost"


def test_rejects_invalid_query(speed_query):
    d = sanity_check(dataclasses.replace(speed_query, p=0), DevicePolicy(3.0), now=T0)
    assert d.reason == "invalid_query"


def test_budget_reserved_for_query_lifetime(speed_query):
    q = dataclasses.replace(speed_query, t_end=T0 + 5 * EPOCH)  # 5 epochs
    cost = 5 * 2 * math.log(3)
    state = make_state()
    policy = DevicePolicy(3.0, cumulative_budget_per_analyst=cost + 1e-9)
    assert sanity_check(q, policy, state, now=T0)
    assert state.spent_budget["analyst-1"] == pytest.approx(cost)
    # a second query from the same analyst no longer fits
    q2 = dataclasses.replace(q, query_id="speed-2")
    assert sanity_check(q2, policy, state, now=T0).reason == "budget_exhausted"
    # re-offering the accepted query is idempotent
    assert sanity_check(q, policy, state, now=T0)
    assert state.spent_budget["analyst-1"] == pytest.approx(cost)


@given(
    budget=st.floats(1, 200),
    lifetimes=st.lists(st.integers(1, 20), min_size=1, max_size=15),
    ps=st.lists(st.floats(0.05, 0.9), min_size=15, max_size=15),
)
def test_budget_conservation(budget, lifetimes, ps):
    from ldpstream.query import Query, speed_buckets

    state = make_state()
    policy = DevicePolicy(100.0, cumulative_budget_per_analyst=budget)
    reserved = 0.0
    for i, (epochs, p) in enumerate(zip(lifetimes, ps)):
        q = Query(f"q{i}", "a", "speed", speed_buckets(), p, 0.5, 10, T0, T0 + epochs * EPOCH)
        if sanity_check(q, policy, state, now=T0):
            reserved += epsilon_of(q.params).epsilon_per_query * epochs
    assert reserved <= budget + 1e-9
    assert state.spent_budget.get("a", 0.0) == pytest.approx(reserved)


# -- ingest_sample ------------------------------------------------------------------


def test_ingest_keeps_latest_only():
    s = make_state()
    ingest_sample(s, "speed", 15, 100)
    assert s.latest_samples["speed"] == (15, 100)
    ingest_sample(s, "speed", 20, 101)
    assert s.latest_samples["speed"] == (20, 101)
    ingest_sample(s, "speed", 18, 99)
    assert s.latest_samples["speed"] == (20, 101)
    assert s.dropped_samples == 1


# -- execute_epoch ------------------------------------------------------------------


def accepted_state(query, seed=0, token=b"token-0"):
    s = make_state(seed, token)
    assert sanity_check(query, permissive(), s, now=query.t_start)
    return s


def test_truthful_passthrough_at_p1(speed_query):
    q = dataclasses.replace(speed_query, p=1.0)
    s = accepted_state(q)
    ingest_sample(s, "speed", 15, T0)
    sub = execute_epoch(s, q, T0 + 1)
    assert sub.bits == tuple(1 if i == 2 else 0 for i in range(22))
    assert sub.epoch_index == 0 and sub.sent_at == T0 + 1
    assert sub.pseudonym == pseudonym_for_epoch(b"token-0", q.query_id, 0)


def test_one_submission_per_epoch(speed_query):
    s = accepted_state(speed_query)
    ingest_sample(s, "speed", 15, T0)
    assert execute_epoch(s, speed_query, T0 + 10) is not None
    assert execute_epoch(s, speed_query, T0 + 9_000) is None
    assert execute_epoch(s, speed_query, T0 + EPOCH) is not None


@given(times=st.lists(st.integers(0, 10 * EPOCH - 1), max_size=60))
def test_uniqueness_under_reordered_calls(times):
    from ldpstream.query import Query, speed_buckets

    q = Query("q", "a", "speed", speed_buckets(), 0.5, 0.5, 10, T0, T0 + 10 * EPOCH)
    s = accepted_state(q)
    ingest_sample(s, "speed", 42, T0)
    subs = [execute_epoch(s, q, T0 + t) for t in times]
    epochs = [x.epoch_index for x in subs if x is not None]
    assert len(epochs) == len(set(epochs)) == len({t // EPOCH for t in times})


def test_expiry_unsubscribes(speed_query):
    q = dataclasses.replace(speed_query, t_end=T0 + EPOCH)
    s = accepted_state(q)
    with pytest.raises(QueryExpiredError):
        execute_epoch(s, q, T0 + EPOCH)
    assert q.query_id not in s.accepted_queries
    with pytest.raises(NotSubscribedError):
        execute_epoch(s, q, T0 + 1)


def test_unaccepted_query_refused(speed_query):
    with pytest.raises(NotSubscribedError):
        execute_epoch(make_state(), speed_query, T0)


def test_no_sample_submits_zero_vector_by_default(speed_query):
    q = dataclasses.replace(speed_query, p=1.0)
    s = accepted_state(q)
    assert execute_epoch(s, q, T0).bits == (0,) * 22


def test_no_sample_skip_policy(speed_query):
    s = accepted_state(speed_query)
    policy = DevicePolicy(math.inf, skip_without_sample=True)
    assert execute_epoch(s, speed_query, T0, policy) is None
    ingest_sample(s, "speed", 3, T0)
    assert execute_epoch(s, speed_query, T0, policy) is not None


class SecondCoinOnly:
    """Random source whose first-coin draws are always tails."""

    def __init__(self, seed):
        self.inner = np.random.default_rng(seed)
        self.calls = 0

    def random(self, size=None):
        self.calls += 1
        if self.calls % 2 == 1:
            return np.full(size, 0.999999) if size is not None else 0.999999
        return self.inner.random(size)


@pytest.mark.parametrize("a,b", [(15, 250), (0, 99), (15, -5)])
def test_submission_independent_of_truth_on_second_coin_path(speed_query, a, b):
    out = []
    for value in (a, b):
        s = accepted_state(speed_query)
        s.rng = SecondCoinOnly(123)
        ingest_sample(s, "speed", value, T0)
        out.append(execute_epoch(s, speed_query, T0 + 5).to_json())
    assert out[0] == out[1]


# -- pseudonyms ---------------------------------------------------------------------


def test_pseudonym_deterministic():
    assert pseudonym_for_epoch(b"k", "q", 3) == pseudonym_for_epoch(b"k", "q", 3)


def test_pseudonym_long_token():
    assert pseudonym_for_epoch(b"x" * 100, "q", 0) != pseudonym_for_epoch(b"x" * 101, "q", 0)


def test_pseudonyms_collision_free_over_a_million():
    seen = set()
    for t in range(1000):
        token = t.to_bytes(16, "big")
        for e in range(1000):
            seen.add(pseudonym_for_epoch(token, "q", e))
    assert len(seen) == 1_000_000


# -- submission wire format -------------------------------------------------------


def test_submission_round_trip():
    sub = Submission("q", 4, "abc", (0, 1, 1), 1234)
    assert parse_submission(sub.to_json()) == sub
    assert list(sub.to_dict()) == ["query_id", "epoch_index", "pseudonym", "bits", "sent_at"]


@pytest.mark.parametrize(
    "doc",
    [
        "[]",
        '{"query_id": "q", "epoch_index": 0, "pseudonym": "x", "bits": [0]}',
        '{"query_id": "q", "epoch_index": 0, "pseudonym": "x", "bits": [0], "sent_at": 1, "extra": 1}',
        '{"query_id": "q", "epoch_index": "0", "pseudonym": "x", "bits": [0], "sent_at": 1}',
        '{"query_id": "q", "epoch_index": 0, "pseudonym": "x", "bits": "01", "sent_at": 1}',
        "{nope",
    ],
)
def test_submission_parse_errors(doc):
    with pytest.raises(QueryParseError):
        parse_submission(doc)


# -- DeviceAgent --------------------------------------------------------------------


def test_agent_pushes_into_channel(speed_query):
    outbox = queue.Queue()
    agent = DeviceAgent(make_state(), permissive(), outbox.put)
    assert agent.offer(speed_query, now=T0)
    agent.ingest("speed", 15, T0)
    assert len(agent.tick(T0 + 1)) == 1
    assert agent.tick(T0 + 2) == []
    assert outbox.get_nowait().query_id == speed_query.query_id
    assert outbox.empty()


def test_agent_drops_expired_queries(speed_query):
    q = dataclasses.replace(speed_query, t_end=T0 + EPOCH)
    agent = DeviceAgent(make_state(), permissive())
    agent.offer(q, now=T0)
    assert agent.tick(T0 + EPOCH) == []
    assert not agent.state.accepted_queries
