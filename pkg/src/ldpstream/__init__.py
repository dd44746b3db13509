"""Local-differential-privacy stream analytics with two-coin randomized response."""

from .aggregator import Aggregator, Batch, BatchEstimate, accept_answer, close_batch
from .device import (
    DeviceAgent,
    DevicePolicy,
    DeviceState,
    Submission,
    execute_epoch,
    ingest_sample,
    pseudonym_for_epoch,
    sanity_check,
)
from .fleet import FleetConfig, RunRecord, generate_population, run, sweep
from .privacy import (
    EstimateResult,
    PrivacyCost,
    RandomizationParams,
    epsilon_of,
    estimate_true_count,
    estimator_stddev,
    params_for_target,
    randomize_answer,
    randomize_bit,
    randomize_bits,
    relative_error,
)
from .query import (
    Bucket,
    Query,
    encode_value,
    parse_query,
    serialize_query,
    speed_buckets,
    validate_query,
)

__version__ = "0.1.0"
