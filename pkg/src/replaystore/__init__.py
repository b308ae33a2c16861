"""Experience replay storage: rate-limited tables over chunked tensor storage, served over TCP."""

from replaystore.chunks import Chunk, ChunkStore, Codec
from replaystore.client import Client, ReplaySample, RetryPolicy, Sampler, ServerPool, Writer, WriterConfig
from replaystore.errors import (
    CancelledError, DeadlineExceededError, InternalError, InvalidArgumentError, NotFoundError,
    ReplayError, ResourceExhaustedError, SignatureMismatch, TransportError)
from replaystore.rate_limiter import (
    RateLimiter, RateLimiterConfig, make_min_size, make_queue, make_sample_to_insert_ratio)
from replaystore.server import Server, ServerConfig
from replaystore.service import ReplayService
from replaystore.table import Item, SampledItem, StatsExtension, Table, TableConfig, TableExtension

__version__ = "0.1.0"
