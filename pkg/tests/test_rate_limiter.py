import pytest
from hypothesis import given, strategies as st

from replaystore.errors import InvalidArgumentError
from replaystore.rate_limiter import (
    DBL_MAX, RateLimiter, RateLimiterConfig, make_min_size, make_queue,
    make_sample_to_insert_ratio)


def drive(limiter, ops):
    """Apply 'i'/'s' ops that the limiter admits; return how many were refused."""
    refused = 0
    size = 0
    for op in ops:
        if op == "i" and limiter.can_insert(size):
            limiter.record_insert()
            size += 1
        elif op == "s" and limiter.can_sample(size):
            limiter.record_sample()
        else:
            refused += 1
    return refused


def test_blocked_at_max_diff_then_one_sample_admits():
    lim = RateLimiter(RateLimiterConfig(0, 1.5, -3.0, 2.0))
    assert lim.can_insert()
    lim.record_insert()                 # diff 1.5
    assert not lim.can_insert()         # 3.0 would exceed max_diff
    lim.record_sample()                 # diff 0.5
    assert lim.can_insert()


def test_min_size_gates_sampling_only():
    lim = RateLimiter(make_min_size(3))
    assert lim.config.min_diff == -DBL_MAX and lim.config.max_diff == DBL_MAX
    for size in range(3):
        assert not lim.can_sample(size)
        lim.record_insert()
    assert lim.can_sample(3)
    for _ in range(1000):
        lim.record_sample()
    assert lim.can_sample(3) and lim.can_insert(3)


def test_queue_admits_exactly_capacity_unconsumed():
    lim = RateLimiter(make_queue(3))
    assert not lim.can_sample(0)
    for _ in range(3):
        assert lim.can_insert()
        lim.record_insert()
    assert not lim.can_insert()
    lim.record_sample()
    assert lim.can_insert()
    lim.record_sample()
    lim.record_sample()
    assert not lim.can_sample(3)


def test_ratio_fills_to_min_size_without_sampling():
    cfg = make_sample_to_insert_ratio(min_size=100, samples_per_insert=4.0, error_buffer=40)
    assert (cfg.min_diff, cfg.max_diff) == (360.0, 440.0)
    lim = RateLimiter(cfg)
    for size in range(100):
        assert lim.can_insert(size) and not lim.can_sample(size)
        lim.record_insert()
    assert lim.can_sample(100)


@given(st.lists(st.sampled_from("is"), max_size=400),
       st.integers(0, 20), st.floats(0.25, 8), st.floats(1, 50))
def test_ratio_cursor_stays_in_bounds(ops, min_size, spi, buffer):
    buffer = max(buffer, (spi + 1) / 2)
    lim = RateLimiter(make_sample_to_insert_ratio(min_size, spi, buffer))
    cfg = lim.config
    size = 0
    for op in ops:
        if op == "i" and lim.can_insert(size):
            lim.record_insert()
            size += 1
        elif op == "s" and lim.can_sample(size):
            lim.record_sample()
        if lim.samples:
            assert cfg.min_diff <= lim.diff
        assert lim.diff <= max(cfg.max_diff, spi * min(lim.inserts, 1))


@given(st.integers(0, 10), st.floats(0.25, 8), st.floats(1, 50))
def test_ratio_never_deadlocks(min_size, spi, buffer):
    """Some operation is always admissible."""
    buffer = max(buffer, (spi + 1) / 2)
    lim = RateLimiter(make_sample_to_insert_ratio(min_size, spi, buffer))
    size = 0
    for step in range(300):
        if lim.can_sample(size) and (step % 2 or not lim.can_insert(size)):
            lim.record_sample()
        elif lim.can_insert(size):
            lim.record_insert()
            size += 1
        else:
            pytest.fail(f"deadlock at inserts={lim.inserts} samples={lim.samples}")


def test_invalid_configs():
    with pytest.raises(InvalidArgumentError):
        RateLimiterConfig(0, 1.0, 5.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        RateLimiterConfig(-1, 1.0, 0, 1)
    with pytest.raises(InvalidArgumentError):
        RateLimiterConfig(0, 0.0, 0, 1)
    with pytest.raises(InvalidArgumentError):
        make_sample_to_insert_ratio(1, 1.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        make_queue(0)
    with pytest.raises(InvalidArgumentError, match="too small"):
        make_sample_to_insert_ratio(0, 3.0, 1.0)


def test_config_dict_forms():
    assert RateLimiterConfig.from_dict({"type": "queue", "queue_size": 5}) == make_queue(5)
    ratio = {"type": "sample_to_insert_ratio", "min_size": 10,
             "samples_per_insert": 2.0, "error_buffer": 5}
    assert RateLimiterConfig.from_dict(ratio) == make_sample_to_insert_ratio(10, 2.0, 5)
    cfg = RateLimiterConfig(3, 1.5, -2.0, 7.0)
    assert RateLimiterConfig.from_dict(cfg.to_dict()) == cfg
