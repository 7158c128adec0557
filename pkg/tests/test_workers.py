"""Tests for the shared worker pool."""

import threading

import pytest

from app import workers
from app.startup import startup


def test_parallel_map_keeps_input_order():
    """Results come back in input order with several threads."""
    startup(4)
    assert workers.get_pool() is not None
    assert workers.parallel_map(lambda x: x * x, range(50)) == [x * x for x in range(50)]


def test_single_thread_runs_inline():
    """With one thread there is no pool and work runs on the caller's thread."""
    startup(1)
    assert workers.get_pool() is None
    assert workers.parallel_map(lambda _: threading.current_thread().name, [0, 1]) == [
        threading.current_thread().name
    ] * 2


def test_thread_count_must_be_positive():
    with pytest.raises(ValueError):
        workers.configure_pool(0)
