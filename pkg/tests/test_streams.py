import numpy as np
import pytest

from kolmo_parametrix.streams import (block_generator, block_sizes, map_blocks, resolve_threads,
                                      summarize)


def test_block_sizes():
    assert block_sizes(10, 4) == [4, 4, 2]
    assert block_sizes(8, 4) == [4, 4]


def test_streams_are_keyed():
    a = block_generator(1, "x", 0).random(4)
    assert np.array_equal(a, block_generator(1, "x", 0).random(4))
    assert not np.array_equal(a, block_generator(1, "x", 1).random(4))
    assert not np.array_equal(a, block_generator(1, "y", 0).random(4))
    with pytest.raises(ValueError):
        block_generator(-1, "x", 0)


def test_map_blocks_thread_invariant():
    def f(b, m):
        return block_generator(7, "t", b).standard_normal(m)

    one = np.concatenate(map_blocks(f, 1000, 64, threads=1))
    many = np.concatenate(map_blocks(f, 1000, 64, threads=5))
    assert np.array_equal(one, many)


def test_thread_env(monkeypatch):
    monkeypatch.setenv("KOLMO_PARAMETRIX_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2


def test_summarize():
    est = summarize([1.0, 2.0, 3.0])
    assert est.value == 2.0 and est.stderr == pytest.approx(1 / np.sqrt(3))
    with pytest.raises(FloatingPointError):
        summarize([1.0, np.inf])
