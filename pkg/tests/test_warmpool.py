from __future__ import annotations

from collections import OrderedDict

import pytest
from hypothesis import given, strategies as st

from hpcfaas.warmpool import WarmPool


class LRUOracle:
    """The obvious reference: an ordered dict scanned from the newest end."""

    def __init__(self, budget):
        self.budget = budget
        self.items = OrderedDict()

    def used(self):
        return sum(mem for _, mem in self.items.values())

    def insert(self, image, mem, sid):
        if mem > self.budget:
            return [sid]
        evicted = []
        while self.used() + mem > self.budget:
            evicted.append(self.items.popitem(last=False)[0])
        self.items[sid] = (image, mem)
        return evicted

    def acquire(self, image):
        for sid in reversed(list(self.items)):
            if self.items[sid][0] == image:
                del self.items[sid]
                return sid
        return None


ops = st.lists(st.tuples(st.sampled_from(["insert", "acquire", "shed"]),
                         st.sampled_from(["a", "b", "c"]), st.integers(0, 300)),
               max_size=80)


@given(st.integers(0, 1000), ops)
def test_matches_lru_oracle(budget, script):
    pool, oracle = WarmPool(budget), LRUOracle(budget)
    sid = 0
    for op, image, mem in script:
        if op == "insert":
            sid += 1
            got = [e.sandbox_id for e in pool.insert(image, mem, sid)]
            assert got == oracle.insert(image, mem, sid)
        elif op == "acquire":
            entry = pool.acquire(image)
            assert (entry.sandbox_id if entry else None) == oracle.acquire(image)
        else:
            freed = sum(e.memory_mb for e in pool.shed(mem))
            expected = 0
            while expected < mem and oracle.items:
                expected += oracle.items.popitem(last=False)[1][1]
            assert freed == expected
        assert pool.used_mb == oracle.used() <= budget
        assert len(pool) == len(oracle.items)


def test_counts_hits_and_misses():
    pool = WarmPool(100)
    pool.insert("a", 10, 1)
    assert pool.acquire("a").sandbox_id == 1
    assert pool.acquire("a") is None
    assert (pool.hits, pool.misses) == (1, 1)
    pool.insert("a", 10, 2)
    pool.insert("b", 10, 3)
    assert pool.images() == {"a", "b"} and pool.contains("b")
    assert [e.sandbox_id for e in pool.drain()] == [2, 3]
    assert pool.used_mb == 0


def test_negative_budget_rejected():
    with pytest.raises(ValueError):
        WarmPool(-1)
