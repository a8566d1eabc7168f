"""LRU pool of idle sandboxes kept resident in spare node memory."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Optional


@dataclass
class PoolEntry:
    sandbox_id: int
    image_ref: str
    memory_mb: int
    handle: Any = None


class WarmPool:
    """Budgeted LRU of warm sandboxes.

    Entries are handed out with ``acquire`` (removing them from the pool
    while busy) and handed back with ``insert``.  Evicted entries are
    returned to the caller, who owns killing the process.
    """

    def __init__(self, budget_mb: int):
        if budget_mb < 0:
            raise ValueError("budget must be non-negative")
        self.budget_mb = budget_mb
        self._lock = threading.Lock()
        self._entries: OrderedDict = OrderedDict()  # sandbox_id -> PoolEntry, LRU first
        self.used_mb = 0
        self.hits = 0
        self.misses = 0

    def _evict_lru(self) -> PoolEntry:
        _, entry = self._entries.popitem(last=False)
        self.used_mb -= entry.memory_mb
        return entry

    def insert(self, image_ref: str, memory_mb: int, sandbox_id: int, handle=None) -> list:
        """Retain a sandbox; returns every entry evicted to stay in budget."""
        entry = PoolEntry(sandbox_id, image_ref, memory_mb, handle)
        with self._lock:
            if memory_mb > self.budget_mb:
                return [entry]
            evicted = []
            while self.used_mb + memory_mb > self.budget_mb:
                evicted.append(self._evict_lru())
            self._entries[sandbox_id] = entry
            self.used_mb += memory_mb
            return evicted

    def acquire(self, image_ref: str) -> Optional[PoolEntry]:
        """Take the most recently used warm sandbox for ``image_ref``."""
        with self._lock:
            for sid in reversed(self._entries):
                entry = self._entries[sid]
                if entry.image_ref == image_ref:
                    del self._entries[sid]
                    self.used_mb -= entry.memory_mb
                    self.hits += 1
                    return entry
            self.misses += 1
            return None

    def contains(self, image_ref: str) -> bool:
        with self._lock:
            return any(e.image_ref == image_ref for e in self._entries.values())

    def shed(self, target_free_mb: int) -> list:
        """Evict LRU entries until ``target_free_mb`` is freed or the pool is empty."""
        with self._lock:
            evicted = []
            freed = 0
            while freed < target_free_mb and self._entries:
                entry = self._evict_lru()
                freed += entry.memory_mb
                evicted.append(entry)
            return evicted

    def drain(self) -> list:
        with self._lock:
            entries = list(self._entries.values())
            self._entries.clear()
            self.used_mb = 0
            return entries

    def images(self) -> set:
        with self._lock:
            return {e.image_ref for e in self._entries.values()}

    def __len__(self):
        with self._lock:
            return len(self._entries)
