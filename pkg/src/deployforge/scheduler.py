"""Budgeted dispatch arbiter for concurrent build attempts.

A single synchronized object owns the queues and the budget. Workers only
interact through submit / next_dispatch / complete, so every accounting
transition is serialized and the safety invariant (in-use never exceeds
total, in any dimension) holds at each point of any interleaving.

Long builds get their own small slot pool: an item whose expected duration
exceeds the long-tail threshold (a multiple of the running median of
completed durations, floored) can only occupy long_tail slots, which keeps
slow outliers from starving the short-build throughput.
"""

from __future__ import annotations

import bisect
import itertools
import threading
from dataclasses import dataclass, field, replace
from typing import Any

from .errors import ContractViolation, QueueCapacityError

PRIORITY_CLASSES = ("retry", "normal", "long_tail")

DEFAULT_LONG_TAIL_FLOOR_S = 30 * 60.0
DEFAULT_LONG_TAIL_MULTIPLIER = 6.0

# First-attempt cost guesses keyed by primary language; compiled ecosystems
# get bigger, slower defaults.
DEFAULT_COST_TABLE: dict[str, dict[str, float]] = {
    "Python": {"cpu_slots": 1, "memory_bytes": 2 * 1024**3, "expected_duration_s": 240.0},
    "R": {"cpu_slots": 1, "memory_bytes": 2 * 1024**3, "expected_duration_s": 300.0},
    "Jupyter Notebook": {"cpu_slots": 1, "memory_bytes": 2 * 1024**3, "expected_duration_s": 240.0},
    "JavaScript": {"cpu_slots": 1, "memory_bytes": 2 * 1024**3, "expected_duration_s": 180.0},
    "C": {"cpu_slots": 2, "memory_bytes": 4 * 1024**3, "expected_duration_s": 600.0},
    "C++": {"cpu_slots": 2, "memory_bytes": 4 * 1024**3, "expected_duration_s": 900.0},
    "Fortran": {"cpu_slots": 2, "memory_bytes": 4 * 1024**3, "expected_duration_s": 600.0},
    "Rust": {"cpu_slots": 2, "memory_bytes": 4 * 1024**3, "expected_duration_s": 900.0},
    "Java": {"cpu_slots": 2, "memory_bytes": 4 * 1024**3, "expected_duration_s": 600.0},
    "unknown": {"cpu_slots": 1, "memory_bytes": 2 * 1024**3, "expected_duration_s": 300.0},
}


def estimate_cost(primary_language: str) -> "Cost":
    row = DEFAULT_COST_TABLE.get(primary_language, DEFAULT_COST_TABLE["unknown"])
    return Cost(int(row["cpu_slots"]), int(row["memory_bytes"]), float(row["expected_duration_s"]))


@dataclass(frozen=True)
class Cost:
    cpu_slots: int
    memory_bytes: int
    expected_duration_s: float

    def __post_init__(self) -> None:
        if self.cpu_slots <= 0 or self.memory_bytes <= 0 or self.expected_duration_s <= 0:
            raise ValueError("estimated cost must be positive in every dimension")


@dataclass(frozen=True)
class WorkItem:
    item_id: str
    cost: Cost
    priority: str = "normal"
    enqueue_seq: int = 0
    payload: Any = None

    def __post_init__(self) -> None:
        if self.priority not in PRIORITY_CLASSES:
            raise ValueError(f"unknown priority class {self.priority!r}")


@dataclass
class BudgetState:
    total_cpu_slots: int
    total_memory_bytes: int
    long_tail_slots: int
    in_use_cpu_slots: int = 0
    in_use_memory_bytes: int = 0
    long_tail_in_use: int = 0

    def __post_init__(self) -> None:
        if self.total_cpu_slots <= 0 or self.total_memory_bytes <= 0:
            raise ValueError("budget totals must be positive")
        if self.long_tail_slots < 0:
            raise ValueError("long_tail_slots must be >= 0")

    def check(self) -> None:
        if not (0 <= self.in_use_cpu_slots <= self.total_cpu_slots):
            raise ContractViolation("cpu accounting out of range")
        if not (0 <= self.in_use_memory_bytes <= self.total_memory_bytes):
            raise ContractViolation("memory accounting out of range")
        if not (0 <= self.long_tail_in_use <= self.long_tail_slots):
            raise ContractViolation("long-tail slot accounting out of range")


@dataclass
class SchedulerStats:
    submitted: int = 0
    rejected: int = 0
    dispatched: int = 0
    completed: int = 0
    retries: int = 0
    durations: list[float] = field(default_factory=list)  # kept sorted

    def record_duration(self, duration_s: float) -> None:
        bisect.insort(self.durations, duration_s)

    def median_duration(self) -> float | None:
        n = len(self.durations)
        if n == 0:
            return None
        mid = n // 2
        if n % 2 == 1:
            return self.durations[mid]
        return (self.durations[mid - 1] + self.durations[mid]) / 2.0


class Scheduler:
    """The dispatch arbiter. Safe to drive from multiple threads."""

    def __init__(
        self,
        budget: BudgetState,
        queue_cap: int = 10_000,
        long_tail_floor_s: float = DEFAULT_LONG_TAIL_FLOOR_S,
        long_tail_multiplier: float = DEFAULT_LONG_TAIL_MULTIPLIER,
    ):
        self._budget = budget
        self._queue_cap = queue_cap
        self._floor = long_tail_floor_s
        self._multiplier = long_tail_multiplier
        self._lock = threading.RLock()
        self._seq = itertools.count()
        self._queues: dict[str, list[WorkItem]] = {c: [] for c in PRIORITY_CLASSES}
        self._in_flight: dict[str, WorkItem] = {}
        self._retried: set[str] = set()
        self.stats = SchedulerStats()

    # -- queries ------------------------------------------------------

    @property
    def budget(self) -> BudgetState:
        return self._budget

    def queue_length(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def in_flight_count(self) -> int:
        with self._lock:
            return len(self._in_flight)

    def idle(self) -> bool:
        with self._lock:
            return not self._in_flight and self.queue_length() == 0

    def long_tail_threshold_s(self) -> float:
        med = self.stats.median_duration()
        if med is None:
            return self._floor
        return max(self._multiplier * med, self._floor)

    def is_long_tail(self, item: WorkItem) -> bool:
        return item.cost.expected_duration_s > self.long_tail_threshold_s()

    # -- protocol -----------------------------------------------------

    def submit(self, item_id: str, cost: Cost, priority: str = "normal",
               payload: Any = None) -> WorkItem:
        with self._lock:
            if self.queue_length() >= self._queue_cap:
                self.stats.rejected += 1
                raise QueueCapacityError(f"queue cap {self._queue_cap} reached")
            item = WorkItem(item_id, cost, priority, next(self._seq), payload)
            self._queues[priority].append(item)
            self.stats.submitted += 1
            return item

    def _fits(self, item: WorkItem) -> bool:
        b = self._budget
        return (b.in_use_cpu_slots + item.cost.cpu_slots <= b.total_cpu_slots
                and b.in_use_memory_bytes + item.cost.memory_bytes <= b.total_memory_bytes)

    def _reclassify_tail(self) -> None:
        threshold = self.long_tail_threshold_s()
        for cls in ("retry", "normal"):
            still = []
            for item in self._queues[cls]:
                if item.cost.expected_duration_s > threshold:
                    moved = replace(item, priority="long_tail")
                    bisect.insort(self._queues["long_tail"], moved,
                                  key=lambda it: it.enqueue_seq)
                else:
                    still.append(item)
            self._queues[cls] = still

    def next_dispatch(self) -> WorkItem | None:
        """Oldest fitting item from the highest-priority eligible class."""
        with self._lock:
            self._reclassify_tail()
            for cls in ("retry", "normal"):
                for i, item in enumerate(self._queues[cls]):
                    if self._fits(item):
                        del self._queues[cls][i]
                        self._dispatch(item)
                        return item
            if self._budget.long_tail_in_use < self._budget.long_tail_slots:
                for i, item in enumerate(self._queues["long_tail"]):
                    if self._fits(item):
                        del self._queues["long_tail"][i]
                        self._dispatch(item, long_tail=True)
                        return item
            return None

    def _dispatch(self, item: WorkItem, long_tail: bool = False) -> None:
        self._budget.in_use_cpu_slots += item.cost.cpu_slots
        self._budget.in_use_memory_bytes += item.cost.memory_bytes
        if long_tail:
            self._budget.long_tail_in_use += 1
        self._budget.check()
        self._in_flight[item.item_id] = item
        self.stats.dispatched += 1

    def complete(self, item_id: str, duration_s: float,
                 failure_category: str | None = None) -> WorkItem | None:
        """Release the item's budget; returns the retry item when one is queued.

        A resource-category failure earns exactly one retry at retry
        priority with a doubled (budget-capped) memory estimate.
        """
        with self._lock:
            item = self._in_flight.pop(item_id, None)
            if item is None:
                raise ContractViolation(f"completing item {item_id!r} that is not in flight")
            self._budget.in_use_cpu_slots -= item.cost.cpu_slots
            self._budget.in_use_memory_bytes -= item.cost.memory_bytes
            if item.priority == "long_tail":
                self._budget.long_tail_in_use -= 1
            self._budget.check()
            self.stats.completed += 1
            self.stats.record_duration(duration_s)

            if failure_category == "resource" and item_id not in self._retried:
                self._retried.add(item_id)
                doubled = min(item.cost.memory_bytes * 2, self._budget.total_memory_bytes)
                retry_cost = Cost(item.cost.cpu_slots, doubled, item.cost.expected_duration_s)
                self.stats.retries += 1
                return self.submit(item_id, retry_cost, priority="retry", payload=item.payload)
            return None
