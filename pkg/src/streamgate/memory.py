"""Perception memory and cognition pooling.

The memory is single-writer. ``snapshot`` copies references under a lock so a
reader on another thread never sees a half-finished append.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .epfe import PerceptionToken

STRATEGIES = ("uniform", "last_k", "stride")


class OrderingError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


@dataclass(frozen=True)
class PoolingPolicy:
    strategy: str = "uniform"
    capacity: int = 16

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown pooling strategy {self.strategy!r}")
        if self.capacity < 1:
            raise ValueError("pooling capacity must be >= 1")


class PerceptionMemory:
    def __init__(self, max_tokens: int | None = None):
        # max_tokens turns the store into a ring buffer (benchmark harness only)
        self._tokens: deque[PerceptionToken] = deque(maxlen=max_tokens)
        self.last_trigger_frame: int | None = None
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._tokens)

    @property
    def tokens(self) -> list[PerceptionToken]:
        return self.snapshot()[0]

    def append(self, token: PerceptionToken):
        with self._lock:
            if self._tokens and token.frame_index <= self._tokens[-1].frame_index:
                raise OrderingError(
                    f"frame {token.frame_index} appended after frame {self._tokens[-1].frame_index}")
            self._tokens.append(token)

    def mark_trigger(self, frame_index: int):
        with self._lock:
            self.last_trigger_frame = frame_index

    def snapshot(self) -> tuple[list[PerceptionToken], int | None]:
        with self._lock:
            return list(self._tokens), self.last_trigger_frame

    def window(self) -> list[PerceptionToken]:
        tokens, last = self.snapshot()
        return trigger_window(tokens, last)


def memory_append(mem: PerceptionMemory, token: PerceptionToken) -> PerceptionMemory:
    mem.append(token)
    return mem


def trigger_window(tokens: Sequence[PerceptionToken], last_trigger_frame: int | None) -> list[PerceptionToken]:
    if last_trigger_frame is None:
        return list(tokens)
    # frame indices are increasing, so scan back from the end
    i = len(tokens)
    while i > 0 and tokens[i - 1].frame_index > last_trigger_frame:
        i -= 1
    return list(tokens[i:])


def pool_indices(window: int, policy: PoolingPolicy) -> list[int]:
    """Positions (0-based, ascending) selected from a window of ``window`` tokens."""
    k = policy.capacity
    if window <= k:
        return list(range(window))
    if policy.strategy == "last_k":
        return list(range(window - k, window))
    if policy.strategy == "uniform":
        return [(j * window) // k - 1 for j in range(1, k + 1)]
    step = math.ceil(window / k)
    picked = list(range(window - 1, -1, -step))[:k]
    return picked[::-1]


def pool(mem: PerceptionMemory | Sequence[PerceptionToken], policy: PoolingPolicy,
         last_trigger_frame: int | None = None) -> list[PerceptionToken]:
    if isinstance(mem, PerceptionMemory):
        tokens, last_trigger_frame = mem.snapshot()
    else:
        tokens = list(mem)
    if not tokens:
        raise EmptyPoolError("cannot pool from an empty perception memory")
    win = trigger_window(tokens, last_trigger_frame)
    if not win:
        raise EmptyPoolError(f"no perception tokens after trigger frame {last_trigger_frame}")
    return [win[i] for i in pool_indices(len(win), policy)]
