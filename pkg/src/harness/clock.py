"""
Clock sources, in float seconds
"""
import time
from typing import Protocol

from src.errors import InvalidInput


class Clock(Protocol):
    def now(self) -> float: ...


class SystemClock:
    def now(self) -> float:
        return time.time()


class ManualClock:
    """Clock that only moves when told to; scenarios and tests drive it"""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise InvalidInput("clock cannot move backwards")
        self._now += seconds
        return self._now
