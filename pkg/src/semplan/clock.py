"""Clocks used for planning budgets and injected simulator latency.

``RealClock`` reads ``time.perf_counter`` and really sleeps. ``VirtualClock``
is a cost model: nothing sleeps, every charged delay advances a counter, so
time-budgeted runs become reproducible.
"""

from __future__ import annotations

import time


class RealClock:
    virtual = False

    def now(self) -> float:
        return time.perf_counter()

    def wait(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    virtual = True

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def wait(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot wait a negative duration")
        self._t += seconds
