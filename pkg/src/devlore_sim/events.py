"""Deterministic discrete-event loop."""

import heapq


class StepLimitExceeded(RuntimeError):
    pass


class EventLoop:
    def __init__(self, step_limit=10_000_000):
        self.now = 0
        self.step_limit = step_limit
        self.processed = 0
        self._queue = []
        self._seq = 0

    def schedule(self, delay, fn, *args):
        if delay < 0:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._queue, (self.now + delay, self._seq, fn, args))
        self._seq += 1

    def __len__(self):
        return len(self._queue)

    def run(self):
        while self._queue:
            if self.processed >= self.step_limit:
                raise StepLimitExceeded(f"more than {self.step_limit} events")
            tick, _, fn, args = heapq.heappop(self._queue)
            self.now = tick
            self.processed += 1
            fn(*args)
