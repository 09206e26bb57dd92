"""Round-Robin baseline with a fixed service quantum.

Each cycle visits the class queues in ascending class id. A visit takes the
head of that class's FIFO queue and grants ``min(quantum, remaining)``
seconds on the class pad that frees earliest (lowest index on ties). The
remaining demand drops by a full quantum per grant; an entry whose remaining
demand is still positive re-enters the back of its queue once the grant
ends. A request's wait is the start of its final grant minus its release.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .metrics import Schedule
from .scenario import Scenario

ARRIVAL, REQUEUE = 0, 1


@dataclass
class _ClassLane:
    pads: list[int]  # global pad indices
    pending: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    queue: deque = field(default_factory=deque)
    remaining_work: int = 0

    def admit(self, t: int) -> None:
        while self.pending and self.pending[0][0] <= t:
            ready, _, _, idx, rem = heapq.heappop(self.pending)
            self.queue.append((idx, rem, ready))


@dataclass
class RrState:
    cycle_index: int
    lanes: dict[int, _ClassLane]
    pad_free_times: list[int]
    clock: int = 0


@dataclass(frozen=True)
class Grant:
    request_index: int
    pad: int
    start: int
    length: int


def rr_schedule(
    scenario: Scenario, quantum: int = 30, trace: list[Grant] | None = None
) -> tuple[Schedule, np.ndarray]:
    if quantum <= 0:
        raise ValueError("quantum must be positive")
    arr = scenario.arrays()
    n = scenario.n
    lanes: dict[int, _ClassLane] = {}
    for row, cid in enumerate(scenario.pad_weights.class_ids):
        lanes[row] = _ClassLane(pads=list(range(arr.pad_offset[row], arr.pad_offset[row + 1])))
    seq = 0
    for idx, r in enumerate(scenario.requests):
        lane = lanes[int(arr.class_index[idx])]
        heapq.heappush(lane.pending, (r.release_time, ARRIVAL, seq, idx, r.service_demand))
        lane.remaining_work += 1
        seq += 1

    state = RrState(0, lanes, [0] * int(arr.pad_offset[-1]))
    starts = np.zeros(n, dtype=np.int64)
    pads = np.zeros(n, dtype=np.int64)
    seps = arr.separations
    last_bin = seps.shape[1] - 1

    while any(l.remaining_work for l in lanes.values()):
        for row in sorted(lanes):
            lane = lanes[row]
            if not lane.remaining_work:
                continue
            pad = min(lane.pads, key=lambda k: (state.pad_free_times[k], k))
            t = state.pad_free_times[pad]
            lane.admit(t)
            if not lane.queue:
                t = max(t, lane.pending[0][0])
                lane.admit(t)
            idx, rem, ready = lane.queue.popleft()
            # an idle jump on another pad may have admitted entries later than this pad frees
            t = max(t, ready)
            g = min(quantum, rem)
            sep = int(seps[row, min(t // arr.bin_width, last_bin)])
            state.pad_free_times[pad] = t + g + sep
            state.clock = max(state.clock, t)
            if trace is not None:
                trace.append(Grant(idx, pad, t, g))
            rem -= quantum
            if rem > 0:
                heapq.heappush(lane.pending, (t + g, REQUEUE, seq, idx, rem))
                seq += 1
            else:
                starts[idx] = t
                pads[idx] = pad
                lane.remaining_work -= 1
        state.cycle_index += 1

    waits = starts - arr.release
    ids = np.array([r.id for r in scenario.requests], dtype=np.int64)
    return Schedule(ids, starts, pads), waits
