"""Packing equal-size pinned buffers into power-of-two allocator requests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass


def next_pow2(nbytes: int) -> int:
    if nbytes < 1:
        raise ValueError("request must be at least one byte")
    return 1 << (nbytes - 1).bit_length()


@dataclass(frozen=True)
class AllocRequest:
    logical_buffer_count: int
    request_bytes: int
    granted_bytes: int


@dataclass
class AllocPlan:
    requests: list
    total_granted: int
    waste: int

    def to_json(self) -> str:
        return json.dumps({"requests": [asdict(r) for r in self.requests],
                           "total_granted": self.total_granted, "waste": self.waste}, indent=2)


def plan_alloc(n: int, m: int) -> AllocPlan:
    """Group ``n`` buffers of ``m`` bytes into requests minimising granted bytes.

    DP over the number of buffers placed so far; among equal-cost groupings
    the one with fewer requests wins.
    """
    if not isinstance(n, int) or n < 1:
        raise ValueError(f"n must be an integer >= 1, got {n!r}")
    if not isinstance(m, int) or m < 1:
        raise ValueError(f"m must be an integer >= 1, got {m!r}")
    # best[j] = (granted bytes, request count, size of the last group)
    best = [(0, 0, 0)] + [None] * n
    for j in range(1, n + 1):
        for k in range(j, 0, -1):
            cost, count, _ = best[j - k]
            cand = (cost + next_pow2(k * m), count + 1, k)
            if best[j] is None or cand[:2] < best[j][:2]:
                best[j] = cand
    groups = []
    j = n
    while j:
        k = best[j][2]
        groups.append(k)
        j -= k
    groups.sort(reverse=True)
    requests = [AllocRequest(k, k * m, next_pow2(k * m)) for k in groups]
    total = best[n][0]
    return AllocPlan(requests, total, total - n * m)
