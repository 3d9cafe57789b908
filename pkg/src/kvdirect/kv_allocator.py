"""Paged KV-cache block pool with all-or-nothing allocation.

Placement takes blocks from the longest free runs first (lowest start on
ties) and hands them out in ascending order, so a request's blocks tend to
be physically adjacent and its transfers coalesce.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Hashable


class AllocationImpossible(ValueError):
    """The request can never fit in this pool."""


def blocks_needed(token_count: int, block_tokens: int) -> int:
    if block_tokens <= 0:
        raise ValueError("block_tokens must be positive")
    return -(-token_count // block_tokens)


@dataclass(frozen=True)
class Allocation:
    request_id: Hashable
    block_ids: tuple[int, ...]


class BlockPool:
    def __init__(self, total_blocks: int, block_tokens: int):
        if total_blocks <= 0 or block_tokens <= 0:
            raise ValueError("pool needs positive total_blocks and block_tokens")
        self.total_blocks = total_blocks
        self.block_tokens = block_tokens
        self.owner: dict[int, Hashable] = {}
        self._blocks: dict[Hashable, list[int]] = {}
        # Free space as maximal runs [start, end), indexed from both ends, plus a
        # lazily pruned max-heap keyed on run length.
        self._run_end: dict[int, int] = {0: total_blocks}
        self._run_start: dict[int, int] = {total_blocks: 0}
        self._heap: list[tuple[int, int, int]] = [(-total_blocks, 0, total_blocks)]
        self._free = total_blocks

    @property
    def free_count(self) -> int:
        return self._free

    @property
    def used_count(self) -> int:
        return self.total_blocks - self._free

    def free_set(self) -> set[int]:
        out: set[int] = set()
        for start, end in self._run_end.items():
            out.update(range(start, end))
        return out

    def free_runs(self) -> list[tuple[int, int]]:
        return sorted(self._run_end.items())

    def blocks_of(self, request_id: Hashable) -> tuple[int, ...]:
        return tuple(self._blocks.get(request_id, ()))

    def holds(self, request_id: Hashable) -> bool:
        return request_id in self._blocks

    def allocate_all_or_nothing(self, request_id: Hashable, n: int) -> Allocation | None:
        """Reserve exactly ``n`` blocks for ``request_id`` or change nothing.

        Returns None when the pool is currently short of blocks; raises
        AllocationImpossible when ``n`` exceeds the pool itself.
        """
        if n <= 0:
            raise ValueError("n must be positive")
        if n > self.total_blocks:
            raise AllocationImpossible(
                f"request {request_id!r} needs {n} blocks, pool has {self.total_blocks}"
            )
        if request_id in self._blocks:
            raise ValueError(f"request {request_id!r} already holds blocks")
        if n > self._free:
            return None
        taken = self._take(n)
        self._assign(request_id, taken)
        return Allocation(request_id, tuple(taken))

    def allocate_append(self, request_id: Hashable) -> int | None:
        """Grow an existing allocation by one block; None if the pool is empty."""
        if request_id not in self._blocks:
            raise ValueError(f"request {request_id!r} holds no allocation to append to")
        if self._free == 0:
            return None
        (block,) = self._take(1)
        self._assign(request_id, [block])
        return block

    def release(self, request_id: Hashable) -> int:
        blocks = self._blocks.pop(request_id, None)
        if not blocks:
            return 0
        for b in blocks:
            del self.owner[b]
            self._give_back(b)
        return len(blocks)

    def check_invariants(self) -> None:
        free = self.free_set()
        owned = set(self.owner)
        assert len(free) == self._free
        assert not free & owned, "block both free and owned"
        assert free | owned == set(range(self.total_blocks)), "pool lost blocks"
        count = 0
        for rid, blocks in self._blocks.items():
            assert len(set(blocks)) == len(blocks)
            assert all(self.owner[b] == rid for b in blocks)
            count += len(blocks)
        assert count == len(owned)
        for start, end in self._run_end.items():
            assert self._run_start[end] == start
            assert start not in self._run_start, "adjacent runs not merged"

    def _assign(self, request_id: Hashable, blocks: list[int]) -> None:
        self._blocks.setdefault(request_id, []).extend(blocks)
        for b in blocks:
            self.owner[b] = request_id

    def _take(self, n: int) -> list[int]:
        taken: list[int] = []
        while len(taken) < n:
            neg_len, start, end = heapq.heappop(self._heap)
            if self._run_end.get(start) != end:
                continue
            del self._run_end[start]
            del self._run_start[end]
            k = min(n - len(taken), end - start)
            taken.extend(range(start, start + k))
            if start + k < end:
                self._add_run(start + k, end)
        self._free -= n
        taken.sort()
        return taken

    def _give_back(self, b: int) -> None:
        start, end = b, b + 1
        left = self._run_start.pop(start, None)
        if left is not None:
            del self._run_end[left]
            start = left
        right = self._run_end.pop(end, None)
        if right is not None:
            del self._run_start[right]
            end = right
        self._add_run(start, end)
        self._free += 1

    def _add_run(self, start: int, end: int) -> None:
        self._run_end[start] = end
        self._run_start[end] = start
        heapq.heappush(self._heap, (start - end, start, end))
        if len(self._heap) > 64 + 4 * len(self._run_end):
            self._heap = [(s - e, s, e) for s, e in self._run_end.items()]
            heapq.heapify(self._heap)
