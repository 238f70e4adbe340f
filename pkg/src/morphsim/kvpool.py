"""Elastic paged KV-cache block pool."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Hashable

__all__ = ["KvConfig", "KvBlockPool", "Deferred", "PoolError", "kv_block_bytes"]


class PoolError(RuntimeError):
    pass


def kv_block_bytes(num_layers: int, kv_heads: int, head_dim: int, block_tokens: int,
                   bytes_per_value: int = 2) -> int:
    """Bytes of one block: K and V, every layer, 16-bit values by default."""
    return 2 * num_layers * kv_heads * head_dim * bytes_per_value * block_tokens


@dataclass(frozen=True)
class KvConfig:
    block_tokens: int = 16
    block_bytes: int = 8 * 1024 * 1024
    static_capacity_blocks: int = 1024

    def __post_init__(self):
        for name in ("block_tokens", "block_bytes", "static_capacity_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def blocks_for(self, tokens: int) -> int:
        return math.ceil(tokens / self.block_tokens)


@dataclass(frozen=True)
class Deferred:
    """Result of a detach that could not remove every block immediately."""
    pending: int


class KvBlockPool:
    """Block-granular KV pool with elastic capacity.

    ``capacity == static + attached`` always holds, and every block id is
    either free or owned by exactly one request.  Detaches that cannot be
    satisfied from the free list stay pending and absorb released blocks
    before those blocks return to the free list.
    """

    def __init__(self, config: KvConfig):
        self.config = config
        self.static_capacity_blocks = config.static_capacity_blocks
        self.attached_extra_blocks = 0
        self.pending_detach = 0
        self._free = deque(range(config.static_capacity_blocks))
        self._next_id = config.static_capacity_blocks
        self._maps: dict[Hashable, list[int]] = {}
        self._tokens: dict[Hashable, int] = {}

    # -- inspection ------------------------------------------------------
    @property
    def capacity_blocks(self) -> int:
        return self.static_capacity_blocks + self.attached_extra_blocks

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    @property
    def used_blocks(self) -> int:
        return self.capacity_blocks - len(self._free)

    @property
    def usage(self) -> float:
        return self.used_blocks / self.capacity_blocks

    @property
    def kv_bytes(self) -> int:
        return self.capacity_blocks * self.config.block_bytes

    def __contains__(self, req_id) -> bool:
        return req_id in self._maps

    def blocks_of(self, req_id) -> list[int]:
        return list(self._maps[req_id])

    def tokens_of(self, req_id) -> int:
        return self._tokens[req_id]

    def holders(self) -> list:
        """Request ids in admission order."""
        return list(self._maps)

    def blocks_needed(self, req_id, new_tokens: int) -> int:
        have = len(self._maps.get(req_id, ()))
        return self.config.blocks_for(self._tokens.get(req_id, 0) + new_tokens) - have

    # -- allocation ------------------------------------------------------
    def admit(self, req_id) -> None:
        if req_id in self._maps:
            raise PoolError(f"request {req_id!r} already admitted")
        self._maps[req_id] = []
        self._tokens[req_id] = 0

    def alloc_for_tokens(self, req_id, new_tokens: int) -> list[int] | None:
        """Grow ``req_id`` by ``new_tokens``; all-or-nothing.

        Returns the newly allocated block ids, or ``None`` (pool untouched)
        when the free list is too short.
        """
        if req_id not in self._maps:
            raise PoolError(f"unknown request {req_id!r}")
        if new_tokens < 1:
            raise ValueError(f"new_tokens must be >= 1, got {new_tokens}")
        need = self.blocks_needed(req_id, new_tokens)
        if need > len(self._free):
            return None
        got = [self._free.popleft() for _ in range(need)]
        self._maps[req_id].extend(got)
        self._tokens[req_id] += new_tokens
        return got

    def release(self, req_id) -> int:
        if req_id not in self._maps:
            raise PoolError(f"unknown request {req_id!r}")
        blocks = self._maps.pop(req_id)
        del self._tokens[req_id]
        self._return(blocks)
        return len(blocks)

    def _return(self, blocks: list[int]) -> None:
        for b in blocks:
            if self.pending_detach:
                self.pending_detach -= 1
                self.attached_extra_blocks -= 1
            else:
                self._free.append(b)

    # -- elastic capacity --------------------------------------------------
    def attach_blocks(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"attach count must be positive, got {n}")
        self._free.extend(range(self._next_id, self._next_id + n))
        self._next_id += n
        self.attached_extra_blocks += n
        return self.capacity_blocks

    def detach_blocks(self, n: int) -> int | Deferred:
        """Shrink capacity by ``n``; returns new capacity or ``Deferred(pending)``."""
        if n < 1:
            raise ValueError(f"detach count must be positive, got {n}")
        detachable = self.attached_extra_blocks - self.pending_detach
        if n > detachable:
            raise PoolError(f"cannot detach {n} blocks, only {detachable} attached")
        now = min(n, len(self._free))
        for _ in range(now):
            self._free.pop()
        self.attached_extra_blocks -= now
        self.pending_detach += n - now
        if n > now:
            return Deferred(self.pending_detach)
        return self.capacity_blocks

    # -- preemption --------------------------------------------------------
    def preempt_victim(self, policy: str = "LIFO",
                       eligible: Callable[[Hashable], bool] | None = None):
        """Free the blocks of the most recently admitted eligible holder.

        Returns its id, or ``None`` when no eligible holder has blocks.
        """
        if policy != "LIFO":
            raise ValueError(f"unsupported preemption policy {policy!r}")
        for req_id in reversed(self._maps):
            if self._maps[req_id] and (eligible is None or eligible(req_id)):
                self.release(req_id)
                return req_id
        return None

    # -- auditing ----------------------------------------------------------
    def check_invariants(self) -> None:
        allocated = [b for blocks in self._maps.values() for b in blocks]
        if len(self._free) + len(allocated) != self.capacity_blocks:
            raise AssertionError(
                f"pool ledger unbalanced: free={len(self._free)} allocated={len(allocated)} "
                f"capacity={self.capacity_blocks}"
            )
        ids = allocated + list(self._free)
        if len(set(ids)) != len(ids):
            raise AssertionError("block id appears twice")
        if self.pending_detach > self.attached_extra_blocks:
            raise AssertionError("pending detach exceeds attached blocks")
        for req_id, blocks in self._maps.items():
            if len(blocks) != self.config.blocks_for(self._tokens[req_id]):
                raise AssertionError(f"request {req_id!r} holds {len(blocks)} blocks for {self._tokens[req_id]} tokens")

    def snapshot(self) -> tuple:
        return (
            self.static_capacity_blocks,
            self.attached_extra_blocks,
            self.pending_detach,
            tuple(self._free),
            self._next_id,
            tuple((k, tuple(v)) for k, v in self._maps.items()),
            tuple(self._tokens.items()),
        )
