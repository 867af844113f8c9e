"""HBM-side expert cache and the CPU-to-GPU transfer channel.

The cache is a fixed pool of expert-sized slots managed with LRU eviction.
An entry is either resident (its transfer completed) or in flight (issued,
completion time known). In-flight entries can never be evicted; entries
pinned by the simulation (the layer currently executing) can't either.

The channel is a single FIFO pipe: transfers serialize, each occupying the
channel for exactly `t_xfer` seconds, so one issued at time `now` completes
at `max(now, busy_until) + t_xfer`.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .config import ExpertId

HIT = "hit"  # resident and arrived by request time
IN_FLIGHT = "in_flight"  # already issued, still on the channel
ISSUED = "issued"  # this request started the transfer


class CapacityDeadlock(RuntimeError):
    """A required expert load found every cache slot pinned or in flight."""


@dataclass
class TransferChannel:
    t_xfer: float
    busy_until: float = 0.0
    transfers_issued: int = 0

    def __post_init__(self):
        if self.t_xfer <= 0.0:
            raise ValueError(f"t_xfer must be positive, got {self.t_xfer}")

    def issue(self, now: float) -> float:
        """Queue one expert transfer; returns its completion time."""
        start = max(now, self.busy_until)
        self.busy_until = start + self.t_xfer
        self.transfers_issued += 1
        return self.busy_until


@dataclass(frozen=True)
class RequestResult:
    status: str  # HIT, IN_FLIGHT or ISSUED
    ready_time: float


@dataclass
class CacheStats:
    hits: int = 0  # request found the expert resident
    coalesced: int = 0  # request joined an in-flight transfer
    issued: int = 0  # request started a fresh transfer
    evictions: int = 0
    deferrals: int = 0  # speculative requests bounced for lack of a victim

    def total_requests(self) -> int:
        return self.hits + self.coalesced + self.issued


class HbmCache:
    """LRU cache of expert slots, keyed by (layer, expert) identity.

    `request` is the only load path: it coalesces onto an existing entry or
    evicts and issues a fresh transfer. Speculative requests (prefetch) defer
    instead of failing when no victim exists; required requests raise
    CapacityDeadlock.
    """

    def __init__(self, slots: int):
        if slots < 1:
            raise ValueError(f"cache needs at least 1 expert slot, got {slots}")
        self.slots = slots
        self._ready: OrderedDict[ExpertId, float] = OrderedDict()
        self._pins: set[ExpertId] = set()
        self.stats = CacheStats()

    # ------------------------------------------------------------------
    # introspection

    def __contains__(self, expert: ExpertId) -> bool:
        return expert in self._ready

    def __len__(self) -> int:
        return len(self._ready)

    def ready_time(self, expert: ExpertId) -> float:
        return self._ready[expert]

    def resident(self, expert: ExpertId, now: float) -> bool:
        return expert in self._ready and self._ready[expert] <= now

    def entries(self) -> list[ExpertId]:
        """Current contents in LRU-to-MRU order."""
        return list(self._ready)

    # ------------------------------------------------------------------
    # pinning

    def pin(self, expert: ExpertId) -> None:
        self._pins.add(expert)

    def unpin(self, expert: ExpertId) -> None:
        self._pins.discard(expert)

    def token_end(self) -> None:
        """Pins clear at token boundaries; the resident set carries over."""
        self._pins.clear()

    # ------------------------------------------------------------------
    # load path

    def request(
        self,
        expert: ExpertId,
        now: float,
        channel: TransferChannel,
        speculative: bool = False,
    ) -> RequestResult | None:
        """Ensure `expert` is resident or in flight; report how and by when.

        Returns None only for a deferred speculative request. A required
        request that cannot find a slot raises CapacityDeadlock.
        """
        ready = self._ready.get(expert)
        if ready is not None:
            self._ready.move_to_end(expert)
            if ready <= now:
                self.stats.hits += 1
                return RequestResult(HIT, ready)
            self.stats.coalesced += 1
            return RequestResult(IN_FLIGHT, ready)
        if len(self._ready) >= self.slots and not self._evict_one(now):
            if speculative:
                self.stats.deferrals += 1
                return None
            raise CapacityDeadlock(
                f"no evictable slot for {expert}: all {self.slots} slots "
                f"are pinned or in flight at t={now:.6f}"
            )
        ready = channel.issue(now)
        self._ready[expert] = ready
        self.stats.issued += 1
        return RequestResult(ISSUED, ready)

    def _evict_one(self, now: float) -> bool:
        for expert, ready in self._ready.items():
            if expert in self._pins or ready > now:
                continue
            del self._ready[expert]
            self.stats.evictions += 1
            return True
        return False

    def evict_lru(self, n: int, now: float | None = None) -> list[ExpertId]:
        """Force out the n least-recently-used unpinned, settled entries.

        `now=None` treats every transfer as settled (only pins block).
        Raises ValueError when fewer than n entries are evictable.
        """
        if now is None:
            now = float("inf")
        victims: list[ExpertId] = []
        for expert, ready in self._ready.items():
            if len(victims) == n:
                break
            if expert in self._pins or ready > now:
                continue
            victims.append(expert)
        if len(victims) < n:
            raise ValueError(
                f"asked to evict {n} experts but only {len(victims)} are unpinned"
            )
        for expert in victims:
            del self._ready[expert]
            self.stats.evictions += 1
        return victims
