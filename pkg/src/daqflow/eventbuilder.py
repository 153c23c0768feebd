"""Event building: the DataFlow Manager and the Sub-Farm Inputs."""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .kernel import Kernel, LinkModel, Timer
from .model import (
    PSEUDO_SOURCE,
    AssemblyError,
    Completeness,
    EventId,
    FullEvent,
    Kind,
    Message,
    ProtocolError,
    ROBFragment,
    assemble_full_event,
    clear,
    control,
    data_request,
    ef_event,
    least_loaded,
    substitute_fragment,
)

REJECTED = "rejected"
BUILT = "built"
TIMED_OUT = "timed_out"


class DFM:
    """Assigns accepted events to the least-loaded SFI and batches clears."""

    node_id = "dfm"

    def __init__(
        self,
        kernel: Kernel,
        sfi_ids: Sequence[str],
        clear_targets: Sequence[str],
        *,
        clear_batch_max: int = 300,
        clear_flush_timeout_us: int = 100_000,
        build_timeout_us: int = 1_000_000,
        link: LinkModel | None = None,
    ):
        self.kernel = kernel
        self.sfi_ids = list(sfi_ids)
        self.clear_targets = list(clear_targets)
        self.clear_batch_max = clear_batch_max
        self.clear_flush_timeout_us = clear_flush_timeout_us
        self.build_timeout_us = build_timeout_us
        self.sfi_load = [0] * len(self.sfi_ids)
        self.pending_builds: dict[EventId, tuple[int, Timer]] = {}
        self.clear_batch: list[EventId] = []
        self._flush_timer: Timer | None = None
        self.disposition: dict[EventId, str] = {}
        self.disposed_at: dict[EventId, int] = {}
        self.flushed: Counter = Counter()
        self.batch_sizes: list[int] = []
        self.assigned = 0
        self.built = 0
        self.rejected = 0
        self.lost_builds = 0
        self.duplicates = 0
        self.stale_eoe = 0
        self.max_imbalance = 0
        self.on_done: list[Callable[[EventId, str], None]] = []
        kernel.register(self.node_id, self.on_message, link)

    def on_message(self, msg: Message) -> None:
        if msg.kind is Kind.L2_DECISION:
            self.dfm_on_decision(msg.l1id, msg.body)
        elif msg.kind is Kind.EOE:
            self.dfm_on_eoe(msg.l1id)
        else:
            raise ProtocolError(f"dfm: unexpected {msg.kind.value}")

    def dfm_on_decision(self, l1id: EventId, accept: bool) -> None:
        if l1id in self.disposition or l1id in self.pending_builds:
            self.duplicates += 1
            return
        if not accept:
            self.rejected += 1
            self._dispose(l1id, REJECTED)
            return
        sfi = least_loaded(self.sfi_load)
        self.sfi_load[sfi] += 1
        spread = max(self.sfi_load) - min(self.sfi_load)
        if spread > self.max_imbalance:
            self.max_imbalance = spread
        self.assigned += 1
        timer = self.kernel.schedule_in(self.build_timeout_us, self.dfm_on_build_timeout, l1id)
        self.pending_builds[l1id] = (sfi, timer)
        self.kernel.send(control(Kind.EB_ASSIGN, self.node_id, self.sfi_ids[sfi], l1id))

    def dfm_on_eoe(self, l1id: EventId) -> None:
        entry = self.pending_builds.pop(l1id, None)
        if entry is None:
            self.stale_eoe += 1
            return
        sfi, timer = entry
        timer.cancel()
        self.sfi_load[sfi] -= 1
        self.built += 1
        self._dispose(l1id, BUILT)

    def dfm_on_build_timeout(self, l1id: EventId) -> None:
        sfi, _ = self.pending_builds.pop(l1id)
        self.sfi_load[sfi] -= 1
        self.lost_builds += 1
        self._dispose(l1id, TIMED_OUT)

    def _dispose(self, l1id: EventId, how: str) -> None:
        self.disposition[l1id] = how
        self.disposed_at[l1id] = self.kernel.now
        self.clear_batch.append(l1id)
        if len(self.clear_batch) >= self.clear_batch_max:
            self.dfm_flush_clears()
        elif self._flush_timer is None:
            self._flush_timer = self.kernel.schedule_in(self.clear_flush_timeout_us, self._timer_flush)
        for cb in self.on_done:
            cb(l1id, how)

    def _timer_flush(self) -> None:
        self._flush_timer = None
        if self.clear_batch:
            self.dfm_flush_clears()

    def dfm_flush_clears(self) -> None:
        if self._flush_timer is not None:
            self._flush_timer.cancel()
            self._flush_timer = None
        batch = self.clear_batch
        self.clear_batch = []
        self.batch_sizes.append(len(batch))
        self.flushed.update(batch)
        for dst in self.clear_targets:
            self.kernel.send(clear(self.node_id, dst, batch))

    def counters(self) -> dict[str, int]:
        return {
            "dfm.assigned": self.assigned,
            "dfm.built": self.built,
            "dfm.rejected": self.rejected,
            "dfm.lost_builds": self.lost_builds,
            "dfm.duplicates": self.duplicates,
            "dfm.stale_eoe": self.stale_eoe,
            "dfm.clear_batches": len(self.batch_sizes),
            "dfm.max_imbalance": self.max_imbalance,
        }


@dataclass(slots=True)
class _Build:
    t_start: int
    awaited: dict[str, int] = field(default_factory=dict)  # responder -> attempts so far
    current_tag: dict[str, int] = field(default_factory=dict)
    fragments: list[ROBFragment] = field(default_factory=list)
    pseudo: ROBFragment | None = None
    ingest_bytes: int = 0


class SFI:
    """Collects every fragment of an assigned event under a credit window.

    One credit is one outstanding DATA_REQUEST; the window is shared by all
    events the SFI is building. A request that times out is retried once,
    then the responder's data is substituted.
    """

    def __init__(
        self,
        kernel: Kernel,
        sfi_index: int,
        responders: Sequence[str],
        *,
        n_links: int,
        dfm_id: str = "dfm",
        pseudo_ros_id: str = "pros",
        max_credits: int = 8,
        frag_timeout_us: int = 10_000,
        hold_us: int = 0,
        ef_enabled: bool = False,
        strict: bool = True,
        link: LinkModel | None = None,
    ):
        self.kernel = kernel
        self.sfi_index = sfi_index
        self.node_id = f"sfi{sfi_index}"
        self.responders = list(responders)
        self.n_links = n_links
        self.dfm_id = dfm_id
        self.pseudo_ros_id = pseudo_ros_id
        self.max_credits = max_credits
        self.frag_timeout_us = frag_timeout_us
        self.hold_us = hold_us
        self.ef_enabled = ef_enabled
        self.strict = strict
        self.building: dict[EventId, _Build] = {}
        self._seen: set[EventId] = set()
        self._requests: deque[tuple[EventId, str]] = deque()
        self._outstanding: dict[int, tuple[EventId, str, Timer]] = {}
        self._tag = 0
        self.max_in_flight = 0
        self.built_queue: deque[FullEvent] = deque()
        self.parked_pulls: deque[str] = deque()
        self.build_times: list[int] = []
        self.build_bytes: list[int] = []
        self.duplicates = 0
        self.retries = 0
        self.missing = 0
        self.stale_responses = 0
        self.partial = 0
        self.assembly_errors = 0
        self.discarded = 0
        self.shipped = 0
        self.ef_accepted = 0
        kernel.register(self.node_id, self.on_message, link)

    @property
    def credits_in_flight(self) -> int:
        return len(self._outstanding)

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        if kind is Kind.DATA_RESPONSE:
            self.on_response(msg)
        elif kind is Kind.EB_ASSIGN:
            self.sfi_build(msg.l1id)
        elif kind is Kind.EF_PULL:
            self.on_pull(msg.src)
        elif kind is Kind.EF_VERDICT:
            self.ef_accepted += 1
        else:
            raise ProtocolError(f"{self.node_id}: unexpected {kind.value}")

    def sfi_build(self, l1id: EventId) -> None:
        if l1id in self._seen:
            self.duplicates += 1
            return
        self._seen.add(l1id)
        if self.hold_us:
            self.kernel.schedule_in(self.hold_us, self._start, l1id)
        else:
            self._start(l1id)

    def _start(self, l1id: EventId) -> None:
        b = _Build(self.kernel.now)
        for r in self.responders:
            b.awaited[r] = 0
            self._requests.append((l1id, r))
        self.building[l1id] = b
        self._pump()

    def _pump(self) -> None:
        while self._requests and len(self._outstanding) < self.max_credits:
            l1id, r = self._requests.popleft()
            b = self.building.get(l1id)
            if b is None or r not in b.awaited:
                continue
            tag = self._tag
            self._tag += 1
            b.awaited[r] += 1
            b.current_tag[r] = tag
            timer = self.kernel.schedule_in(self.frag_timeout_us, self._timeout, tag)
            self._outstanding[tag] = (l1id, r, timer)
            self.kernel.send(data_request(self.node_id, r, l1id, None, tag))
        if len(self._outstanding) > self.max_in_flight:
            self.max_in_flight = len(self._outstanding)

    def on_response(self, msg: Message) -> None:
        tag, fragments = msg.body
        entry = self._outstanding.pop(tag, None)
        if entry is not None:
            entry[2].cancel()
        b = self.building.get(msg.l1id)
        r = msg.src
        if b is None or r not in b.awaited:
            self.stale_responses += 1
            self._pump()
            return
        if entry is None:
            # late answer to a timed-out attempt; retire the retry still in flight
            retry = self._outstanding.pop(b.current_tag[r], None)
            if retry is not None:
                retry[2].cancel()
        del b.awaited[r]
        b.ingest_bytes += msg.wire_size
        if r == self.pseudo_ros_id:
            b.pseudo = fragments[0]
        else:
            b.fragments.extend(fragments)
        if not b.awaited:
            self._complete(msg.l1id, b)
        self._pump()

    def _timeout(self, tag: int) -> None:
        l1id, r, _ = self._outstanding.pop(tag)
        b = self.building[l1id]
        if b.awaited[r] < 2:
            self.retries += 1
            self._requests.appendleft((l1id, r))
        else:
            self.missing += 1
            del b.awaited[r]
            if not b.awaited:
                self._complete(l1id, b)
        self._pump()

    def _complete(self, l1id: EventId, b: _Build) -> None:
        del self.building[l1id]
        pseudo = b.pseudo or substitute_fragment(PSEUDO_SOURCE, l1id)
        try:
            event = assemble_full_event(l1id, b.fragments, pseudo, range(self.n_links))
        except AssemblyError:
            if self.strict:
                raise
            self.assembly_errors += 1
            return
        if event.completeness is Completeness.PARTIAL:
            self.partial += 1
        self.build_times.append(self.kernel.now)
        self.build_bytes.append(b.ingest_bytes)
        self.kernel.send(control(Kind.EOE, self.node_id, self.dfm_id, l1id))
        if self.ef_enabled:
            self.built_queue.append(event)
            if self.parked_pulls:
                self._ship(self.parked_pulls.popleft())
        else:
            self.discarded += 1

    def on_pull(self, ef_id: str) -> None:
        if self.built_queue:
            self._ship(ef_id)
        else:
            self.parked_pulls.append(ef_id)

    def _ship(self, ef_id: str) -> None:
        event = self.built_queue.popleft()
        self.shipped += 1
        self.kernel.send(ef_event(self.node_id, ef_id, event), lossy=False)

    def counters(self) -> dict[str, int]:
        p = self.node_id
        return {
            f"{p}.built": len(self.build_times),
            f"{p}.partial": self.partial,
            f"{p}.retries": self.retries,
            f"{p}.missing": self.missing,
            f"{p}.duplicates": self.duplicates,
            f"{p}.stale_responses": self.stale_responses,
            f"{p}.max_in_flight": self.max_in_flight,
            f"{p}.shipped": self.shipped,
            f"{p}.queued": len(self.built_queue),
            f"{p}.ef_accepted": self.ef_accepted,
        }
