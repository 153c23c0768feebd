"""ReadOut System units."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .kernel import BusModel, Kernel, LinkModel
from .model import (
    HEADER_BYTES,
    EventId,
    FragmentStatus,
    Kind,
    Message,
    ProtocolError,
    ROBFragment,
    data_response,
    rob_map,
    substitute_fragment,
    unit_sources,
)

DEFAULT_ROB_CAPACITY = 2_621_440


@dataclass(slots=True)
class ROBBuffer:
    """Fragments of one readout link, keyed by l1id (stored as payload word counts)."""

    slot: int
    source_id: int = 0
    capacity_bytes: int = DEFAULT_ROB_CAPACITY
    store: dict[EventId, int] = field(default_factory=dict)
    occupancy_bytes: int = 0
    high_watermark: int = 0

    def insert(self, fragment: ROBFragment) -> bool:
        """Store a fragment; False (refused) if it would overflow the buffer."""
        return self.insert_words(fragment.l1id, fragment.payload_words)

    def insert_words(self, l1id: EventId, payload_words: int) -> bool:
        if l1id in self.store:
            raise ProtocolError(f"duplicate fragment l1id={l1id} slot={self.slot}")
        size = HEADER_BYTES + 4 * payload_words
        if self.occupancy_bytes + size > self.capacity_bytes:
            return False
        self.store[l1id] = payload_words
        self.occupancy_bytes += size
        if self.occupancy_bytes > self.high_watermark:
            self.high_watermark = self.occupancy_bytes
        return True

    def get(self, l1id: EventId) -> ROBFragment | None:
        words = self.store.get(l1id)
        if words is None:
            return None
        return ROBFragment(self.source_id, l1id, FragmentStatus.OK, words)

    def remove(self, l1id: EventId) -> bool:
        words = self.store.pop(l1id, None)
        if words is None:
            return False
        self.occupancy_bytes -= HEADER_BYTES + 4 * words
        return True


class ROSUnit:
    """One ROS unit: ``grouping_g`` ROBs behind an IOManager and an internal bus.

    Data requests are serviced strictly in arrival order, one at a time; each
    requested ROB costs one bus transfer. The IOManager per-message costs are
    charged by the kernel through the unit's link model.
    """

    def __init__(
        self,
        kernel: Kernel,
        unit_index: int,
        *,
        n_links: int,
        grouping_g: int,
        link: LinkModel | None = None,
        bus: BusModel | None = None,
        rob_capacity_bytes: int = DEFAULT_ROB_CAPACITY,
    ):
        self.kernel = kernel
        self.unit_index = unit_index
        self.node_id = f"ros{unit_index}"
        self.grouping_g = grouping_g
        self.sources = unit_sources(unit_index, n_links, grouping_g)
        self.robs = [
            ROBBuffer(slot, src, rob_capacity_bytes) for slot, src in enumerate(self.sources)
        ]
        self.bus = bus or BusModel()
        self.request_queue: deque[Message] = deque()
        self._bus_busy = False
        self.xoff_events = 0
        self.unknown_requests = 0
        self.clears_applied = 0
        self.requests = 0
        self.responses = 0
        self.response_bytes = 0
        self.inserted = 0
        self.queue_hwm = 0
        self.response_order: list[int] = []
        self.kernel.register(self.node_id, self.on_message, link)

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        if kind is Kind.FRAG_PUSH:
            self.insert_burst(msg.l1id, msg.body)
        elif kind is Kind.DATA_REQUEST:
            self.handle_data_request(msg)
        elif kind is Kind.CLEAR:
            self.handle_clear(msg.l1id)
        else:
            raise ProtocolError(f"{self.node_id}: unexpected {kind.value}")

    def rob_insert(self, fragment: ROBFragment) -> None:
        unit, slot = rob_map(fragment.source_id, self.grouping_g)
        if unit != self.unit_index:
            raise ProtocolError(f"{self.node_id}: source {fragment.source_id} belongs to unit {unit}")
        if self.robs[slot].insert(fragment):
            self.inserted += 1
        else:
            self.xoff_events += 1

    def insert_burst(self, l1id: EventId, words_per_slot) -> None:
        """One LVL1 accept: a fragment for every ROB of the unit, in slot order."""
        for rob, words in zip(self.robs, words_per_slot):
            if rob.insert_words(l1id, words):
                self.inserted += 1
            else:
                self.xoff_events += 1

    def handle_data_request(self, req: Message) -> None:
        self.requests += 1
        self.request_queue.append(req)
        depth = len(self.request_queue) + self._bus_busy
        if depth > self.queue_hwm:
            self.queue_hwm = depth
        if not self._bus_busy:
            self._start_next()

    def _start_next(self) -> None:
        req = self.request_queue.popleft()
        tag, slots = req.body
        if slots is None:
            slots = range(len(self.robs))
        fragments = []
        bus_us = 0
        for slot in slots:
            f = self.robs[slot].get(req.l1id) if slot < len(self.robs) else None
            if f is None:
                self.unknown_requests += 1
                f = substitute_fragment(self.sources.start + slot, req.l1id)
            else:
                bus_us += self.bus.transfer_us(f.wire_size)
            fragments.append(f)
        self._bus_busy = True
        self.kernel.schedule_in(bus_us, self._finish, req, tag, fragments)

    def _finish(self, req: Message, tag: int, fragments: list[ROBFragment]) -> None:
        resp = data_response(self.node_id, req.src, req.l1id, fragments, tag)
        self.responses += 1
        self.response_bytes += resp.payload_bytes
        self.response_order.append(tag)
        self.kernel.send(resp)
        self._bus_busy = False
        if self.request_queue:
            self._start_next()

    def handle_clear(self, ids: tuple[EventId, ...]) -> None:
        for l1id in ids:
            for rob in self.robs:
                rob.remove(l1id)
        self.clears_applied += len(ids)

    @property
    def occupancy_bytes(self) -> int:
        return sum(r.occupancy_bytes for r in self.robs)

    @property
    def max_rob_high_watermark(self) -> int:
        return max(r.high_watermark for r in self.robs)

    def counters(self) -> dict[str, int]:
        p = self.node_id
        return {
            f"{p}.requests": self.requests,
            f"{p}.response_bytes": self.response_bytes,
            f"{p}.occupancy_bytes": self.occupancy_bytes,
            f"{p}.rob_hwm_bytes": self.max_rob_high_watermark,
            f"{p}.queue_hwm": self.queue_hwm,
            f"{p}.xoff_events": self.xoff_events,
            f"{p}.unknown_requests": self.unknown_requests,
            f"{p}.clears_applied": self.clears_applied,
        }
