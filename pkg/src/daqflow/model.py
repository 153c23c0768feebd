"""Domain types shared by every DataFlow component.

Wire-size accounting (all sizes in bytes):

    fragment      = 6 header words * 4 + 4 * payload_words
    full event    = 24 + sum(fragment wire sizes)      (pseudo-ROS fragment included)
    message       = 16-byte envelope + payload_bytes

Payload sizes per message kind:

    FRAG_PUSH, DATA_RESPONSE   sum of carried fragment wire sizes
    ROI_INPUT, ROI_ASSIGN      4 + sum over items of (4 + 4 * len(rob_ids))
    DATA_REQUEST               8 + 4 * number of explicitly listed slots (ALL lists none)
    L2_DECISION, EB_ASSIGN,
    EOE, EF_VERDICT            8
    L2_RESULT                  size of the LVL2 result record
    CLEAR                      4 per listed event id
    EF_PULL                    4
    EF_EVENT                   full event wire size
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

ATLAS_LINKS = 1628
HEADER_WORDS = 6
HEADER_BYTES = HEADER_WORDS * 4
ENVELOPE_BYTES = 16
DEFAULT_FRAGMENT_WORDS = 230
# Source id carried by the pseudo-ROS fragment; sorts after every real link.
PSEUDO_SOURCE = 0x00FF0000

EventId = int


class ConfigError(ValueError):
    """Invalid configuration value or topology."""


class MalformedROI(ValueError):
    pass


class ProtocolError(RuntimeError):
    """A message sequence that only a protocol bug can produce."""


class AssemblyError(ProtocolError):
    """Duplicate source in an event; only a protocol bug can cause this."""


class FragmentStatus(enum.IntEnum):
    OK = 0
    MISSING_SUBSTITUTE = 1
    CORRUPT = 2


class Completeness(enum.IntEnum):
    COMPLETE = 0
    PARTIAL = 1


class Subdetector(enum.IntEnum):
    CALO = 0
    MUON = 1


class Kind(enum.Enum):
    FRAG_PUSH = "FRAG_PUSH"
    ROI_INPUT = "ROI_INPUT"
    ROI_ASSIGN = "ROI_ASSIGN"
    DATA_REQUEST = "DATA_REQUEST"
    DATA_RESPONSE = "DATA_RESPONSE"
    L2_DECISION = "L2_DECISION"
    L2_RESULT = "L2_RESULT"
    EB_ASSIGN = "EB_ASSIGN"
    EOE = "EOE"
    CLEAR = "CLEAR"
    EF_PULL = "EF_PULL"
    EF_EVENT = "EF_EVENT"
    EF_VERDICT = "EF_VERDICT"

    # members are singletons; identity hashing keeps per-kind counters cheap
    __hash__ = object.__hash__


@dataclass(frozen=True, slots=True)
class ROBFragment:
    source_id: int
    l1id: EventId
    status: FragmentStatus = FragmentStatus.OK
    payload_words: int = 0
    # Raw payload as read back from a file; generated on demand otherwise.
    payload: bytes | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.status is FragmentStatus.MISSING_SUBSTITUTE and self.payload_words:
            raise ValueError("substitute fragments carry no payload")

    @property
    def wire_size(self) -> int:
        return HEADER_BYTES + 4 * self.payload_words


def fragment_wire_size(payload_words: int) -> int:
    return HEADER_BYTES + 4 * payload_words


def make_fragment(
    source_id: int, l1id: EventId, payload_words: int, n_links: int = ATLAS_LINKS
) -> ROBFragment:
    if not 0 <= source_id < n_links:
        raise ConfigError(f"source_id {source_id} outside 0..{n_links - 1}")
    if payload_words < 0:
        raise ConfigError("payload_words must be non-negative")
    return ROBFragment(source_id, l1id, FragmentStatus.OK, payload_words)


def substitute_fragment(source_id: int, l1id: EventId) -> ROBFragment:
    return ROBFragment(source_id, l1id, FragmentStatus.MISSING_SUBSTITUTE, 0)


def rob_map(source_id: int, grouping_g: int) -> tuple[int, int]:
    """Contiguous block mapping of a readout link onto (ROS unit, ROB slot)."""
    return divmod(source_id, grouping_g)


def n_units(n_links: int, grouping_g: int) -> int:
    return -(-n_links // grouping_g)


def unit_sources(unit: int, n_links: int, grouping_g: int) -> range:
    return range(unit * grouping_g, min((unit + 1) * grouping_g, n_links))


@dataclass(frozen=True, slots=True)
class ROIRecord:
    l1id: EventId
    roi_items: tuple[tuple[Subdetector, tuple[int, ...]], ...]
    total_roi_bytes: int

    def rob_ids(self) -> list[int]:
        return [r for _, robs in self.roi_items for r in robs]

    def units(self, grouping_g: int) -> dict[int, list[int]]:
        """Unit index -> sorted ROB slots requested from that unit."""
        out: dict[int, list[int]] = {}
        for r in self.rob_ids():
            unit, slot = rob_map(r, grouping_g)
            out.setdefault(unit, []).append(slot)
        return {u: sorted(s) for u, s in sorted(out.items())}

    def spread(self, grouping_g: int) -> int:
        return len({rob_map(r, grouping_g)[0] for r in self.rob_ids()})

    @property
    def record_bytes(self) -> int:
        return 4 + sum(4 + 4 * len(robs) for _, robs in self.roi_items)


def _fragment_bytes_fn(fragment_bytes: int | Mapping[int, int] | Any):
    if isinstance(fragment_bytes, int):
        return lambda r: fragment_bytes
    if isinstance(fragment_bytes, Mapping):
        return fragment_bytes.__getitem__
    return fragment_bytes


def build_roi_record(
    l1id: EventId,
    calo_items: Sequence[Sequence[int]],
    muon_items: Sequence[Sequence[int]],
    *,
    n_links: int = ATLAS_LINKS,
    fragment_bytes: int | Mapping[int, int] = fragment_wire_size(DEFAULT_FRAGMENT_WORDS),
) -> ROIRecord:
    """Merge calorimeter and muon LVL1 inputs into one ROI record.

    ``fragment_bytes`` is the expected fragment wire size, either a constant or
    a per-link mapping/callable; the record's total is the sum over its ROBs.
    """
    size_of = _fragment_bytes_fn(fragment_bytes)
    items = []
    seen: set[int] = set()
    for det, group in ((Subdetector.CALO, calo_items), (Subdetector.MUON, muon_items)):
        for robs in group:
            robs = tuple(int(r) for r in robs)
            if not robs:
                raise MalformedROI(f"event {l1id}: empty ROI item")
            for r in robs:
                if not 0 <= r < n_links:
                    raise MalformedROI(f"event {l1id}: rob id {r} out of range")
                if r in seen:
                    raise MalformedROI(f"event {l1id}: duplicate rob id {r}")
                seen.add(r)
            items.append((det, robs))
    if not items:
        raise MalformedROI(f"event {l1id}: no ROI items")
    total = sum(size_of(r) for r in seen)
    return ROIRecord(l1id, tuple(items), total)


@dataclass(frozen=True, slots=True)
class FullEvent:
    l1id: EventId
    fragments: tuple[ROBFragment, ...]
    completeness: Completeness
    header_words: int = HEADER_WORDS

    @property
    def wire_size(self) -> int:
        return 4 * self.header_words + sum(f.wire_size for f in self.fragments)


def assemble_full_event(
    l1id: EventId,
    fragments: Iterable[ROBFragment],
    pseudo_fragment: ROBFragment,
    sources: Iterable[int],
) -> FullEvent:
    """Order fragments by source id, fill gaps with substitutes, append pseudo-ROS."""
    by_source: dict[int, ROBFragment] = {}
    for f in fragments:
        if f.source_id in by_source:
            raise AssemblyError(f"event {l1id}: duplicate source {f.source_id}")
        by_source[f.source_id] = f
    ordered = []
    for s in sorted(sources):
        f = by_source.pop(s, None)
        ordered.append(f if f is not None else substitute_fragment(s, l1id))
    if by_source:
        raise AssemblyError(f"event {l1id}: unexpected sources {sorted(by_source)}")
    ordered.append(pseudo_fragment)
    partial = any(f.status is FragmentStatus.MISSING_SUBSTITUTE for f in ordered)
    return FullEvent(
        l1id, tuple(ordered), Completeness.PARTIAL if partial else Completeness.COMPLETE
    )


@dataclass(slots=True)
class Message:
    kind: Kind
    src: str
    dst: str
    l1id: EventId | tuple[EventId, ...]
    payload_bytes: int
    body: Any = field(default=None, compare=False, repr=False)

    @property
    def wire_size(self) -> int:
        return ENVELOPE_BYTES + self.payload_bytes


def frag_push(src: str, dst: str, l1id: EventId, words_per_slot: Sequence[int]) -> Message:
    """One LVL1 accept's fragments for a ROS unit, given as payload words per ROB slot."""
    payload = HEADER_BYTES * len(words_per_slot) + 4 * sum(words_per_slot)
    return Message(Kind.FRAG_PUSH, src, dst, l1id, payload, tuple(words_per_slot))


def roi_message(kind: Kind, src: str, dst: str, roi: ROIRecord) -> Message:
    return Message(kind, src, dst, roi.l1id, roi.record_bytes, roi)


def data_request(src: str, dst: str, l1id: EventId, slots: Sequence[int] | None, tag: int) -> Message:
    """``slots=None`` requests every ROB of the unit (event building)."""
    n = 0 if slots is None else len(slots)
    return Message(Kind.DATA_REQUEST, src, dst, l1id, 8 + 4 * n, (tag, None if slots is None else tuple(slots)))


def data_response(src: str, dst: str, l1id: EventId, fragments: Sequence[ROBFragment], tag: int) -> Message:
    return Message(Kind.DATA_RESPONSE, src, dst, l1id, sum(f.wire_size for f in fragments), (tag, tuple(fragments)))


def control(kind: Kind, src: str, dst: str, l1id: EventId, body: Any = None) -> Message:
    size = 4 if kind is Kind.EF_PULL else 8
    return Message(kind, src, dst, l1id, size, body)


def l2_result(src: str, dst: str, l1id: EventId, result_bytes: int) -> Message:
    return Message(Kind.L2_RESULT, src, dst, l1id, result_bytes, result_bytes)


def clear(src: str, dst: str, ids: Sequence[EventId]) -> Message:
    ids = tuple(ids)
    return Message(Kind.CLEAR, src, dst, ids, 4 * len(ids))


def ef_event(src: str, dst: str, event: FullEvent) -> Message:
    return Message(Kind.EF_EVENT, src, dst, event.l1id, event.wire_size, event)


def least_loaded(loads: Sequence[int]) -> int:
    """Index of the smallest load; ties go to the lowest index."""
    best = 0
    for i in range(1, len(loads)):
        if loads[i] < loads[best]:
            best = i
    return best
