"""Event Filter boundary: pull protocol, EF decision stub, SFO and its file format.

SFO file layout (little endian, 32-bit words)::

    file header   0xAA1234AA, record_count        (count patched at close)
    record        0xBB1234BB, image_length_bytes, l1id, flags, <event image>
    event image   0xEE1234EE, 6, l1id, n_fragments, completeness, total_words,
                  then each fragment:
                  0xDD1234DD, 6, source_id, l1id, status, payload_words, <payload>

``flags`` bit 0 is set for PARTIAL events. Payload words that were never
materialized are generated from a fixed pattern of (l1id, source_id).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .kernel import Kernel, LinkModel
from .model import (
    HEADER_WORDS,
    Completeness,
    EventId,
    FragmentStatus,
    FullEvent,
    Kind,
    Message,
    ProtocolError,
    ROBFragment,
    control,
    ef_event,
)
from .roi import make_sampler

FILE_MAGIC = 0xAA1234AA
RECORD_MAGIC = 0xBB1234BB
EVENT_MARKER = 0xEE1234EE
FRAGMENT_MARKER = 0xDD1234DD
FILE_HEADER = struct.Struct("<2I")
RECORD_HEADER = struct.Struct("<4I")
BLOCK_HEADER = struct.Struct("<6I")
FLAG_PARTIAL = 0x1


class SFOFormatError(ValueError):
    pass


def pattern_payload(l1id: EventId, source_id: int, payload_words: int) -> bytes:
    seed = (l1id * 2654435761 + source_id * 40503 + 0x9E3779B9) & 0xFFFFFFFF
    words = (np.arange(payload_words, dtype=np.uint64) * 2246822519 + seed) & 0xFFFFFFFF
    return words.astype("<u4").tobytes()


def encode_fragment(f: ROBFragment) -> bytes:
    payload = f.payload if f.payload is not None else pattern_payload(f.l1id, f.source_id, f.payload_words)
    if len(payload) != 4 * f.payload_words:
        raise SFOFormatError(f"fragment {f.source_id}: payload length mismatch")
    head = BLOCK_HEADER.pack(FRAGMENT_MARKER, HEADER_WORDS, f.source_id, f.l1id, int(f.status), f.payload_words)
    return head + payload


def encode_event(event: FullEvent) -> bytes:
    body = b"".join(encode_fragment(f) for f in event.fragments)
    head = BLOCK_HEADER.pack(
        EVENT_MARKER, event.header_words, event.l1id, len(event.fragments),
        int(event.completeness), event.wire_size // 4,
    )
    return head + body


def decode_event(image: bytes | memoryview) -> FullEvent:
    view = memoryview(image)
    marker, hwords, l1id, n_frag, completeness, total_words = BLOCK_HEADER.unpack_from(view, 0)
    if marker != EVENT_MARKER or hwords != HEADER_WORDS:
        raise SFOFormatError("bad event header")
    if total_words * 4 != len(view):
        raise SFOFormatError("event length does not match header")
    pos = BLOCK_HEADER.size
    fragments = []
    for _ in range(n_frag):
        fmarker, fh, source_id, fl1id, status, words = BLOCK_HEADER.unpack_from(view, pos)
        if fmarker != FRAGMENT_MARKER or fh != HEADER_WORDS:
            raise SFOFormatError(f"bad fragment header at byte {pos}")
        pos += BLOCK_HEADER.size
        payload = bytes(view[pos:pos + 4 * words])
        pos += 4 * words
        fragments.append(ROBFragment(source_id, fl1id, FragmentStatus(status), words, payload))
    if pos != len(view):
        raise SFOFormatError("trailing bytes after last fragment")
    return FullEvent(l1id, tuple(fragments), Completeness(completeness), hwords)


class SFOWriter:
    """Appends framed event records; ``path=None`` counts bytes without writing."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records_written = 0
        self.bytes_written = FILE_HEADER.size
        self._fh: BinaryIO | None = None
        if self.path is not None:
            self._fh = open(self.path, "wb")
            self._fh.write(FILE_HEADER.pack(FILE_MAGIC, 0))

    def write(self, event: FullEvent) -> None:
        flags = FLAG_PARTIAL if event.completeness is Completeness.PARTIAL else 0
        if self._fh is not None:
            image = encode_event(event)
            self._fh.write(RECORD_HEADER.pack(RECORD_MAGIC, len(image), event.l1id, flags))
            self._fh.write(image)
        self.records_written += 1
        self.bytes_written += RECORD_HEADER.size + event.wire_size

    def close(self) -> None:
        if self._fh is None:
            return
        self._fh.seek(4)
        self._fh.write(struct.pack("<I", self.records_written))
        self._fh.close()
        self._fh = None

    def __enter__(self) -> SFOWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_sfo_file(path: str | Path, events: Sequence[FullEvent]) -> None:
    with SFOWriter(path) as w:
        for ev in events:
            w.write(ev)


def read_sfo_file(path: str | Path) -> list[FullEvent]:
    data = Path(path).read_bytes()
    if len(data) < FILE_HEADER.size:
        raise SFOFormatError("file shorter than its header")
    magic, count = FILE_HEADER.unpack_from(data, 0)
    if magic != FILE_MAGIC:
        raise SFOFormatError(f"bad file magic {magic:#x}")
    view = memoryview(data)
    pos = FILE_HEADER.size
    events = []
    for _ in range(count):
        rmagic, length, l1id, flags = RECORD_HEADER.unpack_from(view, pos)
        if rmagic != RECORD_MAGIC:
            raise SFOFormatError(f"bad record magic at byte {pos}")
        pos += RECORD_HEADER.size
        ev = decode_event(view[pos:pos + length])
        if ev.l1id != l1id or bool(flags & FLAG_PARTIAL) != (ev.completeness is Completeness.PARTIAL):
            raise SFOFormatError(f"record header disagrees with event {ev.l1id}")
        events.append(ev)
        pos += length
    if pos != len(data):
        raise SFOFormatError("trailing bytes after last record")
    return events


class EFNode:
    """Pulls one event at a time from its SFI and accepts a fraction of them."""

    def __init__(
        self,
        kernel: Kernel,
        ef_index: int,
        sfi_id: str,
        *,
        sfo_id: str = "sfo",
        accept_prob: float = 0.10,
        proc_dist: str = "constant",
        proc_time_us: int = 1_000_000,
        link: LinkModel | None = None,
    ):
        self.kernel = kernel
        self.ef_index = ef_index
        self.node_id = f"ef{ef_index}"
        self.sfi_id = sfi_id
        self.sfo_id = sfo_id
        self.accept_prob = accept_prob
        self.rng = kernel.rng(self.node_id)
        self.proc_time = make_sampler(proc_dist, proc_time_us, self.rng)
        self.busy = False
        self.pulled = 0
        self.accepted = 0
        self.rejected = 0
        kernel.register(self.node_id, self.on_message, link)

    def start(self) -> None:
        self.ef_pull()

    def ef_pull(self) -> None:
        self.kernel.send(control(Kind.EF_PULL, self.node_id, self.sfi_id, 0), lossy=False)

    def on_message(self, msg: Message) -> None:
        if msg.kind is not Kind.EF_EVENT:
            raise ProtocolError(f"{self.node_id}: unexpected {msg.kind.value}")
        if self.busy:
            raise ProtocolError(f"{self.node_id}: second event while busy")
        self.busy = True
        self.pulled += 1
        self.kernel.schedule_in(self.proc_time(), self.ef_decide, msg.body)

    def ef_decide(self, event: FullEvent) -> None:
        if self.rng.random() < self.accept_prob:
            self.accepted += 1
            self.kernel.send(control(Kind.EF_VERDICT, self.node_id, self.sfi_id, event.l1id, True), lossy=False)
            self.kernel.send(ef_event(self.node_id, self.sfo_id, event), lossy=False)
        else:
            self.rejected += 1
        self.busy = False
        self.ef_pull()

    def counters(self) -> dict[str, int]:
        p = self.node_id
        return {f"{p}.pulled": self.pulled, f"{p}.accepted": self.accepted, f"{p}.rejected": self.rejected}


class SFO:
    node_id = "sfo"

    def __init__(self, kernel: Kernel, writer: SFOWriter, link: LinkModel | None = None):
        self.kernel = kernel
        self.writer = writer
        kernel.register(self.node_id, self.on_message, link)

    def on_message(self, msg: Message) -> None:
        if msg.kind is not Kind.EF_EVENT:
            raise ProtocolError(f"sfo: unexpected {msg.kind.value}")
        self.sfo_write(msg.body)

    def sfo_write(self, event: FullEvent) -> None:
        self.writer.write(event)

    def counters(self) -> dict[str, int]:
        return {"sfo.records_written": self.writer.records_written, "sfo.bytes_written": self.writer.bytes_written}
