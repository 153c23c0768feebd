"""Deterministic discrete-event kernel and parametric network model.

Every registered node owns a NIC (an outbound and an inbound serialization
port, or a single shared port when ``shared_io`` is set) and a CPU that
services per-message costs one job at a time in FIFO order. A message sent
over the network goes through:

    sender CPU (tx cost) -> sender out port -> propagation -> receiver in port
    -> receiver CPU (rx cost) -> handler

Ports are reserved in send order. The receiver port finishes a message no
earlier than the sender finished it plus propagation (cut-through), so a
slow sender cannot be outrun. Serialization times are integer microseconds,
rounded half up.

Dedicated point-to-point channels (S-Link style) bypass the NICs: they
serialize per (src, dst) pair and charge the receiver CPU only if the
channel's rx cost is non-zero.

Trace lines (tab separated, one per event, behind a debug flag)::

    <time_us> <SEND|RECV|DROP> <kind> <src> <dst> <l1id> <wire_bytes>

CLEAR messages write ``batch:<n>`` in the l1id column.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import Counter, deque
from dataclasses import dataclass
from typing import Any, Callable, TextIO

from .model import Kind, Message


class KernelError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bytes_per_s: int = 125_000_000
    prop_latency_us: int = 0
    per_msg_rx_cost_us: int = 0
    per_msg_tx_cost_us: int = 0
    loss_prob: float = 0.0
    shared_io: bool = False

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth must be positive")
        if min(self.prop_latency_us, self.per_msg_rx_cost_us, self.per_msg_tx_cost_us) < 0:
            raise ValueError("latencies and costs must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")


@dataclass(frozen=True)
class BusModel:
    bandwidth_bytes_per_s: int = 264_000_000
    per_transfer_cost_us: int = 1

    def transfer_us(self, nbytes: int) -> int:
        return self.per_transfer_cost_us + serialization_us(nbytes, self.bandwidth_bytes_per_s)


def serialization_us(nbytes: int, bandwidth_bytes_per_s: int) -> int:
    """nbytes / bandwidth in microseconds, rounded half up."""
    return (2 * nbytes * 1_000_000 + bandwidth_bytes_per_s) // (2 * bandwidth_bytes_per_s)


def rng_stream(seed: int, component_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}/{component_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


class _Port:
    __slots__ = ("free", "busy_us")

    def __init__(self):
        self.free = 0
        self.busy_us = 0


class Node:
    __slots__ = (
        "node_id", "handler", "link", "out_port", "in_port",
        "cpu_busy", "cpu_queue", "cpu_busy_us", "bytes_in", "bytes_out",
        "received",
    )

    def __init__(self, node_id: str, handler: Callable[[Message], None] | None, link: LinkModel):
        self.node_id = node_id
        self.handler = handler
        self.link = link
        self.out_port = _Port()
        self.in_port = self.out_port if link.shared_io else _Port()
        self.cpu_busy = False
        self.cpu_queue: deque = deque()
        self.cpu_busy_us = 0
        self.bytes_in = 0
        self.bytes_out = 0
        self.received: Counter = Counter()


class Timer:
    """Handle returned by ``schedule_at``; ``cancel()`` makes the action a no-op."""

    __slots__ = ("_entry",)

    def __init__(self, entry: list):
        self._entry = entry

    def cancel(self) -> None:
        self._entry[2] = None

    @property
    def active(self) -> bool:
        return self._entry[2] is not None

    @property
    def time(self) -> int:
        return self._entry[0]


class Kernel:
    def __init__(
        self,
        seed: int = 0,
        *,
        trace: TextIO | None = None,
        max_same_time_actions: int = 1_000_000,
    ):
        self.seed = seed
        self.trace = trace
        self.max_same_time_actions = max_same_time_actions
        self._now = 0
        self._seq = 0
        self._queue: list[list] = []
        self._nodes: dict[str, Node] = {}
        self._pair_free: dict[tuple[str, str], int] = {}
        self._rngs: dict[str, random.Random] = {}
        self._net_rng = rng_stream(seed, "__network__")
        self._faults: list[Callable[[Message], bool]] = []
        self.sent: Counter = Counter()
        self.delivered: Counter = Counter()
        self.dropped: Counter = Counter()
        self.actions_run = 0

    @property
    def now(self) -> int:
        return self._now

    def register(
        self,
        node_id: str,
        handler: Callable[[Message], None] | None,
        link: LinkModel | None = None,
    ) -> Node:
        if node_id in self._nodes:
            raise KernelError(f"node {node_id!r} registered twice")
        node = Node(node_id, handler, link or LinkModel())
        self._nodes[node_id] = node
        return node

    def node(self, node_id: str) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise KernelError(f"unknown node {node_id!r}") from None

    @property
    def nodes(self) -> dict[str, Node]:
        return self._nodes

    def rng(self, component_id: str) -> random.Random:
        r = self._rngs.get(component_id)
        if r is None:
            r = self._rngs[component_id] = rng_stream(self.seed, component_id)
        return r

    def add_fault(self, predicate: Callable[[Message], bool]) -> None:
        """Drop every lossy network message for which ``predicate`` is true."""
        self._faults.append(predicate)

    # -- scheduling -------------------------------------------------------

    def schedule_at(self, t: int, fn: Callable, *args: Any) -> Timer:
        if t < self._now:
            raise KernelError(f"cannot schedule at {t} < now {self._now}")
        entry = [t, self._seq, fn, args]
        self._seq += 1
        heapq.heappush(self._queue, entry)
        return Timer(entry)

    def schedule_in(self, dt: int, fn: Callable, *args: Any) -> Timer:
        return self.schedule_at(self._now + dt, fn, *args)

    def _push(self, t: int, fn: Callable, args: tuple) -> None:
        # internal fast path: no past-time check, no handle
        heapq.heappush(self._queue, [t, self._seq, fn, args])
        self._seq += 1

    def _run(self, t_end: int | None) -> None:
        queue = self._queue
        same = 0
        last_t = -1
        while queue:
            if t_end is not None and queue[0][0] > t_end:
                break
            t, _, fn, args = heapq.heappop(queue)
            if fn is None:
                continue
            if t == last_t:
                same += 1
                if same > self.max_same_time_actions:
                    raise KernelError(f"livelock: more than {self.max_same_time_actions} actions at t={t}")
            else:
                same = 0
                last_t = t
            self._now = t
            self.actions_run += 1
            fn(*args)
        if t_end is not None and t_end > self._now:
            self._now = t_end

    def run_until(self, t_end: int) -> None:
        self._run(t_end)

    def run_to_quiescence(self) -> None:
        self._run(None)

    @property
    def pending(self) -> int:
        return sum(1 for e in self._queue if e[2] is not None)

    # -- CPU --------------------------------------------------------------

    def cpu_submit(self, node: Node, cost: int, fn: Callable, *args: Any) -> None:
        """Queue a job of ``cost`` µs on the node CPU; ``fn(*args)`` runs when it finishes."""
        if node.cpu_busy:
            node.cpu_queue.append((cost, fn, args))
        else:
            node.cpu_busy = True
            self._push(self._now + cost, self._cpu_done, (node, cost, fn, args))

    def _cpu_done(self, node: Node, cost: int, fn: Callable, args: tuple) -> None:
        node.cpu_busy_us += cost
        if node.cpu_queue:
            ncost, nfn, nargs = node.cpu_queue.popleft()
            self._push(self._now + ncost, self._cpu_done, (node, ncost, nfn, nargs))
        else:
            node.cpu_busy = False
        fn(*args)

    def cpu_backlog(self, node_id: str) -> int:
        node = self._nodes[node_id]
        return len(node.cpu_queue) + (1 if node.cpu_busy else 0)

    # -- messaging --------------------------------------------------------

    def send(self, msg: Message, *, lossy: bool = True, channel: LinkModel | None = None) -> None:
        nodes = self._nodes
        if msg.src not in nodes or msg.dst not in nodes:
            raise KernelError(f"unknown node in {msg.src!r} -> {msg.dst!r}")
        src = nodes[msg.src]
        dst = nodes[msg.dst]
        self.sent[msg.kind] += 1
        if channel is not None:
            self._send_channel(msg, src, dst, channel)
            return
        tx = src.link.per_msg_tx_cost_us
        if tx:
            self.cpu_submit(src, tx, self._transmit, msg, src, dst, lossy)
        else:
            self._transmit(msg, src, dst, lossy)

    def _trace(self, event: str, msg: Message) -> None:
        l1 = f"batch:{len(msg.l1id)}" if msg.kind is Kind.CLEAR else msg.l1id
        self.trace.write(f"{self._now}\t{event}\t{msg.kind.value}\t{msg.src}\t{msg.dst}\t{l1}\t{msg.wire_size}\n")

    def _transmit(self, msg: Message, src: Node, dst: Node, lossy: bool) -> None:
        now = self._now
        size = msg.wire_size
        ser_s = serialization_us(size, src.link.bandwidth_bytes_per_s)
        out = src.out_port
        out_start = out.free if out.free > now else now
        out.free = out_start + ser_s
        out.busy_us += ser_s
        src.bytes_out += size
        if self.trace is not None:
            self._trace("SEND", msg)
        if lossy and self._lost(msg, src):
            self.dropped[msg.kind] += 1
            if self.trace is not None:
                self._trace("DROP", msg)
            return
        prop = src.link.prop_latency_us
        ser_d = serialization_us(size, dst.link.bandwidth_bytes_per_s)
        inp = dst.in_port
        in_start = out_start + prop
        if inp.free > in_start:
            in_start = inp.free
        inp.free = in_start + ser_d
        inp.busy_us += ser_d
        in_end = max(in_start + ser_d, out_start + ser_s + prop)
        dst.bytes_in += size
        self._push(in_end, self._arrive, (dst, msg, dst.link.per_msg_rx_cost_us))

    def _lost(self, msg: Message, src: Node) -> bool:
        for fault in self._faults:
            if fault(msg):
                return True
        p = src.link.loss_prob
        return p > 0.0 and self._net_rng.random() < p

    def _send_channel(self, msg: Message, src: Node, dst: Node, channel: LinkModel) -> None:
        key = (msg.src, msg.dst)
        start = max(self._now, self._pair_free.get(key, 0))
        end = start + serialization_us(msg.wire_size, channel.bandwidth_bytes_per_s)
        self._pair_free[key] = end
        if self.trace is not None:
            self._trace("SEND", msg)
        self._push(end + channel.prop_latency_us, self._arrive, (dst, msg, channel.per_msg_rx_cost_us))

    def _arrive(self, dst: Node, msg: Message, rx_cost: int) -> None:
        if rx_cost:
            self.cpu_submit(dst, rx_cost, self._deliver, dst, msg)
        else:
            self._deliver(dst, msg)

    def _deliver(self, dst: Node, msg: Message) -> None:
        self.delivered[msg.kind] += 1
        dst.received[msg.kind] += 1
        if self.trace is not None:
            self._trace("RECV", msg)
        if dst.handler is not None:
            dst.handler(msg)

    # -- metrics ----------------------------------------------------------

    def counters(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for kind in Kind:
            out[f"sent.{kind.value}"] = self.sent[kind]
            out[f"delivered.{kind.value}"] = self.delivered[kind]
            out[f"dropped.{kind.value}"] = self.dropped[kind]
        out["dropped.total"] = sum(self.dropped.values())
        for node_id, node in self._nodes.items():
            out[f"{node_id}.cpu_busy_us"] = node.cpu_busy_us
            out[f"{node_id}.bytes_in"] = node.bytes_in
            out[f"{node_id}.bytes_out"] = node.bytes_out
        return out
