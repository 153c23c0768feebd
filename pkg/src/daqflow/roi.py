"""LVL2 data path: ROI Builder, supervisors, processing units and the pseudo-ROS."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .kernel import Kernel, LinkModel, Timer
from .model import (
    PSEUDO_SOURCE,
    EventId,
    Kind,
    MalformedROI,
    Message,
    ProtocolError,
    ROBFragment,
    ROIRecord,
    build_roi_record,
    control,
    data_request,
    data_response,
    l2_result,
    least_loaded,
    roi_message,
    substitute_fragment,
)


def make_sampler(dist: str, mean_us: int, rng: random.Random) -> Callable[[], int]:
    if dist == "constant" or mean_us == 0:
        return lambda: mean_us
    if dist == "exponential":
        rate = 1.0 / mean_us
        return lambda: int(round(rng.expovariate(rate)))
    raise ValueError(f"unknown distribution {dist!r}")


def route_supervisor(l1id: EventId, n_sv: int) -> int:
    return l1id % n_sv


class ROIBuilder:
    """Merges LVL1 calorimeter/muon inputs and hands the record to a supervisor."""

    node_id = "roib"

    def __init__(
        self,
        kernel: Kernel,
        *,
        n_sv: int,
        n_links: int,
        fragment_bytes,
        output: LinkModel,
    ):
        self.kernel = kernel
        self.n_sv = n_sv
        self.n_links = n_links
        self.fragment_bytes = fragment_bytes
        self.output = output
        self.dead_letter = 0
        self.records = 0
        kernel.register(self.node_id, self.on_message)

    def on_message(self, msg: Message) -> None:
        if msg.kind is not Kind.ROI_INPUT:
            raise ProtocolError(f"roib: unexpected {msg.kind.value}")
        calo, muon = msg.body
        self.roib_ingest(msg.l1id, calo, muon)

    def roib_ingest(self, l1id: EventId, calo_inputs, muon_inputs) -> None:
        try:
            roi = build_roi_record(
                l1id, calo_inputs, muon_inputs, n_links=self.n_links, fragment_bytes=self.fragment_bytes
            )
        except MalformedROI:
            self.dead_letter += 1
            return
        self.records += 1
        sv = route_supervisor(l1id, self.n_sv)
        self.kernel.send(roi_message(Kind.ROI_ASSIGN, self.node_id, f"l2sv{sv}", roi), channel=self.output)


class L2Supervisor:
    def __init__(
        self,
        kernel: Kernel,
        sv_index: int,
        l2pu_ids: Sequence[str],
        *,
        dfm_id: str = "dfm",
        timeout_us: int = 1_000_000,
        link: LinkModel | None = None,
    ):
        if not l2pu_ids:
            raise ValueError("a supervisor needs at least one L2PU")
        self.kernel = kernel
        self.sv_index = sv_index
        self.node_id = f"l2sv{sv_index}"
        self.l2pu_ids = list(l2pu_ids)
        self.dfm_id = dfm_id
        self.timeout_us = timeout_us
        self.l2pu_load = [0] * len(l2pu_ids)
        self.pending: dict[EventId, tuple[int, Timer]] = {}
        self.assigned = [0] * len(l2pu_ids)
        self.decisions = 0
        self.timeouts = 0
        self.late_decisions = 0
        kernel.register(self.node_id, self.on_message, link)

    def on_message(self, msg: Message) -> None:
        if msg.kind is Kind.ROI_ASSIGN:
            self.l2sv_assign(msg.body)
        elif msg.kind is Kind.L2_DECISION:
            self.on_decision(msg.l1id, msg.body)
        else:
            raise ProtocolError(f"{self.node_id}: unexpected {msg.kind.value}")

    def l2sv_assign(self, roi: ROIRecord) -> None:
        if roi.l1id in self.pending:
            raise ProtocolError(f"{self.node_id}: event {roi.l1id} assigned twice")
        pu = least_loaded(self.l2pu_load)
        self.l2pu_load[pu] += 1
        self.assigned[pu] += 1
        timer = self.kernel.schedule_in(self.timeout_us, self._timeout, roi.l1id)
        self.pending[roi.l1id] = (pu, timer)
        self.kernel.send(roi_message(Kind.ROI_ASSIGN, self.node_id, self.l2pu_ids[pu], roi))

    def on_decision(self, l1id: EventId, accept: bool) -> None:
        entry = self.pending.pop(l1id, None)
        if entry is None:
            self.late_decisions += 1
            return
        pu, timer = entry
        timer.cancel()
        self.l2pu_load[pu] -= 1
        self.decisions += 1
        # the DFM control path is reliable; only data-network traffic is lossy
        self.kernel.send(control(Kind.L2_DECISION, self.node_id, self.dfm_id, l1id, accept), lossy=False)

    def _timeout(self, l1id: EventId) -> None:
        pu, _ = self.pending.pop(l1id)
        self.l2pu_load[pu] -= 1
        self.timeouts += 1
        self.kernel.send(control(Kind.L2_DECISION, self.node_id, self.dfm_id, l1id, False), lossy=False)

    def counters(self) -> dict[str, int]:
        p = self.node_id
        out = {
            f"{p}.decisions": self.decisions,
            f"{p}.timeouts": self.timeouts,
            f"{p}.late_decisions": self.late_decisions,
            f"{p}.outstanding": sum(self.l2pu_load),
        }
        for i, n in enumerate(self.assigned):
            out[f"{p}.assigned.{self.l2pu_ids[i]}"] = n
        return out


@dataclass(slots=True)
class _Collection:
    roi: ROIRecord
    sv: str
    t_assign: int
    awaited: dict[int, Timer] = field(default_factory=dict)
    received_bytes: int = 0
    timed_out: int = 0


class L2PU:
    """Collects ROI data from the ROS and renders a stochastic decision."""

    def __init__(
        self,
        kernel: Kernel,
        pu_index: int,
        *,
        grouping_g: int,
        pseudo_ros_id: str = "pros",
        roi_timeout_us: int = 10_000,
        accept_prob: float = 0.03,
        proc_dist: str = "constant",
        proc_time_us: int = 10_000,
        result_bytes: int = 1024,
        link: LinkModel | None = None,
    ):
        self.kernel = kernel
        self.pu_index = pu_index
        self.node_id = f"l2pu{pu_index}"
        self.grouping_g = grouping_g
        self.pseudo_ros_id = pseudo_ros_id
        self.roi_timeout_us = roi_timeout_us
        self.accept_prob = accept_prob
        self.result_bytes = result_bytes
        self.rng = kernel.rng(self.node_id)
        self.proc_time = make_sampler(proc_dist, proc_time_us, self.rng)
        self.active: dict[EventId, _Collection] = {}
        self._tag = 0
        self.collect_times: list[int] = []
        self.collect_spread: list[int] = []
        self.decision_latencies: list[int] = []
        self.roi_timeouts = 0
        self.stale_responses = 0
        self.accepts = 0
        self.rejects = 0
        kernel.register(self.node_id, self.on_message, link)

    def on_message(self, msg: Message) -> None:
        if msg.kind is Kind.ROI_ASSIGN:
            self.l2pu_collect_roi(msg.src, msg.body)
        elif msg.kind is Kind.DATA_RESPONSE:
            self.on_response(msg)
        else:
            raise ProtocolError(f"{self.node_id}: unexpected {msg.kind.value}")

    def l2pu_collect_roi(self, sv: str, roi: ROIRecord) -> None:
        if roi.l1id in self.active:
            self.stale_responses += 1
            return
        st = _Collection(roi, sv, self.kernel.now)
        self.active[roi.l1id] = st
        for unit, slots in roi.units(self.grouping_g).items():
            tag = self._tag
            self._tag += 1
            st.awaited[tag] = self.kernel.schedule_in(self.roi_timeout_us, self._timeout, roi.l1id, tag)
            self.kernel.send(data_request(self.node_id, f"ros{unit}", roi.l1id, slots, tag))

    def on_response(self, msg: Message) -> None:
        tag, fragments = msg.body
        st = self.active.get(msg.l1id)
        timer = st.awaited.pop(tag, None) if st is not None else None
        if timer is None:
            self.stale_responses += 1
            return
        timer.cancel()
        st.received_bytes += msg.payload_bytes
        if not st.awaited:
            self._collected(msg.l1id, st)

    def _timeout(self, l1id: EventId, tag: int) -> None:
        st = self.active[l1id]
        del st.awaited[tag]
        st.timed_out += 1
        self.roi_timeouts += 1
        if not st.awaited:
            self._collected(l1id, st)

    def _collected(self, l1id: EventId, st: _Collection) -> None:
        self.collect_times.append(self.kernel.now - st.t_assign)
        self.collect_spread.append(st.roi.spread(self.grouping_g))
        self.kernel.schedule_in(self.proc_time(), self.l2pu_decide, l1id)

    def l2pu_decide(self, l1id: EventId) -> None:
        st = self.active.pop(l1id)
        accept = self.rng.random() < self.accept_prob
        if accept:
            self.accepts += 1
            # result must be stored before the DFM can learn of the accept
            self.kernel.send(l2_result(self.node_id, self.pseudo_ros_id, l1id, self.result_bytes))
        else:
            self.rejects += 1
        self.decision_latencies.append(self.kernel.now - st.t_assign)
        self.kernel.send(control(Kind.L2_DECISION, self.node_id, st.sv, l1id, accept))

    def counters(self) -> dict[str, int]:
        p = self.node_id
        return {
            f"{p}.collected": len(self.collect_times),
            f"{p}.roi_timeouts": self.roi_timeouts,
            f"{p}.stale_responses": self.stale_responses,
            f"{p}.accepts": self.accepts,
            f"{p}.rejects": self.rejects,
        }


def pseudo_fragment(l1id: EventId, result_bytes: int) -> ROBFragment:
    return ROBFragment(PSEUDO_SOURCE, l1id, payload_words=-(-result_bytes // 4))


class PseudoROS:
    """Holds LVL2 result records and serves them to event building like a ROS unit."""

    node_id = "pros"

    def __init__(self, kernel: Kernel, link: LinkModel | None = None):
        self.kernel = kernel
        self.store: dict[EventId, int] = {}
        self.missing = 0
        self.requests = 0
        self.clears_applied = 0
        self.duplicates = 0
        kernel.register(self.node_id, self.on_message, link)

    def on_message(self, msg: Message) -> None:
        self.pseudo_ros_handle(msg)

    def pseudo_ros_handle(self, msg: Message) -> None:
        if msg.kind is Kind.L2_RESULT:
            if msg.l1id in self.store:
                self.duplicates += 1
            self.store[msg.l1id] = msg.body
        elif msg.kind is Kind.DATA_REQUEST:
            self.requests += 1
            tag, _ = msg.body
            size = self.store.get(msg.l1id)
            if size is None:
                self.missing += 1
                frag = substitute_fragment(PSEUDO_SOURCE, msg.l1id)
            else:
                frag = pseudo_fragment(msg.l1id, size)
            self.kernel.send(data_response(self.node_id, msg.src, msg.l1id, [frag], tag))
        elif msg.kind is Kind.CLEAR:
            for l1id in msg.l1id:
                self.store.pop(l1id, None)
            self.clears_applied += len(msg.l1id)
        else:
            raise ProtocolError(f"pros: unexpected {msg.kind.value}")

    @property
    def occupancy_bytes(self) -> int:
        return sum(pseudo_fragment(0, b).wire_size for b in self.store.values())

    def counters(self) -> dict[str, int]:
        return {
            "pros.requests": self.requests,
            "pros.missing": self.missing,
            "pros.stored": len(self.store),
            "pros.occupancy_bytes": self.occupancy_bytes,
            "pros.clears_applied": self.clears_applied,
        }
