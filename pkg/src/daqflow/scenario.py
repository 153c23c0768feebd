"""Wiring of a full DataFlow scenario and its run loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, TextIO

from .config import ScenarioConfig
from .efio import SFO, EFNode, SFOWriter
from .eventbuilder import BUILT, DFM, SFI
from .kernel import BusModel, Kernel, LinkModel
from .metrics import MetricsSnapshot, summarize, window_rate
from .model import Kind, Message, frag_push
from .roi import L2PU, L2Supervisor, PseudoROS, ROIBuilder
from .ros import ROSUnit


class InvariantViolation(RuntimeError):
    pass


class Level1Source:
    """LVL1 accepts: pushes every link's fragment to its ROS unit and the ROI inputs to the ROI Builder."""

    node_id = "lvl1"

    def __init__(self, kernel: Kernel, cfg: ScenarioConfig, slink: LinkModel):
        self.kernel = kernel
        self.cfg = cfg
        self.slink = slink
        self.rng = kernel.rng(self.node_id)
        # one S-Link per readout link: a unit's burst arrives at the aggregate rate
        self.units = []
        for u in range(cfg.n_units):
            sources = range(u * cfg.grouping_g, min((u + 1) * cfg.grouping_g, cfg.n_links))
            channel = LinkModel(bandwidth_bytes_per_s=slink.bandwidth_bytes_per_s * len(sources))
            words = tuple(cfg.words_of(s) for s in sources)
            self.units.append((f"ros{u}", words, channel))
        self.end_us = cfg.duration_us
        self.next_id = 0
        self.times: list[int] = []
        self._t = 0.0
        self.period_us = 1e6 / cfg.l1_rate_hz
        kernel.register(self.node_id, None)

    def start(self) -> None:
        self._schedule_next()

    def _schedule_next(self) -> None:
        if self.cfg.arrival == "periodic":
            self._t += self.period_us
        else:
            self._t += self.rng.expovariate(1.0 / self.period_us)
        t = int(self._t)
        if t <= self.end_us:
            self.kernel.schedule_at(t, self._accept)

    def roi_geometry(self) -> tuple[list[list[int]], list[list[int]]]:
        n = self.cfg.n_links
        expected = self.cfg.roi_fraction * n
        k = int(expected)
        if self.rng.random() < expected - k:
            k += 1
        k = min(max(k, 1), n)
        first = self.rng.randrange(n)
        robs = [(first + i) % n for i in range(k)]
        if k >= 2 and self.rng.random() < 0.5:
            return [robs[:-1]], [robs[-1:]]
        return [robs], []

    def _accept(self) -> None:
        l1id = self.next_id
        self.next_id += 1
        self.times.append(self.kernel.now)
        send = self.kernel.send
        for node_id, words, channel in self.units:
            send(frag_push(self.node_id, node_id, l1id, words), channel=channel)
        calo, muon = self.roi_geometry()
        payload = 4 + sum(4 + 4 * len(r) for r in calo + muon)
        send(Message(Kind.ROI_INPUT, self.node_id, "roib", l1id, payload, (calo, muon)), channel=self.slink)
        self._schedule_next()


def _link(cfg: ScenarioConfig, rx: int, tx: int, **kw: Any) -> LinkModel:
    base = dict(
        bandwidth_bytes_per_s=cfg.link_bandwidth,
        prop_latency_us=cfg.prop_latency_us,
        per_msg_rx_cost_us=rx,
        per_msg_tx_cost_us=tx,
        loss_prob=cfg.loss_prob,
    )
    base.update(kw)
    return LinkModel(**base)


@dataclass
class Scenario:
    cfg: ScenarioConfig
    kernel: Kernel
    lvl1: Level1Source
    roib: ROIBuilder
    svs: list[L2Supervisor]
    l2pus: list[L2PU]
    pros: PseudoROS
    ros: list[ROSUnit]
    dfm: DFM
    sfis: list[SFI]
    efs: list[EFNode] = field(default_factory=list)
    sfo: SFO | None = None

    def components(self):
        yield from self.ros
        yield self.pros
        yield from self.svs
        yield from self.l2pus
        yield self.dfm
        yield from self.sfis
        yield from self.efs
        if self.sfo is not None:
            yield self.sfo


def build_scenario(cfg: ScenarioConfig, trace: TextIO | None = None) -> Scenario:
    k = Kernel(cfg.seed, trace=trace, max_same_time_actions=cfg.max_same_time_actions)
    slink = LinkModel(bandwidth_bytes_per_s=cfg.slink_bandwidth)
    bus = BusModel(cfg.bus_bandwidth, cfg.bus_transfer_cost_us)
    ros = [
        ROSUnit(k, u, n_links=cfg.n_links, grouping_g=cfg.grouping_g, bus=bus,
                link=_link(cfg, cfg.ros_rx_cost_us, cfg.ros_tx_cost_us),
                rob_capacity_bytes=cfg.rob_capacity_bytes)
        for u in range(cfg.n_units)
    ]
    pros = PseudoROS(k, _link(cfg, cfg.pros_rx_cost_us, cfg.pros_tx_cost_us))
    l2pu_ids = [f"l2pu{i}" for i in range(cfg.n_l2pu)]
    sfi_ids = [f"sfi{i}" for i in range(cfg.n_sfi)]
    dfm = DFM(
        k, sfi_ids, [u.node_id for u in ros] + [pros.node_id],
        clear_batch_max=cfg.clear_batch_max, clear_flush_timeout_us=cfg.clear_flush_timeout_us,
        build_timeout_us=cfg.build_timeout_us, link=_link(cfg, cfg.dfm_rx_cost_us, cfg.dfm_tx_cost_us),
    )
    svs = [
        L2Supervisor(k, i, l2pu_ids, timeout_us=cfg.l2sv_timeout_us,
                     link=_link(cfg, cfg.l2sv_rx_cost_us, cfg.l2sv_tx_cost_us))
        for i in range(cfg.n_sv)
    ]
    l2pus = [
        L2PU(k, i, grouping_g=cfg.grouping_g, roi_timeout_us=cfg.roi_timeout_us,
             accept_prob=cfg.l2_accept_prob, proc_dist=cfg.l2_proc_dist, proc_time_us=cfg.l2_proc_time_us,
             result_bytes=cfg.l2_result_bytes, link=_link(cfg, cfg.l2pu_rx_cost_us, cfg.l2pu_tx_cost_us))
        for i in range(cfg.n_l2pu)
    ]
    roib = ROIBuilder(
        k, n_sv=cfg.n_sv, n_links=cfg.n_links, fragment_bytes=cfg.fragment_bytes(),
        output=LinkModel(bandwidth_bytes_per_s=cfg.slink_bandwidth, per_msg_rx_cost_us=cfg.l2sv_rx_cost_us),
    )
    responders = [u.node_id for u in ros] + [pros.node_id]
    sfis = [
        SFI(k, i, responders, n_links=cfg.n_links, max_credits=cfg.max_credits,
            frag_timeout_us=cfg.frag_timeout_us, hold_us=cfg.sfi_hold_us, ef_enabled=cfg.ef_enabled,
            strict=cfg.strict,
            link=_link(cfg, cfg.sfi_rx_cost_us, cfg.sfi_tx_cost_us, bandwidth_bytes_per_s=cfg.sfi_bandwidth,
                       shared_io=cfg.sfi_shared_io))
        for i in range(cfg.n_sfi)
    ]
    efs: list[EFNode] = []
    sfo = None
    if cfg.ef_enabled:
        sfo = SFO(k, SFOWriter(cfg.sfo_path or None), _link(cfg, 0, 0, loss_prob=0.0))
        efs = [
            EFNode(k, i, sfi_ids[i % cfg.n_sfi], accept_prob=cfg.ef_accept_prob, proc_dist=cfg.ef_proc_dist,
                   proc_time_us=cfg.ef_proc_time_us,
                   link=_link(cfg, cfg.ef_rx_cost_us, cfg.ef_tx_cost_us, loss_prob=0.0))
            for i in range(cfg.n_ef)
        ]
    lvl1 = Level1Source(k, cfg, slink)
    return Scenario(cfg, k, lvl1, roib, svs, l2pus, pros, ros, dfm, sfis, efs, sfo)


@dataclass
class ScenarioResult:
    cfg: ScenarioConfig
    scenario: Scenario
    metrics: dict[str, Any]
    violations: list[str]

    @property
    def disposition(self) -> dict[int, str]:
        return self.scenario.dfm.disposition

    def snapshot(self) -> MetricsSnapshot:
        meta = {"experiment": "run", "config_digest": self.cfg.digest(), "config": self.cfg.as_dict()}
        if not self.metrics:
            return MetricsSnapshot((), [], meta)
        return MetricsSnapshot.from_records([self.metrics], meta)


def check_invariants(sc: Scenario, *, lossless: bool) -> list[str]:
    """Post-quiescence conservation checks; returns human-readable violations."""
    out = []
    dfm = sc.dfm
    generated = sc.lvl1.next_id
    expected = generated - sc.roib.dead_letter
    if len(dfm.disposition) != expected:
        out.append(f"{expected} events reached LVL1 routing but {len(dfm.disposition)} were dispositioned")
    multi = [i for i, n in dfm.flushed.items() if n != 1]
    if multi:
        out.append(f"{len(multi)} ids flushed more than once, e.g. {multi[:5]}")
    unflushed = [i for i in dfm.disposition if dfm.flushed[i] != 1]
    if unflushed:
        out.append(f"{len(unflushed)} dispositioned ids never flushed, e.g. {unflushed[:5]}")
    if dfm.pending_builds or dfm.clear_batch:
        out.append("DFM not drained at quiescence")
    for sv in sc.svs:
        if any(sv.l2pu_load) or sv.pending:
            out.append(f"{sv.node_id} load counters not zero at quiescence")
    if dfm.built + dfm.lost_builds != dfm.assigned:
        out.append("built + lost_builds != assigned")
    for sfi in sc.sfis:
        if sfi.building:
            out.append(f"{sfi.node_id} still building {len(sfi.building)} events")
        if sfi.ef_enabled and sfi.built_queue:
            out.append(f"{sfi.node_id} built_queue not drained")
    if lossless and not sc.roib.dead_letter:
        for u in sc.ros:
            if u.occupancy_bytes:
                out.append(f"{u.node_id} holds {u.occupancy_bytes} bytes after quiescence")
        if sc.pros.store:
            out.append(f"pseudo-ROS holds {len(sc.pros.store)} records after quiescence")
    return out


def collect_metrics(sc: Scenario) -> dict[str, Any]:
    cfg = sc.cfg
    k = sc.kernel
    dfm = sc.dfm
    n_l1 = sc.lvl1.next_id
    if n_l1 == 0:
        return {}
    half = cfg.duration_us // 2
    m: dict[str, Any] = {
        "l1_events": n_l1,
        "l1_rate_hz": window_rate(sc.lvl1.times, half, cfg.duration_us),
        "dead_letter": sc.roib.dead_letter,
        "l2_decisions": len(dfm.disposition),
        "eb_assigned": dfm.assigned,
        "eb_fraction": dfm.assigned / n_l1,
        "eb_built": dfm.built,
        "lost_builds": dfm.lost_builds,
        "stale_eoe": dfm.stale_eoe,
        "duplicate_decisions": dfm.duplicates,
        "clear_batches": len(dfm.batch_sizes),
        "clear_batch_mean": (sum(dfm.batch_sizes) / len(dfm.batch_sizes)) if dfm.batch_sizes else math.nan,
        "dfm_max_imbalance": dfm.max_imbalance,
        "l2sv_timeouts": sum(sv.timeouts for sv in sc.svs),
        "roi_timeouts": sum(p.roi_timeouts for p in sc.l2pus),
        "l2_accepts": sum(p.accepts for p in sc.l2pus),
    }
    m.update(summarize([t for p in sc.l2pus for t in p.collect_times], "collect_us"))
    m.update(summarize([t for p in sc.l2pus for t in p.decision_latencies], "decision_us"))
    # LVL1 accept -> DFM disposition of built events (the span their fragments stay buffered, less the clear batch)
    l1_times = sc.lvl1.times
    m.update(summarize(
        [t - l1_times[i] for i, t in dfm.disposed_at.items() if dfm.disposition[i] == BUILT], "eb_path_us"
    ))
    m.update({
        "ros_requests": sum(u.requests for u in sc.ros),
        "ros_unknown_requests": sum(u.unknown_requests for u in sc.ros),
        "ros_xoff_events": sum(u.xoff_events for u in sc.ros),
        "ros_rob_hwm_bytes": max(u.max_rob_high_watermark for u in sc.ros),
        "ros_queue_hwm": max(u.queue_hwm for u in sc.ros),
        "ros_occupancy_bytes": sum(u.occupancy_bytes for u in sc.ros),
        "pros_occupancy_bytes": sc.pros.occupancy_bytes,
        "pros_missing": sc.pros.missing,
    })
    build_times = [t for s in sc.sfis for t in s.build_times]
    m.update({
        "sfi_built": len(build_times),
        "sfi_partial": sum(s.partial for s in sc.sfis),
        "sfi_retries": sum(s.retries for s in sc.sfis),
        "sfi_missing": sum(s.missing for s in sc.sfis),
        "sfi_max_in_flight": max(s.max_in_flight for s in sc.sfis),
        "eb_rate_hz": window_rate(build_times, half, cfg.duration_us),
    })
    if sc.efs:
        records = sc.sfo.writer.records_written
        m.update({
            "ef_pulled": sum(e.pulled for e in sc.efs),
            "ef_accepted": sum(e.accepted for e in sc.efs),
            "ef_rejected": sum(e.rejected for e in sc.efs),
            "sfo_records": records,
            "sfo_bytes": sc.sfo.writer.bytes_written,
            "sfo_fraction": records / n_l1,
        })
    m["dropped_messages"] = sum(k.dropped.values())
    for kind in Kind:
        m[f"msgs.{kind.value}"] = k.sent[kind]
    m["end_time_us"] = k.now
    return m


def run_scenario(cfg: ScenarioConfig, *, trace: TextIO | None = None, faults=()) -> ScenarioResult:
    """Wire every component, run for the configured duration and then to quiescence."""
    sc = build_scenario(cfg, trace)
    for f in faults:
        sc.kernel.add_fault(f)
    try:
        if cfg.duration_us > 0:
            for ef in sc.efs:
                ef.start()
            sc.lvl1.start()
            sc.kernel.run_until(cfg.duration_us)
            sc.kernel.run_to_quiescence()
    finally:
        if sc.sfo is not None:
            sc.sfo.writer.close()
    lossless = cfg.loss_prob == 0 and not faults
    violations = check_invariants(sc, lossless=lossless)
    if violations and cfg.strict:
        raise InvariantViolation("; ".join(violations))
    return ScenarioResult(cfg, sc, collect_metrics(sc), violations)
