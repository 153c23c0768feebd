"""Canned experiments and the calibration procedure.

Every experiment takes a base ``ScenarioConfig`` (host costs, bandwidths,
seed) plus a few sweep parameters, wires the minimal set of components it
needs around a synthetic driver, and returns a ``MetricsSnapshot`` with one
row per sweep point. The snapshot meta carries the experiment name, the
base config and the parameters, which is all ``rerun_from_csv`` needs.

Calibration files use the config syntax. A bare key applies to every
experiment; ``exp-c.fragment_words = 7807`` applies to exp-c only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, TextIO

from .config import ScenarioConfig, parse_assignments, with_overrides
from .efio import SFO, EFNode, SFOWriter
from .eventbuilder import DFM, SFI
from .kernel import BusModel, Kernel, LinkModel
from .metrics import MetricsSnapshot, emit_metrics_csv, read_csv_meta, summarize
from .model import (
    ConfigError,
    EventId,
    Kind,
    Message,
    build_roi_record,
    clear,
    control,
    data_request,
    frag_push,
    l2_result,
    roi_message,
)
from .roi import L2PU, PseudoROS
from .ros import ROSUnit

EXPERIMENTS = ("exp-a", "exp-b", "exp-c", "calibrate")
CALIBRATION_FILE = "calibration.txt"

# paper-scale event: ~1.5 MB spread over the desk-scale 48 links
PAPER_EVENT_BYTES = 1_500_000
PAPER_FRAGMENT_WORDS = (PAPER_EVENT_BYTES // 48 - 24) // 4
TARGET_SFI_INGEST = 95_000_000
# exp-a anchor: one 12-link unit sustains the full-rate 2% ROI load with headroom
TARGET_ROS_KNEE_HZ = 100_000.0

FAST_LINK = LinkModel(bandwidth_bytes_per_s=10_000_000_000)


def _host_link(cfg: ScenarioConfig, rx: int, tx: int, **kw: Any) -> LinkModel:
    base = dict(
        bandwidth_bytes_per_s=cfg.link_bandwidth,
        prop_latency_us=cfg.prop_latency_us,
        per_msg_rx_cost_us=rx,
        per_msg_tx_cost_us=tx,
    )
    base.update(kw)
    return LinkModel(**base)


def _unit_channels(cfg: ScenarioConfig, n_links: int, g: int) -> list[tuple[str, tuple[int, ...], LinkModel]]:
    out = []
    for u in range(-(-n_links // g)):
        sources = range(u * g, min((u + 1) * g, n_links))
        bw = cfg.slink_bandwidth * len(sources)
        out.append((f"ros{u}", tuple(cfg.words_of(s) for s in sources), LinkModel(bandwidth_bytes_per_s=bw)))
    return out


# -- calibration files -------------------------------------------------------


def read_calibration(path: str | Path) -> dict[str, dict[str, Any]]:
    """Parse a calibration file into {scope: {key: value}}; scope '' is global."""
    scoped: dict[str, dict[str, Any]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key = key.strip()
        scope, dot, name = key.rpartition(".")
        if dot and scope not in EXPERIMENTS:
            raise ConfigError(f"{path}:{lineno}: unknown scope {scope!r}")
        parsed = parse_assignments([f"{name} = {value}"], f"{path}:{lineno}")
        scoped.setdefault(scope, {}).update(parsed)
    return scoped


def write_calibration(path: str | Path, scoped: Mapping[str, Mapping[str, Any]], comment: str = "") -> None:
    lines = ["# daqflow calibration" + (f": {comment}" if comment else "")]
    for scope in sorted(scoped):
        for key, value in scoped[scope].items():
            lines.append(f"{scope + '.' if scope else ''}{key} = {value!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def apply_calibration(cfg: ScenarioConfig, scoped: Mapping[str, Mapping[str, Any]] | None, name: str) -> ScenarioConfig:
    if not scoped:
        return cfg
    merged = dict(scoped.get("", {}))
    merged.update(scoped.get(name, {}))
    return with_overrides(cfg, merged)


# -- exp-a: ROS unit under a synthetic requester ----------------------------


@dataclass
class ProbeResult:
    rate_hz: float
    events: int
    xoff_events: int
    outstanding_hwm: int
    queue_hwm: int
    unknown_requests: int

    def sustainable(self, limit: int) -> bool:
        return self.xoff_events == 0 and self.outstanding_hwm <= limit


class ROSRequester:
    """Open-loop stand-in for LVL1, the L2PUs, the SFIs and the DFM around one ROS unit.

    Each event pushes one fragment per link. A fractional accumulator turns
    ``12 * roi_fraction`` into whole single-ROB ROI requests per event and
    ``eb_fraction`` into whole-unit event-building requests; an event is
    cleared (in batches) once all its requests are answered.
    """

    node_id = "req"

    def __init__(self, kernel: Kernel, cfg: ScenarioConfig, unit: ROSUnit, *, rate_hz: float,
                 n_events: int, roi_fraction: float, eb_fraction: float,
                 roi_delay_us: int = 10, eb_delay_us: int = 1000):
        self.kernel = kernel
        self.unit = unit
        self.n_slots = len(unit.robs)
        self.words = tuple(cfg.words_of(s) for s in unit.sources)
        self.channel = LinkModel(bandwidth_bytes_per_s=cfg.slink_bandwidth * self.n_slots)
        self.period_us = 1e6 / rate_hz
        self.n_events = n_events
        self.roi_per_event = self.n_slots * roi_fraction
        self.eb_fraction = eb_fraction
        self.roi_delay_us = roi_delay_us
        self.eb_delay_us = eb_delay_us
        self.clear_batch_max = cfg.clear_batch_max
        self.rng = kernel.rng(self.node_id)
        self._roi_acc = 0.0
        self._eb_acc = 0.0
        self._tag = 0
        self.pending: dict[EventId, int] = {}
        self.outstanding = 0
        self.outstanding_hwm = 0
        self.requests = 0
        self.clear_batch: list[EventId] = []
        self.next_id = 0
        kernel.register(self.node_id, self.on_message, FAST_LINK)

    def start(self) -> None:
        for i in range(self.n_events):
            self.kernel.schedule_at(int(i * self.period_us), self._event)

    def _event(self) -> None:
        l1id = self.next_id
        self.next_id += 1
        k = self.kernel
        k.send(frag_push(self.node_id, self.unit.node_id, l1id, self.words), channel=self.channel)
        self._roi_acc += self.roi_per_event
        n_roi = int(self._roi_acc)
        self._roi_acc -= n_roi
        self._eb_acc += self.eb_fraction
        n_eb = int(self._eb_acc)
        self._eb_acc -= n_eb
        if n_roi + n_eb == 0:
            self._done(l1id)
            return
        self.pending[l1id] = n_roi + n_eb
        for _ in range(n_roi):
            k.schedule_in(self.roi_delay_us, self._request, l1id, [self.rng.randrange(self.n_slots)])
        for _ in range(n_eb):
            k.schedule_in(self.eb_delay_us, self._request, l1id, None)

    def _request(self, l1id: EventId, slots) -> None:
        self.requests += 1
        self.outstanding += 1
        if self.outstanding > self.outstanding_hwm:
            self.outstanding_hwm = self.outstanding
        tag = self._tag
        self._tag += 1
        self.kernel.send(data_request(self.node_id, self.unit.node_id, l1id, slots, tag))

    def on_message(self, msg: Message) -> None:
        if msg.kind is not Kind.DATA_RESPONSE:
            return
        self.outstanding -= 1
        left = self.pending[msg.l1id] - 1
        if left:
            self.pending[msg.l1id] = left
        else:
            del self.pending[msg.l1id]
            self._done(msg.l1id)

    def _done(self, l1id: EventId) -> None:
        self.clear_batch.append(l1id)
        if len(self.clear_batch) >= self.clear_batch_max:
            self.flush()

    def flush(self) -> None:
        if self.clear_batch:
            self.kernel.send(clear(self.node_id, self.unit.node_id, self.clear_batch))
            self.clear_batch = []


def ros_probe(cfg: ScenarioConfig, rate_hz: float, *, roi_fraction: float, eb_fraction: float,
              n_events: int, trace: TextIO | None = None) -> ProbeResult:
    """Run one ROS unit at a fixed periodic L1 rate and report its backlog figures."""
    g = cfg.grouping_g
    k = Kernel(cfg.seed, trace=trace, max_same_time_actions=cfg.max_same_time_actions)
    unit = ROSUnit(k, 0, n_links=g, grouping_g=g, bus=BusModel(cfg.bus_bandwidth, cfg.bus_transfer_cost_us),
                   link=_host_link(cfg, cfg.ros_rx_cost_us, cfg.ros_tx_cost_us),
                   rob_capacity_bytes=cfg.rob_capacity_bytes)
    req = ROSRequester(k, cfg, unit, rate_hz=rate_hz, n_events=n_events,
                       roi_fraction=roi_fraction, eb_fraction=eb_fraction)
    req.start()
    k.run_until(int(n_events * req.period_us) + req.eb_delay_us)
    req.flush()
    k.run_to_quiescence()
    return ProbeResult(rate_hz, n_events, unit.xoff_events, req.outstanding_hwm, unit.queue_hwm,
                       unit.unknown_requests)


def analytic_ceiling_hz(cfg: ScenarioConfig, roi_fraction: float, eb_fraction: float) -> float:
    """1 / (IOManager cost per request x requests per event)."""
    per_request = cfg.ros_rx_cost_us + cfg.ros_tx_cost_us
    per_event = cfg.grouping_g * roi_fraction + eb_fraction
    return 1e6 / (per_request * per_event)


@dataclass
class SearchResult:
    rate_hz: float
    lo: float
    hi: float
    probes: list[ProbeResult] = field(default_factory=list)


def max_sustainable_rate(probe: Callable[[float], ProbeResult], *, start_hz: float, limit: int,
                         rel_tol: float = 0.02, step: float = 1.25, max_probes: int = 60) -> SearchResult:
    """Bracket then bisect the largest sustainable rate; the bracket ends within ``rel_tol``."""
    probes: list[ProbeResult] = []

    def ok(rate: float) -> bool:
        r = probe(rate)
        probes.append(r)
        return r.sustainable(limit)

    lo = hi = None
    rate = start_hz
    if ok(rate):
        lo = rate
        while hi is None:
            rate *= step
            if ok(rate):
                lo = rate
            else:
                hi = rate
            if len(probes) >= max_probes:
                raise RuntimeError("rate search did not find an unsustainable rate")
    else:
        hi = rate
        while lo is None:
            rate /= step
            if ok(rate):
                lo = rate
            else:
                hi = rate
            if len(probes) >= max_probes:
                raise RuntimeError("rate search did not find a sustainable rate")
    while hi - lo > rel_tol * lo:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return SearchResult(lo, lo, hi, probes)


def ros_knee(cfg: ScenarioConfig, roi_fraction: float, eb_fraction: float, *, limit: int = 32,
             target_requests: int = 8000, min_events: int = 2000) -> SearchResult:
    per_event = cfg.grouping_g * roi_fraction + eb_fraction
    n_events = max(min_events, math.ceil(target_requests / per_event))
    start = 0.8 * analytic_ceiling_hz(cfg, roi_fraction, eb_fraction)
    return max_sustainable_rate(
        lambda r: ros_probe(cfg, r, roi_fraction=roi_fraction, eb_fraction=eb_fraction, n_events=n_events),
        start_hz=start, limit=limit,
    )


EXP_A_DEFAULTS = dict(
    roi_fractions=(0.02, 0.05, 0.1, 0.2, 0.35, 0.5),
    eb_fractions=(0.02, 0.03, 0.04),
    limit=32,
    target_requests=8000,
)


def exp_a(base: ScenarioConfig, **params: Any) -> MetricsSnapshot:
    p = {**EXP_A_DEFAULTS, **params}
    cfg = base.replace(n_links=base.grouping_g)
    rows = []
    for f in p["roi_fractions"]:
        for eb in p["eb_fractions"]:
            res = ros_knee(cfg, f, eb, limit=p["limit"], target_requests=p["target_requests"])
            rows.append({
                "roi_fraction": f,
                "eb_fraction": eb,
                "max_rate_hz": res.rate_hz,
                "bracket_hi_hz": res.hi,
                "ceiling_hz": analytic_ceiling_hz(cfg, f, eb),
                "probes": len(res.probes),
            })
    return _snapshot("exp-a", base, p, rows)


# -- exp-b: ROI collection time of one L2PU ----------------------------------


class ROIDriver:
    """Plays LVL1 and the supervisor for a single L2PU: one ROI per event, no overlap."""

    node_id = "l2sv0"

    def __init__(self, kernel: Kernel, cfg: ScenarioConfig, rois: list[list[int]], period_us: int,
                 ros_ids: list[str]):
        self.kernel = kernel
        self.cfg = cfg
        self.rois = rois
        self.period_us = period_us
        self.channels = {name: (words, ch) for name, words, ch in _unit_channels(cfg, cfg.n_links, cfg.grouping_g)}
        self.ros_ids = ros_ids
        self.fragment_bytes = cfg.fragment_bytes()
        self.decisions = 0
        kernel.register(self.node_id, self.on_message, FAST_LINK)

    def start(self) -> None:
        for i, robs in enumerate(self.rois):
            self.kernel.schedule_at(i * self.period_us, self._event, i, robs)

    def _event(self, l1id: EventId, robs: list[int]) -> None:
        units = sorted({s // self.cfg.grouping_g for s in robs})
        for u in units:
            words, ch = self.channels[f"ros{u}"]
            self.kernel.send(frag_push(self.node_id, f"ros{u}", l1id, words), channel=ch)
        roi = build_roi_record(l1id, [robs], [], n_links=self.cfg.n_links, fragment_bytes=self.fragment_bytes)
        # leave the S-Link bursts time to land before the L2PU asks for them
        self.kernel.schedule_in(self.period_us // 4, self._assign, roi, units)

    def _assign(self, roi, units) -> None:
        self.kernel.send(roi_message(Kind.ROI_ASSIGN, self.node_id, "l2pu0", roi))

    def on_message(self, msg: Message) -> None:
        if msg.kind is Kind.L2_DECISION:
            self.decisions += 1
            for name in self.ros_ids:
                self.kernel.send(clear(self.node_id, name, (msg.l1id,)))


def roi_layout(spread: int, n_robs: int, g: int) -> list[int]:
    """``n_robs`` ROBs spread evenly over the first ``spread`` units."""
    if n_robs % spread:
        raise ConfigError(f"{n_robs} ROBs do not split evenly over {spread} units")
    per = n_robs // spread
    if per > g:
        raise ConfigError(f"{per} ROBs per unit exceed grouping {g}")
    return [u * g + j for u in range(spread) for j in range(per)]


def collect_time_point(base: ScenarioConfig, *, spread: int, roi_bytes: int, n_robs: int, n_events: int,
                       rate_hz: float) -> dict[str, Any]:
    per_rob = roi_bytes // n_robs
    words = max(0, (per_rob - 24) // 4)
    n_units = max(spread, 8)
    cfg = base.replace(n_links=n_units * base.grouping_g, fragment_words=words, link_words=(),
                       l2_accept_prob=0.0)
    k = Kernel(cfg.seed, max_same_time_actions=cfg.max_same_time_actions)
    bus = BusModel(cfg.bus_bandwidth, cfg.bus_transfer_cost_us)
    ros = [ROSUnit(k, u, n_links=cfg.n_links, grouping_g=cfg.grouping_g, bus=bus,
                   link=_host_link(cfg, cfg.ros_rx_cost_us, cfg.ros_tx_cost_us),
                   rob_capacity_bytes=cfg.rob_capacity_bytes) for u in range(n_units)]
    pu = L2PU(k, 0, grouping_g=cfg.grouping_g, roi_timeout_us=cfg.roi_timeout_us, accept_prob=0.0,
              proc_time_us=0, link=_host_link(cfg, cfg.l2pu_rx_cost_us, cfg.l2pu_tx_cost_us))
    period = int(1e6 / rate_hz)
    layout = roi_layout(spread, n_robs, cfg.grouping_g)
    drv = ROIDriver(k, cfg, [layout] * n_events, period, [r.node_id for r in ros])
    drv.start()
    k.run_to_quiescence()
    row = {"spread": spread, "roi_bytes": roi_bytes, "fragment_bytes": 24 + 4 * words}
    row.update(summarize(pu.collect_times, "collect_us"))
    row["roi_timeouts"] = pu.roi_timeouts
    row["unknown_requests"] = sum(r.unknown_requests for r in ros)
    return row


EXP_B_DEFAULTS = dict(
    spreads=(1, 2, 4, 8),
    roi_kbytes=(1, 2, 4, 8, 16),
    n_robs=8,
    n_events=200,
    rate_hz=500.0,
)


def exp_b(base: ScenarioConfig, **params: Any) -> MetricsSnapshot:
    p = {**EXP_B_DEFAULTS, **params}
    rows = [
        collect_time_point(base, spread=s, roi_bytes=kb * 1024, n_robs=p["n_robs"], n_events=p["n_events"],
                           rate_hz=p["rate_hz"])
        for s in p["spreads"]
        for kb in p["roi_kbytes"]
    ]
    return _snapshot("exp-b", base, p, rows)


# -- exp-c: one SFI against the ROS units ------------------------------------


class BuildDriver:
    """Closed-loop LVL1 + LVL2 stand-in: keeps ``window`` accepted events in flight at the DFM."""

    node_id = "lvl2"

    def __init__(self, kernel: Kernel, cfg: ScenarioConfig, dfm: DFM, *, n_events: int, window: int,
                 decision_delay_us: int):
        self.kernel = kernel
        self.cfg = cfg
        self.units = _unit_channels(cfg, cfg.n_links, cfg.grouping_g)
        self.n_events = n_events
        self.window = window
        self.decision_delay_us = decision_delay_us
        self.launched = 0
        dfm.on_done.append(self._on_done)
        kernel.register(self.node_id, None, FAST_LINK)

    def start(self) -> None:
        for _ in range(min(self.window, self.n_events)):
            self._launch()

    def _launch(self) -> None:
        l1id = self.launched
        self.launched += 1
        k = self.kernel
        for name, words, ch in self.units:
            k.send(frag_push(self.node_id, name, l1id, words), channel=ch)
        k.send(l2_result(self.node_id, "pros", l1id, self.cfg.l2_result_bytes), lossy=False)
        k.schedule_in(self.decision_delay_us, self._decide, l1id)

    def _decide(self, l1id: EventId) -> None:
        self.kernel.send(control(Kind.L2_DECISION, self.node_id, "dfm", l1id, True), lossy=False)

    def _on_done(self, l1id: EventId, how: str) -> None:
        if self.launched < self.n_events:
            self._launch()


def build_rate_point(base: ScenarioConfig, *, grouping_g: int, ef_enabled: bool, n_events: int, window: int,
                     warmup: int, n_ef: int, ef_proc_time_us: int, decision_delay_us: int = 1000,
                     trace: TextIO | None = None) -> dict[str, Any]:
    cfg = base.replace(grouping_g=grouping_g, n_sfi=1, ef_enabled=ef_enabled, n_ef=n_ef,
                       ef_proc_time_us=ef_proc_time_us, rob_capacity_bytes=1 << 40, loss_prob=0.0)
    k = Kernel(cfg.seed, trace=trace, max_same_time_actions=cfg.max_same_time_actions)
    bus = BusModel(cfg.bus_bandwidth, cfg.bus_transfer_cost_us)
    ros = [ROSUnit(k, u, n_links=cfg.n_links, grouping_g=cfg.grouping_g, bus=bus,
                   link=_host_link(cfg, cfg.ros_rx_cost_us, cfg.ros_tx_cost_us),
                   rob_capacity_bytes=cfg.rob_capacity_bytes) for u in range(cfg.n_units)]
    pros = PseudoROS(k, _host_link(cfg, cfg.pros_rx_cost_us, cfg.pros_tx_cost_us))
    dfm = DFM(k, ["sfi0"], [r.node_id for r in ros] + ["pros"], clear_batch_max=cfg.clear_batch_max,
              clear_flush_timeout_us=cfg.clear_flush_timeout_us, build_timeout_us=cfg.build_timeout_us,
              link=_host_link(cfg, cfg.dfm_rx_cost_us, cfg.dfm_tx_cost_us))
    sfi = SFI(k, 0, [r.node_id for r in ros] + ["pros"], n_links=cfg.n_links, max_credits=cfg.max_credits,
              frag_timeout_us=cfg.frag_timeout_us, ef_enabled=ef_enabled, strict=cfg.strict,
              link=_host_link(cfg, cfg.sfi_rx_cost_us, cfg.sfi_tx_cost_us,
                              bandwidth_bytes_per_s=cfg.sfi_bandwidth, shared_io=cfg.sfi_shared_io))
    efs = []
    sfo = None
    if ef_enabled:
        sfo = SFO(k, SFOWriter(None), _host_link(cfg, 0, 0))
        efs = [EFNode(k, i, "sfi0", accept_prob=cfg.ef_accept_prob, proc_dist=cfg.ef_proc_dist,
                      proc_time_us=cfg.ef_proc_time_us, link=_host_link(cfg, cfg.ef_rx_cost_us, cfg.ef_tx_cost_us))
               for i in range(n_ef)]
    drv = BuildDriver(k, cfg, dfm, n_events=n_events, window=window, decision_delay_us=decision_delay_us)
    for ef in efs:
        ef.start()
    drv.start()
    k.run_to_quiescence()
    times = sfi.build_times[warmup:]
    nbytes = sfi.build_bytes[warmup + 1:]
    span = times[-1] - times[0] if len(times) > 1 else 0
    rate = (len(times) - 1) * 1e6 / span if span > 0 else math.nan
    ingest = sum(nbytes) * 1e6 / span if span > 0 else math.nan
    return {
        "grouping_g": grouping_g,
        "ef_enabled": ef_enabled,
        "build_rate_hz": rate,
        "ingest_mb_s": ingest / 1e6,
        "event_bytes": sfi.build_bytes[-1] if sfi.build_bytes else 0,
        "requests_per_event": cfg.n_units + 1,
        "built": len(sfi.build_times),
        "partial": sfi.partial,
        "ef_shipped": sfi.shipped,
        "sfo_records": sfo.writer.records_written if sfo else 0,
    }


EXP_C_DEFAULTS = dict(
    groupings=(1, 2, 3, 4, 6, 12, 24, 48),
    ef_modes=(False, True),
    n_events=240,
    window=8,
    warmup=40,
    n_ef=8,
    ef_proc_time_us=1000,
)


def exp_c(base: ScenarioConfig, **params: Any) -> MetricsSnapshot:
    p = {**EXP_C_DEFAULTS, **params}
    cfg = base.replace(n_links=48)
    rows = [
        build_rate_point(cfg, grouping_g=g, ef_enabled=ef, n_events=p["n_events"], window=p["window"],
                         warmup=p["warmup"], n_ef=p["n_ef"], ef_proc_time_us=p["ef_proc_time_us"])
        for ef in p["ef_modes"]
        for g in p["groupings"]
    ]
    return _snapshot("exp-c", base, p, rows)


# -- calibrate ---------------------------------------------------------------

CALIBRATE_DEFAULTS = dict(
    knee_hz=TARGET_ROS_KNEE_HZ,
    knee_roi_fraction=0.02,
    knee_eb_fraction=0.03,
    ingest_bytes_per_s=TARGET_SFI_INGEST,
    paper_fragment_words=PAPER_FRAGMENT_WORDS,
    ingest_tol=0.005,
    max_iterations=8,
    paper_frag_timeout_us=1_000_000,
)


def fit_ros_rx_cost(cfg: ScenarioConfig, target_hz: float, f: float, eb: float) -> tuple[int, float]:
    """Integer rx cost whose exp-a knee is closest to ``target_hz`` (knee falls as cost rises)."""
    per_event = cfg.grouping_g * f + eb
    guess = max(1, round(1e6 / (target_hz * per_event)) - cfg.ros_tx_cost_us)
    knees: dict[int, float] = {}

    def knee(c: int) -> float:
        if c not in knees:
            knees[c] = ros_knee(cfg.replace(ros_rx_cost_us=c), f, eb).rate_hz
        return knees[c]

    c = guess
    # walk until target is bracketed by c and c + 1
    while knee(c) < target_hz and c > 1:
        c -= 1
    while knee(c + 1) > target_hz:
        c += 1
    best = min((c, c + 1), key=lambda x: (abs(knees[x] - target_hz), x))
    return best, knees[best]


def fit_sfi_bandwidth(cfg: ScenarioConfig, target: float, *, tol: float, max_iterations: int,
                      point: Callable[[ScenarioConfig], dict[str, Any]]) -> tuple[int, float]:
    bw = cfg.sfi_bandwidth
    ingest = math.nan
    for _ in range(max_iterations):
        row = point(cfg.replace(sfi_bandwidth=bw))
        if row["partial"]:
            raise RuntimeError(f"calibration point built {row['partial']} partial events; raise frag_timeout_us")
        ingest = row["ingest_mb_s"] * 1e6
        if abs(ingest - target) <= tol * target:
            break
        bw = int(round(bw * target / ingest))
    return bw, ingest


def calibrate(base: ScenarioConfig, **params: Any) -> tuple[MetricsSnapshot, dict[str, dict[str, Any]]]:
    p = {**CALIBRATE_DEFAULTS, **params}
    a_cfg = base.replace(n_links=base.grouping_g)
    rx, knee = fit_ros_rx_cost(a_cfg, p["knee_hz"], p["knee_roi_fraction"], p["knee_eb_fraction"])
    c_scope = {"fragment_words": p["paper_fragment_words"], "frag_timeout_us": p["paper_frag_timeout_us"]}
    c_base = base.replace(n_links=48, link_words=(), **c_scope)
    c = EXP_C_DEFAULTS

    def point(cfg: ScenarioConfig, ef: bool = False) -> dict[str, Any]:
        return build_rate_point(cfg, grouping_g=12, ef_enabled=ef, n_events=c["n_events"], window=c["window"],
                                warmup=c["warmup"], n_ef=c["n_ef"], ef_proc_time_us=c["ef_proc_time_us"])

    bw, ingest = fit_sfi_bandwidth(c_base, p["ingest_bytes_per_s"], tol=p["ingest_tol"],
                                   max_iterations=p["max_iterations"], point=point)
    with_ef = point(c_base.replace(sfi_bandwidth=bw), True)
    scoped = {
        "": {"ros_rx_cost_us": rx, "sfi_bandwidth": bw},
        "exp-c": c_scope,
    }
    rows = [{
        "ros_rx_cost_us": rx,
        "ros_tx_cost_us": base.ros_tx_cost_us,
        "knee_hz": knee,
        "knee_target_hz": p["knee_hz"],
        "sfi_bandwidth": bw,
        "sfi_ingest_mb_s": ingest / 1e6,
        "sfi_ingest_target_mb_s": p["ingest_bytes_per_s"] / 1e6,
        "paper_fragment_words": p["paper_fragment_words"],
        "build_rate_ef_on_hz": with_ef["build_rate_hz"],
    }]
    return _snapshot("calibrate", base, p, rows), scoped


# -- driver ------------------------------------------------------------------


def _jsonable(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _snapshot(name: str, base: ScenarioConfig, params: Mapping[str, Any], rows: list[dict[str, Any]]) -> MetricsSnapshot:
    meta = {
        "experiment": name,
        "config_digest": base.digest(),
        "config": base.as_dict(),
        "params": {k: _jsonable(v) for k, v in params.items()},
    }
    return MetricsSnapshot.from_records(rows, meta)


@dataclass
class ExperimentOutput:
    name: str
    snapshot: MetricsSnapshot
    csv_path: Path | None = None
    calibration_path: Path | None = None


def run_experiment(name: str, base: ScenarioConfig | None = None, *, out_dir: str | Path | None = None,
                   calibration: str | Path | None = None, params: Mapping[str, Any] | None = None) -> ExperimentOutput:
    """Run one canned experiment; with ``out_dir`` the CSV (and calibration file) are written there."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")
    base = base or ScenarioConfig()
    params = dict(params or {})
    allowed = {"exp-a": EXP_A_DEFAULTS, "exp-b": EXP_B_DEFAULTS, "exp-c": EXP_C_DEFAULTS,
               "calibrate": CALIBRATE_DEFAULTS}[name]
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}: unknown parameter(s) {', '.join(unknown)}")
    out = Path(out_dir) if out_dir is not None else None
    if name == "calibrate":
        snap, scoped = calibrate(base, **params)
        result = ExperimentOutput(name, snap)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            result.calibration_path = out / CALIBRATION_FILE
            write_calibration(result.calibration_path, scoped, f"config {base.digest()}")
    else:
        cfg = base
        if calibration is not None:
            cfg = apply_calibration(base, read_calibration(calibration), name)
        fn = {"exp-a": exp_a, "exp-b": exp_b, "exp-c": exp_c}[name]
        snap = fn(cfg, **params)
        if calibration is not None:
            snap.meta["calibration"] = str(calibration)
        result = ExperimentOutput(name, snap)
    if out is not None:
        result.csv_path = out / f"{name}.csv"
        emit_metrics_csv(result.snapshot, result.csv_path)
    return result


def _params_from_meta(meta_params: Mapping[str, Any]) -> dict[str, Any]:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in meta_params.items()}


def rerun_from_csv(path: str | Path, out_dir: str | Path | None = None) -> ExperimentOutput:
    """Re-run the experiment recorded in a CSV's ``# daqflow`` line."""
    meta = read_csv_meta(path)
    name = meta["experiment"]
    cfg = with_overrides(ScenarioConfig(), meta["config"])
    if cfg.digest() != meta["config_digest"]:
        raise ConfigError(f"{path}: config digest mismatch")
    if name == "run":
        from .scenario import run_scenario

        res = run_scenario(cfg)
        snap = res.snapshot()
        if out_dir is not None:
            p = Path(out_dir) / "run.csv"
            emit_metrics_csv(snap, p)
            return ExperimentOutput(name, snap, p)
        return ExperimentOutput(name, snap)
    return run_experiment(name, cfg, out_dir=out_dir, calibration=meta.get("calibration"),
                          params=_params_from_meta(meta.get("params", {})))
