"""Small-instance oracle: the kernel trace equals the hand-derived timeline.

The table below is transcribed from docs/small_instance_timeline.md. ``ROI``
stands for the ROI record size, which is 40 or 44 bytes depending on a seeded
calorimeter/muon split and takes 4 us either way.
"""

from __future__ import annotations

import io
from pathlib import Path

from daqflow.config import load_config
from daqflow.scenario import run_scenario

CFG = Path(__file__).parent / "data" / "small_instance.cfg"

# (t, event, kind, src, dst, bytes) for event 0
EVENT0 = [
    (1000, "SEND", "FRAG_PUSH", "lvl1", "ros0", 112),
    (1000, "SEND", "FRAG_PUSH", "lvl1", "ros1", 112),
    (1000, "SEND", "ROI_INPUT", "lvl1", "roib", "ROI"),
    (1004, "RECV", "ROI_INPUT", "lvl1", "roib", "ROI"),
    (1004, "SEND", "ROI_ASSIGN", "roib", "l2sv0", "ROI"),
    (1006, "RECV", "FRAG_PUSH", "lvl1", "ros0", 112),
    (1006, "RECV", "FRAG_PUSH", "lvl1", "ros1", 112),
    (1009, "RECV", "ROI_ASSIGN", "roib", "l2sv0", "ROI"),
    (1010, "SEND", "ROI_ASSIGN", "l2sv0", "l2pu0", "ROI"),
    (1021, "RECV", "ROI_ASSIGN", "l2sv0", "l2pu0", "ROI"),
    (1022, "SEND", "DATA_REQUEST", "l2pu0", "ros0", 32),
    (1023, "SEND", "DATA_REQUEST", "l2pu0", "ros1", 32),
    (1033, "RECV", "DATA_REQUEST", "l2pu0", "ros0", 32),
    (1036, "RECV", "DATA_REQUEST", "l2pu0", "ros1", 32),
    (1047, "SEND", "DATA_RESPONSE", "ros0", "l2pu0", 112),
    (1050, "SEND", "DATA_RESPONSE", "ros1", "l2pu0", 112),
    (1065, "RECV", "DATA_RESPONSE", "ros0", "l2pu0", 112),
    (1076, "RECV", "DATA_RESPONSE", "ros1", "l2pu0", 112),
    (1177, "SEND", "L2_RESULT", "l2pu0", "pros", 24),
    (1178, "SEND", "L2_DECISION", "l2pu0", "l2sv0", 24),
    (1185, "RECV", "L2_RESULT", "l2pu0", "pros", 24),
    (1187, "RECV", "L2_DECISION", "l2pu0", "l2sv0", 24),
    (1188, "SEND", "L2_DECISION", "l2sv0", "dfm", 24),
    (1196, "RECV", "L2_DECISION", "l2sv0", "dfm", 24),
    (1197, "SEND", "EB_ASSIGN", "dfm", "sfi0", 24),
    (1206, "RECV", "EB_ASSIGN", "dfm", "sfi0", 24),
    (1207, "SEND", "DATA_REQUEST", "sfi0", "ros0", 24),
    (1208, "SEND", "DATA_REQUEST", "sfi0", "ros1", 24),
    (1209, "SEND", "DATA_REQUEST", "sfi0", "pros", 24),
    (1217, "RECV", "DATA_REQUEST", "sfi0", "ros0", 24),
    (1219, "RECV", "DATA_REQUEST", "sfi0", "ros1", 24),
    (1219, "RECV", "DATA_REQUEST", "sfi0", "pros", 24),
    (1220, "SEND", "DATA_RESPONSE", "pros", "sfi0", 48),
    (1231, "SEND", "DATA_RESPONSE", "ros0", "sfi0", 112),
    (1232, "RECV", "DATA_RESPONSE", "pros", "sfi0", 48),
    (1233, "SEND", "DATA_RESPONSE", "ros1", "sfi0", 112),
    (1249, "RECV", "DATA_RESPONSE", "ros0", "sfi0", 112),
    (1260, "RECV", "DATA_RESPONSE", "ros1", "sfi0", 112),
    (1261, "SEND", "EOE", "sfi0", "dfm", 24),
    (1269, "RECV", "EOE", "sfi0", "dfm", 24),
]

CLEARS = [
    (3270, "SEND", "CLEAR", "dfm", "ros0", 28),
    (3271, "SEND", "CLEAR", "dfm", "ros1", 28),
    (3272, "SEND", "CLEAR", "dfm", "pros", 28),
    (3281, "RECV", "CLEAR", "dfm", "ros0", 28),
    (3284, "RECV", "CLEAR", "dfm", "ros1", 28),
    (3285, "RECV", "CLEAR", "dfm", "pros", 28),
]


def expected_lines() -> list[tuple]:
    out = []
    for ev in range(3):
        for t, what, kind, src, dst, size in EVENT0:
            out.append((t + 1000 * ev, what, kind, src, dst, str(ev), str(size)))
    for t, what, kind, src, dst, size in CLEARS:
        out.append((t, what, kind, src, dst, "batch:3", str(size)))
    return out


def run_trace() -> tuple[list[tuple], object]:
    buf = io.StringIO()
    res = run_scenario(load_config(CFG), trace=buf)
    lines = []
    for raw in buf.getvalue().splitlines():
        t, what, kind, src, dst, l1, size = raw.split("\t")
        if kind in ("ROI_INPUT", "ROI_ASSIGN"):
            assert size in ("40", "44"), raw
            size = "ROI"
        lines.append((int(t), what, kind, src, dst, l1, size))
    return lines, res


def test_trace_matches_hand_timeline():
    actual, _ = run_trace()
    expected = expected_lines()
    assert len(actual) == len(expected) == 126
    assert [ln[0] for ln in actual] == sorted(ln[0] for ln in actual)
    # same-timestamp lines may interleave differently; the multiset must agree exactly
    assert sorted(actual) == sorted(expected)


def test_small_instance_drains():
    _, res = run_trace()
    sc = res.scenario
    assert res.violations == []
    assert all(u.occupancy_bytes == 0 for u in sc.ros)
    assert sc.pros.store == {}
    assert sorted(sc.dfm.disposition.values()) == ["built"] * 3
    assert sc.dfm.batch_sizes == [3]
