from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from daqflow.kernel import BusModel, Kernel, LinkModel
from daqflow.model import FragmentStatus, Kind, ProtocolError, clear, data_request, frag_push, make_fragment
from daqflow.ros import DEFAULT_ROB_CAPACITY, ROBBuffer, ROSUnit


def setup_unit(g=12, n_links=48, unit=0, capacity=DEFAULT_ROB_CAPACITY, rx=0, bw=125_000_000):
    k = Kernel()
    replies = []
    k.register("req", lambda m: replies.append((k.now, m)), LinkModel(bw))
    ros = ROSUnit(k, unit, n_links=n_links, grouping_g=g, rob_capacity_bytes=capacity,
                  link=LinkModel(bw, per_msg_rx_cost_us=rx), bus=BusModel(264_000_000, 1))
    return k, ros, replies


def fill(ros, l1id, words=230):
    ros.insert_burst(l1id, [words] * len(ros.robs))


# -- ROB buffer -----------------------------------------------------------

def test_insert_sets_occupancy():
    rob = ROBBuffer(0)
    assert rob.insert(make_fragment(0, 1, 230))
    assert rob.occupancy_bytes == 944 == rob.high_watermark
    assert rob.get(1).wire_size == 944


def test_capacity_refusal():
    k, ros, _ = setup_unit()
    per = 944
    fits = DEFAULT_ROB_CAPACITY // per
    for i in range(fits):
        ros.rob_insert(make_fragment(0, i, 230))
    assert ros.xoff_events == 0
    ros.rob_insert(make_fragment(0, fits, 230))
    assert ros.xoff_events == 1
    assert ros.robs[0].occupancy_bytes == fits * per <= DEFAULT_ROB_CAPACITY


def test_duplicate_insert_is_protocol_error():
    rob = ROBBuffer(0)
    rob.insert(make_fragment(0, 1, 2))
    with pytest.raises(ProtocolError):
        rob.insert(make_fragment(0, 1, 2))


def test_insert_into_wrong_unit():
    _, ros, _ = setup_unit(unit=0)
    with pytest.raises(ProtocolError):
        ros.rob_insert(make_fragment(13, 1, 2))


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 30), st.integers(0, 400)), max_size=80))
def test_occupancy_matches_store(ops):
    rob = ROBBuffer(0, capacity_bytes=5000)
    for is_insert, l1id, words in ops:
        if is_insert and l1id not in rob.store:
            rob.insert_words(l1id, words)
        else:
            rob.remove(l1id)
        assert rob.occupancy_bytes == sum(24 + 4 * w for w in rob.store.values()) <= 5000
        assert rob.high_watermark >= rob.occupancy_bytes


# -- data requests --------------------------------------------------------

def test_roi_request_single_slot():
    k, ros, replies = setup_unit()
    fill(ros, 5)
    k.send(data_request("req", "ros0", 5, [3], tag=1))
    k.run_to_quiescence()
    (_, resp), = replies
    assert resp.kind is Kind.DATA_RESPONSE
    assert resp.payload_bytes == 944 and resp.wire_size == 960
    assert resp.body[1][0].source_id == 3


def test_eb_request_all():
    k, ros, replies = setup_unit()
    fill(ros, 5)
    k.send(data_request("req", "ros0", 5, None, tag=1))
    k.run_to_quiescence()
    resp = replies[0][1]
    assert resp.payload_bytes == 12 * 944 == 11_328
    assert [f.source_id for f in resp.body[1]] == list(range(12))


def test_request_for_cleared_event_gets_substitute():
    k, ros, replies = setup_unit()
    fill(ros, 5)
    ros.handle_clear((5,))
    k.send(data_request("req", "ros0", 5, [0], tag=1))
    k.run_to_quiescence()
    resp = replies[0][1]
    assert resp.payload_bytes == 24
    assert resp.body[1][0].status is FragmentStatus.MISSING_SUBSTITUTE
    assert ros.unknown_requests == 1


def test_bus_serializes_transfers():
    k, ros, replies = setup_unit(g=4, n_links=4, bw=10**12)
    fill(ros, 1)
    k.send(data_request("req", "ros0", 1, None, tag=0))
    k.run_to_quiescence()
    # four transfers of 944 B at 264 MB/s: 1 + 4 (3.58 rounded) us each
    assert replies[0][0] == 4 * 5


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 200)), min_size=1, max_size=30))
def test_requests_served_fifo(reqs):
    k, ros, replies = setup_unit(g=4, n_links=4, rx=3)
    for l1id in range(10):
        fill(ros, l1id, 10)
    for tag, (l1id, t) in enumerate(reqs):
        k.schedule_at(t, k.send, data_request("req", "ros0", l1id, [tag % 4], tag))
    k.run_to_quiescence()
    arrival = sorted(range(len(reqs)), key=lambda i: (reqs[i][1], i))
    assert ros.response_order == arrival
    assert [m.body[0] for _, m in replies] == arrival


# -- clears ---------------------------------------------------------------

def test_clear_batch_of_300():
    _, ros, _ = setup_unit()
    for i in range(1, 301):
        fill(ros, i)
    before = ros.occupancy_bytes
    ros.handle_clear(tuple(range(1, 301)))
    assert before - ros.occupancy_bytes == 300 * 12 * 944
    assert ros.occupancy_bytes == 0
    assert ros.clears_applied == 300


def test_clear_empty_and_idempotent():
    _, ros, _ = setup_unit()
    for i in range(4):
        fill(ros, i)
    ros.handle_clear(())
    assert ros.occupancy_bytes == 4 * 12 * 944
    ros.handle_clear((1, 2))
    state = [dict(r.store) for r in ros.robs]
    ros.handle_clear((1, 2))
    assert [dict(r.store) for r in ros.robs] == state


def test_messages_routed():
    k, ros, _ = setup_unit(g=2, n_links=2)
    k.register("l1", None)
    k.send(frag_push("l1", "ros0", 9, [3, 4]))
    k.run_to_quiescence()
    assert ros.occupancy_bytes == 2 * 24 + 4 * 7
    k.send(clear("l1", "ros0", [9]))
    k.run_to_quiescence()
    assert ros.occupancy_bytes == 0
    counters = ros.counters()
    assert counters["ros0.clears_applied"] == 1 and counters["ros0.rob_hwm_bytes"] == 40
