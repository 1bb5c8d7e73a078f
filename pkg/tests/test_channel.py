import io
import threading
import time

import pytest
from oracles import run_channel_schedule

from cvmstep.channel import (
    ChannelBusy,
    ChannelClosed,
    DirectChannel,
    EventChannel,
    EventKind,
    StaleAck,
    read_log,
)


def test_random_schedules_keep_the_contract():
    for seed in range(500):
        assert run_channel_schedule(seed) == [], seed


def test_send_returns_after_ack():
    ch = EventChannel()

    def controller():
        ev = ch.wait_event(timeout=5)
        ch.ack_event(ev.sequence)

    t = threading.Thread(target=controller)
    t.start()
    ev = ch.send_event(EventKind.PAGE_FAULT, {"gpa": 1}, timeout=5)
    t.join()
    assert ev.sequence == 1 and ch.is_acked(1)


def test_send_blocks_without_ack():
    ch = EventChannel()
    with pytest.raises(TimeoutError):
        ch.send_event(EventKind.SINGLE_STEP, timeout=0.05)
    # the unacknowledged event keeps the slot
    with pytest.raises(ChannelBusy):
        ch.post(EventKind.SINGLE_STEP)


def test_back_to_back_sends_are_serialized():
    ch = EventChannel()
    order = []

    def controller():
        for _ in range(2):
            ev = ch.wait_event(timeout=5)
            order.append(("seen", ev.sequence))
            time.sleep(0.01)
            order.append(("ack", ev.sequence))
            ch.ack_event(ev.sequence)

    t = threading.Thread(target=controller)
    t.start()
    for _ in range(2):
        ev = ch.send_event(EventKind.SINGLE_STEP, timeout=5)
        order.append(("returned", ev.sequence))
    t.join()
    assert order == [("seen", 1), ("ack", 1), ("returned", 1), ("seen", 2), ("ack", 2), ("returned", 2)]


def test_poll_empty_and_stale_ack():
    ch = EventChannel()
    assert ch.poll_event() is None
    ev = ch.post(EventKind.SINGLE_STEP)
    with pytest.raises(StaleAck):
        ch.ack_event(ev.sequence + 1)
    assert not ch.is_acked(ev.sequence)
    ch.ack_event(ev.sequence)
    with pytest.raises(StaleAck):
        ch.ack_event(ev.sequence)


def test_close_releases_blocked_supervisor():
    ch = EventChannel()
    threading.Timer(0.02, ch.close).start()
    with pytest.raises(ChannelClosed):
        ch.send_event(EventKind.SINGLE_STEP, timeout=5)
    with pytest.raises(ChannelClosed):
        ch.post(EventKind.SINGLE_STEP)


def test_config_last_writer_wins():
    ch = EventChannel()
    ch.submit_config(timer_value=3)
    ch.submit_config(timer_value=5, flush_tlb=False)
    change = ch.take_config()
    assert change.fields == {"timer_value": 5, "flush_tlb": False}
    assert not ch.take_config()


def test_log_round_trip():
    buf = io.BytesIO()
    ch = EventChannel(log=buf)
    for k in (EventKind.PAGE_FAULT, EventKind.SINGLE_STEP):
        ev = ch.post(k, {"v": int(k)})
        ch.ack_event(ev.sequence)
    buf.seek(0)
    assert list(read_log(buf)) == [(1, EventKind.PAGE_FAULT, {"v": 1}), (2, EventKind.SINGLE_STEP, {"v": 2})]
    with pytest.raises(ValueError):
        list(read_log(io.BytesIO(buf.getvalue()[:-1])))


def test_direct_channel_requires_ack():
    seen = []
    ch = DirectChannel(lambda c, ev: (seen.append(ev.sequence), c.ack_event(ev.sequence)))
    ch.send_event(EventKind.SINGLE_STEP)
    ch.send_event(EventKind.SINGLE_STEP)
    assert seen == [1, 2]
    lazy = DirectChannel(lambda c, ev: None)
    with pytest.raises(RuntimeError):
        lazy.send_event(EventKind.SINGLE_STEP)
