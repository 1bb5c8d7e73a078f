"""Blocking supervisor/controller event channel.

The supervisor publishes one event at a time and does not resume the
guest until the controller acknowledges it.  Configuration submitted by
the controller is buffered and handed to the supervisor at the next resume.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, BinaryIO, Callable, Iterator, Optional


class EventKind(IntEnum):
    PAGE_FAULT = 1
    SINGLE_STEP = 2


@dataclass(frozen=True)
class Event:
    kind: EventKind
    sequence: int
    payload: Any = None


class ChannelClosed(RuntimeError):
    pass


class StaleAck(ValueError):
    pass


class ChannelBusy(RuntimeError):
    pass


@dataclass
class ConfigChange:
    fields: dict[str, Any] = field(default_factory=dict)
    commands: list[tuple] = field(default_factory=list)

    def __bool__(self):
        return bool(self.fields or self.commands)


_RECORD = struct.Struct("<QBI")


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bytes, bytearray)):
        return obj.hex()
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, range):
        return [obj.start, obj.stop]
    if isinstance(obj, IntEnum):
        return int(obj)
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    return obj


def encode_record(event: Event) -> bytes:
    body = json.dumps(_jsonable(event.payload), sort_keys=True).encode()
    return _RECORD.pack(event.sequence, int(event.kind), len(body)) + body


def read_log(fh: BinaryIO) -> Iterator[tuple[int, EventKind, Any]]:
    while True:
        head = fh.read(_RECORD.size)
        if not head:
            return
        if len(head) < _RECORD.size:
            raise ValueError("truncated event log record")
        seq, kind, n = _RECORD.unpack(head)
        body = fh.read(n)
        if len(body) < n:
            raise ValueError("truncated event log payload")
        yield seq, EventKind(kind), json.loads(body)


class EventChannel:
    """Single-slot mailbox shared by exactly one supervisor and one controller.

    ``post``/``is_acked`` are the non-blocking halves of ``send_event`` so
    that schedules can be driven step by step in tests.
    """

    def __init__(self, log: Optional[BinaryIO] = None, spin_interval: float = 0.001):
        self._cond = threading.Condition()
        self._slot: Optional[Event] = None
        self._acked = True
        self._seq = 0
        self._closed = False
        self._pending = ConfigChange()
        self.log = log
        self.spin_interval = spin_interval

    # supervisor side -------------------------------------------------
    def post(self, kind: EventKind, payload: Any = None) -> Event:
        with self._cond:
            if self._closed:
                raise ChannelClosed("channel closed")
            if not self._acked:
                raise ChannelBusy("previous event not yet acknowledged")
            self._seq += 1
            ev = Event(EventKind(kind), self._seq, payload)
            self._slot = ev
            self._acked = False
            if self.log is not None:
                self.log.write(encode_record(ev))
            self._cond.notify_all()
            return ev

    def is_acked(self, sequence: int) -> bool:
        with self._cond:
            if self._closed and not (self._acked and self._seq == sequence):
                raise ChannelClosed("channel closed before acknowledgment")
            return self._acked and self._seq >= sequence

    def wait_ack(self, sequence: int, timeout: Optional[float] = None) -> bool:
        with self._cond:
            ok = self._cond.wait_for(lambda: self._closed or (self._acked and self._seq >= sequence), timeout)
            if not ok:
                return False
            if not self._acked:
                raise ChannelClosed("channel closed before acknowledgment")
            return True

    def send_event(self, kind: EventKind, payload: Any = None, timeout: Optional[float] = None) -> Event:
        ev = self.post(kind, payload)
        if not self.wait_ack(ev.sequence, timeout):
            raise TimeoutError(f"event {ev.sequence} not acknowledged")
        return ev

    def take_config(self) -> ConfigChange:
        """Called by the supervisor right before resuming the guest."""
        with self._cond:
            change, self._pending = self._pending, ConfigChange()
            return change

    # controller side -------------------------------------------------
    def poll_event(self) -> Optional[Event]:
        with self._cond:
            return None if self._acked else self._slot

    def wait_event(self, timeout: Optional[float] = None) -> Optional[Event]:
        with self._cond:
            self._cond.wait_for(lambda: self._closed or not self._acked, timeout)
            return None if self._acked else self._slot

    def ack_event(self, sequence: int) -> None:
        with self._cond:
            if self._acked or self._slot is None or self._slot.sequence != sequence:
                raise StaleAck(f"no pending event with sequence {sequence}")
            self._acked = True
            self._cond.notify_all()

    def submit_config(self, commands=(), **fields) -> None:
        with self._cond:
            self._pending.fields.update(fields)
            self._pending.commands.extend(commands)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def last_sequence(self) -> int:
        return self._seq


class DirectChannel(EventChannel):
    """In-process hand-off: ``send_event`` runs the controller callback inline.

    The callback must acknowledge before returning; the blocking and
    ordering contract is the same as for the threaded channel.
    """

    def __init__(self, handler: Callable[["DirectChannel", Event], None], log: Optional[BinaryIO] = None):
        super().__init__(log)
        self.handler = handler

    def send_event(self, kind: EventKind, payload: Any = None, timeout: Optional[float] = None) -> Event:
        ev = self.post(kind, payload)
        self.handler(self, ev)
        if not self.is_acked(ev.sequence):
            raise RuntimeError(f"controller returned without acknowledging event {ev.sequence}")
        return ev
