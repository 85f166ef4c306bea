"""Protocol messages and a simulated lossless (by default) V2X broadcast medium."""

from __future__ import annotations

import enum
import heapq
import random
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Union


class DimKind(str, enum.Enum):
    AROW1 = "AROW1"
    AROW2 = "AROW2"
    AROW3 = "AROW3"
    AROW4_1 = "AROW4_1"
    AROW4_2 = "AROW4_2"
    AROW5 = "AROW5"
    AROW_WAIT = "AROW_WAIT"

    def __str__(self) -> str:
        return self.value


class AckKind(str, enum.Enum):
    ACK2 = "ACK2"
    ACK3 = "ACK3"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Discovery:
    """AROW1 body. ``s1_entry`` is when the sender (re)entered discovery."""

    arrival_ts: int
    s1_entry: int
    lane: int
    is_leading: bool


@dataclass(frozen=True)
class Announcement:
    arbitrator: str


@dataclass(frozen=True)
class TurnSchedule:
    order: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ValueError(f"duplicate vehicle in schedule {self.order}")


@dataclass(frozen=True)
class Handover:
    """AROW4_1 body.

    Besides the successor, the exiting arbitrator publishes which waiting
    vehicles move into the next round (``promoted``), which keep waiting and
    which members of its own round have not left the junction yet.
    """

    next_arbitrator: str | None
    promoted: tuple[str, ...] = ()
    waiting: tuple[str, ...] = ()
    outstanding: tuple[str, ...] = ()


@dataclass(frozen=True)
class WaitRequest:
    addressed: str


class Empty(NamedTuple):
    pass


_PAYLOAD_TYPES = {
    DimKind.AROW1: Discovery,
    DimKind.AROW2: Announcement,
    DimKind.AROW3: TurnSchedule,
    DimKind.AROW4_1: Handover,
    DimKind.AROW4_2: Empty,
    DimKind.AROW5: Empty,
    DimKind.AROW_WAIT: WaitRequest,
}


@dataclass(frozen=True)
class Dim:
    kind: DimKind
    sender: str
    sent_at: int
    payload: object = Empty()

    def __post_init__(self):
        expected = _PAYLOAD_TYPES[self.kind]
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.kind} needs a {expected.__name__} payload")

    def summary(self) -> str:
        p = self.payload
        if isinstance(p, Discovery):
            return f"arrival={p.arrival_ts};s1={p.s1_entry};lane={p.lane};lead={int(p.is_leading)}"
        if isinstance(p, Announcement):
            return f"arb={p.arbitrator}"
        if isinstance(p, TurnSchedule):
            return "order=" + "|".join(p.order)
        if isinstance(p, Handover):
            return (
                f"next={p.next_arbitrator or '-'};promoted={'|'.join(p.promoted)};"
                f"waiting={'|'.join(p.waiting)};outstanding={'|'.join(p.outstanding)}"
            )
        if isinstance(p, WaitRequest):
            return f"to={p.addressed}"
        return ""


@dataclass(frozen=True)
class Ack:
    kind: AckKind
    sender: str
    arbitrator: str
    sent_at: int

    def summary(self) -> str:
        return f"arb={self.arbitrator}"


Message = Union[Dim, Ack]


class MessageLogRecord(NamedTuple):
    time_ms: int
    sender: str
    kind: str
    receiver_count: int
    payload_summary: str


class MessageBus:
    """Event-driven broadcast medium.

    Messages are delivered ``latency_ms`` after sending to every vehicle that
    is inside the intersection zone at delivery time, except the sender.
    Ordering is fully determined by (deliver_at, sender, sequence number).
    """

    def __init__(self, latency_ms: int = 0, loss_probability: float = 0.0, seed: int = 0):
        if latency_ms < 0:
            raise ValueError("latency must be non-negative")
        if not 0.0 <= loss_probability <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        self.latency_ms = latency_ms
        self.loss_probability = loss_probability
        self._rng = random.Random(f"bus:{seed}")
        self._pending: list[tuple[int, str, int, Message]] = []
        self._seq = 0
        self.registered: set[str] = set()
        self.log: list[MessageLogRecord] = []
        self.drops = 0

    def register(self, vehicle: str) -> None:
        self.registered.add(vehicle)

    def __len__(self) -> int:
        return len(self._pending)

    def broadcast(self, msg: Message, now: int) -> None:
        if msg.sender not in self.registered:
            raise KeyError(f"unregistered sender {msg.sender}")
        if self.loss_probability > 0.0 and self._rng.random() < self.loss_probability:
            self.drops += 1
            self.log.append(MessageLogRecord(now, msg.sender, str(msg.kind), 0, "DROPPED;" + msg.summary()))
            return
        self._seq += 1
        heapq.heappush(self._pending, (now + self.latency_ms, msg.sender, self._seq, msg))

    def next_due(self) -> int | None:
        return self._pending[0][0] if self._pending else None

    def deliver(self, now: int, in_zone: Iterable[str]) -> list[tuple[str, Message]]:
        """Pop everything due by ``now`` and fan it out to the in-zone vehicles."""
        audience = sorted(in_zone)
        out: list[tuple[str, Message]] = []
        while self._pending and self._pending[0][0] <= now:
            deliver_at, sender, _, msg = heapq.heappop(self._pending)
            receivers = [v for v in audience if v != sender]
            self.log.append(
                MessageLogRecord(deliver_at, sender, str(msg.kind), len(receivers), msg.summary())
            )
            out.extend((r, msg) for r in receivers)
        return out
