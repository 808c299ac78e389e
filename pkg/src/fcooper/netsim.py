"""Discrete-event model of feature exchange over bandwidth-limited links.

Time is kept in integer microseconds.  Links are store-and-forward FIFO
servers: a message occupies its link for ``bytes * 8 / bandwidth`` seconds
and arrives ``delay`` seconds after it has been fully serialised.  Senders
capture a frame once per second (1 Hz) and each round walks through
capture, encode, pack, transmit, fuse and detect.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

STRATEGIES = ("raw", "vff", "sff")
# order used to break ties between events at the same instant and actor
KIND_RANK = {
    "FrameCaptured": 0,
    "Arrival": 1,
    "Drop": 2,
    "FusionDone": 3,
    "DetectionDone": 4,
    "SendStart": 5,
}
LOG_FIELDS = ("time_us", "actor", "kind", "bytes", "stage")


@dataclass(frozen=True)
class LinkModel:
    bandwidth: float  # bits per second
    delay: float = 0.0  # seconds
    loss: float = 0.0  # per-message drop probability

    def __post_init__(self):
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.delay >= 0:
            raise ValueError(f"delay must be >= 0, got {self.delay}")
        if not 0 <= self.loss < 1:
            raise ValueError(f"loss must be in [0, 1), got {self.loss}")


LINK_PROFILES = {
    "dsrc": LinkModel(27e6, 0.002),
    "dsrc-low": LinkModel(6e6, 0.002),
    "mmwave": LinkModel(1e9, 0.002),
}


def link_profile(name: str) -> LinkModel:
    try:
        return LINK_PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown link profile {name!r}; choose from {sorted(LINK_PROFILES)}") from None


def transmit_time(link: LinkModel, nbytes: int) -> float:
    """Serialisation plus propagation time in seconds."""
    if nbytes < 0:
        raise ValueError("byte count must be >= 0")
    return nbytes * 8 / link.bandwidth + link.delay


@dataclass(frozen=True)
class StageTimings:
    """Per-stage compute times in seconds."""

    encode: float = 0.05
    pack: float = 0.005
    fuse: float = 0.01
    detect: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"stage time {k} must be finite and >= 0, got {v}")


# Stage times chosen so that, over a 27 Mb/s link, a 2 MB raw-cloud exchange
# and a 250 KB spatial-feature exchange both total roughly one second, with
# the raw path slower.
FIG10_TIMINGS = StageTimings(encode=0.25, pack=0.005, fuse=0.3, detect=0.2)


@dataclass(frozen=True)
class Budget:
    strategy: str
    stages: dict
    edge_offload: bool = False

    @property
    def total(self) -> float:
        return float(sum(self.stages.values()))


def latency_budget(
    strategy: str,
    payload_bytes: int,
    link: LinkModel,
    timings: StageTimings = StageTimings(),
    result_bytes: int = 1024,
    edge_offload: bool = False,
) -> Budget:
    """Closed-form per-stage times for one exchange.

    ``raw`` ships the point cloud and runs the encoder once on the merged
    cloud at the receiver; ``vff``/``sff`` encode at the sender and fuse at
    the receiver.  With ``edge_offload`` only the vehicle's share is counted:
    pack, upload and the download of a ``result_bytes`` detection message.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    tx = transmit_time(link, payload_bytes)
    if edge_offload:
        stages = {"pack": timings.pack, "transmit": tx, "result": transmit_time(link, result_bytes)}
    elif strategy == "raw":
        stages = {"pack": timings.pack, "transmit": tx, "encode": timings.encode, "detect": timings.detect}
    else:
        stages = {
            "encode": timings.encode, "pack": timings.pack, "transmit": tx,
            "fuse": timings.fuse, "detect": timings.detect,
        }
    return Budget(strategy, stages, edge_offload)


@dataclass(frozen=True)
class SimEvent:
    time_us: int
    actor: str
    kind: str
    bytes: int = 0
    stage: str = ""


@dataclass
class Scenario:
    """Actors and traffic for one simulation run.

    ``vehicles[0]`` is the receiver unless ``edge_offload`` is set, in which
    case every vehicle uploads to an ``edge`` actor that returns
    ``result_bytes`` of detections to the receiver.
    """

    vehicles: list[str]
    senders: list[str]
    payload_bytes: dict
    link: LinkModel = LINK_PROFILES["dsrc"]
    timings: StageTimings = StageTimings()
    strategy: str = "sff"
    duration: float = 1.0
    seed: int = 0
    edge_offload: bool = False
    result_bytes: int = 1024
    links: dict = field(default_factory=dict)  # per-sender LinkModel overrides

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if len(set(self.vehicles)) != len(self.vehicles) or "edge" in self.vehicles:
            raise ValueError("vehicle names must be unique and not 'edge'")
        for s in self.senders:
            if s not in self.vehicles or s == self.vehicles[0]:
                raise ValueError(f"unknown sender {s!r}")
            if s not in self.payload_bytes or self.payload_bytes[s] < 0:
                raise ValueError(f"no payload size for sender {s!r}")
        for s in self.links:
            if s not in self.senders:
                raise ValueError(f"link override for unknown actor {s!r}")

    @property
    def receiver(self) -> str:
        return self.vehicles[0]

    def actor_index(self, name: str) -> int:
        return len(self.vehicles) if name == "edge" else self.vehicles.index(name)


@dataclass
class Exchange:
    """Per-stage latency of one sender's round, in seconds."""

    round: int
    sender: str
    bytes: int
    dropped: bool
    stages: dict

    @property
    def total(self) -> float:
        return float(sum(self.stages.values()))


@dataclass
class SimResult:
    events: list[SimEvent]
    exchanges: list[Exchange]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for e in self.events:
            w.writerow([e.time_us, e.actor, e.kind, e.bytes, e.stage])
        return buf.getvalue()


def _us(seconds: float) -> int:
    return int(round(seconds * 1e6))


def run_scenario(sc: Scenario) -> SimResult:
    """Simulate ``floor(duration)`` exchange rounds per sender.

    The whole timeline is computed up front (link queues are FIFO, so every
    finish time is known once the send time is) and replayed through a heap
    to produce the ordered event log.
    """
    rng = np.random.default_rng(sc.seed)
    t = sc.timings
    rounds = int(math.floor(sc.duration))
    dest = "edge" if sc.edge_offload else sc.receiver
    queue: list = []
    seq = 0

    def push(ev: SimEvent):
        nonlocal seq
        heapq.heappush(queue, (ev.time_us, sc.actor_index(ev.actor), KIND_RANK[ev.kind], seq, ev))
        seq += 1

    link_free: dict[str, int] = {}
    exchanges: list[Exchange] = []
    # draw loss outcomes up front in a fixed order so they do not depend on event interleaving
    lost = {
        (k, s): bool(rng.random() < sc.links.get(s, sc.link).loss)
        for k in range(rounds) for s in sc.senders
    }

    for k in range(rounds):
        start = _us(k)
        for s in sc.senders:
            link = sc.links.get(s, sc.link)
            nbytes = int(sc.payload_bytes[s])
            enc = 0 if sc.strategy == "raw" else _us(t.encode)
            send_at = start + enc + _us(t.pack)
            push(SimEvent(start, s, "FrameCaptured", 0, "capture"))
            push(SimEvent(send_at, s, "SendStart", nbytes, "transmit"))
            # FIFO link: serialisation waits for the previous message to clear
            tx_begin = max(send_at, link_free.get(s, 0))
            tx_end = tx_begin + _us(nbytes * 8 / link.bandwidth)
            link_free[s] = tx_end
            arrive = tx_end + _us(link.delay)
            stages = {
                "encode": enc / 1e6, "pack": t.pack, "queue": (tx_begin - send_at) / 1e6,
                "transmit": (arrive - tx_begin) / 1e6,
            }
            if lost[(k, s)]:
                push(SimEvent(arrive, dest, "Drop", nbytes, "transmit"))
                exchanges.append(Exchange(k, s, nbytes, True, stages))
                continue
            push(SimEvent(arrive, dest, "Arrival", nbytes, "transmit"))
            # the destination's own frame is encoded in parallel from capture time
            ready = max(arrive, start + (_us(t.encode) if not sc.edge_offload else 0))
            if sc.strategy == "raw":
                fused = ready + _us(t.encode)
                stages["encode"] = t.encode
            else:
                fused = ready + _us(t.fuse)
                stages["fuse"] = t.fuse
            stages["wait"] = (ready - arrive) / 1e6
            push(SimEvent(fused, dest, "FusionDone", 0, "fuse" if sc.strategy != "raw" else "encode"))
            done = fused + _us(t.detect)
            stages["detect"] = t.detect
            push(SimEvent(done, dest, "DetectionDone", 0, "detect"))
            if sc.edge_offload:
                back = done + _us(transmit_time(link, sc.result_bytes))
                push(SimEvent(done, "edge", "SendStart", sc.result_bytes, "return"))
                push(SimEvent(back, sc.receiver, "Arrival", sc.result_bytes, "return"))
                stages["return"] = (back - done) / 1e6
            exchanges.append(Exchange(k, s, nbytes, False, stages))

    events = []
    while queue:
        events.append(heapq.heappop(queue)[4])
    return SimResult(events, exchanges)
