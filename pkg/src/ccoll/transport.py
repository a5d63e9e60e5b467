"""In-process point-to-point transport for N simulated ranks.

Each rank runs on its own thread and talks to the others through an
:class:`Endpoint`.  Two execution modes share the same API:

``virtual``
    Deterministic discrete-event simulation.  Only one rank thread runs at a
    time; the scheduler always resumes the runnable rank with the smallest
    virtual clock (ties broken by rank), so any message that could have
    arrived by a rank's current clock has already been posted.  Charged
    computations advance the local clock by a declared cost, and in-flight
    messages keep moving while a rank computes.

``real``
    Free-running threads with per-destination mailboxes.  Charged
    computations and waits are timed with the wall clock.

Messages are ``bytes``.  Every ``(src, dst, tag)`` channel is FIFO.
"""

from __future__ import annotations

import itertools
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

COMDECOM = "ComDecom"
ALLGATHER = "Allgather"
MEMCPY = "Memcpy"
WAIT = "Wait"
REDUCTION = "Reduction"
OTHERS = "Others"
CATEGORIES = (COMDECOM, ALLGATHER, MEMCPY, WAIT, REDUCTION, OTHERS)

_REAL_POLL_INTERVAL = 0.05


class TransportError(RuntimeError):
    pass


class MessageTruncated(TransportError):
    pass


class Deadlock(TransportError):
    pass


class _Abort(BaseException):
    """Unwinds a rank thread when the world is torn down."""


class Mode(str, Enum):
    VIRTUAL = "virtual"
    REAL = "real"


@dataclass(frozen=True)
class SimParams:
    """Cost model for virtual time; all values in seconds or bytes/second."""

    latency: float = 1e-6
    bandwidth: float = 12.5e9  # 100 Gb/s
    compress_cost: float = 1e-9
    decompress_cost: float = 5e-10
    reduce_cost: float = 2.5e-10
    memcpy_cost: float = 1e-10

    def __post_init__(self):
        for name in ("latency", "compress_cost", "decompress_cost", "reduce_cost", "memcpy_cost"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value!r}")
        if not (self.bandwidth > 0):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth!r}")

    def transfer_time(self, nbytes: int) -> float:
        return nbytes / self.bandwidth

    def compress_time(self, elements: int) -> float:
        return elements * self.compress_cost

    def decompress_time(self, elements: int) -> float:
        return elements * self.decompress_cost

    def reduce_time(self, elements: int) -> float:
        return elements * self.reduce_cost

    def memcpy_time(self, nbytes: int) -> float:
        return nbytes * self.memcpy_cost

    # config file keys and their scale to SI units
    _CONFIG_KEYS = {
        "latency_us": ("latency", 1e-6),
        "bandwidth_gbps": ("bandwidth", 1e9 / 8),
        "compress_cost_ns_per_elem": ("compress_cost", 1e-9),
        "decompress_cost_ns_per_elem": ("decompress_cost", 1e-9),
        "reduce_cost_ns_per_elem": ("reduce_cost", 1e-9),
        "memcpy_cost_ns_per_byte": ("memcpy_cost", 1e-9),
    }

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "SimParams":
        kwargs = {}
        for key, raw in values.items():
            if key not in cls._CONFIG_KEYS:
                raise ValueError(f"unknown SimParams key {key!r}")
            name, scale = cls._CONFIG_KEYS[key]
            kwargs[name] = float(raw) * scale
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "SimParams":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path) -> "SimParams":
        with open(path) as fh:
            return cls.parse(fh.read())

    def to_config(self) -> str:
        lines = []
        for key, (name, scale) in self._CONFIG_KEYS.items():
            lines.append(f"{key}={getattr(self, name) / scale!r}")
        return "\n".join(lines) + "\n"


@dataclass
class RankStats:
    rank: int
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    compress_calls: int = 0
    decompress_calls: int = 0
    times: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0.0))
    total_time: float = 0.0


@dataclass
class RunReport:
    mode: Mode
    ranks: List[RankStats]

    @property
    def size(self) -> int:
        return len(self.ranks)

    def total(self, counter: str) -> int:
        return sum(getattr(r, counter) for r in self.ranks)

    def max_time(self, category: Optional[str] = None) -> float:
        if category is None:
            return max(r.total_time for r in self.ranks)
        return max(r.times[category] for r in self.ranks)

    def time(self, category: str) -> float:
        """Sum of a timing category over all ranks."""
        return sum(r.times[category] for r in self.ranks)

    def merge(self, other: "RunReport") -> "RunReport":
        """Concatenate two runs of the same world (counters and times add)."""
        merged = []
        for a, b in zip(self.ranks, other.ranks):
            times = {c: a.times[c] + b.times[c] for c in CATEGORIES}
            merged.append(RankStats(
                a.rank,
                a.bytes_sent + b.bytes_sent,
                a.bytes_received + b.bytes_received,
                a.messages_sent + b.messages_sent,
                a.compress_calls + b.compress_calls,
                a.decompress_calls + b.decompress_calls,
                times,
                a.total_time + b.total_time,
            ))
        return RunReport(self.mode, merged)


_request_ids = itertools.count()


@dataclass(eq=False)
class Request:
    id: int
    direction: str
    peer: int
    tag: int
    state: str = "pending"
    byte_count: int = 0
    max_bytes: Optional[int] = None
    data: Optional[bytes] = None
    error: Optional[Exception] = None
    # virtual time at which the request can complete; None until matched
    ready_at: Optional[float] = None
    post_time: float = 0.0
    reported: bool = False

    @property
    def complete(self) -> bool:
        return self.state == "complete"


class Endpoint:
    """Per-rank handle; owned by exactly one rank thread."""

    def __init__(self, world: "_Run", rank: int):
        self._run = world
        self.rank = rank
        self.size = world.size
        self.sim = world.sim
        self.stats = RankStats(rank)
        self._tag_counter = itertools.count(1)
        self._outstanding: List[Request] = []
        self._charging = False
        # virtual mode
        self.clock = 0.0
        self._egress_free = 0.0
        self._blocked_on: Optional[Request] = None
        self._resume = threading.Event()
        self._finished = False
        # real mode
        self._pending_recvs: Dict[tuple, List[Request]] = {}

    @property
    def virtual(self) -> bool:
        return self._run.mode is Mode.VIRTUAL

    def new_tag(self) -> int:
        """Next tag block; all ranks must call collectives in the same order."""
        return next(self._tag_counter) & 0x7FFFFFFF

    def _check_peer(self, peer: int, what: str):
        if not isinstance(peer, int) or not 0 <= peer < self.size:
            raise TransportError(f"invalid {what} rank {peer!r} for world of size {self.size}")

    # -- point to point ----------------------------------------------------

    def isend(self, dst: int, tag: int, data) -> Request:
        self._check_peer(dst, "destination")
        if dst == self.rank:
            raise TransportError("send to self is not supported")
        if self._run.closed:
            raise TransportError("world has been shut down")
        payload = bytes(data)
        req = Request(next(_request_ids), "send", dst, tag, byte_count=len(payload))
        self.stats.bytes_sent += len(payload)
        self.stats.messages_sent += 1
        self._outstanding.append(req)
        self._run.post_send(self, req, payload)
        return req

    def irecv(self, src: int, tag: int, max_bytes: Optional[int] = None) -> Request:
        self._check_peer(src, "source")
        req = Request(next(_request_ids), "recv", src, tag, max_bytes=max_bytes, post_time=self.clock)
        self._outstanding.append(req)
        self._run.post_recv(self, req)
        return req

    def poll(self) -> set:
        """Complete whatever can complete now; returns newly completed ids."""
        self._run.progress(self)
        done = set()
        for req in self._outstanding:
            if req.complete and not req.reported:
                req.reported = True
                done.add(req.id)
        self._outstanding = [r for r in self._outstanding if not r.complete]
        return done

    def wait(self, req: Request, category: str = WAIT) -> Optional[bytes]:
        """Block until ``req`` completes; time spent is charged to ``category``."""
        if category not in CATEGORIES:
            raise ValueError(f"unknown timing category {category!r}")
        if self._charging:
            raise TransportError("cannot wait inside a charged computation")
        if not req.complete:
            self._run.wait(self, req, category)
        req.reported = True
        if req in self._outstanding:
            self._outstanding.remove(req)
        if req.error is not None:
            raise req.error
        return req.data

    def waitall(self, reqs, category: str = WAIT) -> list:
        return [self.wait(r, category) for r in reqs]

    # -- accounting ----------------------------------------------------------

    def charge(self, category: str, op: Callable[[], Any], cost: float = 0.0):
        """Run ``op`` and account its time to ``category``.

        In virtual mode ``cost`` (seconds) is what the clock advances by; in
        real mode the wall time of ``op`` is recorded instead.
        """
        if category not in CATEGORIES:
            raise ValueError(f"unknown timing category {category!r}")
        if self._charging:
            raise TransportError("nested charge")
        self._charging = True
        try:
            if self.virtual:
                result = op()
            else:
                t0 = time.perf_counter()
                result = op()
                self.stats.times[category] += time.perf_counter() - t0
        finally:
            self._charging = False
        if self.virtual:
            self._run.advance(self, cost, category)
        return result

    def _complete_recv(self, req: Request, data: bytes):
        req.byte_count = len(data)
        if req.max_bytes is not None and len(data) > req.max_bytes:
            req.error = MessageTruncated(
                f"message of {len(data)} bytes exceeds receive limit of {req.max_bytes}"
            )
        else:
            req.data = data
        self.stats.bytes_received += len(data)
        req.state = "complete"


# ---------------------------------------------------------------------------


class _Run:
    """State of a single ``CommWorld.run`` invocation."""

    def __init__(self, size: int, mode: Mode, sim: SimParams):
        self.size = size
        self.mode = mode
        self.sim = sim
        self.closed = False
        self.endpoints = [Endpoint(self, r) for r in range(size)]

    def post_send(self, ep, req, payload):
        raise NotImplementedError

    def post_recv(self, ep, req):
        raise NotImplementedError

    def progress(self, ep):
        raise NotImplementedError

    def wait(self, ep, req, category):
        raise NotImplementedError

    def advance(self, ep, dt, category):
        raise NotImplementedError


class _VirtualRun(_Run):
    def __init__(self, size, sim):
        super().__init__(size, Mode.VIRTUAL, sim)
        # (src, dst, tag) -> unmatched messages [(payload, arrival)] / recvs
        self._messages: Dict[tuple, List[tuple]] = {}
        self._recvs: Dict[tuple, List[Request]] = {}
        self._back = threading.Event()
        self._abort = False

    # called from the running rank thread only; no locking required
    def post_send(self, ep, req, payload):
        sim = self.sim
        start = max(ep.clock, ep._egress_free)
        ep._egress_free = start + sim.transfer_time(len(payload))
        arrival = ep._egress_free + sim.latency
        req.ready_at = ep._egress_free
        key = (ep.rank, req.peer, req.tag)
        recvs = self._recvs.get(key)
        if recvs:
            recv = recvs.pop(0)
            self._match(recv, payload, arrival)
        else:
            self._messages.setdefault(key, []).append((payload, arrival))

    def post_recv(self, ep, req):
        key = (req.peer, ep.rank, req.tag)
        msgs = self._messages.get(key)
        if msgs:
            payload, arrival = msgs.pop(0)
            self._match(req, payload, arrival)
        else:
            self._recvs.setdefault(key, []).append(req)

    @staticmethod
    def _match(recv, payload, arrival):
        recv.data = payload
        recv.ready_at = max(arrival, recv.post_time)

    def _finish(self, ep, req):
        if req.direction == "recv":
            payload, req.data = req.data, None
            ep._complete_recv(req, payload)
        else:
            req.state = "complete"

    def progress(self, ep):
        for req in ep._outstanding:
            if not req.complete and req.ready_at is not None and req.ready_at <= ep.clock:
                self._finish(ep, req)

    def wait(self, ep, req, category):
        while req.ready_at is None:
            ep._blocked_on = req
            self._yield(ep)
        ep._blocked_on = None
        self._finish(ep, req)
        self.advance(ep, max(0.0, req.ready_at - ep.clock), category)

    def advance(self, ep, dt, category):
        if dt <= 0:
            return
        ep.clock += dt
        ep.stats.times[category] += dt
        # the scheduler would resume this same rank; skip the thread switch
        if self._pick() is not ep:
            self._yield(ep)

    # -- scheduling -------------------------------------------------------

    def _yield(self, ep):
        ep._resume.clear()
        self._back.set()
        ep._resume.wait()
        if self._abort:
            raise _Abort()

    def _pick(self):
        best = None
        for ep in self.endpoints:
            if ep._finished:
                continue
            blocked = ep._blocked_on
            if blocked is None:
                key = ep.clock
            elif blocked.ready_at is not None:
                key = max(ep.clock, blocked.ready_at)
            else:
                continue
            if best is None or key < best[0]:
                best = (key, ep)
        return None if best is None else best[1]

    def execute(self, fn):
        results: List[Any] = [None] * self.size
        errors: List[Optional[BaseException]] = [None] * self.size

        def body(ep):
            ep._resume.wait()
            try:
                if not self._abort:
                    results[ep.rank] = fn(ep)
            except _Abort:
                pass
            except BaseException as exc:  # surfaced by the scheduler
                errors[ep.rank] = exc
            finally:
                ep._finished = True
                self._back.set()

        threads = [
            threading.Thread(target=body, args=(ep,), name=f"rank-{ep.rank}", daemon=True)
            for ep in self.endpoints
        ]
        for t in threads:
            t.start()
        failure: Optional[BaseException] = None
        try:
            while True:
                if any(e is not None for e in errors):
                    failure = next(e for e in errors if e is not None)
                    break
                if all(ep._finished for ep in self.endpoints):
                    break
                ep = self._pick()
                if ep is None:
                    stuck = [e.rank for e in self.endpoints if not e._finished]
                    failure = Deadlock(f"ranks {stuck} are blocked on receives that can never match")
                    break
                self._back.clear()
                ep._resume.set()
                self._back.wait()
        finally:
            self._abort = True
            self.closed = True
            for ep in self.endpoints:
                ep._resume.set()
            for t in threads:
                t.join()
        if failure is not None:
            raise failure
        for ep in self.endpoints:
            ep.stats.total_time = ep.clock
        return results


class _Mailbox:
    def __init__(self):
        self.cond = threading.Condition()
        self.queues: Dict[tuple, List[bytes]] = {}


class _RealRun(_Run):
    def __init__(self, size, sim):
        super().__init__(size, Mode.REAL, sim)
        self._boxes = [_Mailbox() for _ in range(size)]
        self._abort = threading.Event()

    def post_send(self, ep, req, payload):
        box = self._boxes[req.peer]
        with box.cond:
            box.queues.setdefault((ep.rank, req.tag), []).append(payload)
            box.cond.notify_all()
        req.state = "complete"

    def post_recv(self, ep, req):
        ep._pending_recvs.setdefault((req.peer, req.tag), []).append(req)

    def _match_locked(self, ep, box):
        for key, recvs in ep._pending_recvs.items():
            queue = box.queues.get(key)
            while recvs and queue:
                ep._complete_recv(recvs.pop(0), queue.pop(0))

    def progress(self, ep):
        box = self._boxes[ep.rank]
        with box.cond:
            self._match_locked(ep, box)

    def wait(self, ep, req, category):
        t0 = time.perf_counter()
        box = self._boxes[ep.rank]
        with box.cond:
            while True:
                self._match_locked(ep, box)
                if req.complete:
                    break
                if self._abort.is_set():
                    raise _Abort()
                box.cond.wait(_REAL_POLL_INTERVAL)
        ep.stats.times[category] += time.perf_counter() - t0

    def advance(self, ep, dt, category):
        pass

    def execute(self, fn):
        results: List[Any] = [None] * self.size
        errors: List[Optional[BaseException]] = [None] * self.size

        def body(ep):
            t0 = time.perf_counter()
            try:
                results[ep.rank] = fn(ep)
            except _Abort:
                pass
            except BaseException as exc:
                errors[ep.rank] = exc
                self._abort.set()
            finally:
                ep.stats.total_time = time.perf_counter() - t0

        threads = [
            threading.Thread(target=body, args=(ep,), name=f"rank-{ep.rank}", daemon=True)
            for ep in self.endpoints
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.closed = True
        for err in errors:
            if err is not None:
                raise err
        for ep in self.endpoints:
            charged = sum(v for k, v in ep.stats.times.items() if k != OTHERS)
            ep.stats.times[OTHERS] = max(0.0, ep.stats.total_time - charged)
        return results


class CommWorld:
    """A set of ``size`` ranks plus the transport mode they run under.

    ``run(fn)`` executes ``fn(endpoint)`` once per rank and returns the
    per-rank results together with a :class:`RunReport`.
    """

    def __init__(self, size: int, mode="virtual", sim: Optional[SimParams] = None):
        if not isinstance(size, int) or size < 1:
            raise ValueError(f"world size must be a positive integer, got {size!r}")
        self.size = size
        self.mode = Mode(mode)
        self.sim = sim if sim is not None else SimParams()

    def run(self, fn: Callable[[Endpoint], Any]):
        cls = _VirtualRun if self.mode is Mode.VIRTUAL else _RealRun
        state = cls(self.size, self.sim)
        results = state.execute(fn)
        return results, RunReport(self.mode, [ep.stats for ep in state.endpoints])

    def __repr__(self):
        return f"CommWorld(size={self.size}, mode={self.mode.value!r})"
