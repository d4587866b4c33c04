"""Coordinated, fused ring all-reduce between worker ranks.

Every rank runs a :class:`CommEngine` with a background cycle loop.  Once per
cycle each rank reports which named tensors it has ready (a bitmap over the
coordinator's response cache, plus metadata for names not cached yet); rank 0
intersects the reports, schedules the names that every rank has submitted,
packs them into capacity-bounded fusion groups and broadcasts the schedule.
All ranks then run the same sequence of ring all-reduces, so execution order is
identical everywhere no matter in which order the workers submitted.

A name that stays incomplete for longer than the coordination timeout is
reported as a stall naming the ranks that never submitted it.

Wire format (TCP transport): ``u32 payload length | u8 kind | payload``,
little-endian.  Kinds: READY_BITMAP, SCHEDULE, DATA_CHUNK, STATS (plus HELLO
during connection setup).
"""
import csv
import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

HELLO, READY_BITMAP, SCHEDULE, DATA_CHUNK, STATS = 0, 1, 2, 3, 4
KIND_NAMES = {HELLO: "HELLO", READY_BITMAP: "READY_BITMAP", SCHEDULE: "SCHEDULE", DATA_CHUNK: "DATA_CHUNK",
              STATS: "STATS"}

DEFAULT_CYCLE_MS = 5.0
DEFAULT_FUSION_MB = 64.0
DEFAULT_TIMEOUT_MS = 60_000.0
MB = 1 << 20


class CommError(RuntimeError):
    pass


class TransportError(CommError):
    def __init__(self, message, rank=None):
        super().__init__(f"rank {rank}: {message}" if rank is not None else message)
        self.rank = rank


class ProtocolError(CommError):
    pass


class ConfigError(ValueError):
    pass


class StallError(CommError):
    """Some ranks never submitted a tensor within the coordination timeout."""

    def __init__(self, missing):
        self.missing = {k: sorted(v) for k, v in missing.items()}
        detail = ", ".join(f"{k}: missing rank{'s' if len(v) > 1 else ''} {', '.join(map(str, v))}"
                           for k, v in sorted(self.missing.items()))
        super().__init__(f"collective stall: {{{detail}}}")


# ---------------------------------------------------------------------------
# request bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class CollectiveRequest:
    name: str
    count: int
    dtype: str
    rank: int = 0
    seq: int = 0
    op: str = "average"

    @property
    def nbytes(self):
        return self.count * np.dtype(self.dtype).itemsize

    def signature(self):
        return (self.name, self.count, self.dtype, self.op)


class ResponseCache:
    """Name -> global execution index; an index never changes once assigned."""

    def __init__(self):
        self._index = {}
        self._names = []

    def __contains__(self, name):
        return name in self._index

    def __len__(self):
        return len(self._names)

    def get(self, name):
        return self._index.get(name)

    def assign(self, name):
        if name not in self._index:
            self._index[name] = len(self._names)
            self._names.append(name)
        return self._index[name]

    def name(self, index):
        return self._names[index]

    def items(self):
        return list(self._index.items())


def encode_bitmap(indices, nbits):
    bits = np.zeros(max(nbits, 0), np.uint8)
    if len(indices):
        bits[np.asarray(sorted(indices))] = 1
    return np.packbits(bits, bitorder="little").tobytes()


def decode_bitmap(data, nbits):
    bits = np.unpackbits(np.frombuffer(data, np.uint8), bitorder="little")[:nbits]
    return set(np.flatnonzero(bits).tolist())


class Coordinator:
    """Rank-0 negotiation state: which ranks have submitted which names.

    ``tick`` returns the names every rank has submitted, in canonical order
    (earlier completion first, ties by name), and stalls for names that have
    been incomplete for longer than ``timeout``.
    """

    def __init__(self, world_size, timeout=DEFAULT_TIMEOUT_MS / 1000.0):
        self.world_size = world_size
        self.timeout = timeout
        self.cache = ResponseCache()
        self.meta = {}          # name -> CollectiveRequest (signature reference)
        self.ready = {}         # name -> set of ranks
        self.first_seen = {}

    def submit(self, rank, req, now):
        ref = self.meta.setdefault(req.name, req)
        if ref.signature() != req.signature():
            raise ProtocolError(f"tensor {req.name!r}: rank {rank} submitted {req.signature()}, "
                                f"rank {ref.rank} submitted {ref.signature()}")
        self.ready.setdefault(req.name, set()).add(rank)
        self.first_seen.setdefault(req.name, now)

    def submit_bitmap(self, rank, indices, now):
        for i in indices:
            name = self.cache.name(i)
            self.ready.setdefault(name, set()).add(rank)
            self.first_seen.setdefault(name, now)

    def tick(self, now):
        done = sorted(n for n, ranks in self.ready.items() if len(ranks) == self.world_size)
        schedule = []
        for name in done:
            self.cache.assign(name)
            schedule.append(self.meta[name])
            del self.ready[name]
            del self.first_seen[name]
        stalls = {}
        for name, t0 in list(self.first_seen.items()):
            if now - t0 > self.timeout:
                stalls[name] = set(range(self.world_size)) - self.ready[name]
                del self.ready[name]
                del self.first_seen[name]
        return schedule, stalls


def negotiate_order(requests_per_rank, per_tick=1, timeout_ticks=None):
    """Simulate cycle-based negotiation.

    ``requests_per_rank[r]`` lists the names rank ``r`` submits, in its own
    order; each rank submits ``per_tick`` names per cycle.  Returns
    (schedule, stalls) where schedule is the common execution order.
    """
    W = len(requests_per_rank)
    timeout = float("inf") if timeout_ticks is None else timeout_ticks
    coord = Coordinator(W, timeout)
    schedule, stalls = [], {}
    longest = max((len(r) for r in requests_per_rank), default=0)
    tick = 0
    while True:
        for rank, names in enumerate(requests_per_rank):
            for name in names[tick * per_tick:(tick + 1) * per_tick]:
                coord.submit(rank, CollectiveRequest(name, 1, "float32", rank), tick)
        done, stalled = coord.tick(tick)
        schedule.extend(r.name for r in done)
        stalls.update(stalled)
        tick += 1
        if tick * per_tick >= longest and not coord.ready:
            break
        if timeout_ticks is None and tick * per_tick >= longest:
            stalls.update({n: set(range(W)) - r for n, r in coord.ready.items()})
            break
    return schedule, stalls


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

@dataclass
class FusionGroup:
    members: list
    total_bytes: int = 0
    capacity: int = int(DEFAULT_FUSION_MB * MB)

    @property
    def dtype(self):
        return self.members[0].dtype

    @property
    def op(self):
        return self.members[0].op


def fuse(schedule, capacity):
    """Greedily pack consecutive schedule entries into groups of at most ``capacity`` bytes.

    Groups never mix dtypes or reduction ops.
    """
    groups = []
    for req in schedule:
        if req.nbytes > capacity:
            raise ConfigError(f"tensor {req.name!r} ({req.nbytes} bytes) exceeds fusion capacity {capacity}")
        g = groups[-1] if groups else None
        if g is None or g.total_bytes + req.nbytes > capacity or g.dtype != req.dtype or g.op != req.op:
            g = FusionGroup([], 0, capacity)
            groups.append(g)
        g.members.append(req)
        g.total_bytes += req.nbytes
    return groups


# ---------------------------------------------------------------------------
# ring all-reduce
# ---------------------------------------------------------------------------

def _chunk_bounds(n, W):
    edges = np.linspace(0, n, W + 1).astype(np.int64)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(W)]


def ring_allreduce_local(buffers, op="sum"):
    """Reference execution of the ring schedule on in-memory buffers.

    Performs exactly the additions a distributed run performs, in the same
    order, so results are bitwise equal to :func:`ring_allreduce`.
    """
    W = len(buffers)
    n = len(buffers[0])
    if any(len(b) != n for b in buffers):
        raise ProtocolError(f"length mismatch across ranks: {[len(b) for b in buffers]}")
    bufs = [np.array(b, copy=True) for b in buffers]
    if W == 1:
        return bufs
    bounds = _chunk_bounds(n, W)
    for step in range(W - 1):
        sent = [bufs[r][slice(*bounds[(r - step) % W])].copy() for r in range(W)]
        for r in range(W):
            c = (r - step - 1) % W
            bufs[r][slice(*bounds[c])] += sent[(r - 1) % W]
    if op == "average":
        for r in range(W):
            sl = slice(*bounds[(r + 1) % W])
            bufs[r][sl] /= W
    for step in range(W - 1):
        sent = [bufs[r][slice(*bounds[(r + 1 - step) % W])].copy() for r in range(W)]
        for r in range(W):
            c = (r - step) % W
            bufs[r][slice(*bounds[c])] = sent[(r - 1) % W]
    return bufs


def ring_allreduce(transport, buf, op="sum"):
    """In-place ring all-reduce of ``buf`` across all ranks of ``transport``.

    2(W-1) steps: scatter-reduce then all-gather, exchanging with ring
    neighbours only.  Averaging divides each reduced chunk once, at its owner,
    so every rank ends with bitwise identical values.
    """
    W, rank = transport.world_size, transport.rank
    if W == 1:
        return buf
    right, left = (rank + 1) % W, (rank - 1) % W
    bounds = _chunk_bounds(len(buf), W)
    for step in range(W - 1):
        transport.send(right, DATA_CHUNK, buf[slice(*bounds[(rank - step) % W])])
        c = slice(*bounds[(rank - step - 1) % W])
        incoming = transport.recv_array(left, buf.dtype)
        if incoming.size != c.stop - c.start:
            raise ProtocolError(f"rank {rank}: expected chunk of {c.stop - c.start}, got {incoming.size}")
        buf[c] += incoming
    if op == "average":
        buf[slice(*bounds[(rank + 1) % W])] /= W
    for step in range(W - 1):
        transport.send(right, DATA_CHUNK, buf[slice(*bounds[(rank + 1 - step) % W])])
        c = slice(*bounds[(rank - step) % W])
        incoming = transport.recv_array(left, buf.dtype)
        if incoming.size != c.stop - c.start:
            raise ProtocolError(f"rank {rank}: expected chunk of {c.stop - c.start}, got {incoming.size}")
        buf[c] = incoming
    return buf


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------

class Transport:
    """Point-to-point messages demultiplexed by (source rank, kind)."""

    def __init__(self, rank, world_size, recv_timeout=None):
        self.rank = rank
        self.world_size = world_size
        self.recv_timeout = recv_timeout
        self._inbox = {}
        self._lock = threading.Lock()

    def _box(self, src, kind):
        with self._lock:
            return self._inbox.setdefault((src, kind), queue.Queue())

    def _deliver(self, src, kind, payload):
        self._box(src, kind).put(payload)

    def recv(self, src, kind, timeout=None):
        timeout = self.recv_timeout if timeout is None else timeout
        try:
            item = self._box(src, kind).get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"timed out waiting for {KIND_NAMES[kind]} from rank {src}", src) from None
        if isinstance(item, TransportError):
            raise item
        return item

    def recv_array(self, src, dtype):
        item = self.recv(src, DATA_CHUNK)
        if isinstance(item, np.ndarray):
            return item
        return np.frombuffer(item, dtype)

    def send(self, dst, kind, payload):
        raise NotImplementedError

    def close(self):
        pass


class ChannelTransport(Transport):
    """In-process transport; ``world`` is the shared list of rank transports."""

    def __init__(self, rank, world, world_size, recv_timeout=None):
        super().__init__(rank, world_size, recv_timeout)
        self.world = world

    def send(self, dst, kind, payload):
        if isinstance(payload, np.ndarray):
            payload = payload.copy()
        self.world[dst]._deliver(self.rank, kind, payload)


def channel_world(world_size, recv_timeout=None):
    world = []
    for r in range(world_size):
        world.append(ChannelTransport(r, world, world_size, recv_timeout))
    return world


def _send_frame(sock, kind, payload):
    sock.sendall(struct.pack("<IB", len(payload), kind) + payload)


def _recv_exact(sock, n):
    parts, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)


def _recv_frame(sock):
    length, kind = struct.unpack("<IB", _recv_exact(sock, 5))
    return kind, _recv_exact(sock, length)


class TcpTransport(Transport):
    """Full mesh of TCP connections with length-prefixed frames.

    Rank 0 listens on ``address``; other ranks connect to it and announce their
    own listening port, rank 0 distributes the address table and the
    remaining pairs connect directly (higher rank dials lower rank).
    """

    def __init__(self, rank, world_size, address=("127.0.0.1", 0), recv_timeout=None, connect_timeout=30.0):
        super().__init__(rank, world_size, recv_timeout)
        self.socks = {}
        self._send_locks = {}
        self._closing = False
        self.listener = socket.create_server(address if rank == 0 else (address[0], 0))
        self.address = self.listener.getsockname()
        self._connect_timeout = connect_timeout
        self._rank0 = address

    def connect(self):
        W, rank = self.world_size, self.rank
        self.listener.settimeout(self._connect_timeout)
        if rank == 0:
            table = {0: list(self.address)}
            for _ in range(W - 1):
                conn, _ = self.listener.accept()
                _, payload = _recv_frame(conn)
                hello = json.loads(payload)
                table[hello["rank"]] = [self.address[0], hello["port"]]
                self._add(hello["rank"], conn)
            for r in range(1, W):
                _send_frame(self.socks[r], HELLO, json.dumps(table).encode())
        else:
            conn = socket.create_connection(self._rank0, timeout=self._connect_timeout)
            _send_frame(conn, HELLO, json.dumps({"rank": rank, "port": self.address[1]}).encode())
            _, payload = _recv_frame(conn)
            table = {int(k): tuple(v) for k, v in json.loads(payload).items()}
            self._add(0, conn)
            for r in range(1, rank):
                c = socket.create_connection(table[r], timeout=self._connect_timeout)
                _send_frame(c, HELLO, json.dumps({"rank": rank}).encode())
                self._add(r, c)
            for _ in range(rank + 1, W):
                c, _ = self.listener.accept()
                _, payload = _recv_frame(c)
                self._add(json.loads(payload)["rank"], c)
        for r, s in self.socks.items():
            s.settimeout(None)
            threading.Thread(target=self._reader, args=(r, s), daemon=True).start()
        return self

    def _add(self, r, sock):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.socks[r] = sock
        self._send_locks[r] = threading.Lock()

    def _reader(self, src, sock):
        try:
            while True:
                kind, payload = _recv_frame(sock)
                self._deliver(src, kind, payload)
        except (OSError, ConnectionError, struct.error) as exc:
            if not self._closing:
                err = TransportError(f"connection to rank {src} lost ({exc})", src)
                for k in KIND_NAMES:
                    self._deliver(src, k, err)

    def send(self, dst, kind, payload):
        if isinstance(payload, np.ndarray):
            payload = np.ascontiguousarray(payload).astype(payload.dtype.newbyteorder("<"), copy=False).tobytes()
        try:
            with self._send_locks[dst]:
                _send_frame(self.socks[dst], kind, payload)
        except OSError as exc:
            raise TransportError(f"send to rank {dst} failed ({exc})", dst) from exc

    def recv_array(self, src, dtype):
        item = self.recv(src, DATA_CHUNK)
        return np.frombuffer(item, np.dtype(dtype).newbyteorder("<")).astype(dtype)

    def close(self):
        self._closing = True
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self.listener.close()


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class OpStats:
    count: int = 0
    bytes: int = 0
    seconds: float = 0.0

    @property
    def avg_bytes(self):
        return self.bytes / self.count if self.count else 0.0


class CommStats:
    """Per-operation call counts, byte volume and cumulative time."""

    OPS = ("allreduce", "ring_allreduce", "broadcast", "barrier", "negotiate")

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.ops = {op: OpStats() for op in self.OPS}

    def record(self, op, nbytes=0, seconds=0.0, count=1):
        with self._lock:
            s = self.ops.setdefault(op, OpStats())
            s.count += count
            s.bytes += int(nbytes)
            s.seconds += seconds

    def table(self):
        with self._lock:
            return {op: dict(count=s.count, avg_bytes=s.avg_bytes, cumulative_seconds=s.seconds)
                    for op, s in self.ops.items()}

    def to_dict(self):
        with self._lock:
            return {op: [s.count, s.bytes, s.seconds] for op, s in self.ops.items()}

    def merge(self, d):
        for op, (c, b, sec) in d.items():
            self.record(op, b, sec, c)

    def write_csv(self, path, rank=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow((["rank"] if rank is not None else []) + ["op", "count", "avg_bytes", "cumulative_seconds"])
            for op, row in self.table().items():
                w.writerow(([rank] if rank is not None else []) +
                           [op, row["count"], f"{row['avg_bytes']:.1f}", f"{row['cumulative_seconds']:.6f}"])


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class Handle:
    def __init__(self, req, array):
        self.req = req
        self.array = array
        self._done = threading.Event()
        self.error = None
        self.result = None

    def _finish(self, result=None, error=None):
        self.result, self.error = result, error
        self._done.set()

    def done(self):
        return self._done.is_set()

    def wait(self, timeout=None):
        if not self._done.wait(timeout):
            raise TimeoutError(f"collective {self.req.name!r} did not complete")
        if self.error is not None:
            raise self.error
        return self.result


@dataclass
class CommConfig:
    cycle_ms: float = DEFAULT_CYCLE_MS
    fusion_mb: float = DEFAULT_FUSION_MB
    timeout_ms: float = DEFAULT_TIMEOUT_MS

    @property
    def capacity(self):
        return max(int(self.fusion_mb * MB), 1)


class CommEngine:
    """Per-rank collective engine with a background coordination cycle."""

    def __init__(self, transport, config=None):
        self.transport = transport
        self.rank = transport.rank
        self.world_size = transport.world_size
        self.config = config or CommConfig()
        self.stats = CommStats()
        self.cache = ResponseCache()            # this rank's copy of the broadcast cache
        self.execution_log = []
        self._coord = Coordinator(self.world_size, self.config.timeout_ms / 1000.0) if self.rank == 0 else None
        self._submit_q = queue.Queue()
        self._pending = {}                      # name -> Handle
        self._announced = set()
        self._seq = 0
        self._stop = threading.Event()
        self._thread = None
        self._fatal = None
        self._barriers = 0

    # -- public API --------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._loop, name=f"comm-rank{self.rank}", daemon=True)
        self._thread.start()
        return self

    def allreduce_async(self, name, array, op="average"):
        if self._fatal:
            raise self._fatal
        array = np.ascontiguousarray(array)
        self._seq += 1
        req = CollectiveRequest(name, int(array.size), array.dtype.str, self.rank, self._seq, op)
        h = Handle(req, array)
        self._submit_q.put(h)
        return h

    def allreduce(self, name, array, op="average"):
        return self.allreduce_async(name, array, op).wait()

    def allreduce_many(self, arrays, op="average", order=None):
        """Submit every tensor of ``arrays`` (in ``order``), then wait for all."""
        names = order or list(arrays)
        handles = {n: self.allreduce_async(n, arrays[n], op) for n in names}
        return {n: h.wait() for n, h in handles.items()}

    def broadcast(self, name, array, root=0):
        """Everyone receives root's values (sum-reduction of root's data and zeros)."""
        t0 = time.perf_counter()
        a = np.ascontiguousarray(array)
        contrib = a if self.rank == root else np.zeros_like(a)
        out = self.allreduce_async(name, contrib, op="broadcast").wait()
        self.stats.record("broadcast", a.nbytes, time.perf_counter() - t0)
        return out

    def barrier(self):
        t0 = time.perf_counter()
        self._barriers += 1
        self.allreduce_async(f"__barrier_{self._barriers}", np.zeros(1, np.float32), op="barrier").wait()
        self.stats.record("barrier", 0, time.perf_counter() - t0)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self._fatal and not isinstance(self._fatal, StallError):
            raise self._fatal

    def gather_stats(self):
        """Rank 0 receives every rank's stats table (call after :meth:`stop`)."""
        if self.rank != 0:
            self.transport.send(0, STATS, json.dumps(self.stats.to_dict()).encode())
            return None
        tables = {0: self.stats.table()}
        for r in range(1, self.world_size):
            s = CommStats()
            s.merge(json.loads(self.transport.recv(r, STATS)))
            tables[r] = s.table()
        return tables

    # -- cycle loop ----------------------------------------------------------

    def _loop(self):
        try:
            while True:
                t0 = time.perf_counter()
                stop_all = self._cycle()
                if stop_all:
                    break
                rest = self.config.cycle_ms / 1000.0 - (time.perf_counter() - t0)
                if rest > 0:
                    time.sleep(rest)
        except Exception as exc:  # surface on every waiting handle
            log.error("rank %d comm loop failed: %s", self.rank, exc)
            self._fatal = exc
            for h in self._pending.values():
                h._finish(error=exc)
            self._pending.clear()

    def _ready_message(self):
        while True:
            try:
                h = self._submit_q.get_nowait()
            except queue.Empty:
                break
            if h.req.name in self._pending:
                h._finish(error=ProtocolError(f"rank {self.rank}: tensor {h.req.name!r} submitted twice"))
                continue
            self._pending[h.req.name] = h
        cached, new = [], []
        for name, h in self._pending.items():
            idx = self.cache.get(name)
            if idx is not None:
                cached.append(idx)
            elif name not in self._announced:
                new.append(h.req.__dict__)
                self._announced.add(name)
        stop = self._stop.is_set() and not self._pending
        return len(self.cache), encode_bitmap(cached, len(self.cache)), new, stop

    def _cycle(self):
        t0 = time.perf_counter()
        nbits, bitmap, new, stop = self._ready_message()
        if self.rank == 0:
            reports = [(0, nbits, bitmap, new, stop)]
            for r in range(1, self.world_size):
                reports.append((r,) + self._decode_ready(self.transport.recv(r, READY_BITMAP)))
            msg = self._coordinate(reports)
            payload = json.dumps(msg).encode()
            for r in range(1, self.world_size):
                self.transport.send(r, SCHEDULE, payload)
        else:
            head = struct.pack("<I?", nbits, stop)
            body = json.dumps(new).encode()
            self.transport.send(0, READY_BITMAP, head + struct.pack("<I", len(bitmap)) + bitmap + body)
            msg = json.loads(self.transport.recv(0, SCHEDULE))
        if msg["groups"] or msg["stalls"]:
            self.stats.record("negotiate", 0, time.perf_counter() - t0)
        for name in msg["cache"]:
            self.cache.assign(name)
        if msg.get("error"):
            raise ProtocolError(msg["error"])
        for group in msg["groups"]:
            self._execute(group)
        if msg["stalls"]:
            err = StallError({k: set(v) for k, v in msg["stalls"].items()})
            log.error("rank %d: %s", self.rank, err)
            for name in msg["stalls"]:
                h = self._pending.pop(name, None)
                if h is not None:
                    h._finish(error=err)
                self._announced.discard(name)
        return msg["stop"]

    @staticmethod
    def _decode_ready(data):
        nbits, stop = struct.unpack_from("<I?", data, 0)
        (blen,) = struct.unpack_from("<I", data, 5)
        bitmap = data[9:9 + blen]
        new = json.loads(data[9 + blen:])
        return nbits, bitmap, new, stop

    def _coordinate(self, reports):
        coord, now = self._coord, time.perf_counter()
        error = None
        all_stop = True
        try:
            for rank, nbits, bitmap, new, stop in reports:
                all_stop &= bool(stop)
                for d in new:
                    coord.submit(rank, CollectiveRequest(**d), now)
                coord.submit_bitmap(rank, decode_bitmap(bitmap, nbits), now)
        except ProtocolError as exc:
            error = str(exc)
        before = len(coord.cache)
        schedule, stalls = coord.tick(now)
        groups = fuse(schedule, self.config.capacity) if schedule else []
        new_cache = [coord.cache.name(i) for i in range(before, len(coord.cache))]
        return dict(groups=[[m.name for m in g.members] for g in groups], cache=new_cache,
                    stalls={k: sorted(v) for k, v in stalls.items()}, stop=all_stop and not coord.ready,
                    error=error)

    def _execute(self, names):
        handles = [self._pending.pop(n) for n in names]
        op = handles[0].req.op
        t0 = time.perf_counter()
        if len(handles) == 1:
            buf = handles[0].array.ravel().copy()
        else:
            buf = np.concatenate([h.array.ravel() for h in handles])
        ring_allreduce(self.transport, buf, "average" if op == "average" else "sum")
        dt = time.perf_counter() - t0
        self.stats.record("ring_allreduce", buf.nbytes, dt)
        offset = 0
        for h in handles:
            n = h.req.count
            out = buf[offset:offset + n].reshape(h.array.shape)
            offset += n
            self.execution_log.append(h.req.name)
            self._announced.discard(h.req.name)
            if op in ("average", "sum"):
                self.stats.record("allreduce", h.array.nbytes, dt * h.array.nbytes / max(buf.nbytes, 1))
            h._finish(result=out)


def run_ranks(world_size, fn, transport="channel", config=None, recv_timeout=120.0):
    """Run ``fn(engine)`` on ``world_size`` in-process ranks; returns per-rank results.

    With ``transport="tcp"`` the ranks still live in this process but talk over
    loopback sockets, which exercises the full wire format.
    """
    if transport == "channel":
        transports = channel_world(world_size, recv_timeout)
    elif transport == "tcp":
        transports = [TcpTransport(0, world_size, recv_timeout=recv_timeout)]
        addr = transports[0].address
        transports += [TcpTransport(r, world_size, addr, recv_timeout=recv_timeout) for r in range(1, world_size)]
        threads = [threading.Thread(target=t.connect) for t in transports]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    else:
        raise ConfigError(f"unknown transport {transport!r}")
    results, errors = [None] * world_size, [None] * world_size

    def body(r):
        eng = CommEngine(transports[r], config).start()
        try:
            results[r] = fn(eng)
        except Exception as exc:
            errors[r] = exc
        finally:
            try:
                eng.stop()
            except Exception as exc:
                errors[r] = errors[r] or exc

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for t in transports:
        t.close()
    for e in errors:
        if e is not None:
            raise e
    return results
