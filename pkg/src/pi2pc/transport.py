"""Two-party channels with byte/round accounting.

Every message is framed as an 8-byte little-endian length prefix plus a
4-byte round tag; those 12 bytes are tracked as header bytes, separately from
payload bytes, so payload accounting can be compared against analytic
communication models without framing noise.

Two backends: in-process paired queues (both parties in one process, one
thread each) and TCP sockets.  Given the same protocol and seeds they produce
identical transcripts.

An optional delay model injects `t_bc + payload_bytes / rt_bw` seconds per
message on the send side (header bytes are not charged; they are engine
framing, not modeled traffic).
"""

from __future__ import annotations

import io
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

HEADER_BYTES = 12  # 8-byte length prefix + 4-byte round tag


class ChannelError(RuntimeError):
    """Base class for transport failures."""


class ChannelClosedError(ChannelError):
    """Peer disconnected or channel closed."""


class RoundDesyncError(ChannelError):
    """Message round tag does not match the local round counter."""


@dataclass
class DelayModel:
    """Per-message latency: t_bc + payload_bytes / rt_bw (bytes per second)."""

    t_bc: float = 50e-6
    rt_bw: float = 1e9
    enabled: bool = False

    def __post_init__(self):
        if self.t_bc < 0 or self.rt_bw <= 0:
            raise ValueError("need t_bc >= 0 and rt_bw > 0")

    def delay_for(self, payload_bytes: int) -> float:
        return self.t_bc + payload_bytes / self.rt_bw


@dataclass
class TranscriptEntry:
    round: int
    direction: str  # "send" | "recv"
    payload_bytes: int
    header_bytes: int
    t_wall_ns: int


@dataclass
class Transcript:
    """Per-party ledger of every message, in order."""

    entries: list[TranscriptEntry] = field(default_factory=list)

    def add(self, round_idx: int, direction: str, payload: int, header: int) -> None:
        self.entries.append(
            TranscriptEntry(round_idx, direction, payload, header, time.monotonic_ns())
        )

    def __len__(self):
        return len(self.entries)

    def payload_bytes(self, direction: str | None = None) -> int:
        return sum(
            e.payload_bytes
            for e in self.entries
            if direction is None or e.direction == direction
        )

    def header_bytes(self, direction: str | None = None) -> int:
        return sum(
            e.header_bytes
            for e in self.entries
            if direction is None or e.direction == direction
        )

    def rounds_used(self) -> int:
        return len({e.round for e in self.entries})

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("round,dir,payload_bytes,header_bytes,t_wall_ns\n")
        for e in self.entries:
            buf.write(
                f"{e.round},{e.direction},{e.payload_bytes},{e.header_bytes},{e.t_wall_ns}\n"
            )
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def assert_mirrored(t0: Transcript, t1: Transcript) -> None:
    """Check that two parties' transcripts are byte-for-byte mirrored:
    everything one party sent, the other received, in order, per round."""
    for a, b in ((t0, t1), (t1, t0)):
        sent = [(e.round, e.payload_bytes) for e in a.entries if e.direction == "send"]
        recv = [(e.round, e.payload_bytes) for e in b.entries if e.direction == "recv"]
        if sent != recv:
            raise AssertionError(f"transcripts not mirrored:\n{sent}\nvs\n{recv}")


class Channel:
    """One party's endpoint of a two-party connection."""

    def __init__(self, role: int, delay: DelayModel | None = None):
        if role not in (0, 1):
            raise ValueError("role must be 0 or 1")
        self.role = role
        self.delay = delay or DelayModel()
        self.transcript = Transcript()
        self._round = 0

    @property
    def round_index(self) -> int:
        return self._round

    def round_barrier(self) -> int:
        """Advance the round counter (both parties call this symmetrically)."""
        self._round += 1
        return self._round

    def send(self, payload: bytes) -> None:
        if self.delay.enabled:
            time.sleep(self.delay.delay_for(len(payload)))
        self._send_raw(self._round, payload)
        self.transcript.add(self._round, "send", len(payload), HEADER_BYTES)

    def recv(self) -> bytes:
        tag, payload = self._recv_raw()
        if tag != self._round:
            raise RoundDesyncError(
                f"peer message tagged round {tag}, local round is {self._round}"
            )
        self.transcript.add(self._round, "recv", len(payload), HEADER_BYTES)
        return payload

    def exchange(self, payload: bytes) -> bytes:
        """Symmetric send-then-receive within the current round."""
        self.send(payload)
        return self.recv()

    def close(self) -> None:  # pragma: no cover - backend specific
        pass

    # backend hooks
    def _send_raw(self, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def _recv_raw(self) -> tuple[int, bytes]:
        raise NotImplementedError


class InProcChannel(Channel):
    """Queue-backed endpoint; build with `inproc_pair()`."""

    def __init__(self, role, outbox: queue.Queue, inbox: queue.Queue, delay=None):
        super().__init__(role, delay)
        self._outbox = outbox
        self._inbox = inbox
        self._closed = False

    def _send_raw(self, tag, payload):
        if self._closed:
            raise ChannelClosedError("channel closed")
        self._outbox.put((tag, payload))

    def _recv_raw(self):
        if self._closed:
            raise ChannelClosedError("channel closed")
        item = self._inbox.get()
        if item is None:
            raise ChannelClosedError("peer closed the channel")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def inproc_pair(delay: DelayModel | None = None) -> tuple[InProcChannel, InProcChannel]:
    q01: queue.Queue = queue.Queue()
    q10: queue.Queue = queue.Queue()
    d0 = DelayModel(**vars(delay)) if delay else None
    d1 = DelayModel(**vars(delay)) if delay else None
    return (
        InProcChannel(0, q01, q10, d0),
        InProcChannel(1, q10, q01, d1),
    )


def run_pair(f0, f1, delay: DelayModel | None = None):
    """Run two party closures over an in-process channel pair, one thread
    each; returns (results, channels).  Re-raises the first party failure."""
    ch0, ch1 = inproc_pair(delay)
    results: list = [None, None]
    errors: list = [None, None]

    def wrap(i, fn, ch):
        try:
            results[i] = fn(ch)
        except BaseException as exc:  # noqa: BLE001 - surfaced to the caller
            errors[i] = exc
            ch.close()

    threads = [
        threading.Thread(target=wrap, args=(0, f0, ch0)),
        threading.Thread(target=wrap, args=(1, f1, ch1)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for err in errors:
        if err is not None:
            raise err
    return results, (ch0, ch1)


class TcpChannel(Channel):
    """Socket endpoint with a writer thread (avoids send/send deadlock)."""

    def __init__(self, role: int, sock: socket.socket, delay=None):
        super().__init__(role, delay)
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wq: queue.Queue = queue.Queue()
        self._writer_err: Exception | None = None
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()

    def _write_loop(self):
        try:
            while True:
                item = self._wq.get()
                if item is None:
                    return
                self._sock.sendall(item)
        except OSError as exc:  # surfaced on the next send
            self._writer_err = exc

    def _send_raw(self, tag, payload):
        if self._writer_err is not None:
            raise ChannelClosedError(str(self._writer_err))
        frame = struct.pack("<QI", len(payload), tag) + payload
        self._wq.put(frame)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(min(n, 1 << 20))
            except OSError as exc:
                raise ChannelClosedError(str(exc)) from exc
            if not chunk:
                raise ChannelClosedError("peer disconnected")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _recv_raw(self):
        head = self._recv_exact(HEADER_BYTES)
        length, tag = struct.unpack("<QI", head)
        return tag, self._recv_exact(length)

    def close(self):
        self._wq.put(None)
        self._writer.join(timeout=5)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(bind_addr: str, role: int = 0, delay=None, timeout: float = 30.0) -> TcpChannel:
    host, port = bind_addr.rsplit(":", 1)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, int(port)))
    srv.listen(1)
    srv.settimeout(timeout)
    try:
        sock, _ = srv.accept()
    except socket.timeout as exc:
        raise ChannelClosedError("accept timed out") from exc
    finally:
        srv.close()
    return TcpChannel(role, sock, delay)


def tcp_connect(peer_addr: str, role: int = 1, delay=None, timeout: float = 30.0) -> TcpChannel:
    host, port = peer_addr.rsplit(":", 1)
    deadline = time.monotonic() + timeout
    last: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
            return TcpChannel(role, sock, delay)
        except OSError as exc:
            last = exc
            time.sleep(0.05)
    raise ChannelClosedError(f"could not connect to {peer_addr}: {last}")
