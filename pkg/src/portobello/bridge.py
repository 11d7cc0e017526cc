"""Framed TCP pub-sub bridge for renderer clients.

Frame layout (see PROTOCOL.md for the full byte-level reference):

    magic  4 bytes  ``PBL1``
    length u32 LE   payload byte count (type byte excluded)
    type   u8       message variant tag
    payload         variant-specific, little-endian throughout

Coordinates and quaternion components are f64, stamps are u64 nanoseconds,
ids are u16-length-prefixed UTF-8.  Transform and agent-state updates are
last-value-wins and may be dropped under backpressure; trigger firings are
reliable and delivered exactly once per client, in firing order.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .frames import RigidTransform, Timestamp

MAGIC = b"PBL1"
DEFAULT_PORT = 17333
PORT_ENV_VAR = "PORTOBELLO_PORT"

TYPE_TRANSFORM = 1
TYPE_AGENT_STATE = 2
TYPE_TRIGGER_FIRED = 3
TYPE_MAP_CHUNK = 4
TYPE_HEARTBEAT = 5
TYPE_SUBSCRIBE = 6
TYPE_ACK = 7

TOPICS = ("tf", "agents", "triggers", "map")


class FrameError(Exception):
    """Bad magic, length mismatch, or malformed payload."""


class UnknownType(Exception):
    def __init__(self, tag: int):
        super().__init__(f"unknown message type {tag}")
        self.tag = tag


class BindError(Exception):
    """Server endpoint could not be bound."""


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class TransformUpdate:
    parent: str
    child: str
    stamp: Timestamp
    transform: RigidTransform


@dataclass(frozen=True)
class AgentStateMsg:
    agent_id: str
    stamp: Timestamp
    pose: RigidTransform
    visible: bool


@dataclass(frozen=True)
class TriggerFired:
    trigger_id: str
    stamp: Timestamp
    pose: RigidTransform


@dataclass(frozen=True)
class MapChunk:
    offset: int
    points: tuple  # of (x, y, z)

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Heartbeat:
    stamp: Timestamp
    publish_rate_hz: float


@dataclass(frozen=True)
class Subscribe:
    topics: tuple[str, ...]


@dataclass(frozen=True)
class Ack:
    request_id: int


WireMessage = TransformUpdate | AgentStateMsg | TriggerFired | MapChunk | Heartbeat | Subscribe | Ack


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for wire format")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, at: int) -> tuple[str, int]:
    if at + 2 > len(buf):
        raise FrameError("truncated string length")
    (n,) = struct.unpack_from("<H", buf, at)
    at += 2
    if at + n > len(buf):
        raise FrameError("truncated string body")
    return buf[at : at + n].decode("utf-8"), at + n


def _pack_pose(t: RigidTransform) -> bytes:
    w, x, y, z = (float(v) for v in t.rotation)
    tx, ty, tz = (float(v) for v in t.translation)
    return struct.pack("<7d", w, x, y, z, tx, ty, tz)


def _unpack_pose(buf: bytes, at: int) -> tuple[RigidTransform, int]:
    if at + 56 > len(buf):
        raise FrameError("truncated pose")
    vals = struct.unpack_from("<7d", buf, at)
    return RigidTransform(np.array(vals[:4]), np.array(vals[4:])), at + 56


def encode_payload(msg: WireMessage) -> tuple[int, bytes]:
    if isinstance(msg, TransformUpdate):
        return TYPE_TRANSFORM, (
            _pack_str(msg.parent) + _pack_str(msg.child) + struct.pack("<Q", msg.stamp) + _pack_pose(msg.transform)
        )
    if isinstance(msg, AgentStateMsg):
        return TYPE_AGENT_STATE, (
            _pack_str(msg.agent_id)
            + struct.pack("<Q", msg.stamp)
            + _pack_pose(msg.pose)
            + struct.pack("<B", 1 if msg.visible else 0)
        )
    if isinstance(msg, TriggerFired):
        return TYPE_TRIGGER_FIRED, (
            _pack_str(msg.trigger_id) + struct.pack("<Q", msg.stamp) + _pack_pose(msg.pose)
        )
    if isinstance(msg, MapChunk):
        body = struct.pack("<II", msg.offset, len(msg.points))
        flat = np.asarray(msg.points, dtype="<f8").reshape(-1, 3)
        return TYPE_MAP_CHUNK, body + flat.tobytes()
    if isinstance(msg, Heartbeat):
        return TYPE_HEARTBEAT, struct.pack("<Qd", msg.stamp, msg.publish_rate_hz)
    if isinstance(msg, Subscribe):
        body = struct.pack("<H", len(msg.topics))
        for t in msg.topics:
            body += _pack_str(t)
        return TYPE_SUBSCRIBE, body
    if isinstance(msg, Ack):
        return TYPE_ACK, struct.pack("<I", msg.request_id)
    raise TypeError(f"not a wire message: {msg!r}")


def encode(msg: WireMessage) -> bytes:
    tag, payload = encode_payload(msg)
    return MAGIC + struct.pack("<IB", len(payload), tag) + payload


def decode_payload(tag: int, buf: bytes) -> WireMessage:
    if tag == TYPE_TRANSFORM:
        parent, at = _unpack_str(buf, 0)
        child, at = _unpack_str(buf, at)
        if at + 8 > len(buf):
            raise FrameError("truncated stamp")
        (stamp,) = struct.unpack_from("<Q", buf, at)
        pose, at = _unpack_pose(buf, at + 8)
        _expect_consumed(buf, at)
        return TransformUpdate(parent, child, stamp, pose)
    if tag == TYPE_AGENT_STATE:
        agent_id, at = _unpack_str(buf, 0)
        (stamp,) = struct.unpack_from("<Q", buf, at)
        pose, at = _unpack_pose(buf, at + 8)
        if at + 1 > len(buf):
            raise FrameError("truncated visibility flag")
        visible = buf[at] != 0
        _expect_consumed(buf, at + 1)
        return AgentStateMsg(agent_id, stamp, pose, visible)
    if tag == TYPE_TRIGGER_FIRED:
        trigger_id, at = _unpack_str(buf, 0)
        if at + 8 > len(buf):
            raise FrameError("truncated stamp")
        (stamp,) = struct.unpack_from("<Q", buf, at)
        pose, at = _unpack_pose(buf, at + 8)
        _expect_consumed(buf, at)
        return TriggerFired(trigger_id, stamp, pose)
    if tag == TYPE_MAP_CHUNK:
        if len(buf) < 8:
            raise FrameError("truncated map chunk header")
        offset, count = struct.unpack_from("<II", buf, 0)
        need = 8 + count * 24
        if len(buf) != need:
            raise FrameError(f"map chunk length {len(buf)} != {need}")
        pts = np.frombuffer(buf, dtype="<f8", offset=8).reshape(count, 3)
        return MapChunk(offset, tuple(map(tuple, pts.tolist())))
    if tag == TYPE_HEARTBEAT:
        if len(buf) != 16:
            raise FrameError("heartbeat payload must be 16 bytes")
        stamp, rate = struct.unpack("<Qd", buf)
        return Heartbeat(stamp, rate)
    if tag == TYPE_SUBSCRIBE:
        if len(buf) < 2:
            raise FrameError("truncated subscribe")
        (n,) = struct.unpack_from("<H", buf, 0)
        at = 2
        topics = []
        for _ in range(n):
            topic, at = _unpack_str(buf, at)
            topics.append(topic)
        _expect_consumed(buf, at)
        return Subscribe(tuple(topics))
    if tag == TYPE_ACK:
        if len(buf) != 4:
            raise FrameError("ack payload must be 4 bytes")
        return Ack(struct.unpack("<I", buf)[0])
    raise UnknownType(tag)


def _expect_consumed(buf: bytes, at: int) -> None:
    if at != len(buf):
        raise FrameError(f"trailing bytes: consumed {at} of {len(buf)}")


def decode(frame: bytes) -> WireMessage:
    msg, rest = decode_stream(frame)
    if msg is None or rest:
        raise FrameError("frame length mismatch")
    return msg


def decode_stream(buf: bytes) -> tuple[WireMessage | None, bytes]:
    """Decode one frame off the front of ``buf``; returns (msg, remainder).

    Returns ``(None, buf)`` when more bytes are needed.
    """
    if len(buf) < 9:
        return None, buf
    if buf[:4] != MAGIC:
        raise FrameError(f"bad magic {buf[:4]!r}")
    length, tag = struct.unpack_from("<IB", buf, 4)
    end = 9 + length
    if len(buf) < end:
        return None, buf
    return decode_payload(tag, buf[9:end]), buf[end:]


# ---------------------------------------------------------------------------
# renderer coordinate conventions


@dataclass(frozen=True)
class RendererConvention:
    handedness: str  # "right" | "left"
    up_axis: str  # "Y" | "Z"

    def __post_init__(self):
        if self.handedness not in ("right", "left") or self.up_axis not in ("Y", "Z"):
            raise ValueError("unsupported convention")

    def basis(self) -> np.ndarray:
        """Rows map canonical right-handed Z-up coordinates into this convention."""
        return _BASES[(self.handedness, self.up_axis)]


MAP_CONVENTION = RendererConvention("right", "Z")

# Canonical frame is right-handed Z-up (the map frame).  The left-handed Y-up
# mapping is x->x, z->y, y->z; the remaining two are the proper/improper
# companions documented in PROTOCOL.md.
_BASES = {
    ("right", "Z"): np.eye(3),
    ("left", "Y"): np.array([[1.0, 0, 0], [0, 0, 1.0], [0, 1.0, 0]]),
    ("right", "Y"): np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]),
    ("left", "Z"): np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]]),
}


def convert_pose(t: RigidTransform, src: RendererConvention, dst: RendererConvention) -> RigidTransform:
    """Re-express a pose between axis/handedness conventions.

    ``convert_pose(convert_pose(t, a, b), b, a)`` restores ``t`` exactly.
    """
    m = dst.basis() @ src.basis().T
    r = t.matrix()[:3, :3]
    out = np.eye(4)
    out[:3, :3] = m @ r @ m.T
    out[:3, 3] = m @ t.translation
    return RigidTransform.from_matrix(out)


def convert_points(points: np.ndarray, src: RendererConvention, dst: RendererConvention) -> np.ndarray:
    m = dst.basis() @ src.basis().T
    return np.asarray(points) @ m.T


# ---------------------------------------------------------------------------
# pub-sub server


@dataclass(frozen=True)
class TelemetrySnapshot:
    """One tick's worth of publishable state."""

    stamp: Timestamp
    vehicle_pose: RigidTransform
    agents: tuple[tuple[str, RigidTransform, bool], ...] = ()  # (id, pose, visible)


class _Client:
    RELIABLE_DEPTH = 1024

    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.topics: set[str] = set()
        self.lock = threading.Lock()
        self.reliable: list[bytes] = []
        self.latest: TelemetrySnapshot | None = None
        self.sent_stamp: int = -1
        self.alive = True
        self.overflowed = False
        self.wake = threading.Event()

    def offer_snapshot(self, snap: TelemetrySnapshot) -> None:
        with self.lock:
            self.latest = snap
        self.wake.set()

    def queue_reliable(self, frame: bytes) -> None:
        with self.lock:
            if len(self.reliable) >= self.RELIABLE_DEPTH:
                self.overflowed = True
            else:
                self.reliable.append(frame)
        self.wake.set()


class BridgeServer:
    """Publishes snapshots and trigger events to subscribed TCP clients.

    The producer (:meth:`publish_snapshot`, :meth:`publish_event`) never
    blocks on a slow client: snapshots are last-value-wins per client and
    trigger events go through a bounded per-client queue whose overflow
    disconnects that client only.
    """

    def __init__(self, host: str = "127.0.0.1", port: int | None = None,
                 rate_hz: float = 10.0, map_points: np.ndarray | None = None,
                 map_chunk_size: int = 512):
        self.host = host
        self.port = resolve_port(port)
        self.rate_hz = rate_hz
        self.map_points = map_points
        self.map_chunk_size = map_chunk_size
        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._server_sock: socket.socket | None = None
        self.published_events = 0

    # -- lifecycle

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port))
        except OSError as e:
            sock.close()
            raise BindError(f"cannot bind {self.host}:{self.port}: {e}")
        if self.port == 0:
            self.port = sock.getsockname()[1]
        sock.listen(16)
        sock.settimeout(0.2)
        self._server_sock = sock
        t = threading.Thread(target=self._accept_loop, name="bridge-accept", daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        if self._server_sock is not None:
            self._server_sock.close()
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.alive = False
            c.wake.set()
            try:
                c.sock.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self) -> "BridgeServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- producing

    def publish_snapshot(self, snap: TelemetrySnapshot) -> None:
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.offer_snapshot(snap)

    def publish_event(self, event: TriggerFired) -> None:
        frame = encode(event)
        self.published_events += 1
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            if "triggers" in c.topics:
                c.queue_reliable(frame)

    # -- internals

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._server_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            client = _Client(sock, addr)
            with self._clients_lock:
                self._clients.append(client)
            for target, name in ((self._client_reader, "rd"), (self._client_writer, "wr")):
                t = threading.Thread(target=target, args=(client,), name=f"bridge-{name}-{addr}", daemon=True)
                t.start()
                self._threads.append(t)

    def _drop_client(self, client: _Client) -> None:
        client.alive = False
        client.wake.set()
        try:
            client.sock.close()
        except OSError:
            pass
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)

    def _client_reader(self, client: _Client) -> None:
        buf = b""
        client.sock.settimeout(0.5)
        while client.alive and not self._stop.is_set():
            try:
                chunk = client.sock.recv(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            if not chunk:
                break
            buf += chunk
            try:
                while True:
                    msg, buf = decode_stream(buf)
                    if msg is None:
                        break
                    if isinstance(msg, Subscribe):
                        client.topics = set(msg.topics)
                        if "map" in client.topics and self.map_points is not None:
                            self._queue_map(client)
            except (FrameError, UnknownType):
                break
        self._drop_client(client)

    def _queue_map(self, client: _Client) -> None:
        pts = self.map_points
        for off in range(0, len(pts), self.map_chunk_size):
            chunk = MapChunk(off, tuple(map(tuple, pts[off : off + self.map_chunk_size].tolist())))
            client.queue_reliable(encode(chunk))

    def _client_writer(self, client: _Client) -> None:
        period = 1.0 / self.rate_hz
        last_heartbeat = 0.0
        last_snap_stamp = -1
        next_snap_send = 0.0  # absolute cadence keeps the long-run rate at rate_hz
        while client.alive and not self._stop.is_set():
            client.wake.wait(timeout=0.02)
            client.wake.clear()
            if client.overflowed:
                break
            if not client.topics:
                continue  # nothing is published until the client subscribes
            with client.lock:
                reliable, client.reliable = client.reliable, []
                snap = client.latest
            try:
                for frame in reliable:
                    client.sock.sendall(frame)
                now = time.monotonic()
                if snap is not None and snap.stamp != last_snap_stamp and now >= next_snap_send:
                    if next_snap_send == 0.0 or now - next_snap_send > period:
                        next_snap_send = now + period
                    else:
                        next_snap_send += period
                    last_snap_stamp = snap.stamp
                    if "tf" in client.topics:
                        client.sock.sendall(
                            encode(TransformUpdate("map", "vehicle", snap.stamp, snap.vehicle_pose))
                        )
                    if "agents" in client.topics:
                        for aid, pose, visible in snap.agents:
                            client.sock.sendall(encode(AgentStateMsg(aid, snap.stamp, pose, visible)))
                if now - last_heartbeat >= 1.0:
                    last_heartbeat = now
                    stamp = snap.stamp if snap is not None else 0
                    client.sock.sendall(encode(Heartbeat(stamp, self.rate_hz)))
            except OSError:
                break
        self._drop_client(client)


def resolve_port(cli_value: int | None = None) -> int:
    """CLI flag wins over the environment variable, which wins over the default."""
    if cli_value is not None:
        return cli_value
    env = os.environ.get(PORT_ENV_VAR)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{PORT_ENV_VAR} must be an integer, got {env!r}")
    return DEFAULT_PORT
