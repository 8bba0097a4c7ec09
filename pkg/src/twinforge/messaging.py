"""Embedded publish/subscribe broker for DT-PT and DT-DT communication.

Topics are dot-separated lowercase segments. Subscriptions use a single
``*`` wildcard per segment. Delivery is per-topic FIFO with exactly-once per
subscription; there is no replay, so a subscriber only sees messages published
after it subscribed. Each topic retains a bounded ring of recent messages so
publishers are never blocked.

The broker can serve a TCP listener so multiple instance processes share one
broker. Wire format: length-prefixed frames -- a 4-byte big-endian length of
the UTF-8 JSON header, the header itself, then the raw payload bytes whose
count the header's ``len`` field gives. Header ops: ``pub``, ``sub``, ``msg``
(plus ``unsub``, ``ok`` and ``err`` for acks and errors).
"""

from __future__ import annotations

import json
import queue
import re
import socket
import struct
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .errors import InvalidConfig, InvalidPattern, InvalidTopic, Unreachable

SEGMENT_RE = re.compile(r"^[a-z0-9_-]+$")
MAX_TOPIC_BYTES = 255
RETAINED_PER_TOPIC = 1024


def validate_topic(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise InvalidTopic("topic must be a non-empty string")
    if len(name.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise InvalidTopic("topic exceeds 255 bytes")
    for segment in name.split("."):
        if not SEGMENT_RE.match(segment):
            raise InvalidTopic(f"bad topic segment {segment!r} in {name!r}")
    return name


def validate_pattern(pattern: str) -> str:
    if not isinstance(pattern, str) or not pattern:
        raise InvalidPattern("pattern must be a non-empty string")
    for segment in pattern.split("."):
        if segment != "*" and not SEGMENT_RE.match(segment):
            raise InvalidPattern(f"bad pattern segment {segment!r} in {pattern!r}")
    return pattern


def topic_matches(pattern: str, topic: str) -> bool:
    """``*`` matches exactly one segment; segment counts must agree."""
    pseg = pattern.split(".")
    tseg = topic.split(".")
    if len(pseg) != len(tseg):
        return False
    return all(p == "*" or p == t for p, t in zip(pseg, tseg))


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    seq: int
    published_at: float
    sender: str


class Subscription:
    def __init__(self, client: str, pattern: str, sub_id: int):
        self.client = client
        self.pattern = pattern
        self.sub_id = sub_id
        self.queue: queue.Queue = queue.Queue()
        self.delivery_cursor: dict[str, int] = {}  # topic -> last delivered seq
        self.closed = False

    def get(self, timeout: Optional[float] = None) -> Optional[Message]:
        try:
            return self.queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self) -> list[Message]:
        out = []
        while True:
            try:
                out.append(self.queue.get_nowait())
            except queue.Empty:
                return out


class _TopicState:
    __slots__ = ("next_seq", "retained")

    def __init__(self):
        self.next_seq = 1
        self.retained = deque(maxlen=RETAINED_PER_TOPIC)


class Broker:
    """In-process broker; safe for concurrent publishers and subscribers."""

    def __init__(self):
        self._topics: dict[str, _TopicState] = {}
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self._next_sub_id = 1
        self._listener: Optional[BrokerListener] = None

    def publish(self, client: str, topic: str, payload: bytes) -> int:
        validate_topic(topic)
        # Delivery happens under the lock so two concurrent publishers cannot
        # enqueue out of seq order; queues are unbounded, puts never block.
        with self._lock:
            state = self._topics.setdefault(topic, _TopicState())
            seq = state.next_seq
            state.next_seq += 1
            msg = Message(
                topic=topic,
                payload=bytes(payload),
                seq=seq,
                published_at=time.time(),
                sender=client,
            )
            state.retained.append(msg)
            for sub in self._subs:
                if not sub.closed and topic_matches(sub.pattern, topic):
                    sub.delivery_cursor[topic] = seq
                    sub.queue.put(msg)
        return seq

    def subscribe(self, client: str, pattern: str) -> Subscription:
        validate_pattern(pattern)
        with self._lock:
            sub = Subscription(client, pattern, self._next_sub_id)
            self._next_sub_id += 1
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            sub.closed = True
            if sub in self._subs:
                self._subs.remove(sub)

    def topic_depth(self, topic: str) -> int:
        with self._lock:
            state = self._topics.get(topic)
            return len(state.retained) if state else 0

    def serve(self, host: str, port: int) -> "BrokerListener":
        self._listener = BrokerListener(self, host, port)
        self._listener.start()
        return self._listener

    def close(self) -> None:
        if self._listener is not None:
            self._listener.stop()
            self._listener = None


# -- wire framing -------------------------------------------------------------


def write_frame(sock: socket.socket, header: dict, payload: bytes = b"") -> None:
    if payload:
        header = dict(header, len=len(payload))
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(raw)) + raw + payload)


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> Optional[tuple[dict, bytes]]:
    raw_len = _recv_exact(sock, 4)
    if raw_len is None:
        return None
    (hlen,) = struct.unpack(">I", raw_len)
    raw = _recv_exact(sock, hlen)
    if raw is None:
        return None
    header = json.loads(raw.decode("utf-8"))
    plen = int(header.get("len", 0))
    payload = b""
    if plen:
        payload = _recv_exact(sock, plen)
        if payload is None:
            return None
    return header, payload


# -- TCP listener --------------------------------------------------------------


class BrokerListener:
    def __init__(self, broker: Broker, host: str, port: int):
        self.broker = broker
        self.host = host
        self.port = port
        self._server: Optional[socket.socket] = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: list[socket.socket] = []

    def start(self) -> None:
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((self.host, self.port))
        self.port = self._server.getsockname()[1]
        self._server.listen(32)
        t = threading.Thread(target=self._accept_loop, daemon=True, name="broker-accept")
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            self._conns.append(conn)
            t = threading.Thread(
                target=self._serve_conn, args=(conn,), daemon=True, name="broker-conn"
            )
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        client_id = "conn-" + uuid.uuid4().hex[:8]
        send_lock = threading.Lock()
        subs: dict[int, Subscription] = {}
        forwarders: list[threading.Thread] = []

        def send(header: dict, payload: bytes = b"") -> None:
            with send_lock:
                try:
                    write_frame(conn, header, payload)
                except OSError:
                    pass

        def forward(sub: Subscription, client_sub_id: int) -> None:
            while not sub.closed:
                msg = sub.get(timeout=0.2)
                if msg is None:
                    continue
                send(
                    {
                        "op": "msg",
                        "topic": msg.topic,
                        "seq": msg.seq,
                        "sub": client_sub_id,
                        "sender": msg.sender,
                        "ts": msg.published_at,
                    },
                    msg.payload,
                )

        try:
            while not self._stop.is_set():
                try:
                    frame = read_frame(conn)
                except OSError:
                    break  # listener shut the socket under us
                if frame is None:
                    break
                header, payload = frame
                op = header.get("op")
                req = header.get("req")
                try:
                    if op == "pub":
                        seq = self.broker.publish(client_id, header["topic"], payload)
                        if req is not None:
                            send({"op": "ok", "req": req, "seq": seq})
                    elif op == "sub":
                        client_sub_id = int(header["sub"])
                        sub = self.broker.subscribe(client_id, header["pattern"])
                        subs[client_sub_id] = sub
                        t = threading.Thread(
                            target=forward, args=(sub, client_sub_id), daemon=True
                        )
                        t.start()
                        forwarders.append(t)
                        if req is not None:
                            send({"op": "ok", "req": req, "sub": client_sub_id})
                    elif op == "unsub":
                        sub = subs.pop(int(header["sub"]), None)
                        if sub is not None:
                            self.broker.unsubscribe(sub)
                        if req is not None:
                            send({"op": "ok", "req": req})
                    else:
                        if req is not None:
                            send({"op": "err", "req": req, "error": "bad_op",
                                  "message": f"unknown op {op!r}"})
                except Exception as exc:  # surface broker errors to the client
                    code = getattr(exc, "code", "error")
                    if req is not None:
                        send({"op": "err", "req": req, "error": code, "message": str(exc)})
        finally:
            for sub in subs.values():
                self.broker.unsubscribe(sub)
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        for conn in self._conns:
            try:
                conn.close()
            except OSError:
                pass


# -- TCP client ----------------------------------------------------------------


class BrokerClient:
    """Connects to a broker listener; mirrors the in-process Broker surface."""

    def __init__(self, address: str, client_id: Optional[str] = None, timeout: float = 5.0):
        host, _, port = address.rpartition(":")
        self.client_id = client_id or ("cli-" + uuid.uuid4().hex[:8])
        self.timeout = timeout
        try:
            self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        except OSError as exc:
            raise Unreachable(f"broker at {address} unreachable: {exc}")
        self._sock.settimeout(None)
        self._send_lock = threading.Lock()
        self._next_req = 1
        self._next_sub = 1
        self._pending: dict[int, queue.Queue] = {}
        self._subs: dict[int, Subscription] = {}
        self._lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="broker-client")
        self._reader.start()

    def _read_loop(self) -> None:
        while not self._closed:
            try:
                frame = read_frame(self._sock)
            except OSError:
                break
            if frame is None:
                break
            header, payload = frame
            op = header.get("op")
            if op == "msg":
                with self._lock:
                    sub = self._subs.get(int(header["sub"]))
                if sub is not None and not sub.closed:
                    msg = Message(
                        topic=header["topic"],
                        payload=payload,
                        seq=int(header["seq"]),
                        published_at=float(header.get("ts", 0.0)),
                        sender=header.get("sender", ""),
                    )
                    sub.delivery_cursor[msg.topic] = msg.seq
                    sub.queue.put(msg)
            elif op in ("ok", "err"):
                with self._lock:
                    waiter = self._pending.pop(int(header.get("req", 0)), None)
                if waiter is not None:
                    waiter.put(header)

    def _roundtrip(self, header: dict, payload: bytes = b"") -> dict:
        with self._lock:
            req = self._next_req
            self._next_req += 1
            waiter: queue.Queue = queue.Queue()
            self._pending[req] = waiter
        try:
            with self._send_lock:
                write_frame(self._sock, dict(header, req=req), payload)
        except OSError as exc:
            raise Unreachable(f"broker connection lost: {exc}")
        try:
            reply = waiter.get(timeout=self.timeout)
        except queue.Empty:
            raise Unreachable("broker did not answer in time")
        if reply.get("op") == "err":
            from .errors import error_from_code

            raise error_from_code(reply.get("error", "error"), reply.get("message", ""))
        return reply

    def publish(self, topic: str, payload: bytes) -> int:
        reply = self._roundtrip({"op": "pub", "topic": topic}, payload)
        return int(reply["seq"])

    def subscribe(self, pattern: str) -> Subscription:
        validate_pattern(pattern)
        with self._lock:
            sub_id = self._next_sub
            self._next_sub += 1
            sub = Subscription(self.client_id, pattern, sub_id)
            self._subs[sub_id] = sub
        self._roundtrip({"op": "sub", "pattern": pattern, "sub": sub_id})
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.closed = True
        with self._lock:
            self._subs.pop(sub.sub_id, None)
        try:
            self._roundtrip({"op": "unsub", "sub": sub.sub_id})
        except Unreachable:
            pass

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


# -- channel binding -----------------------------------------------------------

CHANNEL_ROLES = {"pt", "dt-peer"}
CHANNEL_DIRECTIONS = {"in", "out", "bidirectional"}


@dataclass
class BoundChannel:
    role: str
    topic: str
    direction: str
    publish: Optional[callable] = None   # (payload: bytes) -> seq
    subscription: Optional[Subscription] = None


@dataclass
class ChannelSet:
    dt_id: str
    channels: list = field(default_factory=list)

    def pt_publishers(self) -> list:
        return [c for c in self.channels if c.role == "pt" and c.publish is not None]

    def close(self, broker) -> None:
        for c in self.channels:
            if c.subscription is not None:
                broker.unsubscribe(c.subscription)


def bind_channels(dt_id: str, channels_config: list, broker, client_id: Optional[str] = None) -> ChannelSet:
    """Create publisher/subscriber bindings for each configured channel.

    ``broker`` is either an in-process Broker or a BrokerClient; both expose
    publish/subscribe. Bidirectional channels get both sides.
    """
    if not channels_config:
        raise InvalidConfig("dt config declares no channels")
    client = client_id or f"dt-{dt_id}"
    bound = ChannelSet(dt_id=dt_id)
    for i, ch in enumerate(channels_config):
        if not isinstance(ch, dict):
            raise InvalidConfig(f"channels[{i}] must be an object")
        role = ch.get("role")
        topic = ch.get("topic")
        direction = ch.get("direction", "bidirectional")
        if role not in CHANNEL_ROLES:
            raise InvalidConfig(f"channels[{i}].role must be one of {sorted(CHANNEL_ROLES)}")
        if direction not in CHANNEL_DIRECTIONS:
            raise InvalidConfig(f"channels[{i}].direction must be one of {sorted(CHANNEL_DIRECTIONS)}")
        if not topic:
            raise InvalidConfig(f"channels[{i}].topic must be a non-empty topic")
        validate_topic(topic)
        channel = BoundChannel(role=role, topic=topic, direction=direction)
        if direction in ("out", "bidirectional"):
            if isinstance(broker, Broker):
                channel.publish = lambda payload, t=topic: broker.publish(client, t, payload)
            else:
                channel.publish = lambda payload, t=topic: broker.publish(t, payload)
        if direction in ("in", "bidirectional"):
            if isinstance(broker, Broker):
                channel.subscription = broker.subscribe(client, topic)
            else:
                channel.subscription = broker.subscribe(topic)
        bound.channels.append(channel)
    return bound
