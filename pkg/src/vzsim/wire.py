"""Agent/server control protocol.

Every message is a 4-byte big-endian length followed by a UTF-8 JSON object
``{"msg_id", "in_reply_to", "kind", "body"}`` with sorted keys and no
insignificant whitespace, so equal messages always encode to equal bytes.

Connection sequence for an agent::

    Register -> RegisterAck
    GetConfigSection("client") -> ConfigSection
    AddConfigObserver("client") -> Ack      (then ConfigChanged pushes)
    ReportLoad -> Ack                      (every ``frequency`` seconds)

The server sends ``Command`` and the agent answers ``CommandResult``.  Any
request may instead be answered by ``Error``.
"""

from __future__ import annotations

import itertools
import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .config import ConfigChange, ConfigManager, ConfigSubscription, ConfigTree, UnknownSection
from .observations import ActionRequest, CommandError, LoadObservation

log = logging.getLogger(__name__)

DEFAULT_PORT = 8888
MAX_FRAME = 16 << 20
_HEADER = struct.Struct(">I")

KINDS = frozenset({
    "Register", "RegisterAck", "GetConfigSection", "ConfigSection", "AddConfigObserver",
    "Ack", "ConfigChanged", "ReportLoad", "Command", "CommandResult", "Error",
})
REPLY_KIND = {
    "Register": "RegisterAck",
    "GetConfigSection": "ConfigSection",
    "AddConfigObserver": "Ack",
    "ReportLoad": "Ack",
    "Command": "CommandResult",
}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class WireMessage:
    msg_id: int
    kind: str
    body: dict = field(default_factory=dict)
    in_reply_to: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if not isinstance(self.msg_id, int) or self.msg_id < 0:
            raise ProtocolError("msg_id must be a nonnegative integer")
        if not isinstance(self.body, dict):
            raise ProtocolError("body must be an object")

    def as_dict(self) -> dict:
        return {"msg_id": self.msg_id, "in_reply_to": self.in_reply_to,
                "kind": self.kind, "body": self.body}


def encode(msg: WireMessage) -> bytes:
    try:
        payload = json.dumps(msg.as_dict(), sort_keys=True, separators=(",", ":"),
                             ensure_ascii=False, allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as e:
        raise ProtocolError(f"cannot encode {msg.kind}: {e}") from None
    if len(payload) > MAX_FRAME:
        raise ProtocolError("message too large")
    return _HEADER.pack(len(payload)) + payload


def _from_payload(payload: bytes) -> WireMessage:
    try:
        d = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed message: {e}") from None
    if not isinstance(d, dict) or set(d) != {"msg_id", "in_reply_to", "kind", "body"}:
        raise ProtocolError("bad envelope")
    return WireMessage(d["msg_id"], d["kind"], d["body"], d["in_reply_to"])


def decode(data: bytes) -> WireMessage:
    """Decode exactly one frame."""
    if len(data) < _HEADER.size:
        raise ProtocolError("truncated header")
    (n,) = _HEADER.unpack_from(data)
    if len(data) != _HEADER.size + n:
        raise ProtocolError("frame length mismatch")
    return _from_payload(data[_HEADER.size:])


class FrameDecoder:
    """Reassembles messages from an arbitrarily chunked byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= _HEADER.size:
            (n,) = _HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise ProtocolError("frame too large")
            if len(self._buf) < _HEADER.size + n:
                break
            payload = bytes(self._buf[_HEADER.size:_HEADER.size + n])
            del self._buf[:_HEADER.size + n]
            out.append(_from_payload(payload))
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# Transport

class Connection:
    """One end of a message stream; assigns msg_ids and decodes arrivals."""

    def __init__(self, transport: "LoopbackTransport", name: str):
        self.transport = transport
        self.name = name
        self.peer: Connection | None = None
        self.on_message: Callable[[WireMessage], None] = lambda m: None
        self.closed = False
        self._ids = itertools.count(1)
        self._decoder = FrameDecoder()

    def prepare(self, kind: str, body: dict | None = None,
                in_reply_to: int | None = None) -> WireMessage:
        """Build a message with the next msg_id without sending it yet.

        Lets a caller record what it waits for before a synchronous peer
        has a chance to answer.
        """
        return WireMessage(next(self._ids), kind, body or {}, in_reply_to)

    def deliver(self, msg: WireMessage) -> WireMessage:
        if self.closed:
            raise ConnectionError(f"{self.name} is closed")
        self.transport._enqueue(self, encode(msg))
        return msg

    def send(self, kind: str, body: dict | None = None,
             in_reply_to: int | None = None) -> WireMessage:
        return self.deliver(self.prepare(kind, body, in_reply_to))

    def reply(self, request: WireMessage, kind: str, body: dict | None = None) -> WireMessage:
        return self.send(kind, body, request.msg_id)

    def error(self, request: WireMessage | None, code: str, message: str) -> WireMessage:
        return self.send("Error", {"code": code, "message": message},
                         request.msg_id if request else None)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.transport._enqueue(self, b"")

    def _receive(self, data: bytes) -> None:
        if self.closed:
            return
        for msg in self._decoder.feed(data):
            self.on_message(msg)


class LoopbackTransport:
    """In-process byte pipe with deterministic FIFO delivery.

    Frames are delivered in send order.  Sends made while a frame is being
    handled are queued and delivered after it, so handlers never re-enter.
    """

    def __init__(self):
        self._queue: deque[tuple[Connection, bytes]] = deque()
        self._delivering = False
        self.frames: list[tuple[str, bytes]] = []
        self.on_close: Callable[[Connection], None] = lambda c: None

    def pair(self, a: str = "agent", b: str = "server") -> tuple[Connection, Connection]:
        ca, cb = Connection(self, a), Connection(self, b)
        ca.peer, cb.peer = cb, ca
        return ca, cb

    def _enqueue(self, sender: Connection, data: bytes) -> None:
        self._queue.append((sender, data))
        if data:
            self.frames.append((sender.name, data))
        self.flush()

    def flush(self) -> None:
        if self._delivering:
            return
        self._delivering = True
        try:
            while self._queue:
                sender, data = self._queue.popleft()
                peer = sender.peer
                if not data:
                    if peer is not None and not peer.closed:
                        peer.closed = True
                        self.on_close(peer)
                    continue
                if peer is not None:
                    peer._receive(data)
        finally:
            self._delivering = False


# Server side

class WireError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


@dataclass
class Session:
    conn: Connection
    node_id: str | None = None
    descriptor: dict = field(default_factory=dict)
    subscriptions: list[ConfigSubscription] = field(default_factory=list)
    pending: dict[int, Callable[[bool, str], None]] = field(default_factory=dict)

    @property
    def registered(self) -> bool:
        return self.node_id is not None


def _section_body(tree: ConfigTree, path: str) -> dict:
    sub = tree.subtree(path)
    return {"path": path, "sections": {s: sub.options(s) for s in sub.sections()}}


class ControlServer:
    def __init__(self, config: ConfigManager, credentials: Mapping[str, str], *,
                 on_report: Callable[[LoadObservation], None],
                 on_register: Callable[[str, dict], None] | None = None,
                 on_unregister: Callable[[str], None] | None = None,
                 clock: Callable[[], float] = lambda: 0.0):
        self.config = config
        self.credentials = dict(credentials)
        self.on_report = on_report
        self.on_register = on_register or (lambda node, desc: None)
        self.on_unregister = on_unregister or (lambda node: None)
        self.clock = clock
        self.sessions: dict[str, Session] = {}
        self._all: list[Session] = []
        self.received: list[tuple[float, str, str]] = []     # (time, node, kind)

    def accept(self, conn: Connection) -> Session:
        sess = Session(conn)
        self._all.append(sess)
        conn.on_message = lambda msg: self._handle(sess, msg)
        return sess

    def drop(self, sess: Session) -> None:
        for sub in sess.subscriptions:
            self.config.unsubscribe(sub)
        sess.subscriptions.clear()
        if sess.node_id and self.sessions.get(sess.node_id) is sess:
            del self.sessions[sess.node_id]
            self.on_unregister(sess.node_id)
        for cb in sess.pending.values():
            cb(False, "connection closed")
        sess.pending.clear()
        sess.conn.close()

    def _handle(self, sess: Session, msg: WireMessage) -> None:
        self.received.append((self.clock(), sess.node_id or "", msg.kind))
        try:
            if msg.kind == "Register":
                self._register(sess, msg)
                return
            if not sess.registered:
                raise WireError("NotRegistered", "register first")
            handler = getattr(self, f"_on_{msg.kind}", None)
            if handler is None:
                raise WireError("BadRequest", f"unexpected {msg.kind}")
            handler(sess, msg)
        except WireError as e:
            if msg.kind in REPLY_KIND:
                sess.conn.error(msg, e.code, e.message)
            if e.code == "AuthFailed":
                self.drop(sess)

    def _register(self, sess: Session, msg: WireMessage) -> None:
        b = msg.body
        if self.credentials.get(b.get("username")) != b.get("password"):
            raise WireError("AuthFailed", "bad username or password")
        node_id = b.get("node_id")
        if not node_id:
            raise WireError("BadRequest", "node_id missing")
        if sess.registered:
            raise WireError("BadRequest", "already registered")
        if node_id in self.sessions:
            raise WireError("DuplicateNode", f"{node_id} is already registered")
        sess.node_id = node_id
        sess.descriptor = dict(b.get("descriptor") or {})
        self.sessions[node_id] = sess
        self.on_register(node_id, sess.descriptor)
        sess.conn.reply(msg, "RegisterAck", {"node_id": node_id, "server_time": self.clock()})

    def _on_GetConfigSection(self, sess, msg):
        path = msg.body.get("path", "")
        try:
            sess.conn.reply(msg, "ConfigSection", _section_body(self.config.tree, path))
        except UnknownSection:
            raise WireError("UnknownSection", path) from None

    def _on_AddConfigObserver(self, sess, msg):
        path = msg.body.get("path", "")

        def push(change: ConfigChange, conn=sess.conn):
            if not conn.closed:
                conn.send("ConfigChanged", change.as_dict())

        sess.subscriptions.append(self.config.subscribe(path, push, f"agent:{sess.node_id}"))
        sess.conn.reply(msg, "Ack", {"path": path})

    def _on_ReportLoad(self, sess, msg):
        try:
            obs = LoadObservation.from_dict(msg.body["observation"])
        except (KeyError, TypeError, ValueError) as e:
            raise WireError("BadRequest", f"bad observation: {e}") from None
        if obs.node_id != sess.node_id:
            raise WireError("BadRequest", "observation for another node")
        self.on_report(obs)
        sess.conn.reply(msg, "Ack", {"received_at": self.clock()})

    def _on_CommandResult(self, sess, msg):
        cb = sess.pending.pop(msg.in_reply_to, None)
        if cb is not None:
            cb(bool(msg.body.get("ok")), msg.body.get("reason", ""))

    def _on_Error(self, sess, msg):
        cb = sess.pending.pop(msg.in_reply_to, None)
        if cb is not None:
            cb(False, f"{msg.body.get('code')}: {msg.body.get('message', '')}")
        else:
            log.warning("error from %s: %s", sess.node_id, msg.body)

    def send_command(self, node_id: str, req: ActionRequest,
                     callback: Callable[[bool, str], None]) -> None:
        sess = self.sessions.get(node_id)
        if sess is None:
            callback(False, f"NotRegistered: {node_id} has no session")
            return
        msg = sess.conn.prepare("Command", {"action": req.as_dict()})
        sess.pending[msg.msg_id] = callback
        sess.conn.deliver(msg)


# Agent side

class AgentEndpoint:
    """Client half of the protocol for one node agent."""

    def __init__(self, conn: Connection, username: str, password: str, node_id: str, *,
                 descriptor: dict | None = None,
                 execute: Callable[[ActionRequest, Callable[[bool, str], None]], None],
                 on_ready: Callable[[ConfigManager], None] | None = None,
                 section: str = "client"):
        self.conn = conn
        self.creds = (username, password)
        self.node_id = node_id
        self.descriptor = descriptor or {}
        self.execute = execute
        self.on_ready = on_ready or (lambda cfg: None)
        self.section = section
        self.config: ConfigManager | None = None
        self.ready = False
        self.error: WireError | None = None
        self.changes: list[dict] = []
        self.acks = 0
        self._expect: dict[int, str] = {}
        conn.on_message = self._handle

    def start(self) -> None:
        self._request("Register", {"username": self.creds[0], "password": self.creds[1],
                                   "node_id": self.node_id, "descriptor": self.descriptor})

    def report_load(self, obs: LoadObservation) -> None:
        if not self.ready:
            raise WireError("NotRegistered", "handshake not complete")
        self._request("ReportLoad", {"observation": obs.as_dict()})

    def _request(self, kind: str, body: dict) -> None:
        msg = self.conn.prepare(kind, body)
        self._expect[msg.msg_id] = kind
        self.conn.deliver(msg)

    def _handle(self, msg: WireMessage) -> None:
        asked = self._expect.pop(msg.in_reply_to, None) if msg.in_reply_to else None
        if msg.kind == "Error":
            self.error = WireError(msg.body.get("code", "Error"), msg.body.get("message", ""))
            log.warning("%s: server error %s", self.node_id, self.error)
            if asked == "Register":
                self.conn.close()
            return
        if msg.kind == "RegisterAck" and asked == "Register":
            self._request("GetConfigSection", {"path": self.section})
        elif msg.kind == "ConfigSection" and asked == "GetConfigSection":
            self.config = ConfigManager(ConfigTree(msg.body["sections"]))
            self._request("AddConfigObserver", {"path": self.section})
        elif msg.kind == "Ack" and asked == "AddConfigObserver":
            self.ready = True
            self.on_ready(self.config)
        elif msg.kind == "Ack" and asked == "ReportLoad":
            self.acks += 1
        elif msg.kind == "ConfigChanged":
            self.changes.append(msg.body)
            if self.config is not None:
                self.config.set_value(msg.body["path"], msg.body["option"], msg.body["new"])
        elif msg.kind == "Command":
            self._command(msg)
        else:
            log.warning("%s: unexpected %s", self.node_id, msg.kind)

    def _command(self, msg: WireMessage) -> None:
        replied = []

        def done(ok: bool, reason: str = "") -> None:
            if replied or self.conn.closed:
                return
            replied.append(True)
            self.conn.reply(msg, "CommandResult", {"ok": ok, "reason": reason,
                                                   "request_id": req.request_id})

        try:
            req = ActionRequest.from_dict(msg.body["action"])
        except (KeyError, TypeError, ValueError) as e:
            self.conn.error(msg, "BadRequest", str(e))
            return
        try:
            self.execute(req, done)
        except CommandError as e:
            if not replied:
                replied.append(True)
                self.conn.error(msg, e.code, str(e))


def agent_handshake(conn: Connection, username: str, password: str, node_id: str,
                    **kwargs: Any) -> AgentEndpoint:
    ep = AgentEndpoint(conn, username, password, node_id, **kwargs)
    ep.start()
    return ep
