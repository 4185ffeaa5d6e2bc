"""Framed classical-channel messages and the transports that carry them.

A frame is a 4-byte big-endian payload length, a 1-byte message type and the
payload. Integers inside payloads are big-endian too.
"""

import logging
import queue
import socket
import struct
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import ClassVar, Optional, Protocol, TypeVar, Union

import numpy as np

from biased_qkd.utils import pack_bits, unpack_bits

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 1 << 30


class ProtocolAbort(RuntimeError):
    """The exchange cannot continue: transport failure, bad frame or peer abort.

    ``transcript`` keeps whatever reconciliation record existed when it broke.
    """

    def __init__(self, reason: str, transcript=None):
        super().__init__(reason)
        self.reason = reason
        self.transcript = transcript


class MessageType(IntEnum):
    BASIS_ANNOUNCE = 0x01
    SIFT_ACK = 0x02
    SHUFFLE_SEED = 0x10
    PARITY_BATCH = 0x11
    CORRECTION_NOTICE = 0x12
    VERIFY_TAG = 0x20
    HASH_SEED = 0x30
    FINAL_KEY_DIGEST = 0x31
    ABORT = 0x7F


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"Payload of {len(payload)} bytes exceeds the frame limit")
    return HEADER.pack(len(payload), msg_type) + payload


def decode_frame(buf: bytes) -> tuple[int, bytes]:
    """Split one complete frame into (type, payload)."""
    if len(buf) < HEADER.size:
        raise ProtocolAbort(f"Truncated frame header ({len(buf)} bytes)")
    length, msg_type = HEADER.unpack_from(buf)
    if len(buf) != HEADER.size + length:
        raise ProtocolAbort(f"Frame declares {length} payload bytes, carries {len(buf) - HEADER.size}")
    return msg_type, bytes(buf[HEADER.size :])


def _u32s(values) -> bytes:
    return np.asarray(values, dtype=">u4").tobytes()


def _read_u32s(buf: bytes, offset: int, count: int) -> np.ndarray:
    end = offset + 4 * count
    if end > len(buf):
        raise ProtocolAbort("Payload shorter than its declared count")
    return np.frombuffer(buf[offset:end], dtype=">u4").astype(np.int64)


def _bits_field(bits: np.ndarray) -> bytes:
    return struct.pack(">Q", len(bits)) + pack_bits(bits)


def _read_bits_field(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from(">Q", buf, offset)
    offset += 8
    nbytes = (n + 7) // 8
    if offset + nbytes > len(buf):
        raise ProtocolAbort("Bit field shorter than its declared length")
    return unpack_bits(buf[offset : offset + nbytes], n), offset + nbytes


@dataclass(frozen=True)
class BasisAnnounce:
    """Bob's packed 2-bit announcement codes for one block of rounds."""

    type: ClassVar[MessageType] = MessageType.BASIS_ANNOUNCE
    start: int
    count: int
    codes: bytes

    def encode(self) -> bytes:
        return struct.pack(">QI", self.start, self.count) + self.codes

    @classmethod
    def decode(cls, payload: bytes) -> "BasisAnnounce":
        start, count = struct.unpack_from(">QI", payload)
        codes = payload[12:]
        if len(codes) != (2 * count + 7) // 8:
            raise ProtocolAbort(f"Announcement for {count} rounds carries {len(codes)} bytes")
        return cls(start, count, codes)


@dataclass(frozen=True)
class SiftAck:
    """Alice's kept-round and coincidence bitmaps plus the block's raw/dropped/mismatched counts."""

    type: ClassVar[MessageType] = MessageType.SIFT_ACK
    start: int
    raw: int
    dropped: int
    mismatched: int
    kept: np.ndarray
    detected: np.ndarray

    def encode(self) -> bytes:
        head = struct.pack(">QIII", self.start, self.raw, self.dropped, self.mismatched)
        return head + _bits_field(self.kept) + _bits_field(self.detected)

    @classmethod
    def decode(cls, payload: bytes) -> "SiftAck":
        start, raw, dropped, mismatched = struct.unpack_from(">QIII", payload)
        kept, offset = _read_bits_field(payload, 20)
        detected, _ = _read_bits_field(payload, offset)
        return cls(start, raw, dropped, mismatched, kept.astype(bool), detected.astype(bool))


@dataclass(frozen=True)
class ShuffleSeed:
    type: ClassVar[MessageType] = MessageType.SHUFFLE_SEED
    basis: int
    frame: int
    seed: int

    def encode(self) -> bytes:
        return struct.pack(">BIQ", self.basis, self.frame, self.seed)

    @classmethod
    def decode(cls, payload: bytes) -> "ShuffleSeed":
        return cls(*struct.unpack(">BIQ", payload))


@dataclass(frozen=True)
class ParityBatch:
    """Bob's range queries, or Alice's packed parities answering them."""

    type: ClassVar[MessageType] = MessageType.PARITY_BATCH
    reply: bool
    frame: int
    pass_label: int
    sequence: int
    queries: Optional[np.ndarray] = None  # (count, 3) rows of layout, start, end
    parities: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return len(self.parities) if self.reply else len(self.queries)

    def encode(self) -> bytes:
        head = struct.pack(">BIHHI", int(self.reply), self.frame, self.pass_label, self.sequence, self.count)
        if self.reply:
            return head + pack_bits(self.parities)
        return head + _u32s(np.asarray(self.queries).ravel())

    @classmethod
    def decode(cls, payload: bytes) -> "ParityBatch":
        reply, frame, pass_label, sequence, count = struct.unpack_from(">BIHHI", payload)
        body = payload[13:]
        if reply:
            if len(body) != (count + 7) // 8:
                raise ProtocolAbort(f"Parity reply for {count} queries carries {len(body)} bytes")
            return cls(True, frame, pass_label, sequence, parities=unpack_bits(body, count))
        queries = _read_u32s(payload, 13, 3 * count).reshape(count, 3)
        return cls(False, frame, pass_label, sequence, queries=queries)

    @classmethod
    def request(cls, frame: int, pass_label: int, sequence: int, queries: np.ndarray) -> "ParityBatch":
        return cls(False, frame, pass_label, sequence, queries=np.asarray(queries, dtype=np.int64).reshape(-1, 3))

    @classmethod
    def answer(cls, req: "ParityBatch", parities: np.ndarray) -> "ParityBatch":
        return cls(True, req.frame, req.pass_label, req.sequence, parities=np.asarray(parities, dtype=np.uint8))


@dataclass(frozen=True)
class CorrectionNotice:
    """Closes a frame: the positions Bob flipped in it."""

    type: ClassVar[MessageType] = MessageType.CORRECTION_NOTICE
    basis: int
    frame: int
    positions: np.ndarray

    def encode(self) -> bytes:
        return struct.pack(">BII", self.basis, self.frame, len(self.positions)) + _u32s(self.positions)

    @classmethod
    def decode(cls, payload: bytes) -> "CorrectionNotice":
        basis, frame, count = struct.unpack_from(">BII", payload)
        return cls(basis, frame, _read_u32s(payload, 9, count))


@dataclass(frozen=True)
class VerifyTag:
    """Alice's tag seed and tag, or Bob's verdict on comparing it."""

    type: ClassVar[MessageType] = MessageType.VERIFY_TAG
    seed: Optional[np.ndarray] = None
    tag: Optional[np.ndarray] = None
    ok: Optional[bool] = None

    def encode(self) -> bytes:
        if self.ok is not None:
            return struct.pack(">BB", 1, int(self.ok))
        return struct.pack(">B", 0) + _bits_field(self.seed) + _bits_field(self.tag)

    @classmethod
    def decode(cls, payload: bytes) -> "VerifyTag":
        if payload[:1] == b"\x01":
            return cls(ok=bool(payload[1]))
        seed, offset = _read_bits_field(payload, 1)
        tag, _ = _read_bits_field(payload, offset)
        return cls(seed=seed, tag=tag)


@dataclass(frozen=True)
class HashSeed:
    type: ClassVar[MessageType] = MessageType.HASH_SEED
    output_length: int
    seed: np.ndarray

    def encode(self) -> bytes:
        return struct.pack(">Q", self.output_length) + _bits_field(self.seed)

    @classmethod
    def decode(cls, payload: bytes) -> "HashSeed":
        (m,) = struct.unpack_from(">Q", payload)
        seed, _ = _read_bits_field(payload, 8)
        return cls(m, seed)


@dataclass(frozen=True)
class FinalKeyDigest:
    type: ClassVar[MessageType] = MessageType.FINAL_KEY_DIGEST
    digest: bytes

    def encode(self) -> bytes:
        return self.digest

    @classmethod
    def decode(cls, payload: bytes) -> "FinalKeyDigest":
        if len(payload) != 32:
            raise ProtocolAbort(f"Key digest must be 32 bytes, got {len(payload)}")
        return cls(payload)


@dataclass(frozen=True)
class Abort:
    type: ClassVar[MessageType] = MessageType.ABORT
    reason: str

    def encode(self) -> bytes:
        return self.reason.encode("utf-8")

    @classmethod
    def decode(cls, payload: bytes) -> "Abort":
        return cls(payload.decode("utf-8", errors="replace"))


Message = Union[
    BasisAnnounce, SiftAck, ShuffleSeed, ParityBatch, CorrectionNotice, VerifyTag, HashSeed, FinalKeyDigest, Abort
]
MESSAGES = {cls.type: cls for cls in Message.__args__}
M = TypeVar("M")


def encode_message(msg: Message) -> bytes:
    return encode_frame(msg.type, msg.encode())


def decode_message(buf: bytes) -> Message:
    msg_type, payload = decode_frame(buf)
    cls = MESSAGES.get(msg_type)
    if cls is None:
        raise ProtocolAbort(f"Unknown message type 0x{msg_type:02x}")
    try:
        return cls.decode(payload)
    except struct.error as exc:
        raise ProtocolAbort(f"Malformed {cls.__name__}: {exc}") from exc


class Transport(Protocol):
    """Ordered, reliable delivery of whole frames."""

    def send(self, frame: bytes) -> None: ...

    def recv(self) -> bytes: ...

    def close(self) -> None: ...


class QueueTransport:
    """One end of an in-process queue pair."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = 60.0):
        self.inbox = inbox
        self.outbox = outbox
        self.timeout = timeout

    @classmethod
    def pair(cls, timeout: float = 60.0) -> tuple["QueueTransport", "QueueTransport"]:
        a_to_b, b_to_a = queue.Queue(), queue.Queue()
        return cls(b_to_a, a_to_b, timeout), cls(a_to_b, b_to_a, timeout)

    def send(self, frame: bytes) -> None:
        self.outbox.put(frame)

    def recv(self) -> bytes:
        try:
            frame = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolAbort(f"No frame within {self.timeout}s") from None
        if frame is None:
            raise ProtocolAbort("Peer closed the channel")
        return frame

    def close(self) -> None:
        self.outbox.put(None)


class SocketTransport:
    """Frames over a connected stream socket."""

    def __init__(self, sock: socket.socket, timeout: Optional[float] = 60.0):
        self.sock = sock
        self.sock.settimeout(timeout)

    @classmethod
    def pair(cls, timeout: Optional[float] = 60.0) -> tuple["SocketTransport", "SocketTransport"]:
        a, b = socket.socketpair()
        return cls(a, timeout), cls(b, timeout)

    @classmethod
    def listen(cls, host: str, port: int, timeout: Optional[float] = 60.0) -> "SocketTransport":
        try:
            server = socket.create_server((host, port))
        except OSError as exc:
            raise ProtocolAbort(f"Cannot listen on {host}:{port}: {exc}") from exc
        with server:
            server.settimeout(timeout)
            logger.info(f"Waiting for peer on {host}:{port}")
            try:
                conn, addr = server.accept()
            except OSError as exc:
                raise ProtocolAbort(f"No peer connected to {host}:{port}: {exc}") from exc
        logger.info(f"Peer connected from {addr[0]}:{addr[1]}")
        return cls(conn, timeout)

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = 60.0, retries: int = 50) -> "SocketTransport":
        last: Optional[OSError] = None
        for _ in range(retries):
            try:
                return cls(socket.create_connection((host, port), timeout=timeout), timeout)
            except OSError as exc:
                last = exc
                time.sleep(0.2)
        raise ProtocolAbort(f"Could not connect to {host}:{port}: {last}")

    def _read_exact(self, n: int) -> bytes:
        chunks, remaining = [], n
        while remaining:
            try:
                chunk = self.sock.recv(min(remaining, 1 << 20))
            except OSError as exc:
                raise ProtocolAbort(f"Connection failed while reading: {exc}") from exc
            if not chunk:
                raise ProtocolAbort("Connection closed while reading")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def send(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ProtocolAbort(f"Connection failed while writing: {exc}") from exc

    def recv(self) -> bytes:
        header = self._read_exact(HEADER.size)
        length, _ = HEADER.unpack(header)
        if length > MAX_PAYLOAD:
            raise ProtocolAbort(f"Peer announced a {length}-byte payload")
        return header + self._read_exact(length)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class Channel:
    """Typed messages over a transport."""

    def __init__(self, transport: Transport, name: str = "channel"):
        self.transport = transport
        self.name = name
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message) -> None:
        frame = encode_message(msg)
        self.bytes_sent += len(frame)
        logger.debug(f"{self.name} -> {type(msg).__name__} ({len(frame)} bytes)")
        self.transport.send(frame)

    def recv(self) -> Message:
        frame = self.transport.recv()
        self.bytes_received += len(frame)
        msg = decode_message(frame)
        logger.debug(f"{self.name} <- {type(msg).__name__} ({len(frame)} bytes)")
        if isinstance(msg, Abort):
            raise ProtocolAbort(f"Peer aborted: {msg.reason}")
        return msg

    def expect(self, cls: type[M]) -> M:
        msg = self.recv()
        if not isinstance(msg, cls):
            raise ProtocolAbort(f"Expected {cls.__name__}, got {type(msg).__name__}")
        return msg

    def abort(self, reason: str) -> None:
        """Tell the peer we are giving up; a dead transport is ignored."""
        try:
            self.send(Abort(reason))
        except ProtocolAbort:
            pass

    def close(self) -> None:
        self.transport.close()
