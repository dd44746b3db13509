"""Length-delimited ingestion protocol.

A producer opens a stream socket and writes frames: a 4-byte big-endian
payload length followed by one UTF-8 JSON submission record. For every
frame the server answers with two bytes: ``0x00`` (accepted) or ``0x01``
(rejected), then a reason code from :data:`REASON_CODES`.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import struct

from .aggregator import Aggregator
from .device import Decision, Submission, parse_submission
from .errors import QueryParseError, UnknownQueryError

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20

REASON_CODES = {
    None: 0,
    "wrong_length": 1,
    "malformed_bits": 2,
    "duplicate": 3,
    "epoch_out_of_window": 4,
    "expired": 5,
    "unknown_query": 6,
    "parse_error": 7,
    "oversize": 8,
}
REASONS = {code: name for name, code in REASON_CODES.items()}


def encode_frame(payload: bytes) -> bytes:
    return HEADER.pack(len(payload)) + payload


def encode_reply(decision: Decision) -> bytes:
    return bytes((0 if decision.accepted else 1, REASON_CODES.get(decision.reason, 255)))


def decode_reply(reply: bytes) -> Decision:
    status, reason = reply[0], reply[1]
    return Decision(status == 0, REASONS.get(reason, f"code_{reason}"))


def handle_payload(aggregator: Aggregator, payload: bytes) -> Decision:
    try:
        sub = parse_submission(payload)
    except QueryParseError:
        return Decision(False, "parse_error")
    try:
        return aggregator.accept_answer(sub)
    except UnknownQueryError:
        return Decision(False, "unknown_query")


async def _serve_connection(aggregator: Aggregator, reader, writer) -> None:
    try:
        while True:
            try:
                header = await reader.readexactly(HEADER.size)
            except asyncio.IncompleteReadError:
                break
            (length,) = HEADER.unpack(header)
            if length > MAX_FRAME:
                writer.write(encode_reply(Decision(False, "oversize")))
                await writer.drain()
                break
            payload = await reader.readexactly(length)
            writer.write(encode_reply(handle_payload(aggregator, payload)))
            await writer.drain()
    except (ConnectionResetError, asyncio.IncompleteReadError):
        pass
    finally:
        writer.close()


async def start_ingest_server(aggregator: Aggregator, host: str = "127.0.0.1", port: int = 0):
    """Start listening; returns the asyncio server (port 0 picks a free one)."""
    server = await asyncio.start_server(
        lambda r, w: _serve_connection(aggregator, r, w), host, port
    )
    log.info("ingest listening on %s", server.sockets[0].getsockname())
    return server


class IngestClient:
    """Blocking producer for the ingestion socket."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def _recv_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("server closed the connection")
            buf += chunk
        return buf

    def send_raw(self, payload: bytes) -> Decision:
        self.sock.sendall(encode_frame(payload))
        return decode_reply(self._recv_exact(2))

    def send(self, submission: Submission) -> Decision:
        return self.send_raw(submission.to_json())

    def send_many(self, submissions, chunk: int = 512) -> list[Decision]:
        """Pipelined in chunks: write a chunk of frames, then read its replies."""
        subs = list(submissions)
        out = []
        for i in range(0, len(subs), chunk):
            frames = [encode_frame(s.to_json()) for s in subs[i : i + chunk]]
            self.sock.sendall(b"".join(frames))
            out.extend(decode_reply(self._recv_exact(2)) for _ in frames)
        return out

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "IngestClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
