"""Prompt-worker / decode-worker split with a bit-exact cache transfer format.

Cache blob layout (numeric fields little-endian unless noted):

    magic  ``MXQK``                     4 bytes
    format version                      u32
    model config digest                 u64
    n_layers, n_heads, head_dim         u32 each
    seq_len                             u32
    prompt tokens                       seq_len x u32
    per layer: K then V payload         seq_len*n_heads*head_dim float32
                                        each, [seq, head, dim] order
    CRC32 (IEEE) of all preceding bytes u32

Frame layout: a 4-byte big-endian length prefix, then the payload; the
payload's first byte is the frame type, the rest its body.

    HELLO          u32 protocol version + u64 config digest (0 = not
                   asserted by the sender)
    KV_BLOB        one cache blob as above
    PREFILL_LOGITS u32 vocab size + vocab x float32 final-position logits
    GENERATE_REQ   u8 mode + u8 strategy (0 greedy, 1 temperature) +
                   f32 temperature + u64 seed + u32 max_new +
                   i64 stop token (-1 none) + u32 count + count x u32
                   prompt tokens
    TOKENS         UTF-8 trajectory dump
    ERROR          u32 code + UTF-8 message

A connection serves one request: the client sends HELLO and receives the
worker's HELLO (digest echo).  A prompt worker then takes GENERATE_REQ
(prompt tokens; sampler fields ignored) and answers KV_BLOB followed by
PREFILL_LOGITS, because decoding must start from the exact final-position logits
of the prompt pass, which the cache alone cannot reproduce.  A decode
worker takes KV_BLOB, PREFILL_LOGITS and GENERATE_REQ and answers TOKENS.
Any failure produces an ERROR frame.  Transports are interchangeable byte
streams: a TCP connection or a request/response file pair.
"""

from __future__ import annotations

import os
import socket
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, List, Tuple

import numpy as np

from .engine import (
    ExecutionMode,
    SamplerSpec,
    render_trajectory,
    run_decode_loop,
)
from .errors import (
    BlobIntegrityError,
    ContextOverflowError,
    ProtocolError,
)
from .model import KvCache, ModelWeights, Precision, prefill

PROTOCOL_VERSION = 1
BLOB_MAGIC = b"MXQK"
BLOB_VERSION = 1
MAX_FRAME_BYTES = 1 << 30


class FrameType(IntEnum):
    HELLO = 1
    KV_BLOB = 2
    GENERATE_REQ = 3
    TOKENS = 4
    ERROR = 5
    PREFILL_LOGITS = 6


class ErrorCode(IntEnum):
    PROTOCOL = 1
    DIGEST_MISMATCH = 2
    OVERFLOW = 3
    CORRUPT = 4
    VERSION = 5
    INTERNAL = 6


class WorkerError(ProtocolError):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# cache blob

def serialize_kv(kv: KvCache, config_digest: int, prompt) -> bytes:
    prompt = [int(t) for t in prompt]
    if kv.length == 0:
        raise ValueError("refusing to serialize an empty cache")
    if kv.length != len(prompt):
        raise ValueError(
            f"cache length {kv.length} does not match prompt length {len(prompt)}"
        )
    cfg = kv.config
    parts = [
        BLOB_MAGIC,
        struct.pack("<I", BLOB_VERSION),
        struct.pack("<Q", config_digest),
        struct.pack(
            "<IIII", cfg.n_layers, cfg.n_heads, cfg.head_dim, kv.length
        ),
        np.asarray(prompt, dtype="<u4").tobytes(),
    ]
    for layer in range(cfg.n_layers):
        parts.append(kv.keys[layer][: kv.length].astype("<f4").tobytes())
        parts.append(kv.values[layer][: kv.length].astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


@dataclass
class KvBlob:
    digest: int
    n_layers: int
    n_heads: int
    head_dim: int
    seq_len: int
    prompt: List[int]
    keys: List[np.ndarray]
    values: List[np.ndarray]

    def to_cache(self, weights: ModelWeights) -> KvCache:
        cfg = weights.config
        if (self.n_layers, self.n_heads, self.head_dim) != (
            cfg.n_layers, cfg.n_heads, cfg.head_dim,
        ):
            raise BlobIntegrityError("blob geometry does not match the model")
        if self.seq_len > cfg.max_seq_len:
            raise BlobIntegrityError("blob longer than the model context")
        kv = KvCache(cfg)
        for i in range(cfg.n_layers):
            kv.keys[i][: self.seq_len] = self.keys[i]
            kv.values[i][: self.seq_len] = self.values[i]
        kv.length = self.seq_len
        return kv


def deserialize_kv(data: bytes) -> KvBlob:
    """Parse and integrity-check a cache blob; raises BlobIntegrityError."""
    head = 4 + 4 + 8 + 16
    if len(data) < head + 4:
        raise BlobIntegrityError("blob truncated")
    if data[:4] != BLOB_MAGIC:
        raise BlobIntegrityError("bad blob magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != BLOB_VERSION:
        raise BlobIntegrityError(f"unsupported blob version {version}")
    (digest,) = struct.unpack_from("<Q", data, 8)
    n_layers, n_heads, head_dim, seq_len = struct.unpack_from("<IIII", data, 16)
    per_tensor = seq_len * n_heads * head_dim * 4
    expected = head + 4 * seq_len + n_layers * 2 * per_tensor + 4
    if len(data) != expected:
        raise BlobIntegrityError(
            f"blob length {len(data)} does not match header ({expected})"
        )
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if (zlib.crc32(data[:-4]) & 0xFFFFFFFF) != stored_crc:
        raise BlobIntegrityError("blob checksum mismatch")
    off = head
    prompt = np.frombuffer(data, dtype="<u4", count=seq_len, offset=off)
    off += 4 * seq_len
    keys, values = [], []
    shape = (seq_len, n_heads, head_dim)
    for _ in range(n_layers):
        k = np.frombuffer(data, dtype="<f4", count=shape[0] * shape[1] * shape[2],
                          offset=off).reshape(shape).astype(np.float32)
        off += per_tensor
        v = np.frombuffer(data, dtype="<f4", count=shape[0] * shape[1] * shape[2],
                          offset=off).reshape(shape).astype(np.float32)
        off += per_tensor
        keys.append(k)
        values.append(v)
    return KvBlob(
        digest=digest,
        n_layers=n_layers,
        n_heads=n_heads,
        head_dim=head_dim,
        seq_len=seq_len,
        prompt=[int(t) for t in prompt],
        keys=keys,
        values=values,
    )


# ---------------------------------------------------------------------------
# framing

class FrameStream:
    """Length-prefixed frames over a pair of binary file-like objects."""

    def __init__(self, reader, writer):
        self._reader = reader
        self._writer = writer

    def write_frame(self, ftype: FrameType, body: bytes = b""):
        payload = bytes([int(ftype)]) + body
        self._writer.write(struct.pack(">I", len(payload)) + payload)
        self._writer.flush()

    def read_frame(self) -> Tuple[FrameType, bytes]:
        head = self._read_exact(4)
        (length,) = struct.unpack(">I", head)
        if length < 1 or length > MAX_FRAME_BYTES:
            raise ProtocolError(f"invalid frame length {length}")
        payload = self._read_exact(length)
        try:
            ftype = FrameType(payload[0])
        except ValueError:
            raise ProtocolError(f"unknown frame type {payload[0]}")
        return ftype, payload[1:]

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._reader.read(remaining)
            if not chunk:
                raise ProtocolError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)


def encode_hello(digest: int) -> bytes:
    return struct.pack("<IQ", PROTOCOL_VERSION, digest)


def decode_hello(body: bytes) -> Tuple[int, int]:
    if len(body) != 12:
        raise ProtocolError("malformed hello")
    return struct.unpack("<IQ", body)


_STRATEGIES = ("greedy", "temperature")


def encode_generate_req(mode: ExecutionMode, sampler: SamplerSpec,
                        prompt) -> bytes:
    prompt = [int(t) for t in prompt]
    seed = sampler.seed if sampler.seed is not None else 0
    return struct.pack(
        "<BBfQIq I",
        list(ExecutionMode).index(mode),
        _STRATEGIES.index(sampler.strategy),
        float(sampler.temperature),
        seed & 0xFFFFFFFFFFFFFFFF,
        sampler.max_new_tokens,
        sampler.stop_token if sampler.stop_token is not None else -1,
        len(prompt),
    ) + np.asarray(prompt, dtype="<u4").tobytes()


def decode_generate_req(body: bytes) -> Tuple[ExecutionMode, SamplerSpec, List[int]]:
    fixed = struct.calcsize("<BBfQIq I")
    if len(body) < fixed:
        raise ProtocolError("malformed generation request")
    mode_i, strat_i, temp, seed, max_new, stop, count = struct.unpack_from(
        "<BBfQIq I", body
    )
    if mode_i >= len(ExecutionMode) or strat_i >= len(_STRATEGIES):
        raise ProtocolError("malformed generation request")
    if len(body) != fixed + 4 * count:
        raise ProtocolError("generation request length mismatch")
    prompt = list(np.frombuffer(body, dtype="<u4", count=count, offset=fixed))
    strategy = _STRATEGIES[strat_i]
    sampler = SamplerSpec(
        strategy=strategy,
        temperature=temp if strategy == "temperature" else 1.0,
        seed=seed if strategy == "temperature" else None,
        max_new_tokens=max_new,
        stop_token=None if stop < 0 else int(stop),
    )
    return list(ExecutionMode)[mode_i], sampler, [int(t) for t in prompt]


def encode_logits(logits: np.ndarray) -> bytes:
    arr = np.asarray(logits, dtype="<f4")
    return struct.pack("<I", arr.size) + arr.tobytes()


def decode_logits(body: bytes) -> np.ndarray:
    if len(body) < 4:
        raise ProtocolError("malformed logits frame")
    (n,) = struct.unpack_from("<I", body)
    if len(body) != 4 + 4 * n:
        raise ProtocolError("logits frame length mismatch")
    return np.frombuffer(body, dtype="<f4", count=n, offset=4).astype(np.float32)


def encode_error(code: ErrorCode, message: str) -> bytes:
    return struct.pack("<I", int(code)) + message.encode("utf-8")


def decode_error(body: bytes) -> Tuple[int, str]:
    (code,) = struct.unpack_from("<I", body)
    return code, body[4:].decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# workers

def _handshake(stream: FrameStream, digest: int):
    ftype, body = stream.read_frame()
    if ftype is not FrameType.HELLO:
        raise WorkerError(ErrorCode.PROTOCOL, "expected hello")
    version, peer_digest = decode_hello(body)
    if version != PROTOCOL_VERSION:
        raise WorkerError(ErrorCode.VERSION, f"protocol version {version} unsupported")
    if peer_digest not in (0, digest):
        raise WorkerError(
            ErrorCode.DIGEST_MISMATCH,
            f"peer expects digest {peer_digest:016x}, model has {digest:016x}",
        )
    stream.write_frame(FrameType.HELLO, encode_hello(digest))


def _reply_error(stream: FrameStream, code: ErrorCode, message: str):
    # Best effort: the peer may already be gone.
    try:
        stream.write_frame(FrameType.ERROR, encode_error(code, message))
    except OSError:
        pass


def serve_prefill(stream: FrameStream, weights: ModelWeights,
                  precision: Precision):
    """Handle one prompt request: reply KV_BLOB then PREFILL_LOGITS."""
    digest = weights.config.digest()
    try:
        _handshake(stream, digest)
        ftype, body = stream.read_frame()
        if ftype is not FrameType.GENERATE_REQ:
            raise WorkerError(ErrorCode.PROTOCOL, f"unexpected frame {ftype.name}")
        _, _, prompt = decode_generate_req(body)
        if not prompt:
            raise WorkerError(ErrorCode.PROTOCOL, "empty prompt")
        try:
            result = prefill(weights, prompt, precision)
        except ContextOverflowError as exc:
            raise WorkerError(ErrorCode.OVERFLOW, str(exc))
        except ValueError as exc:
            raise WorkerError(ErrorCode.PROTOCOL, str(exc))
        blob = serialize_kv(result.kv, digest, prompt)
        stream.write_frame(FrameType.KV_BLOB, blob)
        stream.write_frame(FrameType.PREFILL_LOGITS, encode_logits(result.logits))
    except WorkerError as exc:
        _reply_error(stream, exc.code, str(exc))
    except ProtocolError as exc:
        _reply_error(stream, ErrorCode.PROTOCOL, str(exc))


def serve_decode(stream: FrameStream, weights: ModelWeights,
                 precision: Precision):
    """Handle one decode request: consume blob + logits + request, reply TOKENS."""
    digest = weights.config.digest()
    try:
        _handshake(stream, digest)
        ftype, body = stream.read_frame()
        if ftype is not FrameType.KV_BLOB:
            raise WorkerError(ErrorCode.PROTOCOL, f"unexpected frame {ftype.name}")
        try:
            blob = deserialize_kv(body)
        except BlobIntegrityError as exc:
            raise WorkerError(ErrorCode.CORRUPT, str(exc))
        if blob.digest != digest:
            raise WorkerError(
                ErrorCode.DIGEST_MISMATCH,
                f"blob digest {blob.digest:016x} does not match model "
                f"{digest:016x}",
            )
        ftype, body = stream.read_frame()
        if ftype is not FrameType.PREFILL_LOGITS:
            raise WorkerError(ErrorCode.PROTOCOL, f"unexpected frame {ftype.name}")
        first_logits = decode_logits(body)
        if first_logits.size != weights.config.vocab_size:
            raise WorkerError(ErrorCode.PROTOCOL, "logits size mismatch")
        ftype, body = stream.read_frame()
        if ftype is not FrameType.GENERATE_REQ:
            raise WorkerError(ErrorCode.PROTOCOL, f"unexpected frame {ftype.name}")
        mode, sampler, _ = decode_generate_req(body)
        try:
            kv = blob.to_cache(weights)
            traj = run_decode_loop(
                weights, kv, first_logits, precision, sampler, blob.prompt,
                mode.value,
            )
        except ContextOverflowError as exc:
            raise WorkerError(ErrorCode.OVERFLOW, str(exc))
        except BlobIntegrityError as exc:
            raise WorkerError(ErrorCode.CORRUPT, str(exc))
        stream.write_frame(
            FrameType.TOKENS, render_trajectory(traj).encode("utf-8")
        )
    except WorkerError as exc:
        _reply_error(stream, exc.code, str(exc))
    except ProtocolError as exc:
        _reply_error(stream, ErrorCode.PROTOCOL, str(exc))


# ---------------------------------------------------------------------------
# client

def _expect(stream: FrameStream, wanted: FrameType) -> bytes:
    ftype, body = stream.read_frame()
    if ftype is FrameType.ERROR:
        code, message = decode_error(body)
        raise WorkerError(ErrorCode(code), message)
    if ftype is not wanted:
        raise ProtocolError(f"expected {wanted.name}, got {ftype.name}")
    return body


def request_prefill(stream: FrameStream, prompt, mode: ExecutionMode,
                    sampler: SamplerSpec, digest: int = 0) -> Tuple[bytes, bytes]:
    """Client side of a prompt request; returns raw blob and logits bodies.

    All request frames go out before any reply is read, so the same code
    drives interactive sockets and one-shot file pairs.
    """
    stream.write_frame(FrameType.HELLO, encode_hello(digest))
    stream.write_frame(
        FrameType.GENERATE_REQ, encode_generate_req(mode, sampler, prompt)
    )
    _expect(stream, FrameType.HELLO)
    blob = _expect(stream, FrameType.KV_BLOB)
    logits = _expect(stream, FrameType.PREFILL_LOGITS)
    return blob, logits


def request_decode(stream: FrameStream, blob: bytes, logits: bytes,
                   mode: ExecutionMode, sampler: SamplerSpec,
                   digest: int = 0) -> str:
    """Client side of a decode request; returns the trajectory dump text."""
    stream.write_frame(FrameType.HELLO, encode_hello(digest))
    stream.write_frame(FrameType.KV_BLOB, blob)
    stream.write_frame(FrameType.PREFILL_LOGITS, logits)
    stream.write_frame(
        FrameType.GENERATE_REQ, encode_generate_req(mode, sampler, [])
    )
    _expect(stream, FrameType.HELLO)
    return _expect(stream, FrameType.TOKENS).decode("utf-8")


def disaggregated_generate(
    prompt,
    mode: ExecutionMode,
    sampler: SamplerSpec,
    prefill_connect: Callable[[], FrameStream],
    decode_connect: Callable[[], FrameStream],
) -> str:
    """Run one generation through a prompt worker and a decode worker.

    The blob and logits bytes are forwarded untouched, so the decode worker
    sees exactly what the prompt worker produced.
    """
    pstream = prefill_connect()
    blob, logits = request_prefill(pstream, prompt, mode, sampler)
    (digest,) = struct.unpack_from("<Q", blob, 8)
    dstream = decode_connect()
    return request_decode(dstream, blob, logits, mode, sampler, digest=digest)


# ---------------------------------------------------------------------------
# transports

class _SocketStream(FrameStream):
    def __init__(self, sock: socket.socket):
        self._sock = sock
        fh = sock.makefile("rwb")
        super().__init__(fh, fh)

    def close(self):
        self._sock.close()


def connect_tcp(host: str, port: int) -> FrameStream:
    return _SocketStream(socket.create_connection((host, port)))


class TcpWorker:
    """Sequential one-connection-at-a-time TCP server for a worker handler."""

    def __init__(self, host: str, port: int,
                 handler: Callable[[FrameStream], None]):
        self._handler = handler
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen(1)
        self.address = self._server.getsockname()

    def serve_one(self):
        conn, _ = self._server.accept()
        try:
            stream = _SocketStream(conn)
            self._handler(stream)
            stream._writer.flush()
        finally:
            conn.close()

    def serve_forever(self):
        while True:
            try:
                self.serve_one()
            except OSError:
                # a broken connection must not take the worker down
                continue

    def close(self):
        self._server.close()


def serve_blob_dir(directory: str, handler: Callable[[FrameStream], None],
                   request_name: str = "request.bin",
                   response_name: str = "response.bin"):
    """File-pair transport: read all request frames, write response frames."""
    req = os.path.join(directory, request_name)
    resp = os.path.join(directory, response_name)
    with open(req, "rb") as reader, open(resp, "wb") as writer:
        handler(FrameStream(reader, writer))


class FileExchange:
    """Client-side file-pair transport.

    Frames written by the client accumulate in the request file; calling
    the worker flushes them through ``serve_blob_dir``; replies are then
    read back from the response file.  Reads transparently trigger the
    exchange, so the same client code drives sockets and files.
    """

    def __init__(self, directory: str, run_worker: Callable[[str], None]):
        self._dir = directory
        self._run_worker = run_worker
        self._request = open(os.path.join(directory, "request.bin"), "wb")
        self._response = None

    def _reader(self):
        if self._response is None:
            self._request.close()
            self._run_worker(self._dir)
            self._response = open(os.path.join(self._dir, "response.bin"), "rb")
        return self._response

    def stream(self) -> FrameStream:
        exchange = self

        class _LazyReader:
            def read(self, n):
                return exchange._reader().read(n)

        return FrameStream(_LazyReader(), self._request)

    def close(self):
        if self._response is not None:
            self._response.close()
        if not self._request.closed:
            self._request.close()
