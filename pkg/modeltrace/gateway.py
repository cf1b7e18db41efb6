"""
Authorization-controlled inference over newline-delimited JSON on TCP.

Request:  {"request_id", "credential", "key_image", "query_image"}  (images as
          base64 PPM/PGM bytes)
Response: {"request_id", "class"}  for every authorization outcome
Error:    {"request_id"?, "error_code"}  the connection stays open
"""
from __future__ import annotations
import base64, binascii, json, socket, socketserver, threading, time
from dataclasses import dataclass
from typing import Optional, Tuple

from . import config
from .acpt import ControlCenter, derive_seed
from .errors import (
    FormatError, InvalidInputError, ProtocolError, RequestRejectedError, StartupError, TransportError,
)
from .logger import get_logger
from .media import inputs_to_images, read_pnm, write_pnm
from .phash import RgbImage
from .schema import (
    ERROR_SCHEMA, INFER_REQUEST_SCHEMA, INFER_RESPONSE_SCHEMA, ValidationError,
    decode_and_validate, encode_line, is_valid,
)

log = get_logger("gateway")


@dataclass(frozen=True)
class InferRequest:
    request_id: str
    credential: str
    key_image: bytes     # PPM/PGM bytes
    query_image: bytes

    @classmethod
    def from_images(cls, request_id: str, credential: str, key_image: RgbImage,
                    query_image: RgbImage) -> "InferRequest":
        return cls(request_id, credential, write_pnm(key_image), write_pnm(query_image))

    def to_wire(self) -> dict:
        return {
            "request_id": self.request_id,
            "credential": self.credential,
            "key_image": base64.b64encode(self.key_image).decode("ascii"),
            "query_image": base64.b64encode(self.query_image).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "InferRequest":
        try:
            key = base64.b64decode(obj["key_image"], validate=True)
            query = base64.b64decode(obj["query_image"], validate=True)
        except (binascii.Error, ValueError):
            raise InvalidInputError("images must be standard base64 with padding")
        return cls(obj["request_id"], obj["credential"], key, query)


@dataclass(frozen=True)
class InferResponse:
    request_id: str
    cls: int

    def to_wire(self) -> dict:
        return {"request_id": self.request_id, "class": self.cls}


def parse_address(address: str) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise InvalidInputError(f"address must be host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


# Server

def _request_id_of(line: bytes) -> Optional[str]:
    try:
        obj = json.loads(line)
    except ValueError:
        return None
    rid = obj.get("request_id") if isinstance(obj, dict) else None
    return rid if isinstance(rid, str) else None


def _error(code: str, request_id: Optional[str]) -> dict:
    obj = {"error_code": code}
    if request_id is not None:
        obj = {"request_id": request_id, **obj}
    return obj


class _Handler(socketserver.StreamRequestHandler):
    server: "_GatewayServer"

    def handle(self):
        while True:
            try:
                line = self.rfile.readline(config.MAX_LINE_BYTES + 1)
            except OSError:
                return
            if not line:
                return
            if len(line) > config.MAX_LINE_BYTES and not line.endswith(b"\n"):
                self._send(_error("protocol_error", None))
                if not self._discard_rest():
                    return
                continue
            if not line.strip():
                continue
            self._send(self.server.answer(line))

    def _discard_rest(self) -> bool:
        while True:
            chunk = self.rfile.readline(config.MAX_LINE_BYTES)
            if not chunk:
                return False
            if chunk.endswith(b"\n"):
                return True

    def _send(self, obj: dict):
        try:
            self.wfile.write(encode_line(obj))
            self.wfile.flush()
        except OSError:
            pass


class _GatewayServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, center: ControlCenter, service_seed: Optional[int]):
        self.center = center
        self.service_seed = service_seed
        super().__init__(address, _Handler)

    def answer(self, line: bytes) -> dict:
        t0 = time.perf_counter()
        rid = _request_id_of(line)
        try:
            obj = decode_and_validate(line, INFER_REQUEST_SCHEMA)
            req = InferRequest.from_wire(obj)
            key, query = read_pnm(req.key_image), read_pnm(req.query_image)
            seed = None if self.service_seed is None else derive_seed(self.service_seed, req.request_id)
            cls = self.center.authorize(req.credential, key, query, seed)
        except (ValueError, ValidationError, FormatError, UnicodeDecodeError):
            return _error("bad_request", rid)
        except Exception:
            log.exception("request %r failed", rid)
            return _error("internal", rid)
        log.debug("request %s answered in %.1f ms", req.request_id, 1000 * (time.perf_counter() - t0))
        return InferResponse(req.request_id, cls).to_wire()


@dataclass
class ServiceHandle:
    server: _GatewayServer
    thread: threading.Thread

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(bind_address: str, center: ControlCenter, service_seed: Optional[int] = 0) -> ServiceHandle:
    """Start the service on a background thread. `service_seed=None` draws fallback classes from entropy."""
    host, port = parse_address(bind_address)
    try:
        server = _GatewayServer((host, port), center, service_seed)
    except OSError as e:
        raise StartupError(f"cannot bind {bind_address}: {e}") from e
    thread = threading.Thread(target=server.serve_forever, name="gateway", daemon=True)
    thread.start()
    handle = ServiceHandle(server, thread)
    log.info("gateway listening on %s", handle.address)
    return handle


# Client

def _read_line(sock: socket.socket, deadline: float) -> bytes:
    """One response line; `deadline` (time.monotonic) bounds the whole read, not each recv."""
    data = bytearray()
    while b"\n" not in data:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise socket.timeout("timed out waiting for the response line")
        sock.settimeout(remaining)
        chunk = sock.recv(65536)
        if not chunk:
            break
        data.extend(chunk)
        if len(data) > config.MAX_LINE_BYTES:
            raise ProtocolError("response line exceeds the size limit")
    if not data:
        raise TransportError("connection closed before a response arrived")
    return bytes(data.split(b"\n", 1)[0])


def client_infer(address: str, request: InferRequest, timeout: float = config.CLIENT_TIMEOUT_S) -> InferResponse:
    host, port = parse_address(address)
    deadline = time.monotonic() + timeout
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.settimeout(max(deadline - time.monotonic(), 1e-3))
            sock.sendall(encode_line(request.to_wire()))
            line = _read_line(sock, deadline)
    except (socket.timeout, OSError) as e:
        raise TransportError(f"inference round trip to {address} failed: {e}") from e
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise ProtocolError(f"response is not JSON: {line[:80]!r}")
    if is_valid(obj, ERROR_SCHEMA):
        raise RequestRejectedError(obj["error_code"], obj.get("request_id"))
    if not is_valid(obj, INFER_RESPONSE_SCHEMA):
        raise ProtocolError(f"unexpected response shape: {sorted(obj) if isinstance(obj, dict) else obj!r}")
    if obj["request_id"] != request.request_id:
        raise ProtocolError(f"response for {obj['request_id']!r}, expected {request.request_id!r}")
    return InferResponse(obj["request_id"], obj["class"])


def remote_oracle(address: str, timeout: float = config.CLIENT_TIMEOUT_S, prefix: str = "probe"):
    """trace_acpt oracle probing a deployed gateway; test inputs travel as PNM images."""
    counter = iter(range(1 << 62))

    def oracle(credential: str, key_image: RgbImage, query, seed: int) -> int:
        (query_img,) = inputs_to_images(query[None])
        req = InferRequest.from_images(f"{prefix}-{next(counter)}-{seed:x}", credential, key_image, query_img)
        return client_infer(address, req, timeout).cls

    return oracle
