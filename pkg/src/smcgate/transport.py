"""Message transport between gateway, peers and clients.

Every node exposes ``handle(method, path, body) -> dict``. The in-process
network round-trips each message through canonical bytes, so tests see the
same wire format as the HTTP transport and can record every byte sent.
"""

from __future__ import annotations

import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Iterator, Protocol

import httpx

from .canonical import ProtocolError, canonical_serialize, loads

log = logging.getLogger(__name__)


class Unreachable(ConnectionError):
    pass


class Node(Protocol):
    def handle(self, method: str, path: str, body: dict | None) -> Any: ...


class WireRecorder:
    """Collects ``(origin, destination, path, direction, bytes)`` tuples."""

    def __init__(self):
        self.records: list[tuple[str, str, str, str, bytes]] = []
        self._lock = threading.Lock()

    def add(self, origin: str, dest: str, path: str, direction: str, data: bytes) -> None:
        with self._lock:
            self.records.append((origin, dest, path, direction, data))

    def sent_by(self, origin: str) -> list[bytes]:
        """Bytes ``origin`` put on the wire: its requests and its responses."""
        out = []
        for o, d, _path, direction, data in self.records:
            if (direction == "request" and o == origin) or (direction == "response" and d == origin):
                out.append(data)
        return out

    def received_by(self, node: str) -> list[bytes]:
        out = []
        for o, d, _path, direction, data in self.records:
            if (direction == "request" and d == node) or (direction == "response" and o == node):
                out.append(data)
        return out


class InProcessNetwork:
    def __init__(self, recorder: WireRecorder | None = None):
        self.nodes: dict[str, Node] = {}
        self.recorder = recorder

    def attach(self, address: str, node: Node) -> None:
        self.nodes[address] = node

    def detach(self, address: str) -> None:
        self.nodes.pop(address, None)

    def transport(self, origin: str) -> "InProcessTransport":
        return InProcessTransport(self, origin)


class InProcessTransport:
    def __init__(self, network: InProcessNetwork, origin: str):
        self.network = network
        self.origin = origin

    def _call(self, method: str, address: str, path: str, body: dict | None) -> dict:
        node = self.network.nodes.get(address)
        if node is None:
            raise Unreachable(f"no node at {address}")
        rec = self.network.recorder
        data = canonical_serialize(body) if body is not None else b""
        if rec is not None:
            rec.add(self.origin, address, path, "request", data)
        response = node.handle(method, path, loads(data) if body is not None else None)
        if not isinstance(response, dict):
            # streamed responses: the final message is the one that matters
            response = list(response)[-1]
        out = canonical_serialize(response)
        if rec is not None:
            rec.add(self.origin, address, path, "response", out)
        return loads(out)

    def post(self, address: str, path: str, body: dict, timeout: float | None = None) -> dict:
        return self._call("POST", address, path, body)

    def get(self, address: str, path: str, timeout: float | None = None) -> dict:
        return self._call("GET", address, path, None)

    def stream(self, address: str, path: str, body: dict, timeout: float | None = None) -> Iterator[dict]:
        node = self.network.nodes.get(address)
        if node is None:
            raise Unreachable(f"no node at {address}")
        rec = self.network.recorder
        data = canonical_serialize(body)
        if rec is not None:
            rec.add(self.origin, address, path, "request", data)
        response = node.handle("POST", path, loads(data))
        for message in [response] if isinstance(response, dict) else response:
            out = canonical_serialize(message)
            if rec is not None:
                rec.add(self.origin, address, path, "response", out)
            yield loads(out)


class HttpTransport:
    def __init__(self, timeout: float = 30.0):
        self._client = httpx.Client(timeout=timeout)

    def post(self, address: str, path: str, body: dict, timeout: float | None = None) -> dict:
        try:
            r = self._client.post(address.rstrip("/") + path, content=canonical_serialize(body), timeout=timeout)
        except httpx.TransportError as exc:
            raise Unreachable(f"{address}: {exc}") from exc
        return _last_json_line(r.content)

    def get(self, address: str, path: str, timeout: float | None = None) -> dict:
        try:
            r = self._client.get(address.rstrip("/") + path, timeout=timeout)
        except httpx.TransportError as exc:
            raise Unreachable(f"{address}: {exc}") from exc
        return _last_json_line(r.content)

    def stream(self, address: str, path: str, body: dict, timeout: float | None = None) -> Iterator[dict]:
        """POST and yield each newline-delimited JSON message as it arrives."""
        try:
            with self._client.stream(
                "POST", address.rstrip("/") + path, content=canonical_serialize(body), timeout=timeout
            ) as r:
                for line in r.iter_lines():
                    if line.strip():
                        yield loads(line)
        except httpx.TransportError as exc:
            raise Unreachable(f"{address}: {exc}") from exc

    def close(self) -> None:
        self._client.close()


def _last_json_line(content: bytes) -> dict:
    lines = [line for line in content.splitlines() if line.strip()]
    if not lines:
        raise ProtocolError("empty response body", 0)
    if len(lines) == 1:
        return loads(lines[0])
    return loads(lines[-1])


def serve(node: Node, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start a threaded HTTP server for ``node`` in a daemon thread."""

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.0"

        def log_message(self, fmt, *args):
            log.debug("%s %s", self.address_string(), fmt % args)

        def _dispatch(self, method: str) -> None:
            body = None
            if method == "POST":
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length)
                try:
                    body = loads(raw)
                except ProtocolError as exc:
                    self._send(400, {"status": "failure", "reason": "MALFORMED", "detail": str(exc)})
                    return
            try:
                response = node.handle(method, self.path, body)
            except ProtocolError as exc:
                self._send(400, {"status": "failure", "reason": "MALFORMED", "detail": str(exc)})
                return
            except KeyError:
                self._send(404, {"status": "failure", "reason": "MALFORMED", "detail": f"no route {self.path}"})
                return
            if isinstance(response, dict):
                self._send(200, response)
                return
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.end_headers()
            for message in response:
                self.wfile.write(canonical_serialize(message) + b"\n")
                self.wfile.flush()

        def _send(self, code: int, payload: dict) -> None:
            data = canonical_serialize(payload)
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

    server = ThreadingHTTPServer((host, port), Handler)
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, daemon=True, name=f"http-{server.server_port}").start()
    return server
