"""TCP transport: a barrier-synchronized server and participating clients.

Each message travels as a u64 little-endian byte count followed by an
encoded ``AdapterUpdate``. A client registers by sending its round-1 update;
the server answers every round with the aggregate and closes the session
with a ``DONE`` message. Rejected registrations also receive ``DONE``.
"""

from __future__ import annotations

import logging
import socket
import struct
import time
from pathlib import Path
from typing import Sequence

from ..errors import ConfigError, ProtocolError, TransportError
from ..lora import import_state, merge
from ..model import TransformerWeights
from .core import Client, Evaluator, FedConfig, FederationResult, client_train_round, round_start_adapters, run_federation
from .protocol import AdapterUpdate, MsgType, decode_update, encode_update

log = logging.getLogger(__name__)

_LENGTH = struct.Struct("<Q")
MAX_MESSAGE_BYTES = 1 << 32
RETRY_INTERVAL = 0.2


def parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must look like HOST:PORT, got {address!r}")
    return host or "127.0.0.1", int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, remaining = [], n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout:
            raise TransportError(f"timed out after {sock.gettimeout()} s waiting for data") from None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        if not chunk:
            raise TransportError("connection closed by peer")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, update: AdapterUpdate) -> None:
    payload = encode_update(update)
    try:
        sock.sendall(_LENGTH.pack(len(payload)) + payload)
    except socket.timeout:
        raise TransportError(f"timed out after {sock.gettimeout()} s while sending") from None
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from exc


def recv_message(sock: socket.socket) -> AdapterUpdate:
    (length,) = _LENGTH.unpack(_recv_exact(sock, _LENGTH.size))
    if length > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"announced message length {length} exceeds limit")
    return decode_update(_recv_exact(sock, length))


def _done(round_index: int, client_id: int = 0) -> AdapterUpdate:
    return AdapterUpdate(client_id, round_index, 0, (), MsgType.DONE)


class TcpServerTransport:
    """Server side of the socket federation; plugs into ``run_federation``."""

    def __init__(self, address: str | tuple[str, int], expected_clients: int, timeout: float = 300.0):
        if expected_clients < 1:
            raise ConfigError("expected_clients must be >= 1")
        self.expected = expected_clients
        self.timeout = timeout
        self.conns: dict[int, socket.socket] = {}
        self.final_round: int | None = None
        try:
            self.listener = socket.create_server(parse_address(address))
        except OSError as exc:
            raise TransportError(f"cannot listen on {address}: {exc}") from exc
        self.listener.settimeout(timeout)

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()[:2]

    def _reject(self, conn: socket.socket, reason: str) -> None:
        log.warning("rejecting connection: %s", reason)
        try:
            send_message(conn, _done(0))
        except TransportError:
            pass
        conn.close()

    def _register(self) -> list[AdapterUpdate]:
        first: dict[int, AdapterUpdate] = {}
        while len(first) < self.expected:
            try:
                conn, peer = self.listener.accept()
            except socket.timeout:
                raise TransportError(
                    f"timed out after {self.timeout} s with {len(first)} of {self.expected} clients registered"
                ) from None
            conn.settimeout(self.timeout)
            try:
                msg = recv_message(conn)
            except (ProtocolError, TransportError) as exc:
                self._reject(conn, f"{peer}: {exc}")
                continue
            if msg.msg_type is not MsgType.UPDATE or msg.round != 1:
                self._reject(conn, f"client {msg.client_id} registered with round {msg.round}, expected 1")
                continue
            if msg.client_id in first:
                self._reject(conn, f"duplicate client id {msg.client_id}")
                continue
            first[msg.client_id] = msg
            self.conns[msg.client_id] = conn
        return [first[c] for c in sorted(first)]

    def collect(self, round_index, weights, start):
        if round_index == 1:
            return self._register()
        updates = []
        for cid in sorted(self.conns):
            msg = recv_message(self.conns[cid])
            if msg.msg_type is not MsgType.UPDATE or msg.round != round_index or msg.client_id != cid:
                raise ProtocolError(
                    f"expected round {round_index} update from client {cid}, "
                    f"got msg_type {int(msg.msg_type)} round {msg.round} client {msg.client_id}"
                )
            updates.append(msg)
        return updates

    def publish(self, aggregate):
        for cid in sorted(self.conns):
            send_message(self.conns[cid], aggregate)
        self.final_round = aggregate.round

    def finish(self):
        for cid in sorted(self.conns):
            conn = self.conns[cid]
            if self.final_round is not None:
                try:
                    send_message(conn, _done(self.final_round, cid))
                except TransportError:
                    log.warning("could not deliver DONE to client %d", cid)
            conn.close()
        self.conns.clear()
        self.listener.close()


def serve(
    transport: TcpServerTransport,
    base: TransformerWeights,
    config: FedConfig,
    evaluate: Evaluator,
    checkpoint_dir: str | Path | None = None,
) -> FederationResult:
    """Run the authoritative round loop over connected clients."""
    return run_federation(base, transport, config, evaluate, checkpoint_dir)


def _connect(address: str | tuple[str, int], timeout: float) -> socket.socket:
    """Connect, retrying refused connections until ``timeout`` so clients may start first."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection(parse_address(address), timeout=timeout)
        except ConnectionRefusedError as exc:
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot connect to {address}: {exc}") from exc
            time.sleep(RETRY_INTERVAL)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc


def connect_and_participate(
    address: str | tuple[str, int],
    client: Client,
    base: TransformerWeights,
    config: FedConfig,
) -> TransformerWeights:
    """Train locally each round, exchange adapters with the server, return the final model."""
    sock = _connect(address, config.timeout)
    with sock:
        sock.settimeout(config.timeout)
        model, previous = base, None
        for t in range(1, config.rounds + 1):
            train_base = base if config.continue_adapters else model
            start = round_start_adapters(train_base, config, t, previous)
            send_message(sock, client_train_round(train_base, start, client, config.hyper, config.seed, t))
            msg = recv_message(sock)
            if msg.msg_type is MsgType.DONE:
                raise ProtocolError(f"server ended the session at round {t} (registration rejected or round mismatch)")
            if msg.msg_type is not MsgType.AGGREGATE or msg.round != t:
                raise ProtocolError(f"expected round {t} aggregate, got msg_type {int(msg.msg_type)} round {msg.round}")
            model = merge(train_base, import_state(base.geometry, config.lora, msg.entries))
            previous = msg.entries
        msg = recv_message(sock)
        if msg.msg_type is not MsgType.DONE:
            raise ProtocolError(f"expected DONE after round {config.rounds}, got msg_type {int(msg.msg_type)}")
    return model


def participate_all(
    address: str | tuple[str, int], clients: Sequence[Client], base: TransformerWeights, config: FedConfig
) -> list[TransformerWeights]:
    """Run several clients concurrently in threads (loopback testing helper)."""
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=len(clients)) as pool:
        futures = [pool.submit(connect_and_participate, address, c, base, config) for c in clients]
        return [f.result() for f in futures]
