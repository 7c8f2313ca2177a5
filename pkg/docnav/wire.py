from __future__ import annotations

import json
import queue
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from typing import IO, Any, Callable, Dict, List, Optional, Tuple

import backoff
from typing_extensions import Literal

from docnav.log_helper import getLogger

"""
Newline-delimited JSON framing shared by the agent and retriever bridges.

Each message is one JSON object on one line. The peer is either a TCP server or a child
process talking over its stdin/stdout.
"""

log = getLogger("docnav.bridge")

DEFAULT_CONNECT_TIMEOUT = 10.0
DEFAULT_TURN_TIMEOUT = 120.0


class TransportError(Exception):
    pass


@dataclass(frozen=True)
class Endpoint:
    kind: Literal["tcp", "exec"]
    host: str = ""
    port: int = 0
    command: Tuple[str, ...] = ()

    @classmethod
    def parse(cls, addr: str) -> Endpoint:
        """`tcp://host:port`, `host:port` or `exec:<command line>`."""
        if addr.startswith("exec:"):
            command = tuple(shlex.split(addr[len("exec:") :]))
            if not command:
                raise ValueError(f"empty command in endpoint '{addr}'")
            return Endpoint(kind="exec", command=command)

        hostport = addr[len("tcp://") :] if addr.startswith("tcp://") else addr
        host, sep, port = hostport.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"cannot parse endpoint '{addr}', expected host:port or exec:<cmd>")
        return Endpoint(kind="tcp", host=host, port=int(port))

    def __str__(self) -> str:
        if self.kind == "exec":
            return "exec:" + shlex.join(self.command)
        return f"tcp://{self.host}:{self.port}"


class JsonLineChannel:
    """One bidirectional message stream. A reader thread feeds a queue so that every
    receive can time out."""

    def __init__(
        self,
        reader: IO[bytes],
        writer: IO[bytes],
        name: str,
        on_close: Optional[Callable[[], None]] = None,
    ):
        self.name = name
        self._reader = reader
        self._writer = writer
        self._on_close = on_close
        self._closed = False
        self._inbox: queue.Queue[Optional[bytes]] = queue.Queue()
        self._pump_thread = threading.Thread(target=self._pump, name=f"wire-{name}", daemon=True)
        self._pump_thread.start()

    def _pump(self):
        try:
            for line in iter(self._reader.readline, b""):
                self._inbox.put(line)
        except (OSError, ValueError) as e:
            log.debug(f"{self.name}: reader stopped: {e}")
        finally:
            # None marks end of stream
            self._inbox.put(None)

    def send(self, msg: Dict[str, Any]):
        data = (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")
        try:
            self._writer.write(data)
            self._writer.flush()
        except (OSError, ValueError) as e:
            raise TransportError(f"{self.name}: send failed: {e}") from e

    def receive(self, timeout: Optional[float] = DEFAULT_TURN_TIMEOUT) -> Dict[str, Any]:
        try:
            line = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"{self.name}: no message within {timeout}s") from None
        if line is None:
            self._inbox.put(None)
            raise TransportError(f"{self.name}: connection closed by peer")
        try:
            msg = json.loads(line)
        except ValueError as e:
            raise TransportError(f"{self.name}: malformed message: {e}") from e
        if not isinstance(msg, dict):
            raise TransportError(f"{self.name}: expected a JSON object, got {type(msg).__name__}")
        return msg

    def request(
        self, msg: Dict[str, Any], expect: str, timeout: Optional[float] = DEFAULT_TURN_TIMEOUT
    ) -> Dict[str, Any]:
        self.send(msg)
        reply = self.receive(timeout)
        if reply.get("type") != expect:
            raise TransportError(
                f"{self.name}: expected '{expect}' message, got '{reply.get('type')}'"
            )
        return reply

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            self._writer.close()
        except OSError:
            pass
        if self._on_close is not None:
            self._on_close()
        # The reader is only closed once the pump thread let go of it
        self._pump_thread.join(timeout=5)
        if not self._pump_thread.is_alive():
            self._reader.close()


def _connect_tcp(endpoint: Endpoint, connect_timeout: float) -> JsonLineChannel:
    @backoff.on_exception(backoff.expo, OSError, max_time=connect_timeout)
    def attempt() -> socket.socket:
        return socket.create_connection((endpoint.host, endpoint.port), timeout=connect_timeout)

    try:
        sock = attempt()
    except OSError as e:
        raise TransportError(f"cannot connect to {endpoint}: {e}") from e
    sock.settimeout(None)

    def hang_up():
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()

    return JsonLineChannel(
        reader=sock.makefile("rb"),
        writer=sock.makefile("wb"),
        name=str(endpoint),
        on_close=hang_up,
    )


def _spawn(endpoint: Endpoint) -> JsonLineChannel:
    try:
        proc = subprocess.Popen(
            list(endpoint.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )
    except OSError as e:
        raise TransportError(f"cannot start {endpoint}: {e}") from e
    assert proc.stdin is not None and proc.stdout is not None

    def reap():
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            log.warning(f"{endpoint} did not exit after stdin closed, killing it")
            proc.kill()
            proc.wait()

    log.info(f"started bridge process {endpoint} (pid {proc.pid})")
    return JsonLineChannel(reader=proc.stdout, writer=proc.stdin, name=str(endpoint), on_close=reap)


def connect(
    endpoint: Endpoint, connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
) -> JsonLineChannel:
    if endpoint.kind == "exec":
        return _spawn(endpoint)
    return _connect_tcp(endpoint, connect_timeout)


class ChannelPool:
    """Idle connections to one endpoint, handed out one per episode."""

    def __init__(self, endpoint: Endpoint, connect_timeout: float = DEFAULT_CONNECT_TIMEOUT):
        self.endpoint = endpoint
        self.connect_timeout = connect_timeout
        self._lock = threading.Lock()
        self._idle: List[JsonLineChannel] = []
        self._all: List[JsonLineChannel] = []

    def acquire(self) -> JsonLineChannel:
        with self._lock:
            if self._idle:
                return self._idle.pop()
        channel = connect(self.endpoint, self.connect_timeout)
        with self._lock:
            self._all.append(channel)
        return channel

    def release(self, channel: JsonLineChannel, broken: bool = False):
        if broken or channel.closed:
            channel.close()
            return
        with self._lock:
            self._idle.append(channel)

    def close(self):
        with self._lock:
            channels, self._all, self._idle = self._all, [], []
        for channel in channels:
            channel.close()
