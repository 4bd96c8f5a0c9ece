"""One-round federated computation of cluster-robust standard errors.

The server broadcasts the final coefficients once; every client answers once
with ``u_j = sum_i x_i (x_i'beta - y_i)`` over its own records, carrying no
identifier. The server folds each answer into the sandwich meat as it
arrives and keeps nothing else.

Wire frames are newline-delimited JSON (UTF-8)::

    {"t":"push_beta","beta":[...]}
    {"t":"contribution","u":[...]}
    {"t":"delta_contribution","n":12,"s":3.5,"d":1}

Reals are written with 17 significant digits so they parse back to the
same double. A client closes its connection after its single reply; an
empty client closes without replying.
"""

from __future__ import annotations

import json
import math
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Optional, Union

import numpy as np

from .robust import ClusterContribution, DeltaMethodAccumulator, SandwichAccumulator
from .types import EffectEstimate, Record, StreamError, VarianceReport


class ProtocolError(StreamError):
    """Malformed frame or a protocol run that cannot complete."""


@dataclass
class PushBeta:
    beta: np.ndarray


@dataclass
class Contribution:
    u: np.ndarray


@dataclass
class DeltaContribution:
    n: int
    s: float
    d: int


@dataclass
class Done:
    """Server-local result; never sent to clients."""

    sigma: np.ndarray


ProtocolMessage = Union[PushBeta, Contribution, DeltaContribution, Done]


def _num(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ProtocolError("non-finite value in payload")
    text = format(v, ".17g")
    # keep float syntax so -0.0 survives the round trip
    return text if ("." in text or "e" in text) else text + ".0"


def _vec(values) -> str:
    return "[" + ",".join(_num(v) for v in values) + "]"


def encode_frame(msg: ProtocolMessage) -> bytes:
    if isinstance(msg, PushBeta):
        body = '{"t":"push_beta","beta":%s}' % _vec(msg.beta)
    elif isinstance(msg, Contribution):
        body = '{"t":"contribution","u":%s}' % _vec(msg.u)
    elif isinstance(msg, DeltaContribution):
        body = '{"t":"delta_contribution","n":%d,"s":%s,"d":%d}' % (msg.n, _num(msg.s), msg.d)
    elif isinstance(msg, Done):
        rows = ",".join(_vec(row) for row in np.atleast_2d(msg.sigma))
        body = '{"t":"done","sigma":[%s]}' % rows
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return body.encode("utf-8") + b"\n"


def _float_list(obj, name: str) -> np.ndarray:
    if not isinstance(obj, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
        raise ProtocolError(f"{name} must be a list of numbers")
    arr = np.array(obj, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ProtocolError(f"{name} contains non-finite values")
    return arr


def decode_frame(line: bytes) -> ProtocolMessage:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(obj, dict) or "t" not in obj:
        raise ProtocolError("frame must be an object with a 't' field")
    t = obj["t"]
    if t == "push_beta":
        return PushBeta(_float_list(obj.get("beta"), "beta"))
    if t == "contribution":
        return Contribution(_float_list(obj.get("u"), "u"))
    if t == "delta_contribution":
        n, s, d = obj.get("n"), obj.get("s"), obj.get("d")
        if not isinstance(n, int) or n < 1 or d not in (0, 1) or not isinstance(s, (int, float)):
            raise ProtocolError("delta_contribution needs integer n >= 1, numeric s, d in {0, 1}")
        return DeltaContribution(n, float(s), d)
    if t == "done":
        rows = obj.get("sigma")
        if not isinstance(rows, list):
            raise ProtocolError("sigma must be a list of rows")
        return Done(np.vstack([_float_list(r, "sigma row") for r in rows]))
    raise ProtocolError(f"unknown frame type {t!r}")


@dataclass
class ClientState:
    """A client's own records; they never leave the client."""

    records: list = field(default_factory=list)

    def compute_contribution(self, beta: np.ndarray) -> Optional[Contribution]:
        if not self.records:
            return None
        beta = np.asarray(beta, dtype=np.float64)
        u = np.zeros(beta.shape[0])
        for r in self.records:
            if r.x.shape != beta.shape:
                raise ProtocolError(f"record has {r.x.shape[0]} features, beta has {beta.shape[0]}")
            u += r.x * (r.x @ beta - r.y)
        return Contribution(u)

    def delta_contribution(self) -> Optional[DeltaContribution]:
        if not self.records:
            return None
        arms = {r.d for r in self.records}
        if len(arms) != 1:
            raise ProtocolError("delta protocol needs every record of a client in one arm")
        return DeltaContribution(len(self.records), float(sum(r.y for r in self.records)), arms.pop())

    def respond(self, msg: ProtocolMessage) -> Optional[ProtocolMessage]:
        if isinstance(msg, PushBeta):
            return self.compute_contribution(msg.beta)
        raise ProtocolError(f"client cannot answer {type(msg).__name__}")


def client_compute_contribution(client: ClientState, beta: np.ndarray) -> Optional[Contribution]:
    return client.compute_contribution(beta)


class ServerState:
    """Holds the concluded fit and the running meat; contributions are not stored."""

    def __init__(self, beta_final: Optional[np.ndarray], bread: Optional[np.ndarray], expected_clients: int = 0):
        self.beta_final = None if beta_final is None else np.array(beta_final, dtype=np.float64)
        k = None if self.beta_final is None else self.beta_final.shape[0]
        self.acc = SandwichAccumulator(k or 0, bread)
        self.expected_clients = expected_clients
        self.received = 0
        self.pushes = 0

    def push_beta(self) -> PushBeta:
        if self.beta_final is None:
            raise ProtocolError("final coefficients have not been set")
        self.pushes += 1
        return PushBeta(self.beta_final.copy())

    def absorb(self, msg: Contribution) -> "ServerState":
        if not isinstance(msg, Contribution):
            raise ProtocolError(f"server expected a contribution, got {type(msg).__name__}")
        self.acc.absorb(ClusterContribution(msg.u))
        self.received += 1
        return self

    def assemble(self) -> VarianceReport:
        return self.acc.assemble()


def server_push_beta(server: ServerState) -> PushBeta:
    return server.push_beta()


def server_absorb(server: ServerState, msg: Contribution) -> ServerState:
    return server.absorb(msg)


@dataclass
class ProtocolTrace:
    """Counts of what crossed the (simulated) network in one run."""

    broadcasts: int = 0
    to_clients: list = field(default_factory=list)
    to_server: list = field(default_factory=list)
    abstained: int = 0
    missing: int = 0

    def payload_lengths(self) -> list:
        return [n for _, n in self.to_clients] + [n for _, n in self.to_server]


def _payload_len(msg: ProtocolMessage) -> int:
    if isinstance(msg, PushBeta):
        return msg.beta.shape[0]
    if isinstance(msg, Contribution):
        return msg.u.shape[0]
    if isinstance(msg, DeltaContribution):
        return 3
    return int(np.size(msg.sigma))


def _client_worker(sock: socket.socket, client: ClientState, mode: str) -> None:
    with sock, sock.makefile("rb") as rf:
        if mode == "delta":
            reply = client.delta_contribution()
        else:
            line = rf.readline()
            if not line:
                return
            reply = client.respond(decode_frame(line))
        if reply is not None:
            try:
                sock.sendall(encode_frame(reply))
            except OSError:
                # server already gave up on this client (timeout)
                pass


def _exchange(clients: list, first_frame: Optional[bytes], mode: str, timeout: float, trace: ProtocolTrace):
    """Run every client over a socket pair; yield replies in arrival order."""
    sel = selectors.DefaultSelector()
    threads = []
    buffers = {}
    try:
        for client in clients:
            srv, cli = socket.socketpair()
            t = threading.Thread(target=_client_worker, args=(cli, client, mode), daemon=True)
            threads.append(t)
            if first_frame is not None:
                srv.sendall(first_frame)
            srv.setblocking(False)
            sel.register(srv, selectors.EVENT_READ)
            buffers[srv] = b""
            t.start()
        deadline = time.monotonic() + timeout
        while buffers:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            for key, _ in sel.select(remaining):
                conn = key.fileobj
                chunk = conn.recv(65536)
                if chunk:
                    buffers[conn] += chunk
                    continue
                data = buffers.pop(conn)
                sel.unregister(conn)
                conn.close()
                lines = [ln for ln in data.split(b"\n") if ln]
                if len(lines) > 1:
                    raise ProtocolError("client sent more than one frame")
                if not lines:
                    trace.abstained += 1
                    continue
                yield decode_frame(lines[0])
        trace.missing += len(buffers)
    finally:
        for conn in list(buffers):
            sel.unregister(conn)
            conn.close()
        sel.close()


def _in_process(clients: list, push: Optional[PushBeta], mode: str, trace: ProtocolTrace):
    for client in clients:
        reply = client.delta_contribution() if mode == "delta" else client.respond(push)
        if reply is None:
            trace.abstained += 1
        else:
            yield reply


def _check_quorum(trace: ProtocolTrace, expected: int, quorum: float) -> None:
    answered = expected - trace.missing
    if expected == 0 or answered / expected < quorum:
        raise ProtocolError(f"only {answered} of {expected} clients answered (quorum {quorum:.0%})")


def run_simulation(
    clients: Iterable[ClientState],
    beta_final: np.ndarray,
    bread: np.ndarray,
    transport: str = "inproc",
    quorum: float = 1.0,
    timeout: float = 30.0,
    trace: Optional[ProtocolTrace] = None,
) -> VarianceReport:
    """Run the one-round protocol and return the assembled sandwich covariance."""
    clients = list(clients)
    if not clients:
        raise ProtocolError("no clients")
    if not 0.0 < quorum <= 1.0:
        raise ProtocolError("quorum must lie in (0, 1]")
    trace = ProtocolTrace() if trace is None else trace
    server = ServerState(beta_final, bread, expected_clients=len(clients))
    push = server.push_beta()
    trace.broadcasts += 1
    trace.to_clients.extend(("push_beta", _payload_len(push)) for _ in clients)
    if transport == "inproc":
        replies = _in_process(clients, push, "sandwich", trace)
    elif transport == "wire":
        replies = _exchange(clients, encode_frame(push), "sandwich", timeout, trace)
    else:
        raise ProtocolError(f"unknown transport {transport!r}")
    for msg in replies:
        trace.to_server.append(("contribution", _payload_len(msg)))
        server.absorb(msg)
    _check_quorum(trace, len(clients), quorum)
    report = server.assemble()
    notes = (f"clients={len(clients)}", f"abstained={trace.abstained}", f"missing={trace.missing}")
    return VarianceReport(sigma=report.sigma, method="federated-cluster-robust", j_count=report.j_count, notes=notes)


def run_delta_simulation(
    clients: Iterable[ClientState],
    transport: str = "inproc",
    quorum: float = 1.0,
    timeout: float = 30.0,
    level: float = 0.95,
    trace: Optional[ProtocolTrace] = None,
) -> EffectEstimate:
    """Delta-method variant: each client sends (size, sum, arm) once, unprompted."""
    clients = list(clients)
    if not clients:
        raise ProtocolError("no clients")
    trace = ProtocolTrace() if trace is None else trace
    if transport == "inproc":
        replies = _in_process(clients, None, "delta", trace)
    elif transport == "wire":
        replies = _exchange(clients, None, "delta", timeout, trace)
    else:
        raise ProtocolError(f"unknown transport {transport!r}")
    acc = DeltaMethodAccumulator()
    n_total = 0
    for msg in replies:
        if not isinstance(msg, DeltaContribution):
            raise ProtocolError(f"expected delta_contribution, got {type(msg).__name__}")
        trace.to_server.append(("delta_contribution", _payload_len(msg)))
        acc.add_cluster(msg.n, msg.s, msg.d)
        n_total += msg.n
    _check_quorum(trace, len(clients), quorum)
    tau = acc.effect()
    se = math.sqrt(acc.effect_variance())
    zq = NormalDist().inv_cdf(0.5 + level / 2)
    return EffectEstimate(tau_hat=tau, n=n_total, method="delta", se=se, ci_low=tau - zq * se, ci_high=tau + zq * se)


def partition_by_cluster(records: Iterable[Record]) -> list:
    """Group records into one client per cluster id (simulation helper)."""
    groups: dict = {}
    for r in records:
        if r.cluster_id is None:
            raise StreamError("every record needs a cluster id")
        groups.setdefault(r.cluster_id, []).append(r)
    return [ClientState(v) for v in groups.values()]
