"""Ring protocol: each node keeps one W block and passes its H block on.

Node ``n`` (1-based) permanently owns row block ``n - 1`` of ``W`` and the
matching row stripe of ``V``. After every iteration it sends the H block it
holds to node ``(n mod B) + 1``, so the part used at the next iteration is
implied by where the H blocks sit. Messages go through a :class:`Transport`;
:class:`InProcessTransport` is the queue-backed implementation used for
tests and single-machine runs.
"""

from __future__ import annotations

import queue
import struct
import threading
import time
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import rng as rngmod
from .data import FactorPair, ObservationMatrix
from .errors import (ConfigurationError, NonFiniteError, ProtocolError,
                     TransportError, TransportTimeout)
from .model import MU_FLOOR, ModelSpec, beta_divergence, poisson_constant
from .partition import CYCLIC, BlockedData, BlockGrid, ring_order
from .sampler import (ChainRecord, SamplerConfig, epsilon_at, initial_state, run_chain,
                      update_block)

MAGIC = b"PSGH"
HEADER = struct.Struct("<4sQIIIII")  # magic, iteration, block id, rows, cols, checksum, pad
assert HEADER.size == 32


def encode_h_block(block_id: int, iteration: int, h: np.ndarray) -> bytes:
    """Header followed by little-endian float64 values in row-major order."""
    body = np.ascontiguousarray(h, dtype="<f8").tobytes()
    rows, cols = h.shape
    return HEADER.pack(MAGIC, iteration, block_id, rows, cols, zlib.crc32(body), 0) + body


def decode_h_block(payload: bytes) -> Tuple[int, int, np.ndarray]:
    """Inverse of :func:`encode_h_block`; returns (block id, iteration, H)."""
    if len(payload) < HEADER.size:
        raise TransportError("truncated envelope")
    magic, iteration, block_id, rows, cols, checksum, _ = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise TransportError("bad magic in envelope header")
    body = payload[HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise TransportError("payload length does not match header dimensions")
    if zlib.crc32(body) != checksum:
        raise TransportError(f"checksum mismatch on H block {block_id}, iteration {iteration}")
    h = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)
    return block_id, iteration, h


@dataclass(frozen=True)
class TransportEnvelope:
    from_node: int
    to_node: int
    iteration: int
    payload: bytes

    @property
    def checksum(self) -> int:
        return HEADER.unpack_from(self.payload)[5]


class Transport:
    """Reliable, ordered, point-to-point delivery of envelopes."""

    def send(self, env: TransportEnvelope) -> None:
        raise NotImplementedError

    def receive(self, to_node: int, from_node: int, timeout: Optional[float] = None
                ) -> TransportEnvelope:
        raise NotImplementedError


class InProcessTransport(Transport):
    """One FIFO queue per (sender, receiver) pair. Counts traffic."""

    def __init__(self):
        self._queues: Dict[Tuple[int, int], queue.Queue] = defaultdict(queue.Queue)
        self._lock = threading.Lock()
        self.messages = 0
        self.bytes_sent = 0
        self.bytes_per_iteration: Dict[int, int] = defaultdict(int)

    def _queue(self, key):
        with self._lock:
            return self._queues[key]

    def send(self, env: TransportEnvelope) -> None:
        with self._lock:
            self.messages += 1
            self.bytes_sent += len(env.payload)
            self.bytes_per_iteration[env.iteration] += len(env.payload)
        self._queue((env.from_node, env.to_node)).put(env)

    def receive(self, to_node: int, from_node: int, timeout: Optional[float] = None
                ) -> TransportEnvelope:
        try:
            return self._queue((from_node, to_node)).get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(
                f"node {to_node} timed out waiting for node {from_node}") from None

    def pending(self) -> int:
        with self._lock:
            return sum(q.qsize() for q in self._queues.values())


def successor(node_id: int, B: int) -> int:
    return (node_id % B) + 1


def predecessor(node_id: int, B: int) -> int:
    return ((node_id - 2) % B) + 1


@dataclass
class NodeState:
    """State held by one ring node.

    ``v_blocks`` maps column-block index to the node's resident data block
    (dense array or block-local coordinate tuple). ``counts`` is the table
    of observed entries per block, handed out at job submission so every
    node can compute the scale of the implicit part.
    """

    node_id: int
    B: int
    w_block: np.ndarray
    h_block: np.ndarray
    h_block_id: int
    v_blocks: Dict[int, object]
    counts: np.ndarray
    n_observed: int
    dense: bool
    iteration: int = 0
    h_sums: Dict[int, np.ndarray] = field(default_factory=dict)
    w_sum: Optional[np.ndarray] = None
    kept: int = 0

    @property
    def row_block(self) -> int:
        return self.node_id - 1

    @property
    def part_index(self) -> int:
        return (self.h_block_id - self.row_block) % self.B

    def part_size(self) -> int:
        d = self.part_index
        return int(sum(self.counts[b, (b + d) % self.B] for b in range(self.B)))

    def compute(self, t: int, eps: float, spec: ModelSpec, seed: int, mirroring: bool = True):
        """PSGLD update of the held (W block, H block) pair against the
        resident data block for column block ``h_block_id``."""
        size = self.part_size()
        scale = self.n_observed / size if size else 0.0
        g = rngmod.block_stream(seed, t, self.row_block, self.h_block_id)
        w, h = update_block(self.w_block, self.h_block, self.v_blocks[self.h_block_id], spec,
                            eps, scale, g, mirroring)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(h))):
            raise NonFiniteError(f"node {self.node_id}: non-finite update at iteration {t}",
                                 iteration=t, block=(self.row_block, self.h_block_id))
        self.w_block, self.h_block = w, h
        self.iteration = t

    def local_metrics(self, spec: ModelSpec) -> Tuple[float, float]:
        """(log-likelihood of the current data block, log prior of the held
        W and H blocks)."""
        data = self.v_blocks[self.h_block_id]
        aw, ah = self.w_block, self.h_block
        if isinstance(data, tuple):
            rows, cols, vals = data
            mu = np.einsum("nk,kn->n", aw[rows], ah[:, cols])
        else:
            vals = data.ravel()
            mu = (aw @ ah).ravel()
        lik = -float(np.sum(beta_divergence(vals, np.maximum(mu, MU_FLOOR), spec.beta))) / spec.phi
        if spec.is_poisson:
            lik += poisson_constant(vals)
        prior = -(spec.lambda_w * float(np.abs(aw).sum()) + spec.lambda_h * float(np.abs(ah).sum()))
        return lik, prior

    def accumulate(self):
        self.kept += 1
        if self.w_sum is None:
            self.w_sum = self.w_block.copy()
        else:
            self.w_sum += self.w_block
        if self.h_block_id in self.h_sums:
            self.h_sums[self.h_block_id] += self.h_block
        else:
            self.h_sums[self.h_block_id] = self.h_block.copy()

    def send(self, transport: Transport, t: int):
        env = TransportEnvelope(self.node_id, successor(self.node_id, self.B), t,
                                encode_h_block(self.h_block_id, t, self.h_block))
        transport.send(env)

    def receive(self, transport: Transport, t: int, timeout: Optional[float] = None):
        src = predecessor(self.node_id, self.B)
        env = transport.receive(self.node_id, src, timeout)
        if env.to_node != self.node_id or env.from_node != src:
            raise ProtocolError(f"node {self.node_id}: misrouted envelope "
                                f"{env.from_node}->{env.to_node}")
        if env.iteration != t:
            raise ProtocolError(f"node {self.node_id}: expected iteration {t}, got {env.iteration}")
        block_id, iteration, h = decode_h_block(env.payload)
        if iteration != t:
            raise ProtocolError(f"node {self.node_id}: header iteration {iteration} != {t}")
        self.h_block_id = block_id
        self.h_block = h


def make_nodes(v: ObservationMatrix, spec: ModelSpec, grid: BlockGrid, seed: int,
               init: Optional[FactorPair] = None) -> List[NodeState]:
    """Initial placement: node ``n`` holds W block ``n - 1``, H block
    ``n - 1`` and row stripe ``n - 1`` of the data."""
    data = BlockedData(v, grid)
    state = initial_state(spec, v.n_rows, v.n_cols, seed) if init is None else init
    nodes = []
    for b in range(grid.B):
        rr, cc = grid.row_partition[b], grid.col_partition[b]
        blocks = {c: (data.dense_block(b, c) if data.dense else data.sparse_block(b, c))
                  for c in range(grid.B)}
        nodes.append(NodeState(b + 1, grid.B, state.w[rr.start:rr.stop].copy(),
                               state.h[:, cc.start:cc.stop].copy(), b, blocks, data.counts,
                               data.n_observed, data.dense))
    return nodes


def check_permutation(nodes: List[NodeState]):
    held = sorted(n.h_block_id for n in nodes)
    if held != list(range(len(nodes))):
        raise ProtocolError(f"H blocks are not a permutation across nodes: {held}")


def ring_step(nodes: List[NodeState], eps: float, spec: ModelSpec, seed: int, t: int,
              transport: Optional[Transport] = None, mirroring: bool = True) -> List[NodeState]:
    """Run one iteration of the protocol sequentially over all nodes:
    update, then pass H blocks one step round the ring."""
    check_permutation(nodes)
    for n in nodes:
        n.compute(t, eps, spec, seed, mirroring)
    if len(nodes) > 1:
        transport = InProcessTransport() if transport is None else transport
        for n in nodes:
            n.send(transport, t)
        for n in nodes:
            n.receive(transport, t, timeout=0)
    check_permutation(nodes)
    return nodes


def gather(nodes: List[NodeState], grid: BlockGrid) -> FactorPair:
    """Assemble the full (W, H) from the nodes."""
    k = nodes[0].w_block.shape[1]
    w = np.empty((grid.n_rows, k))
    h = np.empty((k, grid.n_cols))
    for n in nodes:
        rr = grid.row_partition[n.row_block]
        cc = grid.col_partition[n.h_block_id]
        w[rr.start:rr.stop] = n.w_block
        h[:, cc.start:cc.stop] = n.h_block
    return FactorPair(w, h)


def _gather_mean(nodes: List[NodeState], grid: BlockGrid) -> Optional[FactorPair]:
    kept = nodes[0].kept
    if kept == 0:
        return None
    k = nodes[0].w_block.shape[1]
    w = np.empty((grid.n_rows, k))
    h = np.zeros((k, grid.n_cols))
    for n in nodes:
        rr = grid.row_partition[n.row_block]
        w[rr.start:rr.stop] = n.w_sum / kept
        for bid, s in n.h_sums.items():
            cc = grid.col_partition[bid]
            h[:, cc.start:cc.stop] += s
    return FactorPair(w, h / kept)


@dataclass
class DistributedResult:
    records: List[ChainRecord]
    final: FactorPair
    posterior_mean: Optional[FactorPair]
    node_metrics: List[List[Tuple[int, float, float]]]
    bytes_per_iteration: Dict[int, int]
    messages: int
    placements: List[Tuple[int, ...]]


def run_distributed(v: ObservationMatrix, spec: ModelSpec, grid: BlockGrid,
                    config: SamplerConfig, transport: Optional[Transport] = None, *,
                    init: Optional[FactorPair] = None, timeout: float = 30.0,
                    threaded: bool = True) -> DistributedResult:
    """Run the whole chain over the ring, one actor thread per node.

    Each node reports its block log-likelihood and held-block log prior per
    iteration to node 1, which reduces them into the part estimate of the
    log-posterior, ``(N / |part|) * sum(block loglik) + log prior``.
    """
    if config.scheduler_mode != CYCLIC:
        raise ConfigurationError("the ring protocol fixes the part order; use cyclic mode")
    transport = InProcessTransport() if transport is None else transport
    nodes = make_nodes(v, spec, grid, config.seed, init)
    B = grid.B
    metrics: "queue.Queue" = queue.Queue()
    node_metrics: List[List[Tuple[int, float, float]]] = [[] for _ in range(B)]
    abort = threading.Event()
    errors: List[Tuple[int, BaseException]] = []

    def work(n: NodeState, t: int):
        eps = epsilon_at(config.schedule, t)
        n.compute(t, eps, spec, config.seed, config.mirroring)
        if config.keeps(t):
            n.accumulate()
        if config.metrics_every and t % config.metrics_every == 0:
            lik, prior = n.local_metrics(spec)
        else:
            lik, prior = float("nan"), float("nan")
        node_metrics[n.row_block].append((t, lik, prior))
        metrics.put((t, n.node_id, n.h_block_id, n.part_index, n.part_size(), eps, lik, prior))

    def actor(n: NodeState):
        try:
            for t in range(1, config.T + 1):
                if abort.is_set():
                    return
                work(n, t)
                if B > 1:
                    n.send(transport, t)
                    _receive_with_abort(n, transport, t, timeout, abort)
        except BaseException as exc:  # noqa: BLE001 - reported with node id below
            errors.append((n.node_id, exc))
            abort.set()

    if threaded:
        threads = [threading.Thread(target=actor, args=(n,), daemon=True) for n in nodes]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    else:
        for t in range(1, config.T + 1):
            for n in nodes:
                work(n, t)
            if B > 1:
                for n in nodes:
                    n.send(transport, t)
                for n in nodes:
                    n.receive(transport, t, timeout=0)

    if errors:
        # root causes first, then the nodes that stopped because of them
        errors.sort(key=lambda e: (isinstance(e[1], _Aborted), e[0]))
        diag = "; ".join(f"node {nid}: {type(e).__name__}: {e} (at iteration "
                         f"{nodes[nid - 1].iteration})" for nid, e in errors)
        first = errors[0][1]
        if isinstance(first, (ProtocolError, TransportError, NonFiniteError)):
            raise type(first)(diag) from first
        raise ProtocolError(diag) from first

    records, placements = _reduce_metrics(metrics, B, config.T, v.n_observed)
    bpi = dict(getattr(transport, "bytes_per_iteration", {}))
    return DistributedResult(records, gather(nodes, grid), _gather_mean(nodes, grid),
                             node_metrics, bpi, getattr(transport, "messages", 0), placements)


class _Aborted(ProtocolError):
    """A node gave up waiting because another node failed."""


def _receive_with_abort(n: NodeState, transport: Transport, t: int, timeout: float,
                        abort: threading.Event):
    deadline = time.monotonic() + timeout
    while True:
        try:
            n.receive(transport, t, timeout=0.05)
            return
        except TransportTimeout:
            if abort.is_set():
                raise _Aborted(f"node {n.node_id}: aborted while waiting at iteration {t}")
            if time.monotonic() > deadline:
                raise


def _reduce_metrics(metrics: "queue.Queue", B: int, T: int, n_observed: int):
    """Reduction at the designated node: check the placement invariant and
    combine per-node metrics into one record per iteration."""
    by_t: Dict[int, list] = defaultdict(list)
    while not metrics.empty():
        item = metrics.get_nowait()
        by_t[item[0]].append(item)
    records, placements = [], []
    for t in range(1, T + 1):
        rows = sorted(by_t.get(t, []), key=lambda r: r[1])
        if len(rows) != B:
            raise ProtocolError(f"iteration {t}: expected {B} node reports, got {len(rows)}")
        held = tuple(r[2] for r in rows)
        if sorted(held) != list(range(B)):
            raise ProtocolError(f"iteration {t}: H blocks are not a permutation: {held}")
        parts = {r[3] for r in rows}
        if len(parts) != 1:
            raise ProtocolError(f"iteration {t}: nodes disagree on the implicit part")
        size = rows[0][4]
        scale = n_observed / size if size else 0.0
        lp = scale * sum(r[6] for r in rows) + sum(r[7] for r in rows)
        records.append(ChainRecord(t, rows[0][5], lp, rows[0][3]))
        placements.append(held)
    return records, placements


def shared_memory_equivalent(v: ObservationMatrix, spec: ModelSpec, grid: BlockGrid,
                             config: SamplerConfig, **kwargs):
    """``run_chain`` with the cyclic part order that the ring produces."""
    cfg = replace(config, scheduler_mode=CYCLIC, part_order=ring_order(grid.B))
    return run_chain(v, spec, grid, cfg, **kwargs)
