"""Combining client updates into new global models.

Five strategies share one weighted-mean core: plain weighted averaging,
masked-sum averaging, staleness-damped asynchronous merging, two-level
edge aggregation, and decentralised gossip mixing.  The version ledger
at the bottom records which contributions produced each global model so
any version can be rebuilt from archived payloads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError, PartitionError, SecureAbortError
from .models import ParameterVector
from .wire import fnv1a64

PAD_SALT = 301  # stream tag for pairwise mask material

ROOT_VERSION = "g0"

MODE_INIT = "init"
MODE_FEDAVG = "fedavg"
MODE_SECURE = "secure"
MODE_ASYNC = "async"
MODE_HIERARCHICAL = "hierarchical"
MODE_GOSSIP = "gossip"
AGGREGATION_MODES = (
    MODE_INIT,
    MODE_FEDAVG,
    MODE_SECURE,
    MODE_ASYNC,
    MODE_HIERARCHICAL,
    MODE_GOSSIP,
)

SEGMENT_FULL = "full"  # payloads describe the whole parameter vector
SEGMENT_BODY = "body"  # payloads describe the shared leading segment only


# ---------------------------------------------------------------------------
# weighted averaging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedUpdate:
    """One contribution to a round: parameters plus sample-count weight."""

    client_id: int
    params: ParameterVector
    n_samples: int

    def __post_init__(self) -> None:
        if self.client_id < 0:
            raise ValueError("client_id must be non-negative")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")


def _sorted_updates(updates: list[WeightedUpdate]) -> list[WeightedUpdate]:
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client_id in update set")
    dim = len(ordered[0].params)
    for u in ordered:
        if len(u.params) != dim:
            raise ValueError(f"dimension mismatch: {len(u.params)} vs {dim}")
    return ordered


def fedavg(updates: list[WeightedUpdate]) -> ParameterVector:
    """Sample-weighted mean of client parameter vectors.

    Accumulation runs in ascending client id order so repeated runs are
    bit-identical.  A single update is returned as-is; multiplying and
    dividing by its own weight would perturb low bits.
    """
    if not updates:
        raise ValueError("need at least one update")
    ordered = _sorted_updates(updates)
    if len(ordered) == 1:
        return ordered[0].params
    acc = np.zeros(len(ordered[0].params))
    total = 0
    for u in ordered:
        acc = acc + u.params.values * u.n_samples
        total += u.n_samples
    return ParameterVector(acc / total)


# ---------------------------------------------------------------------------
# masked-sum aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPad:
    """Shared pad for one client pair.

    The lower id adds the pad to its weighted submission, the higher id
    subtracts it, so the pair's contribution cancels in the sum.
    """

    low: int
    high: int
    seed: int
    pad: ParameterVector

    def __post_init__(self) -> None:
        if self.low >= self.high:
            raise ValueError("pad pair must satisfy low < high")


def pad_seed(round_seed: int, low: int, high: int) -> int:
    return fnv1a64(struct.pack("<QIII", round_seed, PAD_SALT, low, high))


def pairwise_pads(
    client_ids: list[int], dim: int, round_seed: int
) -> dict[tuple[int, int], MaskPad]:
    """One shared pad per unordered participant pair, keyed by (low, high)."""
    ids = sorted(client_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client_id")
    pads: dict[tuple[int, int], MaskPad] = {}
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            low, high = ids[a], ids[b]
            seed = pad_seed(round_seed, low, high)
            rng = np.random.default_rng(seed)
            pad = ParameterVector(rng.uniform(-1.0, 1.0, size=dim))
            pads[(low, high)] = MaskPad(low, high, seed, pad)
    return pads


def mask_submission(
    update: WeightedUpdate, pads: dict[tuple[int, int], MaskPad]
) -> np.ndarray:
    """Weighted parameters obscured by every pad this client shares."""
    masked = update.params.values * update.n_samples
    for (low, high), entry in sorted(pads.items()):
        if low == update.client_id:
            masked = masked + entry.pad.values
        elif high == update.client_id:
            masked = masked - entry.pad.values
    return masked


def secure_sum(
    submissions: list[tuple[int, np.ndarray]],
    total_n: int,
    expected_ids: list[int],
) -> ParameterVector:
    """Sum masked submissions and divide by the total weight.

    Every expected participant must be present: pads only cancel over
    the full set, so a partial sum is meaningless and the round has to
    be rerun.
    """
    got = sorted(cid for cid, _ in submissions)
    expected = sorted(expected_ids)
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise SecureAbortError(
            f"masked sum participant mismatch: missing {missing}, unexpected {extra}"
        )
    if total_n <= 0:
        raise ValueError("total_n must be positive")
    ordered = sorted(submissions, key=lambda s: s[0])
    acc = np.zeros(ordered[0][1].shape[0])
    for _, values in ordered:
        acc = acc + values
    return ParameterVector(acc / total_n)


def secure_round(updates: list[WeightedUpdate], round_seed: int) -> ParameterVector:
    """Run the whole mask-exchange protocol in one call.

    The round driver splits these steps across simulated clients; this
    entry point exists for direct equivalence checks against fedavg.
    """
    ordered = _sorted_updates(updates)
    if len(ordered) < 2:
        raise ValueError("masked aggregation needs at least 2 contributors")
    dim = len(ordered[0].params)
    ids = [u.client_id for u in ordered]
    pads = pairwise_pads(ids, dim, round_seed)
    submissions = [(u.client_id, mask_submission(u, pads)) for u in ordered]
    total = sum(u.n_samples for u in ordered)
    return secure_sum(submissions, total, ids)


# ---------------------------------------------------------------------------
# asynchronous merging
# ---------------------------------------------------------------------------


def staleness_factor(alpha0: float, decay: float, staleness: int) -> float:
    """Damping weight alpha0 * (1 + s)^(-decay) for an update s rounds old."""
    if not 0.0 < alpha0 <= 1.0:
        raise ConfigError("async_alpha0 must lie in (0, 1]")
    if decay < 0.0:
        raise ConfigError("async_decay must be >= 0")
    if staleness < 0:
        raise ValueError("staleness must be >= 0")
    return alpha0 * (1.0 + staleness) ** (-decay)


def async_merge(
    global_params: ParameterVector,
    update: ParameterVector,
    current_round: int,
    base_round: int,
    alpha0: float,
    decay: float,
) -> ParameterVector:
    """Blend one late-arriving update into the current global model.

    The step is global + alpha * (update - global).  The delta form
    makes merging a model into itself a no-op at any alpha, and alpha=1
    short-circuits to the update itself.
    """
    if base_round > current_round:
        raise ValueError("base_round is ahead of current_round")
    if len(global_params) != len(update):
        raise ValueError("dimension mismatch")
    alpha = staleness_factor(alpha0, decay, current_round - base_round)
    if alpha == 1.0:
        return update
    merged = global_params.values + alpha * (update.values - global_params.values)
    return ParameterVector(merged)


# ---------------------------------------------------------------------------
# two-level edge aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeGroup:
    """Clients whose updates one edge node combines before the global step."""

    edge_id: int
    member_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.edge_id < 0:
            raise ValueError("edge_id must be non-negative")
        members = tuple(int(m) for m in self.member_ids)
        if not members:
            raise ValueError("edge group has no members")
        if len(set(members)) != len(members):
            raise ValueError("duplicate member in edge group")
        object.__setattr__(self, "member_ids", members)


def hierarchical_aggregate(
    groups: list[EdgeGroup], updates: list[WeightedUpdate]
) -> ParameterVector:
    """Per-group weighted means first, then a weighted mean of group models.

    The groups must cover every contributing client exactly once.
    """
    if not groups:
        raise PartitionError("no edge groups given")
    edge_ids = [g.edge_id for g in groups]
    if len(set(edge_ids)) != len(edge_ids):
        raise PartitionError("duplicate edge_id")
    ordered = _sorted_updates(updates)
    by_id = {u.client_id: u for u in ordered}
    seen: set[int] = set()
    for g in groups:
        for cid in g.member_ids:
            if cid in seen:
                raise PartitionError(f"client {cid} appears in more than one group")
            if cid not in by_id:
                raise PartitionError(f"client {cid} has no update this round")
            seen.add(cid)
    if seen != set(by_id):
        missing = sorted(set(by_id) - seen)
        raise PartitionError(f"clients {missing} not covered by any group")
    edge_updates = []
    for g in sorted(groups, key=lambda g: g.edge_id):
        members = [by_id[cid] for cid in g.member_ids]
        model = fedavg(members)
        weight = sum(u.n_samples for u in members)
        edge_updates.append(WeightedUpdate(g.edge_id, model, weight))
    return fedavg(edge_updates)


# ---------------------------------------------------------------------------
# gossip mixing
# ---------------------------------------------------------------------------


class GossipGraph:
    """Undirected mixing topology with Metropolis edge weights.

    Edge (i, j) carries weight 1/(1 + max(deg_i, deg_j)); whatever mass
    a node does not send to neighbours it keeps.  The implied mixing
    matrix is symmetric with nonnegative rows summing to 1, so a mixing
    step preserves the node mean and never widens the spread.
    """

    def __init__(self, nodes: list[int], edges: list[tuple[int, int]]):
        ordered = tuple(sorted(int(n) for n in nodes))
        if not ordered:
            raise ValueError("graph has no nodes")
        if len(set(ordered)) != len(ordered):
            raise ValueError("duplicate node id")
        node_set = set(ordered)
        normalized: set[tuple[int, int]] = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            if a not in node_set or b not in node_set:
                raise ValueError(f"edge ({a}, {b}) leaves the node set")
            normalized.add((a, b) if a < b else (b, a))
        self.nodes = ordered
        self.edges = tuple(sorted(normalized))
        adjacency: dict[int, list[int]] = {n: [] for n in ordered}
        for a, b in self.edges:
            adjacency[a].append(b)
            adjacency[b].append(a)
        self._neighbors = {n: tuple(sorted(adjacency[n])) for n in ordered}
        # breadth-first reachability from the lowest node
        frontier = [ordered[0]]
        visited = {ordered[0]}
        while frontier:
            nxt = []
            for n in frontier:
                for m in self._neighbors[n]:
                    if m not in visited:
                        visited.add(m)
                        nxt.append(m)
            frontier = nxt
        if visited != node_set:
            stranded = sorted(node_set - visited)
            raise ValueError(f"graph is not connected, unreachable nodes {stranded}")
        degree = {n: len(self._neighbors[n]) for n in ordered}
        self._edge_weight = {
            (a, b): 1.0 / (1.0 + max(degree[a], degree[b])) for a, b in self.edges
        }

    @classmethod
    def ring(cls, nodes: list[int]) -> "GossipGraph":
        ordered = sorted(int(n) for n in nodes)
        if len(ordered) < 2:
            raise ValueError("a ring needs at least 2 nodes")
        edges = [(ordered[i], ordered[(i + 1) % len(ordered)]) for i in range(len(ordered))]
        if len(ordered) == 2:
            edges = [(ordered[0], ordered[1])]
        return cls(ordered, edges)

    def neighbors(self, node: int) -> tuple[int, ...]:
        return self._neighbors[node]

    def degree(self, node: int) -> int:
        return len(self._neighbors[node])

    def weight(self, a: int, b: int) -> float:
        key = (a, b) if a < b else (b, a)
        return self._edge_weight[key]

    def self_weight(self, node: int) -> float:
        kept = 1.0
        for m in self._neighbors[node]:
            kept -= self.weight(node, m)
        return kept

    def mixing_matrix(self) -> np.ndarray:
        """Dense row-stochastic matrix, rows and columns in node order."""
        index = {n: i for i, n in enumerate(self.nodes)}
        w = np.zeros((len(self.nodes), len(self.nodes)))
        for (a, b), value in self._edge_weight.items():
            w[index[a], index[b]] = value
            w[index[b], index[a]] = value
        for n in self.nodes:
            w[index[n], index[n]] = self.self_weight(n)
        return w


def gossip_round(
    graph: GossipGraph, states: dict[int, ParameterVector]
) -> dict[int, ParameterVector]:
    """One synchronous mixing step over the whole graph.

    Each node moves toward its neighbours: x_i + sum_j w_ij (x_j - x_i).
    The delta form keeps an already-agreed state a true fixed point.
    """
    if set(states) != set(graph.nodes):
        raise ValueError("states must cover exactly the graph nodes")
    dim = len(states[graph.nodes[0]])
    for n in graph.nodes:
        if len(states[n]) != dim:
            raise ValueError("dimension mismatch across node states")
    mixed: dict[int, ParameterVector] = {}
    for node in graph.nodes:
        x = states[node].values
        acc = x
        for m in graph.neighbors(node):
            acc = acc + graph.weight(node, m) * (states[m].values - x)
        mixed[node] = ParameterVector(acc)
    return mixed


def run_gossip(
    graph: GossipGraph, states: dict[int, ParameterVector], steps: int
) -> dict[int, ParameterVector]:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    for _ in range(steps):
        states = gossip_round(graph, states)
    return states


def node_mean(states: dict[int, ParameterVector]) -> ParameterVector:
    """Plain mean of node states, accumulated in ascending node id order."""
    if not states:
        raise ValueError("no states")
    ids = sorted(states)
    acc = np.zeros(len(states[ids[0]]))
    for n in ids:
        acc = acc + states[n].values
    return ParameterVector(acc / len(ids))


# ---------------------------------------------------------------------------
# version ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Contributor:
    """One archived payload that went into a global version."""

    client_id: int
    payload_hash: str  # content hash of the payload bytes as aggregated
    n_samples: int
    update_kind: int  # wire kind of the carrying message
    base_version: str  # global version the client started from
    loss: float | None = None
    accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.client_id < 0:
            raise ValueError("client_id must be non-negative")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        _check_hash(self.payload_hash)


def _check_hash(value: str) -> None:
    if len(value) != 16 or any(c not in "0123456789abcdef" for c in value):
        raise ValueError(f"content hash must be 16 lowercase hex chars, got {value!r}")


@dataclass(frozen=True)
class GlobalVersionRecord:
    """Append-only ledger entry for one global model version."""

    version_id: str
    parent_version_id: str | None
    params_hash: str
    contributors: tuple[Contributor, ...]
    created_at_round: int
    aggregation_mode: str
    update_segment: str = SEGMENT_FULL
    detail: dict = field(default_factory=dict)  # mode specific replay inputs

    def __post_init__(self) -> None:
        if not self.version_id:
            raise ValueError("empty version_id")
        _check_hash(self.params_hash)
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation_mode {self.aggregation_mode!r}")
        if self.update_segment not in (SEGMENT_FULL, SEGMENT_BODY):
            raise ValueError(f"unknown update_segment {self.update_segment!r}")
        contributors = tuple(self.contributors)
        object.__setattr__(self, "contributors", contributors)
        if self.parent_version_id is None:
            if contributors:
                raise ValueError("root version cannot have contributors")
        elif not contributors:
            raise ValueError("non-root version needs at least one contributor")
        if self.created_at_round < 0:
            raise ValueError("created_at_round must be >= 0")


def record_to_json(rec: GlobalVersionRecord) -> dict:
    return {
        "version_id": rec.version_id,
        "parent": rec.parent_version_id,
        "params_hash": rec.params_hash,
        "round": rec.created_at_round,
        "mode": rec.aggregation_mode,
        "segment": rec.update_segment,
        "contributors": [
            {
                "client_id": c.client_id,
                "payload_hash": c.payload_hash,
                "n_samples": c.n_samples,
                "update_kind": c.update_kind,
                "base_version": c.base_version,
                "loss": c.loss,
                "accuracy": c.accuracy,
            }
            for c in rec.contributors
        ],
        "detail": rec.detail,
    }


def record_from_json(obj: dict) -> GlobalVersionRecord:
    contributors = tuple(
        Contributor(
            client_id=c["client_id"],
            payload_hash=c["payload_hash"],
            n_samples=c["n_samples"],
            update_kind=c["update_kind"],
            base_version=c["base_version"],
            loss=c.get("loss"),
            accuracy=c.get("accuracy"),
        )
        for c in obj["contributors"]
    )
    return GlobalVersionRecord(
        version_id=obj["version_id"],
        parent_version_id=obj["parent"],
        params_hash=obj["params_hash"],
        contributors=contributors,
        created_at_round=obj["round"],
        aggregation_mode=obj["mode"],
        update_segment=obj.get("segment", SEGMENT_FULL),
        detail=dict(obj.get("detail") or {}),
    )


class VersionLedger:
    """Append-only map from global version ids to their provenance records."""

    def __init__(self) -> None:
        self._records: dict[str, GlobalVersionRecord] = {}
        self._order: list[str] = []

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, version_id: str) -> bool:
        return version_id in self._records

    def record(self, rec: GlobalVersionRecord) -> None:
        if rec.version_id in self._records:
            raise IntegrityError(f"duplicate version {rec.version_id}")
        if rec.parent_version_id is None:
            if self._order:
                raise IntegrityError("ledger already has a root version")
        elif rec.parent_version_id not in self._records:
            raise IntegrityError(f"unknown parent {rec.parent_version_id}")
        self._records[rec.version_id] = rec
        self._order.append(rec.version_id)

    def get(self, version_id: str) -> GlobalVersionRecord:
        try:
            return self._records[version_id]
        except KeyError:
            raise IntegrityError(f"unknown version {version_id}") from None

    def versions(self) -> tuple[str, ...]:
        """Version ids in append order."""
        return tuple(self._order)

    def latest(self) -> GlobalVersionRecord:
        if not self._order:
            raise IntegrityError("ledger is empty")
        return self._records[self._order[-1]]

    def lineage(self, version_id: str) -> list[str]:
        """Parent chain from the given version down to the root, inclusive."""
        chain = []
        current: str | None = version_id
        while current is not None:
            rec = self.get(current)
            chain.append(current)
            current = rec.parent_version_id
        return chain

    def write_jsonl(self, path: str | Path) -> None:
        lines = [
            json.dumps(record_to_json(self._records[v]), sort_keys=True)
            for v in self._order
        ]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "VersionLedger":
        ledger = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                ledger.record(record_from_json(json.loads(line)))
        return ledger
