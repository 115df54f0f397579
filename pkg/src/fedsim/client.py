"""Client-side runtime: training on a local shard, the upload gate,
update compression, and multi-task personalization.

A client owns its shard and any personal state exclusively. Everything it
sends travels as an UpdateEnvelope; a private head never enters one. The
dense path uploads full parameter vectors; the compressed path uploads
top-k quantized deltas against the broadcast parameters.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import wire
from .errors import CorruptMessageError, DivergenceError
from .models import (
    ArchDescriptor,
    Dataset,
    EvalReport,
    Hyperparameters,
    ParameterVector,
    evaluate,
    local_train,
)
from .data import ClientShard

PAYLOAD_DENSE = "dense"
PAYLOAD_MASKED = "masked"
PAYLOAD_COMPRESSED = "compressed"

WITHHELD_GATE = "below-threshold"
WITHHELD_DIVERGENCE = "divergence"

ALLOWED_BITS = (4, 8, 16)


@dataclass(frozen=True)
class ModelPackage:
    """What the server broadcasts: versioned parameters plus hyperparameters."""

    version_id: str
    params: ParameterVector
    arch: ArchDescriptor
    hp: Hyperparameters


@dataclass(frozen=True)
class GatePolicy:
    """Inclusive upload thresholds; the defaults disable the gate."""

    min_accuracy: float = 0.0
    max_loss: float | None = None

    def __post_init__(self) -> None:
        # a floor above 1.0 is legal and simply never passes
        if self.min_accuracy < 0.0:
            raise ValueError("min_accuracy must be >= 0")
        if self.max_loss is not None and not (self.max_loss > 0):
            raise ValueError("max_loss must be positive (or None for no bound)")


@dataclass(frozen=True)
class CompressionSpec:
    top_k: float
    bits: int

    def __post_init__(self) -> None:
        if not (0.0 < self.top_k <= 1.0):
            raise ValueError("top_k must lie in (0, 1]")
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}")


@dataclass(frozen=True, eq=False)
class CompressedUpdate:
    """Top-k quantized delta: sorted coordinate indices plus integer codes."""

    d: int
    indices: np.ndarray
    codes: np.ndarray
    bits: int
    scale: float

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        codes = np.asarray(self.codes, dtype=np.int64)
        if self.bits not in ALLOWED_BITS:
            raise ValueError("bits must be one of 4, 8, 16")
        if idx.ndim != 1 or codes.shape != idx.shape:
            raise ValueError("indices and codes must be parallel 1-D arrays")
        if idx.shape[0]:
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.d:
                raise ValueError("indices out of range")
            top = (1 << self.bits) - 1
            if codes.min() < 0 or codes.max() > top:
                raise ValueError("codes out of range for bit width")
        if not (self.scale >= 0.0 and math.isfinite(self.scale)):
            raise ValueError("scale must be finite and >= 0")
        idx = idx.copy()
        codes = codes.copy()
        idx.setflags(write=False)
        codes.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "codes", codes)


@dataclass(frozen=True, eq=False)
class PersonalState:
    """Client-resident private head; never serialized, never uploaded."""

    shared_len: int
    head: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.head, dtype=np.float64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "head", arr)


@dataclass(frozen=True)
class UpdateEnvelope:
    client_id: int
    round_index: int
    base_version_id: str
    n_samples: int
    payload_kind: str
    payload: ParameterVector | CompressedUpdate
    local_eval: EvalReport
    byte_size: int

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        dense = isinstance(self.payload, ParameterVector)
        if self.payload_kind in (PAYLOAD_DENSE, PAYLOAD_MASKED) and not dense:
            raise ValueError("dense/masked payload must be a ParameterVector")
        if self.payload_kind == PAYLOAD_COMPRESSED and dense:
            raise ValueError("compressed payload must be a CompressedUpdate")


@dataclass(frozen=True)
class Withheld:
    """A client declined to upload this round."""

    client_id: int
    round_index: int
    reason: str
    local_eval: EvalReport | None = None


# ---------------------------------------------------------------------------
# upload gate
# ---------------------------------------------------------------------------


def upload_gate(report: EvalReport, policy: GatePolicy) -> bool:
    """Inclusive pass check: accuracy >= floor and loss <= ceiling."""
    if report.accuracy < policy.min_accuracy:
        return False
    if policy.max_loss is not None and report.loss > policy.max_loss:
        return False
    return True


# ---------------------------------------------------------------------------
# compression
# ---------------------------------------------------------------------------


def compress(values: np.ndarray, top_k: float, bits: int) -> CompressedUpdate:
    """Keep the ceil(top_k * d) largest-magnitude coordinates and quantize
    them uniformly over [-m, m] with 2^bits - 1 steps, m the kept maximum.

    Magnitude ties resolve to the lower index.
    """
    spec = CompressionSpec(top_k, bits)  # validates both arguments
    if isinstance(values, ParameterVector):
        values = values.values
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise ValueError("values must be a non-empty 1-D array")
    d = v.shape[0]
    k = min(d, math.ceil(spec.top_k * d))
    order = np.argsort(-np.abs(v), kind="stable")
    kept = np.sort(order[:k])
    m = float(np.max(np.abs(v[kept])))
    steps = (1 << bits) - 1
    if m == 0.0:
        codes = np.zeros(k, dtype=np.int64)
    else:
        step = 2.0 * m / steps
        codes = np.clip(np.rint((v[kept] + m) / step), 0, steps).astype(np.int64)
    return CompressedUpdate(d=d, indices=kept, codes=codes, bits=bits, scale=m)


def decompress(update: CompressedUpdate, d: int | None = None) -> np.ndarray:
    """Dense reconstruction; unselected coordinates are zero.

    `d` re-targets a decoded update whose true dimension was not on the wire.
    """
    dim = update.d if d is None else int(d)
    if len(update.indices) and int(update.indices[-1]) >= dim:
        raise CorruptMessageError(
            f"compressed index {int(update.indices[-1])} outside dimension {dim}"
        )
    out = np.zeros(dim, dtype=np.float64)
    if update.scale == 0.0 or len(update.indices) == 0:
        return out
    steps = (1 << update.bits) - 1
    step = 2.0 * update.scale / steps
    out[update.indices] = update.codes * step - update.scale
    return out


# ---------------------------------------------------------------------------
# personalization
# ---------------------------------------------------------------------------


def split_body_head(params: ParameterVector, arch: ArchDescriptor) -> tuple[np.ndarray, np.ndarray]:
    cut = arch.shared_parameter_count
    if cut == 0:
        raise ValueError("arch has no shared body to split")
    return params.values[:cut], params.values[cut:]


def personal_params(
    arch: ArchDescriptor, body: np.ndarray, state: PersonalState
) -> ParameterVector:
    """Assemble the personalized model: shared body plus the private head."""
    return ParameterVector(np.concatenate([body, state.head]))


def personalize_multitask(
    pkg: ModelPackage,
    shard: ClientShard,
    hp: Hyperparameters,
    state: PersonalState | None,
) -> tuple[ParameterVector, PersonalState]:
    """Train body and private head jointly; return (body update, new state).

    The first round adopts the broadcast head as the initial private head.
    Only the body segment ever leaves the client.
    """
    if pkg.arch.kind != "mlp":
        raise ValueError("multi-task personalization requires an mlp arch")
    body, bcast_head = split_body_head(pkg.params, pkg.arch)
    head = bcast_head if state is None else state.head
    start = ParameterVector(np.concatenate([body, head]))
    trained = local_train(start, pkg.arch, shard.train, hp)
    new_body, new_head = split_body_head(trained, pkg.arch)
    return ParameterVector(new_body), PersonalState(
        pkg.arch.shared_parameter_count, new_head
    )


# ---------------------------------------------------------------------------
# envelope construction and wire form
# ---------------------------------------------------------------------------


def _round_train_seed(base_seed: int, client_id: int, round_index: int) -> int:
    packed = struct.pack("<QII", base_seed & 0xFFFFFFFFFFFFFFFF, client_id, round_index)
    return wire.fnv1a64(packed)


def _payload_block_size(payload) -> int:
    if isinstance(payload, ParameterVector):
        return 8 * len(payload)
    return len(payload.indices) * (4 + wire.code_width(payload.bits)) + 8


def build_envelope(
    client_id: int,
    round_index: int,
    base_version_id: str,
    n_samples: int,
    payload_kind: str,
    payload,
    report: EvalReport,
) -> UpdateEnvelope:
    size = (
        wire.HEADER_SIZE
        + wire.BASE_VERSION_SIZE
        + 4  # n_samples u32
        + wire.eval_block_size(len(report.per_class_counts))
        + _payload_block_size(payload)
    )
    return UpdateEnvelope(
        client_id=client_id,
        round_index=round_index,
        base_version_id=base_version_id,
        n_samples=n_samples,
        payload_kind=payload_kind,
        payload=payload,
        local_eval=report,
        byte_size=size,
    )


def wire_update_kind(env: UpdateEnvelope) -> int:
    """The header kind code this envelope serializes under."""
    if env.payload_kind == PAYLOAD_DENSE:
        return wire.K_UPDATE_DENSE
    if env.payload_kind == PAYLOAD_MASKED:
        return wire.K_UPDATE_MASKED
    return wire.UPDATE_SPARSE_KIND_BY_BITS[env.payload.bits]


def encode_payload_body(payload) -> bytes:
    """Just the payload segment of the wire form, without header or metadata.

    This is the unit that gets content-hashed and archived: the bytes that
    actually enter aggregation.
    """
    if isinstance(payload, ParameterVector):
        return wire.params_bytes(payload.values)
    cu = payload
    width = wire.code_width(cu.bits)
    entry = struct.Struct("<IB" if width == 1 else "<IH")
    return b"".join(
        entry.pack(int(i), int(c)) for i, c in zip(cu.indices, cu.codes)
    ) + struct.pack("<d", cu.scale)


def decode_payload_body(update_kind: int, buf: bytes) -> ParameterVector | CompressedUpdate:
    """Inverse of encode_payload_body, given the wire kind that framed it.

    Sparse payloads come back with d set to the index upper bound; re-target
    against the model dimension before densifying.
    """
    if update_kind in (wire.K_UPDATE_DENSE, wire.K_UPDATE_MASKED):
        if len(buf) % 8:
            raise CorruptMessageError("dense payload length is not a multiple of 8")
        return ParameterVector(np.frombuffer(buf, dtype="<f8").copy())
    bits = wire.sparse_bits_for_update_kind(update_kind)
    if bits is None:
        raise CorruptMessageError(f"kind {update_kind} is not an update payload")
    width = wire.code_width(bits)
    entry = struct.Struct("<IB" if width == 1 else "<IH")
    if (len(buf) - 8) % entry.size or len(buf) < 8:
        raise CorruptMessageError("sparse payload length mismatch")
    count = (len(buf) - 8) // entry.size
    indices = np.empty(count, dtype=np.int64)
    codes = np.empty(count, dtype=np.int64)
    for i in range(count):
        ix, c = entry.unpack_from(buf, i * entry.size)
        indices[i] = ix
        codes[i] = c
    (scale,) = struct.unpack_from("<d", buf, count * entry.size)
    d = int(indices[-1]) + 1 if count else 1
    return CompressedUpdate(d=d, indices=indices, codes=codes, bits=bits, scale=scale)


def encode_envelope(env: UpdateEnvelope) -> bytes:
    """header | base version u32 | n_samples u32 | eval block | payload."""
    kind = wire_update_kind(env)
    count = (
        len(env.payload)
        if env.payload_kind in (PAYLOAD_DENSE, PAYLOAD_MASKED)
        else len(env.payload.indices)
    )
    body = encode_payload_body(env.payload)
    head = wire.encode_header(kind, env.round_index, env.client_id, count)
    meta = struct.pack(
        "<II", wire.parse_version(env.base_version_id), env.n_samples
    )
    ev = env.local_eval
    eval_block = wire.encode_eval_block(
        ev.loss, ev.accuracy, ev.n_samples, ev.per_class_counts, ev.degenerate
    )
    return head + meta + eval_block + body


def decode_envelope(buf: bytes) -> UpdateEnvelope:
    kind, rnd, sender, count = wire.decode_header(buf)
    offset = wire.HEADER_SIZE
    base_n, n_samples = struct.unpack_from("<II", buf, offset)
    offset += 8
    (loss, acc, ev_n, counts, degenerate), offset = wire.decode_eval_block(buf, offset)
    report = EvalReport(loss, acc, ev_n, tuple(counts), degenerate)
    if kind in (wire.K_UPDATE_DENSE, wire.K_UPDATE_MASKED):
        need = offset + 8 * count
        if len(buf) != need:
            raise CorruptMessageError("envelope payload length mismatch")
        values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).copy()
        payload = ParameterVector(values)
        payload_kind = PAYLOAD_DENSE if kind == wire.K_UPDATE_DENSE else PAYLOAD_MASKED
    else:
        bits = wire.sparse_bits_for_update_kind(kind)
        if bits is None:
            raise CorruptMessageError(f"kind {kind} is not an update envelope")
        width = wire.code_width(bits)
        entry = struct.Struct("<IB" if width == 1 else "<IH")
        need = offset + count * entry.size + 8
        if len(buf) != need:
            raise CorruptMessageError("envelope payload length mismatch")
        indices = np.empty(count, dtype=np.int64)
        codes = np.empty(count, dtype=np.int64)
        for i in range(count):
            ix, c = entry.unpack_from(buf, offset + i * entry.size)
            indices[i] = ix
            codes[i] = c
        (scale,) = struct.unpack_from("<d", buf, offset + count * entry.size)
        # d is not carried on the wire; fill with the index upper bound and let
        # the caller re-target against the model dimension
        payload = CompressedUpdate(
            d=int(indices[-1]) + 1, indices=indices, codes=codes, bits=bits, scale=scale
        )
        payload_kind = PAYLOAD_COMPRESSED
    return UpdateEnvelope(
        client_id=sender,
        round_index=rnd,
        base_version_id=wire.format_version(base_n),
        n_samples=n_samples,
        payload_kind=payload_kind,
        payload=payload,
        local_eval=report,
        byte_size=len(buf),
    )


# ---------------------------------------------------------------------------
# client runtime
# ---------------------------------------------------------------------------


class ClientRuntime:
    """Holds one client's shard, gate, compression choice, and personal state."""

    def __init__(
        self,
        client_id: int,
        shard: ClientShard,
        gate: GatePolicy | None = None,
        compression: CompressionSpec | None = None,
        multitask: bool = False,
    ) -> None:
        self.client_id = client_id
        self.shard = shard
        self.gate = gate or GatePolicy()
        self.compression = compression
        self.multitask = multitask
        self.personal: PersonalState | None = None

    def train_and_evaluate(
        self, pkg: ModelPackage, round_index: int
    ) -> tuple[ParameterVector, EvalReport] | Withheld:
        """Run local training; the result is the upload candidate (full
        parameters, or the body segment under multi-task) and its local eval."""
        hp = replace(
            pkg.hp, seed=_round_train_seed(pkg.hp.seed, self.client_id, round_index)
        )
        try:
            if self.multitask:
                body, self.personal = personalize_multitask(
                    pkg, self.shard, hp, self.personal
                )
                model = personal_params(pkg.arch, body.values, self.personal)
                report = evaluate(model, pkg.arch, self.shard.test)
                return body, report
            trained = local_train(pkg.params, pkg.arch, self.shard.train, hp)
            report = evaluate(trained, pkg.arch, self.shard.test)
            return trained, report
        except DivergenceError:
            return Withheld(self.client_id, round_index, WITHHELD_DIVERGENCE)

    def handle_broadcast(
        self, pkg: ModelPackage, round_index: int
    ) -> UpdateEnvelope | Withheld:
        """Full client step: train, evaluate, gate, package (maybe compressed)."""
        result = self.train_and_evaluate(pkg, round_index)
        if isinstance(result, Withheld):
            return result
        update, report = result
        if not upload_gate(report, self.gate):
            return Withheld(self.client_id, round_index, WITHHELD_GATE, report)
        if self.compression is not None:
            base = pkg.params.values
            if self.multitask:
                base = base[: pkg.arch.shared_parameter_count]
            delta = update.values - base
            payload = compress(delta, self.compression.top_k, self.compression.bits)
            payload_kind = PAYLOAD_COMPRESSED
        else:
            payload = update
            payload_kind = PAYLOAD_DENSE
        return build_envelope(
            self.client_id,
            round_index,
            pkg.version_id,
            len(self.shard.train),
            payload_kind,
            payload,
            report,
        )
