"""Canonical wire encoding and content hashing.

Every message starts with a 16-byte little-endian header:

    kind u32 | round u32 | sender u32 | count u32

followed by the payload. Dense payloads are `count` float64 values. Sparse
payloads are `count` entries of (index u32, quantized code of ceil(bits/8)
bytes) followed by one float64 scale. Update envelopes insert a base-version
u32 and a fixed evaluation block between header and payload. The encodings
are bit-exact: equal inputs produce equal bytes.

Content hashes are 64-bit FNV-1a over these canonical bytes, rendered as 16
hex digits.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CorruptMessageError

# message kinds
K_PARAMS = 1  # bare dense parameter vector
K_SPARSE4 = 2  # bare sparse update, 4-bit codes
K_SPARSE8 = 3
K_SPARSE16 = 4
K_BROADCAST = 5  # model package: header | hyperparameter block | dense params
K_UPDATE_DENSE = 6  # envelope: header | base u32 | eval block | payload
K_UPDATE_MASKED = 7
K_UPDATE_SPARSE4 = 8
K_UPDATE_SPARSE8 = 9
K_UPDATE_SPARSE16 = 10

_SPARSE_BITS = {K_SPARSE4: 4, K_SPARSE8: 8, K_SPARSE16: 16}
_UPDATE_SPARSE_BITS = {K_UPDATE_SPARSE4: 4, K_UPDATE_SPARSE8: 8, K_UPDATE_SPARSE16: 16}
SPARSE_KIND_BY_BITS = {4: K_SPARSE4, 8: K_SPARSE8, 16: K_SPARSE16}
UPDATE_SPARSE_KIND_BY_BITS = {4: K_UPDATE_SPARSE4, 8: K_UPDATE_SPARSE8, 16: K_UPDATE_SPARSE16}

# wire sender ids for non-client actors; clients use their own id
SERVER_SENDER = 0xFFFFFFFF
EDGE_SENDER_BASE = 0xFFFF0000

_HEADER = struct.Struct("<IIII")
_F64 = struct.Struct("<d")
_HP_BLOCK = struct.Struct("<dIIdQ")  # learning_rate, epochs, batch_size, l2, seed
_EVAL_FIXED = struct.Struct("<ddIII")  # loss, accuracy, n_samples, num_classes, degenerate

HEADER_SIZE = _HEADER.size
HP_BLOCK_SIZE = _HP_BLOCK.size
BASE_VERSION_SIZE = 4


def code_width(bits: int) -> int:
    if bits not in (4, 8, 16):
        raise ValueError("bits must be one of 4, 8, 16")
    return (bits + 7) // 8


# ---------------------------------------------------------------------------
# sizes
# ---------------------------------------------------------------------------


def dense_message_size(d: int) -> int:
    return HEADER_SIZE + 8 * d


def sparse_message_size(k: int, bits: int) -> int:
    return HEADER_SIZE + k * (4 + code_width(bits)) + 8


def eval_block_size(num_classes: int) -> int:
    return _EVAL_FIXED.size + 4 * num_classes


def broadcast_message_size(d: int) -> int:
    return HEADER_SIZE + HP_BLOCK_SIZE + 8 * d


def envelope_message_size(num_classes: int, payload_size: int) -> int:
    """payload_size excludes the shared header (the envelope owns the header)."""
    return HEADER_SIZE + BASE_VERSION_SIZE + eval_block_size(num_classes) + payload_size


# ---------------------------------------------------------------------------
# hashing / version ids
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def hash_hex(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def params_bytes(values: np.ndarray) -> bytes:
    """Canonical little-endian float64 encoding of a flat value array."""
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def params_hash(values: np.ndarray) -> str:
    return hash_hex(params_bytes(values))


def format_version(n: int) -> str:
    return f"g{n}"


def parse_version(version_id: str) -> int:
    if not version_id.startswith("g"):
        raise ValueError(f"bad version id {version_id!r}")
    return int(version_id[1:])


# ---------------------------------------------------------------------------
# primitive encoders
# ---------------------------------------------------------------------------


def encode_header(kind: int, round_index: int, sender: int, count: int) -> bytes:
    return _HEADER.pack(kind, round_index, sender, count)


def decode_header(buf: bytes) -> tuple[int, int, int, int]:
    if len(buf) < HEADER_SIZE:
        raise CorruptMessageError("message shorter than header")
    return _HEADER.unpack_from(buf, 0)


def encode_dense(kind: int, round_index: int, sender: int, values: np.ndarray) -> bytes:
    body = params_bytes(values)
    return encode_header(kind, round_index, sender, len(values)) + body


def decode_dense(buf: bytes) -> tuple[int, int, int, np.ndarray]:
    kind, rnd, sender, count = decode_header(buf)
    expect = dense_message_size(count)
    if len(buf) != expect:
        raise CorruptMessageError(f"dense message length {len(buf)}, expected {expect}")
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=HEADER_SIZE).copy()
    return kind, rnd, sender, values


def _sparse_body(indices: np.ndarray, codes: np.ndarray, bits: int, scale: float) -> bytes:
    width = code_width(bits)
    entry = struct.Struct("<IB" if width == 1 else "<IH")
    parts = [entry.pack(int(i), int(c)) for i, c in zip(indices, codes)]
    parts.append(_F64.pack(scale))
    return b"".join(parts)


def encode_sparse(
    kind: int,
    round_index: int,
    sender: int,
    indices: np.ndarray,
    codes: np.ndarray,
    bits: int,
    scale: float,
) -> bytes:
    if len(indices) != len(codes):
        raise ValueError("indices and codes disagree on length")
    head = encode_header(kind, round_index, sender, len(indices))
    return head + _sparse_body(indices, codes, bits, scale)


def _decode_sparse_body(buf: bytes, offset: int, count: int, bits: int):
    width = code_width(bits)
    entry = struct.Struct("<IB" if width == 1 else "<IH")
    need = offset + count * entry.size + 8
    if len(buf) != need:
        raise CorruptMessageError(f"sparse message length {len(buf)}, expected {need}")
    indices = np.empty(count, dtype=np.int64)
    codes = np.empty(count, dtype=np.int64)
    for i in range(count):
        idx, code = entry.unpack_from(buf, offset + i * entry.size)
        indices[i] = idx
        codes[i] = code
    (scale,) = _F64.unpack_from(buf, offset + count * entry.size)
    return indices, codes, scale


def decode_sparse(buf: bytes) -> tuple[int, int, int, np.ndarray, np.ndarray, int, float]:
    kind, rnd, sender, count = decode_header(buf)
    if kind not in _SPARSE_BITS:
        raise CorruptMessageError(f"kind {kind} is not a bare sparse message")
    bits = _SPARSE_BITS[kind]
    indices, codes, scale = _decode_sparse_body(buf, HEADER_SIZE, count, bits)
    return kind, rnd, sender, indices, codes, bits, scale


def encode_hp_block(learning_rate: float, epochs: int, batch_size: int, l2: float, seed: int) -> bytes:
    return _HP_BLOCK.pack(learning_rate, epochs, batch_size, l2, seed)


def decode_hp_block(buf: bytes, offset: int = 0):
    return _HP_BLOCK.unpack_from(buf, offset)


def encode_eval_block(
    loss: float,
    accuracy: float,
    n_samples: int,
    per_class_counts: tuple[int, ...],
    degenerate: bool,
) -> bytes:
    fixed = _EVAL_FIXED.pack(loss, accuracy, n_samples, len(per_class_counts), int(degenerate))
    return fixed + struct.pack(f"<{len(per_class_counts)}I", *per_class_counts)


def decode_eval_block(buf: bytes, offset: int):
    loss, accuracy, n_samples, k, degenerate = _EVAL_FIXED.unpack_from(buf, offset)
    counts = struct.unpack_from(f"<{k}I", buf, offset + _EVAL_FIXED.size)
    return (loss, accuracy, n_samples, counts, bool(degenerate)), offset + _EVAL_FIXED.size + 4 * k


def sparse_bits_for_update_kind(kind: int) -> int | None:
    return _UPDATE_SPARSE_BITS.get(kind)
