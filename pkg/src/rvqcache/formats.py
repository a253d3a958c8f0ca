"""Bit-exact serialization: codebook files, activation dumps, index blocks.

All multi-byte integers are little-endian and every file carries a trailing
CRC-32 over everything after the 6-byte magic+version prefix. Readers
validate magic, version, declared sizes and the checksum; malformed input is
rejected, never silently truncated. Byte layouts are tabulated in
docs/FORMATS.md.
"""

from __future__ import annotations

import struct
import zlib
from typing import Iterator

import numpy as np

from .quantizer import (
    GroupingKind,
    IndexPacking,
    QuantizedVector,
    QuantizerGeometry,
    ResidualQuantizer,
    index_bits,
)

__all__ = [
    "CodecError",
    "IntegrityError",
    "FormatVersionError",
    "FORMAT_VERSION",
    "pack_indices",
    "unpack_indices",
    "packed_size",
    "record_size",
    "encode_records",
    "decode_records",
    "save_quantizer",
    "load_quantizer",
    "write_activation_dump",
    "DumpWriter",
    "read_dump_header",
    "read_activation_dump",
    "BlockWriter",
    "read_block_header",
    "iter_packed_block",
    "BlockHeader",
]

FORMAT_VERSION = 1

_MAGIC_CODEBOOK = b"RVQC"
_MAGIC_DUMP = b"RVQA"
_MAGIC_BLOCK = b"RVQI"

_GROUPING_TAGS = {GroupingKind.CONTIGUOUS: 0, GroupingKind.STRIDED: 1}
_PACKING_TAGS = {IndexPacking.PACKED: 0, IndexPacking.BYTE16: 1}
_DTYPE_TAGS = {np.dtype(np.float16): 0, np.dtype(np.float32): 1}

_CRC_CHUNK = 1 << 20


class CodecError(Exception):
    """Base for all serialization errors."""


class IntegrityError(CodecError):
    """Checksum, magic, size or payload-validation failure."""


class FormatVersionError(CodecError):
    """File declares a format version this reader does not understand."""


# ---------------------------------------------------------------------------
# Sub-byte index packing
# ---------------------------------------------------------------------------


def packed_size(count: int, num_codes: int) -> int:
    """Bytes used by ``count`` packed indices drawn from ``num_codes`` codes."""
    return (count * index_bits(num_codes) + 7) // 8


def pack_indices(indices: np.ndarray, num_codes: int) -> bytes:
    """Pack indices at ``ceil(log2(num_codes))`` bits each, LSB-first.

    Bit k of the stream lands in bit ``k % 8`` of byte ``k // 8``; the
    stream is zero-padded to a byte boundary.
    """
    bits = index_bits(num_codes)
    flat = np.asarray(indices).reshape(-1)
    if flat.size == 0:
        return b""
    if flat.min() < 0 or flat.max() >= num_codes:
        raise ValueError(f"index out of range [0, {num_codes})")
    expanded = (flat.astype(np.uint64)[:, None] >> np.arange(bits, dtype=np.uint64)) & 1
    return np.packbits(expanded.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_indices(data: bytes, count: int, num_codes: int) -> np.ndarray:
    """Exact inverse of :func:`pack_indices` for ``count`` indices."""
    bits = index_bits(num_codes)
    expected = packed_size(count, num_codes)
    if len(data) != expected:
        raise ValueError(f"packed data is {len(data)} bytes, expected {expected}")
    if count == 0:
        return np.empty(0, dtype=np.int64)
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
    values = (raw[: count * bits].reshape(count, bits).astype(np.uint64) * weights).sum(axis=1)
    return values.astype(np.int64)


def _record_index_bytes(geometry: QuantizerGeometry, packing: IndexPacking) -> int:
    if packing is IndexPacking.PACKED:
        return geometry.packed_index_bytes
    return geometry.indices_per_vector * 2


def record_size(geometry: QuantizerGeometry, packing: IndexPacking = IndexPacking.PACKED) -> int:
    """Bytes of one stored vector: 2-byte half-precision std + index bytes."""
    return 2 + _record_index_bytes(geometry, packing)


def encode_records(
    stds: np.ndarray,
    indices: np.ndarray,
    geometry: QuantizerGeometry,
    packing: IndexPacking = IndexPacking.PACKED,
) -> bytes:
    """Serialize (n,) stds and (n, groups, stages) indices to record bytes."""
    stds = np.asarray(stds, dtype=np.float16)
    indices = np.asarray(indices)
    expected = (geometry.num_groups, geometry.num_codebooks)
    if indices.ndim != 3 or indices.shape[1:] != expected:
        raise ValueError(f"indices shape {indices.shape} does not match geometry {expected}")
    n = stds.shape[0]
    if n == 0:
        return b""
    flat = indices.reshape(n, -1)
    if flat.min() < 0 or flat.max() >= geometry.num_codes:
        raise ValueError(f"index out of range [0, {geometry.num_codes})")
    index_bytes = _record_index_bytes(geometry, packing)
    records = np.empty((n, 2 + index_bytes), dtype=np.uint8)
    records[:, :2] = stds.astype("<f2").view(np.uint8).reshape(n, 2)
    if packing is IndexPacking.PACKED:
        bits = geometry.bits_per_index
        expanded = (flat.astype(np.uint64)[:, :, None] >> np.arange(bits, dtype=np.uint64)) & 1
        records[:, 2:] = np.packbits(
            expanded.astype(np.uint8).reshape(n, -1), axis=1, bitorder="little"
        )
    else:
        records[:, 2:] = flat.astype("<u2").view(np.uint8).reshape(n, index_bytes)
    return records.tobytes()


def decode_records(
    raw: bytes,
    count: int,
    geometry: QuantizerGeometry,
    packing: IndexPacking = IndexPacking.PACKED,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse of :func:`encode_records` for ``count`` records."""
    rec_bytes = record_size(geometry, packing)
    if len(raw) != count * rec_bytes:
        raise ValueError(f"record buffer is {len(raw)} bytes, expected {count * rec_bytes}")
    if count == 0:
        shape = (0, geometry.num_groups, geometry.num_codebooks)
        return np.empty(0, dtype=np.float16), np.empty(shape, dtype=np.int32)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(count, rec_bytes)
    stds = records[:, :2].copy().view("<f2").reshape(count)
    per_vector = geometry.indices_per_vector
    if packing is IndexPacking.PACKED:
        bits = geometry.bits_per_index
        raw_bits = np.unpackbits(
            np.ascontiguousarray(records[:, 2:]), axis=1, bitorder="little"
        )[:, : per_vector * bits]
        weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
        flat = (
            (raw_bits.reshape(count, per_vector, bits).astype(np.uint64) * weights)
            .sum(axis=2)
            .astype(np.int64)
        )
    else:
        flat = records[:, 2:].copy().view("<u2").reshape(count, per_vector).astype(np.int64)
    if flat.min() < 0 or flat.max() >= geometry.num_codes:
        raise ValueError(f"record holds a code index outside [0, {geometry.num_codes})")
    indices = flat.reshape(count, geometry.num_groups, geometry.num_codebooks)
    return stds.astype(np.float16), indices.astype(np.int32)


# ---------------------------------------------------------------------------
# Shared header plumbing
# ---------------------------------------------------------------------------


def _check_prefix(blob: bytes, magic: bytes, kind: str) -> int:
    if len(blob) < 6:
        raise IntegrityError(f"{kind}: file shorter than its fixed header")
    if blob[:4] != magic:
        raise IntegrityError(f"{kind}: bad magic {blob[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{kind}: file is format version {version}, reader supports {FORMAT_VERSION}"
        )
    return version


def _check_crc(blob: bytes, kind: str) -> bytes:
    body, (stored,) = blob[6:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored:
        raise IntegrityError(f"{kind}: CRC-32 mismatch, file is corrupt")
    return body


def _enum_from_tag(tags: dict, tag: int, kind: str, what: str):
    for member, value in tags.items():
        if value == tag:
            return member
    raise IntegrityError(f"{kind}: unknown {what} tag {tag}")


# ---------------------------------------------------------------------------
# Codebook files
# ---------------------------------------------------------------------------


def save_quantizer(path, quantizer: ResidualQuantizer) -> None:
    """Write a codebook file; ``load_quantizer`` restores it bit-exactly."""
    geometry = quantizer.geometry
    body = struct.pack(
        "<IIIIB",
        geometry.dim,
        geometry.code_dim,
        geometry.num_codebooks,
        geometry.num_codes,
        _GROUPING_TAGS[quantizer.grouping],
    )
    body += np.ascontiguousarray(quantizer.codebooks, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CODEBOOK)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_quantizer(path) -> ResidualQuantizer:
    with open(path, "rb") as fh:
        blob = fh.read()
    _check_prefix(blob, _MAGIC_CODEBOOK, "codebook file")
    if len(blob) < 6 + 17 + 4:
        raise IntegrityError("codebook file: truncated header")
    dim, code_dim, stages, codes, grouping_tag = struct.unpack_from("<IIIIB", blob, 6)
    expected = 6 + 17 + stages * codes * code_dim * 4 + 4
    if len(blob) != expected:
        raise IntegrityError(
            f"codebook file: length {len(blob)} does not match declared geometry ({expected})"
        )
    body = _check_crc(blob, "codebook file")
    grouping = _enum_from_tag(_GROUPING_TAGS, grouping_tag, "codebook file", "grouping")
    values = np.frombuffer(body[17:], dtype="<f4").reshape(stages, codes, code_dim)
    try:
        geometry = QuantizerGeometry(dim, code_dim, stages, codes)
        return ResidualQuantizer(geometry, grouping, values.astype(np.float32))
    except ValueError as exc:
        raise IntegrityError(f"codebook file: invalid contents: {exc}") from exc


# ---------------------------------------------------------------------------
# Activation dumps
# ---------------------------------------------------------------------------


_DUMP_FIXED = struct.Struct("<IQB")


class DumpWriter:
    """Streaming activation-dump writer with incremental CRC.

    The declared count is fixed up front; ``close`` fails if the rows
    written do not add up to it.
    """

    def __init__(self, path, dim: int, count: int, dtype=np.float32):
        self._dtype = np.dtype(dtype)
        if self._dtype not in _DTYPE_TAGS:
            raise ValueError(f"unsupported dump dtype {self._dtype}")
        self._dim = int(dim)
        self._count = int(count)
        self._written = 0
        self._fh = open(path, "wb")
        head = _DUMP_FIXED.pack(self._dim, self._count, _DTYPE_TAGS[self._dtype])
        self._crc = zlib.crc32(head)
        self._fh.write(_MAGIC_DUMP)
        self._fh.write(struct.pack("<H", FORMAT_VERSION))
        self._fh.write(head)

    def write(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self._dim:
            raise ValueError(f"expected (n, {self._dim}) rows, got shape {rows.shape}")
        payload = np.ascontiguousarray(rows, dtype=self._dtype.newbyteorder("<")).tobytes()
        self._crc = zlib.crc32(payload, self._crc)
        self._fh.write(payload)
        self._written += rows.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            if self._written != self._count:
                raise ValueError(
                    f"dump declared {self._count} vectors but {self._written} were written"
                )
            self._fh.write(struct.pack("<I", self._crc))
        finally:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()
        return False


def write_activation_dump(path, vectors: np.ndarray, dtype=np.float32) -> None:
    """Write a whole (n, dim) array as an activation dump."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise ValueError(f"expected a (n, dim) matrix, got shape {vectors.shape}")
    with DumpWriter(path, vectors.shape[1], vectors.shape[0], dtype=dtype) as writer:
        writer.write(vectors)


def read_dump_header(path) -> tuple[int, int, np.dtype]:
    """Validate the dump framing and return (dim, count, dtype)."""
    with open(path, "rb") as fh:
        prefix = fh.read(6 + _DUMP_FIXED.size)
        _check_prefix(prefix, _MAGIC_DUMP, "activation dump")
        if len(prefix) < 6 + _DUMP_FIXED.size:
            raise IntegrityError("activation dump: truncated header")
        dim, count, dtype_tag = _DUMP_FIXED.unpack_from(prefix, 6)
        dtype = _enum_from_tag(_DTYPE_TAGS, dtype_tag, "activation dump", "dtype")
        fh.seek(0, 2)
        size = fh.tell()
    if dim == 0:
        raise IntegrityError("activation dump: dimension must be positive")
    expected = 6 + _DUMP_FIXED.size + count * dim * dtype.itemsize + 4
    if size != expected:
        raise IntegrityError(
            f"activation dump: length {size} does not match declared count ({expected})"
        )
    return dim, count, dtype


def read_activation_dump(path, chunk_vectors: int = 4096) -> Iterator[np.ndarray]:
    """Stream the dump's vectors as float32 rows without loading it whole.

    The CRC is accumulated while streaming and verified when the last vector
    has been yielded; consuming the full stream therefore authenticates the
    file. Framing and length errors are raised before any data is yielded.
    """
    dim, count, dtype = read_dump_header(path)
    with open(path, "rb") as fh:
        fh.seek(6)
        crc = zlib.crc32(fh.read(_DUMP_FIXED.size))
        remaining = count
        row_bytes = dim * dtype.itemsize
        while remaining > 0:
            take = min(chunk_vectors, remaining)
            raw = fh.read(take * row_bytes)
            if len(raw) != take * row_bytes:
                raise IntegrityError("activation dump: unexpected end of file")
            crc = zlib.crc32(raw, crc)
            rows = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(take, dim)
            for row in rows.astype(np.float32):
                yield row
            remaining -= take
        (stored,) = struct.unpack("<I", fh.read(4))
    if crc != stored:
        raise IntegrityError("activation dump: CRC-32 mismatch, file is corrupt")


# ---------------------------------------------------------------------------
# Packed index blocks
# ---------------------------------------------------------------------------


_BLOCK_FIXED = struct.Struct("<IIIIBBQ")


class BlockHeader:
    """Geometry echo and record layout of a packed index block."""

    def __init__(self, geometry, grouping, packing, count):
        self.geometry = geometry
        self.grouping = grouping
        self.packing = packing
        self.count = count

    @property
    def record_bytes(self) -> int:
        return 2 + _record_index_bytes(self.geometry, self.packing)


class BlockWriter:
    """Streaming writer for encoded vectors: per-token std + packed indices."""

    def __init__(self, path, quantizer: ResidualQuantizer, packing: IndexPacking, count: int):
        geometry = quantizer.geometry
        if packing is IndexPacking.BYTE16 and geometry.num_codes > 1 << 16:
            raise ValueError("byte16 packing cannot hold more than 65536 codes")
        self._geometry = geometry
        self._packing = packing
        self._count = int(count)
        self._written = 0
        self._fh = open(path, "wb")
        head = _BLOCK_FIXED.pack(
            geometry.dim,
            geometry.code_dim,
            geometry.num_codebooks,
            geometry.num_codes,
            _GROUPING_TAGS[quantizer.grouping],
            _PACKING_TAGS[packing],
            self._count,
        )
        self._crc = zlib.crc32(head)
        self._fh.write(_MAGIC_BLOCK)
        self._fh.write(struct.pack("<H", FORMAT_VERSION))
        self._fh.write(head)

    def append(self, quantized: QuantizedVector) -> None:
        self.append_many(
            np.asarray([quantized.std_scale], dtype=np.float16), quantized.indices[None, :, :]
        )

    def append_many(self, stds: np.ndarray, indices: np.ndarray) -> None:
        """Append (n,) stds with (n, groups, stages) indices."""
        stds = np.asarray(stds, dtype=np.float16)
        payload = encode_records(stds, indices, self._geometry, self._packing)
        self._crc = zlib.crc32(payload, self._crc)
        self._fh.write(payload)
        self._written += stds.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            if self._written != self._count:
                raise ValueError(
                    f"block declared {self._count} records but {self._written} were written"
                )
            self._fh.write(struct.pack("<I", self._crc))
        finally:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()
        return False


def read_block_header(path) -> BlockHeader:
    """Validate block framing and return the geometry echo."""
    with open(path, "rb") as fh:
        prefix = fh.read(6 + _BLOCK_FIXED.size)
        _check_prefix(prefix, _MAGIC_BLOCK, "index block")
        if len(prefix) < 6 + _BLOCK_FIXED.size:
            raise IntegrityError("index block: truncated header")
        dim, code_dim, stages, codes, grouping_tag, packing_tag, count = _BLOCK_FIXED.unpack_from(
            prefix, 6
        )
        fh.seek(0, 2)
        size = fh.tell()
    grouping = _enum_from_tag(_GROUPING_TAGS, grouping_tag, "index block", "grouping")
    packing = _enum_from_tag(_PACKING_TAGS, packing_tag, "index block", "packing")
    try:
        geometry = QuantizerGeometry(dim, code_dim, stages, codes)
    except ValueError as exc:
        raise IntegrityError(f"index block: invalid geometry: {exc}") from exc
    header = BlockHeader(geometry, grouping, packing, count)
    expected = 6 + _BLOCK_FIXED.size + count * header.record_bytes + 4
    if size != expected:
        raise IntegrityError(
            f"index block: length {size} does not match declared count ({expected})"
        )
    return header


def iter_packed_block(path, chunk_records: int = 4096):
    """Stream (stds, indices) batches from a block; CRC verified at the end.

    Yields pairs of ``stds`` (n,) float16 and ``indices`` (n, groups, stages)
    int32 in storage order.
    """
    header = read_block_header(path)
    record_bytes = header.record_bytes
    with open(path, "rb") as fh:
        fh.seek(6)
        crc = zlib.crc32(fh.read(_BLOCK_FIXED.size))
        remaining = header.count
        while remaining > 0:
            take = min(chunk_records, remaining)
            raw = fh.read(take * record_bytes)
            if len(raw) != take * record_bytes:
                raise IntegrityError("index block: unexpected end of file")
            crc = zlib.crc32(raw, crc)
            try:
                stds, indices = decode_records(raw, take, header.geometry, header.packing)
            except ValueError as exc:
                raise IntegrityError(f"index block: {exc}") from exc
            yield stds, indices
            remaining -= take
        (stored,) = struct.unpack("<I", fh.read(4))
    if crc != stored:
        raise IntegrityError("index block: CRC-32 mismatch, file is corrupt")
