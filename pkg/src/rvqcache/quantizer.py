"""Residual vector quantization codec for activation vectors.

Encoding a vector: scale it by its standard deviation, split the channels
into groups, then quantize every group with the same greedy multi-stage
residual quantizer. Decoding sums the selected codes per group, restores
the channel order and multiplies by the stored scale.

All search is exact: at every stage the nearest code is the argmin of the
single-precision squared Euclidean distance over the whole codebook, with
ties broken toward the lowest index. Encode and decode are pure functions
of immutable quantizer state and are safe to call concurrently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SIGMA_MIN",
    "GroupingKind",
    "IndexPacking",
    "QuantizerGeometry",
    "QuantizedVector",
    "ResidualQuantizer",
    "channel_permutation",
    "compression_rate",
    "decode",
    "decode_batch",
    "decode_groups",
    "encode",
    "encode_batch",
    "encode_groups",
    "index_bits",
    "rvq_decode_group",
    "rvq_encode_group",
    "scale_and_group",
    "standardize_rows",
]

# Scale floor for zero-variance vectors; applied before the half-precision
# rounding of the stored scale.
SIGMA_MIN = 1e-6

_F32_EPS = float(np.finfo(np.float32).eps)

# Below this many distance evaluations (rows * codes * dims) a direct scan
# beats the BLAS-pruned search; both return identical indices.
_DIRECT_SCAN_LIMIT = 1 << 18

# Temporary buffer budget (f32 elements) for the chunked direct scan.
_CHUNK_TARGET = 1 << 22


class GroupingKind(enum.Enum):
    """How channels of a vector are gathered into code-sized groups."""

    CONTIGUOUS = "contiguous"
    STRIDED = "strided"


class IndexPacking(enum.Enum):
    """Storage layout for code indices: sub-byte packed or 16-bit words."""

    PACKED = "packed"
    BYTE16 = "byte16"


def index_bits(num_codes: int) -> int:
    """Bits needed to store one code index, at least 1 even for a single code."""
    if num_codes < 1:
        raise ValueError(f"num_codes must be >= 1, got {num_codes}")
    return max(1, math.ceil(math.log2(num_codes)))


@dataclass(frozen=True)
class QuantizerGeometry:
    """Shape of a residual quantizer.

    dim: channels per input vector
    code_dim: channels per group (= dimension of every code)
    num_codebooks: residual stages
    num_codes: codes per stage codebook
    """

    dim: int
    code_dim: int
    num_codebooks: int
    num_codes: int

    def __post_init__(self):
        if self.code_dim < 1 or self.num_codebooks < 1 or self.num_codes < 1:
            raise ValueError(
                "code_dim, num_codebooks and num_codes must all be >= 1, got "
                f"{self.code_dim}, {self.num_codebooks}, {self.num_codes}"
            )
        if self.dim < 1 or self.dim % self.code_dim != 0:
            raise ValueError(
                f"dim ({self.dim}) must be a positive multiple of code_dim ({self.code_dim})"
            )

    @property
    def num_groups(self) -> int:
        return self.dim // self.code_dim

    @property
    def bits_per_index(self) -> int:
        return index_bits(self.num_codes)

    @property
    def indices_per_vector(self) -> int:
        return self.num_groups * self.num_codebooks

    @property
    def packed_index_bytes(self) -> int:
        """Bytes of sub-byte-packed indices for one vector, byte aligned."""
        return (self.indices_per_vector * self.bits_per_index + 7) // 8


def channel_permutation(geometry: QuantizerGeometry, kind: GroupingKind) -> np.ndarray:
    """Source channel for each slot of the group-major grouped layout.

    ``grouped[j * code_dim + t] = x[perm[j * code_dim + t]]`` where j is the
    group and t the slot. Contiguous grouping takes adjacent channel blocks;
    strided grouping takes channels spaced ``num_groups`` apart, so group j
    holds channels ``{j, j + s, ..., j + (code_dim - 1) * s}`` for
    ``s = num_groups``.
    """
    if kind is GroupingKind.CONTIGUOUS:
        return np.arange(geometry.dim, dtype=np.int64)
    stride = geometry.num_groups
    groups = np.arange(stride, dtype=np.int64)[:, None]
    slots = np.arange(geometry.code_dim, dtype=np.int64)[None, :]
    return (groups + slots * stride).reshape(-1)


def _validate_codebooks(codebooks: np.ndarray) -> np.ndarray:
    codebooks = np.asarray(codebooks, dtype=np.float32)
    if codebooks.ndim != 3:
        raise ValueError(
            f"codebooks must have shape (stages, codes, code_dim), got {codebooks.shape}"
        )
    if not np.all(np.isfinite(codebooks)):
        raise ValueError("codebooks contain non-finite values")
    return codebooks


@dataclass(frozen=True)
class ResidualQuantizer:
    """Frozen per-stream quantizer: geometry, grouping and stage codebooks.

    ``codebooks`` has shape (num_codebooks, num_codes, code_dim), float32.
    """

    geometry: QuantizerGeometry
    grouping: GroupingKind
    codebooks: np.ndarray

    def __post_init__(self):
        codebooks = _validate_codebooks(self.codebooks)
        expected = (
            self.geometry.num_codebooks,
            self.geometry.num_codes,
            self.geometry.code_dim,
        )
        if codebooks.shape != expected:
            raise ValueError(
                f"codebooks shape {codebooks.shape} does not match geometry {expected}"
            )
        object.__setattr__(self, "codebooks", codebooks)


@dataclass(frozen=True)
class QuantizedVector:
    """One encoded vector: half-precision scale plus a (group, stage) index matrix."""

    std_scale: np.float16
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "std_scale", np.float16(self.std_scale))
        indices = np.asarray(self.indices, dtype=np.int32)
        if indices.ndim != 2:
            raise ValueError(f"indices must be a (groups, stages) matrix, got {indices.shape}")
        object.__setattr__(self, "indices", indices)


# ---------------------------------------------------------------------------
# Scaling and grouping
# ---------------------------------------------------------------------------


def standardize_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row population std (clamped, rounded to f16) and the scaled rows.

    The rows are divided by the half-precision value of the std so encode and
    decode use bit-identical scales.
    """
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError(f"expected a (n, dim) matrix, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise ValueError("input contains non-finite values")
    stds = np.maximum(rows.std(axis=1), np.float32(SIGMA_MIN)).astype(np.float16)
    scaled = rows / stds.astype(np.float32)[:, None]
    return stds, scaled


def scale_and_group(
    x: np.ndarray, geometry: QuantizerGeometry, grouping: GroupingKind
) -> tuple[np.float16, np.ndarray]:
    """Scale one vector by its std and gather channels into groups.

    Returns the half-precision scale and a (num_groups, code_dim) float32
    matrix. Zero-variance vectors take the clamped scale ``SIGMA_MIN``.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1 or x.shape[0] != geometry.dim:
        raise ValueError(f"expected a vector of {geometry.dim} channels, got shape {x.shape}")
    stds, scaled = standardize_rows(x[None, :])
    perm = channel_permutation(geometry, grouping)
    groups = scaled[0, perm].reshape(geometry.num_groups, geometry.code_dim)
    return stds[0], groups


# ---------------------------------------------------------------------------
# Nearest-code search
# ---------------------------------------------------------------------------


def _nearest_code_direct(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Exhaustive argmin of f32 squared distances, lowest index on ties."""
    n = vectors.shape[0]
    num_codes, code_dim = codebook.shape
    out = np.empty(n, dtype=np.int64)
    chunk = max(1, _CHUNK_TARGET // (num_codes * code_dim))
    for start in range(0, n, chunk):
        block = vectors[start : start + chunk]
        diff = block[:, None, :] - codebook[None, :, :]
        np.square(diff, out=diff)
        out[start : start + chunk] = np.argmin(diff.sum(axis=2), axis=1)
    return out


def _nearest_code_pruned(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Same result as the direct scan, pruned by a BLAS distance estimate.

    The expanded form ||v||^2 - 2 v.c + ||c||^2 ranks candidates cheaply but
    is not the exact f32 scan value, so every code whose estimate falls
    within a conservative rounding margin of the minimum is re-scored with
    the exact squared distance before the final argmin. The margin bounds
    the f32 rounding error of both computations, hence the returned index is
    bit-identical to the exhaustive scan's.
    """
    sq_v = np.square(vectors).sum(axis=1)
    sq_c = np.square(codebook).sum(axis=1)
    approx = sq_v[:, None] - 2.0 * (vectors @ codebook.T) + sq_c[None, :]
    best = np.argmin(approx, axis=1)
    best_val = np.take_along_axis(approx, best[:, None], axis=1)[:, 0]
    # |estimate - exact scan| <= ~80 eps (||v|| + ||c||)^2 for code_dim <= 512;
    # 1024 eps leaves an order-of-magnitude safety factor.
    margin = 1024.0 * _F32_EPS * (np.sqrt(sq_v) + math.sqrt(float(sq_c.max()))) ** 2
    threshold = best_val + margin
    ambiguous = np.nonzero((approx <= threshold[:, None]).sum(axis=1) > 1)[0]
    for i in ambiguous:
        cand = np.nonzero(approx[i] <= threshold[i])[0]
        exact = np.square(codebook[cand] - vectors[i]).sum(axis=1)
        best[i] = cand[np.argmin(exact)]
    return best


def _nearest_code(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest code per row; exact f32 argmin either path."""
    if vectors.size == 0:
        return np.empty(0, dtype=np.int64)
    work = vectors.shape[0] * codebook.shape[0] * codebook.shape[1]
    if work <= _DIRECT_SCAN_LIMIT:
        return _nearest_code_direct(vectors, codebook)
    return _nearest_code_pruned(vectors, codebook)


# ---------------------------------------------------------------------------
# Group-level encode / decode
# ---------------------------------------------------------------------------


def encode_groups(
    groups: np.ndarray, codebooks: np.ndarray, want_stage_inputs: bool = False
):
    """Greedy multi-stage encoding of standardized group vectors.

    All stages run in one pass over a running residual; nothing but the
    residual is materialized unless ``want_stage_inputs`` asks for the
    per-stage inputs (the trainer needs them for its statistics).

    Returns ``indices`` of shape (n, stages); with ``want_stage_inputs``
    also returns ``stage_inputs`` (stages, n, code_dim) and the final
    residual (n, code_dim).
    """
    codebooks = np.asarray(codebooks, dtype=np.float32)
    num_stages = codebooks.shape[0]
    groups = np.asarray(groups, dtype=np.float32)
    n = groups.shape[0]
    indices = np.empty((n, num_stages), dtype=np.int32)
    residual = groups.copy()
    stage_inputs = (
        np.empty((num_stages, n, codebooks.shape[2]), dtype=np.float32)
        if want_stage_inputs
        else None
    )
    for stage in range(num_stages):
        if stage_inputs is not None:
            stage_inputs[stage] = residual
        chosen = _nearest_code(residual, codebooks[stage])
        indices[:, stage] = chosen
        residual -= codebooks[stage][chosen]
    if want_stage_inputs:
        return indices, stage_inputs, residual
    return indices


def decode_groups(indices: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Sum of the selected codes per group; pure lookup, no search."""
    codebooks = np.asarray(codebooks, dtype=np.float32)
    indices = np.asarray(indices)
    num_stages, num_codes, code_dim = codebooks.shape
    if indices.ndim != 2 or indices.shape[1] != num_stages:
        raise ValueError(f"indices shape {indices.shape} does not match {num_stages} stages")
    if indices.size and (indices.min() < 0 or indices.max() >= num_codes):
        raise ValueError(f"code index out of range [0, {num_codes})")
    out = np.zeros((indices.shape[0], code_dim), dtype=np.float32)
    for stage in range(num_stages):
        out += codebooks[stage][indices[:, stage]]
    return out


def rvq_encode_group(z: np.ndarray, codebooks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode one group vector; also report the residual norm around every stage.

    Returns the per-stage indices and ``norms`` of length stages + 1: the
    residual Euclidean norm before each stage and after the last.
    """
    codebooks = _validate_codebooks(codebooks)
    num_stages, _, code_dim = codebooks.shape
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 1 or z.shape[0] != code_dim:
        raise ValueError(f"expected a group vector of {code_dim} values, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("group vector contains non-finite values")
    indices = np.empty(num_stages, dtype=np.int32)
    norms = np.empty(num_stages + 1, dtype=np.float32)
    residual = z.copy()
    for stage in range(num_stages):
        norms[stage] = np.sqrt(np.square(residual).sum())
        chosen = int(_nearest_code(residual[None, :], codebooks[stage])[0])
        indices[stage] = chosen
        residual -= codebooks[stage][chosen]
    norms[num_stages] = np.sqrt(np.square(residual).sum())
    return indices, norms


def rvq_decode_group(indices: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Decode one group: sum the stage-selected codes."""
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ValueError(f"expected one index per stage, got shape {indices.shape}")
    return decode_groups(indices[None, :], codebooks)[0]


# ---------------------------------------------------------------------------
# Vector-level encode / decode
# ---------------------------------------------------------------------------


def encode(x: np.ndarray, quantizer: ResidualQuantizer) -> QuantizedVector:
    """Encode one vector: scale, group, then greedy residual quantization."""
    std, groups = scale_and_group(x, quantizer.geometry, quantizer.grouping)
    indices = encode_groups(groups, quantizer.codebooks)
    return QuantizedVector(std_scale=std, indices=indices)


def decode(q: QuantizedVector, quantizer: ResidualQuantizer) -> np.ndarray:
    """Invert :func:`encode` up to quantization error."""
    geometry = quantizer.geometry
    expected = (geometry.num_groups, geometry.num_codebooks)
    if q.indices.shape != expected:
        raise ValueError(f"indices shape {q.indices.shape} does not match geometry {expected}")
    std = np.float16(q.std_scale)
    if not np.isfinite(std) or std < 0:
        raise ValueError(f"std_scale must be finite and non-negative, got {std}")
    recon = decode_groups(q.indices, quantizer.codebooks)
    perm = channel_permutation(geometry, quantizer.grouping)
    out = np.empty(geometry.dim, dtype=np.float32)
    out[perm] = recon.reshape(-1)
    out *= np.float32(std)
    return out


def encode_batch(rows: np.ndarray, quantizer: ResidualQuantizer) -> tuple[np.ndarray, np.ndarray]:
    """Encode many vectors at once; identical results to per-vector encode.

    Returns stds (n,) float16 and indices (n, groups, stages) int32.
    """
    geometry = quantizer.geometry
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[1] != geometry.dim:
        raise ValueError(f"expected (n, {geometry.dim}) rows, got shape {rows.shape}")
    stds, scaled = standardize_rows(rows)
    perm = channel_permutation(geometry, quantizer.grouping)
    grouped = scaled[:, perm].reshape(-1, geometry.code_dim)
    indices = encode_groups(grouped, quantizer.codebooks)
    return stds, indices.reshape(rows.shape[0], geometry.num_groups, geometry.num_codebooks)


def decode_batch(
    stds: np.ndarray, indices: np.ndarray, quantizer: ResidualQuantizer
) -> np.ndarray:
    """Decode many vectors at once; identical results to per-vector decode."""
    geometry = quantizer.geometry
    indices = np.asarray(indices, dtype=np.int32)
    expected = (geometry.num_groups, geometry.num_codebooks)
    if indices.ndim != 3 or indices.shape[1:] != expected:
        raise ValueError(f"indices shape {indices.shape} does not match geometry {expected}")
    n = indices.shape[0]
    recon = decode_groups(indices.reshape(-1, geometry.num_codebooks), quantizer.codebooks)
    perm = channel_permutation(geometry, quantizer.grouping)
    out = np.empty((n, geometry.dim), dtype=np.float32)
    out[:, perm] = recon.reshape(n, geometry.dim)
    out *= np.asarray(stds, dtype=np.float16).astype(np.float32)[:, None]
    return out


# ---------------------------------------------------------------------------
# Rate accounting
# ---------------------------------------------------------------------------


def compression_rate(
    geometry: QuantizerGeometry,
    std_bits: int = 16,
    index_packing: IndexPacking = IndexPacking.PACKED,
) -> float:
    """Compression ratio of one encoded vector against a half-precision baseline.

    Payload bits are ``groups * stages * bits_per_index + std_bits`` where
    bits_per_index is the sub-byte packed width, or 16 when indices are
    stored as 16-bit words.
    """
    if std_bits < 0:
        raise ValueError(f"std_bits must be >= 0, got {std_bits}")
    per_index = geometry.bits_per_index if index_packing is IndexPacking.PACKED else 16
    payload_bits = geometry.indices_per_vector * per_index + std_bits
    return geometry.dim * 16 / payload_bits
