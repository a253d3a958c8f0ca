"""Append-only quantized cache store with exact byte accounting.

Each (layer, projection) stream owns one frozen quantizer and an arena of
fixed-size records (2-byte std + sub-byte-packed indices). Reads decode the
stored record, so the store adds no loss beyond the codec itself. Appends
are single-writer per stream; reads below the published token count are
safe concurrently.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass

import numpy as np

from . import formats
from .quantizer import (
    GroupingKind,
    IndexPacking,
    QuantizedVector,
    ResidualQuantizer,
    decode,
    encode,
)

__all__ = [
    "Projection",
    "CacheKey",
    "StreamStats",
    "MemoryReport",
    "QuantizedCacheStore",
    "default_grouping",
]

_MANIFEST_NAME = "manifest.json"
_SNAPSHOT_FORMAT = "rvq-store-snapshot"
_SNAPSHOT_VERSION = 1


class Projection(enum.Enum):
    KEY = "key"
    VALUE = "value"


def default_grouping(projection: Projection) -> GroupingKind:
    """Key streams group strided channels, value streams contiguous ones."""
    return GroupingKind.STRIDED if projection is Projection.KEY else GroupingKind.CONTIGUOUS


@dataclass(frozen=True)
class CacheKey:
    """Address of one stored vector."""

    layer: int
    projection: Projection
    position: int


@dataclass(frozen=True)
class StreamStats:
    layer: int
    projection: Projection
    tokens: int
    record_bytes: int

    def as_dict(self) -> dict:
        return {
            "layer": self.layer,
            "projection": self.projection.value,
            "tokens": self.tokens,
            "bytes": self.tokens * self.record_bytes,
        }


@dataclass(frozen=True)
class MemoryReport:
    """Byte accounting of a store against a half-precision baseline.

    The headline ratio excludes the shared codebook bytes; the amortized
    ratio includes them and approaches the headline as tokens accumulate.
    Both are None while the store holds no tokens.
    """

    tokens: int
    index_bytes: int
    std_bytes: int
    codebook_bytes: int
    baseline_bytes: int
    headline_ratio: float | None
    amortized_ratio: float | None
    streams: tuple[StreamStats, ...]

    def as_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "index_bytes": self.index_bytes,
            "std_bytes": self.std_bytes,
            "codebook_bytes": self.codebook_bytes,
            "baseline_bytes": self.baseline_bytes,
            "headline_ratio": self.headline_ratio,
            "amortized_ratio": self.amortized_ratio,
            "streams": [s.as_dict() for s in self.streams],
        }


class _Arena:
    """Packed records for one (layer, projection) stream."""

    def __init__(self, quantizer: ResidualQuantizer):
        self.quantizer = quantizer
        self.data = bytearray()
        self.count = 0
        self.record_bytes = formats.record_size(quantizer.geometry, IndexPacking.PACKED)


class QuantizedCacheStore:
    """Per-stream quantizers plus append-only encoded token records."""

    def __init__(self):
        self._streams: dict[tuple[int, Projection], _Arena] = {}

    # -- registration ------------------------------------------------------

    def register_quantizer(
        self, layer: int, projection: Projection, quantizer: ResidualQuantizer
    ) -> None:
        key = (layer, projection)
        if key in self._streams:
            raise ValueError(f"quantizer already registered for layer {layer} {projection.value}")
        self._streams[key] = _Arena(quantizer)

    def quantizer_for(self, layer: int, projection: Projection) -> ResidualQuantizer:
        return self._arena(layer, projection).quantizer

    def streams(self) -> list[tuple[int, Projection]]:
        return sorted(self._streams, key=lambda k: (k[0], k[1].value))

    def _arena(self, layer: int, projection: Projection) -> _Arena:
        try:
            return self._streams[(layer, projection)]
        except KeyError:
            raise ValueError(
                f"no quantizer registered for layer {layer} {projection.value}"
            ) from None

    # -- append / read -----------------------------------------------------

    def append(self, layer: int, projection: Projection, x: np.ndarray) -> int:
        """Encode and store one vector; returns its position in the stream."""
        arena = self._arena(layer, projection)
        quantized = encode(x, arena.quantizer)
        arena.data += formats.encode_records(
            np.asarray([quantized.std_scale], dtype=np.float16),
            quantized.indices[None, :, :],
            arena.quantizer.geometry,
            IndexPacking.PACKED,
        )
        arena.count += 1
        return arena.count - 1

    def read(self, layer: int, projection: Projection, position: int) -> np.ndarray:
        """Dequantize a stored vector, bit-identical to decode(encode(x))."""
        arena = self._arena(layer, projection)
        if not 0 <= position < arena.count:
            raise IndexError(
                f"position {position} out of range for {arena.count} stored tokens"
            )
        start = position * arena.record_bytes
        raw = bytes(arena.data[start : start + arena.record_bytes])
        stds, indices = formats.decode_records(
            raw, 1, arena.quantizer.geometry, IndexPacking.PACKED
        )
        return decode(QuantizedVector(stds[0], indices[0]), arena.quantizer)

    def token_count(self, layer: int, projection: Projection) -> int:
        return self._arena(layer, projection).count

    # -- accounting --------------------------------------------------------

    @property
    def bytes_used(self) -> int:
        """Record bytes only; codebook bytes are reported separately."""
        return sum(len(arena.data) for arena in self._streams.values())

    def memory_report(self) -> MemoryReport:
        tokens = 0
        index_bytes = 0
        std_bytes = 0
        codebook_bytes = 0
        baseline_bytes = 0
        stats = []
        for (layer, projection), arena in sorted(
            self._streams.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
        ):
            geometry = arena.quantizer.geometry
            tokens += arena.count
            index_bytes += arena.count * geometry.packed_index_bytes
            std_bytes += arena.count * 2
            codebook_bytes += arena.quantizer.codebooks.size * 4
            baseline_bytes += arena.count * geometry.dim * 2
            stats.append(StreamStats(layer, projection, arena.count, arena.record_bytes))
        payload = index_bytes + std_bytes
        headline = baseline_bytes / payload if tokens > 0 else None
        amortized = baseline_bytes / (payload + codebook_bytes) if tokens > 0 else None
        return MemoryReport(
            tokens=tokens,
            index_bytes=index_bytes,
            std_bytes=std_bytes,
            codebook_bytes=codebook_bytes,
            baseline_bytes=baseline_bytes,
            headline_ratio=headline,
            amortized_ratio=amortized,
            streams=tuple(stats),
        )

    # -- snapshots ---------------------------------------------------------

    def save(self, directory) -> None:
        """Persist the store as a manifest plus codebook and index-block files."""
        os.makedirs(directory, exist_ok=True)
        entries = []
        for layer, projection in self.streams():
            arena = self._streams[(layer, projection)]
            stem = f"layer{layer:04d}.{projection.value}"
            quantizer_name = stem + ".rvqc"
            block_name = stem + ".rvqi"
            formats.save_quantizer(os.path.join(directory, quantizer_name), arena.quantizer)
            stds, indices = formats.decode_records(
                bytes(arena.data), arena.count, arena.quantizer.geometry, IndexPacking.PACKED
            )
            with formats.BlockWriter(
                os.path.join(directory, block_name),
                arena.quantizer,
                IndexPacking.PACKED,
                arena.count,
            ) as writer:
                writer.append_many(stds, indices)
            entries.append(
                {
                    "layer": layer,
                    "projection": projection.value,
                    "quantizer": quantizer_name,
                    "block": block_name,
                    "tokens": arena.count,
                }
            )
        manifest = {"format": _SNAPSHOT_FORMAT, "version": _SNAPSHOT_VERSION, "streams": entries}
        with open(os.path.join(directory, _MANIFEST_NAME), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, directory) -> "QuantizedCacheStore":
        manifest_path = os.path.join(directory, _MANIFEST_NAME)
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise formats.IntegrityError(f"store snapshot: unreadable manifest: {exc}") from exc
        if manifest.get("format") != _SNAPSHOT_FORMAT:
            raise formats.IntegrityError("store snapshot: manifest format mismatch")
        if manifest.get("version") != _SNAPSHOT_VERSION:
            raise formats.FormatVersionError(
                f"store snapshot: version {manifest.get('version')}, "
                f"reader supports {_SNAPSHOT_VERSION}"
            )
        store = cls()
        for entry in manifest["streams"]:
            projection = Projection(entry["projection"])
            quantizer = formats.load_quantizer(os.path.join(directory, entry["quantizer"]))
            store.register_quantizer(entry["layer"], projection, quantizer)
            arena = store._streams[(entry["layer"], projection)]
            for stds, indices in formats.iter_packed_block(
                os.path.join(directory, entry["block"])
            ):
                arena.data += formats.encode_records(
                    stds, indices, quantizer.geometry, IndexPacking.PACKED
                )
                arena.count += stds.shape[0]
            if arena.count != entry["tokens"]:
                raise formats.IntegrityError(
                    f"store snapshot: stream {entry['quantizer']} holds {arena.count} "
                    f"tokens, manifest declares {entry['tokens']}"
                )
        return store
