"""Reproducible synthetic activation streams.

A stand-in for captured projection outputs: a Gaussian mixture with
configurable component spread and noise, plus an optional Student-t style
heavy tail. Everything is a pure function of (spec, count, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = ["MixtureSpec", "mixture_means", "sample_mixture", "generate_synthetic_activations"]

_CHUNK = 8192


@dataclass(frozen=True)
class MixtureSpec:
    """Mixture of equally weighted isotropic Gaussian components.

    Component means are drawn once from N(0, separation^2 I); samples add
    N(0, noise^2 I), scaled by sqrt(df / chi2(df)) per vector when
    ``heavy_tail_df`` is set.
    """

    dim: int = 128
    components: int = 64
    separation: float = 2.0
    noise: float = 0.3
    heavy_tail_df: float | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.components < 1:
            raise ValueError(f"components must be >= 1, got {self.components}")
        if not math.isfinite(self.separation) or self.separation < 0:
            raise ValueError(f"separation must be finite and >= 0, got {self.separation}")
        if not math.isfinite(self.noise) or self.noise < 0:
            raise ValueError(f"noise must be finite and >= 0, got {self.noise}")
        if self.heavy_tail_df is not None and self.heavy_tail_df <= 2:
            raise ValueError(f"heavy_tail_df must be > 2, got {self.heavy_tail_df}")


def _draw_means(spec: MixtureSpec, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal((spec.components, spec.dim)) * spec.separation).astype(
        np.float32
    )


def mixture_means(spec: MixtureSpec, seed: int) -> np.ndarray:
    """The component means the generator uses for this (spec, seed)."""
    return _draw_means(spec, np.random.default_rng(seed))


def _draw_chunk(spec, means, rng, count):
    labels = rng.integers(0, spec.components, size=count)
    noise = rng.standard_normal((count, spec.dim))
    if spec.heavy_tail_df is not None:
        df = spec.heavy_tail_df
        noise *= np.sqrt(df / rng.chisquare(df, size=count))[:, None]
    vectors = means[labels] + (noise * spec.noise)
    return vectors.astype(np.float32), labels.astype(np.int32)


def sample_mixture(
    spec: MixtureSpec, count: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` vectors with their generating component labels."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    means = _draw_means(spec, rng)
    return _draw_chunk(spec, means, rng, count)


def generate_synthetic_activations(
    spec: MixtureSpec, count: int, seed: int
) -> Iterator[np.ndarray]:
    """Stream ``count`` vectors; identical bytes for identical arguments."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    means = _draw_means(spec, rng)
    remaining = count
    while remaining > 0:
        vectors, _ = _draw_chunk(spec, means, rng, min(_CHUNK, remaining))
        yield from vectors
        remaining -= vectors.shape[0]
