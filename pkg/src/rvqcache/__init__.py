"""Residual vector quantization codec and quantized cache store."""

from .formats import (
    CodecError,
    FormatVersionError,
    IntegrityError,
    BlockWriter,
    DumpWriter,
    iter_packed_block,
    load_quantizer,
    pack_indices,
    read_activation_dump,
    read_block_header,
    read_dump_header,
    save_quantizer,
    unpack_indices,
    write_activation_dump,
)
from .quantizer import (
    SIGMA_MIN,
    GroupingKind,
    IndexPacking,
    QuantizedVector,
    QuantizerGeometry,
    ResidualQuantizer,
    channel_permutation,
    compression_rate,
    decode,
    decode_batch,
    encode,
    encode_batch,
    rvq_decode_group,
    rvq_encode_group,
    scale_and_group,
)
from .store import (
    CacheKey,
    MemoryReport,
    Projection,
    QuantizedCacheStore,
    default_grouping,
)
from .synthetic import MixtureSpec, generate_synthetic_activations, mixture_means, sample_mixture
from .training import (
    TrainerConfig,
    TrainerState,
    TrainingReport,
    ema_step,
    init_residual_codebooks,
    kmeans_init,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "SIGMA_MIN",
    "GroupingKind",
    "IndexPacking",
    "QuantizerGeometry",
    "QuantizedVector",
    "ResidualQuantizer",
    "CacheKey",
    "MemoryReport",
    "Projection",
    "QuantizedCacheStore",
    "MixtureSpec",
    "TrainerConfig",
    "TrainerState",
    "TrainingReport",
    "CodecError",
    "IntegrityError",
    "FormatVersionError",
    "BlockWriter",
    "DumpWriter",
    "channel_permutation",
    "compression_rate",
    "decode",
    "decode_batch",
    "default_grouping",
    "ema_step",
    "encode",
    "encode_batch",
    "generate_synthetic_activations",
    "init_residual_codebooks",
    "iter_packed_block",
    "kmeans_init",
    "load_quantizer",
    "mixture_means",
    "pack_indices",
    "read_activation_dump",
    "read_block_header",
    "read_dump_header",
    "rvq_decode_group",
    "rvq_encode_group",
    "sample_mixture",
    "save_quantizer",
    "scale_and_group",
    "train",
    "unpack_indices",
    "write_activation_dump",
]
