"""Command-line surface: train quantizers, encode/decode dumps, report rates.

Exit codes are stable for scripting: 0 success, 1 usage error, 2 data or
integrity error. Every subcommand is deterministic under a fixed --seed.
The optional RVQ_THREADS environment variable caps internal encode
parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import formats, store as store_mod, synthetic, training
from .quantizer import (
    GroupingKind,
    IndexPacking,
    QuantizerGeometry,
    compression_rate,
    decode_batch,
    encode_batch,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

_GRID_CODEBOOKS = (4, 6, 8)
_GRID_CODES = (1024, 2048)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _workers() -> int:
    raw = os.environ.get("RVQ_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise _UsageError(f"RVQ_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise _UsageError(f"RVQ_THREADS must be >= 1, got {value}")
    return value


def _mixture_option(text: str) -> dict:
    """Parse 'key=value,...' mixture descriptions; 'default' means defaults."""
    fields = {}
    if text.strip() not in ("", "default"):
        for part in text.split(","):
            if "=" not in part:
                raise argparse.ArgumentTypeError(f"expected key=value, got {part!r}")
            key, value = part.split("=", 1)
            key = key.strip()
            if key == "components":
                fields[key] = int(value)
            elif key in ("separation", "noise"):
                fields[key] = float(value)
            elif key == "df":
                fields["heavy_tail_df"] = float(value)
            else:
                raise argparse.ArgumentTypeError(f"unknown mixture field {key!r}")
    return fields


def _add_geometry_args(parser):
    parser.add_argument("--dim", type=int, default=128, help="channels per vector")
    parser.add_argument("--code-dim", type=int, default=32, help="channels per group")
    parser.add_argument("--codebooks", type=int, default=8, help="residual stages")
    parser.add_argument("--codes", type=int, default=2048, help="codes per codebook")


def _add_packing_arg(parser):
    parser.add_argument(
        "--packing",
        choices=[p.value for p in IndexPacking],
        default=IndexPacking.PACKED.value,
        help="index storage: sub-byte packed or 16-bit words",
    )


def _geometry_from_args(args) -> QuantizerGeometry:
    return QuantizerGeometry(args.dim, args.code_dim, args.codebooks, args.codes)


def _emit(args, human: str, record: dict) -> None:
    if getattr(args, "json_lines", False):
        print(json.dumps(record))
    else:
        print(human)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    geometry = _geometry_from_args(args)
    grouping = GroupingKind(args.grouping)
    config = training.TrainerConfig(
        decay=args.decay,
        batch_tokens=args.batch_tokens,
        steps=args.steps,
        kmeans_iters=args.kmeans_iters,
        seed=args.seed,
        workers=_workers(),
    )
    if args.input is not None:
        dim, count, _ = formats.read_dump_header(args.input)
        if dim != geometry.dim:
            raise ValueError(
                f"dump dimension {dim} does not match --dim {geometry.dim}"
            )
        stream = formats.read_activation_dump(args.input)
    else:
        spec = synthetic.MixtureSpec(dim=geometry.dim, **args.synthetic)
        stream = synthetic.generate_synthetic_activations(
            spec, config.batch_tokens * config.steps, config.seed
        )
    quantizer, report = training.train(stream, geometry, grouping, config)
    formats.save_quantizer(args.output, quantizer)
    report_path = args.report or args.output + ".report.jsonl"
    report.write_jsonl(report_path)
    record = {
        "quantizer": args.output,
        "report": report_path,
        "steps": len(report.records),
        "initial_mse": report.records[0].mse,
        "final_mse": report.final_mse,
    }
    if not args.no_figures:
        from . import plots

        figure_path = os.path.splitext(report_path)[0] + ".png"
        plots.plot_training_report(report, figure_path)
        record["figure"] = figure_path
    _emit(
        args,
        "\n".join(
            [
                f"quantizer written to {record['quantizer']}",
                f"training report written to {record['report']}",
                *(
                    [f"training figure written to {record['figure']}"]
                    if "figure" in record
                    else []
                ),
                f"mse: {record['initial_mse']:.6f} (step 1) -> {record['final_mse']:.6f} "
                f"(step {record['steps']})",
            ]
        ),
        record,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    quantizer = formats.load_quantizer(args.quantizer)
    dim, count, _ = formats.read_dump_header(args.input)
    if dim != quantizer.geometry.dim:
        raise ValueError(
            f"dump dimension {dim} does not match quantizer dimension "
            f"{quantizer.geometry.dim}"
        )
    packing = IndexPacking(args.packing)
    workers = _workers()
    stream = formats.read_activation_dump(args.input)
    written = 0
    with formats.BlockWriter(args.output, quantizer, packing, count) as writer:
        while written < count:
            rows = np.asarray(
                list(_islice(stream, min(4096, count - written))), dtype=np.float32
            )
            stds, indices = _encode_rows(rows, quantizer, workers)
            writer.append_many(stds, indices)
            written += rows.shape[0]
    size = os.path.getsize(args.output)
    _emit(
        args,
        f"encoded {count} vectors to {args.output} ({size} bytes, {args.packing} indices)",
        {"block": args.output, "vectors": count, "bytes": size, "packing": args.packing},
    )
    return EXIT_OK


def _islice(stream, n):
    import itertools

    return itertools.islice(stream, n)


def _encode_rows(rows, quantizer, workers):
    if workers <= 1 or rows.shape[0] < 2 * workers:
        return encode_batch(rows, quantizer)
    from concurrent.futures import ThreadPoolExecutor

    bounds = np.linspace(0, rows.shape[0], workers + 1, dtype=int)
    parts = [rows[bounds[w] : bounds[w + 1]] for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda part: encode_batch(part, quantizer), parts))
    stds = np.concatenate([r[0] for r in results])
    indices = np.concatenate([r[1] for r in results])
    return stds, indices


def cmd_decode(args) -> int:
    quantizer = formats.load_quantizer(args.quantizer)
    header = formats.read_block_header(args.input)
    mismatches = []
    if header.geometry != quantizer.geometry:
        mismatches.append(
            f"block geometry {header.geometry} vs quantizer {quantizer.geometry}"
        )
    if header.grouping is not quantizer.grouping:
        mismatches.append(
            f"block grouping {header.grouping.value} vs quantizer {quantizer.grouping.value}"
        )
    if mismatches:
        raise ValueError("block does not match quantizer: " + "; ".join(mismatches))
    with formats.DumpWriter(
        args.output, quantizer.geometry.dim, header.count, dtype=np.float32
    ) as writer:
        for stds, indices in formats.iter_packed_block(args.input):
            writer.write(decode_batch(stds, indices, quantizer))
    size = os.path.getsize(args.output)
    _emit(
        args,
        f"decoded {header.count} vectors to {args.output} ({size} bytes)",
        {"dump": args.output, "vectors": header.count, "bytes": size},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def _rate_row(geometry: QuantizerGeometry, std_bits: int, packing: IndexPacking) -> dict:
    ratio = compression_rate(geometry, std_bits, packing)
    per_index = geometry.bits_per_index if packing is IndexPacking.PACKED else 16
    return {
        "dim": geometry.dim,
        "code_dim": geometry.code_dim,
        "codebooks": geometry.num_codebooks,
        "codes": geometry.num_codes,
        "packing": packing.value,
        "bits_per_index": per_index,
        "payload_bits": geometry.indices_per_vector * per_index + std_bits,
        "ratio": ratio,
    }


def cmd_stats(args) -> int:
    if args.quantizer is not None:
        geometry = formats.load_quantizer(args.quantizer).geometry
    else:
        geometry = _geometry_from_args(args)
    packing = IndexPacking(args.packing)
    rows = []
    if args.grid:
        for codes in _GRID_CODES:
            for codebooks in _GRID_CODEBOOKS:
                grid_geometry = QuantizerGeometry(
                    geometry.dim, geometry.code_dim, codebooks, codes
                )
                rows.append(_rate_row(grid_geometry, args.std_bits, packing))
    else:
        rows.append(_rate_row(geometry, args.std_bits, packing))
    if args.json_lines:
        for row in rows:
            print(json.dumps(row))
    else:
        print(
            f"{'dim':>5} {'d_code':>6} {'stages':>6} {'codes':>6} {'packing':>8} "
            f"{'bits/idx':>8} {'payload':>8} {'ratio':>7}"
        )
        for row in rows:
            print(
                f"{row['dim']:>5} {row['code_dim']:>6} {row['codebooks']:>6} "
                f"{row['codes']:>6} {row['packing']:>8} {row['bits_per_index']:>8} "
                f"{row['payload_bits']:>8} {row['ratio']:>6.2f}x"
            )
    if args.figures is not None:
        from . import plots

        plots.plot_rate_grid(rows, args.figures)
        print(f"rate figure written to {args.figures}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# cache-sim
# ---------------------------------------------------------------------------


def cmd_cache_sim(args) -> int:
    key_quantizer = formats.load_quantizer(args.key_quantizer)
    value_quantizer = formats.load_quantizer(args.value_quantizer)
    store = store_mod.QuantizedCacheStore()
    quantizers = {
        store_mod.Projection.KEY: key_quantizer,
        store_mod.Projection.VALUE: value_quantizer,
    }
    for layer in range(args.layers):
        for projection, quantizer in quantizers.items():
            store.register_quantizer(layer, projection, quantizer)
    sq_error = {p: 0.0 for p in quantizers}
    channels = {p: 0 for p in quantizers}
    for layer in range(args.layers):
        for offset, (projection, quantizer) in enumerate(quantizers.items()):
            spec = synthetic.MixtureSpec(dim=quantizer.geometry.dim, **args.synthetic)
            stream = synthetic.generate_synthetic_activations(
                spec, args.tokens, args.seed + 2 * layer + offset
            )
            for x in stream:
                position = store.append(layer, projection, x)
                restored = store.read(layer, projection, position)
                sq_error[projection] += float(np.square(x - restored).sum())
                channels[projection] += quantizer.geometry.dim
    report = store.memory_report()
    mse = {
        p.value: (sq_error[p] / channels[p]) if channels[p] else None for p in quantizers
    }
    record = dict(report.as_dict(), reconstruction_mse=mse)
    if args.json_lines:
        print(json.dumps(record))
    else:
        headline = "undefined" if report.headline_ratio is None else f"{report.headline_ratio:.2f}x"
        amortized = (
            "undefined" if report.amortized_ratio is None else f"{report.amortized_ratio:.2f}x"
        )
        print(f"tokens stored:    {report.tokens}")
        print(f"index bytes:      {report.index_bytes}")
        print(f"std bytes:        {report.std_bytes}")
        print(f"codebook bytes:   {report.codebook_bytes}")
        print(f"baseline bytes:   {report.baseline_bytes} (half precision)")
        print(f"headline ratio:   {headline} (excludes codebooks)")
        print(f"amortized ratio:  {amortized} (includes codebooks)")
        for projection in quantizers:
            value = mse[projection.value]
            shown = "n/a" if value is None else f"{value:.6f}"
            print(f"{projection.value} reconstruction mse: {shown}")
    if args.report is not None:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        print(f"cache report written to {args.report}", file=sys.stderr)
    if args.figures is not None:
        from . import plots

        plots.plot_cache_report(report, args.figures)
        print(f"cache figure written to {args.figures}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rvq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="learn codebooks from a dump or synthetic data")
    _add_geometry_args(p_train)
    p_train.add_argument(
        "--grouping", choices=[g.value for g in GroupingKind], default="strided"
    )
    p_train.add_argument("--decay", type=float, default=0.99)
    p_train.add_argument("--batch-tokens", type=int, default=4096)
    p_train.add_argument("--steps", type=int, default=60)
    p_train.add_argument("--kmeans-iters", type=int, default=8)
    p_train.add_argument("--seed", type=int, default=0)
    source = p_train.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="activation dump to train on")
    source.add_argument(
        "--synthetic",
        type=_mixture_option,
        nargs="?",
        const={},
        help="mixture spec, e.g. components=64,separation=2,noise=0.3[,df=6]",
    )
    p_train.add_argument("--output", required=True, help="codebook file to write")
    p_train.add_argument("--report", help="report path (default: <output>.report.jsonl)")
    p_train.add_argument("--no-figures", action="store_true")
    p_train.add_argument("--json-lines", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_encode = sub.add_parser("encode", help="encode an activation dump to an index block")
    p_encode.add_argument("--quantizer", required=True)
    p_encode.add_argument("--input", required=True)
    p_encode.add_argument("--output", required=True)
    _add_packing_arg(p_encode)
    p_encode.add_argument("--json-lines", action="store_true")
    p_encode.set_defaults(func=cmd_encode)

    p_decode = sub.add_parser("decode", help="decode an index block to an activation dump")
    p_decode.add_argument("--quantizer", required=True)
    p_decode.add_argument("--input", required=True)
    p_decode.add_argument("--output", required=True)
    p_decode.add_argument("--json-lines", action="store_true")
    p_decode.set_defaults(func=cmd_decode)

    p_stats = sub.add_parser("stats", help="print compression-rate tables")
    _add_geometry_args(p_stats)
    p_stats.add_argument("--quantizer", help="take geometry from a codebook file")
    p_stats.add_argument("--std-bits", type=int, default=16)
    _add_packing_arg(p_stats)
    p_stats.add_argument("--grid", action="store_true", help="ablation grid over stages/codes")
    p_stats.add_argument("--figures", help="also render the table as a bar chart PNG")
    p_stats.add_argument("--json-lines", action="store_true")
    p_stats.set_defaults(func=cmd_stats)

    p_sim = sub.add_parser("cache-sim", help="run an append/read workload and report memory")
    p_sim.add_argument("--key-quantizer", required=True)
    p_sim.add_argument("--value-quantizer", required=True)
    p_sim.add_argument("--tokens", type=int, default=10000)
    p_sim.add_argument("--layers", type=int, default=1)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument(
        "--synthetic", type=_mixture_option, default={}, help="mixture spec for the stream"
    )
    p_sim.add_argument("--report", help="also write the report as a JSON line")
    p_sim.add_argument("--figures", help="also render byte accounting as a PNG")
    p_sim.add_argument("--json-lines", action="store_true")
    p_sim.set_defaults(func=cmd_cache_sim)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (formats.CodecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
