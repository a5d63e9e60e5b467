"""Command-line front end: ``gen``, ``compress``, ``decompress``, ``bench``, ``analyze``."""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import analysis, codec, collectives, datasets, reference
from .collectives import PipelineConfig, ReduceOp, Variant
from .transport import CATEGORIES, CommWorld, Mode, SimParams

COLLECTIVES = ("allgather", "bcast", "scatter", "reduce_scatter", "allreduce")

BENCH_COLUMNS = [
    "run_id", "rank", "collective", "variant", "ranks", "elements", "eb",
    "bytes_sent", "compress_calls", "decompress_calls",
    "t_comdecom", "t_allgather", "t_memcpy", "t_wait", "t_reduction", "t_others", "t_total",
    "max_abs_error", "psnr", "nrmse",
]

# sweep shape: 28 MB to 678 MB in 50 MB steps
SWEEP_MB = tuple(range(28, 679, 50))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class ExperimentSpec:
    collective: str
    variant: Variant
    ranks: int
    elements: int
    eb: Optional[float] = None
    reduce_op: ReduceOp = ReduceOp.SUM
    mode: Mode = Mode.VIRTUAL
    sim: SimParams = SimParams()
    seed: int = 0
    warmup: int = 10
    repetitions: int = 10
    root: int = 0
    config: PipelineConfig = PipelineConfig()

    def __post_init__(self):
        if self.collective not in COLLECTIVES:
            raise ValueError(f"unknown collective {self.collective!r}")
        if self.repetitions < 1 or self.warmup < 0:
            raise ValueError("repetitions must be >= 1 and warmup >= 0")
        if self.ranks < 1:
            raise ValueError("ranks must be >= 1")
        if self.elements < 1:
            raise ValueError("elements must be >= 1")
        if self.collective in ("scatter", "reduce_scatter", "allreduce") and self.elements % self.ranks:
            raise ValueError(
                f"{self.collective} needs elements ({self.elements}) divisible by ranks ({self.ranks})"
            )
        if self.variant is not Variant.BASELINE and self.eb is None:
            raise ValueError(f"variant {self.variant.value} needs --eb")


def _run_once(spec: ExperimentSpec, fields):
    world = CommWorld(spec.ranks, spec.mode, spec.sim)
    if spec.collective == "allgather":
        return collectives.allgather(world, spec.variant, fields, spec.eb, spec.config)
    if spec.collective == "bcast":
        return collectives.bcast(world, spec.variant, fields[spec.root], spec.root, spec.eb)
    if spec.collective == "scatter":
        return collectives.scatter(world, spec.variant, fields[spec.root], spec.root, spec.eb)
    if spec.collective == "reduce_scatter":
        return collectives.reduce_scatter(world, spec.variant, fields, spec.reduce_op, spec.eb, spec.config)
    return collectives.allreduce(world, spec.variant, fields, spec.reduce_op, spec.eb, spec.config)


def _references(spec: ExperimentSpec, fields):
    n = spec.ranks
    if spec.collective == "allgather":
        return [reference.allgather(fields)] * n
    if spec.collective == "bcast":
        return [reference.bcast(fields[spec.root])] * n
    if spec.collective == "scatter":
        return reference.scatter(fields[spec.root], n)
    if spec.collective == "reduce_scatter":
        return reference.reduce_scatter(fields, spec.reduce_op)
    return [reference.allreduce(fields, spec.reduce_op)] * n


def run_experiment(spec: ExperimentSpec, fields, first_run_id: int = 0):
    """Warm-up runs, then measured runs; returns CSV rows (dicts)."""
    for _ in range(spec.warmup):
        _run_once(spec, fields)
    rows = []
    outputs = None
    for rep in range(spec.repetitions):
        outputs, report = _run_once(spec, fields)
        for stats in report.ranks:
            row = {
                "run_id": first_run_id + rep,
                "rank": stats.rank,
                "bytes_sent": stats.bytes_sent,
                "compress_calls": stats.compress_calls,
                "decompress_calls": stats.decompress_calls,
                "t_total": stats.total_time,
            }
            for cat in CATEGORIES:
                row[f"t_{cat.lower()}"] = stats.times[cat]
            rows.append(row)
    refs = _references(spec, fields)
    q = analysis.quality(np.concatenate(refs), np.concatenate(outputs))
    rows.append({
        "run_id": "summary",
        "max_abs_error": q.max_abs_error,
        "psnr": q.psnr,
        "nrmse": q.nrmse,
    })
    common = {
        "collective": spec.collective,
        "variant": spec.variant.value,
        "ranks": spec.ranks,
        "elements": spec.elements,
        "eb": spec.eb,
    }
    return [{**common, **row} for row in rows]


def write_rows(rows, columns, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _emit(rows, columns, path):
    out, close = _open_out(path)
    try:
        write_rows(rows, columns, out)
    finally:
        if close:
            out.close()


# ---------------------------------------------------------------------------
# gen / compress / decompress


def cmd_gen(args) -> int:
    spec = datasets.DatasetSpec(args.kind, args.elements, args.seed, args.input)
    values = datasets.generate(spec)
    datasets.write_raw(args.output, values)
    print(f"wrote {values.size} float32 values to {args.output}")
    return 0


def cmd_compress(args) -> int:
    data = datasets.read_raw(args.input)
    if data.size == 0:
        raise ValueError(f"{args.input} is empty")
    if args.pipelined:
        stream = codec.compress_pipelined(data, args.eb, args.chunk_elements)
        decoded = codec.decompress_pipelined(stream)
    else:
        stream = codec.compress(data, args.eb)
        decoded = codec.decompress(stream)
    with open(args.output, "wb") as fh:
        fh.write(stream)
    finite = np.isfinite(data)
    q = analysis.quality(data[finite], decoded[finite]) if finite.any() else None
    ratio = codec.compression_ratio(stream)
    print(
        f"ratio={ratio!r} max_abs_error={q.max_abs_error if q else 0.0!r} "
        f"psnr={q.psnr if q else math.inf!r} nrmse={q.nrmse if q else 0.0!r}"
    )
    return 0


def cmd_decompress(args) -> int:
    with open(args.input, "rb") as fh:
        values = codec.decode(fh.read())
    datasets.write_raw(args.output, values)
    print(f"wrote {values.size} float32 values to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _sweep_elements(ranks: int, scale: float) -> list:
    sizes = []
    for mb in SWEEP_MB:
        elements = int(mb * 1_000_000 / 4 / scale)
        elements -= elements % ranks
        sizes.append(max(elements, ranks))
    return sizes


def cmd_bench(args) -> int:
    sim = SimParams.from_file(args.sim_config) if args.sim_config else SimParams()
    config = PipelineConfig(args.segment_bytes, args.chunk_elements)
    base = ExperimentSpec(
        collective=args.collective,
        variant=Variant(args.variant),
        ranks=args.ranks,
        elements=args.elements if args.elements else args.ranks,
        eb=args.eb,
        reduce_op=ReduceOp(args.op),
        mode=Mode(args.mode),
        sim=sim,
        seed=args.seed,
        warmup=args.warmup,
        repetitions=args.repetitions,
        root=args.root,
        config=config,
    )
    if not 0 <= base.root < base.ranks:
        raise ValueError(f"invalid root {base.root}")
    sizes = _sweep_elements(base.ranks, args.scale) if args.sweep else [args.elements]
    if not args.sweep and not args.elements:
        raise ValueError("either --elements or --sweep is required")
    dataset = datasets.DatasetSpec(
        datasets.Kind.FILE if args.input else args.dataset, 1, args.seed, args.input
    )
    rows = []
    run_id = 0
    for elements in sizes:
        spec = replace(base, elements=elements)
        fields = datasets.rank_fields(dataset, spec.ranks, elements)
        rows.extend(run_experiment(spec, fields, run_id))
        run_id += spec.repetitions
    _emit(rows, BENCH_COLUMNS, args.output)
    return 0


# ---------------------------------------------------------------------------
# analyze

ANALYZE_COLUMNS = ["quantity", "closed_form", "monte_carlo", "rel_deviation"]


def _row(quantity, closed, mc=None):
    # a zero closed form has no meaningful relative deviation
    dev = None if mc is None or not closed else analysis.relative_deviation(mc, closed)
    return {"quantity": quantity, "closed_form": closed, "monte_carlo": mc, "rel_deviation": dev}


def _sigma(args) -> float:
    if args.sigma is not None:
        return args.sigma
    if args.eb is not None:
        return args.eb / 3.0
    raise ValueError("give --sigma or --eb")


def analyze_rows(args) -> tuple:
    kind = args.subcommand
    if kind in ("theorem-sum", "theorem-avg", "theorem-maxmin") and (args.n is None or args.n < 1):
        raise ValueError("--n must be a positive integer")
    if args.trials is not None and args.trials < 1:
        raise ValueError("--trials must be positive")

    if kind == "theorem-sum":
        sigma = _sigma(args)
        model = analysis.ErrorModel(args.n, sigma, eb=3 * sigma)
        mean, var = analysis.sum_error_distribution(model)
        mc = analysis.monte_carlo_sum(model, args.trials, args.seed)
        return ANALYZE_COLUMNS, [
            _row("mean", mean, mc.mean),
            _row("variance", var, mc.variance),
            _row("coverage_2sigma", analysis.TWO_SIGMA_COVERAGE, mc.coverage),
            _row("interval_half_width", analysis.sum_interval(model)),
            _row("interval_half_width_in_eb", analysis.sum_interval_in_eb(args.n)),
        ]
    if kind == "theorem-avg":
        sigma = _sigma(args)
        model = analysis.ErrorModel(args.n, sigma, eb=3 * sigma)
        mean, var = analysis.avg_error_distribution(model)
        mc = analysis.monte_carlo_avg(model, args.trials, args.seed)
        return ANALYZE_COLUMNS, [
            _row("mean", mean, mc.mean),
            _row("variance", var, mc.variance),
            _row("coverage_2sigma", analysis.TWO_SIGMA_COVERAGE, mc.coverage),
        ]
    if kind == "theorem-maxmin":
        sigma = _sigma(args)
        var = analysis.maxmin_error_variance(args.n, sigma)
        mc = analysis.monte_carlo_maxmin(args.n, sigma, args.trials, args.seed)
        return ANALYZE_COLUMNS, [
            _row("variance", var, mc.variance),
            _row("variance_limit", 2.0 * sigma ** 2),
            _row("coverage_2sigma", analysis.TWO_SIGMA_COVERAGE, mc.coverage),
        ]
    if kind == "coverage":
        n = args.n if args.n is not None else 16
        if args.eb is None:
            raise ValueError("coverage needs --eb")
        elements = args.elements if args.elements else 256 * n
        if elements % n:
            raise ValueError(f"--elements must be divisible by --n ({n})")
        values = datasets.generate(datasets.DatasetSpec(args.dataset, elements, args.seed, args.input))
        res = analysis.empirical_allreduce_coverage(n, values, args.eb, args.trials, args.seed, args.mode)
        return ANALYZE_COLUMNS, [
            _row("coverage_2sqrt_n_sigma_emp", analysis.TWO_SIGMA_COVERAGE, res.coverage),
            _row("sigma_emp", None, res.sigma_emp),
            _row("max_abs_error", res.hard_bound, res.max_abs_error),
            _row("hard_bound_held", 1.0, float(res.bound_held)),
        ]
    if kind == "fit":
        if args.original and args.decoded:
            original = datasets.read_raw(args.original)
            decoded = datasets.read_raw(args.decoded)
        else:
            if args.eb is None:
                raise ValueError("fit needs --eb when no --original/--decoded pair is given")
            elements = args.elements if args.elements else 65536
            original = datasets.generate(datasets.DatasetSpec(args.dataset, elements, args.seed, args.input))
            decoded = codec.decompress(codec.compress(original, args.eb))
        return None, analysis.fit_errors(original, decoded, args.bins)
    raise ValueError(f"unknown analysis {kind!r}")


def cmd_analyze(args) -> int:
    columns, result = analyze_rows(args)
    if columns is None:
        out, close = _open_out(args.output)
        try:
            out.write(result.to_csv())
        finally:
            if close:
                out.close()
        return 0
    _emit(result, columns, args.output)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccoll", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic raw float32 field")
    p.add_argument("output")
    p.add_argument("--kind", default="sinusoid-mix", choices=[k.value for k in datasets.Kind])
    p.add_argument("--elements", type=int, default=1 << 20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", help="source file for --kind file")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("compress", help="compress a raw float32 file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--eb", type=float, required=True)
    p.add_argument("--pipelined", action="store_true")
    p.add_argument("--chunk-elements", type=int, default=codec.DEFAULT_CHUNK_ELEMENTS)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a CCZX/CCPX file to raw float32")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("bench", help="run a collective and report per-rank counters")
    p.add_argument("--collective", required=True, choices=COLLECTIVES)
    p.add_argument("--variant", default="ccoll", choices=[v.value for v in Variant])
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--elements", type=int, help="per-rank (root for bcast/scatter) field length")
    p.add_argument("--sweep", action="store_true", help="28..678 MB in 50 MB steps, divided by --scale")
    p.add_argument("--scale", type=float, default=1000.0)
    p.add_argument("--eb", type=float)
    p.add_argument("--op", default="sum", choices=[o.value for o in ReduceOp])
    p.add_argument("--root", type=int, default=0)
    p.add_argument("--mode", default="virtual", choices=[m.value for m in Mode])
    p.add_argument("--sim-config", help="key=value SimParams file")
    p.add_argument("--dataset", default="sinusoid-mix",
                   choices=[k.value for k in datasets.Kind if k is not datasets.Kind.FILE])
    p.add_argument("--input", help="raw float32 file used instead of --dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--segment-bytes", type=int, default=PipelineConfig.segment_bytes)
    p.add_argument("--chunk-elements", type=int, default=PipelineConfig.chunk_elements)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="error-propagation and quality analyses")
    p.add_argument("subcommand", choices=["theorem-sum", "theorem-avg", "theorem-maxmin", "coverage", "fit"])
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--eb", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--elements", type=int)
    p.add_argument("--dataset", default="sinusoid-mix", choices=[k.value for k in datasets.Kind])
    p.add_argument("--input", help="raw float32 file for --dataset file")
    p.add_argument("--mode", default="virtual", choices=[m.value for m in Mode])
    p.add_argument("--original", help="fit: raw float32 original")
    p.add_argument("--decoded", help="fit: raw float32 decoded")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "analyze" and args.trials is None:
        args.trials = 200 if args.subcommand == "coverage" else 1_000_000
    try:
        return args.func(args)
    except (ValueError, OSError, codec.CodecError) as exc:
        print(f"ccoll {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
