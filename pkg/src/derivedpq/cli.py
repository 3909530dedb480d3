"""Command-line pipelines: train, encode, index, query, bench, groundtruth.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 internal invariant violation (corrupted model or index).
"""

from __future__ import annotations

import argparse
import json
import re
import sys

import numpy as np

from .errors import FormatError, InvariantError
from .evaluation import MethodSpec, exact_nn, run_bench
from .flat import FlatIndex
from .ivf import IVFIndex
from .quantizer import OptimizedProductQuantizer, ProductQuantizer
from .vecio import load_model, read_vecs, save_model, write_vecs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INVARIANT = 4

_METHOD_RE = re.compile(r"^(pq|opq)-(\d+)x(\d+)(?:-(\d+))?$")


class ConfigError(ValueError):
    """Inconsistent or unsupported run configuration."""


def _print_config(args) -> None:
    record = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"config: {json.dumps(record, default=str)}")


def _load_vectors(path, element_kind: str) -> np.ndarray:
    data = read_vecs(path, element_kind)
    if data.shape[0] == 0:
        raise FormatError(f"{path}: empty dataset")
    return data


def _make_quantizer(args):
    if args.bbar is not None and not (1 <= args.bbar <= args.b):
        raise ConfigError(f"bbar={args.bbar} must be in [1, b={args.b}]")
    if not (1 <= args.b <= 16):
        raise ConfigError(f"b={args.b} must be in [1, 16]")
    if args.opq:
        return OptimizedProductQuantizer(
            m=args.m, b=args.b, bbar=args.bbar, seed=args.seed,
            outer_iters=args.outer_iters,
        )
    return ProductQuantizer(m=args.m, b=args.b, bbar=args.bbar, seed=args.seed)


def _check_divisible(d: int, m: int) -> None:
    if d % m != 0:
        raise ConfigError(f"dimension {d} is not divisible by m={m}")


def cmd_train(args) -> int:
    _print_config(args)
    data = _load_vectors(args.data, args.element_kind)
    _check_divisible(data.shape[1], args.m)
    quantizer = _make_quantizer(args)
    quantizer.fit(data)
    kind = "opq" if args.opq else "pq"
    print(
        f"trained {kind} m={quantizer.m} b={quantizer.b} bbar={quantizer.bbar_} "
        f"on {data.shape[0]} vectors (d={data.shape[1]})"
    )
    for j, dist in enumerate(quantizer.distortions_):
        print(f"subspace {j}: distortion {dist:.6g}")
    quantizer.validate()
    print(
        f"centroid grouping check: ok "
        f"({quantizer.m} codebooks x {quantizer.k_} indexes)"
    )
    save_model(quantizer, args.out)
    print(f"saved model to {args.out}")
    return EXIT_OK


def cmd_groundtruth(args) -> int:
    _print_config(args)
    database = _load_vectors(args.database, args.element_kind)
    queries = _load_vectors(args.queries, args.element_kind)
    truth = exact_nn(database, queries, args.depth)
    write_vecs(truth, args.out, "int32")
    print(f"wrote {truth.shape[0]} x {truth.shape[1]} ground-truth ids to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    _print_config(args)
    model = load_model(args.model)
    if not isinstance(model, ProductQuantizer):
        raise ConfigError(f"{args.model} does not contain a quantizer")
    data = _load_vectors(args.data, args.element_kind)
    codes = model.encode(data)
    write_vecs(codes.astype(np.int32), args.out, "int32")
    print(f"encoded {codes.shape[0]} vectors ({codes.shape[1]} indexes each) to {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    _print_config(args)
    data = _load_vectors(args.data, args.element_kind)
    train = _load_vectors(args.train, args.element_kind) if args.train else None
    if args.kind == "flat":
        if args.model:
            quantizer = load_model(args.model)
            if not isinstance(quantizer, ProductQuantizer):
                raise ConfigError(f"{args.model} does not contain a quantizer")
        else:
            _require_quantizer_params(args)
            _check_divisible(data.shape[1], args.m)
            quantizer = _make_quantizer(args)
        index = FlatIndex(quantizer).fit(data, train=train)
    else:
        if args.model:
            raise ConfigError(
                "ivf retrains its quantizer on residuals; pass --m/--b instead of --model"
            )
        _require_quantizer_params(args)
        _check_divisible(data.shape[1], args.m)
        if args.K < 1:
            raise ConfigError(f"K={args.K} must be >= 1")
        quantizer = _make_quantizer(args)
        index = IVFIndex(quantizer, n_cells=args.K, seed=args.seed).fit(data, train=train)
    index.validate()
    save_model(index, args.out)
    print(f"indexed {data.shape[0]} vectors ({args.kind}) to {args.out}")
    return EXIT_OK


def _require_quantizer_params(args) -> None:
    if args.m is None or args.b is None:
        raise ConfigError("training a quantizer requires --m and --b")


def cmd_query(args) -> int:
    _print_config(args)
    index = load_model(args.index)
    if not isinstance(index, (FlatIndex, IVFIndex)):
        raise ConfigError(f"{args.index} does not contain a searchable index")
    queries = _load_vectors(args.queries, args.element_kind)
    kwargs = {"mode": args.mode}
    if args.mode == "derived":
        if args.r2 is None:
            raise ConfigError("derived mode requires --r2")
        if args.r2 < args.r:
            raise ConfigError(f"--r2 {args.r2} must be >= --r {args.r}")
        kwargs["r2"] = args.r2
    if isinstance(index, IVFIndex):
        kwargs["ma"] = args.ma
    dists, ids = index.search(queries, args.r, **kwargs)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for qi in range(ids.shape[0]):
            valid = ids[qi] >= 0
            row_ids = ",".join(str(int(i)) for i in ids[qi][valid])
            row_dists = ",".join(f"{d:.6f}" for d in dists[qi][valid])
            print(f"{qi}\t{row_ids}\t{row_dists}", file=out)
    finally:
        if args.out:
            out.close()
    if args.out:
        print(f"wrote {ids.shape[0]} result rows to {args.out}")
    return EXIT_OK


def _parse_method(token: str) -> MethodSpec:
    match = _METHOD_RE.match(token)
    if not match:
        raise ConfigError(
            f"bad method {token!r}; expected e.g. pq-8x8, opq-4x16, pq-4x16-8"
        )
    kind, m, b, bbar = match.groups()
    return MethodSpec(
        name=token,
        m=int(m),
        b=int(b),
        bbar=int(bbar) if bbar is not None else None,
        opq=(kind == "opq"),
    )


def cmd_bench(args) -> int:
    _print_config(args)
    methods = [_parse_method(token) for token in args.method]
    for spec in methods:
        if not (1 <= spec.b <= 16):
            raise ConfigError(f"method {spec.name}: b out of range")
        if spec.bbar is not None and not (1 <= spec.bbar <= spec.b):
            raise ConfigError(f"method {spec.name}: bbar out of range")
        if spec.bbar is not None:
            if args.r2 is None:
                raise ConfigError(f"method {spec.name} is derived; set --r2")
            spec.r2 = args.r2
    database = _load_vectors(args.database, args.element_kind)
    queries = _load_vectors(args.queries, args.element_kind)
    for spec in methods:
        _check_divisible(database.shape[1], spec.m)
    truth = read_vecs(args.truth, "int32") if args.truth else None
    train = _load_vectors(args.train, args.element_kind) if args.train else None
    report = run_bench(
        database,
        queries,
        methods,
        r_values=args.r,
        truth=truth,
        index_kind=args.index_kind,
        n_cells=args.K,
        ma=args.ma,
        seed=args.seed,
        train=train,
        warmup=args.warmup,
    )
    report.to_csv(args.out)
    for row in report.rows:
        print(
            f"{row['method']}: r={row['r']} recall={row['recall']:.4f} "
            f"total={row['total_us']:.1f}us"
        )
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return EXIT_OK


def _add_common(parser) -> None:
    parser.add_argument("--seed", type=int, default=42, help="seed for all randomness")
    parser.add_argument(
        "--element-kind",
        choices=["float32", "uint8"],
        default="float32",
        help="element type of input vector files",
    )


def _add_quantizer_params(parser, required: bool) -> None:
    parser.add_argument("--m", type=int, required=required, help="subspace count")
    parser.add_argument("--b", type=int, required=required, help="bits per full codebook")
    parser.add_argument("--bbar", type=int, default=None, help="bits per derived codebook (default: b)")
    parser.add_argument("--opq", action="store_true", help="learn a rotation before quantizing")
    parser.add_argument("--outer-iters", type=int, default=10, help="rotation refinement rounds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="derivedpq",
        description="Product-quantization ANN search with derived codebooks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a quantizer and save it")
    p.add_argument("--data", required=True, help="training vectors")
    _add_quantizer_params(p, required=True)
    p.add_argument("--out", required=True, help="output model file")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("groundtruth", help="compute exact nearest neighbors")
    p.add_argument("--database", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--depth", type=int, default=100, help="neighbors per query")
    p.add_argument("--out", required=True, help="output ids file (int32 records)")
    _add_common(p)
    p.set_defaults(func=cmd_groundtruth)

    p = sub.add_parser("encode", help="encode vectors with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output codes file (int32 records)")
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build a searchable index")
    p.add_argument("--kind", choices=["flat", "ivf"], default="flat")
    p.add_argument("--data", required=True, help="database vectors")
    p.add_argument("--train", default=None, help="optional quantizer training vectors")
    p.add_argument("--model", default=None, help="pretrained quantizer (flat only)")
    _add_quantizer_params(p, required=False)
    p.add_argument("--K", type=int, default=256, help="coarse cell count (ivf)")
    p.add_argument("--out", required=True, help="output index file")
    _add_common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="search an index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--r", type=int, default=10, help="results per query")
    p.add_argument("--mode", choices=["conventional", "derived"], default="conventional")
    p.add_argument("--r2", type=int, default=None, help="candidate budget (derived mode)")
    p.add_argument("--ma", type=int, default=8, help="probed cells (ivf)")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    _add_common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="benchmark methods and write a CSV")
    p.add_argument("--database", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--truth", default=None, help="precomputed ground-truth ids")
    p.add_argument("--train", default=None, help="optional training vectors")
    p.add_argument(
        "--method",
        action="append",
        required=True,
        help="repeatable: pq-8x8, opq-4x16, pq-4x16-8 (m x b, optional bbar)",
    )
    p.add_argument("--r", type=int, nargs="+", default=[100], help="result depths")
    p.add_argument("--r2", type=int, default=None, help="candidate budget for derived methods")
    p.add_argument("--index-kind", choices=["flat", "ivf"], default="flat")
    p.add_argument("--K", type=int, default=256, help="coarse cell count (ivf)")
    p.add_argument("--ma", type=int, default=8, help="probed cells (ivf)")
    p.add_argument("--warmup", type=int, default=10, help="untimed leading queries")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
