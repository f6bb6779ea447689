"""Command line: generate, build, ground-truth, search, bench, audit.

Data goes to files or standard output; diagnostics go to standard error.
Exit status is 0 only when the command fully succeeded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

from mvann.bench import run_bench, timed_search, write_csv
from mvann.core import Distance, FormatError, metric_preset
from mvann.graph import IndexParams
from mvann.io import IndexMismatch, build_bundle, load_index, read_mvd, save_index, write_mvd
from mvann.oracle import ground_truth, read_ground_truth, write_ground_truth
from mvann.search import SearchParams
from mvann.synthetic import GeneratorSpec, generate_queries, generate_synthetic
from mvann.token_index import TokenHnswParams


def _env_seed() -> int:
    raw = os.environ.get("MVANN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"error: MVANN_SEED must be an integer, got {raw!r}")


def _onoff(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return s == "on"


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _sweep(s: str) -> list[int]:
    try:
        vals = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("ef sweep needs positive integers")
    return vals


def _sim(metric: str | None, gamma: int, distance: str):
    if metric is None:
        metric = "maxsim" if gamma == 1 else "agg-gnn"
    if metric in ("maxsim", "chamfer") and gamma != 1:
        raise ValueError(f"metric {metric} uses gamma = 1; use --metric agg-gnn for gamma = {gamma}")
    return metric_preset(metric, gamma=gamma if metric == "agg-gnn" else None, distance=Distance(distance))


def _add_metric(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=_positive, default=1)
    p.add_argument("--metric", choices=["maxsim", "chamfer", "agg-gnn"], default=None,
                   help="defaults to maxsim for gamma 1, agg-gnn otherwise")
    p.add_argument("--distance", choices=[d.value for d in Distance], default=Distance.INNER_PRODUCT.value)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvann", description="Graph-based multi-vector similarity search")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="write a synthetic clustered dataset")
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--dim", type=_positive, default=32)
    g.add_argument("--c-min", type=int, default=8)
    g.add_argument("--c-max", type=int, default=32)
    g.add_argument("--clusters", type=_positive, default=20)
    g.add_argument("--sigma", type=float, default=0.15)
    g.add_argument("--max-topics", type=_positive, default=3)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--queries-out", help="also write queries drawn from the same topics")
    g.add_argument("--n-queries", type=_positive, default=100)
    g.add_argument("--query-seed", type=int, default=None, help="defaults to seed + 1")

    b = sub.add_parser("build", help="build the graph, token index and navigation table")
    b.add_argument("--data", required=True)
    b.add_argument("--M", type=int, default=16)
    b.add_argument("--ef-construction", type=int, default=100)
    _add_metric(b)
    b.add_argument("--ml", type=float, default=None, help="layer normalization factor, default 1/ln(M)")
    b.add_argument("--threads", type=_positive, default=1)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--approx-min-tokens", type=int, default=16,
                   help="use clustered scoring during construction when both objects have this many tokens (0 = never)")
    b.add_argument("--token-M", type=int, default=32)
    b.add_argument("--token-ef-construction", type=int, default=40)
    b.add_argument("--out", required=True)

    t = sub.add_parser("ground-truth", help="exact top-k by linear scan")
    t.add_argument("--data", required=True)
    t.add_argument("--queries", required=True)
    t.add_argument("--k", type=_positive, default=10)
    _add_metric(t)
    t.add_argument("--out", required=True)

    s = sub.add_parser("search", help="query an index, one JSON line per query")
    s.add_argument("--index", required=True)
    s.add_argument("--data", help="dataset file, default: the path recorded in the index")
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=_positive, default=10)
    s.add_argument("--ef-search", type=_positive, default=128)
    s.add_argument("--augmented", type=_onoff, default=True, metavar="{on,off}")
    s.add_argument("--exact-rerank", type=_onoff, default=True, metavar="{on,off}")
    s.add_argument("--approx", type=_onoff, default=False, metavar="{on,off}",
                   help="score candidates with the clustered kernel")
    s.add_argument("--out", default="-")

    h = sub.add_parser("bench", help="recall/latency sweep over efSearch")
    h.add_argument("--index", required=True)
    h.add_argument("--data")
    h.add_argument("--queries", required=True)
    h.add_argument("--ground-truth", required=True)
    h.add_argument("--k", type=_positive, default=10)
    h.add_argument("--ef-sweep", type=_sweep, default=[32, 64, 128, 256])
    h.add_argument("--augmented", type=_onoff, default=True, metavar="{on,off}")
    h.add_argument("--approx", type=_onoff, default=False, metavar="{on,off}")
    h.add_argument("--out", default="-")

    a = sub.add_parser("audit", help="structural checks of an index file")
    a.add_argument("--index", required=True)
    a.add_argument("--data")
    return ap


def _load(args):
    data = read_mvd(args.data) if args.data else None
    return load_index(args.index, data)


def cmd_generate(args, ap) -> int:
    if args.c_min > args.c_max:
        ap.error(f"--c-min ({args.c_min}) must not exceed --c-max ({args.c_max})")
    seed = _env_seed() if args.seed is None else args.seed
    try:
        spec = GeneratorSpec(n=args.n, dim=args.dim, c_min=args.c_min, c_max=args.c_max, clusters=args.clusters,
                             sigma=args.sigma, seed=seed, max_topics=args.max_topics)
    except ValueError as exc:
        ap.error(str(exc))
    ds = generate_synthetic(spec)
    write_mvd(args.out, ds)
    print(f"objects {len(ds)} tokens {ds.n_tokens}")
    if args.queries_out:
        qseed = seed + 1 if args.query_seed is None else args.query_seed
        qs = generate_queries(spec, args.n_queries, qseed).dataset
        write_mvd(args.queries_out, qs)
        print(f"queries {len(qs)} tokens {qs.n_tokens}")
    return 0


def cmd_build(args, ap) -> int:
    seed = _env_seed() if args.seed is None else args.seed
    sim = _sim(args.metric, args.gamma, args.distance)
    try:
        params = IndexParams(M=args.M, ef_construction=args.ef_construction, m_L=args.ml, seed=seed, sim=sim,
                             approx_min_tokens=args.approx_min_tokens)
        tparams = TokenHnswParams(M=args.token_M, ef_construction=args.token_ef_construction, seed=seed)
    except ValueError as exc:
        ap.error(str(exc))
    ds = read_mvd(args.data)
    t0 = time.perf_counter()
    bundle = build_bundle(ds, params, tparams, args.threads)
    wall = time.perf_counter() - t0
    save_index(args.out, bundle, args.data)
    st = bundle.index.stats()
    print(f"build_seconds {wall:.3f} graph {bundle.build_seconds['graph']:.3f} "
          f"token_index {bundle.build_seconds['token_index']:.3f} ant {bundle.build_seconds['ant']:.3f}")
    print(f"nodes {st['nodes']} entry_point {st['entry_point']} top_layer {st['top_layer']} "
          f"ant_entries {bundle.ant.n_entries}")
    for layer in st["layers"]:
        print(f"layer {layer['layer']} nodes {layer['nodes']} mean_degree {layer['mean_degree']:.3f}")
    return 0


def cmd_ground_truth(args, ap) -> int:
    sim = _sim(args.metric, args.gamma, args.distance)
    ds = read_mvd(args.data)
    qs = read_mvd(args.queries)
    write_ground_truth(args.out, ground_truth(ds, list(qs), args.k, sim))
    return 0


def _open_out(path):
    return sys.stdout if path == "-" else open(path, "w")


def cmd_search(args, ap) -> int:
    if args.k > args.ef_search:
        ap.error(f"--k ({args.k}) must not exceed --ef-search ({args.ef_search})")
    bundle = _load(args)
    qs = list(read_mvd(args.queries))
    sim = replace(bundle.index.params.sim, approx=args.approx, exact_rerank=args.exact_rerank)
    params = SearchParams(k=args.k, ef_search=args.ef_search, augmented=args.augmented, sim=sim)
    results, lat = timed_search(bundle, qs, params)
    f = _open_out(args.out)
    try:
        for i, (r, ms) in enumerate(zip(results, lat)):
            f.write(json.dumps({"query": i, "ids": [int(x) for x in r.ids], "scores": [float(x) for x in r.scores],
                                "latency_ms": round(float(ms), 4)}) + "\n")
    finally:
        if f is not sys.stdout:
            f.close()
    return 0


def cmd_bench(args, ap) -> int:
    if args.k > min(args.ef_sweep):
        ap.error(f"--k ({args.k}) must not exceed the smallest efSearch ({min(args.ef_sweep)})")
    bundle = _load(args)
    qs = list(read_mvd(args.queries))
    gt = read_ground_truth(args.ground_truth)
    base = SearchParams(k=args.k, ef_search=max(args.k, min(args.ef_sweep)), augmented=args.augmented,
                        sim=replace(bundle.index.params.sim, approx=args.approx))
    records = run_bench(bundle, qs, gt, args.k, args.ef_sweep, base)
    f = _open_out(args.out)
    try:
        write_csv(f, records)
    finally:
        if f is not sys.stdout:
            f.close()
    return 0


def cmd_audit(args, ap) -> int:
    bundle = _load(args)
    problems = bundle.audit()
    for p in problems:
        print(f"audit: {p}", file=sys.stderr)
    if problems:
        print(f"audit failed: {len(problems)} violation(s)", file=sys.stderr)
        return 1
    print(f"audit ok: {bundle.index.n_nodes} nodes, {bundle.ant.n_entries} navigation entries")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "build": cmd_build,
    "ground-truth": cmd_ground_truth,
    "search": cmd_search,
    "bench": cmd_bench,
    "audit": cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    try:
        return COMMANDS[args.cmd](args, ap)
    except (FormatError, IndexMismatch, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
