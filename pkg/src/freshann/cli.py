"""Command-line driver: build | cycles | stream | merge | search | report.

Options can come from a key=value config file (--config) with flags taking
precedence. See README for the CSV schemas the commands emit.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .bench import ExperimentSpec, cmd_build, cmd_cycles, cmd_report, cmd_stream
from .core import load_vectors
from .disk import DiskIndex
from .merge import MergeJob, MergeParams, StreamMerger


def parse_config_file(path) -> dict:
    """key = value lines, # comments; values parsed as int/float when they look
    like numbers."""
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw.rstrip()}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = _coerce(value)
    return out


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def _add_common(p):
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--data", help="dataset file (fvecs/bvecs)")
    p.add_argument("--format", choices=["fvecs", "bvecs"], default=None)
    p.add_argument("--synthetic", metavar="n,dim,clusters,seed",
                   help="generate a Gaussian-mixture dataset")
    p.add_argument("--R", type=int, default=None)
    p.add_argument("--Lc", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--B", type=int, default=None, help="PQ bytes per vector")
    p.add_argument("--M", type=int, default=None, help="temp index point cap")
    p.add_argument("--Ls", default=None, help="comma-separated search list sizes")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--passes", type=int, default=None)
    p.add_argument("--out", default=None)


def _spec_from(args) -> ExperimentSpec:
    fields = {}
    if args.config:
        fields.update(parse_config_file(args.config))
    if args.synthetic:
        parts = [int(x) for x in args.synthetic.split(",")]
        if len(parts) != 4:
            raise SystemExit("--synthetic wants n,dim,clusters,seed")
        fields.update(dict(zip(("n", "dim", "clusters", "seed"), parts)))
    mapping = {
        "data": "data", "format": "format", "R": "R", "Lc": "L_c",
        "alpha": "alpha", "B": "B", "M": "M", "k": "k", "queries": "queries",
        "seed": "seed", "passes": "passes", "out": "out",
        "cycles": "cycles", "delete_frac": "delete_frac", "policy": "policy",
        "duration": "duration", "merge_threads": "merge_threads", "disk": "disk",
    }
    for arg_name, spec_name in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            fields[spec_name] = value
    if getattr(args, "Ls", None):
        fields["Ls"] = tuple(int(x) for x in str(args.Ls).split(","))
    if getattr(args, "workers", None):
        fields["workers"] = tuple(int(x) for x in args.workers.split(","))
    known = set(ExperimentSpec.__dataclass_fields__)
    stray = set(fields) - known
    if stray:
        raise SystemExit(f"unknown config keys: {sorted(stray)}")
    return ExperimentSpec(**fields)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="freshann",
                                     description="dynamic ANN engine benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="static build + recall sweep")
    _add_common(p)
    p.add_argument("--disk", action="store_true", default=None,
                   help="also build the on-disk index")

    p = sub.add_parser("cycles", help="delete/reinsert cycle stream")
    _add_common(p)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--delete-frac", dest="delete_frac", type=float, default=None)
    p.add_argument("--policy", choices=["fresh", "fresh_alpha1", "policy_a"],
                   default=None)

    p = sub.add_parser("stream", help="concurrent workload on the full engine")
    _add_common(p)
    p.add_argument("--workers", metavar="ins,del,search", default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--delete-frac", dest="delete_frac", type=float, default=None)
    p.add_argument("--merge-threads", dest="merge_threads", type=int, default=None)

    p = sub.add_parser("merge", help="fold inserts/deletes into a disk index")
    p.add_argument("--index", required=True)
    p.add_argument("--inserts", help="fvecs/bvecs of new points")
    p.add_argument("--format", choices=["fvecs", "bvecs"], default="fvecs")
    p.add_argument("--delete-ids", help="text file, one id per line")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--Lc", type=int, default=75)
    p.add_argument("--merge-threads", dest="merge_threads", type=int, default=1)
    p.add_argument("--report", help="write the JSON merge report here")

    p = sub.add_parser("search", help="query a disk index")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--W", type=int, default=4, help="beam width")

    p = sub.add_parser("report", help="convert a JSONL run log to CSV tables")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "build":
        report = cmd_build(_spec_from(args))
        print(json.dumps(report, indent=2))
    elif args.command == "cycles":
        report = cmd_cycles(_spec_from(args))
        print(json.dumps(report, indent=2))
    elif args.command == "stream":
        report = cmd_stream(_spec_from(args))
        print(json.dumps(report, indent=2))
    elif args.command == "merge":
        return _run_merge(args)
    elif args.command == "search":
        return _run_search(args)
    elif args.command == "report":
        for path in cmd_report(args.log, args.out):
            print(path)
    return 0


def _run_merge(args) -> int:
    index = DiskIndex.open(args.index)
    if args.inserts:
        new = load_vectors(args.inserts, args.format)
        base = max(index.slot_of, default=-1) + 1
        new.ids = new.ids + base  # keep id spaces disjoint
    else:
        from .core import VectorSet

        new = VectorSet(index.dim, np.zeros((0, index.dim), np.float32),
                        np.zeros(0, np.uint64))
    deletes = set()
    if args.delete_ids:
        with open(args.delete_ids) as f:
            deletes = {int(line) for line in f if line.strip()}
    job = MergeJob(index=index, new_points=new, deletes=deletes,
                   params=MergeParams(alpha=args.alpha, R=index.R, L_c=args.Lc,
                                      workers=args.merge_threads))
    final, report = StreamMerger(job, args.out).run()
    print(report.to_json())
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json())
    final.close()
    index.close()
    return 0


def _run_search(args) -> int:
    spec = _spec_from(args)
    index = DiskIndex.open(args.index)
    from .bench import make_queries
    from .core import ground_truth, recall_report, VectorSet

    queries = (load_vectors(spec.data, spec.format).data if spec.data
               else make_queries(spec))
    rows = []
    import time as _t

    for q in queries:
        t0 = _t.perf_counter()
        res, stats = index.beam_search(q, spec.k, max(spec.Ls), args.W)
        rows.append((res, stats, _t.perf_counter() - t0))
    lat = [r[2] for r in rows]
    out = {
        "queries": len(rows),
        "mean_latency_ms": 1000 * float(np.mean(lat)),
        "mean_ios": float(np.mean([r[1].ios for r in rows])),
        "mean_comparisons": float(np.mean([r[1].comparisons for r in rows])),
    }
    live_ids = sorted(index.slot_of)
    if len(live_ids) >= spec.k and not spec.data:
        vecs = np.empty((len(live_ids), index.dim), dtype=np.float32)
        for i, node_id in enumerate(live_ids):
            vecs[i], _ = index.read_record(index.slot_of[node_id])
        vs = VectorSet(index.dim, vecs, np.array(live_ids, dtype=np.uint64))
        gt = ground_truth(vs, queries, spec.k)
        out["recall"] = recall_report([r[0].top_k for r in rows], gt, spec.k).mean
    print(json.dumps(out, indent=2))
    index.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
