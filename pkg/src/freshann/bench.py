"""Experiment drivers behind the CLI: static builds with recall sweeps,
delete/reinsert cycle streams, concurrent system workloads, and report
generation from JSONL run logs.

All randomness flows from the spec seed; identical specs produce identical
reports up to timing fields.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import pq
from .core import VectorSet, ground_truth, load_vectors, recall_report
from .disk import DiskIndex, write_index
from .graph import DynGraph, build_static
from .system import FreshSystem, SystemConfig


@dataclass
class ExperimentSpec:
    """Knobs for one experiment run; unused fields are ignored by drivers."""

    data: str | None = None
    format: str = "fvecs"
    n: int = 10000
    dim: int = 32
    clusters: int = 16
    seed: int = 0
    R: int = 32
    L_c: int = 50
    alpha: float = 1.2
    B: int = 16                  # PQ bytes per vector
    M: int = 10000               # temp cap for stream runs
    Ls: tuple = (20, 30, 50, 75, 100)
    k: int = 5
    queries: int = 200
    cycles: int = 20
    delete_frac: float = 0.1
    insert_frac: float = 0.1
    policy: str = "fresh"        # fresh | fresh_alpha1 | policy_a
    passes: int = 1
    workers: tuple = (2, 1, 2)   # insert, delete, search streams
    merge_threads: int = 1
    duration: float = 20.0
    disk: bool = False
    out: str = "runs"

    def __post_init__(self):
        if not 0.0 <= self.delete_frac <= 1.0:
            raise ValueError("delete fraction must be in [0, 1]")
        if not 0.0 <= self.insert_frac <= 1.0:
            raise ValueError("insert fraction must be in [0, 1]")
        for name in ("n", "dim", "R", "L_c", "B", "M", "k", "queries", "cycles"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class MixtureSampler:
    """Gaussian mixture tied to a seed: the centers are a function of the
    seed alone, so points and queries drawn with different salts share the
    same distribution."""

    def __init__(self, dim: int, clusters: int, seed: int):
        self.dim, self.clusters, self.seed = dim, clusters, seed
        self.centers = np.random.default_rng(seed).normal(
            scale=4.0, size=(clusters, dim))

    def sample(self, n: int, salt: int = 0) -> np.ndarray:
        rng = np.random.default_rng((self.seed, salt))
        labels = rng.integers(self.clusters, size=n)
        return (self.centers[labels] + rng.normal(size=(n, self.dim))).astype(np.float32)


def synthetic(n: int, dim: int, clusters: int, seed: int, salt: int = 0) -> np.ndarray:
    """Gaussian-mixture points: enough cluster structure to make neighbor
    search non-trivial, unlike uniform noise."""
    return MixtureSampler(dim, clusters, seed).sample(n, salt)


def load_or_generate(spec: ExperimentSpec) -> VectorSet:
    if spec.data:
        return load_vectors(spec.data, spec.format)
    return VectorSet.from_array(synthetic(spec.n, spec.dim, spec.clusters, spec.seed))


def make_queries(spec: ExperimentSpec) -> np.ndarray:
    return synthetic(spec.queries, spec.dim, spec.clusters, spec.seed, salt=1)


def percentile(values, p: float) -> float:
    """Nearest-rank percentile over a full sort."""
    data = sorted(values)
    if not data:
        return 0.0
    rank = max(1, int(np.ceil(p / 100.0 * len(data))))
    return float(data[rank - 1])


def latency_summary(seconds) -> dict:
    if not len(seconds):
        return {"mean": 0.0, "p50": 0.0, "p90": 0.0, "p99": 0.0}
    return {
        "mean": float(np.mean(seconds)),
        "p50": percentile(seconds, 50),
        "p90": percentile(seconds, 90),
        "p99": percentile(seconds, 99),
    }


class RunLog:
    """Append-only JSONL event log consumed by cmd_report."""

    def __init__(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.path = path
        self._f = open(path, "w")

    def emit(self, kind: str, **fields):
        self._f.write(json.dumps({"kind": kind, **fields}) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def graph_recall(g: DynGraph, queries, gt, k, L_s) -> float:
    results = [g.greedy_search(q, k, L_s).top_k for q in queries]
    return recall_report(results, gt, k).mean


def disk_recall(index: DiskIndex, queries, gt, k, L_s, W=4, filter_ids=frozenset()) -> float:
    results = [index.beam_search(q, k, L_s, W, filter_ids)[0].top_k for q in queries]
    return recall_report(results, gt, k).mean


def pick_Ls(recalls: dict, target: float):
    """Smallest L_s reaching target recall, else the best available."""
    for L_s in sorted(recalls):
        if recalls[L_s] >= target:
            return L_s
    return max(recalls, key=lambda L: recalls[L])


def cmd_build(spec: ExperimentSpec) -> dict:
    """Static build + recall-vs-L_s sweep; optionally also the disk index."""
    vs = load_or_generate(spec)
    queries = make_queries(spec)
    gt = ground_truth(vs, queries, spec.k)
    t0 = time.time()
    g = build_static(vs, R=spec.R, L_c=spec.L_c, alpha=spec.alpha,
                     passes=spec.passes, seed=spec.seed)
    build_s = time.time() - t0
    sweep = {int(L): graph_recall(g, queries, gt, spec.k, L)
             for L in spec.Ls if L >= spec.k}

    os.makedirs(spec.out, exist_ok=True)
    log = RunLog(os.path.join(spec.out, "build.jsonl"))
    report = {"n": vs.count, "dim": vs.dim, "build_seconds": build_s,
              "recall_sweep": sweep, "max_degree": g.max_degree()}
    log.emit("build", **report)

    snap = os.path.join(spec.out, "index.fvg")
    g.save(snap)
    report["snapshot"] = snap
    if spec.disk:
        t1 = time.time()
        cb = pq.train_codebook(vs, m=spec.B, seed=spec.seed)
        index = write_index(g, cb, os.path.join(spec.out, "index.lti"))
        disk_sweep = {int(L): disk_recall(index, queries, gt, spec.k, L)
                      for L in spec.Ls if L >= spec.k}
        report["disk_build_seconds"] = time.time() - t1
        report["disk_recall_sweep"] = disk_sweep
        report["disk_path"] = index.path
        log.emit("build_disk", seconds=report["disk_build_seconds"],
                 recall_sweep=disk_sweep)
        index.close()
    _write_csv(os.path.join(spec.out, "recall_sweep.csv"),
               ["L_s", "recall"], [(L, r) for L, r in sorted(sweep.items())])
    log.close()
    return report


def run_cycles(vs: VectorSet, spec: ExperimentSpec, log: RunLog | None = None,
               target: float = 0.95) -> dict:
    """Delete a fraction, consolidate under the chosen policy, reinsert the
    same points; track recall at a fixed L_s across cycles."""
    alpha = 1.0 if spec.policy == "fresh_alpha1" else spec.alpha
    policy = "policy_a" if spec.policy == "policy_a" else "fresh"
    rng = np.random.default_rng(spec.seed + 2)
    queries = make_queries(spec)
    gt = ground_truth(vs, queries, spec.k)

    g = build_static(vs, R=spec.R, L_c=spec.L_c, alpha=alpha,
                     passes=spec.passes, seed=spec.seed)
    sweep = {int(L): graph_recall(g, queries, gt, spec.k, L)
             for L in spec.Ls if L >= spec.k}
    L_s = pick_Ls(sweep, target)
    series = [sweep[L_s]]
    if log:
        log.emit("cycle", policy=spec.policy, cycle=0, recall=series[0], L_s=L_s)

    index_of = {int(node_id): i for i, node_id in enumerate(vs.ids)}
    n_del = int(round(spec.delete_frac * vs.count))
    for cycle in range(1, spec.cycles + 1):
        victims = rng.choice(vs.ids, n_del, replace=False) if n_del else []
        for node_id in victims:
            g.delete_point(int(node_id))
        g.consolidate_deletes(policy)
        for node_id in victims:
            i = index_of[int(node_id)]
            g.insert_point(vs.data[i], int(node_id))
        r = graph_recall(g, queries, gt, spec.k, L_s)
        series.append(r)
        if log:
            log.emit("cycle", policy=spec.policy, cycle=cycle, recall=r, L_s=L_s)
    return {"policy": spec.policy, "L_s": L_s, "recall": series,
            "max_degree": g.max_degree()}


def cmd_cycles(spec: ExperimentSpec) -> dict:
    vs = load_or_generate(spec)
    os.makedirs(spec.out, exist_ok=True)
    log = RunLog(os.path.join(spec.out, "cycles.jsonl"))
    report = run_cycles(vs, spec, log)
    _write_csv(os.path.join(spec.out, f"cycles_{spec.policy}.csv"),
               ["cycle", "recall", "L_s"],
               [(i, r, report["L_s"]) for i, r in enumerate(report["recall"])])
    log.close()
    return report


def cmd_stream(spec: ExperimentSpec, root=None) -> dict:
    """Drive a full engine with concurrent insert/delete/search workers and
    background merges; reports latency percentiles, throughput, recall probes,
    and merge phase timings."""
    rng = np.random.default_rng(spec.seed)
    os.makedirs(spec.out, exist_ok=True)
    root = root or os.path.join(spec.out, "engine")
    log = RunLog(os.path.join(spec.out, "stream.jsonl"))

    init = VectorSet.from_array(synthetic(spec.n, spec.dim, spec.clusters, spec.seed))
    config = SystemConfig(dim=spec.dim, R=spec.R, alpha=spec.alpha, L_c=spec.L_c,
                          pq_m=spec.B, temp_cap=spec.M,
                          merge_workers=spec.merge_threads,
                          default_L_s=max(spec.Ls))
    system = FreshSystem.create(root, config, initial=init, seed=spec.seed)

    n_ins, n_del, n_search = spec.workers
    stop = threading.Event()
    lat = {"insert": [], "delete": [], "search": []}
    lat_lock = threading.Lock()
    acked: list = []
    acked_lock = threading.Lock()
    errors: list = []

    sampler = MixtureSampler(spec.dim, spec.clusters, spec.seed)

    def inserter(worker_seed):
        r = np.random.default_rng(worker_seed)
        while not stop.is_set():
            v = sampler.sample(1, salt=int(r.integers(2**31)))[0]
            t0 = time.perf_counter()
            try:
                node_id = system.insert(v)
            except Exception as e:  # pragma: no cover - surfaced in report
                errors.append(repr(e))
                return
            dt = time.perf_counter() - t0
            with acked_lock:
                acked.append(node_id)
            with lat_lock:
                lat["insert"].append(dt)

    def deleter(worker_seed):
        r = np.random.default_rng(worker_seed)
        while not stop.is_set():
            with acked_lock:
                pool = acked[-spec.M:] if acked else []
            if not pool:
                time.sleep(0.001)
                continue
            victim = int(pool[int(r.integers(len(pool)))])
            t0 = time.perf_counter()
            try:
                system.delete(victim)
            except (KeyError, ValueError):
                continue
            with lat_lock:
                lat["delete"].append(time.perf_counter() - t0)
            time.sleep(spec.delete_frac * 0.01)

    def searcher(worker_seed):
        r = np.random.default_rng(worker_seed)
        while not stop.is_set():
            q = sampler.sample(1, salt=int(r.integers(2**31)))[0]
            t0 = time.perf_counter()
            try:
                res = system.search(q, spec.k, max(spec.Ls))
            except Exception as e:  # pragma: no cover
                errors.append(repr(e))
                return
            with lat_lock:
                lat["search"].append(time.perf_counter() - t0)
            bad = set(res.top_k) & system.deleted
            if bad:
                errors.append(f"deleted ids in results: {bad}")

    threads = [threading.Thread(target=inserter, args=(spec.seed + 10 + i,))
               for i in range(n_ins)]
    threads += [threading.Thread(target=deleter, args=(spec.seed + 50 + i,))
                for i in range(n_del)]
    threads += [threading.Thread(target=searcher, args=(spec.seed + 90 + i,))
                for i in range(n_search)]
    t_start = time.time()
    for t in threads:
        t.start()
    while time.time() - t_start < spec.duration:
        time.sleep(1.0)
        with lat_lock:
            snapshot = {op: latency_summary(vals[-2000:]) for op, vals in lat.items()}
        log.emit("probe", t=time.time() - t_start,
                 temp_points=system.temp_points(),
                 merges=len(system.merge_reports), **{
                     f"{op}_{k}": v for op, s in snapshot.items() for k, v in s.items()})
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.time() - t_start

    for i, rep in enumerate(system.merge_reports):
        log.emit("merge", seq=i, phase_seconds=rep.phase_seconds,
                 counts=rep.counts, read_passes=rep.read_passes,
                 write_passes=rep.write_passes)

    live = system.live_ids()
    report = {
        "elapsed": elapsed,
        "ops": {op: len(vals) for op, vals in lat.items()},
        "throughput": {op: len(vals) / elapsed for op, vals in lat.items()},
        "latency": {op: latency_summary(vals) for op, vals in lat.items()},
        "merges": len(system.merge_reports),
        "live_points": len(live),
        "temp_points": system.temp_points(),
        "errors": errors,
    }
    log.emit("summary", **{k: v for k, v in report.items() if k != "errors"},
             n_errors=len(errors))
    log.close()
    system.close()
    return report


def cmd_report(log_path, out_dir) -> list:
    """Convert a JSONL run log into per-kind CSV tables."""
    os.makedirs(out_dir, exist_ok=True)
    by_kind: dict = {}
    if os.path.getsize(log_path):
        with open(log_path) as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                by_kind.setdefault(rec.pop("kind"), []).append(_flatten(rec))
    written = []
    for kind, rows in sorted(by_kind.items()):
        cols = sorted({c for row in rows for c in row})
        path = os.path.join(out_dir, f"{kind}.csv")
        _write_csv(path, cols, [[row.get(c, "") for c in cols] for row in rows])
        written.append(path)
    if not written:  # an empty log still yields a header-only table
        path = os.path.join(out_dir, "empty.csv")
        _write_csv(path, ["kind"], [])
        written.append(path)
    return written


def _flatten(rec, prefix=""):
    flat = {}
    for key, value in rec.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
