"""Priority-based dispatch of sparse-attention group tasks over host and accelerator workers.

Workers pull from one shared priority queue (largest data-access volume
first) and take a new task only after finishing the current one. The
accelerator is a cost model: launch latency + transfer over the host link +
compute. ``simulated`` mode replays that model as a discrete-event schedule;
``executed`` mode runs the task payloads on real threads to exercise the
queue's concurrency contract.
"""
import csv
import heapq
import itertools
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import FluxError

BF16_BYTES = 2


@dataclass(frozen=True)
class WorkerProfile:
    kind: str
    name: str
    bandwidth: float
    compute_rate: float
    launch_latency: float = 0.0
    cores: int = 1

    def __post_init__(self):
        if self.kind not in ("host", "accelerator"):
            raise FluxError("bad-worker", f"unknown worker kind {self.kind!r}")
        if self.bandwidth <= 0 or self.compute_rate <= 0 or self.cores < 1 or self.launch_latency < 0:
            raise FluxError("bad-worker", f"non-positive rate in {self}")

    def service_time(self, task):
        return self.launch_latency + task.bytes_moved / self.bandwidth + task.flops / self.compute_rate


def host_profile(bandwidth=57e9, cores=20, per_core_flops=50e9, name="host"):
    """Host pool: one worker that streams at the aggregate memory bandwidth across ``cores``."""
    return WorkerProfile("host", name, bandwidth, cores * per_core_flops, 0.0, cores)


def accelerator_profile(link_bandwidth=32e9, flops=100e12, launch_latency=5e-6, name="accelerator"):
    return WorkerProfile("accelerator", name, link_bandwidth, flops, launch_latency)


def default_workers():
    return [host_profile(), accelerator_profile()]


@dataclass
class SparseTask:
    group: int
    priority: float
    bytes_moved: float
    flops: float = 0.0
    n_heads: int = 1
    l_cpu: int = 0
    plan: object = None
    run: object = field(default=None, repr=False)


def task_from_plan(plan, dim, group=None, run=None, elem_bytes=BF16_BYTES):
    """Turn a group plan into a task whose cost is its data-access volume in bytes."""
    from .selector import priority

    v = priority(plan)
    return SparseTask(
        plan.group if group is None else group,
        v,
        v * dim * elem_bytes,
        2.0 * v * dim,
        len(plan.budgets),
        plan.l_cpu,
        plan,
        run,
    )


class TaskQueue:
    """Max-priority queue with atomic pop; equal priorities go to the lower group id."""

    def __init__(self, tasks=()):
        self._lock = threading.Lock()
        self._heap = []
        self._counter = itertools.count()
        for t in tasks:
            heapq.heappush(self._heap, (-t.priority, t.group, next(self._counter), t))

    def pop(self):
        with self._lock:
            if not self._heap:
                return None
            return heapq.heappop(self._heap)[-1]

    def __len__(self):
        with self._lock:
            return len(self._heap)

    def snapshot(self):
        """Tasks in pop order, without consuming the queue."""
        with self._lock:
            return [entry[-1] for entry in sorted(self._heap)]


def enqueue_batch(tasks):
    tasks = list(tasks)
    groups = [t.group for t in tasks]
    if len(set(groups)) != len(groups):
        raise FluxError("duplicate-task", "group ids must be unique within a batch")
    return TaskQueue(tasks)


@dataclass
class WorkerStats:
    name: str
    kind: str
    busy: float = 0.0
    idle: float = 0.0
    idle_ratio: float = 0.0
    tasks: int = 0


@dataclass
class ScheduleReport:
    mode: str
    policy: str
    makespan: float
    workers: list
    trace: list
    completions: dict
    results: dict = field(default_factory=dict, repr=False)
    failed: list = field(default_factory=list)
    aborted: bool = False

    def worker(self, kind):
        return next(w for w in self.workers if w.kind == kind)

    def to_dict(self):
        return {
            "mode": self.mode,
            "policy": self.policy,
            "makespan": self.makespan,
            "workers": [vars(w) for w in self.workers],
            "completions": {str(k): v for k, v in self.completions.items()},
            "failed": list(self.failed),
            "aborted": self.aborted,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_trace(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "worker", "start", "end"])
            w.writerows(self.trace)


def _finish(mode, policy, workers, trace, results=None, failed=(), aborted=False):
    makespan = max((end for *_, end in trace), default=0.0)
    stats = []
    for prof in workers:
        spans = [end - start for _, name, start, end in trace if name == prof.name]
        busy = float(sum(spans))
        idle = max(makespan - busy, 0.0)
        stats.append(WorkerStats(prof.name, prof.kind, busy, idle, idle / makespan if makespan > 0 else 0.0, len(spans)))
    completions = {task: end for task, _, _, end in trace}
    return ScheduleReport(mode, policy, makespan, stats, trace, completions, results or {}, list(failed), aborted)


def _check_workers(workers):
    names = [w.name for w in workers]
    if not workers or len(set(names)) != len(names):
        raise FluxError("bad-worker", "need at least one worker, with unique names")


def simulate(queue, workers, policy="priority"):
    """Greedy list schedule: whichever worker frees first pulls the next task."""
    _check_workers(workers)
    free = [(0.0, i) for i in range(len(workers))]
    heapq.heapify(free)
    trace = []
    while (task := queue.pop()) is not None:
        t, i = heapq.heappop(free)
        end = t + workers[i].service_time(task)
        trace.append((task.group, workers[i].name, t, end))
        heapq.heappush(free, (end, i))
    return _finish("simulated", policy, workers, trace)


def host_threads(cores):
    """Host compute threads: capped by FLUXATTN_THREADS, one core kept back for dispatch."""
    cap = int(os.environ.get("FLUXATTN_THREADS", cores))
    return max(1, min(cores, cap) - 1)


def execute(queue, workers, policy="priority"):
    """Run task payloads on threads: ``host_threads`` per host profile plus one per accelerator.

    Timings are wall-clock. Accelerator threads additionally record the
    modeled service time per task under ``results[group]['modeled']``.
    """
    _check_workers(workers)
    lock = threading.Lock()
    trace, results, failed = [], {}, []
    stop = threading.Event()
    t0 = time.perf_counter()

    def loop(prof, label):
        while not stop.is_set():
            task = queue.pop()
            if task is None:
                return
            start = time.perf_counter() - t0
            try:
                out = task.run() if task.run is not None else None
            except Exception as exc:  # a failing payload aborts the step
                with lock:
                    failed.append((task.group, repr(exc)))
                stop.set()
                return
            end = time.perf_counter() - t0
            entry = {"output": out, "worker": label}
            if prof.kind == "accelerator":
                entry["modeled"] = prof.service_time(task)
            with lock:
                results[task.group] = entry
                trace.append((task.group, prof.name, start, end))

    threads = []
    for prof in workers:
        n = host_threads(prof.cores) if prof.kind == "host" else 1
        for j in range(n):
            threads.append(threading.Thread(target=loop, args=(prof, f"{prof.name}:{j}"), daemon=True))
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    # per-thread spans on the same profile overlap; report busy as the union per profile
    report = _finish("executed", policy, workers, sorted(trace, key=lambda r: (r[2], r[0])),
                     results, [g for g, _ in failed], bool(failed))
    for ws in report.workers:
        spans = sorted((s, e) for _, name, s, e in trace if name == ws.name)
        ws.busy = _union_length(spans)
        ws.idle = max(report.makespan - ws.busy, 0.0)
        ws.idle_ratio = ws.idle / report.makespan if report.makespan > 0 else 0.0
    return report


def _union_length(spans):
    total, cur_s, cur_e = 0.0, None, None
    for s, e in spans:
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def run(queue, workers, mode="simulated"):
    if mode in ("simulated", "sim"):
        return simulate(queue, workers)
    if mode in ("executed", "exec"):
        return execute(queue, workers)
    raise FluxError("bad-mode", f"unknown mode {mode!r}")


def _static(assignment, workers, policy):
    trace = []
    for prof, tasks in zip(workers, assignment):
        t = 0.0
        for task in tasks:
            end = t + prof.service_time(task)
            trace.append((task.group, prof.name, t, end))
            t = end
    return _finish("simulated", policy, workers, trace)


def run_baseline(queue, workers, policy):
    """Static placement baselines, evaluated with the same cost model as :func:`simulate`.

    ``no_parallel`` runs everything serially on the first host worker.
    ``uniform`` splits tasks (in group order) so each worker gets an equal
    share of attention heads. ``length``/``length_based`` assigns largest
    context-length estimates first to the worker with the earliest projected
    finish, ignoring per-head budgets.
    """
    _check_workers(workers)
    tasks = []
    while (t := queue.pop()) is not None:
        tasks.append(t)
    if policy == "no_parallel":
        host = next((i for i, w in enumerate(workers) if w.kind == "host"), 0)
        assignment = [[] for _ in workers]
        assignment[host] = tasks
    elif policy == "uniform":
        tasks.sort(key=lambda t: t.group)
        total = sum(t.n_heads for t in tasks)
        share = total / len(workers) if total else 1.0
        assignment = [[] for _ in workers]
        seen = 0
        for t in tasks:
            assignment[min(int(seen // share), len(workers) - 1)].append(t)
            seen += t.n_heads
    elif policy in ("length", "length_based"):
        est = {t.group: float(t.n_heads) * t.l_cpu for t in tasks}
        projected = [0.0] * len(workers)
        assignment = [[] for _ in workers]
        for t in sorted(tasks, key=lambda t: (-est[t.group], t.group)):
            finish = [projected[i] + w.launch_latency + est[t.group] / w.bandwidth for i, w in enumerate(workers)]
            i = int(np.argmin(finish))
            projected[i] = finish[i]
            assignment[i].append(t)
    else:
        raise FluxError("bad-policy", f"unknown baseline policy {policy!r}")
    return _static(assignment, workers, policy)


def makespan_lower_bound(tasks, workers):
    """max(longest task on its fastest worker, total fastest-worker time / worker count)."""
    best = [min(w.service_time(t) for w in workers) for t in tasks]
    if not best:
        return 0.0
    return max(max(best), sum(best) / len(workers))
