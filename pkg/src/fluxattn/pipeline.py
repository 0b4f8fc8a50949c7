"""End-to-end glue: label workloads, plan groups, measure deviation and schedule cost."""
from dataclasses import dataclass, field

import numpy as np

from .attention import GroupView, PartialOutput, merge
from .blocks import select_budget, sparse_attention
from .budget import (
    CANDIDATE_BLKS,
    ErrorBudgetConfig,
    HeadProbe,
    HeadProperties,
    cached_metadata,
    label_head,
    make_probes,
    min_budget,
    score_coverage_selection,
)
from .features import N_FEATURES, layer_decode, layer_prefill
from .predictor import LabelDataset
from .scheduler import default_workers, enqueue_batch, run, run_baseline, task_from_plan
from .selector import GroupPlan, fixed_plan, plan_group, volume


def label_workload(workload, sample=0, tau=0.10, steps=None):
    """Feature rows and oracle labels for every (layer, head, decode step).

    Returns the dataset and a list of per-row budget records (budget per
    label granularity plus the free-intercept fit) for curve diagnostics.
    """
    spec = workload.spec
    cfg = ErrorBudgetConfig(tau=tau)
    steps = range(1, spec.steps + 1) if steps is None else steps
    cols = {k: [] for k in ("sample", "layer", "head", "step", "X", "Y")}
    records = []
    for layer in range(spec.layers):
        caches = workload.caches(layer)
        anchors = workload.query(layer, 0)
        anchor_probes = make_probes(anchors, caches, spec.group_size)
        stats = layer_prefill(anchors, caches, spec.group_size, layer, anchor_probes, tau)
        for step in steps:
            queries = workload.query(layer, step)
            feats = layer_decode(queries, caches, spec.group_size, stats)
            for h, probe in enumerate(make_probes(queries, caches, spec.group_size)):
                lab = label_head(probe, cfg)
                cols["sample"].append(sample)
                cols["layer"].append(layer)
                cols["head"].append(h)
                cols["step"].append(step)
                cols["X"].append(feats[h].values)
                cols["Y"].append((lab.props.bgt0, lab.props.k, float(lab.props.streaming)))
                records.append({
                    "sample": sample, "layer": layer, "head": h, "step": step,
                    **{f"bgt_{b}": v for b, v in lab.budgets.items()},
                    "bgt0": lab.props.bgt0, "k": lab.props.k, "intercept": lab.intercept,
                    "streaming": lab.props.streaming, "saturated": lab.saturated,
                })
    ds = LabelDataset(
        np.asarray(cols["sample"], dtype=np.int64),
        np.asarray(cols["layer"], dtype=np.int64),
        np.asarray(cols["head"], dtype=np.int64),
        np.asarray(cols["step"], dtype=np.int64),
        np.asarray(cols["X"], dtype=np.float64).reshape(-1, N_FEATURES),
        np.asarray(cols["Y"], dtype=np.float64).reshape(-1, 3),
    )
    return ds, records


@dataclass
class LayerStep:
    """One layer of one sequence at one decode step."""

    seq: int
    layer: int
    step: int
    caches: list
    queries: np.ndarray
    group_size: int
    probes: list
    stats: list = None

    @property
    def l_cpu(self):
        return self.caches[0].l_cpu

    @property
    def kv_heads(self):
        return len(self.caches)


def iter_layer_steps(workloads, tau=0.10, with_features=False, steps=None):
    for seq, w in enumerate(workloads):
        spec = w.spec
        for layer in range(spec.layers):
            caches = w.caches(layer)
            stats = None
            if with_features:
                anchors = w.query(layer, 0)
                stats = layer_prefill(anchors, caches, spec.group_size, layer,
                                      make_probes(anchors, caches, spec.group_size), tau)
            for step in (range(1, spec.steps + 1) if steps is None else steps):
                q = w.query(layer, step).astype(np.float64)
                yield LayerStep(seq, layer, step, caches, q, spec.group_size,
                                make_probes(q, caches, spec.group_size), stats)


# -- strategies: LayerStep -> list of GroupPlan (one per KV group) ----------------

def _groups(ls):
    G = ls.group_size
    return [list(range(g * G, (g + 1) * G)) for g in range(ls.kv_heads)]


def plans_from_props(ls, props):
    return [plan_group(g, [props[h] for h in heads], ls.l_cpu) for g, heads in enumerate(_groups(ls))]


def oracle_props(ls, tau):
    cfg = ErrorBudgetConfig(tau=tau)
    return [label_head(p, cfg).props for p in ls.probes]


def predicted_props(ls, model):
    feats = np.stack([f.values for f in layer_decode(ls.queries, ls.caches, ls.group_size, ls.stats)])
    bgt0, k, s = model.predict(feats)
    return [HeadProperties(float(b), float(kk), bool(p >= 0.5)) for b, kk, p in zip(bgt0, k, s)]


def full_plans(ls):
    G = ls.group_size
    return [GroupPlan(g, 1, (1.0,) * G, 2.0 * ls.l_cpu * G, False, {}, ls.l_cpu) for g in range(ls.kv_heads)]


def fixed_plans(ls, blk, bgt):
    return [fixed_plan(g, ls.group_size, ls.l_cpu, blk, bgt) for g in range(ls.kv_heads)]


def _plans_from_budgets(ls, budgets, blk):
    plans = []
    for g, heads in enumerate(_groups(ls)):
        b = tuple(budgets[h] for h in heads)
        if all(x == 0 for x in b):
            plans.append(GroupPlan(g, None, b, 0.0, True, {}, ls.l_cpu))
        else:
            v = volume(blk, ls.l_cpu, b)
            plans.append(GroupPlan(g, blk, b, v, False, {blk: v}, ls.l_cpu))
    return plans


def score_plans(ls, coverage=0.95, blk=16):
    """Score-coverage baseline: per-head budget covering ``coverage`` of attention mass."""
    budgets = []
    for p in ls.probes:
        sel = score_coverage_selection(p, coverage, blk)
        budgets.append(len(sel.selected_blocks) * blk / ls.l_cpu if ls.l_cpu else 0.0)
    return _plans_from_budgets(ls, [min(b, 1.0) for b in budgets], blk)


def output_only_plans(ls, tau=0.10, blk=16):
    """Per-head deviation budget normalised by the head's own output norm."""
    budgets = []
    for p in ls.probes:
        own = float(np.linalg.norm(p.full_output))
        probe = HeadProbe(p.q, p.cache, p.full_output, own) if own > 0 else p
        budgets.append(min_budget(probe, blk, tau).budget)
    return _plans_from_budgets(ls, budgets, blk)


# -- realisation ------------------------------------------------------------------

def head_selection(ls, plan, j):
    h = plan.group * ls.group_size + j
    cache = ls.caches[plan.group]
    if plan.streaming_group or plan.budgets[j] == 0:
        return h, None
    return h, select_budget(ls.queries[h], cached_metadata(cache, plan.blk), plan.budgets[j])


def measure(ls, plans):
    """Per-head (deviation, realised cpu budget) under the given plans."""
    out = []
    for plan in plans:
        for j in range(len(plan.budgets)):
            h, sel = head_selection(ls, plan, j)
            probe = ls.probes[h]
            if sel is None:
                out.append((probe.default_deviation(), 0.0))
            else:
                out.append((probe.deviation(sel), sel.budget_realized))
    return out


def group_payload(ls, plan):
    """Callable computing every head's merged output for one group (executed-mode task body)."""
    cache = ls.caches[plan.group]
    view = GroupView(tuple(range(plan.group * ls.group_size, (plan.group + 1) * ls.group_size)),
                     ls.queries[plan.group * ls.group_size:(plan.group + 1) * ls.group_size], cache)

    def body():
        outs = []
        for j, q in enumerate(view.queries):
            _, sel = head_selection(ls, plan, j)
            part = sparse_attention(q, cache, sel) if sel is not None else PartialOutput.empty(cache.dim)
            outs.append(merge(cache.default_partials(q) + [part]).o)
        return np.stack(outs)

    return body


@dataclass
class StrategyResult:
    name: str
    deviations: np.ndarray
    budgets: np.ndarray
    makespan: float
    accel_idle_ratio: float
    tasks: int
    plans: list = field(default_factory=list, repr=False)

    def summary(self, tau):
        d = self.deviations
        return {
            "strategy": self.name,
            "heads": int(d.size),
            "dev_mean": float(d.mean()),
            "dev_p90": float(np.quantile(d, 0.9)),
            "dev_max": float(d.max()),
            "frac_within_tau": float(np.mean(d <= tau)),
            "budget_mean": float(self.budgets.mean()),
            "makespan": self.makespan,
            "accel_idle_ratio": self.accel_idle_ratio,
            "tasks": self.tasks,
        }


def evaluate_strategy(name, layer_steps, planner, workers=None, policy="priority", keep_plans=False):
    """Run ``planner`` on every LayerStep, measure deviations, and schedule each
    (layer, step) batch of groups across all sequences."""
    workers = workers or default_workers()
    batches = {}
    devs, budgets, kept = [], [], []
    for ls in layer_steps:
        plans = planner(ls)
        for d, b in measure(ls, plans):
            devs.append(d)
            budgets.append(b)
        batch = batches.setdefault((ls.layer, ls.step), [])
        for p in plans:
            if not p.streaming_group:
                gid = ls.seq * ls.kv_heads + p.group
                batch.append(task_from_plan(p, ls.caches[0].dim, group=gid))
        if keep_plans:
            kept.extend((ls.seq, ls.layer, ls.step, p) for p in plans)
    makespan, idle, n_tasks = 0.0, [], 0
    for key in sorted(batches):
        tasks = batches[key]
        n_tasks += len(tasks)
        q = enqueue_batch(tasks)
        rep = run(q, workers, "simulated") if policy == "priority" else run_baseline(q, workers, policy)
        makespan += rep.makespan
        acc = [w for w in rep.workers if w.kind == "accelerator"]
        if acc and rep.makespan > 0:
            idle.append(acc[0].idle_ratio)
    return StrategyResult(name, np.asarray(devs), np.asarray(budgets), makespan,
                          float(np.mean(idle)) if idle else 1.0, n_tasks, kept)


def planners(tau=0.10, model=None, fixed=((16, 0.05), (16, 0.02), (32, 0.05), (32, 0.02))):
    out = {"FULL": full_plans}
    for blk, bgt in fixed:
        out[f"fixed({blk},{bgt})"] = lambda ls, blk=blk, bgt=bgt: fixed_plans(ls, blk, bgt)
    out["Score(95%)"] = lambda ls: score_plans(ls, 0.95, 16)
    out[f"Output({tau:.0%})"] = lambda ls: output_only_plans(ls, tau, 16)
    out["oracle"] = lambda ls: plans_from_props(ls, oracle_props(ls, tau))
    if model is not None:
        out["adaptive"] = lambda ls: plans_from_props(ls, predicted_props(ls, model))
    return out


__all__ = [
    "CANDIDATE_BLKS", "LayerStep", "StrategyResult", "evaluate_strategy", "iter_layer_steps",
    "label_workload", "measure", "planners", "plans_from_props", "oracle_props", "predicted_props",
]
