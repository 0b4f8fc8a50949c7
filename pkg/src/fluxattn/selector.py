"""Per-group granularity/budget co-selection and task priorities."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .budget import CANDIDATE_BLKS
from .errors import FluxError


def volume(blk, l_cpu, budgets):
    """Data touched by one group, in token-rows: min/max metadata plus the budgeted KV."""
    total = float(np.clip(np.asarray(budgets, dtype=np.float64), 0.0, 1.0).sum())
    return 2.0 * l_cpu / blk + 2.0 * l_cpu * total


def head_budget(props, blk):
    """Budget of one head at ``blk``; streaming heads get 0, negative slopes count as flat."""
    if props.streaming:
        return 0.0
    return float(np.clip(props.bgt0 + max(props.k, 0.0) * np.log2(blk), 0.0, 1.0))


@dataclass(frozen=True)
class GroupPlan:
    group: int
    blk: int
    budgets: tuple
    v_star: float
    streaming_group: bool = False
    candidates: dict = field(default_factory=dict)
    l_cpu: int = 0

    def record(self, **extra):
        rec = asdict(self)
        rec["candidates"] = {str(k): v for k, v in self.candidates.items()}
        rec.update(extra)
        return rec


def plan_group(group, props, l_cpu, candidates=CANDIDATE_BLKS):
    props = list(props)
    if not props:
        raise FluxError("empty-group")
    if all(p.streaming for p in props):
        return GroupPlan(group, None, tuple(0.0 for _ in props), 0.0, True, {}, l_cpu)
    table = {blk: volume(blk, l_cpu, [head_budget(p, blk) for p in props]) for blk in candidates}
    # ties resolve to the coarser granularity
    blk = min(table, key=lambda b: (table[b], -b))
    budgets = tuple(head_budget(p, blk) for p in props)
    return GroupPlan(group, blk, budgets, table[blk], False, table, l_cpu)


def fixed_plan(group, n_heads, l_cpu, blk, bgt):
    """Baseline plan: every head gets the same (blk, bgt), no streaming bypass."""
    budgets = (float(bgt),) * n_heads
    v = volume(blk, l_cpu, budgets)
    return GroupPlan(group, blk, budgets, v, False, {blk: v}, l_cpu)


def priority(plan):
    if plan.streaming_group:
        raise FluxError("not-schedulable", f"group {plan.group} is a streaming group")
    return plan.v_star


def dump_plans(plans, fh, **extra):
    """Write one JSON line per plan."""
    for plan in plans:
        fh.write(json.dumps(plan.record(**extra), sort_keys=True) + "\n")
