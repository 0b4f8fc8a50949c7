import numpy as np
import pytest

from fluxattn.attention import full_attention
from fluxattn.pipeline import (
    evaluate_strategy,
    group_payload,
    iter_layer_steps,
    label_workload,
    measure,
    oracle_props,
    planners,
    plans_from_props,
)
from fluxattn.predictor import PredictorModel
from fluxattn.selector import fixed_plan
from fluxattn.workload import WorkloadSpec, generate

SPEC = WorkloadSpec(seed=21, layers=1, heads=8, steps=2)


@pytest.fixture(scope="module")
def layer_steps():
    return list(iter_layer_steps([generate(SPEC)], with_features=True))


def test_label_workload_rows():
    ds, records = label_workload(generate(SPEC), sample=3)
    assert len(ds) == len(records) == 1 * 8 * 2
    assert ds.X.shape == (16, 41) and ds.Y.shape == (16, 3)
    assert set(ds.sample) == {3} and set(ds.step) == {1, 2}
    assert np.all((ds.Y[:, 2] == 0) | (ds.Y[:, 2] == 1))


def test_full_plans_are_exact(layer_steps):
    r = evaluate_strategy("FULL", layer_steps, planners()["FULL"])
    assert r.deviations.max() < 1e-9 and np.all(r.budgets == 1.0)


def test_oracle_plans_cover_streaming(layer_steps):
    ls = layer_steps[0]
    props = oracle_props(ls, 0.10)
    for (dev, budget), p in zip(measure(ls, plans_from_props(ls, props)), props):
        if p.streaming:
            assert budget == 0.0 and dev <= 0.10


def test_group_payload_matches_full_at_full_budget(layer_steps):
    ls = layer_steps[0]
    plan = fixed_plan(1, 4, ls.l_cpu, 16, 1.0)
    out = group_payload(ls, plan)()
    cache = ls.caches[1]
    want = np.stack([full_attention(ls.queries[h], *cache.full()) for h in range(4, 8)])
    np.testing.assert_allclose(out, want, rtol=1e-9)


def test_makespan_decreases_with_budget(layer_steps):
    p = planners(fixed=((16, 0.02), (16, 0.2)))
    small = evaluate_strategy("a", layer_steps, p["fixed(16,0.02)"])
    large = evaluate_strategy("b", layer_steps, p["fixed(16,0.2)"])
    assert small.makespan < large.makespan
    assert small.deviations.mean() > large.deviations.mean()


def test_adaptive_planner_runs(layer_steps):
    model = PredictorModel.zeros()
    r = evaluate_strategy("adaptive", layer_steps, planners(model=model)["adaptive"], keep_plans=True)
    # a zero model predicts bgt0 = 0, k = 0, p(streaming) = 0.5 -> every head streaming
    assert r.tasks == 0 and all(p.streaming_group for *_, p in r.plans)


@pytest.mark.parametrize("policy", ["no_parallel", "uniform", "length"])
def test_baseline_policies(layer_steps, policy):
    r = evaluate_strategy("fixed", layer_steps, planners()["fixed(16,0.05)"], policy=policy)
    base = evaluate_strategy("fixed", layer_steps, planners()["fixed(16,0.05)"])
    assert r.makespan > 0 and np.array_equal(r.deviations, base.deviations)


def test_summary_fields(layer_steps):
    s = evaluate_strategy("x", layer_steps, planners()["Output(10%)"]).summary(0.10)
    assert s["frac_within_tau"] == 1.0 and s["heads"] == 16
