"""End to end on one default sequence: fixed (blk, bgt) baselines, the
score-coverage baseline, oracle head properties, and (optionally) a trained
predictor, compared on measured deviation and simulated attention time.

Run: python demos/03_adaptive_vs_fixed.py [model.fxp]
"""
import sys

from fluxattn.pipeline import evaluate_strategy, iter_layer_steps, planners
from fluxattn.predictor import load_model
from fluxattn.workload import WorkloadSpec, generate

model = load_model(sys.argv[1]) if len(sys.argv) > 1 else None
steps = list(iter_layer_steps([generate(WorkloadSpec(seed=0))], with_features=model is not None))
print(f"{'strategy':>16} {'within tau':>10} {'dev p90':>8} {'budget':>7} {'makespan (us)':>13}")
for name, planner in planners(0.10, model=model).items():
    s = evaluate_strategy(name, steps, planner).summary(0.10)
    print(f"{name:>16} {s['frac_within_tau']:10.3f} {s['dev_p90']:8.4f} {s['budget_mean']:7.4f} "
          f"{1e6 * s['makespan']:13.1f}")
