"""Per-head output-error budgets on a planted workload and the log-linear
granularity model fitted to them.

Run: python demos/02_head_budgets.py
"""
import numpy as np

from fluxattn.pipeline import label_workload
from fluxattn.workload import WorkloadSpec, generate

w = generate(WorkloadSpec(seed=0, layers=1, steps=1))
_, records = label_workload(w, tau=0.10)
print(f"{'head':>4} {'kind':>9} {'bgt@1':>7} {'@16':>7} {'@32':>7} {'@64':>7} {'@128':>7} {'k':>8} streaming")
for r in records:
    kind = w.archetypes[r["layer"]][r["head"]]
    cols = " ".join(f"{r[f'bgt_{b}']:7.4f}" for b in (1, 16, 32, 64, 128))
    print(f"{r['head']:4d} {kind:>9} {cols} {r['k']:8.5f} {r['streaming']}")
print("mean budget at blk=16:", np.mean([r["bgt_16"] for r in records]))
