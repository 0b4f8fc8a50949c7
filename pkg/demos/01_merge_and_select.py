"""Segmented attention: the always-kept sink/local tokens plus a top-k block
selection from the offloaded middle, merged through log-sum-exp partials.

The first block (the needle) removes most of the error; what is left is the
diffuse tail, which shrinks only slowly as the budget grows.

Run: python demos/01_merge_and_select.py
"""
import numpy as np

from fluxattn.attention import SegmentedKvCache, full_attention, merge
from fluxattn.blocks import build_metadata, select_budget, sparse_attention

rng = np.random.default_rng(0)
D, L = 64, 2368
K, V = rng.standard_normal((L, D)), 1.0 + rng.standard_normal((L, D))
# plant a needle with a distinctive value in the cpu segment that the query points at
K[1000:1004] += 20 * np.eye(D)[2]
V[1000:1004] = 8 * np.eye(D)[5]
q = 4 * np.eye(D)[2] + 0.5 * rng.standard_normal(D)

cache = SegmentedKvCache.split(K, V, sink=64, local=256)
full = full_attention(q, K, V)
print(f"L_sink={cache.l_sink} L_cpu={cache.l_cpu} L_local={cache.l_local}")

for blk in (16, 32, 64, 128):
    meta = build_metadata(cache.k_cpu, blk)
    for bgt in (0.0, 0.01, 0.05, 0.2):
        sel = select_budget(q, meta, bgt)
        o = merge(cache.default_partials(q) + [sparse_attention(q, cache, sel)]).o
        err = np.linalg.norm(o - full) / np.linalg.norm(full)
        print(f"blk={blk:4d} bgt={bgt:4.2f} blocks={len(sel.selected_blocks):3d} rel.err={err:.4f}")
