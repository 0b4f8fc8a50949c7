"""Slow, independent reference implementations used to check the package.

Nothing here imports the code under test's numerics; each oracle is a
direct transcription of the definition (scalar loops, brute-force scans,
full sorts).
"""
import math

import numpy as np


def attention_loop(q, K, V):
    """Softmax attention with plain Python loops."""
    D = len(q)
    s = [sum(q[d] * K[i][d] for d in range(D)) / math.sqrt(D) for i in range(len(K))]
    m = max(s)
    w = [math.exp(x - m) for x in s]
    z = sum(w)
    return np.array([sum(w[i] * V[i][d] for i in range(len(K))) / z for d in range(len(V[0]))])


def masked_attention(q, K, V, keep):
    """Attention restricted to the token indices in ``keep`` (plain numpy)."""
    keep = np.asarray(sorted(keep))
    s = K[keep] @ q / np.sqrt(len(q))
    w = np.exp(s - s.max())
    return w @ V[keep] / w.sum()


def block_extremes(K, blk):
    mins, maxs = [], []
    for start in range(0, K.shape[0], blk):
        rows = K[start:start + blk]
        mins.append([min(r[d] for r in rows) for d in range(K.shape[1])])
        maxs.append([max(r[d] for r in rows) for d in range(K.shape[1])])
    return np.array(mins), np.array(maxs)


def topk_by_sort(scores, k):
    """Top-k ids by a stable full sort: descending score, ascending id."""
    order = sorted(range(len(scores)), key=lambda b: (-scores[b], b))
    return order[:k]


def deviation_scan(q, cache_parts, blk, tau, normalizer, quest_scores):
    """Smallest block count k whose top-k selection meets tau, by recomputing attention for every k.

    ``cache_parts`` is (K_sink, V_sink, K_cpu, V_cpu, K_local, V_local).
    Returns (k, deviations for k = 0..n_blocks).
    """
    Ks, Vs, Kc, Vc, Kl, Vl = cache_parts
    full = masked_attention(q, np.concatenate([Ks, Kc, Kl]), np.concatenate([Vs, Vc, Vl]),
                            range(len(Ks) + len(Kc) + len(Kl)))
    order = topk_by_sort(quest_scores, len(quest_scores))
    devs = []
    for k in range(len(order) + 1):
        cpu_idx = [i for b in order[:k] for i in range(b * blk, min((b + 1) * blk, len(Kc)))]
        K = np.concatenate([Ks, Kc[cpu_idx], Kl]) if cpu_idx else np.concatenate([Ks, Kl])
        V = np.concatenate([Vs, Vc[cpu_idx], Vl]) if cpu_idx else np.concatenate([Vs, Vl])
        approx = masked_attention(q, K, V, range(len(K)))
        devs.append(np.linalg.norm(approx - full) / normalizer)
    k = next((i for i, d in enumerate(devs) if d <= tau), None)
    return k, devs


def least_squares(x, y):
    """(intercept, slope) from the 2x2 normal equations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.array([[len(x), x.sum()], [x.sum(), (x * x).sum()]])
    b = np.array([y.sum(), (x * y).sum()])
    return tuple(np.linalg.solve(A, b))


def eq3_table(l_cpu, props, blks=(16, 32, 64, 128)):
    """Volume at each candidate granularity, straight from the formula."""
    out = {}
    for blk in blks:
        total = 0.0
        for bgt0, k, streaming in props:
            if not streaming:
                total += min(max(bgt0 + max(k, 0.0) * math.log2(blk), 0.0), 1.0)
        out[blk] = 2 * l_cpu / blk + 2 * l_cpu * total
    return out


def mlp_forward_loop(weights, x):
    """Scalar-loop forward pass with tanh hidden layers; returns raw outputs."""
    h = list(x)
    for li, (W, b) in enumerate(weights):
        out = []
        for j in range(W.shape[1]):
            acc = b[j]
            for i in range(W.shape[0]):
                acc += h[i] * W[i, j]
            out.append(math.tanh(acc) if li < len(weights) - 1 else acc)
        h = out
    return np.array(h)


def greedy_list_schedule(durations_by_worker, order):
    """Event-by-event list schedule: each task (in ``order``) goes to the worker free earliest
    (lowest index on ties). ``durations_by_worker[w][t]`` is task t's time on worker w."""
    free = [0.0] * len(durations_by_worker)
    for t in order:
        w = min(range(len(free)), key=lambda i: (free[i], i))
        free[w] += durations_by_worker[w][t]
    return max(free) if order else 0.0
