"""Per-head predictor features.

Everything that depends on the cpu-resident keys/values is computed once at
prefill against the anchor query (the last prefill query) and cached in
:class:`PrefillStats`. Decode-time extraction reads only the cached
statistics and the GPU-resident segments.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .attention import full_attention, log_sum_exp, scores, segment_attention
from .budget import CANDIDATE_BLKS, HeadProbe, min_budget
from .errors import FluxError

FEATURE_GROUPS = {
    "structural": ("layer", "head", "l_cpu", "l_gpu"),
    "kv_distribution": (
        "k_sink_norm", "v_sink_norm", "mean_k_cpu_norm", "mean_v_cpu_norm",
        "k_cpu_norm_mean", "k_cpu_norm_var", "k_cpu_norm_skew", "k_cpu_norm_kurt",
        "v_cpu_norm_mean", "v_cpu_norm_var", "v_cpu_norm_skew", "v_cpu_norm_kurt",
    ),
    "qk_interaction": ("mu_q", "z_anchor_mean", "z_anchor_var", "z_anchor_skew", "z_anchor_kurt"),
    "attention_contribution": (
        "lse_sink", "lse_cpu_approx", "lse_local",
        "lse_sink_anchor", "lse_cpu_anchor", "lse_local_anchor",
        "out_sink_norm", "out_local_norm",
        "out_sink_norm_anchor", "out_cpu_norm_anchor", "out_local_norm_anchor",
    ),
    "query_dynamics": ("q_norm", "q_anchor_norm", "q_cosine"),
    "budget_estimation": tuple(f"bgt_anchor_{b}" for b in CANDIDATE_BLKS),
    "cross_head": ("max_gpu_out_norm", "max_gpu_out_norm_anchor"),
}
FEATURE_NAMES = tuple(n for names in FEATURE_GROUPS.values() for n in names)
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 41

# stands in for log(0) when a segment is empty
EMPTY_LSE = -1e4


def moments(x):
    """(mean, variance, skewness, excess kurtosis); zero-variance input gives skew = kurt = 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0, 0.0, 0.0, 0.0
    mean, var = float(x.mean()), float(x.var())
    # rounding noise on a constant column counts as zero variance
    if x.size < 2 or var <= 1e-24 * max(mean * mean, 1.0):
        return mean, 0.0, 0.0, 0.0
    return mean, var, float(sps.skew(x)), float(sps.kurtosis(x))


def mean_row_norm(X):
    X = np.asarray(X, dtype=np.float64)
    return float(np.linalg.norm(X, axis=1).mean()) if X.shape[0] else 0.0


def _segment(q, K, V):
    """(lse, output norm) of one segment, with the empty-segment sentinel."""
    if K.shape[0] == 0:
        return EMPTY_LSE, 0.0
    p = segment_attention(q, K, V)
    return p.lse, float(np.linalg.norm(p.o))


def _recent(cache):
    return np.concatenate([cache.k_local, cache.k_new]), np.concatenate([cache.v_local, cache.v_new])


@dataclass(frozen=True)
class PrefillStats:
    layer: int
    head: int
    dim: int
    l_cpu: int
    anchor: np.ndarray
    mean_k_cpu: np.ndarray
    kv_distribution: tuple
    z_anchor: tuple
    anchor_contribution: tuple
    bgt_anchor: tuple
    max_gpu_out_norm_anchor: float
    flags: frozenset = field(default_factory=frozenset)


def prefill_stats(cache, anchor, *, layer, head, anchor_probe, max_gpu_out_norm_anchor, tau=0.10):
    """Cache every cpu-segment statistic a decode step will need.

    ``anchor_probe`` is this head's :class:`~fluxattn.budget.HeadProbe` at the
    anchor query; it provides the anchor-time budget estimates.
    """
    q = np.asarray(anchor, dtype=np.float64)
    K_cpu = np.asarray(cache.k_cpu, dtype=np.float64)
    V_cpu = np.asarray(cache.v_cpu, dtype=np.float64)
    D = cache.dim
    flags = set()
    if K_cpu.shape[0] == 0:
        flags.add("empty-cpu")
        mean_k = np.zeros(D)
        mean_v_norm = 0.0
        z = np.zeros(0)
    else:
        mean_k = K_cpu.mean(axis=0)
        mean_v_norm = float(np.linalg.norm(V_cpu.mean(axis=0)))
        qn = np.linalg.norm(q)
        z = (K_cpu @ q) / (qn * np.sqrt(D)) if qn > 0 else np.zeros(K_cpu.shape[0])

    kv = (
        mean_row_norm(cache.k_sink),
        mean_row_norm(cache.v_sink),
        float(np.linalg.norm(mean_k)),
        mean_v_norm,
        *moments(np.linalg.norm(K_cpu, axis=1)),
        *moments(np.linalg.norm(V_cpu, axis=1)),
    )
    sink = _segment(q, cache.k_sink, cache.v_sink)
    cpu = _segment(q, K_cpu, V_cpu)
    local = _segment(q, *_recent(cache))
    contribution = (sink[0], cpu[0], local[0], sink[1], cpu[1], local[1])
    budgets = tuple(min_budget(anchor_probe, blk, tau).budget for blk in CANDIDATE_BLKS)
    return PrefillStats(
        layer, head, D, K_cpu.shape[0], q, mean_k, kv, moments(z), contribution, budgets,
        float(max_gpu_out_norm_anchor), frozenset(flags),
    )


def approx_lse_cpu(q, stats):
    """Moment (Gaussian MGF) estimate of the cpu-segment log-sum-exp, without touching cpu keys."""
    if stats.l_cpu < 1:
        return EMPTY_LSE
    q = np.asarray(q, dtype=np.float64)
    qn2 = float(q @ q)
    var_z = stats.z_anchor[1]
    # ||q|| * mu_q == <q, mean K> / sqrt(D)
    return float(np.log(stats.l_cpu) + (q @ stats.mean_k_cpu) / np.sqrt(stats.dim) + 0.5 * qn2 * var_z)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    flags: frozenset = field(default_factory=frozenset)

    def __getitem__(self, name):
        return self.values[FEATURE_NAMES.index(name)]


def gpu_output(q, cache):
    """Attention output over the GPU-resident tokens only."""
    return full_attention(q, *cache.gpu())


def decode_features(q, cache, stats, max_gpu_out_norm):
    q = np.asarray(q, dtype=np.float64)
    flags = set(stats.flags)
    qn = float(np.linalg.norm(q))
    an = float(np.linalg.norm(stats.anchor))
    if qn == 0 or an == 0:
        flags.add("zero-query")
        cosine = 0.0
    else:
        cosine = float(q @ stats.anchor) / (qn * an)
    mu_q = float(q @ stats.mean_k_cpu) / (qn * np.sqrt(stats.dim)) if qn > 0 else 0.0

    sink = _segment(q, cache.k_sink, cache.v_sink)
    local = _segment(q, *_recent(cache))
    a = stats.anchor_contribution
    values = np.array([
        stats.layer, stats.head, stats.l_cpu, cache.l_gpu,
        *stats.kv_distribution,
        mu_q, *stats.z_anchor,
        sink[0], approx_lse_cpu(q, stats), local[0], a[0], a[1], a[2],
        sink[1], local[1], a[3], a[4], a[5],
        qn, an, cosine,
        *stats.bgt_anchor,
        max_gpu_out_norm, stats.max_gpu_out_norm_anchor,
    ], dtype=np.float64)
    return FeatureVector(values, frozenset(flags))


def exact_lse_cpu(q, K_cpu):
    return log_sum_exp(scores(np.asarray(q, dtype=np.float64), np.asarray(K_cpu, dtype=np.float64)))


def layer_prefill(anchors, caches, group_size, layer, probes, tau=0.10):
    """PrefillStats for all heads of a layer. ``probes`` are the anchor-query probes."""
    gpu_norm = max(np.linalg.norm(gpu_output(q, caches[h // group_size])) for h, q in enumerate(anchors))
    return [
        prefill_stats(caches[h // group_size], q, layer=layer, head=h, anchor_probe=probes[h],
                      max_gpu_out_norm_anchor=gpu_norm, tau=tau)
        for h, q in enumerate(anchors)
    ]


def layer_decode(queries, caches, group_size, stats):
    gpu_norm = max(np.linalg.norm(gpu_output(q, caches[h // group_size])) for h, q in enumerate(queries))
    return [decode_features(q, caches[h // group_size], stats[h], gpu_norm) for h, q in enumerate(queries)]


@dataclass(frozen=True)
class FeatureNorms:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), X.std(axis=0))

    def __len__(self):
        return self.mean.size


def normalize(fv, norms):
    x = fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)
    if x.shape[-1] != len(norms):
        raise FluxError("bad-norms", f"{x.shape[-1]} features vs {len(norms)} statistics")
    safe = np.where(norms.std > 0, norms.std, 1.0)
    return np.where(norms.std > 0, (x - norms.mean) / safe, 0.0)
