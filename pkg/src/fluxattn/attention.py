"""Exact decode-time attention, segment partials and log-sum-exp merging.

All arithmetic is carried out in float64 regardless of the storage dtype of
the inputs, so the outputs here double as the reference for every sparse
path in the package.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import FluxError

SEGMENTS = ("sink", "cpu", "local", "new")


def _as_f64(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise FluxError("non-finite", f"{name} contains NaN or inf")
    return x


def _check_kv(q, K, V):
    q = _as_f64(q, "q")
    K = _as_f64(K, "K")
    V = _as_f64(V, "V")
    if K.ndim != 2 or V.ndim != 2 or K.shape[0] != V.shape[0]:
        raise FluxError("shape", f"K {K.shape} and V {V.shape} must be [L, D] with equal L")
    if K.shape[1] != q.shape[-1]:
        raise FluxError("shape", f"q has dim {q.shape[-1]}, K has dim {K.shape[1]}")
    return q, K, V


def scores(q, K):
    """Scaled dot-product scores ``qK^T / sqrt(D)``."""
    return (K @ q) / np.sqrt(K.shape[1])


def log_sum_exp(s):
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        return -np.inf
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()))


def full_attention(q, K, V):
    q, K, V = _check_kv(q, K, V)
    if K.shape[0] == 0:
        raise FluxError("empty-context")
    s = scores(q, K)
    w = np.exp(s - s.max())
    return (w @ V) / w.sum()


@dataclass(frozen=True)
class PartialOutput:
    """Softmax output over one token subset together with its log-sum-exp.

    ``n == 0`` is the identity element for :func:`merge`: ``lse`` is ``-inf``
    and ``o`` is ignored.
    """

    o: np.ndarray
    lse: float
    n: int

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros(dim), -np.inf, 0)


def segment_attention(q, K_S, V_S):
    q, K_S, V_S = _check_kv(q, K_S, V_S)
    if K_S.shape[0] == 0:
        return PartialOutput.empty(V_S.shape[1])
    s = scores(q, K_S)
    m = s.max()
    w = np.exp(s - m)
    z = w.sum()
    return PartialOutput((w @ V_S) / z, float(m + np.log(z)), K_S.shape[0])


def merge(parts):
    """Combine disjoint partials into one partial covering their union."""
    parts = [p for p in parts if p.n > 0]
    if not parts:
        raise FluxError("empty-context", "all partials are empty")
    lses = np.array([p.lse for p in parts])
    total = log_sum_exp(lses)
    weights = np.exp(lses - total)
    o = sum(w * p.o for w, p in zip(weights, parts))
    return PartialOutput(o, total, sum(p.n for p in parts))


def merge_partials(parts):
    return merge(parts).o


def softmax_weights(s):
    s = np.asarray(s, dtype=np.float64)
    w = np.exp(s - s.max())
    return w / w.sum()


def _empty(dim):
    return np.zeros((0, dim), dtype=np.float32)


@dataclass(frozen=True, eq=False)
class SegmentedKvCache:
    """Keys/values of one KV head split into sink / cpu / local / new segments.

    Segments are stored in token-position order; ``sink`` and ``local``
    (plus decode-time ``new`` tokens) are the GPU-resident defaults and
    ``cpu`` is the offloaded middle of the context.
    """

    k_sink: np.ndarray
    v_sink: np.ndarray
    k_cpu: np.ndarray
    v_cpu: np.ndarray
    k_local: np.ndarray
    v_local: np.ndarray
    k_new: np.ndarray = field(default=None)
    v_new: np.ndarray = field(default=None)

    def __post_init__(self):
        dim = self.k_sink.shape[1]
        if self.k_new is None:
            object.__setattr__(self, "k_new", _empty(dim))
            object.__setattr__(self, "v_new", _empty(self.v_sink.shape[1]))
        for name in SEGMENTS:
            k, v = getattr(self, f"k_{name}"), getattr(self, f"v_{name}")
            if k.ndim != 2 or v.ndim != 2 or k.shape[0] != v.shape[0]:
                raise FluxError("shape", f"segment {name}: K {k.shape} vs V {v.shape}")
            if k.shape[1] != dim:
                raise FluxError("shape", f"segment {name} has key dim {k.shape[1]} != {dim}")

    @classmethod
    def split(cls, K, V, sink=64, local=256):
        """Partition a full-context (K, V) pair into sink, cpu and local segments."""
        K = np.asarray(K)
        V = np.asarray(V)
        L = K.shape[0]
        if sink < 0 or local < 0 or sink + local > L:
            raise FluxError("shape", f"sink={sink} + local={local} exceeds L={L}")
        cut = L - local
        return cls(K[:sink], V[:sink], K[sink:cut], V[sink:cut], K[cut:], V[cut:])

    @property
    def dim(self):
        return self.k_sink.shape[1]

    @property
    def l_sink(self):
        return self.k_sink.shape[0]

    @property
    def l_cpu(self):
        return self.k_cpu.shape[0]

    @property
    def l_local(self):
        return self.k_local.shape[0]

    @property
    def l_new(self):
        return self.k_new.shape[0]

    @property
    def l_gpu(self):
        return self.l_sink + self.l_local + self.l_new

    def __len__(self):
        return self.l_sink + self.l_cpu + self.l_local + self.l_new

    def segment(self, name):
        return getattr(self, f"k_{name}"), getattr(self, f"v_{name}")

    def full(self):
        """Concatenated (K, V) in token order."""
        ks, vs = zip(*(self.segment(s) for s in SEGMENTS))
        return np.concatenate(ks), np.concatenate(vs)

    def gpu(self):
        """Concatenated GPU-resident (K, V): sink, local and new tokens."""
        ks, vs = zip(*(self.segment(s) for s in ("sink", "local", "new")))
        return np.concatenate(ks), np.concatenate(vs)

    def default_partials(self, q):
        """Partials over the always-retained segments (everything but cpu)."""
        return [segment_attention(q, *self.segment(s)) for s in ("sink", "local", "new")]


@dataclass(frozen=True)
class HeadRef:
    head: int
    query: np.ndarray
    cache: SegmentedKvCache


@dataclass(frozen=True)
class GroupView:
    """G query heads sharing one KV cache (MHA is the G=1 case)."""

    heads: tuple
    queries: np.ndarray
    cache: SegmentedKvCache

    @property
    def size(self):
        return len(self.heads)

    def full_attention(self):
        """Full attention for every head in the group, shape [G, D]."""
        K, V = self.cache.full()
        K = _as_f64(K, "K")
        V = _as_f64(V, "V")
        s = (self.queries @ K.T) / np.sqrt(K.shape[1])
        w = np.exp(s - s.max(axis=1, keepdims=True))
        return (w @ V) / w.sum(axis=1, keepdims=True)


def gqa_group_view(heads):
    heads = list(heads)
    if not heads:
        raise FluxError("empty-group")
    cache = heads[0].cache
    if any(h.cache is not cache for h in heads):
        raise FluxError("mixed-group", "heads reference different KV caches")
    queries = np.stack([_as_f64(h.query, "q") for h in heads])
    return GroupView(tuple(h.head for h in heads), queries, cache)
