"""Synthetic decode workloads with planted attention structure.

Keys are standard Gaussian. A few reserved coordinates carry the planted
structure so that it is query-aligned and low rank:

* coordinate 0: sink direction. Sink keys are pushed along it and every query
  has some weight on it, so sinks collect score mass while their values are
  shrunk (``sink_value_scale``).
* coordinate 1: recency direction. Local-window keys are pushed along it;
  only streaming heads' queries look at it.
* coordinates 2..: one needle direction per head of a KV group. Retrieval
  heads plant ``needles`` short runs of keys along their direction inside
  the cpu segment and carry distinctive values there.
"""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import SegmentedKvCache
from .errors import FluxError

ARCHETYPES = ("streaming", "retrieval", "diffuse")
TRACE_MAGIC = b"FXT1"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4s9I")


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 0
    layers: int = 2
    heads: int = 8
    group_size: int = 4
    dim: int = 64
    context: int = 2368
    sink: int = 64
    local: int = 256
    mix: dict = field(default_factory=lambda: {"streaming": 0.5, "retrieval": 0.4, "diffuse": 0.1})
    needles: int = 1
    needle_len: int = 4
    strength: float = 9.0
    sink_logit: float = 4.0
    sink_logit_spread: float = 0.0
    local_logit: float = 2.5
    query_amplitude: float = 4.0
    query_noise: float = 0.5
    value_mean_norm: float = 4.0
    value_noise: float = 1.0
    needle_value_noise: float = 2.0
    sink_value_scale: float = 0.1
    drift: float = 0.99
    steps: int = 8

    @property
    def kv_heads(self):
        return self.heads // self.group_size

    @property
    def l_cpu(self):
        return self.context - self.sink - self.local

    def validate(self):
        if self.context <= self.sink + self.local:
            raise FluxError("infeasible-spec", f"context {self.context} <= sink + local")
        if self.heads % self.group_size:
            raise FluxError("infeasible-spec", "heads must be a multiple of group_size")
        if self.dim < 2 + self.group_size:
            raise FluxError("infeasible-spec", f"dim must be >= {2 + self.group_size}")
        if set(self.mix) - set(ARCHETYPES) or abs(sum(self.mix.values()) - 1) > 1e-9:
            raise FluxError("infeasible-spec", f"bad archetype mix {self.mix}")
        if not -1 <= self.drift <= 1:
            raise FluxError("infeasible-spec", f"drift {self.drift} outside [-1, 1]")
        slots = self.l_cpu // 16
        if self.needles * self.group_size > slots or self.needle_len > 16:
            raise FluxError("infeasible-spec", "cpu segment too short for the planted needles")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def sink_spec(**overrides):
    """Preset where sinks dominate attention mass but carry little output."""
    base = dict(
        mix={"diffuse": 1.0},
        sink_logit=6.0,
        sink_logit_spread=2.5,
        sink_value_scale=0.1,
        value_mean_norm=4.0,
    )
    base.update(overrides)
    return WorkloadSpec(**base)


@dataclass
class Workload:
    """Tensors are float32; ``queries[l, h, 0]`` is the anchor (last prefill) query."""

    spec: WorkloadSpec
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    archetypes: list = None
    needles: dict = None

    def caches(self, layer):
        s = self.spec
        return [
            SegmentedKvCache.split(self.keys[layer, g].astype(np.float64),
                                   self.values[layer, g].astype(np.float64), s.sink, s.local)
            for g in range(self.keys.shape[1])
        ]

    def query(self, layer, step):
        """All heads' queries at ``step`` (0 is the anchor), shape [H, D]."""
        return self.queries[layer, :, step]


def _assign_archetypes(rng, spec):
    names = list(spec.mix)
    probs = np.array([spec.mix[n] for n in names], dtype=np.float64)
    counts = np.floor(probs * spec.heads).astype(int)
    # largest remainders fill the leftover slots
    for i in np.argsort(-(probs * spec.heads - counts), kind="stable")[: spec.heads - counts.sum()]:
        counts[i] += 1
    out = [n for n, c in zip(names, counts) for _ in range(c)]
    rng.shuffle(out)
    return out


def _drift(rng, q0, rho, steps):
    qs = [q0]
    norm = np.linalg.norm(q0)
    for _ in range(steps):
        prev = qs[-1]
        noise = rng.standard_normal(prev.size) * np.linalg.norm(prev) / np.sqrt(prev.size)
        q = rho * prev + np.sqrt(max(0.0, 1 - rho * rho)) * noise
        qs.append(q * norm / np.linalg.norm(q))
    return np.stack(qs)


def _generate_layer(rng, spec, archetypes):
    D, L, G = spec.dim, spec.context, spec.group_size
    a = spec.query_amplitude
    root_d = np.sqrt(D)
    cpu_lo, cpu_hi = spec.sink, L - spec.local

    keys = rng.standard_normal((spec.kv_heads, L, D))
    values = np.empty_like(keys)
    queries = np.empty((spec.heads, spec.steps + 1, D))
    needles = {}

    for g in range(spec.kv_heads):
        keys[g, : spec.sink, 0] += spec.sink_logit * root_d / a
        keys[g, cpu_hi:, 1] += spec.local_logit * root_d / a
        mean = rng.standard_normal(D)
        mean *= spec.value_mean_norm / np.linalg.norm(mean)
        values[g] = mean + spec.value_noise * rng.standard_normal((L, D))
        values[g, : spec.sink] *= spec.sink_value_scale

        # needle slots are 16-aligned so each run sits inside one block at every granularity
        slots = rng.permutation((cpu_hi - cpu_lo) // 16)
        for j in range(G):
            h = g * G + j
            kind = archetypes[h]
            q = spec.query_noise * rng.standard_normal(D)
            sink_scale = 1.0 + spec.sink_logit_spread * (rng.random() - 0.5) / max(spec.sink_logit, 1e-9)
            q[0] += a * sink_scale
            if kind == "streaming":
                q[1] += a
            elif kind == "retrieval":
                q[2 + j] += a
                starts = []
                for slot in slots[j * spec.needles:(j + 1) * spec.needles]:
                    start = cpu_lo + 16 * int(slot) + int(rng.integers(0, 16 - spec.needle_len + 1))
                    run = slice(start, start + spec.needle_len)
                    keys[g, run, 2 + j] += spec.strength * root_d / a
                    values[g, run] = mean + spec.needle_value_noise * rng.standard_normal((spec.needle_len, D))
                    starts.append(start)
                needles[h] = sorted(starts)
            queries[h] = _drift(rng, q, spec.drift, spec.steps)
    return keys, values, queries, needles


def generate(spec):
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    layer_seeds = root.spawn(spec.layers)
    arch_rng = np.random.default_rng(root.spawn(1)[0])
    archetypes, all_needles = [], {}
    ks, vs, qs = [], [], []
    for layer, seed in enumerate(layer_seeds):
        arch = _assign_archetypes(arch_rng, spec)
        k, v, q, needles = _generate_layer(np.random.default_rng(seed), spec, arch)
        ks.append(k)
        vs.append(v)
        qs.append(q)
        archetypes.append(arch)
        all_needles.update({(layer, h): n for h, n in needles.items()})
    return Workload(
        spec,
        np.stack(ks).astype(np.float32),
        np.stack(vs).astype(np.float32),
        np.stack(qs).astype(np.float32),
        archetypes,
        all_needles,
    )


def export_trace(workload, path):
    """Write tensors as a little-endian float32 trace.

    Layout: a 40-byte header (magic ``FXT1`` then nine uint32: version,
    layers, heads, group_size, dim, context, query steps, sink, local),
    followed for each layer by Q [heads, steps, dim], K [kv_heads, context,
    dim] and V [kv_heads, context, dim], C order.
    """
    s = workload.spec
    layers, heads, steps, dim = workload.queries.shape
    header = _HEADER.pack(TRACE_MAGIC, TRACE_VERSION, layers, heads, s.group_size, dim,
                          workload.keys.shape[2], steps, s.sink, s.local)
    with open(path, "wb") as f:
        f.write(header)
        for layer in range(layers):
            for arr in (workload.queries[layer], workload.keys[layer], workload.values[layer]):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def import_trace(path, spec=None):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FluxError("corrupt-trace", "file shorter than header")
    magic, version, layers, heads, group, dim, context, steps, sink, local = _HEADER.unpack_from(raw)
    if magic != TRACE_MAGIC or version != TRACE_VERSION:
        raise FluxError("corrupt-trace", f"bad magic/version {magic!r}/{version}")
    if group == 0 or heads % group or dim == 0:
        raise FluxError("corrupt-trace", "inconsistent head/group/dim counts")
    kvh = heads // group
    per_layer = heads * steps * dim + 2 * kvh * context * dim
    if len(raw) != _HEADER.size + 4 * layers * per_layer:
        raise FluxError("corrupt-trace", f"expected {_HEADER.size + 4 * layers * per_layer} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(layers, per_layer)
    nq = heads * steps * dim
    nk = kvh * context * dim
    queries = data[:, :nq].reshape(layers, heads, steps, dim).astype(np.float32)
    keys = data[:, nq:nq + nk].reshape(layers, kvh, context, dim).astype(np.float32)
    values = data[:, nq + nk:].reshape(layers, kvh, context, dim).astype(np.float32)
    if spec is None:
        spec = WorkloadSpec(layers=layers, heads=heads, group_size=group, dim=dim, context=context,
                            sink=sink, local=local, steps=steps - 1)
    return Workload(spec, keys, values, queries)
