import json
import struct

import numpy as np
import pytest

from fluxattn.budget import label_streaming, make_probes, min_budget
from fluxattn.errors import FluxError
from fluxattn.pipeline import evaluate_strategy, iter_layer_steps, planners
from fluxattn.workload import WorkloadSpec, export_trace, generate, import_trace, sink_spec


@pytest.fixture(scope="module")
def workloads():
    return [generate(WorkloadSpec(seed=s, heads=16)) for s in range(3)]


def test_shapes_and_dtypes():
    s = WorkloadSpec(seed=1, layers=3, heads=8, group_size=4, dim=16, context=600, steps=2)
    w = generate(s)
    assert w.keys.shape == (3, 2, 600, 16) and w.keys.dtype == np.float32
    assert w.queries.shape == (3, 8, 3, 16)
    assert len(w.archetypes) == 3 and all(len(a) == 8 for a in w.archetypes)
    c = w.caches(0)[0]
    assert (c.l_sink, c.l_cpu, c.l_local) == (64, 280, 256)


def test_seed_determinism():
    a, b = generate(WorkloadSpec(seed=9)), generate(WorkloadSpec(seed=9))
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.queries, b.queries)
    assert not np.array_equal(a.keys, generate(WorkloadSpec(seed=10)).keys)


def test_archetype_mix():
    w = generate(WorkloadSpec(seed=0, heads=20, mix={"streaming": 0.5, "retrieval": 0.5}))
    assert w.archetypes[0].count("streaming") == 10


def test_query_drift_cosine():
    w = generate(WorkloadSpec(seed=2, drift=0.9, dim=128, steps=4))
    q = w.queries[0, 0].astype(np.float64)
    cos = [q[t] @ q[t + 1] / (np.linalg.norm(q[t]) * np.linalg.norm(q[t + 1])) for t in range(4)]
    assert np.allclose(cos, 0.9, atol=0.08)


def test_infeasible_specs():
    for bad in (dict(context=300), dict(heads=6), dict(dim=4), dict(mix={"x": 1.0}), dict(drift=2.0)):
        with pytest.raises(FluxError, match="infeasible-spec"):
            generate(WorkloadSpec(**bad))


def test_spec_json_roundtrip():
    s = WorkloadSpec(seed=4, heads=16, mix={"retrieval": 1.0})
    assert WorkloadSpec.from_json(s.to_json()) == s


def test_streaming_archetype_labels(workloads):
    hits = []
    for w in workloads:
        for layer in range(w.spec.layers):
            for step in range(1, w.spec.steps + 1):
                probes = make_probes(w.query(layer, step), w.caches(layer), w.spec.group_size)
                hits += [label_streaming(p, 0.10) for h, p in enumerate(probes)
                         if w.archetypes[layer][h] == "streaming"]
    assert np.mean(hits) >= 0.95


def test_retrieval_needle_budget(workloads):
    w = workloads[0]
    probes = make_probes(w.query(0, 0), w.caches(0), w.spec.group_size)
    n_blocks = -(-w.spec.l_cpu // 16)
    budgets = [min_budget(p, 16, 0.10).budget for h, p in enumerate(probes) if w.archetypes[0][h] == "retrieval"]
    # at the anchor step one needle fits in one 16-token block
    assert np.median(budgets) == pytest.approx(1 / n_blocks)


def test_needles_rank_first(workloads):
    from fluxattn.blocks import build_metadata, rank_blocks
    top = []
    for w in workloads:
        for (layer, h), starts in w.needles.items():
            cache = w.caches(layer)[h // w.spec.group_size]
            meta = build_metadata(cache.k_cpu, 16)
            first = rank_blocks(w.query(layer, 0)[h].astype(np.float64), meta)[0]
            top.append(first == (starts[0] - w.spec.sink) // 16)
    assert np.mean(top) >= 0.95


def test_sink_workload_mismatch():
    w = generate(sink_spec(seed=0, heads=16))
    r = evaluate_strategy("score", list(iter_layer_steps([w])), planners()["Score(95%)"])
    assert np.mean(r.deviations > 0.10) >= 0.20
    # yet the coverage budgets stay small
    assert np.median(r.budgets) < 0.5


def test_trace_roundtrip(tmp_path):
    w = generate(WorkloadSpec(seed=5, heads=4, dim=8, context=400, steps=2))
    export_trace(w, tmp_path / "t.fxt")
    back = import_trace(tmp_path / "t.fxt")
    for name in ("keys", "values", "queries"):
        np.testing.assert_array_equal(getattr(back, name), getattr(w, name))
    assert back.spec.sink == 64 and back.spec.local == 256 and back.spec.steps == 2


def test_truncated_trace(tmp_path):
    w = generate(WorkloadSpec(seed=5, heads=4, dim=8, context=400, steps=1))
    export_trace(w, tmp_path / "t.fxt")
    raw = (tmp_path / "t.fxt").read_bytes()
    (tmp_path / "cut.fxt").write_bytes(raw[:-8])
    with pytest.raises(FluxError, match="corrupt-trace"):
        import_trace(tmp_path / "cut.fxt")
    (tmp_path / "hdr.fxt").write_bytes(raw[:10])
    with pytest.raises(FluxError, match="corrupt-trace"):
        import_trace(tmp_path / "hdr.fxt")


def test_trace_byte_layout(tmp_path):
    # 1 layer, 2 heads in one KV group, D=6, context 352 (64 sink + 32 cpu + 256 local), 2 query steps
    w = generate(WorkloadSpec(seed=1, layers=1, heads=2, group_size=2, dim=6, context=352, steps=1))
    p = tmp_path / "toy.fxt"
    export_trace(w, p)
    raw = p.read_bytes()
    assert raw[:4] == b"FXT1"
    assert struct.unpack_from("<9I", raw, 4) == (1, 1, 2, 2, 6, 352, 2, 64, 256)
    q_bytes = 2 * 2 * 6 * 4
    k_bytes = 1 * 352 * 6 * 4
    assert len(raw) == 40 + q_bytes + 2 * k_bytes
    # second head's anchor query starts after head 0's two steps: 40 + 2*6*4 = 88
    assert np.frombuffer(raw, "<f4", 6, 88).tolist() == w.queries[0, 1, 0].tolist()
    # V[0, token 351] is the last row of the file
    assert np.frombuffer(raw, "<f4", 6, len(raw) - 24).tolist() == w.values[0, 0, 351].tolist()
    # K[0, token 64] (first cpu token) sits at 40 + q_bytes + 64*6*4
    assert np.frombuffer(raw, "<f4", 6, 40 + q_bytes + 64 * 24).tolist() == w.keys[0, 0, 64].tolist()
