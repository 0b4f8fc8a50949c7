"""Offline ground truth for per-head KV budgets.

A head's budget at granularity ``blk`` is the smallest fraction of its
cpu-resident tokens (in whole top-k blocks) whose sparse output, merged with
the always-kept sink/local tokens, stays within ``tau`` of full attention
after dividing by the largest full-output norm among the layer's heads.
"""
import weakref
from dataclasses import dataclass

import numpy as np

from .attention import full_attention, merge, scores
from .blocks import (
    blocks_to_budget,
    build_metadata,
    rank_blocks,
    selection_from_blocks,
    sparse_attention,
)
from .errors import FluxError

LABEL_BLKS = (1, 16, 32, 64, 128)
CANDIDATE_BLKS = (16, 32, 64, 128)


@dataclass(frozen=True)
class ErrorBudgetConfig:
    tau: float = 0.10
    blk_set: tuple = LABEL_BLKS
    sink: int = 64
    local: int = 256

    def __post_init__(self):
        if not self.tau > 0:
            raise FluxError("bad-config", f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class HeadProperties:
    bgt0: float
    k: float
    streaming: bool

    def budget(self, blk):
        """Budget at ``blk`` from the log-linear granularity model, clamped to [0, 1]."""
        return float(np.clip(self.bgt0 + self.k * np.log2(blk), 0.0, 1.0))


@dataclass(frozen=True)
class BudgetResult:
    budget: float
    n_blocks: int
    deviation: float
    saturated: bool = False


_metadata = weakref.WeakKeyDictionary()


def cached_metadata(cache, blk):
    """Block metadata for ``cache``'s cpu segment, built once per (cache, blk)."""
    per_cache = _metadata.setdefault(cache, {})
    if blk not in per_cache:
        per_cache[blk] = build_metadata(cache.k_cpu, blk)
    return per_cache[blk]


def output_deviation(h, q, cache, sel, all_head_outputs):
    outputs = np.asarray(all_head_outputs, dtype=np.float64)
    normalizer = np.linalg.norm(outputs, axis=-1).max()
    if normalizer == 0:
        raise FluxError("degenerate-normalizer", "all head outputs are zero")
    approx = merge(cache.default_partials(q) + [sparse_attention(q, cache, sel)]).o
    return float(np.linalg.norm(approx - outputs[h]) / normalizer)


class HeadProbe:
    """One head at one decode step, with everything needed to score budgets.

    Precomputes the softmax numerators of the cpu tokens against a shared
    reference so that deviations for every prefix of a block ordering come
    out of a single cumulative sum.
    """

    def __init__(self, q, cache, full_output, normalizer, s_cpu=None):
        if normalizer <= 0:
            raise FluxError("degenerate-normalizer", "max head output norm is zero")
        self.q = np.asarray(q, dtype=np.float64)
        self.cache = cache
        self.full_output = np.asarray(full_output, dtype=np.float64)
        self.normalizer = float(normalizer)

        defaults = [p for p in cache.default_partials(self.q) if p.n > 0]
        self._default = merge(defaults) if defaults else None
        lse_def = self._default.lse if self._default else -np.inf
        self._s_cpu = scores(self.q, np.asarray(cache.k_cpu, dtype=np.float64)) if s_cpu is None else s_cpu
        ref = max(lse_def, self._s_cpu.max()) if self._s_cpu.size else lse_def
        self._e = np.exp(self._s_cpu - ref)
        self._ev = self._e[:, None] * np.asarray(cache.v_cpu, dtype=np.float64)
        self._z_def = np.exp(lse_def - ref) if self._default else 0.0
        self._w_def = self._z_def * self._default.o if self._default else np.zeros(cache.v_cpu.shape[1])
        self._mass = {}
        self._d0 = None

    @property
    def l_cpu(self):
        return self._s_cpu.size

    def meta(self, blk):
        return cached_metadata(self.cache, blk)

    def block_mass(self, blk):
        """Per-block (softmax numerator sum, numerator-weighted value sum)."""
        if blk not in self._mass:
            if blk == 1:
                self._mass[blk] = (self._e, self._ev)
            else:
                # coarse blocks are unions of 16-token blocks, so reduce the smaller table
                base, e, ev = (16, *self.block_mass(16)) if blk % 16 == 0 and blk > 16 else (1, self._e, self._ev)
                starts = np.arange(0, e.size, blk // base)
                self._mass[blk] = (np.add.reduceat(e, starts), np.add.reduceat(ev, starts, axis=0))
        return self._mass[blk]

    def deviation_curve(self, order, blk):
        """Deviation after selecting the first k blocks of ``order``, for k = 0..len(order)."""
        order = np.asarray(order, dtype=np.int64)
        if self.l_cpu == 0:
            z = np.array([self._z_def])
            w = self._w_def[None, :]
        else:
            zb, wb = self.block_mass(blk)
            z = self._z_def + np.concatenate([[0.0], np.cumsum(zb[order])])
            w = self._w_def + np.concatenate([np.zeros((1, wb.shape[1])), np.cumsum(wb[order], axis=0)])
        with np.errstate(invalid="ignore", divide="ignore"):
            out = w / z[:, None]
            dev = np.linalg.norm(out - self.full_output, axis=1) / self.normalizer
        dev[z == 0] = np.inf
        return dev

    def ranking(self, blk):
        if self.l_cpu == 0:
            return np.zeros(0, dtype=np.int64)
        return rank_blocks(self.q, self.meta(blk))

    def deviation(self, sel):
        """Deviation of one concrete selection, through the sparse-attention path."""
        parts = self.cache.default_partials(self.q) + [sparse_attention(self.q, self.cache, sel)]
        approx = merge(parts).o
        return float(np.linalg.norm(approx - self.full_output) / self.normalizer)

    def default_deviation(self):
        if self._d0 is None:
            self._d0 = float(self.deviation_curve(np.zeros(0, dtype=np.int64), 1)[0])
        return self._d0


def make_probes(queries, caches, group_size):
    """Probes for all H heads of one layer; head h reads cache h // group_size."""
    queries = np.asarray(queries, dtype=np.float64)
    outs, s_cpu = [], []
    for g, cache in enumerate(caches[: -(-len(queries) // group_size)]):
        Q = queries[g * group_size:(g + 1) * group_size]
        if len(cache) == 0:
            raise FluxError("empty-context")
        # one score matrix per group serves both the full output and the cpu-segment scores
        K, V = cache.full()
        S = Q @ np.asarray(K, dtype=np.float64).T / np.sqrt(cache.dim)
        W = np.exp(S - S.max(axis=1, keepdims=True))
        outs.append((W @ np.asarray(V, dtype=np.float64)) / W.sum(axis=1, keepdims=True))
        s_cpu.extend(S[:, cache.l_sink:cache.l_sink + cache.l_cpu])
    outs = np.concatenate(outs)
    if not np.isfinite(outs).all():
        raise FluxError("non-finite", "non-finite attention output")
    normalizer = np.linalg.norm(outs, axis=1).max()
    return [HeadProbe(q, caches[h // group_size], outs[h], normalizer, s_cpu[h]) for h, q in enumerate(queries)]


def min_budget(probe, blk, tau):
    if probe.l_cpu == 0:
        return BudgetResult(0.0, 0, probe.default_deviation())
    d0 = probe.default_deviation()
    if d0 <= tau:
        return BudgetResult(0.0, 0, d0)
    order = probe.ranking(blk)
    # scan growing prefixes; most heads stop long before the full ordering
    m = 32
    while True:
        dev = probe.deviation_curve(order[:m], blk)
        ok = np.flatnonzero(dev <= tau)
        if ok.size:
            k = int(ok[0])
            return BudgetResult(blocks_to_budget(k, probe.l_cpu, blk), k, float(dev[k]))
        if m >= order.size:
            return BudgetResult(1.0, order.size, float(dev[-1]), saturated=True)
        m *= 4


def label_streaming(probe, tau):
    if probe.l_cpu == 0:
        return True
    return probe.default_deviation() <= tau


def fit_slope(blks, budgets):
    """Least-squares (intercept, slope) of budget against log2(blk)."""
    x = np.log2(np.asarray(blks, dtype=np.float64))
    y = np.asarray(budgets, dtype=np.float64)
    if np.unique(x).size < 2:
        raise FluxError("underdetermined", "need at least two distinct granularities")
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc * xc).sum())
    return float(y.mean() - slope * x.mean()), slope


def fit_curve(points, bgt0, streaming):
    """Head properties from measured budgets.

    ``points`` maps blk -> min budget at the coarse granularities. The slope
    comes from a free-intercept fit; the intercept is replaced by ``bgt0``,
    the budget measured at blk = 1.
    """
    blks = sorted(points)
    _, slope = fit_slope(blks, [points[b] for b in blks])
    return HeadProperties(float(bgt0), slope, bool(streaming))


@dataclass(frozen=True)
class HeadLabel:
    props: HeadProperties
    budgets: dict
    intercept: float
    saturated: bool


def label_head(probe, cfg=ErrorBudgetConfig()):
    results = {blk: min_budget(probe, blk, cfg.tau) for blk in cfg.blk_set}
    coarse = {b: results[b].budget for b in cfg.blk_set if b != 1}
    intercept, slope = fit_slope(sorted(coarse), [coarse[b] for b in sorted(coarse)])
    bgt0 = results[1].budget if 1 in results else intercept
    props = HeadProperties(bgt0, slope, label_streaming(probe, cfg.tau))
    return HeadLabel(
        props,
        {b: r.budget for b, r in results.items()},
        intercept,
        any(r.saturated for r in results.values()),
    )


def score_coverage_selection(probe, coverage, blk):
    """Fewest blocks (largest true attention mass first) reaching ``coverage`` of the total mass.

    The always-kept sink/local tokens count toward covered mass.
    """
    if not 0 < coverage <= 1:
        raise FluxError("bad-coverage", f"coverage={coverage}")
    meta = probe.meta(blk)
    if probe.l_cpu == 0:
        return selection_from_blocks((), meta)
    zb, _ = probe.block_mass(blk)
    order = np.lexsort((np.arange(zb.size), -zb))
    covered = probe._z_def + np.concatenate([[0.0], np.cumsum(zb[order])])
    total = probe._z_def + zb.sum()
    k = int(np.argmax(covered >= coverage * total * (1 - 1e-12)))
    return selection_from_blocks(order[:k], meta)


def score_coverage_budget(probe, coverage, blk=1):
    sel = score_coverage_selection(probe, coverage, blk)
    return blocks_to_budget(len(sel.selected_blocks), probe.l_cpu, blk)
