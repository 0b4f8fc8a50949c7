"""Logical blocking of the cpu segment, min/max block metadata and top-k selection."""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .attention import PartialOutput, segment_attention
from .errors import FluxError


@dataclass(frozen=True)
class BlockMetadata:
    """Element-wise key extremes per logical block of ``blk`` tokens.

    Blocks are logical: rebuilding at another granularity is a pure
    recomputation over the same key storage. The final block may be partial.
    """

    blk: int
    mins: np.ndarray
    maxs: np.ndarray
    n_tokens: int

    @property
    def block_count(self):
        return self.mins.shape[0]

    def block_range(self, b):
        start = b * self.blk
        return start, min(start + self.blk, self.n_tokens)


def build_metadata(K_cpu, blk):
    blk = int(blk)
    if blk <= 0:
        raise FluxError("invalid-granularity", f"blk={blk}")
    K = np.asarray(K_cpu, dtype=np.float64)
    L = K.shape[0]
    if L == 0:
        empty = np.zeros((0, K.shape[1]))
        return BlockMetadata(blk, empty, empty.copy(), 0)
    starts = np.arange(0, L, blk)
    return BlockMetadata(
        blk,
        np.minimum.reduceat(K, starts, axis=0),
        np.maximum.reduceat(K, starts, axis=0),
        L,
    )


def block_scores(q, meta):
    """Upper bounds on ``<q, k_i>`` for every block, vectorised."""
    q = np.asarray(q, dtype=np.float64)
    return np.maximum(q * meta.mins, q * meta.maxs).sum(axis=1)


def block_score(q, meta, b):
    if not 0 <= b < meta.block_count:
        raise FluxError("bad-block", f"block {b} not in [0, {meta.block_count})")
    q = np.asarray(q, dtype=np.float64)
    return float(np.maximum(q * meta.mins[b], q * meta.maxs[b]).sum())


def rank_blocks(q, meta):
    """Block ids by descending score; ties go to the lower id."""
    s = block_scores(q, meta)
    return np.lexsort((np.arange(s.size), -s))


@dataclass(frozen=True)
class SelectionResult:
    blk: int
    selected_blocks: tuple
    token_indices: np.ndarray
    budget_realized: float
    l_cpu: int
    clamped: bool = False


def blocks_to_tokens(blocks, blk, l_cpu):
    if len(blocks) == 0:
        return np.zeros(0, dtype=np.int64)
    blocks = np.sort(np.asarray(blocks, dtype=np.int64))
    idx = (blocks[:, None] * blk + np.arange(blk)[None, :]).ravel()
    return idx[idx < l_cpu]


def selection_from_blocks(blocks, meta, clamped=False):
    blocks = tuple(int(b) for b in blocks)
    tokens = blocks_to_tokens(blocks, meta.blk, meta.n_tokens)
    realized = tokens.size / meta.n_tokens if meta.n_tokens else 0.0
    return SelectionResult(meta.blk, blocks, tokens, realized, meta.n_tokens, clamped)


def topk_blocks(q, meta, k):
    k = int(k)
    if k < 0:
        raise FluxError("bad-k", f"k={k}")
    clamped = k > meta.block_count
    if clamped:
        warnings.warn(f"k={k} exceeds block_count={meta.block_count}; clamping", stacklevel=2)
        k = meta.block_count
    order = rank_blocks(q, meta)[:k]
    return selection_from_blocks(order, meta, clamped)


def budget_to_blocks(bgt, l_cpu, blk):
    """Smallest block count whose token coverage is at least ``bgt * l_cpu``."""
    if l_cpu == 0:
        return 0
    bgt = min(max(float(bgt), 0.0), 1.0)
    # the epsilon absorbs float noise in bgt * l_cpu that lands just above an integer
    k = math.ceil(bgt * l_cpu / blk - 1e-9)
    return min(max(k, 0), math.ceil(l_cpu / blk))


def blocks_to_budget(k, l_cpu, blk):
    return min(k * blk, l_cpu) / l_cpu if l_cpu else 0.0


def select_budget(q, meta, bgt):
    return topk_blocks(q, meta, budget_to_blocks(bgt, meta.n_tokens, meta.blk))


def sparse_attention(q, cache, sel):
    """Attention over the selected cpu tokens only, as a mergeable partial."""
    if sel.l_cpu != cache.l_cpu:
        raise FluxError("stale-selection", f"selection built for L_cpu={sel.l_cpu}, cache has {cache.l_cpu}")
    if sel.token_indices.size == 0:
        return PartialOutput.empty(cache.v_sink.shape[1])
    idx = sel.token_indices
    return segment_attention(q, cache.k_cpu[idx], cache.v_cpu[idx])
