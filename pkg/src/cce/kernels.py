"""Blocked cross-entropy kernels that never materialize the logit matrix.

The loss decomposes per token into ``lse_i - logit(i, x_i)``:

* :func:`indexed_matmul` produces the correct-class logits by gathering one
  classifier row per token, a feature slice at a time.
* :func:`lse_forward` produces the log-sum-exp normalizers by streaming
  (token-block, vocab-block) logit tiles through a thread-safe
  log-add-exp merge, never holding more than one tile per worker.
* :func:`lse_backward` recomputes each tile, forms the softmax against the
  saved normalizers, fuses the label one-hot subtraction, and accumulates
  both gradients, skipping tiles whose softmax entries are all below the
  filtering threshold.  Iterating the vocabulary in mean-logit order
  clusters the non-trivial mass into few tiles so most can be skipped.

Transient memory per worker is a handful of tile-sized buffers; global
transient state is a few length-n/length-vocab vectors.  Nothing scales
with ``n_tokens * vocab``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .core import (
    BlockSpec,
    CceOptions,
    EmbeddingMatrix,
    Gradients,
    LossOutput,
    TokenBatch,
    default_upstream,
)
from .instrument import adopt_scratch, output_buffer, scratch_buffer


@dataclass(frozen=True)
class VocabOrder:
    """Permutation of vocabulary indices, descending by mean logit."""

    perm: np.ndarray
    mean_logits: np.ndarray


@dataclass(frozen=True)
class BlockSchedule:
    """The (token-block, vocab-block) pairs a kernel will visit, exactly once each.

    ``order`` records how the pairs are consumed: "row-major" means a
    serial, deterministic sweep; "work-stealing" means parallel workers
    pull the next pair from a shared queue.
    """

    pairs: tuple
    order: str = "row-major"

    @classmethod
    def for_grid(cls, n_tiles: int, m_tiles: int, order: str = "row-major"):
        pairs = tuple((i, j) for i in range(n_tiles) for j in range(m_tiles))
        return cls(pairs=pairs, order=order)


@dataclass
class BackwardStats:
    """Tile accounting for one backward pass."""

    total_tiles: int = 0
    skipped_epsilon: int = 0
    skipped_zero_upstream: int = 0

    @property
    def skipped_tiles(self) -> int:
        return self.skipped_epsilon + self.skipped_zero_upstream


def _run_items(items, make_ctx, body, options: CceOptions) -> None:
    """Run ``body(item, ctx)`` over all items, serially or via a worker pool.

    Deterministic mode always runs the serial schedule order, whatever
    ``thread_count`` says.  Parallel workers share one iterator, so idle
    workers steal whatever work is left.
    """
    if options.deterministic or options.thread_count == 1 or len(items) <= 1:
        ctx = make_ctx()
        for item in items:
            body(item, ctx)
        return

    it = iter(items)
    pull_lock = threading.Lock()
    errors: list[BaseException] = []

    def worker():
        ctx = make_ctx()
        while not errors:
            with pull_lock:
                item = next(it, None)
            if item is None:
                return
            try:
                body(item, ctx)
            except BaseException as exc:  # re-raised on the caller thread
                errors.append(exc)
                return

    threads = [
        threading.Thread(target=worker)
        for _ in range(min(options.thread_count, len(items)))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def log_add_exp(a, b):
    """Stable ``log(exp(a) + exp(b))`` with identity element -inf.

    Computed as ``max(a, b) + log1p(exp(-|a - b|))``; works elementwise on
    arrays.  Inputs of -inf behave as exact identities, including both at
    once.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        gap = np.abs(a - b)  # nan when both are -inf
        out = m + np.log1p(np.exp(-gap))
    out = np.where(np.isneginf(m), m, out)
    if out.ndim == 0:
        return float(out)
    return out


def block_skip_decision(s_block: np.ndarray, epsilon: float) -> bool:
    """True iff every softmax entry in the tile is strictly below epsilon."""
    return bool(np.all(s_block < epsilon))


def compute_vocab_order(mean_logits, m_b: int) -> VocabOrder:
    """Sort vocabulary indices by mean logit, descending, stable on ties.

    ``m_b``-sized groups of the permutation then have non-increasing group
    means, which is what lets the backward pass pack the non-trivial
    softmax mass into its leading vocabulary tiles.  Uses O(vocab)
    transient memory.
    """
    mean = np.asarray(mean_logits)
    if mean.ndim != 1:
        raise ValueError(f"mean logits must be 1-D, got shape {mean.shape}")
    if m_b < 1:
        raise ValueError("m_b must be >= 1")
    neg = adopt_scratch(np.negative(mean))
    perm = adopt_scratch(np.argsort(neg, kind="stable"))
    return VocabOrder(perm=perm, mean_logits=mean)


# ---------------------------------------------------------------------------
# tile helpers
# ---------------------------------------------------------------------------


def _check_pair(e: EmbeddingMatrix, c) -> None:
    if e.dim != c.dim:
        raise ValueError(f"feature dims differ: embeddings {e.dim} vs classifier {c.dim}")


def _tile_logits(E, C, idx, n0, n1, m0, m1, d_b, out_av, tmp, cbuf):
    """Accumulate the (n1-n0, m1-m0) logit tile into ``out_av``, one feature slice at a time.

    ``idx`` (when given) holds the permuted classifier rows for this vocab
    tile; their feature slices are gathered into ``cbuf``.
    """
    d = E.shape[1]
    nb = n1 - n0
    mb = m1 - m0
    first = True
    for d0 in range(0, d, d_b):
        d1 = min(d0 + d_b, d)
        if idx is None:
            cs = C[m0:m1, d0:d1]
        else:
            cs = cbuf[:mb, : d1 - d0]
            np.take(C[:, d0:d1], idx, axis=0, out=cs)
        if first:
            np.matmul(E[n0:n1, d0:d1], cs.T, out=out_av)
            first = False
        else:
            tv = tmp[:nb, :mb]
            np.matmul(E[n0:n1, d0:d1], cs.T, out=tv)
            out_av += tv


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------


def indexed_matmul(e, c, x, blocks: BlockSpec | None = None, options: CceOptions | None = None):
    """Correct-class logits ``out[i] = C[x_i] @ E[i]``; 0 at ignored positions.

    Gathers classifier rows a feature slice at a time, so no (n, dim)
    gather buffer and no logit matrix is ever allocated; per-worker
    scratch is two (n_b, d_b) tiles.
    """
    blocks = blocks or BlockSpec()
    options = options or CceOptions()
    _check_pair(e, c)
    if x.n_tokens != e.n_tokens:
        raise ValueError(f"label count {x.n_tokens} != token count {e.n_tokens}")
    x.check_vocab(c.vocab)
    E, C = e.data, c.data
    n, d = E.shape
    out = output_buffer((n,), np.float32)
    if n == 0:
        return out
    labels = x.labels
    n_b, d_b = min(blocks.n_b, n), min(blocks.d_b, d)
    n_tiles = -(-n // n_b)

    def make_ctx():
        return (
            scratch_buffer((n_b, d_b), np.float32),
            scratch_buffer((n_b, d_b), np.float32),
        )

    def body(ni, ctx):
        cbuf, prod = ctx
        n0 = ni * n_b
        n1 = min(n0 + n_b, n)
        nb = n1 - n0
        lab = labels[n0:n1]
        valid = lab >= 0
        safe = np.where(valid, lab, 0)
        for d0 in range(0, d, d_b):
            d1 = min(d0 + d_b, d)
            cs = cbuf[:nb, : d1 - d0]
            np.take(C[:, d0:d1], safe, axis=0, out=cs)
            pv = prod[:nb, : d1 - d0]
            np.multiply(E[n0:n1, d0:d1], cs, out=pv)
            out[n0:n1] += pv.sum(axis=1)
        out[n0:n1] *= valid

    # Disjoint output rows, no merges: bit-identical under any thread count.
    _run_items(tuple(range(n_tiles)), make_ctx, body, options)
    return out


def lse_forward(e, c, blocks: BlockSpec | None = None, options: CceOptions | None = None):
    """Log-sum-exp over all vocabulary logits per token, one tile at a time.

    Each (token-block, vocab-block) tile computes its blockwise logits,
    reduces them to a per-token partial log-sum-exp, and merges into the
    global vector under that token block's lock.  When vocabulary sorting
    is on, the per-entry mean logit is accumulated blockwise on the way
    and divided by the token count at the end.

    Returns ``(lse, mean_logits)``; ``mean_logits`` is None when sorting is
    disabled.
    """
    blocks = blocks or BlockSpec()
    options = options or CceOptions()
    _check_pair(e, c)
    E, C = e.data, c.data
    n, d = E.shape
    v = C.shape[0]
    lse = output_buffer((n,), np.float32)
    lse.fill(-np.inf)
    mean_logits = output_buffer((v,), np.float32) if options.vocab_sorting else None
    if n == 0:
        return lse, mean_logits

    n_b = min(blocks.n_b, n)
    m_b = min(blocks.m_b, v)
    d_b = min(blocks.d_b, d)
    n_tiles = -(-n // n_b)
    m_tiles = -(-v // m_b)
    parallel = options.thread_count > 1 and not options.deterministic
    schedule = BlockSchedule.for_grid(
        n_tiles, m_tiles, "work-stealing" if parallel else "row-major"
    )
    n_locks = [threading.Lock() for _ in range(n_tiles)]
    m_locks = [threading.Lock() for _ in range(m_tiles)]

    def make_ctx():
        return (
            scratch_buffer((n_b, m_b), np.float32),
            scratch_buffer((n_b, m_b), np.float32),
        )

    def body(pair, ctx):
        A, tmp = ctx
        ni, mi = pair
        n0 = ni * n_b
        n1 = min(n0 + n_b, n)
        m0 = mi * m_b
        m1 = min(m0 + m_b, v)
        av = A[: n1 - n0, : m1 - m0]
        _tile_logits(E, C, None, n0, n1, m0, m1, d_b, av, tmp, None)
        if mean_logits is not None:
            colsum = av.sum(axis=0)
            with m_locks[mi]:
                mean_logits[m0:m1] += colsum
        rowmax = av.max(axis=1)
        np.subtract(av, rowmax[:, None], out=av)
        np.exp(av, out=av)
        tile_lse = rowmax + np.log(av.sum(axis=1))
        with n_locks[ni]:
            lse[n0:n1] = log_add_exp(lse[n0:n1], tile_lse)

    _run_items(schedule.pairs, make_ctx, body, options)
    if mean_logits is not None:
        mean_logits /= np.float32(n)
    return lse, mean_logits


# ---------------------------------------------------------------------------
# backward kernel
# ---------------------------------------------------------------------------


def lse_backward(
    e,
    c,
    x,
    lse,
    upstream,
    blocks: BlockSpec | None = None,
    options: CceOptions | None = None,
    order: VocabOrder | None = None,
    stats: BackwardStats | None = None,
) -> Gradients:
    """Gradients of the upstream-weighted loss, recomputing logits tilewise.

    Per tile: rebuild the blockwise logits, form
    ``S = exp(logits - lse)`` (arguments are <= 0 because the saved
    normalizer bounds every row max, so only underflow can occur),
    subtract 1 at label entries that fall inside the tile, scale rows by
    ``upstream``, and accumulate into both gradients under per-row-group
    locks.

    Tiles are skipped when (a) the whole token block has zero upstream
    (exact, always applied) or (b) filtering is on, the tile holds no
    label entry, and every softmax entry is strictly below epsilon.
    Label-carrying tiles are never skipped: the -1 correction makes them
    non-trivial no matter how small the softmax is.  With ``order`` given,
    vocabulary tiles are taken in mean-logit order and results scattered
    back through the permutation.
    """
    blocks = blocks or BlockSpec()
    options = options or CceOptions()
    _check_pair(e, c)
    if x.n_tokens != e.n_tokens:
        raise ValueError(f"label count {x.n_tokens} != token count {e.n_tokens}")
    x.check_vocab(c.vocab)
    E, C = e.data, c.data
    n, d = E.shape
    v = C.shape[0]
    lse = np.asarray(lse)
    if lse.shape != (n,):
        raise ValueError(f"lse must have shape ({n},), got {lse.shape}")
    upstream = np.ascontiguousarray(upstream, dtype=np.float32)
    if upstream.shape != (n,):
        raise ValueError(f"upstream must have shape ({n},), got {upstream.shape}")
    valid = x.valid_mask
    if np.any(upstream[~valid] != 0.0):
        raise ValueError("upstream must be 0 at ignored positions")

    d_e = output_buffer((n, d), np.float32)
    d_c = output_buffer((v, d), np.float32)
    if stats is not None:
        stats.total_tiles = 0
        stats.skipped_epsilon = 0
        stats.skipped_zero_upstream = 0
    if n == 0:
        return Gradients(d_e=d_e, d_c=d_c)

    perm = None
    if order is not None:
        perm = order.perm
        if perm.shape != (v,):
            raise ValueError(f"vocab order has {perm.shape[0]} entries, expected {v}")

    # Label positions along the (possibly permuted) vocabulary axis; -1 at
    # ignored rows so they never match a tile.  The inverse permutation is
    # only needed here, so it is dropped before the tile sweep.
    safe = np.where(valid, x.labels, 0)
    if perm is not None:
        inv = adopt_scratch(np.empty(v, dtype=np.int64))
        inv[perm] = np.arange(v, dtype=np.int64)
        pos = adopt_scratch(np.where(valid, inv[safe], -1))
        del inv
    else:
        pos = adopt_scratch(np.where(valid, safe, -1))

    lse32 = np.ascontiguousarray(lse, dtype=np.float32)
    n_b = min(blocks.n_b, n)
    m_b = min(blocks.m_b, v)
    d_b = min(blocks.d_b, d)
    n_tiles = -(-n // n_b)
    m_tiles = -(-v // m_b)
    parallel = options.thread_count > 1 and not options.deterministic
    schedule = BlockSchedule.for_grid(
        n_tiles, m_tiles, "work-stealing" if parallel else "row-major"
    )
    n_locks = [threading.Lock() for _ in range(n_tiles)]
    m_locks = [threading.Lock() for _ in range(m_tiles)]
    counter_lock = threading.Lock()
    counts = [0, 0]  # epsilon skips, zero-upstream skips

    def make_ctx():
        return (
            scratch_buffer((n_b, m_b), np.float32),
            scratch_buffer((n_b, m_b), np.float32),
            scratch_buffer((m_b, d_b), np.float32) if perm is not None else None,
            scratch_buffer((n_b, d_b), np.float32),
            scratch_buffer((m_b, d_b), np.float32),
        )

    def body(pair, ctx):
        A, tmp, cbuf, pe, pc = ctx
        ni, mi = pair
        n0 = ni * n_b
        n1 = min(n0 + n_b, n)
        m0 = mi * m_b
        m1 = min(m0 + m_b, v)
        nb = n1 - n0
        mb = m1 - m0
        up = upstream[n0:n1]
        if not np.any(up):
            with counter_lock:
                counts[1] += 1
            return
        idx = perm[m0:m1] if perm is not None else None
        av = A[:nb, :mb]
        _tile_logits(E, C, idx, n0, n1, m0, m1, d_b, av, tmp, cbuf)
        np.subtract(av, lse32[n0:n1][:, None], out=av)
        np.exp(av, out=av)

        pb = pos[n0:n1]
        in_tile = (pb >= m0) & (pb < m1)
        has_labels = bool(in_tile.any())
        if (
            options.filtering
            and not has_labels
            and block_skip_decision(av, options.epsilon)
        ):
            with counter_lock:
                counts[0] += 1
            return
        if has_labels:
            rows = np.nonzero(in_tile)[0]
            av[rows, pb[rows] - m0] -= 1.0
        np.multiply(av, up[:, None], out=av)

        for d0 in range(0, d, d_b):
            d1 = min(d0 + d_b, d)
            dw = d1 - d0
            if idx is None:
                cs = C[m0:m1, d0:d1]
            else:
                cs = cbuf[:mb, :dw]
                np.take(C[:, d0:d1], idx, axis=0, out=cs)
            pev = pe[:nb, :dw]
            np.matmul(av, cs, out=pev)
            with n_locks[ni]:
                d_e[n0:n1, d0:d1] += pev
            pcv = pc[:mb, :dw]
            np.matmul(av.T, E[n0:n1, d0:d1], out=pcv)
            with m_locks[mi]:
                if idx is None:
                    d_c[m0:m1, d0:d1] += pcv
                else:
                    d_c[idx, d0:d1] += pcv

    _run_items(schedule.pairs, make_ctx, body, options)
    if stats is not None:
        stats.total_tiles = n_tiles * m_tiles
        stats.skipped_epsilon = counts[0]
        stats.skipped_zero_upstream = counts[1]
    return Gradients(d_e=d_e, d_c=d_c)


# ---------------------------------------------------------------------------
# compaction and the composed loss
# ---------------------------------------------------------------------------


def filter_ignored(e, x):
    """Drop ignored rows before any kernel runs.

    Returns ``(compact_e, compact_x, index_map)`` where ``index_map`` holds
    the original row of each compact row; scattering compact results back
    (zeros elsewhere) reproduces the uncompacted semantics.  With nothing
    ignored the inputs are returned as-is with an identity map.
    """
    if e.n_tokens != x.n_tokens:
        raise ValueError(f"label count {x.n_tokens} != token count {e.n_tokens}")
    valid = x.valid_mask
    if valid.all():
        return e, x, adopt_scratch(np.arange(x.n_tokens, dtype=np.int64))
    index_map = adopt_scratch(np.nonzero(valid)[0])
    compact_e = EmbeddingMatrix(adopt_scratch(e.data[index_map]))
    compact_x = TokenBatch(adopt_scratch(x.labels[index_map]))
    return compact_e, compact_x, index_map


def cce_loss(
    e, c, x, blocks: BlockSpec | None = None, options: CceOptions | None = None
):
    """Per-token cross-entropy loss without the logit matrix, plus a backward hook.

    Ignored tokens are compacted away before any kernel runs; outputs are
    scattered back with zeros in their places.  Returns
    ``(LossOutput, backward)`` where ``backward(upstream=None)`` runs the
    filtered, vocabulary-sorted backward pass with the label correction
    fused in.  When ``upstream`` is omitted it is derived from
    ``options.reduction``; an all-ignored batch yields zero loss and zero
    gradients.
    """
    blocks = blocks or BlockSpec()
    options = options or CceOptions()
    _check_pair(e, c)
    if x.n_tokens != e.n_tokens:
        raise ValueError(f"label count {x.n_tokens} != token count {e.n_tokens}")
    x.check_vocab(c.vocab)
    n, d = e.n_tokens, e.dim

    compact_e, compact_x, index_map = filter_ignored(e, x)
    compacted = compact_e is not e
    correct = indexed_matmul(compact_e, c, compact_x, blocks, options)
    lse_c, mean_logits = lse_forward(compact_e, c, blocks, options)

    if compacted:
        per_token = output_buffer((n,), np.float32)
        lse_full = output_buffer((n,), np.float32)
        per_token[index_map] = lse_c - correct
        lse_full[index_map] = lse_c
    else:
        per_token = output_buffer((n,), np.float32)
        np.subtract(lse_c, correct, out=per_token)
        lse_full = lse_c
    out = LossOutput(per_token_loss=per_token, lse=lse_full, mean_logits=mean_logits)

    def backward(upstream=None) -> Gradients:
        if upstream is None:
            up = default_upstream(x, options.reduction, np.float32)
        else:
            up = np.ascontiguousarray(upstream, dtype=np.float32)
            if up.shape != (n,):
                raise ValueError(f"upstream must have shape ({n},), got {up.shape}")
            if np.any(up[~x.valid_mask] != 0.0):
                raise ValueError("upstream must be 0 at ignored positions")
        order = (
            compute_vocab_order(mean_logits, blocks.m_b)
            if options.vocab_sorting
            else None
        )
        grads = lse_backward(
            compact_e,
            c,
            compact_x,
            lse_c,
            up[index_map] if compacted else up,
            blocks,
            options,
            order=order,
        )
        if not compacted:
            return grads
        d_e = output_buffer((n, d), np.float32)
        d_e[index_map] = grads.d_e
        return Gradients(d_e=d_e, d_c=grads.d_c)

    return out, backward
