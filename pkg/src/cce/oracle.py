"""Ground-truth loss/gradient paths that materialize the full logit matrix.

Everything here widens the float32 inputs to float64 before computing, so
the oracle is strictly more accurate than both the blocked kernels and the
chunked baseline it is used to check.  The chunked baseline is the one
exception: it works in float32 on purpose, since it stands in for the
"split the tokens into groups and materialize one group of logits at a
time" family of memory-saving implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CceOptions, Gradients, LossOutput, TokenBatch, default_upstream
from .instrument import adopt_scratch, output_buffer, scratch_buffer


@dataclass
class FullLogits:
    """The materialized (n_tokens, vocab) logit matrix, double precision."""

    data: np.ndarray


def logsumexp_stable(v) -> float:
    """log(sum(exp(v))) computed against the running max; -inf for all--inf input."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector is undefined")
    m = float(v.max())
    if math.isinf(m) and m < 0:
        return float("-inf")
    return m + float(np.log(np.exp(v - m).sum()))


def _check_inputs(e, c, x) -> None:
    if e.dim != c.dim:
        raise ValueError(f"feature dims differ: embeddings {e.dim} vs classifier {c.dim}")
    if x.n_tokens != e.n_tokens:
        raise ValueError(f"label count {x.n_tokens} != token count {e.n_tokens}")
    x.check_vocab(c.vocab)


def full_softmax(e, c) -> np.ndarray:
    """Row-wise softmax of the full logit matrix, double precision."""
    z = e.data.astype(np.float64) @ c.data.astype(np.float64).T
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def naive_forward(e, c, x, options: CceOptions | None = None) -> tuple[LossOutput, FullLogits]:
    """Reference forward pass: materialize all logits, reduce in float64.

    ``per_token_loss[i] = lse[i] - logit(i, x_i)`` for valid tokens and 0 at
    ignored positions; ``lse`` is filled for every row.  The logit matrix is
    returned for inspection but counts as transient scratch: any method
    that materializes it pays for it.
    """
    options = options or CceOptions()
    _check_inputs(e, c, x)
    n, v = e.n_tokens, c.vocab
    e64 = adopt_scratch(e.data.astype(np.float64))
    c64 = adopt_scratch(c.data.astype(np.float64))
    z = scratch_buffer((n, v), np.float64)
    np.matmul(e64, c64.T, out=z)

    m = z.max(axis=1) if n else np.zeros(0)
    t = scratch_buffer((n, v), np.float64)
    np.subtract(z, m[:, None], out=t)
    np.exp(t, out=t)
    lse = output_buffer((n,), np.float64)
    lse[:] = m + np.log(t.sum(axis=1))

    valid = x.valid_mask
    safe = np.where(valid, x.labels, 0)
    correct = np.take_along_axis(z, safe[:, None], axis=1)[:, 0] if n else np.zeros(0)
    loss = output_buffer((n,), np.float64)
    loss[:] = np.where(valid, lse - correct, 0.0)

    mean_logits = None
    if options.vocab_sorting:
        mean_logits = output_buffer((v,), np.float64)
        n_valid = int(valid.sum())
        if n_valid:
            mean_logits[:] = z[valid].mean(axis=0)
    return LossOutput(per_token_loss=loss, lse=lse, mean_logits=mean_logits), FullLogits(z)


def naive_backward(e, c, x, upstream) -> Gradients:
    """Reference gradients in float64.

    With ``S`` the row-wise softmax of the logits and
    ``shat = upstream * (S - onehot(labels))``, returns
    ``d_e = shat @ C`` and ``d_c = shat.T @ E``.  Ignored positions must
    carry upstream 0.
    """
    _check_inputs(e, c, x)
    n, d, v = e.n_tokens, e.dim, c.vocab
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (n,):
        raise ValueError(f"upstream must have shape ({n},), got {upstream.shape}")
    if not np.all(np.isfinite(upstream)):
        raise ValueError("upstream contains non-finite entries")
    valid = x.valid_mask
    if np.any(upstream[~valid] != 0.0):
        raise ValueError("upstream must be 0 at ignored positions")

    e64 = adopt_scratch(e.data.astype(np.float64))
    c64 = adopt_scratch(c.data.astype(np.float64))
    z = scratch_buffer((n, v), np.float64)
    np.matmul(e64, c64.T, out=z)
    if n:
        z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    if n:
        z /= z.sum(axis=1, keepdims=True)
    rows = np.nonzero(valid)[0]
    z[rows, x.labels[rows]] -= 1.0
    z *= upstream[:, None]

    d_e = output_buffer((n, d), np.float64)
    d_c = output_buffer((v, d), np.float64)
    np.matmul(z, c64, out=d_e)
    np.matmul(z.T, e64, out=d_c)
    return Gradients(d_e=d_e, d_c=d_c)


def chunked_loss_grad(
    e, c, x, options: CceOptions | None = None, chunks: int = 8
) -> tuple[LossOutput, Gradients]:
    """Token-chunked float32 baseline: one group of logits alive at a time.

    Tokens are split into ``chunks`` contiguous groups of ceil(n/chunks);
    each group materializes only its own slice of the logit matrix, and the
    loss plus both gradients are accumulated across groups.  The upstream
    gradient is derived from ``options.reduction`` (1 per valid token for
    "sum"/"none", 1/#valid for "mean-over-valid").
    """
    loss, grads = _chunked(e, c, x, options or CceOptions(), chunks, with_grad=True)
    assert grads is not None
    return loss, grads


def _chunked(e, c, x, options, chunks, with_grad):
    _check_inputs(e, c, x)
    n, d, v = e.n_tokens, e.dim, c.vocab
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    if chunks > max(n, 1):
        raise ValueError(f"chunks={chunks} exceeds token count {n}")
    group = -(-n // chunks) if n else 1

    reduction = options.reduction if options.reduction != "none" else "sum"
    upstream = default_upstream(x, reduction, np.float32)
    loss = output_buffer((n,), np.float32)
    lse = output_buffer((n,), np.float32)
    grads = None
    acc = None
    if with_grad:
        grads = Gradients(
            d_e=output_buffer((n, d), np.float32),
            d_c=output_buffer((v, d), np.float32),
        )
        acc = scratch_buffer((v, d), np.float32)

    ebuf = e.data
    cbuf = c.data
    zbuf = scratch_buffer((group, v), np.float32) if n else None
    for start in range(0, n, group):
        stop = min(start + group, n)
        z = zbuf[: stop - start]
        np.matmul(ebuf[start:stop], cbuf.T, out=z)

        labels = x.labels[start:stop]
        local_valid = labels >= 0
        safe = np.where(local_valid, labels, 0)
        correct = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]

        m = z.max(axis=1)
        np.subtract(z, m[:, None], out=z)
        np.exp(z, out=z)
        s = z.sum(axis=1)
        lse[start:stop] = m + np.log(s)
        loss[start:stop] = np.where(local_valid, lse[start:stop] - correct, 0.0)

        if with_grad:
            np.divide(z, s[:, None], out=z)
            rows = np.nonzero(local_valid)[0]
            z[rows, labels[rows]] -= 1.0
            z *= upstream[start:stop, None]
            np.matmul(z, cbuf, out=grads.d_e[start:stop])
            np.matmul(z.T, ebuf[start:stop], out=acc)
            grads.d_c += acc
    return LossOutput(per_token_loss=loss, lse=lse, mean_logits=None), grads


def finite_difference_gradients(
    e, c, x, upstream, step: float = 1e-5, classifier_entries=None
):
    """Central-difference gradients of the upstream-weighted total loss.

    Differentiates the same float64 function of the widened inputs that
    :func:`naive_backward` differentiates analytically.  Returns the full
    embedding gradient and, if ``classifier_entries`` (an iterable of
    (row, col) pairs) is given, the classifier gradient at those entries.
    Quadratic-cost probe meant for small instances.
    """
    _check_inputs(e, c, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    e64 = e.data.astype(np.float64)
    c64 = c.data.astype(np.float64)
    valid = x.valid_mask
    safe = np.where(valid, x.labels, 0)

    def total(emat, cmat):
        z = emat @ cmat.T
        m = z.max(axis=1)
        lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
        correct = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
        return float(np.sum(upstream * np.where(valid, lse - correct, 0.0)))

    d_e = np.zeros_like(e64)
    for i in range(e64.shape[0]):
        for k in range(e64.shape[1]):
            orig = e64[i, k]
            e64[i, k] = orig + step
            hi = total(e64, c64)
            e64[i, k] = orig - step
            lo = total(e64, c64)
            e64[i, k] = orig
            d_e[i, k] = (hi - lo) / (2.0 * step)

    d_c_entries = None
    if classifier_entries is not None:
        d_c_entries = np.zeros(len(classifier_entries))
        for idx, (j, k) in enumerate(classifier_entries):
            orig = c64[j, k]
            c64[j, k] = orig + step
            hi = total(e64, c64)
            c64[j, k] = orig - step
            lo = total(e64, c64)
            c64[j, k] = orig
            d_c_entries[idx] = (hi - lo) / (2.0 * step)
    return d_e, d_c_entries
