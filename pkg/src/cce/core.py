"""Shared data types, synthetic data generation, bf16 rounding, and matrix I/O.

Conventions used across the package:

* Embeddings are stored token-major: ``E`` is ``(n_tokens, dim)`` float32,
  one contiguous row per token.  The classifier is vocab-major: ``C`` is
  ``(vocab, dim)`` float32, one contiguous row per vocabulary entry.  Every
  blocked kernel therefore reads contiguous memory when it loads a tile.
* The logit of token ``i`` against vocabulary entry ``j`` is the dot product
  ``C[j] @ E[i]``.  The full ``(n_tokens, vocab)`` logit matrix is never
  materialized outside the oracle module.
* Ignored positions (padding, prompt tokens, ...) carry the label ``-1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IGNORE_INDEX = -1

#: Filtering threshold: the smallest value that survives rounding when a
#: softmax entry is accumulated in bfloat16 (7 fraction bits + 5 guard bits).
EPSILON_DEFAULT = 2.0 ** -12

_MATRIX_MAGIC = b"CCEM"
_TOKENS_MAGIC = b"CCEX"
_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


def _check_2d_float32(data: np.ndarray, name: str, min_rows: int) -> np.ndarray:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {data.shape}")
    if data.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {data.shape[0]}")
    if data.shape[1] < 1:
        raise ValueError(f"{name} needs at least one feature column")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name} contains non-finite entries")
    return data


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Backbone outputs, one float32 row per token: shape ``(n_tokens, dim)``."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _check_2d_float32(self.data, "embeddings", 0))

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClassifierMatrix:
    """Classifier head, one float32 row per vocabulary entry: shape ``(vocab, dim)``."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _check_2d_float32(self.data, "classifier", 1))

    @property
    def vocab(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TokenBatch:
    """Target labels; each entry is ``IGNORE_INDEX`` or a valid vocab index."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
        if labels.size and labels.min() < IGNORE_INDEX:
            raise ValueError("labels must be -1 (ignore) or non-negative")
        object.__setattr__(self, "labels", labels)

    @property
    def n_tokens(self) -> int:
        return self.labels.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.labels != IGNORE_INDEX

    def check_vocab(self, vocab: int) -> None:
        if self.labels.size and self.labels.max() >= vocab:
            raise ValueError(
                f"label {int(self.labels.max())} out of range for vocab size {vocab}"
            )


@dataclass(frozen=True)
class BlockSpec:
    """Tile sizes for the blocked kernels: tokens x vocab rows x feature slice."""

    n_b: int = 128
    m_b: int = 128
    d_b: int = 64

    def __post_init__(self):
        if min(self.n_b, self.m_b, self.d_b) < 1:
            raise ValueError(f"block sizes must be >= 1, got {self}")


@dataclass(frozen=True)
class CceOptions:
    """Knobs shared by the blocked kernels.

    ``epsilon`` is the gradient-filtering threshold on softmax entries;
    tiles whose entries are all strictly below it are skipped in the
    backward pass.  ``deterministic`` forces a serial, schedule-ordered
    execution whose results are bit-reproducible regardless of
    ``thread_count``.  ``reduction`` selects the default upstream gradient
    used by convenience backward paths: ``"sum"`` (1 per valid token),
    ``"mean-over-valid"`` (1/#valid), or ``"none"`` (caller supplies it).
    """

    epsilon: float = EPSILON_DEFAULT
    filtering: bool = True
    vocab_sorting: bool = True
    deterministic: bool = False
    reduction: str = "mean-over-valid"
    thread_count: int = 1

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.reduction not in ("sum", "mean-over-valid", "none"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.thread_count < 1:
            raise ValueError("thread_count must be >= 1")


@dataclass
class LossOutput:
    """Per-token negative log-likelihood and its log-sum-exp normalizers.

    At ignored positions both ``per_token_loss`` and ``lse`` are 0.
    ``mean_logits`` (length vocab, average logit per vocabulary entry over
    the valid tokens) is present only when vocabulary sorting was enabled.
    """

    per_token_loss: np.ndarray
    lse: np.ndarray
    mean_logits: np.ndarray | None = None


@dataclass
class Gradients:
    """Loss gradients: ``d_e`` is (n_tokens, dim), ``d_c`` is (vocab, dim)."""

    d_e: np.ndarray
    d_c: np.ndarray


def default_upstream(x: TokenBatch, reduction: str, dtype=np.float32) -> np.ndarray:
    """Upstream loss gradient implied by a reduction: 0 at ignored positions.

    "sum" weights every valid token by 1; "mean-over-valid" by 1/#valid
    (all zeros when the whole batch is ignored).  "none" has no implied
    upstream and is rejected here.
    """
    if reduction == "none":
        raise ValueError('reduction "none" requires an explicit upstream vector')
    valid = x.valid_mask
    upstream = np.zeros(x.n_tokens, dtype=dtype)
    if reduction == "sum":
        upstream[valid] = 1.0
    elif reduction == "mean-over-valid":
        n_valid = int(valid.sum())
        if n_valid:
            upstream[valid] = 1.0 / n_valid
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return upstream


# ---------------------------------------------------------------------------
# bfloat16 rounding emulation
# ---------------------------------------------------------------------------


def round_to_bf16(x):
    """Round float32 value(s) to bfloat16 and re-express as float32.

    Round-to-nearest-even on the 7-bit fraction, done on the raw bit
    pattern: add ``0x7FFF`` plus the tie-break bit, then truncate the low
    16 bits.  NaN passes through unchanged; +/-inf are already exact.
    Accepts scalars or arrays; idempotent.
    """
    arr = np.array(x, dtype=np.float32, copy=True)
    bits = arr.view(np.uint32)
    keep = np.isnan(arr)
    with np.errstate(over="ignore"):
        rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) & np.uint32(
            0xFFFF0000
        )
    bits[...] = np.where(keep, bits, rounded)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(arr)
    return arr


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# Internal chunk height for label sampling; fixed so that results do not
# depend on available memory.
_LABEL_CHUNK = 256

# Shape of the concentration profile: Zipf-like log decay over the head,
# plus a linear-in-rank term that drives the tail below float32 precision
# within roughly the first hundred ranks at concentration 4.  Mirrors how
# measured token probabilities fall off a log-log line and vanish beneath
# numerical precision.
_TAIL_SCALE = 12.0


def gen_synthetic(
    d: int, n: int, v: int, seed: int, concentration: float = 0.0
) -> tuple[EmbeddingMatrix, ClassifierMatrix, TokenBatch]:
    """Deterministic synthetic embeddings, classifier, and labels.

    Entries are standard-normal float32.  With ``concentration > 0`` a
    rank-1 bias is added to the classifier so that a scattered, Zipf-like
    head of the vocabulary dominates every row's softmax; the embeddings'
    component along the bias direction is pinned to 1 so the head is
    dominant for every token, not just on average.  Labels are drawn from
    each token's induced softmax (Gumbel-max trick).
    """
    if min(d, n, v) < 1:
        raise ValueError(f"dimensions must be >= 1, got d={d} n={n} v={v}")
    if concentration < 0:
        raise ValueError("concentration must be >= 0")
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, d), dtype=np.float32)
    c = rng.standard_normal((v, d), dtype=np.float32)

    if concentration > 0:
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        u32 = u.astype(np.float32)
        ranks = rng.permutation(v).astype(np.float64)
        profile = -0.5 * concentration * np.sqrt(d) * (np.log1p(ranks) + ranks / _TAIL_SCALE)
        c += np.outer(profile.astype(np.float32), u32)
        # Pin the u-component of every embedding to exactly 1 so the bias
        # contributes profile[j] to every logit row.
        e += np.outer(1.0 - e @ u32, u32)

    e64 = e.astype(np.float64)
    c64 = c.astype(np.float64)
    labels = np.empty(n, dtype=np.int64)
    for start in range(0, n, _LABEL_CHUNK):
        stop = min(start + _LABEL_CHUNK, n)
        z = e64[start:stop] @ c64.T
        gumbel = rng.gumbel(size=z.shape)
        labels[start:stop] = np.argmax(z + gumbel, axis=1)
    return EmbeddingMatrix(e), ClassifierMatrix(c), TokenBatch(labels)


# ---------------------------------------------------------------------------
# binary matrix / token-batch files
# ---------------------------------------------------------------------------

_MATRIX_HEADER = struct.Struct("<4sIQQ")
_TOKENS_HEADER = struct.Struct("<4sIQ")


def write_matrix(path, m) -> None:
    """Write a 2-D float32 matrix (or Embedding/ClassifierMatrix) to ``path``."""
    data = m.data if hasattr(m, "data") else np.asarray(m)
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write non-finite entries")
    header = _MATRIX_HEADER.pack(_MATRIX_MAGIC, _FORMAT_VERSION, data.shape[0], data.shape[1])
    Path(path).write_bytes(header + data.astype("<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    """Read a matrix written by :func:`write_matrix`; bit-exact round trip."""
    raw = Path(path).read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise ValueError(f"{path}: file too short for a matrix header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack_from(raw)
    if magic != _MATRIX_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_MATRIX_MAGIC!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    expected = _MATRIX_HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_MATRIX_HEADER.size)
    return flat.reshape(rows, cols).astype(np.float32, copy=True)


def write_tokens(path, x) -> None:
    """Write a token batch (or 1-D int array) to ``path``."""
    labels = x.labels if hasattr(x, "labels") else np.asarray(x)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"expected 1-D labels, got shape {labels.shape}")
    header = _TOKENS_HEADER.pack(_TOKENS_MAGIC, _FORMAT_VERSION, labels.shape[0])
    Path(path).write_bytes(header + labels.astype("<i8").tobytes())


def read_tokens(path) -> TokenBatch:
    """Read a token batch written by :func:`write_tokens`."""
    raw = Path(path).read_bytes()
    if len(raw) < _TOKENS_HEADER.size:
        raise ValueError(f"{path}: file too short for a token header")
    magic, version, length = _TOKENS_HEADER.unpack_from(raw)
    if magic != _TOKENS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_TOKENS_MAGIC!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    expected = _TOKENS_HEADER.size + length * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {length} labels, got {len(raw)}")
    labels = np.frombuffer(raw, dtype="<i8", offset=_TOKENS_HEADER.size)
    return TokenBatch(labels.astype(np.int64, copy=True))
