"""Cross-entropy for large vocabularies without materializing the logit matrix.

The package computes the token-level loss and its exact gradients from
blockwise logit tiles that live only in per-worker scratch, alongside
full-logit reference oracles, a chunked baseline, and allocation/timing
instrumentation for comparing them.
"""

from .core import (
    EPSILON_DEFAULT,
    IGNORE_INDEX,
    BlockSpec,
    CceOptions,
    ClassifierMatrix,
    EmbeddingMatrix,
    Gradients,
    LossOutput,
    TokenBatch,
    default_upstream,
    gen_synthetic,
    read_matrix,
    read_tokens,
    round_to_bf16,
    write_matrix,
    write_tokens,
)
from .instrument import (
    AllocationReport,
    SparsityCurve,
    TimingReport,
    sparsity_stats,
    time_op,
    with_alloc_tracking,
)
from .kernels import (
    BackwardStats,
    BlockSchedule,
    VocabOrder,
    block_skip_decision,
    cce_loss,
    compute_vocab_order,
    filter_ignored,
    indexed_matmul,
    log_add_exp,
    lse_backward,
    lse_forward,
)
from .oracle import (
    FullLogits,
    chunked_loss_grad,
    finite_difference_gradients,
    full_softmax,
    logsumexp_stable,
    naive_backward,
    naive_forward,
)

__all__ = [
    "AllocationReport",
    "BackwardStats",
    "BlockSchedule",
    "BlockSpec",
    "CceOptions",
    "ClassifierMatrix",
    "EPSILON_DEFAULT",
    "EmbeddingMatrix",
    "FullLogits",
    "Gradients",
    "IGNORE_INDEX",
    "LossOutput",
    "SparsityCurve",
    "TimingReport",
    "TokenBatch",
    "VocabOrder",
    "block_skip_decision",
    "cce_loss",
    "chunked_loss_grad",
    "compute_vocab_order",
    "default_upstream",
    "filter_ignored",
    "finite_difference_gradients",
    "full_softmax",
    "gen_synthetic",
    "indexed_matmul",
    "log_add_exp",
    "logsumexp_stable",
    "lse_backward",
    "lse_forward",
    "naive_backward",
    "naive_forward",
    "read_matrix",
    "read_tokens",
    "round_to_bf16",
    "sparsity_stats",
    "time_op",
    "with_alloc_tracking",
    "write_matrix",
    "write_tokens",
]

__version__ = "0.1.0"
