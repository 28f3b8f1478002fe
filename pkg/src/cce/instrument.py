"""Allocation accounting, wall-clock timing, and softmax sparsity statistics.

Memory is measured by logical tracked allocations, not process RSS: kernels
and oracles route their buffers through :func:`scratch_buffer` /
:func:`output_buffer`, and :func:`with_alloc_tracking` reports the
high-water mark of live scratch bytes.  Output buffers (loss vectors,
gradients) are counted separately, mirroring the "what any method must at
least allocate" framing of memory comparisons.  Outside a tracking scope
the buffer helpers are plain numpy allocations with zero overhead beyond a
None check, so tracking never changes results.
"""

from __future__ import annotations

import threading
import time
import weakref
from dataclasses import dataclass

import numpy as np


@dataclass
class AllocationReport:
    """High-water scratch bytes, allocation count, and declared output bytes."""

    peak_transient_bytes: int
    allocation_count: int
    output_bytes: int


@dataclass
class TimingReport:
    median_ms: float
    p10_ms: float
    p90_ms: float
    warmup_count: int
    iteration_count: int


@dataclass
class SparsityCurve:
    """Mean of the descending-sorted softmax rows, plus the fraction >= epsilon."""

    sorted_mean_prob: np.ndarray
    frac_above_epsilon: float


class _Tracker:
    def __init__(self):
        self.lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0
        self.alloc_count = 0
        self.output_bytes = 0

    def on_scratch(self, nbytes: int) -> None:
        with self.lock:
            self.alloc_count += 1
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def on_release(self, nbytes: int) -> None:
        with self.lock:
            self.live_bytes -= nbytes

    def on_output(self, nbytes: int) -> None:
        with self.lock:
            self.alloc_count += 1
            self.output_bytes += nbytes


_active: _Tracker | None = None
_scope_lock = threading.Lock()


def scratch_buffer(shape, dtype) -> np.ndarray:
    """Uninitialized scratch array, counted against the transient peak."""
    arr = np.empty(shape, dtype)
    return adopt_scratch(arr)


def adopt_scratch(arr: np.ndarray) -> np.ndarray:
    """Register an existing array as transient scratch; freed on collection."""
    tracker = _active
    if tracker is not None:
        tracker.on_scratch(arr.nbytes)
        weakref.finalize(arr, tracker.on_release, arr.nbytes)
    return arr


def output_buffer(shape, dtype) -> np.ndarray:
    """Zeroed array that will be handed back to the caller as a result."""
    arr = np.zeros(shape, dtype)
    tracker = _active
    if tracker is not None:
        tracker.on_output(arr.nbytes)
    return arr


def with_alloc_tracking(computation):
    """Run ``computation()`` under allocation tracking.

    Returns ``(result, AllocationReport)``.  Only one scope may be active
    per process; nesting raises.
    """
    global _active
    with _scope_lock:
        if _active is not None:
            raise RuntimeError("allocation tracking scopes cannot nest")
        tracker = _Tracker()
        _active = tracker
    try:
        result = computation()
    finally:
        with _scope_lock:
            _active = None
    return result, AllocationReport(
        peak_transient_bytes=tracker.peak_bytes,
        allocation_count=tracker.alloc_count,
        output_bytes=tracker.output_bytes,
    )


def time_op(computation, warmups: int, iterations: int) -> TimingReport:
    """Median/p10/p90 wall-clock milliseconds over ``iterations`` timed runs."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if warmups < 0:
        raise ValueError("warmups must be >= 0")
    for _ in range(warmups):
        computation()
    samples = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        computation()
        samples[i] = (time.perf_counter() - t0) * 1e3
    p10, med, p90 = np.percentile(samples, [10.0, 50.0, 90.0])
    return TimingReport(
        median_ms=float(med),
        p10_ms=float(p10),
        p90_ms=float(p90),
        warmup_count=warmups,
        iteration_count=iterations,
    )


def sparsity_stats(e, c, epsilon: float) -> SparsityCurve:
    """Average descending-sorted softmax row, computed from the full oracle softmax."""
    from . import oracle  # local import; oracle depends on this module

    if e.dim != c.dim:
        raise ValueError(f"feature dims differ: {e.dim} vs {c.dim}")
    if e.n_tokens < 1:
        raise ValueError("need at least one token")
    probs = oracle.full_softmax(e, c)
    above = int(np.count_nonzero(probs >= epsilon))
    rows = np.sort(probs, axis=1)[:, ::-1]
    return SparsityCurve(
        sorted_mean_prob=rows.mean(axis=0),
        frac_above_epsilon=above / probs.size,
    )
