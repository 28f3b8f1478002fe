"""Shared test utilities."""

import numpy as np


def rel_err(a, b) -> float:
    """Max absolute difference scaled by the max-norm of the reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AssertionError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def bf16_reference(value: float) -> float:
    """Struct-based bfloat16 round-to-nearest-even, independent of the library path."""
    import struct

    bits = struct.unpack(">I", struct.pack(">f", np.float32(value)))[0]
    if (bits >> 23) & 0xFF == 0xFF and bits & 0x7FFFFF:
        return float("nan")
    dropped = bits & 0xFFFF
    kept = bits >> 16
    half = 0x8000
    if dropped > half or (dropped == half and kept & 1):
        kept += 1
    return float(struct.unpack(">f", struct.pack(">I", (kept << 16) & 0xFFFFFFFF))[0])
