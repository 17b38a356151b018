"""Pure numpy fallback for the compiled kernels.

Same contracts as `_kernels.pyx`: float64 accumulation for distances,
sign convention sgn(0) = +1, LSB-first bit packing into little-endian
uint64 words.
"""

import numpy as np

BACKEND = "pure"


def euclidean(a: np.ndarray, b: np.ndarray) -> float:
    """L2 distance between two float32 vectors of equal length."""
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))


def euclidean_batch(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """L2 distances from ``q`` to every row of ``x``."""
    if q.shape[0] != x.shape[1]:
        raise ValueError("dimension mismatch")
    diff = x.astype(np.float64) - q.astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def simhash_codes(x: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Packed sign codes for each row of ``x`` under projections ``proj``."""
    if x.shape[1] != proj.shape[1]:
        raise ValueError("dimension mismatch")
    m = proj.shape[0]
    words = (m + 63) // 64
    dots = x.astype(np.float64) @ proj.astype(np.float64).T
    bits = (dots >= 0.0).astype(np.uint8)
    packed = np.packbits(bits, axis=1, bitorder="little")
    padded = np.zeros((x.shape[0], words * 8), dtype=np.uint8)
    padded[:, : packed.shape[1]] = packed
    return padded.view("<u8")


def collision_counts(q_code: np.ndarray, codes: np.ndarray, m: int) -> np.ndarray:
    """Matching-bit counts (m minus Hamming distance) per row of ``codes``."""
    if codes.shape[1] != q_code.shape[0]:
        raise ValueError("code length mismatch")
    ham = np.bitwise_count(np.bitwise_xor(codes, q_code)).sum(axis=1)
    return (m - ham).astype(np.int64)
