"""Input checks shared by the estimator wrappers and the functional API."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

__all__ = ["check_embedding_matrix", "check_token_ids", "check_probability", "check_positive_int"]


def check_embedding_matrix(E, n_rows: int | None = None) -> np.ndarray:
    """2-D finite float64 array, optionally with an exact row count."""
    E = check_array(E, dtype=np.float64, ensure_all_finite=True)
    if n_rows is not None and E.shape[0] != n_rows:
        raise ValueError(f"expected {n_rows} rows, got {E.shape[0]}")
    return E


def check_token_ids(ids, vocab_size: int) -> np.ndarray:
    a = np.asarray(ids)
    if a.size and not np.issubdtype(a.dtype, np.integer):
        raise TypeError("token ids must be integers")
    a = a.astype(np.int64)
    if a.size and (a.min() < 0 or a.max() >= vocab_size):
        raise ValueError(f"token id outside [0, {vocab_size})")
    return a


def check_probability(p: float, name: str, *, open_low: bool = True) -> float:
    p = float(p)
    ok = (0 < p <= 1) if open_low else (0 <= p <= 1)
    if not ok:
        raise ValueError(f"{name} must lie in {'(0' if open_low else '[0'}, 1], got {p}")
    return p


def check_positive_int(n, name: str) -> int:
    if int(n) != n or n < 1:
        raise ValueError(f"{name} must be a positive integer, got {n}")
    return int(n)
