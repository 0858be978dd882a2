"""Evaluation metrics."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def _check_permutations(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"orders must be 1-D and equally long, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("Kendall tau needs at least two items")
    sa, sb = np.sort(a), np.sort(b)
    if np.any(sa[1:] == sa[:-1]) or not np.array_equal(sa, sb):
        raise ValueError("both inputs must be permutations of the same items")


def kendall_tau(pred_order, true_order) -> float:
    """(concordant - discordant) / (n choose 2) over all item pairs."""
    a, b = np.asarray(pred_order), np.asarray(true_order)
    _check_permutations(a, b)
    n = a.size
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    score = np.triu(sa * sb, k=1).sum()
    return float(score) / (n * (n - 1) / 2)


def per_node_accuracy(logits, targets, mask) -> float:
    """Fraction of masked nodes whose argmax (lowest index on ties) equals the target."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    pred = np.asarray(logits).argmax(axis=1)
    return float((pred[mask] == np.asarray(targets)[mask]).mean())


def assign_positions(probs: np.ndarray) -> np.ndarray:
    """Most probable one-to-one patch -> position assignment."""
    logp = np.log(np.clip(probs, 1e-12, None))
    rows, cols = linear_sum_assignment(-logp)
    out = np.empty(len(probs), dtype=np.int64)
    out[rows] = cols
    return out
