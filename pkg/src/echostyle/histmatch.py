"""Histogram specification: monotone remapping of a sample so its empirical
CDF matches a target density histogram."""

from __future__ import annotations

import numpy as np

__all__ = ["check_histogram", "entry_histogram", "average_histogram", "specify"]


def check_histogram(edges: np.ndarray, masses: np.ndarray):
    """Validate a density histogram (bin edges + masses summing to 1)."""
    edges = np.asarray(edges, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    if edges.ndim != 1 or masses.ndim != 1 or edges.size != masses.size + 1:
        raise ValueError(
            f"histogram: need len(edges) == len(masses)+1, got {edges.size} and {masses.size}"
        )
    if np.any(np.diff(edges) <= 0):
        raise ValueError("histogram: bin edges must be strictly increasing")
    if masses.min() < 0:
        raise ValueError("histogram: negative bin mass")
    if abs(masses.sum() - 1.0) > 1e-9:
        raise ValueError(f"histogram: masses sum to {masses.sum():.12g}, expected 1")
    return edges, masses


def entry_histogram(values: np.ndarray, bins: int = 64, value_range=None):
    """Empirical density histogram of a sample."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if value_range is None:
        lo, hi = float(values.min()), float(values.max())
    else:
        lo, hi = value_range
    if hi <= lo:
        hi = lo + 1.0  # degenerate sample: one bin catches everything
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts / counts.sum()


def average_histogram(samples, bins: int = 64):
    """Average of the samples' empirical histograms over their common range."""
    if not samples:
        raise ValueError("average_histogram: no samples")
    flat = [np.asarray(s, dtype=np.float64).ravel() for s in samples]
    lo = min(float(s.min()) for s in flat)
    hi = max(float(s.max()) for s in flat)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    masses = np.zeros(bins)
    for s in flat:
        counts, _ = np.histogram(s, bins=edges)
        masses += counts / counts.sum()
    return edges, masses / len(flat)


def specify(values: np.ndarray, edges: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Monotonically remap `values` so their empirical CDF matches the target
    histogram. Equal inputs map to equal outputs; ordering is preserved."""
    edges, masses = check_histogram(edges, masses)
    values = np.asarray(values, dtype=np.float64)
    flat = values.ravel()
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    src_quantiles = np.cumsum(counts) / flat.size
    target_cdf = np.concatenate([[0.0], np.cumsum(masses)])
    target_cdf[-1] = 1.0
    mapped = np.interp(src_quantiles, target_cdf, edges)
    return mapped[inverse].reshape(values.shape)
