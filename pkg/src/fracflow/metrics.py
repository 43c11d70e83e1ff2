"""Relative error series between trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ErrorSeries", "error_series", "relative_error"]


@dataclass
class ErrorSeries:
    values: np.ndarray  # percent, one per compared step
    norm: str = "euclidean"

    @property
    def final(self) -> float:
        return float(self.values[-1]) if len(self.values) else 0.0

    def __len__(self):
        return len(self.values)


def relative_error(reference, candidate, weights=None) -> float:
    """100 * ||ref - cand|| / ||ref|| in the (optionally weighted) l2 norm."""
    ref = np.asarray(reference, dtype=float)
    diff = ref - np.asarray(candidate, dtype=float)
    w = 1.0 if weights is None else np.asarray(weights, dtype=float)
    den = np.sqrt(np.sum(w * ref * ref))
    if den == 0.0:
        raise ValueError("reference has zero norm")
    return float(100.0 * np.sqrt(np.sum(w * diff * diff)) / den)


def error_series(reference, candidate, weights=None) -> ErrorSeries:
    """Per-step relative errors; rows of the inputs are time levels."""
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    cand = np.atleast_2d(np.asarray(candidate, dtype=float))
    if ref.shape != cand.shape:
        raise ValueError(f"trajectory shapes differ: {ref.shape} vs {cand.shape}")
    vals = np.array([relative_error(r, c, weights) for r, c in zip(ref, cand)])
    return ErrorSeries(vals, "euclidean" if weights is None else "weighted")
