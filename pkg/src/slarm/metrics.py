"""Radio-map accuracy and exploration-time metrics.

The accuracy metric is this repo's operationalization (documented in the
README): a cell is accurate when the estimate agrees with ground truth on
usability. For a truth-free cell that means the estimate also classifies it
free and its expected gain is within epsilon_db of the true one; for a
truth-occupied cell it means the estimate does not claim it free (occupied
and never-explored both count, since neither admits the cell to the radio
map). The percentage is taken over every cell of the mobile area.
"""

from __future__ import annotations

import numpy as np

from .radio import RadioMap


def radio_map_accuracy(est_tri: np.ndarray, est_radio: RadioMap,
                       truth_tri: np.ndarray, truth_radio: RadioMap,
                       epsilon_db: float = 1.0) -> float:
    """Percent of cells whose class and (when free) gain match ground truth."""
    if est_tri.shape != truth_tri.shape:
        raise ValueError(f"grid shapes differ: {est_tri.shape} vs {truth_tri.shape}")
    if est_radio.shape != truth_radio.shape or est_radio.shape != est_tri.shape:
        raise ValueError("radio map shape does not match the grids")

    truth_free = truth_tri == 0.5
    est_free = est_tri == 0.5

    gain_ok = np.isfinite(est_radio.gain_db) & np.isfinite(truth_radio.gain_db) \
        & (np.abs(np.where(np.isfinite(est_radio.gain_db),
                           est_radio.gain_db, 0.0)
                  - np.where(np.isfinite(truth_radio.gain_db),
                             truth_radio.gain_db, 0.0)) <= epsilon_db)

    accurate = np.where(truth_free, est_free & gain_ok, ~est_free)
    return float(accurate.mean() * 100.0)


def exploration_time_s(trajectory, v: float, delta: float) -> float:
    """Travel time of a cell trajectory: transitions * delta / v, turns free."""
    if v <= 0:
        raise ValueError("speed must be > 0")
    transitions = max(len(trajectory) - 1, 0)
    return transitions * delta / v
