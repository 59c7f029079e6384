"""OD demand time series: Gaussian base profiles, surges, ramps, averaging.

Demand is piecewise-constant over each control step (zero-order hold); a
profile holds one flow value per step for the four OD pairs in the order
1->1, 1->2, 2->1, 2->2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

OD_LABELS = ("q11", "q12", "q21", "q22")
OD_11, OD_12, OD_21, OD_22 = range(4)

EPISODE_STEPS = 120
STEP_SECONDS = 60.0


@dataclass(frozen=True)
class DemandProfile:
    """Per-step OD flows in veh/s, shape (steps, 4)."""

    flows: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.flows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise DomainError(f"profile must have shape (steps, 4), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("profile contains non-finite flows")
        if np.any(arr < 0.0):
            raise DomainError("profile contains negative flows")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "flows", arr)

    @property
    def steps(self) -> int:
        return self.flows.shape[0]

    def od(self, index: int) -> np.ndarray:
        return self.flows[:, index]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step",) + OD_LABELS)
            for k, row in enumerate(self.flows):
                writer.writerow([k] + [f"{v:.12g}" for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DemandProfile":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [[float(rec[lbl]) for lbl in OD_LABELS] for rec in reader]
        return cls(np.array(rows, dtype=float))


@dataclass(frozen=True)
class SurgeSpec:
    """Gaussian demand bump injected into one OD pair."""

    magnitude: float  # veh added over the horizon
    center: float = 1800.0  # s
    spread: float = 300.0  # s
    target_od: int = OD_21

    def __post_init__(self):
        if self.magnitude < 0.0:
            raise DomainError("surge magnitude must be non-negative")
        if self.spread <= 0.0:
            raise DomainError("surge spread must be positive")
        if not 0 <= self.target_od < 4:
            raise DomainError("target OD index out of range")


@dataclass(frozen=True)
class DemandParams:
    """Gaussian peak-hour shape per OD: floor + amplitude * exp(...)."""

    floors: tuple[float, float, float, float] = (0.25, 0.20, 0.25, 0.50)
    amplitudes: tuple[float, float, float, float] = (3.30, 2.00, 3.40, 5.60)
    peak_time: float = 1800.0  # s
    peak_spread: float = 900.0  # s
    steps: int = EPISODE_STEPS
    dt: float = STEP_SECONDS


def base_profile(params: DemandParams = DemandParams()) -> DemandProfile:
    """Peak-hour Gaussian demand; the second hour is close to the floor."""
    if min(params.floors) < 0.0 or min(params.amplitudes) < 0.0:
        raise DomainError("floors and amplitudes must be non-negative")
    t = np.arange(params.steps) * params.dt
    bump = np.exp(-((t - params.peak_time) ** 2) / (2.0 * params.peak_spread**2))
    flows = np.empty((params.steps, 4))
    for j in range(4):
        flows[:, j] = params.floors[j] + params.amplitudes[j] * bump
    return DemandProfile(flows)


def add_surge(base: DemandProfile, surge: SurgeSpec, dt: float = STEP_SECONDS) -> DemandProfile:
    """Add a Gaussian bump whose discrete integral equals the magnitude.

    The bump is renormalised after truncation to the horizon, so the added
    vehicle count matches the requested magnitude exactly (up to rounding)
    even when the centre sits near an episode boundary.
    """
    if surge.magnitude == 0.0:
        return base
    t = np.arange(base.steps) * dt
    weights = np.exp(-((t - surge.center) ** 2) / (2.0 * surge.spread**2))
    total = float(np.sum(weights) * dt)
    if total <= 0.0:
        raise DomainError("surge falls entirely outside the horizon")
    flows = base.flows.copy()
    flows[:, surge.target_od] += surge.magnitude / total * weights
    return DemandProfile(flows)


def incremental_magnitude(
    episode: int, first_disrupted: int, last: int, max_magnitude: float
) -> float:
    """Linear ramp from 0 at the first disrupted episode to the maximum."""
    if not first_disrupted <= episode <= last:
        raise DomainError(
            f"episode {episode} outside ramp range [{first_disrupted}, {last}]"
        )
    return max_magnitude * (episode - first_disrupted) / (last - first_disrupted)


def averaged_history(profiles: Sequence[DemandProfile] | Iterable[DemandProfile]) -> DemandProfile:
    """Element-wise mean of equal-length demand profiles."""
    profiles = list(profiles)
    if not profiles:
        raise DomainError("cannot average an empty history")
    steps = profiles[0].steps
    if any(p.steps != steps for p in profiles):
        raise DomainError("profiles must have equal length")
    return DemandProfile(np.mean([p.flows for p in profiles], axis=0))
