"""Derivative-aware state encoding and the redundancy reward shaping.

The shaping term rewards movement of the realized traffic state (region
accumulation, completion flow) towards the rising branch of each region's
flow law and penalises drifting deeper into the congested branch. It is
built from guarded secant slopes of the realized state trajectory, a
direction flag, and a trigonometric reduction factor that concentrates the
effect near the critical accumulation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mfd import MfdSpec

logger = logging.getLogger(__name__)

# default shaping weights, applied after reward normalisation
OMEGA_H = 0.2
OMEGA_DH = 0.1
# secant denominator guard, vehicles
SLOPE_GUARD = 1.0
# secants are normalised by this multiple of the base MFD's free-flow slope;
# together with OMEGA_H this places the shaped optimum 1-5% below critical
SLOPE_SCALE_MULT = 5.0
# first/second accumulation differences are scaled by this fraction of n_cap
DIFF_SCALE_FRACTION = 0.05


def mfd_slope(m_now: float, m_prev: float, n_now: float, n_prev: float,
              guard: float = SLOPE_GUARD) -> float:
    """Guarded secant of completion flow over accumulation between two steps."""
    dn = n_now - n_prev
    if abs(dn) < guard:
        return 0.0
    return (m_now - m_prev) / dn


def mfd_curvature(h_now: float, h_prev: float) -> float:
    """Change of the secant slope between two consecutive steps."""
    return h_now - h_prev


def direction_flag(n_now: float, n_prev: float) -> int:
    """+1 while accumulation is not falling, -1 otherwise."""
    return 1 if n_now >= n_prev else -1


def reduction_factor(n: float, n_crit: float, n_cap: float) -> float:
    """Cosine bump peaking at the critical accumulation, zero at 0 and n_cap."""
    if not 0.0 <= n <= n_cap:
        logger.warning("accumulation %.1f outside [0, %.1f], clamped", n, n_cap)
        n = min(max(n, 0.0), n_cap)
    if n < n_crit:
        x = (n_crit - n) / n_crit
    else:
        x = (n - n_crit) / (n_cap - n_crit)
    return 0.5 * (1.0 + math.cos(-math.pi * x))


@dataclass(frozen=True)
class EpsilonConfig:
    """Weights and per-region constants of the shaping term."""

    omega_h: float
    omega_dh: float
    n_crit: tuple[float, float]
    n_cap: tuple[float, float]
    slope_scale: tuple[float, float]
    guard: float = SLOPE_GUARD

    @classmethod
    def from_mfds(
        cls,
        mfds: Sequence[MfdSpec],
        omega_h: float = OMEGA_H,
        omega_dh: float = OMEGA_DH,
        guard: float = SLOPE_GUARD,
        slope_scale_mult: float = SLOPE_SCALE_MULT,
    ) -> "EpsilonConfig":
        scales = []
        for spec in mfds:
            probe = 0.01 * spec.n_crit
            scales.append(slope_scale_mult * float(spec.flow(probe)) / probe)
        return cls(
            omega_h=omega_h,
            omega_dh=omega_dh,
            n_crit=(mfds[0].n_crit, mfds[1].n_crit),
            n_cap=(mfds[0].n_cap, mfds[1].n_cap),
            slope_scale=(scales[0], scales[1]),
            guard=guard,
        )


@dataclass(frozen=True)
class RegionSample:
    """Realized per-region trajectory sample feeding the shaping term."""

    n_now: float
    n_prev: float
    m_now: float
    m_prev: float
    h_prev: float


def epsilon_terms(cfg: EpsilonConfig, regions: Sequence[RegionSample]) -> tuple[float, float]:
    """Slope and curvature shaping terms summed over both regions."""
    h_total = 0.0
    dh_total = 0.0
    for i, r in enumerate(regions):
        h = mfd_slope(r.m_now, r.m_prev, r.n_now, r.n_prev, cfg.guard)
        dh = mfd_curvature(h, r.h_prev)
        alpha = direction_flag(r.n_now, r.n_prev)
        f = reduction_factor(r.n_now, cfg.n_crit[i], cfg.n_cap[i])
        scale = cfg.slope_scale[i]
        h_total += cfg.omega_h * f * alpha * (h / scale)
        dh_total += cfg.omega_dh * f * (dh / scale)
    return h_total, dh_total


def epsilon_reward(cfg: EpsilonConfig, regions: Sequence[RegionSample]) -> float:
    """Total shaping reward for one step."""
    h_total, dh_total = epsilon_terms(cfg, regions)
    return h_total + dh_total


class EpsilonShaper:
    """Stateful per-episode wrapper keeping the previous secant per region."""

    def __init__(self, cfg: EpsilonConfig):
        self.cfg = cfg
        self._h_prev = [0.0, 0.0]

    def reset(self) -> None:
        self._h_prev = [0.0, 0.0]

    def step(
        self,
        n_now: tuple[float, float],
        n_prev: tuple[float, float],
        m_now: tuple[float, float],
        m_prev: tuple[float, float],
    ) -> tuple[float, float]:
        regions = [
            RegionSample(n_now[i], n_prev[i], m_now[i], m_prev[i], self._h_prev[i])
            for i in range(2)
        ]
        terms = epsilon_terms(self.cfg, regions)
        for i, r in enumerate(regions):
            self._h_prev[i] = mfd_slope(r.m_now, r.m_prev, r.n_now, r.n_prev, self.cfg.guard)
        return terms


# -- state encoders ----------------------------------------------------------


class BaselineEncoder:
    """Accumulations plus realized demand, scaled into [-1, 1]; 8 components."""

    dim = 8

    def __init__(self, mfds: Sequence[MfdSpec], q_max: float):
        self._caps = np.array(
            [mfds[0].n_cap, mfds[0].n_cap, mfds[1].n_cap, mfds[1].n_cap]
        )
        self._q_max = max(q_max, 1e-9)

    def reset(self) -> None:
        pass

    def peek(self, state, q) -> np.ndarray:
        n = state.as_array()
        vec = np.concatenate([n / self._caps, np.asarray(q, dtype=float) / self._q_max])
        return np.clip(vec, -1.0, 1.0)

    def observe(self, state, q) -> np.ndarray:
        return self.peek(state, q)


class DerivativeEncoder:
    """Accumulations with first and second differences; 12 components.

    The first two steps of an episode zero-pad the missing differences.
    """

    dim = 12

    def __init__(self, mfds: Sequence[MfdSpec], diff_scale_fraction: float = DIFF_SCALE_FRACTION):
        self._caps = np.array(
            [mfds[0].n_cap, mfds[0].n_cap, mfds[1].n_cap, mfds[1].n_cap]
        )
        self._diff_scale = diff_scale_fraction * self._caps
        self._prev: np.ndarray | None = None
        self._prev_diff: np.ndarray | None = None

    def reset(self) -> None:
        self._prev = None
        self._prev_diff = None

    def _components(self, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._prev is None:
            diff = np.zeros(4)
        else:
            diff = n - self._prev
        if self._prev is None:
            diff2 = np.zeros(4)
        else:
            prev_diff = self._prev_diff if self._prev_diff is not None else np.zeros(4)
            diff2 = diff - prev_diff
        return diff, diff2

    def peek(self, state, q=None) -> np.ndarray:
        n = state.as_array()
        diff, diff2 = self._components(n)
        vec = np.concatenate(
            [n / self._caps, diff / self._diff_scale, diff2 / self._diff_scale]
        )
        return np.clip(vec, -1.0, 1.0)

    def observe(self, state, q=None) -> np.ndarray:
        n = state.as_array()
        diff, diff2 = self._components(n)
        vec = np.concatenate(
            [n / self._caps, diff / self._diff_scale, diff2 / self._diff_scale]
        )
        if self._prev is not None:
            self._prev_diff = n - self._prev
        self._prev = n
        return np.clip(vec, -1.0, 1.0)
