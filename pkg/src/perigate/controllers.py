"""Non-learning baselines: fully open gates and receding-horizon MPC.

The MPC re-solves a finite-horizon throughput maximisation at every step
with projected gradient ascent from several start points, using whatever
demand/MFD model it has been given (in the studies: the running average of
everything it has seen so far). Candidate control sequences are evaluated
in one batched pass through the plant dynamics, finite differences included.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .demand import DemandProfile
from .errors import NumericError
from .mfd import MfdSpec
from .plant import U_MAX, U_MIN, ControlAction, PlantState, step_arrays

NO_CONTROL_U = 1.0


def no_control_action(u: float = NO_CONTROL_U) -> ControlAction:
    """Perimeter fully open; exempt from the signal bounds."""
    return ControlAction(u, u)


class NoControl:
    """Stateless open-gates policy."""

    bounded = False

    def __init__(self, u: float = NO_CONTROL_U):
        self.u = u

    def act(self, k: int, state: PlantState, q) -> ControlAction:
        return ControlAction(self.u, self.u)


@dataclass(frozen=True)
class TabulatedMfd:
    """MFD model interpolated from averaged flow curves; duck-types MfdSpec."""

    grid: np.ndarray
    values: np.ndarray
    n_crit: float
    n_cap: float

    def flow(self, n):
        n = np.asarray(n, dtype=float)
        out = np.interp(n, self.grid, self.values)
        out = np.where(n > self.n_cap, 0.0, out)
        return out if out.ndim else float(out)

    @property
    def max_flow(self) -> float:
        return float(np.max(self.values))


def averaged_mfd(specs: Sequence, points: int = 512) -> TabulatedMfd:
    """Point-wise mean of flow curves at matched accumulations."""
    n_cap = max(s.n_cap for s in specs)
    grid = np.linspace(0.0, n_cap, points)
    values = np.mean([np.asarray(s.flow(grid)) for s in specs], axis=0)
    return TabulatedMfd(
        grid=grid,
        values=values,
        n_crit=float(grid[int(np.argmax(values))]),
        n_cap=n_cap,
    )


@dataclass(frozen=True)
class MpcConfig:
    """Receding-horizon settings plus the internal demand and MFD models."""

    demand_model: DemandProfile
    mfd_model: tuple
    horizon: int = 30
    iterations: int = 16
    restarts: int = 4
    step_size: float = 0.2
    step_grow: float = 1.2
    step_shrink: float = 0.5
    step_min: float = 1e-4
    step_max: float = 1.0
    fd_step: float = 1e-3
    model_substeps: int = 1
    dt: float = 60.0

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1 or self.restarts < 1:
            raise ValueError("horizon, iterations and restarts must be positive")


def _rollout_objective(n0: np.ndarray, u_seq: np.ndarray, t: int, cfg: MpcConfig) -> np.ndarray:
    """Completed intraregional trips (veh) over the horizon per candidate."""
    flows = cfg.demand_model.flows
    p = u_seq.shape[0]
    n = np.tile(n0, (p, 1))
    total = np.zeros(p)
    last = flows.shape[0] - 1
    for k in range(u_seq.shape[1]):
        q = flows[min(t + k, last)]
        n, info = step_arrays(
            n,
            u_seq[:, k, :],
            np.broadcast_to(q, (p, 4)),
            cfg.mfd_model,
            dt=cfg.dt,
            substeps=cfg.model_substeps,
        )
        total += info["completed"]
    return total


def mpc_solve(
    state: PlantState,
    t: int,
    cfg: MpcConfig,
    rng: np.random.Generator,
) -> tuple[ControlAction, dict]:
    """First action of the best control sequence over the receding horizon.

    Multi-start projected gradient ascent with forward-difference gradients;
    start points are all-high, all-low, midpoint, and one seeded random draw
    (ties resolved in that order, so a flat objective returns all-high).
    """
    horizon = max(1, min(cfg.horizon, cfg.demand_model.steps - t))
    dim = 2 * horizon
    n0 = state.as_array()

    starts = np.empty((cfg.restarts, horizon, 2))
    starts[0] = U_MAX
    if cfg.restarts > 1:
        starts[1] = U_MIN
    if cfg.restarts > 2:
        starts[2] = 0.5 * (U_MIN + U_MAX)
    for r in range(3, cfg.restarts):
        starts[r] = rng.uniform(U_MIN, U_MAX, size=(horizon, 2))

    theta = starts.reshape(cfg.restarts, dim)
    best_j = _rollout_objective(n0, theta.reshape(-1, horizon, 2), t, cfg)
    initial_j = best_j.copy()
    if not np.all(np.isfinite(best_j)):
        raise NumericError(
            f"non-finite MPC objective at t={t}, state={n0.tolist()}, J={best_j.tolist()}"
        )
    eta = np.full(cfg.restarts, cfg.step_size)
    eye = np.eye(dim)

    for _ in range(cfg.iterations):
        probes = theta[:, None, :] + cfg.fd_step * eye[None, :, :]
        j_probe = _rollout_objective(
            n0, probes.reshape(-1, horizon, 2), t, cfg
        ).reshape(cfg.restarts, dim)
        grad = (j_probe - best_j[:, None]) / cfg.fd_step
        proposal = np.clip(theta + eta[:, None] * grad, U_MIN, U_MAX)
        j_prop = _rollout_objective(n0, proposal.reshape(-1, horizon, 2), t, cfg)
        accept = j_prop > best_j
        theta = np.where(accept[:, None], proposal, theta)
        best_j = np.where(accept, j_prop, best_j)
        eta = np.where(
            accept,
            np.minimum(eta * cfg.step_grow, cfg.step_max),
            np.maximum(eta * cfg.step_shrink, cfg.step_min),
        )

    if not np.all(np.isfinite(best_j)):
        raise NumericError(
            f"non-finite MPC objective at t={t}, state={n0.tolist()}, J={best_j.tolist()}"
        )
    winner = int(np.argmax(best_j))  # first index wins ties
    u0 = theta[winner].reshape(horizon, 2)[0]
    diag = {
        "objectives": [float(v) for v in best_j],
        "initial_objectives": [float(v) for v in initial_j],
        "winner": winner,
    }
    return ControlAction(float(u0[0]), float(u0[1])), diag


class MpcController:
    """Receding-horizon controller driving mpc_solve at every step.

    The demand/MFD models are swapped in by the study loop as its averaged
    history evolves; the solver itself is stateless between calls.
    """

    bounded = True

    def __init__(self, cfg: MpcConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.episode_diagnostics: list = []

    def set_models(self, demand_model: DemandProfile, mfd_model: tuple) -> None:
        self.cfg = replace(self.cfg, demand_model=demand_model, mfd_model=mfd_model)

    def begin_episode(self, env) -> None:
        self.episode_diagnostics = []

    def act(self, k: int, state: PlantState, q) -> ControlAction:
        action, diag = mpc_solve(state, k, self.cfg, self.rng)
        self.episode_diagnostics.append(
            {"t": k, "objective": max(diag["objectives"]), "winner": diag["winner"]}
        )
        return action
