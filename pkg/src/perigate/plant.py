"""Discrete-time two-region gated accumulation dynamics and episode rollout.

Each 60 s control step is integrated with K forward-Euler substeps. Within a
substep, outflows are limited so no accumulation goes negative, and inflows
(demand plus admitted transfer) are proportionally rejected so neither region
exceeds its jam accumulation; rejected transfer stays in the origin region,
rejected demand never enters. All core arithmetic broadcasts over leading
array dimensions, which lets the MPC solver roll out many candidate control
sequences in one pass through the very same dynamics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError
from .mfd import MfdSpec

logger = logging.getLogger(__name__)

U_MIN = 0.1
U_MAX = 0.9
DT_DEFAULT = 60.0
SUBSTEPS_DEFAULT = 10

_TINY = 1e-300


@dataclass(frozen=True)
class PlantState:
    """OD accumulations in vehicles: n11, n12 live in region 1; n21, n22 in 2."""

    n11: float
    n12: float
    n21: float
    n22: float

    @property
    def n1(self) -> float:
        return self.n11 + self.n12

    @property
    def n2(self) -> float:
        return self.n21 + self.n22

    @property
    def total(self) -> float:
        return self.n1 + self.n2

    def as_array(self) -> np.ndarray:
        return np.array([self.n11, self.n12, self.n21, self.n22])

    @classmethod
    def from_array(cls, arr) -> "PlantState":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


class ControlAction(tuple):
    """Gating ratios (u12, u21) for the two perimeter directions."""

    __slots__ = ()

    def __new__(cls, u12: float, u21: float):
        return super().__new__(cls, (float(u12), float(u21)))

    @property
    def u12(self) -> float:
        return self[0]

    @property
    def u21(self) -> float:
        return self[1]


def completions_arrays(n: np.ndarray, mfds: Sequence[MfdSpec]) -> np.ndarray:
    """Per-OD completion flows M_ij = (n_ij / n_i) * G_i(n_i), veh/s.

    Empty regions produce zero flow. Accepts (..., 4) accumulations.
    """
    n = np.asarray(n, dtype=float)
    n1 = n[..., 0] + n[..., 1]
    n2 = n[..., 2] + n[..., 3]
    g1 = np.asarray(mfds[0].flow(n1))
    g2 = np.asarray(mfds[1].flow(n2))
    d1 = np.where(n1 > 0.0, n1, 1.0)
    d2 = np.where(n2 > 0.0, n2, 1.0)
    m = np.empty_like(n)
    m[..., 0] = np.where(n1 > 0.0, n[..., 0] / d1 * g1, 0.0)
    m[..., 1] = np.where(n1 > 0.0, n[..., 1] / d1 * g1, 0.0)
    m[..., 2] = np.where(n2 > 0.0, n[..., 2] / d2 * g2, 0.0)
    m[..., 3] = np.where(n2 > 0.0, n[..., 3] / d2 * g2, 0.0)
    return m


def completions(state: PlantState, mfds: Sequence[MfdSpec]) -> tuple[float, float, float, float]:
    """Scalar convenience wrapper around completions_arrays."""
    m = completions_arrays(state.as_array(), mfds)
    return float(m[0]), float(m[1]), float(m[2]), float(m[3])


def step_arrays(
    n: np.ndarray,
    u: np.ndarray,
    q: np.ndarray,
    mfds: Sequence[MfdSpec],
    dt: float = DT_DEFAULT,
    substeps: int = SUBSTEPS_DEFAULT,
) -> tuple[np.ndarray, dict]:
    """Advance accumulations (..., 4) one control step under gating (..., 2).

    Returns the next accumulations plus a dict with the completed intraregional
    trips over the step (veh), the demand mass rejected at the caps (veh), and
    the completion flows at the step start.
    """
    n = np.array(n, dtype=float)
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(n)) and np.all(np.isfinite(u)) and np.all(np.isfinite(q))):
        raise NumericError("non-finite accumulation, action or demand")

    cap1, cap2 = mfds[0].n_cap, mfds[1].n_cap
    sub_dt = dt / substeps
    u12 = u[..., 0]
    u21 = u[..., 1]
    in1 = q[..., 0] + q[..., 1]
    in2 = q[..., 2] + q[..., 3]

    completed = np.zeros(np.broadcast(n[..., 0], u12).shape)
    rejected = np.zeros_like(completed)
    m_start = None

    for k in range(substeps):
        m = completions_arrays(n, mfds)
        if k == 0:
            m_start = m.copy()
        # outflow attempts per component; limited so nothing undershoots zero
        out = np.stack(
            [m[..., 0], u12 * m[..., 1], u21 * m[..., 2], m[..., 3]], axis=-1
        )

        # fast path: plain Euler when no floor or cap constraint can bind
        plain = np.empty_like(n)
        plain[..., 0] = n[..., 0] + sub_dt * (q[..., 0] + out[..., 2] - out[..., 0])
        plain[..., 1] = n[..., 1] + sub_dt * (q[..., 1] - out[..., 1])
        plain[..., 2] = n[..., 2] + sub_dt * (q[..., 2] - out[..., 2])
        plain[..., 3] = n[..., 3] + sub_dt * (q[..., 3] + out[..., 1] - out[..., 3])
        if (
            np.all(plain >= 0.0)
            and np.all(plain[..., 0] + plain[..., 1] <= cap1)
            and np.all(plain[..., 2] + plain[..., 3] <= cap2)
        ):
            completed = completed + sub_dt * (out[..., 0] + out[..., 3])
            n = plain
            continue
        beta = np.minimum(1.0, n / np.maximum(sub_dt * out, _TINY))
        beta = np.where(out > 0.0, beta, 1.0)
        f11 = beta[..., 0] * out[..., 0]
        f12 = beta[..., 1] * out[..., 1]
        f21 = beta[..., 2] * out[..., 2]
        f22 = beta[..., 3] * out[..., 3]

        # coupled inflow admission: rejected transfer stays in the origin
        # region, so the two factors are solved by a short monotone iteration
        n1 = n[..., 0] + n[..., 1]
        n2 = n[..., 2] + n[..., 3]
        s1 = np.ones_like(n1)
        s2 = np.ones_like(n1)
        for _ in range(6):
            room1 = cap1 - n1 + sub_dt * (f11 + s2 * f12)
            tot1 = sub_dt * (in1 + f21)
            s1 = np.clip(room1 / np.maximum(tot1, _TINY), 0.0, 1.0)
            s1 = np.where(tot1 > 0.0, s1, 1.0)
            room2 = cap2 - n2 + sub_dt * (f22 + s1 * f21)
            tot2 = sub_dt * (in2 + f12)
            s2 = np.clip(room2 / np.maximum(tot2, _TINY), 0.0, 1.0)
            s2 = np.where(tot2 > 0.0, s2, 1.0)

        nxt = np.empty_like(n)
        nxt[..., 0] = n[..., 0] + sub_dt * (s1 * q[..., 0] + s1 * f21 - f11)
        nxt[..., 1] = n[..., 1] + sub_dt * (s1 * q[..., 1] - s2 * f12)
        nxt[..., 2] = n[..., 2] + sub_dt * (s2 * q[..., 2] - s1 * f21)
        nxt[..., 3] = n[..., 3] + sub_dt * (s2 * q[..., 3] + s2 * f12 - f22)
        np.maximum(nxt, 0.0, out=nxt)

        # last-resort guard: the admission iteration leaves at most a
        # float-level residual, scale the region back onto its cap
        t1 = nxt[..., 0] + nxt[..., 1]
        t2 = nxt[..., 2] + nxt[..., 3]
        g1 = np.where(t1 > cap1, cap1 / np.maximum(t1, _TINY), 1.0)
        g2 = np.where(t2 > cap2, cap2 / np.maximum(t2, _TINY), 1.0)
        nxt[..., 0] *= g1
        nxt[..., 1] *= g1
        nxt[..., 2] *= g2
        nxt[..., 3] *= g2

        completed = completed + sub_dt * (f11 + f22)
        rejected = rejected + sub_dt * ((1.0 - s1) * in1 + (1.0 - s2) * in2)
        n = nxt

    return n, {"completed": completed, "rejected_demand": rejected, "m_start": m_start}


def step(
    state: PlantState,
    action: ControlAction | tuple[float, float],
    q_t,
    mfds: Sequence[MfdSpec],
    dt: float = DT_DEFAULT,
    substeps: int = SUBSTEPS_DEFAULT,
) -> tuple[PlantState, dict]:
    """Scalar one-step wrapper; see step_arrays."""
    n_next, info = step_arrays(
        state.as_array(),
        np.asarray(action, dtype=float),
        np.asarray(q_t, dtype=float),
        mfds,
        dt=dt,
        substeps=substeps,
    )
    info = {
        "completed": float(info["completed"]),
        "rejected_demand": float(info["rejected_demand"]),
        "m_start": tuple(float(v) for v in info["m_start"]),
    }
    return PlantState.from_array(n_next), info


# -- episode rollout ---------------------------------------------------------

INITIAL_ACCUMULATION = (600.0, 1300.0, 300.0, 2400.0)


@dataclass(frozen=True)
class EpisodeEnv:
    """Everything one episode needs: demand, MFDs and integration settings.

    ``mfds`` are the (possibly disrupted) flow laws driving the dynamics;
    ``base_mfds`` stay fixed at the undisrupted defaults and are what the
    controllers are allowed to know about.
    """

    demand: np.ndarray  # (steps, 4) veh/s
    mfds: tuple[MfdSpec, MfdSpec]
    base_mfds: tuple[MfdSpec, MfdSpec]
    reward_scale: float  # veh per step that maps completion rewards to O(1)
    n0: tuple[float, float, float, float] = INITIAL_ACCUMULATION
    dt: float = DT_DEFAULT
    substeps: int = SUBSTEPS_DEFAULT

    @property
    def steps(self) -> int:
        return self.demand.shape[0]


@dataclass
class StepRecord:
    t: float
    n: tuple[float, float, float, float]
    u: tuple[float, float]
    m: tuple[float, float, float, float]  # flows at the step start, veh/s
    reward_completion: float
    reward_h: float
    reward_dh: float

    @property
    def total_accumulation(self) -> float:
        return sum(self.n)

    @property
    def reward(self) -> float:
        return self.reward_completion + self.reward_h + self.reward_dh


@dataclass
class EpisodeTrace:
    """Per-step log of one episode; the unit of persistence and metrics."""

    meta: dict
    records: list[StepRecord] = field(default_factory=list)
    final_n: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    @property
    def steps(self) -> int:
        return len(self.records)

    def total_reward(self) -> float:
        return sum(r.reward for r in self.records)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "meta", **self.meta, "final_n": list(self.final_n)}) + "\n")
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "t": r.t,
                            "n": list(r.n),
                            "u": list(r.u),
                            "m": list(r.m),
                            "r_c": r.reward_completion,
                            "r_h": r.reward_h,
                            "r_dh": r.reward_dh,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "EpisodeTrace":
        with open(path) as fh:
            meta = json.loads(fh.readline())
            meta.pop("kind", None)
            final_n = tuple(meta.pop("final_n", (0.0, 0.0, 0.0, 0.0)))
            records = []
            for line in fh:
                d = json.loads(line)
                records.append(
                    StepRecord(
                        t=d["t"],
                        n=tuple(d["n"]),
                        u=tuple(d["u"]),
                        m=tuple(d["m"]),
                        reward_completion=d["r_c"],
                        reward_h=d["r_h"],
                        reward_dh=d["r_dh"],
                    )
                )
        return cls(meta=meta, records=records, final_n=final_n)


def trace_filename(scenario: str, method: str, rep: int, episode: int) -> str:
    return f"{scenario}_{method}_{rep}_{episode}.jsonl"


@dataclass
class StepOutcome:
    """Bundle handed to controllers after each environment step."""

    step: int
    state: PlantState
    next_state: PlantState
    action: ControlAction
    q_now: np.ndarray
    q_next: np.ndarray
    m_now: tuple[float, float, float, float]
    m_next: tuple[float, float, float, float]
    reward: float
    done: bool


def run_episode(controller, env: EpisodeEnv, meta: dict | None = None) -> EpisodeTrace:
    """Roll one full episode; deterministic given the controller's state.

    The controller must provide ``act(step, state, demand_now)``; optional
    hooks ``begin_episode(env)``, ``shaped_reward(outcome)`` and
    ``post_step(outcome)`` default to no-ops. Out-of-bound actions from
    bounded controllers are clamped with a warning.
    """
    trace = EpisodeTrace(meta=dict(meta or {}))
    state = PlantState(*env.n0)
    begin = getattr(controller, "begin_episode", None)
    if begin is not None:
        begin(env)
    bounded = getattr(controller, "bounded", True)
    shaping = getattr(controller, "shaped_reward", None)
    post = getattr(controller, "post_step", None)

    m_now = completions(state, env.mfds)
    for k in range(env.steps):
        q_now = env.demand[k]
        u12, u21 = controller.act(k, state, q_now)
        if bounded and not (U_MIN <= u12 <= U_MAX and U_MIN <= u21 <= U_MAX):
            logger.warning(
                "step %d: action (%.3f, %.3f) outside [%.1f, %.1f], clamped",
                k, u12, u21, U_MIN, U_MAX,
            )
            u12 = min(max(u12, U_MIN), U_MAX)
            u21 = min(max(u21, U_MIN), U_MAX)
        action = ControlAction(u12, u21)

        next_state, info = step(
            state, action, q_now, env.mfds, dt=env.dt, substeps=env.substeps
        )
        m_next = completions(next_state, env.mfds)
        q_next = env.demand[k + 1] if k + 1 < env.steps else env.demand[k]

        outcome = StepOutcome(
            step=k,
            state=state,
            next_state=next_state,
            action=action,
            q_now=q_now,
            q_next=q_next,
            m_now=m_now,
            m_next=m_next,
            reward=0.0,
            done=k == env.steps - 1,
        )
        r_completion = info["completed"] / env.reward_scale
        r_h, r_dh = shaping(outcome) if shaping is not None else (0.0, 0.0)
        outcome.reward = r_completion + r_h + r_dh

        trace.records.append(
            StepRecord(
                t=k * env.dt,
                n=(state.n11, state.n12, state.n21, state.n22),
                u=(action.u12, action.u21),
                m=m_now,
                reward_completion=r_completion,
                reward_h=r_h,
                reward_dh=r_dh,
            )
        )
        if post is not None:
            post(outcome)
        state = next_state
        m_now = m_next

    trace.final_n = (state.n11, state.n12, state.n21, state.n22)
    return trace
