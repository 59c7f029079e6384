"""From-scratch deterministic actor-critic learner.

Small fully-connected networks with ReLU hidden layers and manual reverse
accumulation; no autograd framework. The actor squashes through tanh and is
mapped affinely into the gating bounds, the critic is linear in its output
layer. Training follows the usual pattern: bootstrapped targets from slowly
blended target networks, mean-squared critic loss, policy gradient through
the critic's action input, one update of each network per environment step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .antifragile import EpsilonShaper
from .errors import DomainError, InvariantError, NumericError
from .plant import U_MAX, U_MIN, ControlAction, StepOutcome, run_episode

ACTION_MID = 0.5 * (U_MIN + U_MAX)
ACTION_HALF = 0.5 * (U_MAX - U_MIN)


@dataclass
class Hyperparams:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    noise_scale: float = 0.1 * (U_MAX - U_MIN)
    noise_decay: float = 0.99
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise DomainError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise DomainError("tau must lie in (0, 1]")
        if min(self.actor_lr, self.critic_lr) <= 0.0:
            raise DomainError("learning rates must be positive")
        if min(self.batch_size, self.buffer_capacity, *self.hidden) <= 0:
            raise DomainError("sizes must be positive")


class Mlp:
    """Feed-forward net; weights held as a list of (W, b) pairs."""

    def __init__(self, sizes: Sequence[int], output: str = "identity",
                 rng: np.random.Generator | None = None, final_scale: float = 1.0):
        if output not in ("identity", "tanh"):
            raise DomainError(f"unknown output activation {output!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.weights: list[tuple[np.ndarray, np.ndarray]] = []
        rng = rng or np.random.default_rng()
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes, self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == len(self.sizes) - 2:
                w = w * final_scale
            self.weights.append((w, b))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray):
        """Returns (output, cache) for a (B, in_dim) batch."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise DomainError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        acts = [x]
        pre = []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            z = a @ w + b
            pre.append(z)
            if i < last:
                a = np.maximum(z, 0.0)
            elif self.output == "tanh":
                a = np.tanh(z)
            else:
                a = z
            acts.append(a)
        return (a[0] if squeeze else a), (acts, pre, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray):
        """Chain grad_out = dL/d(output) back; returns (param_grads, dL/dx)."""
        acts, pre, squeeze = cache
        g = np.asarray(grad_out, dtype=float)
        if squeeze:
            g = g[None, :]
        last = len(self.weights) - 1
        if self.output == "tanh":
            g = g * (1.0 - acts[-1] ** 2)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)  # type: ignore[list-item]
        for i in range(last, -1, -1):
            w, _ = self.weights[i]
            grads[i] = (acts[i].T @ g, g.sum(axis=0))
            g = g @ w.T
            if i > 0:
                g = g * (pre[i - 1] > 0.0)
        return grads, (g[0] if squeeze else g)

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = self.sizes
        clone.output = self.output
        clone.weights = [(w.copy(), b.copy()) for w, b in self.weights]
        return clone

    def save(self, path) -> None:
        arrays = {}
        for i, (w, b) in enumerate(self.weights):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        np.savez(path, sizes=np.array(self.sizes), output=np.array(self.output), **arrays)

    @classmethod
    def load(cls, path) -> "Mlp":
        data = np.load(path, allow_pickle=False)
        net = cls.__new__(cls)
        net.sizes = tuple(int(s) for s in data["sizes"])
        net.output = str(data["output"])
        net.weights = [
            (data[f"w{i}"], data[f"b{i}"]) for i in range(len(net.sizes) - 1)
        ]
        return net


class Adam:
    """Per-network Adam state; step() applies one update in place."""

    def __init__(self, net: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.weights]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.weights]

    def step(self, net: Mlp, grads, sign: float = -1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (w, b) in enumerate(net.weights):
            for j, (param, grad) in enumerate(((w, grads[i][0]), (b, grads[i][1]))):
                m = self.m[i][j]
                v = self.v[i][j]
                m *= self.beta1
                m += (1 - self.beta1) * grad
                v *= self.beta2
                v += (1 - self.beta2) * grad * grad
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                param += sign * self.lr * update


def sgd_step(net: Mlp, grads, lr: float, sign: float = -1.0) -> None:
    for i, (w, b) in enumerate(net.weights):
        w += sign * lr * grads[i][0]
        b += sign * lr * grads[i][1]


# -- spec operations ---------------------------------------------------------


def actor_forward(actor: Mlp, s: np.ndarray):
    """Map the bounded activation affinely into the gating interval."""
    out = actor(s)
    return ACTION_MID + ACTION_HALF * out


def critic_forward(critic: Mlp, s: np.ndarray, a: np.ndarray):
    x = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)], axis=-1)
    q = critic(x)
    return float(q[0]) if np.ndim(q) == 1 else q[..., 0]


def td_target(r, s_next, target_actor: Mlp, target_critic: Mlp, gamma: float, done) -> float:
    """Bootstrapped return r + gamma * Q'(s', mu'(s')); plain r on terminal."""
    if np.any(done) and np.ndim(r) == 0:
        return float(r)
    a_next = actor_forward(target_actor, s_next)
    q_next = critic_forward(target_critic, s_next, a_next)
    return r + gamma * np.where(np.asarray(done, bool), 0.0, 1.0) * q_next if np.ndim(r) else float(
        r + gamma * q_next
    )


def td_targets_batch(r: np.ndarray, s_next: np.ndarray, done: np.ndarray,
                     target_actor: Mlp, target_critic: Mlp, gamma: float) -> np.ndarray:
    a_next = actor_forward(target_actor, s_next)
    q_next = critic_forward(target_critic, s_next, a_next)
    return r + gamma * (1.0 - done.astype(float)) * q_next


def critic_gradients(critic: Mlp, s: np.ndarray, a: np.ndarray, targets: np.ndarray):
    """Gradients of the mean-squared TD loss; returns (loss, param grads)."""
    x = np.concatenate([s, a], axis=-1)
    q, cache = critic.forward(x)
    q = q[:, 0]
    err = q - targets
    loss = float(np.mean(err**2))
    grad_out = (2.0 * err / err.shape[0])[:, None]
    grads, _ = critic.backward(cache, grad_out)
    return loss, grads


def critic_update(critic: Mlp, batch, targets: np.ndarray, lr: float,
                  opt: Adam | None = None) -> float:
    """One descent step on the mean-squared TD error; returns pre-step loss."""
    s, a = batch[0], batch[1]
    loss, grads = critic_gradients(critic, s, a, np.asarray(targets, dtype=float))
    if not np.isfinite(loss):
        raise NumericError(f"critic loss became non-finite: {loss}")
    if opt is not None:
        opt.step(critic, grads, sign=-1.0)
    else:
        sgd_step(critic, grads, lr, sign=-1.0)
    return loss


def actor_gradients(actor: Mlp, critic: Mlp, s: np.ndarray):
    """Deterministic policy gradient of mean Q; returns (mean_q, param grads)."""
    out, actor_cache = actor.forward(s)
    a = ACTION_MID + ACTION_HALF * out
    x = np.concatenate([s, a], axis=-1)
    q, critic_cache = critic.forward(x)
    mean_q = float(np.mean(q[:, 0]))
    grad_q = np.full((s.shape[0], 1), 1.0 / s.shape[0])
    _, grad_x = critic.backward(critic_cache, grad_q)
    grad_a = grad_x[:, s.shape[1]:]
    grads, _ = actor.backward(actor_cache, grad_a * ACTION_HALF)
    return mean_q, grads


def actor_update(actor: Mlp, critic: Mlp, batch, lr: float,
                 opt: Adam | None = None) -> float:
    """One ascent step along the policy gradient; returns pre-step mean Q."""
    s = batch[0]
    mean_q, grads = actor_gradients(actor, critic, s)
    if not all(np.all(np.isfinite(g[0])) and np.all(np.isfinite(g[1])) for g in grads):
        raise NumericError("actor gradient became non-finite")
    if opt is not None:
        opt.step(actor, grads, sign=+1.0)
    else:
        sgd_step(actor, grads, lr, sign=+1.0)
    return mean_q


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """Blend online parameters into the target: theta' <- tau*theta + (1-tau)*theta'."""
    if target.sizes != online.sizes or target.output != online.output:
        raise InvariantError("target and online network architectures differ")
    for (tw, tb), (ow, ob) in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
        tb *= 1.0 - tau
        tb += tau * ob


# -- replay ------------------------------------------------------------------


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform random sampling."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise DomainError("capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, tr: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def items(self) -> list[Transition]:
        """Contents in insertion order (oldest first)."""
        return self._data[self._next:] + self._data[: self._next] if len(
            self._data
        ) == self.capacity else list(self._data)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self._data), size=batch_size)
        s = np.stack([self._data[i].s for i in idx])
        a = np.stack([self._data[i].a for i in idx])
        r = np.array([self._data[i].r for i in idx])
        s2 = np.stack([self._data[i].s_next for i in idx])
        d = np.array([self._data[i].done for i in idx])
        return s, a, r, s2, d


# -- the agent ---------------------------------------------------------------


class DdpgAgent:
    """Actor-critic controller; plugs into plant.run_episode as a controller.

    The encoder variant decides the observation (baseline: accumulations and
    demand; derivative-aware: accumulations with first/second differences),
    and an optional shaper adds the redundancy reward on top of the
    normalised completion reward.
    """

    bounded = True

    def __init__(self, encoder, hp: Hyperparams, seed: int,
                 shaper: EpsilonShaper | None = None):
        self.encoder = encoder
        self.hp = hp
        self.rng = np.random.default_rng(seed)
        self.shaper = shaper
        self.actor = Mlp([encoder.dim, *hp.hidden, 2], output="tanh",
                         rng=self.rng, final_scale=1e-3)
        self.critic = Mlp([encoder.dim + 2, *hp.hidden, 1], output="identity",
                          rng=self.rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.buffer = ReplayBuffer(hp.buffer_capacity)
        self._opt_actor = Adam(self.actor, hp.actor_lr)
        self._opt_critic = Adam(self.critic, hp.critic_lr)
        self.noise_scale = hp.noise_scale
        self.training = True
        self.episodes_trained = 0
        self._last_vec: np.ndarray | None = None

    def freeze(self) -> None:
        """Stop updates and exploration (testing phases)."""
        self.training = False

    def unfreeze(self) -> None:
        self.training = True

    def begin_episode(self, env) -> None:
        self.encoder.reset()
        if self.shaper is not None:
            self.shaper.reset()
        self._last_vec = None

    def act(self, k: int, state, q) -> ControlAction:
        vec = self.encoder.observe(state, q)
        self._last_vec = vec
        a = actor_forward(self.actor, vec)
        if self.training and self.noise_scale > 0.0:
            a = a + self.rng.normal(0.0, self.noise_scale, size=2)
        a = np.clip(a, U_MIN, U_MAX)
        return ControlAction(float(a[0]), float(a[1]))

    def shaped_reward(self, outcome: StepOutcome) -> tuple[float, float]:
        if self.shaper is None:
            return 0.0, 0.0
        return self.shaper.step(
            n_now=(outcome.next_state.n1, outcome.next_state.n2),
            n_prev=(outcome.state.n1, outcome.state.n2),
            m_now=(outcome.m_next[0] + outcome.m_next[1],
                   outcome.m_next[2] + outcome.m_next[3]),
            m_prev=(outcome.m_now[0] + outcome.m_now[1],
                    outcome.m_now[2] + outcome.m_now[3]),
        )

    def post_step(self, outcome: StepOutcome) -> None:
        vec_next = self.encoder.peek(outcome.next_state, outcome.q_next)
        self.buffer.push(
            Transition(self._last_vec, np.array(outcome.action), outcome.reward,
                       vec_next, outcome.done)
        )
        if self.training and len(self.buffer) >= self.hp.batch_size:
            self._train_once()
        if outcome.done and self.training:
            self.noise_scale *= self.hp.noise_decay
            self.episodes_trained += 1

    def _train_once(self) -> None:
        s, a, r, s2, d = self.buffer.sample(self.hp.batch_size, self.rng)
        targets = td_targets_batch(r, s2, d, self.target_actor,
                                   self.target_critic, self.hp.gamma)
        critic_update(self.critic, (s, a), targets, self.hp.critic_lr,
                      opt=self._opt_critic)
        actor_update(self.actor, self.critic, (s,), self.hp.actor_lr,
                     opt=self._opt_actor)
        soft_update(self.target_critic, self.critic, self.hp.tau)
        soft_update(self.target_actor, self.actor, self.hp.tau)

    def save_weights(self, path_prefix: str) -> None:
        self.actor.save(f"{path_prefix}_actor.npz")
        self.critic.save(f"{path_prefix}_critic.npz")


def train_episode(agent: DdpgAgent, env, meta: dict | None = None):
    """Roll one episode with the agent learning online (unless frozen)."""
    return run_episode(agent, env, meta)
