import numpy as np
import pytest

from perigate.antifragile import BaselineEncoder
from perigate.demand import base_profile
from perigate.ddpg import (
    ACTION_HALF,
    ACTION_MID,
    Adam,
    DdpgAgent,
    Hyperparams,
    Mlp,
    ReplayBuffer,
    Transition,
    actor_forward,
    actor_gradients,
    actor_update,
    critic_forward,
    critic_gradients,
    critic_update,
    soft_update,
    td_target,
    train_episode,
)
from perigate.errors import DomainError, InvariantError
from perigate.mfd import default_inner_mfd, default_outer_mfd
from perigate.plant import U_MAX, U_MIN, EpisodeEnv


def snapshot(net):
    return [(w.copy(), b.copy()) for w, b in net.weights]


def nets_equal(a, b):
    return all(
        np.array_equal(wa, wb) and np.array_equal(ba, bb)
        for (wa, ba), (wb, bb) in zip(a, b)
    )


def relu_margin(net, xs) -> float:
    """Smallest |preactivation| of any hidden unit over the inputs."""
    margins = []
    for x in np.atleast_2d(xs):
        _, (acts, pre, _) = net.forward(x)
        for z in pre[:-1]:
            margins.append(np.min(np.abs(z)))
    return min(margins) if margins else np.inf


def fd_param_grads(loss_fn, net, h=1e-5):
    """Central finite differences of loss_fn w.r.t. every net parameter."""
    grads = []
    for w, b in net.weights:
        pair = []
        for arr in (w, b):
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                up = loss_fn()
                arr[idx] = old - h
                dn = loss_fn()
                arr[idx] = old
                g[idx] = (up - dn) / (2.0 * h)
            pair.append(g)
        grads.append(tuple(pair))
    return grads


def max_rel_err(analytic, fd) -> float:
    worst = 0.0
    for (aw, ab), (fw, fb) in zip(analytic, fd):
        for a, f in ((aw, fw), (ab, fb)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


class TestActorForward:
    def test_outputs_inside_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            actor = Mlp([6, 8, 2], output="tanh", rng=rng)
            s = rng.normal(size=6)
            a = actor_forward(actor, s)
            assert np.all(a >= U_MIN) and np.all(a <= U_MAX)

    def test_zero_weights_give_midpoint(self):
        actor = Mlp([4, 5, 2], output="tanh", rng=np.random.default_rng(0))
        for i, (w, b) in enumerate(actor.weights):
            actor.weights[i] = (np.zeros_like(w), np.zeros_like(b))
        a = actor_forward(actor, np.ones(4))
        assert np.allclose(a, 0.5)
        assert ACTION_MID == 0.5 and ACTION_HALF == pytest.approx(0.4)

    def test_reproducible_given_seed(self):
        a1 = Mlp([4, 5, 2], output="tanh", rng=np.random.default_rng(11))
        a2 = Mlp([4, 5, 2], output="tanh", rng=np.random.default_rng(11))
        s = np.linspace(-1, 1, 4)
        assert np.allclose(actor_forward(a1, s), actor_forward(a2, s))

    def test_dimension_mismatch_rejected(self):
        actor = Mlp([4, 5, 2], output="tanh", rng=np.random.default_rng(0))
        with pytest.raises(DomainError):
            actor_forward(actor, np.ones(3))


class TestCriticForward:
    def test_zero_weights_give_zero(self):
        critic = Mlp([5, 4, 1], rng=np.random.default_rng(0))
        for i, (w, b) in enumerate(critic.weights):
            critic.weights[i] = (np.zeros_like(w), np.zeros_like(b))
        assert critic_forward(critic, np.ones(3), np.ones(2)) == 0.0

    def test_output_layer_linearity(self):
        critic = Mlp([5, 4, 1], rng=np.random.default_rng(3))
        s, a = np.ones(3), np.full(2, 0.5)
        q1 = critic_forward(critic, s, a)
        w, b = critic.weights[-1]
        critic.weights[-1] = (2.0 * w, 2.0 * b)
        assert critic_forward(critic, s, a) == pytest.approx(2.0 * q1)

    def test_action_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 20:
            critic = Mlp([5, 6, 1], rng=rng)
            s = rng.normal(size=3)
            a = rng.uniform(0.1, 0.9, size=2)
            x = np.concatenate([s, a])
            if relu_margin(critic, x) < 1e-3:
                continue  # finite differences invalid next to a ReLU kink
            _, cache = critic.forward(x)
            _, grad_x = critic.backward(cache, np.ones(1))
            analytic = grad_x[3:]
            h = 1e-5
            fd = np.zeros(2)
            for j in range(2):
                ap = a.copy()
                ap[j] += h
                am = a.copy()
                am[j] -= h
                fd[j] = (critic_forward(critic, s, ap) - critic_forward(critic, s, am)) / (2 * h)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
            assert np.max(np.abs(analytic - fd) / denom) <= 1e-4
            checked += 1


class TestTdTarget:
    def test_arithmetic(self):
        # build a frozen critic that returns exactly 2.0 regardless of input
        actor = Mlp([3, 2, 2], output="tanh", rng=np.random.default_rng(0))
        critic = Mlp([5, 2, 1], rng=np.random.default_rng(0))
        for i, (w, b) in enumerate(critic.weights):
            critic.weights[i] = (np.zeros_like(w), np.zeros_like(b))
        critic.weights[-1] = (critic.weights[-1][0], np.array([2.0]))
        assert td_target(1.0, np.zeros(3), actor, critic, 0.99, False) == pytest.approx(2.98)
        assert td_target(5.0, np.zeros(3), actor, critic, 0.99, True) == 5.0
        assert td_target(1.5, np.zeros(3), actor, critic, 0.0, False) == pytest.approx(1.5)


class TestCriticUpdate:
    def test_zero_loss_leaves_parameters_unchanged(self):
        rng = np.random.default_rng(4)
        critic = Mlp([4, 5, 1], rng=rng)
        s = rng.normal(size=(8, 2))
        a = rng.uniform(0.1, 0.9, size=(8, 2))
        targets = critic_forward(critic, s, a)
        before = snapshot(critic)
        loss = critic_update(critic, (s, a), targets, lr=1e-2)
        assert loss == pytest.approx(0.0, abs=1e-24)
        assert nets_equal(before, snapshot(critic))

    def test_loss_decreases_over_repeated_steps(self):
        rng = np.random.default_rng(5)
        critic = Mlp([4, 6, 1], rng=rng)
        s = rng.normal(size=(1, 2))
        a = rng.uniform(0.1, 0.9, size=(1, 2))
        targets = np.array([1.0])
        losses = [critic_update(critic, (s, a), targets, lr=1e-3) for _ in range(10)]
        assert losses[-1] < losses[0]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        checked = 0
        while checked < 15:
            critic = Mlp([4, 4, 1], rng=rng)  # 2-state 2-action toy critic
            s = rng.normal(size=(3, 2))
            a = rng.uniform(0.1, 0.9, size=(3, 2))
            x = np.concatenate([s, a], axis=-1)
            if relu_margin(critic, x) < 1e-3:
                continue
            targets = rng.normal(size=3)
            _, analytic = critic_gradients(critic, s, a, targets)
            fd = fd_param_grads(
                lambda: critic_gradients(critic, s, a, targets)[0], critic
            )
            assert max_rel_err(analytic, fd) <= 1e-4
            checked += 1


class TestActorUpdate:
    def test_action_blind_critic_freezes_actor(self):
        rng = np.random.default_rng(7)
        actor = Mlp([3, 4, 2], output="tanh", rng=rng)
        critic = Mlp([5, 4, 1], rng=rng)
        w0, b0 = critic.weights[0]
        w0 = w0.copy()
        w0[3:, :] = 0.0  # zero the action-input rows
        critic.weights[0] = (w0, b0)
        s = rng.normal(size=(6, 3))
        before = snapshot(actor)
        actor_update(actor, critic, (s,), lr=1e-2)
        assert nets_equal(before, snapshot(actor))

    def test_mean_q_nondecreasing_under_ascent(self):
        rng = np.random.default_rng(9)
        actor = Mlp([3, 5, 2], output="tanh", rng=rng)
        critic = Mlp([5, 5, 1], rng=rng)
        s = rng.normal(size=(16, 3))
        qs = [actor_update(actor, critic, (s,), lr=1e-4) for _ in range(10)]
        assert all(b >= a - 1e-10 for a, b in zip(qs, qs[1:]))

    def test_policy_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        checked = 0
        while checked < 15:
            actor = Mlp([2, 3, 2], output="tanh", rng=rng)
            critic = Mlp([4, 3, 1], rng=rng)
            s = rng.normal(size=(3, 2))

            def objective():
                a = actor_forward(actor, s)
                return float(np.mean(critic_forward(critic, s, a)))

            a = actor_forward(actor, s)
            x = np.concatenate([s, a], axis=-1)
            if relu_margin(critic, x) < 1e-3 or relu_margin(actor, s) < 1e-3:
                continue
            _, analytic = actor_gradients(actor, critic, s)
            fd = fd_param_grads(objective, actor)
            assert max_rel_err(analytic, fd) <= 1e-4
            checked += 1


class TestSoftUpdate:
    def test_limit_cases_and_blend(self):
        rng = np.random.default_rng(12)
        online = Mlp([3, 4, 2], output="tanh", rng=rng)
        target = Mlp([3, 4, 2], output="tanh", rng=rng)
        soft_update(target, online, tau=1.0)
        assert nets_equal(snapshot(target), snapshot(online))

        before = snapshot(target)
        soft_update(target, online, tau=0.0)
        assert nets_equal(before, snapshot(target))

        for i, (w, b) in enumerate(target.weights):
            target.weights[i] = (np.zeros_like(w), np.zeros_like(b))
        for i, (w, b) in enumerate(online.weights):
            online.weights[i] = (np.full_like(w, 2.0), np.full_like(b, 2.0))
        soft_update(target, online, tau=0.5)
        for w, b in target.weights:
            assert np.allclose(w, 1.0) and np.allclose(b, 1.0)

    def test_architecture_mismatch_rejected(self):
        a = Mlp([3, 4, 2], output="tanh", rng=np.random.default_rng(0))
        b = Mlp([3, 5, 2], output="tanh", rng=np.random.default_rng(0))
        with pytest.raises(InvariantError):
            soft_update(a, b, 0.5)


class TestReplayBuffer:
    def make(self, i):
        return Transition(np.array([float(i)]), np.array([0.5, 0.5]), float(i),
                          np.array([float(i + 1)]), False)

    def test_fifo_eviction(self):
        buf = ReplayBuffer(3)
        for i in range(5):
            buf.push(self.make(i))
        assert len(buf) == 3
        held = [int(tr.s[0]) for tr in buf.items()]
        assert held == [2, 3, 4]

    def test_seeded_sampling_reproducible(self):
        buf = ReplayBuffer(10)
        for i in range(10):
            buf.push(self.make(i))
        s1, *_ = buf.sample(4, np.random.default_rng(99))
        s2, *_ = buf.sample(4, np.random.default_rng(99))
        assert np.array_equal(s1, s2)

    def test_invalid_capacity(self):
        with pytest.raises(DomainError):
            ReplayBuffer(0)


class TestHyperparams:
    def test_validation(self):
        with pytest.raises(DomainError):
            Hyperparams(gamma=1.0)
        with pytest.raises(DomainError):
            Hyperparams(tau=0.0)
        with pytest.raises(DomainError):
            Hyperparams(actor_lr=-1.0)
        Hyperparams()  # defaults valid


class TestMlpPersistence:
    def test_save_load_round_trip(self, tmp_path):
        net = Mlp([5, 7, 2], output="tanh", rng=np.random.default_rng(21))
        path = tmp_path / "net.npz"
        net.save(path)
        back = Mlp.load(path)
        assert back.sizes == net.sizes and back.output == net.output
        x = np.linspace(-1, 1, 5)
        assert np.allclose(back(x), net(x))


class TestAgent:
    @pytest.fixture
    def env(self):
        mfds = (default_inner_mfd(), default_outer_mfd())
        profile = base_profile()
        scale = (mfds[0].max_flow + mfds[1].max_flow) * 60.0
        return EpisodeEnv(demand=profile.flows, mfds=mfds, base_mfds=mfds,
                          reward_scale=scale)

    def make_agent(self, env, seed=0, **hp_kwargs):
        q_max = float(env.demand.max())
        enc = BaselineEncoder(env.base_mfds, q_max)
        return DdpgAgent(enc, Hyperparams(**hp_kwargs), seed=seed)

    def test_no_updates_before_warmup(self, env):
        agent = self.make_agent(env, batch_size=500)  # never reached in 120 steps
        before_actor = snapshot(agent.actor)
        before_critic = snapshot(agent.critic)
        train_episode(agent, env)
        assert nets_equal(before_actor, snapshot(agent.actor))
        assert nets_equal(before_critic, snapshot(agent.critic))
        assert len(agent.buffer) == 120

    def test_same_seed_same_trace(self, env):
        t1 = train_episode(self.make_agent(env, seed=123), env)
        t2 = train_episode(self.make_agent(env, seed=123), env)
        assert [r.u for r in t1.records] == [r.u for r in t2.records]
        assert [r.n for r in t1.records] == [r.n for r in t2.records]

    def test_frozen_agent_is_greedy_and_static(self, env):
        agent = self.make_agent(env, seed=5)
        train_episode(agent, env)
        agent.freeze()
        before = snapshot(agent.actor)
        t1 = train_episode(agent, env)
        t2 = train_episode(agent, env)
        assert nets_equal(before, snapshot(agent.actor))
        assert [r.u for r in t1.records] == [r.u for r in t2.records]

    def test_actions_always_within_bounds(self, env):
        agent = self.make_agent(env, seed=17)
        trace = train_episode(agent, env)
        for r in trace.records:
            assert U_MIN <= r.u[0] <= U_MAX
            assert U_MIN <= r.u[1] <= U_MAX

    def test_noise_decays_per_episode(self, env):
        agent = self.make_agent(env, seed=3)
        s0 = agent.noise_scale
        train_episode(agent, env)
        assert agent.noise_scale == pytest.approx(s0 * 0.99)
        assert agent.episodes_trained == 1
