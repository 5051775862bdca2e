import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaybelief.delay import (
    AugmentedState, DelaySpec, detokenize, initial_augmentation, tokenize,
    trajectory_windows, window_extract, wrap,
)
from delaybelief.envs import MassSpringDamper, Pendulum, RandomPolicy, rollout


def _run(env, spec, n_steps, seed=0):
    """Drive a delayed env with random actions, collecting augmented states."""
    handle = wrap(env, spec)
    aug = handle.reset(seed)
    policy = RandomPolicy(handle.spec, seed)
    out = [aug]
    for _ in range(n_steps):
        aug, _, done = handle.step(policy(aug.anchor_state))
        out.append(aug)
        if done:
            break
    return handle, out


def test_spec_validation():
    with pytest.raises(ValueError):
        DelaySpec("constant", 0)
    with pytest.raises(ValueError):
        DelaySpec("gamma", 3)


def test_constant_delay_one_observes_previous_state():
    handle, augs = _run(Pendulum(), DelaySpec("constant", 1), 30)
    for t, aug in enumerate(augs[1:], start=1):
        assert np.array_equal(aug.anchor_state, handle.true_states[t - 1])
        assert aug.effective_delay == 1


def test_constant_delay_eight_anchor_is_privileged_state():
    handle, augs = _run(Pendulum(horizon=500), DelaySpec("constant", 8), 400)
    for t, aug in enumerate(augs):
        assert aug.time_index == t
        if t >= 8:
            assert aug.anchor_state.tobytes() == handle.true_states[t - 8].tobytes()
            np.testing.assert_array_equal(aug.action_queue, np.array(handle.actions[t - 8:t]))
        else:
            assert np.array_equal(aug.anchor_state, handle.true_states[0])


def test_queue_conservation_fifo():
    d = 5
    handle, augs = _run(MassSpringDamper(), DelaySpec("constant", d), 60)
    for i, a in enumerate(handle.actions):
        hits = [t for t, aug in enumerate(augs)
                if any(np.array_equal(a, q) for q in aug.action_queue)]
        assert hits == list(range(i + 1, i + 1 + d))[:len(hits)]
        if i + d < len(augs):
            assert len(hits) == d


def test_uniform_delay_monotone_and_bounded():
    handle, augs = _run(Pendulum(horizon=10_000), DelaySpec("uniform", 8), 10_000, seed=3)
    ptr = np.array(handle.pointer_history)
    assert np.all(np.diff(ptr) >= 0)
    eff = np.array([a.effective_delay for a in augs[1:]])
    assert eff.min() >= 1 and eff.max() <= 8
    assert set(np.unique(eff)) == set(range(1, 9))
    for t, aug in enumerate(augs[1:], start=1):
        p = t - aug.effective_delay
        assert np.array_equal(aug.anchor_state, handle.state_at(p))


def test_uniform_with_max_one_equals_constant_one():
    h1, a1 = _run(Pendulum(), DelaySpec("uniform", 1), 50)
    h2, a2 = _run(Pendulum(), DelaySpec("constant", 1), 50)
    for x, y in zip(a1, a2):
        assert np.array_equal(x.anchor_state, y.anchor_state)
        assert np.array_equal(x.action_queue, y.action_queue)


def test_delta_one_rewards_are_shifted_delay_free_rewards():
    env = Pendulum(horizon=40)
    handle = wrap(env, DelaySpec("constant", 1))
    handle.reset(7)
    u = np.array([0.7])
    delayed = []
    done = False
    while not done:
        _, r, done = handle.step(u)
        delayed.append(r)
    free = rollout(env, lambda s: u, 40, seed=7).rewards
    assert delayed[0] == 0.0
    np.testing.assert_array_equal(delayed[1:], free[:-1])


def test_step_after_done_raises():
    handle = wrap(Pendulum(horizon=2), DelaySpec("constant", 2))
    handle.reset(0)
    handle.step([0.0])
    _, _, done = handle.step([0.0])
    assert done and handle.truncated
    with pytest.raises(RuntimeError):
        handle.step([0.0])


def test_initial_augmentation_padding():
    s0 = np.array([0.1, 0.2])
    aug = initial_augmentation(s0, DelaySpec("constant", 1), 1)
    assert aug.action_queue.shape == (1, 1) and aug.reward_queue.tolist() == [0.0]
    aug = initial_augmentation(s0, DelaySpec("constant", 4), 1)
    ts = tokenize(aug, 4)
    assert np.all(aug.action_queue == 0) and ts.mask.tolist() == [1, 1, 1, 1]
    assert np.all(ts.tokens[:, :2] == s0)


def test_tokenize_layout_and_mask():
    s = np.array([1.0, 2.0])
    aug = AugmentedState(s, np.array([[0.1], [0.2], [0.3]]), np.array([-1.0, -2.0, -3.0]), 3)
    ts = tokenize(aug, 3)
    assert ts.tokens.shape == (3, 4)
    for i in range(3):
        np.testing.assert_array_equal(ts.tokens[i], [1.0, 2.0, aug.action_queue[i, 0],
                                                     aug.reward_queue[i]])
    aug2 = AugmentedState(s, np.array([[0.1], [0.2]]), np.array([-1.0, -2.0]), 2)
    ts2 = tokenize(aug2, 4)
    assert ts2.mask.tolist() == [1, 1, 0, 0]
    assert np.all(ts2.tokens[2:] == 0)
    with pytest.raises(ValueError):
        tokenize(aug, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 5), st.integers(1, 3), st.integers(0, 10_000))
def test_tokenize_detokenize_identity(eff, extra, da, seed):
    rng = np.random.default_rng(seed)
    aug = AugmentedState(rng.normal(size=3), rng.normal(size=(eff, da)), rng.normal(size=eff), eff)
    back = detokenize(tokenize(aug, eff + extra), 3)
    assert np.array_equal(back.anchor_state, aug.anchor_state)
    assert np.array_equal(back.action_queue, aug.action_queue)
    assert np.array_equal(back.reward_queue, aug.reward_queue)
    assert back.effective_delay == eff


def test_window_extract():
    traj = rollout(Pendulum(horizon=30), RandomPolicy(Pendulum().spec), 30, seed=2)
    w = window_extract(traj, 10, 4, 4)
    np.testing.assert_array_equal(w.states, traj.states[6:11])
    np.testing.assert_array_equal(w.actions, traj.actions[6:10])
    assert w.tokens.effective_delay == 4
    # stride-1 tiling
    delta = 4
    count = sum(1 for t in range(len(traj)) if _ok(traj, t, delta, delta))
    assert count == len(traj) - delta
    # reward prefix sums
    csum = np.concatenate([[0.0], np.cumsum(traj.rewards)])
    for t in range(delta, len(traj)):
        w = window_extract(traj, t, delta, delta)
        assert w.rewards.sum() == pytest.approx(csum[t] - csum[t - delta], abs=1e-12)
    with pytest.raises(IndexError):
        window_extract(traj, 3, 4, 4)


def _ok(traj, t, delta, n):
    try:
        window_extract(traj, t, delta, n)
        return True
    except IndexError:
        return False


def test_trajectory_windows_targets():
    traj = rollout(MassSpringDamper(horizon=20), RandomPolicy(MassSpringDamper().spec), 20, 1)
    tokens, mask, targets = trajectory_windows(traj, 6)
    assert tokens.shape == (20, 6, 4)
    assert mask[0].sum() == 6 and mask[-1].sum() == 1
    np.testing.assert_array_equal(targets[3, 2], traj.states[6])
    ts = window_extract(traj, 9, 6, 6).tokens
    np.testing.assert_array_equal(tokens[3], ts.tokens)
