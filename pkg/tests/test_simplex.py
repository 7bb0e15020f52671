import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vaalab import simplex as sx
from vaalab.errors import DomainError, NumericError, PreconditionError
from oracles import grid_argmax_mirror


def state_for(q, eta, floor=0.0):
    return sx.SamplerState(tuple(np.log(q)), eta_q=eta, q_floor=floor)


def test_uniform_and_hand_softmax():
    assert np.allclose(sx.current_q(sx.SamplerState.uniform(4)), 0.25)
    q = sx.current_q(sx.SamplerState((1.0, 0.0), q_floor=0.0))
    assert q == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-12)


def test_floor_mixing():
    s = sx.SamplerState((50.0, 0.0, 0.0), q_floor=0.01)
    q = sx.current_q(s)
    assert q.min() >= 0.01 - 1e-15 and q.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(PreconditionError):
        sx.SamplerState((0.0, 0.0), q_floor=0.5)


def test_exp3_hand_example():
    s = sx.exp3_update(sx.SamplerState.uniform(2, eta_q=0.5, q_floor=0.0), sx.RewardObservation(0, 1.0, 0.5))
    assert sx.current_q(s) == pytest.approx([0.7311, 0.2689], abs=1e-4)
    assert s.step_count == 1


def test_exp3_degenerate_cases():
    base = sx.SamplerState((0.3, -0.2, 0.1), eta_q=0.0, q_floor=0.0)
    same = sx.exp3_update(base, sx.RewardObservation(1, 5.0, 0.3))
    assert np.allclose(sx.current_q(same), sx.current_q(base))
    s = sx.SamplerState((0.3, -0.2, 0.1), eta_q=0.7, q_floor=0.0)
    assert np.allclose(sx.current_q(sx.exp3_update(s, sx.RewardObservation(0, 0.0, 0.4))), sx.current_q(s))
    with pytest.raises(PreconditionError):
        sx.exp3_update(s, sx.RewardObservation(0, 1.0, 0.0))
    with pytest.raises(PreconditionError):
        sx.exp3_update(sx.SamplerState.uniform(2, q_floor=0.1), sx.RewardObservation(0, 1.0, 0.05))


def test_mirror_full_hand_and_shift_invariance():
    s = sx.SamplerState.uniform(2, eta_q=1.0, q_floor=0.0)
    assert sx.current_q(sx.mirror_ascent_full(s, [1.0, 0.0])) == pytest.approx([0.7311, 0.2689], abs=1e-4)
    s3 = sx.SamplerState((0.5, -1.0, 2.0), eta_q=0.3, q_floor=0.0)
    assert np.allclose(sx.current_q(sx.mirror_ascent_full(s3, [2.0, 2.0, 2.0])), sx.current_q(s3), atol=1e-15)
    with pytest.raises(NumericError):
        sx.mirror_ascent_full(s3, [0.0, np.nan, 1.0])
    with pytest.raises(PreconditionError):
        sx.mirror_ascent_full(s3, [0.0, 1.0])


@pytest.mark.parametrize("m", [2, 3])
def test_updates_match_grid_oracle(m):
    rng = np.random.default_rng(m)
    for _ in range(10):
        q = rng.dirichlet(np.ones(m))
        q = np.clip(q, 0.02, None)
        q /= q.sum()
        f = rng.uniform(0, 2, size=m)
        eta = rng.uniform(0.05, 1.5)
        full = sx.current_q(sx.mirror_ascent_full(state_for(q, eta), f))
        assert np.abs(full - grid_argmax_mirror(q, f, eta)).max() < 1e-3
        i = int(rng.integers(m))
        bandit = sx.current_q(sx.exp3_update(state_for(q, eta), sx.RewardObservation(i, f[i], q[i])))
        r = np.zeros(m)
        r[i] = f[i] / q[i]
        assert np.abs(bandit - grid_argmax_mirror(q, r, eta)).max() < 1e-3


def test_near_vertex_update_matches_fine_grid():
    # large importance-weighted rewards push the maximizer towards a vertex
    q = np.array([0.3, 0.7])
    s = state_for(q, 1.2)
    got = sx.current_q(sx.exp3_update(s, sx.RewardObservation(0, 2.0, 0.3)))
    r = np.array([2.0 / 0.3, 0.0])
    assert got[1] < 1e-3
    assert np.abs(got - grid_argmax_mirror(q, r, 1.2, res=1e-6)).max() < 2e-6


def test_sample_group_degenerate_and_deterministic():
    s = sx.SamplerState((0.0, -800.0), q_floor=0.0)
    rng = np.random.default_rng(0)
    assert all(sx.sample_group(s, rng)[0] == 0 for _ in range(1000))
    u = sx.SamplerState.uniform(3)
    a = [sx.sample_group(u, np.random.default_rng(7))[0] for _ in range(3)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sx.sample_group(u, r1) for _ in range(50)] == [sx.sample_group(u, r2) for _ in range(50)]
    assert len(set(a)) == 1


def test_sample_frequencies_uniform():
    m, n = 3, 100_000
    rng = np.random.default_rng(1)
    q = sx.current_q(sx.SamplerState.uniform(m))
    draws = np.array([sx.draw_index(q, rng) for _ in range(n)])
    freq = np.bincount(draws, minlength=m) / n
    sigma = math.sqrt((1 / m) * (1 - 1 / m) / n)
    assert np.all(np.abs(freq - 1 / m) < 3 * sigma)


def test_log_space_survives_large_rewards():
    s = sx.SamplerState.uniform(3, eta_q=0.1)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        i, qi = sx.sample_group(s, rng)
        s = sx.exp3_update(s, sx.RewardObservation(i, 1e3, qi))
    q = sx.current_q(s)
    assert np.isfinite(s.log_weights).all() and np.isfinite(q).all()
    assert q.sum() == pytest.approx(1.0, abs=1e-9)


def test_bandit_matches_full_in_expectation():
    rng = np.random.default_rng(5)
    q = np.array([0.2, 0.5, 0.3])
    f = np.array([0.4, 0.1, 0.9])
    eta = 0.01
    s = state_for(q, eta)
    full = sx.current_q(sx.mirror_ascent_full(s, f))
    acc = np.zeros(3)
    n = 100_000
    for i in rng.choice(3, size=n, p=q):
        acc += sx.current_q(sx.exp3_update(s, sx.RewardObservation(int(i), f[i], q[i])))
    avg = acc / n
    assert np.sign(avg - q).tolist() == np.sign(full - q).tolist()
    assert np.abs(avg - full).max() < 1e-2


def test_kl_values_and_errors():
    assert sx.kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert sx.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(DomainError):
        sx.kl_divergence([0.5, 0.5], [1.0, 0.0])


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_kl_nonnegative(seed, m):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        assert sx.kl_divergence(rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m))) >= 0.0


@given(
    lw=st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    f=st.floats(0, 100),
    eta=st.floats(0, 2),
    floor=st.floats(0, 0.1),
    pick=st.integers(0, 5),
)
def test_updates_keep_valid_distribution(lw, f, eta, floor, pick):
    m = len(lw)
    floor = min(floor, 0.9 / m)
    s = sx.SamplerState(tuple(lw), eta_q=eta, q_floor=floor)
    q = sx.current_q(s)
    i = pick % m
    for nxt in (sx.exp3_update(s, sx.RewardObservation(i, f, float(q[i]))), sx.mirror_ascent_full(s, [f] * m)):
        q2 = sx.current_q(nxt)
        assert (q2 >= 0).all() and abs(q2.sum() - 1) < 1e-9
        assert q2.min() >= floor * (1 - 1e-9)
