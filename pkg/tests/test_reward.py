import numpy as np
import pytest

from dronenav.config import Config
from dronenav.geometry import Action, GridSpec, grid_to_world
from dronenav.reward import RewardTracker, RewardWeights, action_penalty, discounted_returns
from dronenav.visitation import VisitationDist

CFG = Config()
SPEC = GridSpec()


def point_dist(cell, oob=0.0):
    g = np.zeros(SPEC.shape())
    g[cell] = 1.0 - oob
    return VisitationDist(grid=g, oob=oob, spec=SPEC)


def uniform_cells(cells, oob=0.0):
    g = np.zeros(SPEC.shape())
    for c in cells:
        g[c] += (1.0 - oob) / len(cells)
    return VisitationDist(grid=g, oob=oob, spec=SPEC)


def tracker():
    t = RewardTracker(weights=RewardWeights.from_config(CFG), cfg=CFG, spec=SPEC)
    return t


def test_visitation_reward_zero_when_prediction_matches_and_static():
    t = tracker()
    start = grid_to_world((10, 10), SPEC)
    d_p = point_dist((10, 10))
    d_g = point_dist((10, 10))
    t.start(start, d_p)
    out = t.step(start, d_p, d_g, Action(v=0.1))
    assert out["r_v"] == pytest.approx(0.0, abs=1e-12)


def test_visitation_reward_equals_emd_reduction():
    # agent steps onto the predicted point mass: reward = EMD drop (transport oracle)
    t = tracker()
    c0, c1 = (10, 10), (14, 10)
    d_p = point_dist(c1)
    d_g = point_dist(c1)
    p0, p1 = grid_to_world(c0, SPEC), grid_to_world(c1, SPEC)
    t.start(p0, d_p)
    gap = np.linalg.norm(p1 - p0)
    out = t.step(p1, d_p, d_g, Action(v=0.1))
    # empirical moves from {p0} to {p0, p1}: EMD halves
    assert out["r_v"] == pytest.approx(gap - gap / 2, abs=1e-9)


def test_visitation_sum_telescopes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = tracker()
        cells = [(int(rng.integers(8, 24)), int(rng.integers(8, 24))) for _ in range(6)]
        d_p0 = uniform_cells(cells[:3], oob=rng.uniform(0, 0.5))
        start = grid_to_world(cells[0], SPEC)
        t.start(start, d_p0)
        phi0 = t.phi_v_prev
        total = 0.0
        for k in range(5):
            d_p = uniform_cells(cells[: 2 + k], oob=rng.uniform(0, 0.4))
            d_g = uniform_cells(cells[:2], oob=rng.uniform(0, 0.9))
            pos = grid_to_world(cells[int(rng.integers(len(cells)))], SPEC)
            out = t.step(pos, d_p, d_g, Action(v=0.2))
            total += out["r_v"]
        assert total == pytest.approx(t.phi_v_prev - phi0, abs=1e-12)


def test_exploration_belief_drop_rewards_seven_tenths():
    t = tracker()
    start = grid_to_world((10, 10), SPEC)
    d_p = point_dist((10, 10), oob=0.0)
    t.start(start, d_p)
    seq = [0.9, 0.2, 0.2]
    rewards = []
    for oob in seq:
        d_g = point_dist((12, 10), oob=oob)
        out = t.step(start, d_p, d_g, Action(v=0.1))
        rewards.append(out["r_e"])
    # belief max lags one step: the 0.9 -> 0.2 drop pays +0.7 exactly
    assert rewards[0] == pytest.approx(0.0, abs=1e-12)
    assert rewards[1] == pytest.approx(0.1, abs=1e-12)
    assert rewards[2] == pytest.approx(0.7, abs=1e-12)


def test_exploration_stop_penalty():
    t = tracker()
    start = grid_to_world((10, 10), SPEC)
    d_p = point_dist((10, 10))
    d_g0 = point_dist((10, 10), oob=0.8)
    t.start(start, d_p)
    t.step(start, d_p, d_g0, Action(v=0.1))  # belief flat at 0.2
    out = t.step(start, d_p, d_g0, Action.stop_action())
    # shaping part: (1-0.8) - 0 = 0.2 from the lag, minus stop penalty 0.8
    assert out["r_e"] == pytest.approx(0.2 - 0.8, abs=1e-12)
    t2 = tracker()
    t2.start(start, d_p)
    d_flat = point_dist((10, 10), oob=0.8)
    t2.step(start, d_p, d_flat, Action(v=0.1))
    t2.step(start, d_p, d_flat, Action(v=0.1))
    out2 = t2.step(start, d_p, d_flat, Action.stop_action())
    # belief flat: shaping 0, pure stop penalty -0.8
    assert out2["r_e"] == pytest.approx(-0.8, abs=1e-12)


def test_exploration_shaping_telescopes():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = tracker()
        start = grid_to_world((10, 10), SPEC)
        d_p = point_dist((10, 10))
        t.start(start, d_p)
        shaping = 0.0
        oobs = rng.uniform(0, 1, size=6)
        for oob in oobs:
            d_g = point_dist((12, 12), oob=float(oob))
            out = t.step(start, d_p, d_g, Action(v=0.1))
            shaping += out["r_e"]
        assert shaping == pytest.approx(t.phi_e_prev - 0.0, abs=1e-12)


def test_stop_reward_cases():
    t = tracker()
    c = (12, 12)
    start = grid_to_world(c, SPEC)
    d_p = point_dist(c)
    d_g = point_dist(c)
    t.start(start, d_p)
    out = t.step(start, d_p, d_g, Action(v=0.3))
    assert out["r_s"] == 0.0  # non-STOP
    out = t.step(start, d_p, d_g, Action.stop_action())
    assert out["r_s"] == pytest.approx(0.0, abs=1e-12)  # stopped on the goal
    # stopping k cells away costs k * cell size
    t2 = tracker()
    goal = (12 + 4, 12)
    d_g2 = point_dist(goal)
    t2.start(start, d_p)
    out2 = t2.step(start, d_p, d_g2, Action.stop_action())
    assert out2["r_s"] == pytest.approx(-4 * SPEC.meters_per_cell, abs=1e-9)


def test_action_penalty_intervals():
    assert action_penalty(Action(v=0.5, omega=0.0), CFG) == 0.0
    assert action_penalty(Action(v=2.0, omega=0.0), CFG) == pytest.approx(0.3)
    assert action_penalty(Action(v=-0.6, omega=2.5), CFG) == pytest.approx(0.1 + 0.5)
    assert action_penalty(Action.stop_action(), CFG) == 0.0
    assert action_penalty(Action(v=1.7, omega=-2.0), CFG) == 0.0


def test_total_reward_combination():
    t = tracker()
    start = grid_to_world((10, 10), SPEC)
    d_p = point_dist((10, 10))
    d_g = point_dist((10, 10), oob=0.5)
    t.start(start, d_p)
    a = Action(v=2.0, omega=0.0)  # 0.3 beyond the penalty interval
    out = t.step(start, d_p, d_g, a)
    w = RewardWeights.from_config(CFG)
    want = (
        w.lambda_v * out["r_v"] + w.lambda_s * out["r_s"] + w.lambda_e * out["r_e"]
        - w.lambda_a * 0.3 - w.lambda_step
    )
    assert out["total"] == pytest.approx(want, abs=1e-12)


def test_discounted_returns_examples():
    np.testing.assert_allclose(discounted_returns([1, 1, 1], 0.5), [1.75, 1.5, 1.0])
    np.testing.assert_allclose(discounted_returns([3.0, -1.0, 2.0], 0.0), [3.0, -1.0, 2.0])
    rng = np.random.default_rng(2)
    r = rng.normal(size=12)
    R = discounted_returns(r, 0.9)
    for t in range(11):
        assert R[t] == pytest.approx(r[t] + 0.9 * R[t + 1], abs=1e-12)
    assert R[-1] == pytest.approx(r[-1])


def test_rewards_finite_on_random_episodes():
    rng = np.random.default_rng(3)
    for _ in range(5):
        t = tracker()
        start = grid_to_world((16, 16), SPEC)
        cells = [(int(rng.integers(4, 28)), int(rng.integers(4, 28))) for _ in range(8)]
        t.start(start, uniform_cells(cells, oob=0.3))
        for k in range(6):
            d_p = uniform_cells(cells, oob=float(rng.uniform(0, 0.8)))
            d_g = uniform_cells(cells[:3], oob=float(rng.uniform(0, 0.99)))
            action = Action(v=float(rng.normal(0, 2)), omega=float(rng.normal(0, 3)))
            if k == 5:
                action = Action.stop_action()
            out = t.step(grid_to_world(cells[k % len(cells)], SPEC), d_p, d_g, action)
            assert np.isfinite(out["total"])


def test_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        RewardWeights(lambda_v=-0.1)
