import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipp.physics_env import (
    BIRD,
    OBSTACLE,
    Action,
    EnvConfig,
    Obstacle,
    TerminalStateError,
    WorldState,
    collided,
    downsample,
    preprocess,
    random_policy,
    render,
    reset,
    run_episode,
    step,
)

CFG = EnvConfig()


def sky(y=128.0, vy=0.0, obstacles=()):
    return WorldState(bird_y=y, bird_vy=vy, bird_x=CFG.bird_x, obstacles=tuple(obstacles))


def far_pipe():
    # an obstacle far enough away that short tests never reach it
    return Obstacle(x=10_000.0, gap_center_y=128.0, gap_half_height=36.0, width=32.0)


class TestStep:
    def test_pure_gravity_tick(self):
        s = step(sky(vy=0.0, obstacles=[far_pipe()]), Action.NOOP, CFG, np.random.default_rng(0))
        assert s.bird_vy == 0.36
        assert s.bird_y == 128.0 + 0.36

    def test_flap_is_additive_impulse(self):
        s = step(sky(vy=0.0, obstacles=[far_pipe()]), Action.FLAP, CFG, np.random.default_rng(0))
        assert s.bird_vy == pytest.approx(-4.64, abs=1e-12)
        assert s.bird_vy == 0.0 + 0.36 - 5.0

    def test_hover_probability_matches_calibration(self):
        assert CFG.gravity_g / CFG.flap_impulse_dv == 0.072
        assert CFG.hover_flap_probability == 0.072

    def test_terminal_velocity_clamps(self):
        s = step(sky(vy=-9.9, obstacles=[far_pipe()]), Action.FLAP, CFG, np.random.default_rng(0))
        assert s.bird_vy == -CFG.terminal_velocity

    def test_stepping_terminal_state_raises(self):
        dead = replace(sky(), alive=False)
        with pytest.raises(TerminalStateError):
            step(dead, Action.NOOP, CFG, np.random.default_rng(0))

    def test_obstacles_scroll_and_stay_sorted(self):
        s = reset(CFG, np.random.default_rng(3))
        nxt = step(s, Action.NOOP, CFG, np.random.default_rng(3))
        assert nxt.obstacles[0].x == s.obstacles[0].x - CFG.scroll_speed
        xs = [o.x for o in nxt.obstacles]
        assert xs == sorted(xs)
        assert xs[-1] > CFG.world_width

    def test_noise_only_when_configured(self):
        noisy = replace(CFG, action_noise_sigma=0.5)
        a = step(sky(obstacles=[far_pipe()]), Action.NOOP, noisy, np.random.default_rng(1))
        assert a.bird_vy != 0.36


def test_kinematics_match_closed_form():
    # dyadic constants make every partial sum exact in binary floating point
    cfg = EnvConfig(gravity_g=0.25, flap_impulse_dv=4.0, terminal_velocity=1000.0, world_height=1e7,
                    gap_center_range=(64.0, 192.0))
    rng = np.random.default_rng(0)
    s = WorldState(bird_y=100.0, bird_vy=-3.0, bird_x=cfg.bird_x, obstacles=(far_pipe(),))
    for t in range(1, 101):
        s = step(s, Action.NOOP, cfg, rng)
        expected = 100.0 + sum(-3.0 + k * 0.25 for k in range(1, t + 1))
        assert s.bird_y == expected


def test_hover_rate_keeps_mean_velocity_change_at_zero():
    n = 100_000
    rng = np.random.default_rng(42)
    flaps = rng.random(n) < CFG.hover_flap_probability
    start = sky(obstacles=[far_pipe()])
    dv = np.array(
        [step(start, Action.FLAP if f else Action.NOOP, CFG, rng).bird_vy - start.bird_vy for f in flaps]
    )
    se = dv.std(ddof=1) / math.sqrt(n)
    assert abs(dv.mean()) <= 3 * se


class TestCollided:
    def test_floor(self):
        assert collided(sky(y=CFG.world_height), CFG)

    def test_ceiling(self):
        assert collided(sky(y=0.0), CFG)

    def test_centered_in_gap(self):
        ob = Obstacle(x=CFG.bird_x - 10, gap_center_y=128.0, gap_half_height=36.0, width=32.0)
        assert not collided(sky(y=128.0, obstacles=[ob]), CFG)

    def test_one_pixel_into_lower_pipe(self):
        ob = Obstacle(x=CFG.bird_x - 10, gap_center_y=128.0, gap_half_height=36.0, width=32.0)
        y = 128.0 + 36.0 - CFG.bird_radius + 1
        assert collided(sky(y=y, obstacles=[ob]), CFG)

    def test_touching_is_not_a_collision(self):
        ob = Obstacle(x=CFG.bird_x - 10, gap_center_y=128.0, gap_half_height=36.0, width=32.0)
        assert not collided(sky(y=128.0 + 36.0 - CFG.bird_radius, obstacles=[ob]), CFG)

    def test_corner_uses_disc_geometry(self):
        # pipe starts 4 px right of the bird centre: only a cap of the disc reaches it
        ob = Obstacle(x=CFG.bird_x + 4, gap_center_y=128.0, gap_half_height=36.0, width=32.0)
        edge = 128.0 + 36.0 - math.sqrt(CFG.bird_radius**2 - 16)
        assert not collided(sky(y=edge - 0.01, obstacles=[ob]), CFG)
        assert collided(sky(y=edge + 0.01, obstacles=[ob]), CFG)


class TestRender:
    def test_empty_world_is_background(self):
        frame = render(sky(y=-100.0), 37, 53, CFG)
        assert frame.shape == (53, 37)
        assert np.all(frame == 0.0)

    def test_bird_at_center(self):
        s = WorldState(bird_y=128.0, bird_vy=0.0, bird_x=128.0)
        assert render(s, 80, 80, CFG)[40, 40] == BIRD

    def test_obstacle_intensity(self):
        ob = Obstacle(x=100.0, gap_center_y=128.0, gap_half_height=36.0, width=32.0)
        frame = render(sky(y=-100.0, obstacles=[ob]), 256, 256, CFG)
        assert frame[10, 110] == OBSTACLE
        assert frame[128, 110] == 0.0

    def test_deterministic(self):
        s = reset(CFG, np.random.default_rng(5))
        assert np.array_equal(render(s, cfg=CFG), render(s, cfg=CFG))

    def test_rejects_empty_size(self):
        with pytest.raises(ValueError):
            render(sky(), 0, 10)


class TestPreprocess:
    def test_box_filter_preserves_constants(self):
        out = downsample(np.full((160, 160), 0.5))
        assert out.shape == (80, 80)
        assert np.allclose(out, 0.5, atol=1e-7)

    def test_block_average(self):
        assert downsample(np.array([[0.0, 0.0], [1.0, 1.0]]), size=1)[0, 0] == 0.5

    def test_non_integer_ratio_conserves_mass(self):
        frame = np.random.default_rng(0).random((256, 256))
        out = downsample(frame)
        assert out.mean() == pytest.approx(frame.mean(), rel=1e-6)

    def test_episode_start_pads_with_first_frame(self):
        f0 = render(reset(CFG, np.random.default_rng(0)), cfg=CFG)
        stack = preprocess([f0])
        assert stack.shape == (4, 80, 80)
        assert all(np.array_equal(stack[0], stack[i]) for i in range(4))

    def test_newest_last(self):
        frames = [np.full((256, 256), v) for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
        stack = preprocess(frames)
        assert np.allclose(stack[:, 0, 0], [0.2, 0.3, 0.4, 0.5])

    def test_requires_a_frame(self):
        with pytest.raises(ValueError):
            preprocess([])


@settings(max_examples=30, deadline=None)
@given(
    y=st.floats(-20, 280),
    gap=st.floats(64, 192),
    x=st.floats(-40, 300),
)
def test_render_and_preprocess_stay_in_unit_range(y, gap, x):
    s = sky(y=y, obstacles=[Obstacle(x=x, gap_center_y=gap, gap_half_height=36.0, width=32.0)])
    frame = render(s, cfg=CFG)
    assert set(np.unique(frame)) <= {0.0, OBSTACLE, BIRD}
    stack = preprocess([frame])
    assert stack.min() >= 0.0 and stack.max() <= 1.0


def _free_fall_ticks(cfg: EnvConfig) -> int:
    # independent oracle: accumulate velocity and height until the disc leaves the world
    y, v, t = cfg.bird_start_y, 0.0, 0
    while True:
        t += 1
        v = min(v + cfg.gravity_g, cfg.terminal_velocity)
        y += v
        if y > cfg.world_height - cfg.bird_radius:
            return t


class TestRunEpisode:
    def test_always_noop_hits_the_floor(self):
        cfg = replace(CFG, first_obstacle_x=2000.0)
        log = run_episode(cfg, lambda s: Action.NOOP, 500, seed=1)
        assert len(log) == _free_fall_ticks(cfg)
        assert log.records[-1].reward == -1
        assert log.records[-1].collision
        assert not log.final_state.alive

    def test_zero_ticks_rejected(self):
        with pytest.raises(ValueError):
            run_episode(CFG, lambda s: Action.NOOP, 0)

    def test_fixed_seed_is_deterministic(self):
        def run():
            log = run_episode(CFG, random_policy(0.072, np.random.default_rng(9)), 300, seed=4, record_frames=True)
            return [r.to_json() for r in log.records], log.frames

        (a, fa), (b, fb) = run(), run()
        assert a == b
        assert np.array_equal(fa, fb)

    def test_frames_recorded_per_tick(self):
        log = run_episode(CFG, random_policy(0.072, np.random.default_rng(2)), 50, seed=2, record_frames=True)
        assert [r.frame_idx for r in log.records] == list(range(len(log)))
        assert log.frames.shape == (len(log), 80, 80)

    def test_max_ticks_caps_episode(self):
        cfg = replace(CFG, first_obstacle_x=2000.0)
        log = run_episode(cfg, lambda s: Action.FLAP if s.bird_vy > 2 else Action.NOOP, 40, seed=0)
        assert len(log) == 40
        assert not log.records[-1].collision


def test_score_counts_each_obstacle_once():
    rng = np.random.default_rng(11)
    s = reset(CFG, rng)
    passed = 0
    seen_right_edges = []
    for _ in range(600):
        before = {o.gap_center_y for o in s.obstacles if o.x + o.width >= s.bird_x}
        # pin the bird to the current gap so it never collides
        nxt = step(s, Action.NOOP, CFG, rng)
        after = {o.gap_center_y for o in nxt.obstacles if o.x + o.width >= nxt.bird_x}
        passed += len(before - after)
        assert nxt.score >= s.score
        upcoming = [o for o in nxt.obstacles if o.x + o.width >= nxt.bird_x]
        target = upcoming[0].gap_center_y if upcoming else 128.0
        s = replace(nxt, bird_y=target, bird_vy=0.0, alive=True)
        seen_right_edges.append(nxt.score)
    assert s.score == passed
    assert passed >= 8
