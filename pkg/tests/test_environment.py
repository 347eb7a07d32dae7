import numpy as np
import pytest

from gbp_planner.config import ScenarioConfig
from gbp_planner.environment import (
    EMPTY_SENTINEL,
    build_sdf,
    make_scenario,
    polygon_signed_distance,
    regular_polygon,
    sample_sdf,
)

SQUARE = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def test_square_signed_distance():
    pts = np.array([[0.0, 0.0], [3.0, 0.0], [0.5, 0.0], [2.0, 2.0]])
    d = polygon_signed_distance(pts, [SQUARE])
    assert np.allclose(d, [-1.0, 2.0, -0.5, np.sqrt(2.0)])


def test_empty_world_is_far_and_flat():
    grid = build_sdf([], (-10, -10, 10, 10), 1.0)
    d, g, clamped = sample_sdf(grid, np.array([[0.3, 0.7]]))
    assert d[0] == EMPTY_SENTINEL and not g.any() and not clamped[0]


def test_grid_interpolation_and_gradient():
    grid = build_sdf([SQUARE], (-10, -10, 10, 10), 0.25)
    d, g, _ = sample_sdf(grid, np.array([[4.0, 0.0], [0.0, -3.0]]))
    assert np.allclose(d, [3.0, 2.0], atol=1e-9)
    assert np.allclose(g, [[1.0, 0.0], [0.0, -1.0]], atol=1e-6)


def test_outside_queries_are_clamped():
    grid = build_sdf([SQUARE], (-5, -5, 5, 5), 0.5)
    _, _, clamped = sample_sdf(grid, np.array([[20.0, 0.0], [0.0, 0.0]]))
    assert clamped.tolist() == [True, False]


def test_build_sdf_validation():
    with pytest.raises(ValueError):
        build_sdf([SQUARE], (0, 0, 1, 1), 0.0)
    with pytest.raises(ValueError):
        build_sdf([SQUARE[:2]], (0, 0, 1, 1), 0.5)


def test_regular_polygon_vertices_on_circle():
    p = regular_polygon([1.0, 2.0], 3.0, 5)
    assert np.allclose(np.linalg.norm(p - [1.0, 2.0], axis=1), 3.0)


def test_circle_layout():
    cfg = ScenarioConfig(kind="circle")
    world = make_scenario(cfg, np.random.default_rng(0))
    assert len(world.robots) == 10
    assert cfg.effective_horizon == pytest.approx(200.0 / 15.0)
    for spec in world.robots:
        assert np.linalg.norm(spec.start.pos) == pytest.approx(50.0, abs=0.1)
        assert np.allclose(spec.goal.pos, -spec.start.pos, atol=0.2)
        assert np.linalg.norm(spec.start.vel) == pytest.approx(15.0)
        assert 2.0 <= spec.radius <= 3.0


def test_obstacles_clear_of_starts_and_goals():
    for n in (10, 21, 30):
        cfg = ScenarioConfig(kind="circle_with_obstacles")
        cfg.circle.n_robots = n
        world = make_scenario(cfg, np.random.default_rng(0))
        assert len(world.polygons) == 5
        ends = np.array([s.start.pos for s in world.robots] + [s.goal.pos for s in world.robots])
        assert polygon_signed_distance(ends, world.polygons).min() > 10.0
        # obstacles sit inside the crossing region
        verts = np.concatenate(world.polygons)
        assert np.linalg.norm(verts, axis=1).max() < 40.0


def test_junction_spawner_rate():
    cfg = ScenarioConfig(kind="junction")
    world = make_scenario(cfg, np.random.default_rng(1))
    count = 0
    for tick in range(300):
        count += len(world.spawner.due(tick, []))
    # 30 s at 2 robots per second, give or take the boundary jitter
    assert abs(count - 60) <= 1
    arms = {world.spawner._make(a, 0.0, 0).arm for a in ("west", "south")}
    assert arms == {"west", "south"}
