import numpy as np
import pytest

from gbp_planner import metrics
from gbp_planner import simulator as sim
from gbp_planner.config import ScenarioConfig, parse_config


def custom(robots, **kw):
    cfg = ScenarioConfig(kind="custom", horizon=kw.pop("horizon", 4.0), max_speed=kw.pop("max_speed", 10.0), **kw)
    cfg.custom.robots = robots
    return cfg


def test_single_robot_reaches_goal():
    cfg = custom([{"start": [0, 0, 10, 0], "goal": [20, 0, 0, 0], "radius": 1.0}], max_ticks=200)
    result = sim.run(cfg)
    assert result.complete and not result.episodes
    rec = result.records[0]
    assert rec.completion_tick is not None
    assert metrics.distance_travelled(result.trace, 0, rec.goal, rec.radius) == pytest.approx(20.0, rel=0.02)


def test_runs_are_deterministic():
    robots = [{"start": [-20, 0.2, 10, 0], "goal": [20, 0.2, 0, 0]},
              {"start": [20, -0.2, -10, 0], "goal": [-20, -0.2, 0, 0]}]
    a = sim.run(custom(robots, max_ticks=40, seed=4))
    b = sim.run(custom(robots, max_ticks=40, seed=4))
    assert a.trace_csv() == b.trace_csv()


def test_collisions_use_strict_threshold_and_episodes():
    # two parked robots exactly touching, then a third overlapping for good
    cfg = custom([{"start": [0, 0, 0, 0], "goal": [0, 0, 0, 0], "radius": 1.0},
                  {"start": [2, 0, 0, 0], "goal": [2, 0, 0, 0], "radius": 1.0},
                  {"start": [10, 0, 0, 0], "goal": [10, 0, 0, 0], "radius": 1.0},
                  {"start": [11, 0, 0, 0], "goal": [11, 0, 0, 0], "radius": 1.0}], m_i=0, m_r=0)
    world = sim.create_world(cfg)
    for _ in range(3):
        sim.step(world)
    assert world.episodes == [(0, 2, 3)]
    flags = {(e.tick, e.robot_id): e.collision for e in world.trace}
    assert not flags[(0, 0)] and flags[(2, 3)]


def test_trace_csv_round_trip(tmp_path):
    cfg = custom([{"start": [0, 0, 10, 0], "goal": [20, 0, 0, 0]}], max_ticks=5)
    result = sim.run(cfg)
    rows = sim.read_trace_csv(result.trace_csv())
    assert len(rows) == len(result.trace) == 5
    assert all(np.array_equal(r["state"], e.state) for r, e in zip(rows, result.trace))
    trace_path, meta_path = sim.write_run(result, tmp_path, "x")
    assert trace_path.exists() and meta_path.exists()


def test_junction_runs_to_tick_limit():
    cfg = parse_config("[scenario]\nkind = junction\n")
    result = sim.run(cfg, max_ticks=30)
    assert result.status == "complete" and result.ticks == 30
    assert result.flow_region == (-8.0, -8.0, 8.0, 8.0)
    assert len(result.records) >= 4
