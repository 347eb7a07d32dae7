"""World clock: runs the per-tick planning loop for every robot and records a trace.

Each tick passes through global phases in a fixed order: spawn/despawn, anchor
advance, neighbor discovery, internal sweeps, inter-robot sweeps, ground-truth
update, collision check, trace append.  Nothing in a phase can observe another
robot's half-finished state, so runs are a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import planner as pl
from .comm import NullTransport, Transport, neighbors
from .config import ScenarioConfig, config_to_dict
from .environment import InitialWorld, RobotSpec, SdfGrid, make_scenario, sample_sdf
from .factors import RobotState

TRACE_COLUMNS = ("tick", "id", "x", "y", "vx", "vy", "collision", "sent", "dropped")


class SimulationError(RuntimeError):
    pass


@dataclass
class RobotRecord:
    robot_id: int
    start: np.ndarray
    goal: np.ndarray
    radius: float
    spawn_tick: int
    arm: str = ""
    completion_tick: int | None = None
    despawn_tick: int | None = None


@dataclass
class LiveRobot:
    fragment: pl.RobotFragment
    truth: np.ndarray
    record: RobotRecord


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    robot_id: int
    state: np.ndarray          # ground truth [x, y, vx, vy]
    plan: np.ndarray           # (K, 4) belief means
    collision: bool
    sent: int
    dropped: int


@dataclass
class WorldState:
    cfg: ScenarioConfig
    sdf: SdfGrid
    transport: Transport
    schedule: pl.TrajectorySchedule
    params_by_radius: dict = field(default_factory=dict)
    tick: int = 0
    robots: dict = field(default_factory=dict)      # id -> LiveRobot
    records: dict = field(default_factory=dict)     # id -> RobotRecord, including despawned robots
    pending: list = field(default_factory=list)     # RobotSpecs waiting for their spawn tick
    spawner: object = None
    trace: list = field(default_factory=list)
    contacts: set = field(default_factory=set)      # pairs in contact on the previous tick
    episodes: list = field(default_factory=list)    # (tick, a, b) at the start of each contact episode
    flow_region: tuple | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def time(self) -> float:
        return self.tick * self.cfg.dt


@dataclass
class RunResult:
    cfg: ScenarioConfig
    trace: list
    records: dict
    episodes: list
    status: str                    # complete | incomplete | aborted
    ticks: int
    flow_region: tuple | None = None
    message: str = ""
    spawn_deferrals: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)

    def metadata(self) -> dict:
        return {
            "config": config_to_dict(self.cfg),
            "status": self.status,
            "ticks": self.ticks,
            "message": self.message,
            "robots": {
                str(r.robot_id): {
                    "start": r.start.tolist(), "goal": r.goal.tolist(), "radius": r.radius,
                    "spawn_tick": r.spawn_tick, "completion_tick": r.completion_tick,
                    "despawn_tick": r.despawn_tick, "arm": r.arm,
                }
                for r in sorted(self.records.values(), key=lambda r: r.robot_id)
            },
            "collision_episodes": [list(e) for e in self.episodes],
            "flow_region": list(self.flow_region) if self.flow_region else None,
            "spawn_deferrals": self.spawn_deferrals,
            "diagnostics": self.diagnostics,
        }


# --- world construction ---------------------------------------------------------

def create_world(cfg: ScenarioConfig, initial: InitialWorld | None = None) -> WorldState:
    rng = np.random.default_rng(cfg.seed)
    initial = initial or make_scenario(cfg, rng)
    transport = Transport(cfg.comm.gamma, cfg.comm.seed + 7919 * cfg.seed) if cfg.comm.gamma > 0 else NullTransport()
    schedule = pl.TrajectorySchedule.geometric(cfg.K, cfg.dt, cfg.effective_horizon)
    world = WorldState(cfg=cfg, sdf=initial.sdf, transport=transport, schedule=schedule,
                       spawner=initial.spawner, flow_region=initial.flow_region)
    world.pending = sorted(initial.robots, key=lambda s: (s.spawn_tick, s.robot_id))
    world.diagnostics = {"held_anchor": 0, "clamped_sdf": 0, "rejected_messages": 0}
    return world


def _params(world: WorldState, radius: float):
    if radius not in world.params_by_radius:
        world.params_by_radius[radius] = world.cfg.factors.params(radius, world.cfg.comm.r_c)
    return world.params_by_radius[radius]


def _initial_horizon(cfg: ScenarioConfig, start: np.ndarray, goal: np.ndarray, horizon: float,
                     max_speed: float, mode: str) -> np.ndarray:
    if mode == pl.STATIONARY:
        return goal.copy()
    to_goal = goal[:2] - start[:2]
    dist = float(np.linalg.norm(to_goal))
    out = start.copy()
    if dist == 0.0:
        out[2:] = 0.0
        return out
    direction = to_goal / dist
    reach = min(dist, max_speed * horizon)
    out[:2] = start[:2] + direction * reach
    out[2:] = direction * max_speed if reach < dist else goal[2:]
    return out


def spawn_robot(world: WorldState, spec: RobotSpec) -> LiveRobot:
    cfg = world.cfg
    mode = cfg.effective_horizon_mode
    start, goal = spec.start.vector, spec.goal.vector
    horizon = _initial_horizon(cfg, start, goal, world.schedule.horizon, cfg.effective_max_speed, mode)
    frag = pl.build_fragment(start, goal, world.schedule, _params(world, spec.radius), world.sdf,
                             robot_id=spec.robot_id, horizon_mode=mode,
                             max_speed=cfg.effective_max_speed, horizon_anchor=horizon,
                             window_mode=cfg.effective_window, window_floor=cfg.window_floor)
    record = RobotRecord(spec.robot_id, start.copy(), goal.copy(), spec.radius, world.tick, spec.arm)
    robot = LiveRobot(frag, start.copy(), record)
    world.robots[spec.robot_id] = robot
    world.records[spec.robot_id] = record
    return robot


# --- the tick -----------------------------------------------------------------------

def _reached(robot: LiveRobot) -> bool:
    return float(np.linalg.norm(robot.truth[:2] - robot.record.goal[:2])) <= robot.record.radius


def _spawn_phase(world: WorldState) -> set:
    cfg = world.cfg
    if cfg.kind == "junction":
        for rid in sorted(world.robots):
            if world.robots[rid].record.completion_tick is not None:
                world.robots[rid].record.despawn_tick = world.tick
                del world.robots[rid]
    fresh = set()
    while world.pending and world.pending[0].spawn_tick <= world.tick:
        fresh.add(spawn_robot(world, world.pending.pop(0)).record.robot_id)
    if world.spawner is not None:
        occupied = [(r.truth[:2].copy(), r.record.radius) for _, r in sorted(world.robots.items())]
        for spec in world.spawner.due(world.tick, occupied):
            fresh.add(spawn_robot(world, spec).record.robot_id)
    return fresh


def detect_collisions(world: WorldState) -> tuple[set, set]:
    """Pairs in contact this tick: ((a, b) robot pairs, (id, 'obstacle') entries).

    Robot pairs collide at distance < r_A + r_B; a robot hits an obstacle when the
    sampled SDF is < r_R.
    """
    ids = sorted(world.robots)
    pairs = set()
    if len(ids) >= 2:
        pos = np.array([world.robots[i].truth[:2] for i in ids])
        rad = np.array([world.robots[i].record.radius for i in ids])
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        hit = dist < rad[:, None] + rad[None, :]
        for a, b in zip(*np.nonzero(np.triu(hit, 1))):
            pairs.add((ids[a], ids[b]))
    obstacle = set()
    if ids:
        pos = np.array([world.robots[i].truth[:2] for i in ids])
        d, _, _ = sample_sdf(world.sdf, pos)
        for i, di in zip(ids, d):
            if di < world.robots[i].record.radius:
                obstacle.add((i, "obstacle"))
    return pairs, obstacle


def step(world: WorldState) -> None:
    cfg = world.cfg
    # (1) spawn / despawn
    fresh = _spawn_phase(world)
    ids = sorted(world.robots)
    # (2) anchors advance for robots that already had a plan
    for rid in ids:
        if rid not in fresh:
            pl.tick(world.robots[rid].fragment, cfg.dt)
    frags = {rid: world.robots[rid].fragment for rid in ids}
    # (3) neighbor discovery on ground truth
    near = neighbors({rid: world.robots[rid].truth[:2] for rid in ids}, cfg.comm.r_c)
    for rid in ids:
        pl.update_interrobot_factors(frags[rid], near[rid], frags)
    world.transport.begin_tick(world.tick, {rid: frags[rid].connected for rid in ids})
    # (4, 5) internal then inter-robot sweeps
    if ids:
        sweeper = pl.FleetSweeper([frags[rid] for rid in ids], cfg.damping, world.transport)
        sweeper.internal(cfg.m_i)
        sweeper.interrobot(cfg.m_r)
        sweeper.write_back()
    # (6) perfect tracking: ground truth is the anchored current state
    for rid in ids:
        robot = world.robots[rid]
        state = robot.fragment.means[0].copy()
        if not np.all(np.isfinite(state)):
            raise SimulationError(f"non-finite state for robot {rid} at tick {world.tick}")
        robot.truth = state
        if robot.record.completion_tick is None and _reached(robot):
            robot.record.completion_tick = world.tick
    # (7) collisions, counted once per contiguous episode
    pairs, obstacle = detect_collisions(world)
    contacts = pairs | obstacle
    for c in sorted(contacts - world.contacts, key=str):
        world.episodes.append((world.tick, c[0], c[1]))
    world.contacts = contacts
    colliding = {c[0] for c in contacts} | {c[1] for c in pairs}
    # (8) trace
    stats = world.transport.stats
    for rid in ids:
        robot = world.robots[rid]
        world.trace.append(TraceEvent(
            world.tick, rid, robot.truth.copy(), robot.fragment.means.copy(), rid in colliding,
            stats.per_robot_sent.get(rid, 0), stats.per_robot_dropped.get(rid, 0)))
    world.tick += 1


def _all_done(world: WorldState) -> bool:
    if world.cfg.kind == "junction" or world.pending:
        return False
    return bool(world.robots) and all(r.record.completion_tick is not None for r in world.robots.values())


def _collect_diagnostics(world: WorldState) -> dict:
    out = dict(world.diagnostics)
    for robot in world.robots.values():
        for key, value in robot.fragment.diagnostics.items():
            out[key] = out.get(key, 0) + value
    hist = world.transport.history
    out["messages_sent"] = int(sum(s.sent for s in hist))
    out["messages_dropped"] = int(sum(s.dropped for s in hist))
    return out


def run(cfg: ScenarioConfig, max_ticks: int | None = None, initial: InitialWorld | None = None) -> RunResult:
    """Step until every robot has completed (or max_ticks for junction runs)."""
    limit = cfg.max_ticks if max_ticks is None else max_ticks
    world = create_world(cfg, initial)
    status, message = "incomplete", ""
    try:
        while world.tick < limit:
            step(world)
            if _all_done(world):
                status = "complete"
                break
        else:
            status = "complete" if cfg.kind == "junction" else "incomplete"
    except SimulationError as exc:
        status, message = "aborted", str(exc)
    spawner = world.spawner
    return RunResult(
        cfg=cfg, trace=world.trace, records=world.records, episodes=world.episodes, status=status,
        ticks=world.tick, flow_region=world.flow_region, message=message,
        spawn_deferrals=getattr(spawner, "deferrals", 0), diagnostics=_collect_diagnostics(world),
    )


# --- output ------------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def trace_to_csv(trace: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for ev in trace:
        writer.writerow([ev.tick, ev.robot_id, *(_fmt(v) for v in ev.state), int(ev.collision), ev.sent, ev.dropped])
    return buf.getvalue()


def read_trace_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({
            "tick": int(row["tick"]), "id": int(row["id"]),
            "state": np.array([float(row[k]) for k in ("x", "y", "vx", "vy")]),
            "collision": row["collision"] == "1",
        })
    return rows


def write_run(result: RunResult, directory: str | Path, stem: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trace_path = directory / f"{stem}.trace.csv"
    meta_path = directory / f"{stem}.meta.json"
    trace_path.write_text(result.trace_csv(), encoding="utf-8")
    meta_path.write_text(json.dumps(result.metadata(), indent=2, sort_keys=True, default=_json_default) + "\n",
                         encoding="utf-8")
    return trace_path, meta_path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")
