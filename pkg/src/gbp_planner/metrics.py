"""Post-hoc evaluation of traces: distance, makespan, smoothness and junction flow.

Functions take the trace as a sequence of events with ``tick``, ``robot_id``,
``state`` and ``collision`` attributes (``simulator.TraceEvent``), so they work on
any prefix or slice of a run.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

SMOOTH_TOKEN = "+inf"   # serialized LDJ of a jerk-free path


@dataclass
class RobotMetrics:
    robot_id: int
    distance: float
    completion_time: float | None
    ldj: float
    collisions: int
    completed: bool


@dataclass
class FlowReport:
    q_in: float
    q_out: float
    window: int
    correctness_violations: int
    entries: int = 0
    exits: int = 0
    wrong_exits: int = 0
    collisions: int = 0
    wall_contacts: int = 0


def robot_series(trace: Iterable, robot_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Ticks and states of one robot, in tick order."""
    rows = sorted((ev.tick, ev.state) for ev in trace if ev.robot_id == robot_id)
    if not rows:
        return np.zeros(0, dtype=int), np.zeros((0, 4))
    ticks = np.array([t for t, _ in rows])
    states = np.array([s for _, s in rows], dtype=np.float64)
    return ticks, states


def path_length(points) -> float:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(points[:, :2], axis=0), axis=1)))


def completion_tick(ticks, states, goal, radius: float) -> int | None:
    """First tick at which the robot is within ``radius`` of ``goal``."""
    if len(ticks) == 0:
        return None
    dist = np.linalg.norm(states[:, :2] - np.asarray(goal, dtype=np.float64)[:2], axis=1)
    hits = np.nonzero(dist <= radius)[0]
    return int(ticks[hits[0]]) if hits.size else None


def distance_travelled(trace: Iterable, robot_id: int, goal=None, radius: float | None = None) -> float:
    """Ground-truth path length up to completion.

    Without ``goal`` this is the plain path length over the whole trace.  With a goal
    the path is cut at the completion tick and the remaining straight gap to the goal
    (at most ``radius``) is added, so a completed path is never shorter than the
    start-to-goal line.  Raises ValueError if the robot never completes.
    """
    ticks, states = robot_series(trace, robot_id)
    if goal is None:
        return path_length(states)
    done = completion_tick(ticks, states, goal, radius)
    if done is None:
        raise ValueError(f"robot {robot_id} did not reach its goal")
    upto = states[ticks <= done]
    return path_length(upto) + float(np.linalg.norm(upto[-1, :2] - np.asarray(goal)[:2]))


def makespan(trace: Iterable, goals: Mapping[int, np.ndarray], radii: Mapping[int, float],
             dt: float) -> tuple[float, bool]:
    """(latest completion time among completed robots, whether every robot completed)."""
    trace = list(trace)
    latest, complete = 0.0, True
    for rid in sorted(goals):
        ticks, states = robot_series(trace, rid)
        done = completion_tick(ticks, states, goals[rid], radii[rid])
        if done is None:
            complete = False
            continue
        latest = max(latest, done * dt)
    return latest, complete


def ldj(times, velocities) -> float:
    """Log dimensionless jerk of a uniformly sampled velocity series.

    Jerk is the second central difference of velocity; the squared norm is
    integrated with the trapezoid rule.  A jerk-free series returns +inf.
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(velocities, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if len(t) < 4 or len(v) != len(t):
        raise ValueError("LDJ needs at least four matched samples")
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if not dt > 0 or not np.allclose(steps, dt, rtol=1e-6, atol=0.0):
        raise ValueError("LDJ needs uniform sampling")
    v_max = float(np.max(np.linalg.norm(v, axis=1)))
    if v_max == 0.0:
        raise ValueError("LDJ is undefined for a motionless series")
    jerk = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dt**2
    integral = float(np.trapezoid(np.sum(jerk**2, axis=1), dx=dt)) if hasattr(np, "trapezoid") \
        else float(np.trapz(np.sum(jerk**2, axis=1), dx=dt))
    if integral == 0.0:
        return math.inf
    duration = float(t[-1] - t[0])
    return -math.log(duration**3 / v_max**2 * integral)


def _episodes_per_robot(episodes: Iterable) -> dict:
    out: dict = {}
    for _, a, b in episodes:
        out[a] = out.get(a, 0) + 1
        if b != "obstacle":
            out[b] = out.get(b, 0) + 1
    return out


def robot_metrics(result) -> list[RobotMetrics]:
    """Per-robot metrics for a ``simulator.RunResult``."""
    dt = result.cfg.dt
    hits = _episodes_per_robot(result.episodes)
    out = []
    trace = result.trace
    by_robot: dict = {}
    for ev in trace:
        by_robot.setdefault(ev.robot_id, []).append(ev)
    for rid in sorted(result.records):
        rec = result.records[rid]
        events = by_robot.get(rid, [])
        ticks, states = robot_series(events, rid)
        done = completion_tick(ticks, states, rec.goal, rec.radius)
        if done is not None:
            distance = distance_travelled(events, rid, rec.goal, rec.radius)
            upto = ticks <= done
        else:
            distance = path_length(states)
            upto = np.ones(len(ticks), dtype=bool)
        smooth = math.nan
        if upto.sum() >= 4 and np.any(states[upto, 2:]):
            smooth = ldj(ticks[upto] * dt, states[upto, 2:])
        out.append(RobotMetrics(
            robot_id=rid, distance=distance,
            completion_time=None if done is None else (done - rec.spawn_tick) * dt,
            ldj=smooth, collisions=hits.get(rid, 0), completed=done is not None,
        ))
    return out


def _side(point, region) -> str:
    xmin, ymin, xmax, ymax = region
    x, y = point
    gaps = {"west": x - xmin, "east": xmax - x, "south": y - ymin, "north": ymax - y}
    return min(gaps, key=gaps.get)


OPPOSITE = {"west": "east", "east": "west", "south": "north", "north": "south"}


def _inside(points, region) -> np.ndarray:
    xmin, ymin, xmax, ymax = region
    return (points[:, 0] >= xmin) & (points[:, 0] <= xmax) & (points[:, 1] >= ymin) & (points[:, 1] <= ymax)


def flowrates(trace: Sequence, region, window: int, dt: float, episodes: Iterable | None = None) -> FlowReport:
    """Entry/exit rates of ``region`` over the last ``window`` ticks of the trace.

    A crossing violates correctness when the robot leaves through any side other
    than the one opposite its entry.  Robot-robot collision episodes starting in
    the window are violations too.  With ``episodes`` (tick, a, b) the kind of each
    contact is known and wall contacts are reported separately; without it every
    contiguous run of trace collision flags counts.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if not trace:
        return FlowReport(0.0, 0.0, window, 0)
    last = max(ev.tick for ev in trace)
    start = last - window + 1
    by_robot: dict = {}
    for ev in trace:
        by_robot.setdefault(ev.robot_id, []).append(ev)
    entries = exits = wrong = flagged = 0
    for rid in sorted(by_robot):
        events = sorted(by_robot[rid], key=lambda e: e.tick)
        ticks = np.array([e.tick for e in events])
        pos = np.array([e.state[:2] for e in events])
        flags = np.array([e.collision for e in events])
        inside = _inside(pos, region)
        entry_side = None
        for i in range(1, len(events)):
            if inside[i] and not inside[i - 1]:
                entry_side = _side(pos[i - 1], region)
                entries += ticks[i] >= start
            elif inside[i - 1] and not inside[i]:
                if ticks[i] >= start:
                    exits += 1
                    if entry_side is not None and _side(pos[i], region) != OPPOSITE[entry_side]:
                        wrong += 1
        starts = np.nonzero(flags & ~np.concatenate([[False], flags[:-1]]))[0]
        flagged += int(np.count_nonzero(ticks[starts] >= start))
    walls = 0
    collisions = flagged
    if episodes is not None:
        recent = [e for e in episodes if e[0] >= start]
        walls = sum(1 for e in recent if e[2] == "obstacle")
        collisions = len(recent) - walls
    seconds = window * dt
    return FlowReport(entries / seconds, exits / seconds, window, int(wrong + collisions),
                      entries=int(entries), exits=int(exits), wrong_exits=int(wrong),
                      collisions=int(collisions), wall_contacts=int(walls))


def _finite_mean(values) -> float | None:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def encode(value):
    """JSON-safe scalar: infinities become the smoothness token, NaN becomes null."""
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return SMOOTH_TOKEN if value > 0 else "-inf"
    return value


def summarize(result) -> dict:
    """Flat summary document for one run."""
    per_robot = robot_metrics(result)
    completed = [m for m in per_robot if m.completed]
    summary = {
        "status": result.status,
        "seed": result.cfg.seed,
        "ticks": result.ticks,
        "robots": len(per_robot),
        "completed": len(completed),
        "collisions": len(result.episodes),
        "mean_distance": _finite_mean(m.distance for m in completed),
        "mean_ldj": _finite_mean(m.ldj for m in completed),
        "smooth_paths": sum(1 for m in completed if m.ldj == math.inf),
        "makespan": None,
    }
    if result.cfg.kind != "junction":
        span = max((m.completion_time for m in completed), default=None)
        summary["makespan"] = span if len(completed) == len(per_robot) else None
    if result.flow_region is not None:
        window = min(result.cfg.junction.measure_window, max(result.ticks, 1))
        flow = flowrates(result.trace, result.flow_region, window, result.cfg.dt, result.episodes)
        summary["flow"] = asdict(flow)
        summary["q_in_nominal"] = result.cfg.junction.q_in
    summary["messages_sent"] = result.diagnostics.get("messages_sent", 0)
    summary["messages_dropped"] = result.diagnostics.get("messages_dropped", 0)
    return {k: encode(v) for k, v in summary.items()}


METRIC_COLUMNS = ("robot_id", "distance", "completion_time", "ldj", "collisions", "completed")


def metrics_csv(per_robot: Sequence[RobotMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for m in per_robot:
        writer.writerow([
            m.robot_id, repr(m.distance),
            "" if m.completion_time is None else repr(m.completion_time),
            SMOOTH_TOKEN if m.ldj == math.inf else ("" if math.isnan(m.ldj) else repr(m.ldj)),
            m.collisions, int(m.completed),
        ])
    return buf.getvalue()
