"""Workspace geometry and scenario generators.

Obstacles are simple polygons (vertex lists in meters).  They are rasterized once
into an :class:`SdfGrid` holding exact signed distances at cell centers, which
robots then sample by bilinear interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .factors import RobotState

EMPTY_SENTINEL = 1e6
OBSTACLE_RING_RADIUS = 30.0
OBSTACLE_CIRCUMRADIUS = 3.0


@dataclass(frozen=True)
class SdfGrid:
    """Signed distance samples on a regular grid; value [iy, ix] sits at origin + cell*(ix, iy)."""

    origin: np.ndarray
    cell: float
    values: np.ndarray
    gradients: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d, g, _ = sample_sdf(self, points)
        return d, g


def _segment_distance(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    length2 = ex * ex + ey * ey
    if length2 == 0.0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * ex + (py - ay) * ey) / length2, 0.0, 1.0)
    return np.hypot(px - (ax + t * ex), py - (ay + t * ey))


def _inside(px, py, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing test against one polygon."""
    inside = np.zeros(np.shape(px), dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < x_cross)
    return inside


def polygon_signed_distance(points: np.ndarray, polygons) -> np.ndarray:
    """Exact signed distance from ``points`` (..., 2) to a set of polygons; negative inside."""
    points = np.asarray(points, dtype=np.float64)
    px, py = points[..., 0], points[..., 1]
    if not polygons:
        return np.full(px.shape, EMPTY_SENTINEL)
    dist = np.full(px.shape, np.inf)
    inside = np.zeros(px.shape, dtype=bool)
    for poly in polygons:
        poly = np.asarray(poly, dtype=np.float64)
        for i in range(len(poly)):
            a, b = poly[i], poly[(i + 1) % len(poly)]
            dist = np.minimum(dist, _segment_distance(px, py, a[0], a[1], b[0], b[1]))
        inside |= _inside(px, py, poly)
    return np.where(inside, -dist, dist)


def build_sdf(polygons, bounds, cell: float) -> SdfGrid:
    """Rasterize ``polygons`` over ``bounds`` = (xmin, ymin, xmax, ymax).

    Overlapping polygons are treated as a union for the sign but distances are
    measured to the nearest edge of any polygon.
    """
    if not cell > 0:
        raise ValueError("cell must be positive")
    polys = [np.asarray(p, dtype=np.float64) for p in polygons]
    for p in polys:
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
            raise ValueError("polygons must be lists of at least three 2-D vertices")
    xmin, ymin, xmax, ymax = (float(b) for b in bounds)
    nx = int(math.floor((xmax - xmin) / cell)) + 1
    ny = int(math.floor((ymax - ymin) / cell)) + 1
    xs = xmin + cell * np.arange(nx)
    ys = ymin + cell * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    values = polygon_signed_distance(np.stack([gx, gy], axis=-1), polys)
    if polys:
        grad_y, grad_x = np.gradient(values, cell)
    else:
        grad_y = grad_x = np.zeros_like(values)
    return SdfGrid(
        origin=np.array([xmin, ymin]),
        cell=float(cell),
        values=values,
        gradients=np.stack([grad_x, grad_y], axis=-1),
    )


def sample_sdf(grid: SdfGrid, p: np.ndarray):
    """Bilinear distance and gradient at ``p`` (..., 2).

    Returns (distance, gradient, clamped) where ``clamped`` flags queries that fell
    outside the grid and were moved to the boundary.
    """
    p = np.asarray(p, dtype=np.float64)
    fx = (p[..., 0] - grid.origin[0]) / grid.cell
    fy = (p[..., 1] - grid.origin[1]) / grid.cell
    w, h = grid.width, grid.height
    cx = np.clip(fx, 0.0, w - 1)
    cy = np.clip(fy, 0.0, h - 1)
    clamped = (cx != fx) | (cy != fy)
    ix = np.minimum(np.floor(cx).astype(int), max(w - 2, 0))
    iy = np.minimum(np.floor(cy).astype(int), max(h - 2, 0))
    tx = cx - ix
    ty = cy - iy
    ix1 = np.minimum(ix + 1, w - 1)
    iy1 = np.minimum(iy + 1, h - 1)
    w00 = (1 - tx) * (1 - ty)
    w10 = tx * (1 - ty)
    w01 = (1 - tx) * ty
    w11 = tx * ty
    v = grid.values
    dist = w00 * v[iy, ix] + w10 * v[iy, ix1] + w01 * v[iy1, ix] + w11 * v[iy1, ix1]
    g = grid.gradients
    grad = (w00[..., None] * g[iy, ix] + w10[..., None] * g[iy, ix1]
            + w01[..., None] * g[iy1, ix] + w11[..., None] * g[iy1, ix1])
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    grad = np.where(norm > 1.0, grad / np.where(norm > 0, norm, 1.0), grad)
    return dist, grad, clamped


def regular_polygon(center, circumradius: float, sides: int, rotation: float = 0.0) -> np.ndarray:
    angles = rotation + 2 * np.pi * np.arange(sides) / sides
    return np.asarray(center, dtype=np.float64) + circumradius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def circle_obstacles() -> list[np.ndarray]:
    """Five small pentagons on a ring of radius 30 m around the center."""
    polys = []
    for j in range(5):
        angle = math.radians(6.0 + 72.0 * j)
        center = OBSTACLE_RING_RADIUS * np.array([math.cos(angle), math.sin(angle)])
        polys.append(regular_polygon(center, OBSTACLE_CIRCUMRADIUS, 5, rotation=angle + math.pi / 5))
    return polys


def junction_walls(width: float, arm: float, thickness: float) -> list[np.ndarray]:
    """Four L-shaped walls lining the corners of a '+' shaped junction."""
    half = width / 2.0
    base = np.array([
        [half, half],
        [arm, half],
        [arm, half + thickness],
        [half + thickness, half + thickness],
        [half + thickness, arm],
        [half, arm],
    ])
    walls = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        poly = base * np.array([sx, sy])
        if sx * sy < 0:
            poly = poly[::-1]
        walls.append(poly)
    return walls


@dataclass
class RobotSpec:
    robot_id: int
    start: RobotState
    goal: RobotState
    radius: float
    spawn_tick: int = 0
    arm: str = ""


@dataclass
class InitialWorld:
    robots: list[RobotSpec]
    polygons: list[np.ndarray]
    bounds: tuple[float, float, float, float]
    sdf: SdfGrid
    spawner: "JunctionSpawner | None" = None
    flow_region: tuple[float, float, float, float] | None = None


def make_circle_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> InitialWorld:
    if cfg.kind not in ("circle", "circle_with_obstacles"):
        raise ValueError("circle scenario needs kind circle or circle_with_obstacles")
    c = cfg.circle
    robots = []
    for i in range(c.n_robots):
        theta = 2 * math.pi * i / c.n_robots
        pos = c.radius * np.array([math.cos(theta), math.sin(theta)])
        goal = -pos
        heading = (goal - pos) / np.linalg.norm(goal - pos)
        radius = float(rng.uniform(c.radius_min, c.radius_max))
        lateral = np.array([-heading[1], heading[0]]) * rng.uniform(-c.start_jitter, c.start_jitter)
        robots.append(RobotSpec(i, RobotState(pos + lateral, c.initial_speed * heading),
                                RobotState(goal, np.zeros(2)), radius))
    polygons = circle_obstacles() if cfg.kind == "circle_with_obstacles" else []
    extent = c.radius + 25.0
    bounds = (-extent, -extent, extent, extent)
    return InitialWorld(robots, polygons, bounds, build_sdf(polygons, bounds, cfg.sdf_cell))


def make_custom_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> InitialWorld:
    robots = []
    for i, spec in enumerate(cfg.custom.robots):
        robots.append(RobotSpec(
            int(spec.get("id", i)),
            RobotState.from_vector(spec["start"]),
            RobotState.from_vector(spec["goal"]),
            float(spec.get("radius", 2.0)),
        ))
    polygons = [np.asarray(p, dtype=np.float64) for p in cfg.custom.polygons]
    bounds = tuple(float(b) for b in cfg.custom.bounds)
    return InitialWorld(robots, polygons, bounds, build_sdf(polygons, bounds, cfg.sdf_cell))


ARMS = {
    # arm: (entry direction unit vector, exit side name)
    "west": (np.array([1.0, 0.0]), "east"),
    "south": (np.array([0.0, 1.0]), "north"),
}


@dataclass
class JunctionSpawner:
    """Injects robots at total rate q_in, alternating between the west and south arms.

    Spawn times are k / q_in plus seeded jitter of up to a quarter interval; a spawn
    whose entry point is blocked is retried on later ticks (counted as a deferral).
    """

    cfg: ScenarioConfig
    rng: np.random.Generator
    next_id: int = 0
    deferrals: int = 0
    spawned: int = 0
    _pending: list = field(default_factory=list)
    _scheduled: int = 0

    def _schedule_until(self, time: float) -> None:
        q = self.cfg.junction.q_in
        if q <= 0:
            return
        while True:
            k = self._scheduled
            jitter = self.rng.uniform(-0.25, 0.25)
            t = (k + 0.5 + jitter) / q
            arm = "west" if k % 2 == 0 else "south"
            offset = self.rng.uniform(-1.0, 1.0)
            self._pending.append((t, arm, offset))
            self._scheduled += 1
            if t > time:
                break

    def due(self, tick: int, occupied: list[tuple[np.ndarray, float]]) -> list[RobotSpec]:
        j = self.cfg.junction
        time = tick * self.cfg.dt
        self._schedule_until(time)
        out = []
        keep = []
        for t, arm, offset in self._pending:
            if t > time:
                keep.append((t, arm, offset))
                continue
            spec = self._make(arm, offset, tick)
            blocked = any(np.linalg.norm(spec.start.pos - pos) < spec.radius + r + self.cfg.factors.epsilon
                          for pos, r in occupied)
            if blocked:
                self.deferrals += 1
                keep.append((t, arm, offset))
                continue
            occupied = occupied + [(spec.start.pos, spec.radius)]
            out.append(spec)
            self.next_id += 1
            self.spawned += 1
        self._pending = keep
        return out

    def _make(self, arm: str, offset: float, tick: int) -> RobotSpec:
        j = self.cfg.junction
        direction, _ = ARMS[arm]
        lateral = np.array([-direction[1], direction[0]])
        usable = max(j.channel_width / 2.0 - j.robot_radius - j.wall_thickness / 2.0, 0.0)
        start = -j.arm_length * direction + offset * usable * lateral
        goal = j.arm_length * direction + offset * usable * lateral
        return RobotSpec(
            self.next_id,
            RobotState(start, j.speed * direction),
            RobotState(goal, j.speed * direction),
            j.robot_radius,
            spawn_tick=tick,
            arm=arm,
        )


def make_junction_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> InitialWorld:
    if cfg.kind != "junction":
        raise ValueError("junction scenario needs kind junction")
    j = cfg.junction
    polygons = junction_walls(j.channel_width, j.arm_length + 5.0, j.wall_thickness)
    extent = j.arm_length + 10.0
    bounds = (-extent, -extent, extent, extent)
    half = j.channel_width / 2.0
    return InitialWorld(
        robots=[],
        polygons=polygons,
        bounds=bounds,
        sdf=build_sdf(polygons, bounds, cfg.sdf_cell),
        spawner=JunctionSpawner(cfg, rng),
        flow_region=(-half, -half, half, half),
    )


def make_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> InitialWorld:
    if cfg.kind in ("circle", "circle_with_obstacles"):
        return make_circle_scenario(cfg, rng)
    if cfg.kind == "junction":
        return make_junction_scenario(cfg, rng)
    return make_custom_scenario(cfg, rng)
