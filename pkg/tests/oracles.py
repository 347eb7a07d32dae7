"""Independent reference computations used by the unit and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gbp_planner import factors as fx
from gbp_planner.factors import FactorDefinition
from gbp_planner.gaussian import CanonicalGaussian
from gbp_planner.gbp import GbpGraph


@dataclass
class LinearFactor:
    variables: list
    jac: np.ndarray      # (m, sum of dims)
    z: np.ndarray
    precision: np.ndarray


def _linear_model(jac, z, precision, dims):
    jac = np.array(jac)
    return FactorDefinition(kind="linear", dims=tuple(dims), z=np.array(z), meas_precision=np.array(precision),
                            h=lambda x: jac @ x, jacobian=lambda x: jac.copy())


def random_linear_problem(rng: np.random.Generator, n: int, loops: int = 0):
    """Random tree (plus ``loops`` extra edges) of 1-2 dim variables with weak unary anchors."""
    dims = {i: int(rng.integers(1, 3)) for i in range(n)}
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    while loops > 0 and n > 2:
        a, b = sorted(rng.choice(n, size=2, replace=False).tolist())
        if (a, b) not in edges:
            edges.append((a, b))
            loops -= 1
    factors = []
    for i in range(n):
        m = dims[i]
        factors.append(LinearFactor([i], np.eye(m), rng.normal(size=m), np.eye(m) * rng.uniform(0.5, 2.0)))
    for a, b in edges:
        m = int(rng.integers(1, 3))
        jac = rng.normal(size=(m, dims[a] + dims[b])) * 0.5
        factors.append(LinearFactor([a, b], jac, rng.normal(size=m), np.eye(m) * rng.uniform(0.5, 2.0)))
    return dims, factors


def build_graph(dims, factors, damping: float) -> GbpGraph:
    g = GbpGraph(damping=damping)
    for vid, d in dims.items():
        g.add_variable(vid, d, initial_mean=np.zeros(d))
    for fid, f in enumerate(factors):
        g.add_factor(fid, f.variables, _linear_model(f.jac, f.z, f.precision, [dims[v] for v in f.variables]))
    return g


def dense_map(dims, factors) -> dict:
    """Normal-equations solve of the joint least-squares problem."""
    offsets, total = {}, 0
    for vid in sorted(dims):
        offsets[vid] = total
        total += dims[vid]
    a = np.zeros((total, total))
    b = np.zeros(total)
    for f in factors:
        idx = np.concatenate([np.arange(offsets[v], offsets[v] + dims[v]) for v in f.variables])
        a[np.ix_(idx, idx)] += f.jac.T @ f.precision @ f.jac
        b[idx] += f.jac.T @ f.precision @ f.z
    x = np.linalg.solve(a, b)
    return {vid: x[offsets[vid]:offsets[vid] + dims[vid]] for vid in dims}


def central_jacobian(h, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.atleast_1d(h(x + e)) - np.atleast_1d(h(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass
class DiscField:
    """Exact signed distance to a disc obstacle."""

    center: np.ndarray
    radius: float

    def sample(self, points):
        diff = np.asarray(points, dtype=np.float64) - self.center
        dist = np.linalg.norm(diff, axis=-1)
        return dist - self.radius, diff / dist[..., None]


def moments(g: CanonicalGaussian):
    cov = np.linalg.inv(g.lam)
    return cov @ g.eta, cov


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def _check_jacobians(model, points):
    worst = 0.0
    for x in points:
        worst = max(worst, rel_err(np.atleast_2d(model.jacobian(x)), central_jacobian(model.h, x)))
    return worst


def jacobian_errors(rng, n=100):
    """Largest relative Jacobian error per factor kind over ``n`` random points."""
    params = fx.FactorParams(robot_radius=2.0, epsilon=0.2)
    out = {}
    out["pose"] = _check_jacobians(fx.pose_factor(rng.normal(size=4), 0.1), rng.normal(size=(n, 4)) * 10)
    out["dynamics"] = _check_jacobians(fx.dynamics_factor(0.7, 1.0), rng.normal(size=(n, 8)) * 10)
    field = DiscField(np.array([0.0, 0.0]), 3.0)
    pts = []
    while len(pts) < n:
        # stay clear of the kink at d = r_R and of the disc centre
        ang, d = rng.uniform(0, 2 * np.pi), rng.uniform(0.05, 1.95)
        p = (3.0 + d) * np.array([np.cos(ang), np.sin(ang)])
        pts.append(np.concatenate([p, rng.normal(size=2)]))
    out["obstacle"] = _check_jacobians(fx.obstacle_factor(field, 2.0, 0.005), pts)
    pts = []
    while len(pts) < n:
        a = rng.uniform(-3, 3, size=2)
        ang, d = rng.uniform(0, 2 * np.pi), rng.uniform(0.1, params.critical_distance - 0.05)
        b = a + d * np.array([np.cos(ang), np.sin(ang)])
        pts.append(np.concatenate([a, rng.normal(size=2), b, rng.normal(size=2)]))
    out["interrobot"] = _check_jacobians(fx.interrobot_factor(1.5, params), pts)
    return out
