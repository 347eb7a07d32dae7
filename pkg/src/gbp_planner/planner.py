"""Per-robot trajectory fragments and the batched GBP sweeps that plan them.

Each :class:`RobotFragment` owns its K state variables, its pose / dynamics /
obstacle factors and the inter-robot factors it has created towards each
neighbor.  A robot only ever learns about a peer through messages: the peer's
variable-to-factor messages (plus the peer's means, used for relinearization)
and the messages the peer's inter-robot factors send into this robot's
variables.  Those cross-robot messages travel through a
:class:`~gbp_planner.comm.Transport` which may drop them.

For speed the sweeps are run over all fragments at once: fragment state is
stacked into arrays, swept, and written back.  The arithmetic is identical to
``gbp.iterate`` on the equivalent graph (see ``fragment_graph``).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from . import factors as fx
from .comm import NullTransport, Transport
from .gaussian import CanonicalGaussian, batched_means, is_psd, schur_eliminate, symmetrize
from .gbp import GbpGraph

D = fx.STATE_DIM
STATIONARY, MOVING = "stationary", "moving"
RELATIVE, SHRINKING = "relative", "shrinking"


# --- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySchedule:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("a schedule needs at least two timestamps")
        if times[0] != 0.0:
            raise ValueError("schedules are relative: t_0 must be 0")
        gaps = np.diff(times)
        if np.any(gaps <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(np.diff(gaps) < -1e-9 * times[-1]):
            raise ValueError("gaps must be non-decreasing")
        object.__setattr__(self, "times", times)

    @property
    def K(self) -> int:
        return self.times.size

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @classmethod
    def geometric(cls, K: int, dt: float, horizon: float) -> TrajectorySchedule:
        """Gaps dt * rho**k summing to ``horizon``; the first planned state is one tick ahead.

        With K == 2 the single gap spans the whole horizon.
        """
        return cls(np.array(_geometric_times(int(K), float(dt), float(horizon))))


@functools.lru_cache(maxsize=4096)
def _geometric_times(K: int, dt: float, horizon: float) -> tuple:
    if K < 2:
        raise ValueError("K must be at least 2")
    if K == 2:
        return (0.0, horizon)
    n = K - 1
    ratio = horizon / dt
    if ratio < n - 1e-9:
        raise ValueError(f"horizon {horizon} s is shorter than {n} ticks of {dt} s")
    if abs(ratio - n) <= 1e-9:
        rho = 1.0
    else:
        def excess(r):
            return sum(r**k for k in range(n)) - ratio
        hi = 2.0
        while excess(hi) < 0:
            hi *= 2.0
        rho = brentq(excess, 1.0, hi, xtol=1e-15, rtol=1e-15)
    gaps = dt * rho ** np.arange(n)
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    times[-1] = horizon
    return tuple(times.tolist())


# --- fragment state -------------------------------------------------------------

def _zeros(*shape):
    return np.zeros(shape)


@dataclass
class InterRobotBlock:
    """Inter-robot factors this robot owns towards one neighbor, for states k = 1..K-2."""

    peer: int
    r_star: float
    precision: np.ndarray            # (K-2,)
    v2f_own_eta: np.ndarray          # messages from this robot's variables
    v2f_own_lam: np.ndarray
    v2f_peer_eta: np.ndarray         # last messages received from the peer's variables
    v2f_peer_lam: np.ndarray
    f2v_own_eta: np.ndarray          # messages into this robot's variables
    f2v_own_lam: np.ndarray
    f2v_peer_eta: np.ndarray         # last messages computed for the peer's variables
    f2v_peer_lam: np.ndarray
    lin_own: np.ndarray              # (K-2, 4)
    lin_peer: np.ndarray

    @classmethod
    def create(cls, peer: int, r_star: float, precision, own_means, peer_means) -> InterRobotBlock:
        n = len(precision)
        return cls(
            peer=peer, r_star=float(r_star), precision=np.asarray(precision, dtype=np.float64),
            v2f_own_eta=_zeros(n, D), v2f_own_lam=_zeros(n, D, D),
            v2f_peer_eta=_zeros(n, D), v2f_peer_lam=_zeros(n, D, D),
            f2v_own_eta=_zeros(n, D), f2v_own_lam=_zeros(n, D, D),
            f2v_peer_eta=_zeros(n, D), f2v_peer_lam=_zeros(n, D, D),
            lin_own=np.array(own_means, dtype=np.float64),
            lin_peer=np.array(peer_means, dtype=np.float64),
        )


@dataclass
class RobotFragment:
    robot_id: int
    radius: float
    goal: np.ndarray
    schedule: TrajectorySchedule
    params: fx.FactorParams
    sdf: object
    horizon_mode: str = STATIONARY
    max_speed: float = math.inf
    window_mode: str = RELATIVE
    window_floor: float = 0.0        # shortest horizon a shrinking window may reach, seconds
    current: np.ndarray = None       # anchor of x_0
    horizon: np.ndarray = None       # anchor of x_{K-1}
    means: np.ndarray = None         # (K, 4) last valid belief means
    bel_eta: np.ndarray = None
    bel_lam: np.ndarray = None
    pose_eta: np.ndarray = None      # (2, 4): messages into x_0 and x_{K-1}
    pose_lam: np.ndarray = None
    dyn_lam_f: np.ndarray = None     # (K-1, 8, 8) likelihood precision; its eta is zero
    dyn_v2f_eta: np.ndarray = None   # (K-1, 2, 4)
    dyn_v2f_lam: np.ndarray = None
    dyn_f2v_eta: np.ndarray = None
    dyn_f2v_lam: np.ndarray = None
    obs_eta: np.ndarray = None       # (K, 4)
    obs_lam: np.ndarray = None
    obs_lin: np.ndarray = None       # (K, 4)
    blocks: dict = field(default_factory=dict)        # peer id -> InterRobotBlock
    peer_inbox: dict = field(default_factory=dict)    # peer id -> (eta (K-2,4), lam (K-2,4,4))
    diagnostics: dict = field(default_factory=lambda: {"held_anchor": 0, "clamped_sdf": 0,
                                                       "rejected_messages": 0})

    @property
    def K(self) -> int:
        return self.schedule.K

    @property
    def connected(self) -> set:
        return set(self.blocks)

    @property
    def state(self) -> np.ndarray:
        return self.means[0].copy()

    @property
    def interrobot_factor_count(self) -> int:
        return len(self.blocks) * max(self.K - 2, 0)

    def factor_counts(self) -> dict:
        return {
            fx.POSE: 2,
            fx.DYNAMICS: self.K - 1,
            fx.OBSTACLE: self.K,
            fx.INTERROBOT: self.interrobot_factor_count,
        }

    def set_schedule(self, schedule: TrajectorySchedule) -> None:
        if schedule.K != self.K:
            raise ValueError("schedule length cannot change")
        self.schedule = schedule
        self.dyn_lam_f = fx.dynamics_joint_precision(schedule.gaps, self.params.sigma_d)
        for block in self.blocks.values():
            block.precision = fx.interrobot_precision(schedule.times[1:-1], self.params.sigma_r)

    def interrobot_precisions(self) -> np.ndarray:
        return fx.interrobot_precision(self.schedule.times[1:-1], self.params.sigma_r)


def build_fragment(start, goal, schedule: TrajectorySchedule, params: fx.FactorParams, sdf,
                   robot_id: int = 0, horizon_mode: str = STATIONARY, max_speed: float | None = None,
                   horizon_anchor=None, window_mode: str = RELATIVE, window_floor: float = 0.0) -> RobotFragment:
    """Fragment with straight-line initial means from start to goal at the start velocity.

    ``horizon_anchor`` defaults to the goal state (stationary horizon).  With a
    shrinking window the horizon time counts down by one tick per ``tick`` until it
    reaches ``window_floor``; a relative window keeps it fixed.
    """
    if window_mode not in (RELATIVE, SHRINKING):
        raise ValueError(f"unknown window mode {window_mode!r}")
    start = np.asarray(start.vector if isinstance(start, fx.RobotState) else start, dtype=np.float64)
    goal = np.asarray(goal.vector if isinstance(goal, fx.RobotState) else goal, dtype=np.float64)
    K = schedule.K
    frac = schedule.times / schedule.times[-1]
    means = np.empty((K, D))
    means[:, :2] = start[:2] + frac[:, None] * (goal[:2] - start[:2])
    means[:, 2:] = start[2:]
    horizon = goal.copy() if horizon_anchor is None else np.asarray(horizon_anchor, dtype=np.float64)
    frag = RobotFragment(
        robot_id=robot_id, radius=params.robot_radius, goal=goal, schedule=schedule,
        params=params, sdf=sdf, horizon_mode=horizon_mode,
        max_speed=math.inf if max_speed is None else float(max_speed),
        window_mode=window_mode, window_floor=float(window_floor),
        current=start.copy(), horizon=horizon, means=means,
        bel_eta=_zeros(K, D), bel_lam=_zeros(K, D, D),
        pose_eta=_zeros(2, D), pose_lam=_zeros(2, D, D),
        dyn_v2f_eta=_zeros(K - 1, 2, D), dyn_v2f_lam=_zeros(K - 1, 2, D, D),
        dyn_f2v_eta=_zeros(K - 1, 2, D), dyn_f2v_lam=_zeros(K - 1, 2, D, D),
        obs_eta=_zeros(K, D), obs_lam=_zeros(K, D, D), obs_lin=means.copy(),
    )
    frag.dyn_lam_f = fx.dynamics_joint_precision(schedule.gaps, params.sigma_d)
    return frag


# --- per-fragment operations ---------------------------------------------------------

def plan_state_at(frag: RobotFragment, t: float) -> np.ndarray | None:
    """Linear interpolation of belief means at relative time ``t``; None without a mean."""
    times = frag.schedule.times
    k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, frag.K - 2))
    a, b = frag.means[k], frag.means[k + 1]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return None
    w = (t - times[k]) / (times[k + 1] - times[k])
    return a + w * (b - a)


def tick(frag: RobotFragment, dt: float) -> None:
    """Advance the anchors by one simulator step."""
    if not _has_information(frag.bel_lam[1]):
        frag.diagnostics["held_anchor"] += 1
    else:
        nxt = plan_state_at(frag, dt)
        if nxt is None:
            frag.diagnostics["held_anchor"] += 1
        else:
            frag.current = nxt
    if frag.horizon_mode == MOVING:
        frag.horizon = _advance_horizon(frag.horizon, frag.goal, frag.max_speed, dt)
    if frag.window_mode == SHRINKING:
        _shrink_window(frag, dt)


def _shrink_window(frag: RobotFragment, dt: float) -> None:
    """Pull the horizon time one tick closer and resample the plan onto the new schedule.

    Messages are kept as they are; the next sweeps re-converge them on the new gaps.
    """
    old = frag.schedule
    target = max(old.horizon - dt, frag.window_floor, (frag.K - 1) * dt)
    if target >= old.horizon:
        return
    new = TrajectorySchedule.geometric(frag.K, dt, target)
    means = frag.means.copy()
    for k, t in enumerate(new.times[1:-1], start=1):
        # the new frame starts one tick later than the plan being resampled
        state = plan_state_at(frag, min(t + dt, old.horizon))
        if state is not None:
            means[k] = state
    means[0] = frag.current
    means[-1] = frag.horizon
    frag.means = means
    frag.set_schedule(new)


def _has_information(lam: np.ndarray) -> bool:
    return bool(np.any(lam)) and bool(np.linalg.eigvalsh(lam)[0] > 0)


def _advance_horizon(horizon: np.ndarray, goal: np.ndarray, max_speed: float, dt: float) -> np.ndarray:
    to_goal = goal[:2] - horizon[:2]
    dist = float(np.linalg.norm(to_goal))
    out = horizon.copy()
    if dist == 0.0:
        out[2:] = 0.0
        return out
    speed = min(max_speed, dist / dt)
    vel = to_goal / dist * speed
    out[:2] = horizon[:2] + vel * dt
    out[2:] = vel
    return out


def update_interrobot_factors(frag: RobotFragment, neighbors: set,
                              peer_fragments: Mapping[int, RobotFragment]) -> None:
    """Create factors towards new neighbors and delete those towards departed ones."""
    wanted = {j for j in neighbors if j in peer_fragments and j != frag.robot_id}
    for j in sorted(set(frag.blocks) - wanted):
        del frag.blocks[j]
        del frag.peer_inbox[j]
    if frag.K < 3:
        return
    for j in sorted(wanted - set(frag.blocks)):
        peer = peer_fragments[j]
        r_star = fx.pair_critical_distance(frag.radius, peer.radius, frag.params.epsilon)
        frag.blocks[j] = InterRobotBlock.create(
            j, r_star, frag.interrobot_precisions(), frag.means[1:-1], peer.means[1:-1])
        n = frag.K - 2
        frag.peer_inbox[j] = (_zeros(n, D), _zeros(n, D, D))


def plan_iteration(fragments: RobotFragment | Sequence[RobotFragment], m_internal: int, m_interrobot: int,
                   transport: Transport | None = None, damping: float = 0.4) -> None:
    """M_I internal sweeps, then M_R inter-robot sweeps, over every fragment given."""
    if isinstance(fragments, RobotFragment):
        fragments = [fragments]
    if m_internal < 0 or m_interrobot < 0:
        raise ValueError("iteration counts must be non-negative")
    frags = sorted(fragments, key=lambda f: f.robot_id)
    if not frags:
        return
    sweeper = FleetSweeper(frags, damping, transport or NullTransport())
    sweeper.internal(m_internal)
    sweeper.interrobot(m_interrobot)
    sweeper.write_back()


# --- batched sweeps ----------------------------------------------------------------

def _binary_messages(eta_f, lam_f, in_eta, in_lam):
    """Messages from stacked binary factors to both of their variables.

    eta_f (M, 2D), lam_f (M, 2D, 2D); in_* are the inbound variable messages
    (M, 2, D) / (M, 2, D, D).  Returns (M, 2, D), (M, 2, D, D) and the trace of
    each target's likelihood block, which sets the roundoff scale of the message.
    """
    a_sl = (slice(0, D), slice(D, 2 * D))
    eta_a, eta_b, aa, ab, bb = [], [], [], [], []
    for target in (0, 1):
        other = 1 - target
        st, so = a_sl[target], a_sl[other]
        eta_a.append(eta_f[:, st])
        eta_b.append(eta_f[:, so] + in_eta[:, other])
        aa.append(lam_f[:, st, st])
        ab.append(lam_f[:, st, so])
        bb.append(lam_f[:, so, so] + in_lam[:, other])
    aa = np.stack(aa, 1)
    out_eta, out_lam = schur_eliminate(np.stack(eta_a, 1), np.stack(eta_b, 1), aa,
                                       np.stack(ab, 1), np.stack(bb, 1))
    return out_eta, out_lam, np.trace(aa, axis1=-2, axis2=-1)


def _damp_and_guard(new_eta, new_lam, prev_eta, prev_lam, damping, scale):
    if damping > 0.0:
        new_eta = (1.0 - damping) * new_eta + damping * prev_eta
        new_lam = (1.0 - damping) * new_lam + damping * prev_lam
    ok = is_psd(new_lam, scale=scale)
    rejected = int(np.count_nonzero(~ok))
    if rejected:
        new_eta = np.where(ok[..., None], new_eta, prev_eta)
        new_lam = np.where(ok[..., None, None], new_lam, prev_lam)
    return new_eta, new_lam, rejected


class FleetSweeper:
    """Stacks fragment state, runs synchronous sweeps, and writes the state back."""

    def __init__(self, frags: list[RobotFragment], damping: float, transport: Transport):
        self.frags = frags
        self.damping = damping
        self.transport = transport
        self.rows = {f.robot_id: i for i, f in enumerate(frags)}
        K = frags[0].K
        if any(f.K != K for f in frags):
            raise ValueError("all fragments in one sweep must share K")
        self.K = K
        stack = lambda name: np.stack([getattr(f, name) for f in frags])
        self.means = stack("means")
        self.bel_eta, self.bel_lam = stack("bel_eta"), stack("bel_lam")
        self.pose_eta, self.pose_lam = stack("pose_eta"), stack("pose_lam")
        self.dyn_lam_f = stack("dyn_lam_f")
        self.dyn_v2f_eta, self.dyn_v2f_lam = stack("dyn_v2f_eta"), stack("dyn_v2f_lam")
        self.dyn_f2v_eta, self.dyn_f2v_lam = stack("dyn_f2v_eta"), stack("dyn_f2v_lam")
        self.obs_eta, self.obs_lam = stack("obs_eta"), stack("obs_lam")
        self.obs_lin = stack("obs_lin")
        self.radius = np.array([f.radius for f in frags])
        self.obs_prec = np.array([f.params.sigma_o ** -2 for f in frags])
        self.obs_radius = np.array([f.params.obstacle_radius for f in frags])
        self.pose_prec = np.array([f.params.sigma_p ** -2 for f in frags])
        self.anchors = np.stack([np.stack([f.current, f.horizon]) for f in frags])
        self.sdf = frags[0].sdf
        self.rejected = np.zeros(len(frags), dtype=int)
        self.clamped = np.zeros(len(frags), dtype=int)
        self._stack_blocks()
        self._refresh_interrobot_sum()

    # inter-robot blocks, flattened to factors ---------------------------------
    def _stack_blocks(self) -> None:
        keys = []
        for f in self.frags:
            for j in sorted(f.blocks):
                if j in self.rows:
                    keys.append((f.robot_id, j))
        self.block_keys = keys
        n = self.K - 2
        self.nb = len(keys)
        if not keys or n <= 0:
            self.nb = 0
            return
        blocks = [self.frags[self.rows[i]].blocks[j] for i, j in keys]
        cat = lambda name: np.concatenate([getattr(b, name) for b in blocks])
        self.ir_v2f_own_eta, self.ir_v2f_own_lam = cat("v2f_own_eta"), cat("v2f_own_lam")
        self.ir_v2f_peer_eta, self.ir_v2f_peer_lam = cat("v2f_peer_eta"), cat("v2f_peer_lam")
        self.ir_f2v_own_eta, self.ir_f2v_own_lam = cat("f2v_own_eta"), cat("f2v_own_lam")
        self.ir_f2v_peer_eta, self.ir_f2v_peer_lam = cat("f2v_peer_eta"), cat("f2v_peer_lam")
        self.ir_lin_own, self.ir_lin_peer = cat("lin_own"), cat("lin_peer")
        self.ir_prec = cat("precision")
        self.ir_rstar = np.repeat([b.r_star for b in blocks], n)
        # Messages delivered into the peer's variables, held by the peer.
        self.ir_inbox_eta = np.concatenate([self.frags[self.rows[j]].peer_inbox[i][0] for i, j in keys])
        self.ir_inbox_lam = np.concatenate([self.frags[self.rows[j]].peer_inbox[i][1] for i, j in keys])
        owner = np.array([self.rows[i] for i, _ in keys])
        peer = np.array([self.rows[j] for _, j in keys])
        self.ir_owner_row = np.repeat(owner, n)
        self.ir_peer_row = np.repeat(peer, n)
        self.ir_k = np.tile(np.arange(1, self.K - 1), len(keys))
        self.ir_owner_id = np.repeat([i for i, _ in keys], n)
        self.ir_peer_id = np.repeat([j for _, j in keys], n)
        # Index of the mirrored block (peer -> owner), which must exist for a symmetric neighbor relation.
        pos = {key: b for b, key in enumerate(keys)}
        self.block_owner_id = np.array([i for i, _ in keys])
        self.block_peer_id = np.array([j for _, j in keys])

    def _refresh_interrobot_sum(self) -> None:
        self.ir_sum_eta = np.zeros_like(self.bel_eta)
        self.ir_sum_lam = np.zeros_like(self.bel_lam)
        if self.nb:
            np.add.at(self.ir_sum_eta, (self.ir_owner_row, self.ir_k), self.ir_f2v_own_eta)
            np.add.at(self.ir_sum_lam, (self.ir_owner_row, self.ir_k), self.ir_f2v_own_lam)
            np.add.at(self.ir_sum_eta, (self.ir_peer_row, self.ir_k), self.ir_inbox_eta)
            np.add.at(self.ir_sum_lam, (self.ir_peer_row, self.ir_k), self.ir_inbox_lam)

    # beliefs -------------------------------------------------------------------
    def _update_beliefs(self) -> None:
        K = self.K
        eta = np.zeros_like(self.bel_eta)
        lam = np.zeros_like(self.bel_lam)
        eta[:, 0] += self.pose_eta[:, 0]
        lam[:, 0] += self.pose_lam[:, 0]
        eta[:, K - 1] += self.pose_eta[:, 1]
        lam[:, K - 1] += self.pose_lam[:, 1]
        eta[:, :K - 1] += self.dyn_f2v_eta[:, :, 0]
        lam[:, :K - 1] += self.dyn_f2v_lam[:, :, 0]
        eta[:, 1:] += self.dyn_f2v_eta[:, :, 1]
        lam[:, 1:] += self.dyn_f2v_lam[:, :, 1]
        eta += self.obs_eta
        lam += self.obs_lam
        eta += self.ir_sum_eta
        lam += self.ir_sum_lam
        self.bel_eta = eta
        self.bel_lam = symmetrize(lam)
        mu, ok = batched_means(self.bel_eta, self.bel_lam)
        self.means = np.where(ok[..., None], mu, self.means)

    # internal sweeps -------------------------------------------------------------
    def internal(self, n: int) -> None:
        if n <= 0:
            return
        K = self.K
        pose_lam = self.pose_prec[:, None, None, None] * np.eye(D)
        pose_lam = np.broadcast_to(pose_lam, (len(self.frags), 2, D, D))
        pose_eta = self.pose_prec[:, None, None] * self.anchors
        n_dyn = self.dyn_lam_f.shape[1]
        flat = lambda a: a.reshape((-1,) + a.shape[2:])
        for _ in range(n):
            # variable -> dynamics factor messages (unary factors ignore their inbound messages)
            self.dyn_v2f_eta = np.stack([self.bel_eta[:, :K - 1], self.bel_eta[:, 1:]], axis=2) - self.dyn_f2v_eta
            self.dyn_v2f_lam = symmetrize(np.stack([self.bel_lam[:, :K - 1], self.bel_lam[:, 1:]], axis=2)
                                          - self.dyn_f2v_lam)
            # pose factors
            self.pose_eta = pose_eta.copy()
            self.pose_lam = pose_lam.copy()
            # obstacle factors, relinearized at the current means
            self.obs_lin = self.means.copy()
            d, g, clamped = _sample(self.sdf, self.obs_lin[..., :2])
            self.clamped += clamped.sum(axis=1)
            h, jac = fx.obstacle_terms(d, g, self.obs_radius[:, None])
            prec = self.obs_prec[:, None]
            resid = np.einsum("nkd,nkd->nk", jac, self.obs_lin) - h
            self.obs_eta = (prec * resid)[..., None] * jac
            self.obs_lam = prec[..., None, None] * jac[..., :, None] * jac[..., None, :]
            # dynamics factors (linear, zero information vector)
            eta_f = np.zeros((len(self.frags) * n_dyn, 2 * D))
            new_eta, new_lam, scale = _binary_messages(eta_f, flat(self.dyn_lam_f),
                                                       flat(self.dyn_v2f_eta), flat(self.dyn_v2f_lam))
            new_eta, new_lam, rejected = _damp_and_guard(
                new_eta, new_lam, flat(self.dyn_f2v_eta), flat(self.dyn_f2v_lam), self.damping, scale)
            if rejected:
                self.rejected[0] += rejected
            self.dyn_f2v_eta = new_eta.reshape(self.dyn_f2v_eta.shape)
            self.dyn_f2v_lam = new_lam.reshape(self.dyn_f2v_lam.shape)
            self._update_beliefs()

    # inter-robot sweeps -------------------------------------------------------------
    def interrobot(self, n: int) -> None:
        if n <= 0 or not self.nb:
            return
        tr = self.transport
        # Receive-side delivery, constant over the tick.
        peer_to_owner = tr.delivery_mask(self.block_peer_id, self.block_owner_id)
        owner_to_peer = tr.delivery_mask(self.block_owner_id, self.block_peer_id)
        per = self.K - 2
        recv_v2f = np.repeat(peer_to_owner, per)
        recv_f2v = np.repeat(owner_to_peer, per)
        rows_o, rows_p, ks = self.ir_owner_row, self.ir_peer_row, self.ir_k
        for _ in range(n):
            tr.record(self.block_peer_id, self.block_owner_id, peer_to_owner, weight=per)
            tr.record(self.block_owner_id, self.block_peer_id, owner_to_peer, weight=per)
            # variable -> factor: own variable locally, peer variable through the transport
            self.ir_v2f_own_eta = self.bel_eta[rows_o, ks] - self.ir_f2v_own_eta
            self.ir_v2f_own_lam = symmetrize(self.bel_lam[rows_o, ks] - self.ir_f2v_own_lam)
            peer_eta = self.bel_eta[rows_p, ks] - self.ir_inbox_eta
            peer_lam = symmetrize(self.bel_lam[rows_p, ks] - self.ir_inbox_lam)
            self.ir_v2f_peer_eta = np.where(recv_v2f[:, None], peer_eta, self.ir_v2f_peer_eta)
            self.ir_v2f_peer_lam = np.where(recv_v2f[:, None, None], peer_lam, self.ir_v2f_peer_lam)
            self.ir_lin_own = self.means[rows_o, ks].copy()
            self.ir_lin_peer = np.where(recv_v2f[:, None], self.means[rows_p, ks], self.ir_lin_peer)
            # linearized likelihoods
            h, jac = fx.interrobot_terms(self.ir_lin_own[:, :2], self.ir_lin_peer[:, :2], self.ir_rstar)
            x0 = np.concatenate([self.ir_lin_own, self.ir_lin_peer], axis=1)
            resid = np.einsum("md,md->m", jac, x0) - h
            eta_f = (self.ir_prec * resid)[:, None] * jac
            lam_f = self.ir_prec[:, None, None] * jac[:, :, None] * jac[:, None, :]
            in_eta = np.stack([self.ir_v2f_own_eta, self.ir_v2f_peer_eta], axis=1)
            in_lam = np.stack([self.ir_v2f_own_lam, self.ir_v2f_peer_lam], axis=1)
            new_eta, new_lam, scale = _binary_messages(eta_f, lam_f, in_eta, in_lam)
            prev_eta = np.stack([self.ir_f2v_own_eta, self.ir_f2v_peer_eta], axis=1)
            prev_lam = np.stack([self.ir_f2v_own_lam, self.ir_f2v_peer_lam], axis=1)
            new_eta, new_lam, rejected = _damp_and_guard(new_eta, new_lam, prev_eta, prev_lam, self.damping, scale)
            if rejected:
                self.rejected[0] += rejected
            self.ir_f2v_own_eta, self.ir_f2v_peer_eta = new_eta[:, 0], new_eta[:, 1]
            self.ir_f2v_own_lam, self.ir_f2v_peer_lam = new_lam[:, 0], new_lam[:, 1]
            # factor -> peer variable through the transport; drops keep the stale inbox entry
            self.ir_inbox_eta = np.where(recv_f2v[:, None], self.ir_f2v_peer_eta, self.ir_inbox_eta)
            self.ir_inbox_lam = np.where(recv_f2v[:, None, None], self.ir_f2v_peer_lam, self.ir_inbox_lam)
            self._refresh_interrobot_sum()
            self._update_beliefs()

    # write back ----------------------------------------------------------------------
    def write_back(self) -> None:
        for r, f in enumerate(self.frags):
            f.means = self.means[r].copy()
            f.bel_eta, f.bel_lam = self.bel_eta[r].copy(), self.bel_lam[r].copy()
            f.pose_eta, f.pose_lam = self.pose_eta[r].copy(), self.pose_lam[r].copy()
            f.dyn_v2f_eta, f.dyn_v2f_lam = self.dyn_v2f_eta[r].copy(), self.dyn_v2f_lam[r].copy()
            f.dyn_f2v_eta, f.dyn_f2v_lam = self.dyn_f2v_eta[r].copy(), self.dyn_f2v_lam[r].copy()
            f.obs_eta, f.obs_lam = self.obs_eta[r].copy(), self.obs_lam[r].copy()
            f.obs_lin = self.obs_lin[r].copy()
            f.diagnostics["clamped_sdf"] += int(self.clamped[r])
        if self.rejected.any():
            self.frags[0].diagnostics["rejected_messages"] += int(self.rejected.sum())
        if not self.nb:
            return
        per = self.K - 2
        for b, (i, j) in enumerate(self.block_keys):
            sl = slice(b * per, (b + 1) * per)
            blk = self.frags[self.rows[i]].blocks[j]
            blk.v2f_own_eta, blk.v2f_own_lam = self.ir_v2f_own_eta[sl].copy(), self.ir_v2f_own_lam[sl].copy()
            blk.v2f_peer_eta, blk.v2f_peer_lam = self.ir_v2f_peer_eta[sl].copy(), self.ir_v2f_peer_lam[sl].copy()
            blk.f2v_own_eta, blk.f2v_own_lam = self.ir_f2v_own_eta[sl].copy(), self.ir_f2v_own_lam[sl].copy()
            blk.f2v_peer_eta, blk.f2v_peer_lam = self.ir_f2v_peer_eta[sl].copy(), self.ir_f2v_peer_lam[sl].copy()
            blk.lin_own, blk.lin_peer = self.ir_lin_own[sl].copy(), self.ir_lin_peer[sl].copy()
            self.frags[self.rows[j]].peer_inbox[i] = (self.ir_inbox_eta[sl].copy(), self.ir_inbox_lam[sl].copy())


def _sample(sdf, points):
    from .environment import sample_sdf
    if hasattr(sdf, "values"):
        return sample_sdf(sdf, points)
    d, g = sdf.sample(points)
    return d, g, np.zeros(np.shape(d), dtype=bool)


# --- reference graph export -----------------------------------------------------------

def fragment_graph(frags: RobotFragment | Sequence[RobotFragment], damping: float = 0.4) -> GbpGraph:
    """Equivalent generic factor graph carrying the fragments' current messages.

    Variable ids are (robot, k); factor ids are (robot, kind-rank, index[, peer]) so that
    the generic engine's ordering mirrors the fleet's.  Used as the reference for the
    batched sweeps.
    """
    if isinstance(frags, RobotFragment):
        frags = [frags]
    frags = sorted(frags, key=lambda f: f.robot_id)
    by_id = {f.robot_id: f for f in frags}
    graph = GbpGraph(damping)
    for f in frags:
        for k in range(f.K):
            v = graph.add_variable((f.robot_id, k), D, initial_mean=f.means[k])
            v.belief = CanonicalGaussian(f.bel_eta[k], f.bel_lam[k])
    for f in frags:
        r, K = f.robot_id, f.K
        for slot, (k, anchor) in enumerate(((0, f.current), (K - 1, f.horizon))):
            fid = (r, 0, slot)
            graph.add_factor(fid, [(r, k)], fx.pose_factor(anchor, f.params.sigma_p), linearization_point=f.means[k])
            graph.variables[(r, k)].inbox[fid] = CanonicalGaussian(f.pose_eta[slot], f.pose_lam[slot])
        for k, dt in enumerate(f.schedule.gaps):
            fid = (r, 1, k)
            node = graph.add_factor(fid, [(r, k), (r, k + 1)], fx.dynamics_factor(dt, f.params.sigma_d),
                                    linearization_point=np.concatenate([f.means[k], f.means[k + 1]]))
            for side, vid in enumerate(node.variables):
                graph.variables[vid].inbox[fid] = CanonicalGaussian(f.dyn_f2v_eta[k, side], f.dyn_f2v_lam[k, side])
                node.inbox[vid] = CanonicalGaussian(f.dyn_v2f_eta[k, side], f.dyn_v2f_lam[k, side])
        for k in range(K):
            fid = (r, 2, k)
            graph.add_factor(fid, [(r, k)], fx.obstacle_factor(f.sdf, f.params.obstacle_radius, f.params.sigma_o),
                             linearization_point=f.obs_lin[k])
            graph.variables[(r, k)].inbox[fid] = CanonicalGaussian(f.obs_eta[k], f.obs_lam[k])
        for j in sorted(f.blocks):
            if j not in by_id:
                continue
            blk = f.blocks[j]
            for idx, k in enumerate(range(1, K - 1)):
                fid = (r, 3, k, j)
                model = fx.interrobot_factor(f.schedule.times[k], f.params, r_star=blk.r_star)
                node = graph.add_factor(fid, [(r, k), (j, k)], model,
                                        linearization_point=np.concatenate([blk.lin_own[idx], blk.lin_peer[idx]]))
                graph.variables[(r, k)].inbox[fid] = CanonicalGaussian(blk.f2v_own_eta[idx], blk.f2v_own_lam[idx])
                graph.variables[(j, k)].inbox[fid] = CanonicalGaussian(
                    by_id[j].peer_inbox[r][0][idx], by_id[j].peer_inbox[r][1][idx])
                node.inbox[(r, k)] = CanonicalGaussian(blk.v2f_own_eta[idx], blk.v2f_own_lam[idx])
                node.inbox[(j, k)] = CanonicalGaussian(blk.v2f_peer_eta[idx], blk.v2f_peer_lam[idx])
    return graph


def internal_filter(factor) -> bool:
    return factor.kind in fx.INTERNAL_KINDS


def interrobot_filter(factor) -> bool:
    return factor.kind == fx.INTERROBOT
