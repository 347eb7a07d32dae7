"""Simulated peer-to-peer transport between robot fragments.

Neighbor discovery is purely geometric.  Failures are receive-side: each tick every
robot samples a fraction gamma of its connected neighbors whose messages it will
not hear during that tick.  Dropped messages leave the receiver's previous copy
in place; senders are never told.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

import numpy as np

from .gaussian import CanonicalGaussian


def neighbors(positions: Mapping[Hashable, np.ndarray], r_c: float) -> dict[Hashable, set]:
    """Symmetric strict-radius neighbor sets; robots never neighbor themselves."""
    ids = sorted(positions)
    out = {i: set() for i in ids}
    if len(ids) < 2:
        return out
    pts = np.array([np.asarray(positions[i], dtype=np.float64)[:2] for i in ids])
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    close = dist < r_c
    np.fill_diagonal(close, False)
    for a, b in zip(*np.nonzero(close)):
        out[ids[a]].add(ids[b])
    return out


def failure_count(n_connected: int, gamma: float) -> int:
    return int(np.floor(gamma * n_connected + 0.5))


def failure_rng(seed: int, tick: int, receiver: int) -> np.random.Generator:
    """Stream keyed only by (seed, tick, receiver) so drops do not depend on other parameters."""
    return np.random.default_rng([int(seed), int(tick), int(receiver)])


def sample_failures(connected: Iterable, gamma: float, rng: np.random.Generator) -> set:
    pool = sorted(connected)
    count = failure_count(len(pool), gamma)
    if count == 0:
        return set()
    if count >= len(pool):
        return set(pool)
    picks = rng.choice(len(pool), size=count, replace=False)
    return {pool[i] for i in sorted(picks)}


@dataclass(frozen=True)
class Envelope:
    sender: tuple          # (robot id, node id)
    receiver: tuple        # (robot id, node id)
    payload: CanonicalGaussian
    tick: int
    sweep: int
    mean: np.ndarray | None = None


def exchange(envelopes: Iterable[Envelope], failures: Mapping[Hashable, set]) -> list[Envelope]:
    """Drop envelopes whose sender the receiving robot cannot hear; order the rest."""
    delivered = [
        env for env in envelopes
        if env.sender[0] not in failures.get(env.receiver[0], ())
    ]
    delivered.sort(key=lambda e: (e.sender, e.receiver))
    return delivered


@dataclass
class TickStats:
    sent: int = 0
    dropped: int = 0
    per_robot_sent: dict = field(default_factory=dict)
    per_robot_dropped: dict = field(default_factory=dict)


class Transport:
    """Per-tick drop model shared by all inter-robot sweeps of that tick."""

    def __init__(self, gamma: float = 0.0, seed: int = 0):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.gamma = gamma
        self.seed = seed
        self.tick = 0
        self.drops: dict = {}
        self.stats = TickStats()
        self.history: list[TickStats] = []

    def begin_tick(self, tick: int, connected: Mapping[Hashable, set]) -> None:
        self.tick = tick
        self.drops = {
            robot: sample_failures(peers, self.gamma, failure_rng(self.seed, tick, robot))
            for robot, peers in sorted(connected.items())
        }
        self.stats = TickStats()
        self.history.append(self.stats)

    def delivery_mask(self, senders: np.ndarray, receivers: np.ndarray) -> np.ndarray:
        """Vectorized ``exchange``: True where the receiver hears the sender this tick."""
        senders = np.asarray(senders)
        receivers = np.asarray(receivers)
        if not any(self.drops.values()):
            return np.ones(senders.shape, dtype=bool)
        ok = np.ones(senders.shape, dtype=bool)
        for idx, (s, r) in enumerate(zip(senders.tolist(), receivers.tolist())):
            ok[idx] = s not in self.drops.get(r, ())
        return ok

    def record(self, senders: np.ndarray, receivers: np.ndarray, delivered: np.ndarray, weight: int = 1) -> None:
        self.stats.sent += int(len(senders)) * weight
        self.stats.dropped += int(np.count_nonzero(~delivered)) * weight
        for s, r, ok in zip(np.asarray(senders).tolist(), np.asarray(receivers).tolist(), delivered.tolist()):
            self.stats.per_robot_sent[s] = self.stats.per_robot_sent.get(s, 0) + weight
            if not ok:
                self.stats.per_robot_dropped[r] = self.stats.per_robot_dropped.get(r, 0) + weight


class NullTransport(Transport):
    """Shares fragments directly: never drops and keeps no drop state."""

    def __init__(self):
        super().__init__(gamma=0.0, seed=0)

    def begin_tick(self, tick: int, connected: Mapping[Hashable, set]) -> None:
        self.tick = tick
        self.drops = {}
        self.stats = TickStats()
        self.history.append(self.stats)
