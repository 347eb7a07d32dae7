"""Gaussians in canonical (information) form.

A Gaussian N(mu, Sigma) is stored as the pair (eta, lam) with lam = Sigma^-1 and
eta = lam @ mu.  Products are sums, which is why every message and belief in the
planner uses this form.  The zero-information element (eta=0, lam=0) is a legal
value and acts as the identity of ``product``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Relative eigenvalue floor below which an eliminated block counts as singular.
SINGULAR_RTOL = 1e-12
JITTER_SCALE = 1e-9


class SingularBlockError(np.linalg.LinAlgError):
    """Raised when an eliminated precision block stays singular after jitter."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number {condition:.3e})")
        self.condition = condition


def symmetrize(lam: np.ndarray) -> np.ndarray:
    return 0.5 * (lam + np.swapaxes(lam, -1, -2))


@dataclass(frozen=True)
class CanonicalGaussian:
    eta: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64).reshape(-1)
        lam = np.asarray(self.lam, dtype=np.float64)
        if eta.size < 1:
            raise ValueError("CanonicalGaussian needs dim >= 1")
        if lam.shape != (eta.size, eta.size):
            raise ValueError(f"lam shape {lam.shape} does not match eta length {eta.size}")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "lam", symmetrize(lam))

    @property
    def dim(self) -> int:
        return self.eta.size

    @classmethod
    def zero(cls, dim: int) -> CanonicalGaussian:
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @classmethod
    def from_moments(cls, mean, cov) -> CanonicalGaussian:
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        lam = np.linalg.inv(cov)
        return cls(lam @ np.asarray(mean, dtype=np.float64).reshape(-1), lam)

    def is_zero(self) -> bool:
        return not (self.eta.any() or self.lam.any())

    def mean(self) -> np.ndarray:
        return mean(self)

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.lam)

    def __mul__(self, other: CanonicalGaussian) -> CanonicalGaussian:
        return product(self, other)

    def __sub__(self, other: CanonicalGaussian) -> CanonicalGaussian:
        """Information-form division: removes ``other``'s contribution."""
        _check_dims(self, other)
        return CanonicalGaussian(self.eta - other.eta, self.lam - other.lam)

    def scaled(self, weight: float) -> CanonicalGaussian:
        return CanonicalGaussian(weight * self.eta, weight * self.lam)

    def allclose(self, other: CanonicalGaussian, rtol=1e-9, atol=1e-12) -> bool:
        return (self.dim == other.dim
                and np.allclose(self.eta, other.eta, rtol=rtol, atol=atol)
                and np.allclose(self.lam, other.lam, rtol=rtol, atol=atol))


def _check_dims(a: CanonicalGaussian, b: CanonicalGaussian) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def zero_information(dim: int) -> CanonicalGaussian:
    return CanonicalGaussian.zero(dim)


def product(a: CanonicalGaussian, b: CanonicalGaussian) -> CanonicalGaussian:
    _check_dims(a, b)
    return CanonicalGaussian(a.eta + b.eta, a.lam + b.lam)


def product_all(factors: Sequence[CanonicalGaussian], dim: int) -> CanonicalGaussian:
    """Product of a sequence, summed left to right (fixed order)."""
    eta = np.zeros(dim)
    lam = np.zeros((dim, dim))
    for g in factors:
        if g.dim != dim:
            raise ValueError(f"dimension mismatch: {g.dim} vs {dim}")
        eta = eta + g.eta
        lam = lam + g.lam
    return CanonicalGaussian(eta, lam)


def mean(g: CanonicalGaussian) -> np.ndarray:
    """Solve lam @ mu = eta.  Zero-information and singular beliefs raise."""
    if not g.lam.any():
        raise np.linalg.LinAlgError("zero-information Gaussian has no mean")
    try:
        factor = np.linalg.cholesky(g.lam)
    except np.linalg.LinAlgError:
        # Indefinite by roundoff only; fall back to LU which still rejects exact singularity.
        return np.linalg.solve(g.lam, g.eta)
    y = np.linalg.solve(factor, g.eta)
    return np.linalg.solve(factor.T, y)


def _min_eig_above(block: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Per-matrix test lambda_min > floor, via one batched Cholesky when every entry passes."""
    shifted = block - floor[..., None, None] * np.eye(block.shape[-1])
    try:
        np.linalg.cholesky(shifted)
        return np.ones(block.shape[:-2], dtype=bool)
    except np.linalg.LinAlgError:
        return np.linalg.eigvalsh(symmetrize(block))[..., 0] > floor


def _singular_mask(block: np.ndarray) -> np.ndarray:
    """True where lambda_min <= SINGULAR_RTOL * trace (or the trace is not positive)."""
    trace = np.trace(block, axis1=-2, axis2=-1)
    return (trace <= 0.0) | ~_min_eig_above(block, SINGULAR_RTOL * trace)


def regularize(block: np.ndarray) -> np.ndarray:
    """Add diagonal jitter 1e-9*trace/dim to every singular matrix in a stack.

    A block with zero trace gets unit jitter; for a PSD joint a zero diagonal
    block implies zero coupling, so the value of the jitter is irrelevant there.
    """
    block = np.array(block, dtype=np.float64, copy=True)
    mask = _singular_mask(block)
    if mask.any():
        dim = block.shape[-1]
        trace = np.trace(block, axis1=-2, axis2=-1)
        jitter = np.where(trace > 0, JITTER_SCALE * trace / dim, 1.0)
        eye = np.eye(dim)
        block[mask] += jitter[mask, None, None] * eye
    return block


def schur_eliminate(eta_a, eta_b, lam_aa, lam_ab, lam_bb):
    """Eliminate block b from stacked joints; returns (eta_a', lam_aa').

    All arguments may carry leading batch axes.  Singular ``lam_bb`` entries get
    one round of jitter; anything still non-finite raises SingularBlockError.
    """
    if not np.all(np.isfinite(lam_bb)):
        raise SingularBlockError("eliminated block has non-finite entries", float("inf"))
    lam_bb = regularize(lam_bb)
    rhs = np.concatenate([np.swapaxes(lam_ab, -1, -2), eta_b[..., None]], axis=-1)
    sol = np.linalg.solve(lam_bb, rhs)
    if not np.all(np.isfinite(sol)):
        cond = float(np.max(np.linalg.cond(lam_bb)))
        raise SingularBlockError("eliminated block is singular after jitter", cond)
    na = lam_ab.shape[-2]
    lam_out = lam_aa - lam_ab @ sol[..., :na]
    eta_out = eta_a - (lam_ab @ sol[..., na:])[..., 0]
    return eta_out, symmetrize(lam_out)


def marginalize(joint: CanonicalGaussian, keep: Sequence[int]) -> CanonicalGaussian:
    """Marginal over ``keep`` (in the given order) by Schur complement."""
    keep = [int(i) for i in keep]
    if not keep:
        raise ValueError("keep must be non-empty")
    if len(set(keep)) != len(keep) or min(keep) < 0 or max(keep) >= joint.dim:
        raise ValueError(f"invalid keep indices {keep} for dim {joint.dim}")
    drop = [i for i in range(joint.dim) if i not in set(keep)]
    eta_a = joint.eta[keep]
    lam_aa = joint.lam[np.ix_(keep, keep)]
    if not drop:
        return CanonicalGaussian(eta_a, lam_aa)
    eta, lam = schur_eliminate(
        eta_a,
        joint.eta[drop],
        lam_aa,
        joint.lam[np.ix_(keep, drop)],
        joint.lam[np.ix_(drop, drop)],
    )
    return CanonicalGaussian(eta, lam)


def batched_means(eta: np.ndarray, lam: np.ndarray):
    """Means of a stack of beliefs plus a mask of which ones carry enough information.

    Entries failing the mask get a NaN mean; callers keep their previous value.
    """
    mask = ~_singular_mask(lam)
    safe = np.where(mask[..., None, None], lam, np.eye(lam.shape[-1]))
    mu = np.linalg.solve(safe, eta[..., None])[..., 0]
    mu[~mask] = np.nan
    return mu, mask


def is_psd(lam: np.ndarray, rtol: float = 1e-9, scale=None) -> np.ndarray:
    """Per-matrix test that no eigenvalue falls below -rtol * max(trace, scale).

    ``scale`` is the magnitude of the operands the matrix was computed from, so that
    cancellation noise in a message that should be zero is not mistaken for indefiniteness.
    """
    trace = np.abs(np.trace(lam, axis1=-2, axis2=-1))
    if scale is not None:
        trace = np.maximum(trace, np.abs(scale))
    ok = _min_eig_above(lam, -rtol * trace - np.finfo(np.float64).tiny)
    return ok | ~np.any(lam, axis=(-2, -1))
