"""Loopy Gaussian belief propagation on a generic factor graph.

Nodes are plain objects holding canonical-form messages.  ``iterate`` runs
synchronous sweeps in a fixed order (ascending variable id, then ascending factor
id), so results are reproducible bit for bit.  The fleet planner uses a batched
re-implementation of the same sweep; this module is the readable reference and
the engine for arbitrary graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable

import numpy as np

from .factors import FactorDefinition
from .gaussian import CanonicalGaussian, is_psd, marginalize, product_all

DEFAULT_DAMPING = 0.4


class FactorEvaluationError(ValueError):
    pass


@dataclass
class VariableNode:
    id: Hashable
    dim: int
    prior: CanonicalGaussian | None = None
    belief: CanonicalGaussian | None = None
    inbox: dict = field(default_factory=dict)  # factor id -> message m_{f->k}
    last_mean: np.ndarray | None = None

    def __post_init__(self):
        if self.belief is None:
            self.belief = CanonicalGaussian.zero(self.dim)

    def mean(self) -> np.ndarray | None:
        """Belief mean, or None while the belief carries too little information."""
        if not self.belief.lam.any():
            return None
        try:
            mu = self.belief.mean()
        except np.linalg.LinAlgError:
            return None
        return mu if np.all(np.isfinite(mu)) else None


@dataclass
class FactorNode:
    id: Hashable
    variables: list
    model: FactorDefinition
    linearization_point: np.ndarray
    inbox: dict = field(default_factory=dict)  # variable id -> message m_{x->f}

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def z(self) -> np.ndarray:
        return self.model.z

    @property
    def meas_precision(self) -> np.ndarray:
        return self.model.meas_precision

    def slices(self) -> list[slice]:
        out, start = [], 0
        for d in self.model.dims:
            out.append(slice(start, start + d))
            start += d
        return out


class GbpGraph:
    def __init__(self, damping: float = DEFAULT_DAMPING):
        if not 0.0 <= damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        self.variables: dict = {}
        self.factors: dict = {}
        self.damping = damping

    def add_variable(self, vid, dim: int, prior: CanonicalGaussian | None = None,
                     initial_mean=None) -> VariableNode:
        if vid in self.variables:
            raise KeyError(f"variable {vid!r} already exists")
        node = VariableNode(vid, dim, prior)
        if initial_mean is not None:
            node.last_mean = np.asarray(initial_mean, dtype=np.float64)
        if prior is not None:
            node.belief = prior
        self.variables[vid] = node
        return node

    def add_factor(self, fid, variable_ids: Iterable, model: FactorDefinition,
                   linearization_point=None) -> FactorNode:
        if fid in self.factors:
            raise KeyError(f"factor {fid!r} already exists")
        variable_ids = list(variable_ids)
        if len(variable_ids) != len(model.dims):
            raise ValueError("factor arity does not match its model")
        for vid, d in zip(variable_ids, model.dims):
            if self.variables[vid].dim != d:
                raise ValueError(f"variable {vid!r} has dim {self.variables[vid].dim}, factor expects {d}")
        if linearization_point is None:
            parts = []
            for vid in variable_ids:
                v = self.variables[vid]
                parts.append(v.last_mean if v.last_mean is not None else np.zeros(v.dim))
            linearization_point = np.concatenate(parts)
        node = FactorNode(fid, variable_ids, model, np.asarray(linearization_point, dtype=np.float64))
        for vid in variable_ids:
            node.inbox[vid] = CanonicalGaussian.zero(self.variables[vid].dim)
            self.variables[vid].inbox[fid] = CanonicalGaussian.zero(self.variables[vid].dim)
        self.factors[fid] = node
        return node

    def remove_factor(self, fid) -> None:
        node = self.factors.pop(fid)
        for vid in node.variables:
            self.variables[vid].inbox.pop(fid, None)

    def validate(self) -> None:
        for f in self.factors.values():
            for vid in f.variables:
                if vid not in self.variables or f.id not in self.variables[vid].inbox:
                    raise ValueError(f"factor {f.id!r} references unknown edge to {vid!r}")
            if f.linearization_point.size != sum(f.model.dims):
                raise ValueError(f"factor {f.id!r} linearization point has wrong length")
        for v in self.variables.values():
            for fid in v.inbox:
                if fid not in self.factors:
                    raise ValueError(f"variable {v.id!r} has inbox slot for unknown factor {fid!r}")

    def means(self) -> dict:
        return {vid: v.mean() for vid, v in sorted(self.variables.items())}


# --- the four update rules ---------------------------------------------------

def variable_belief_update(v: VariableNode) -> CanonicalGaussian:
    messages = [v.prior] if v.prior is not None else []
    messages += [v.inbox[fid] for fid in sorted(v.inbox)]
    v.belief = product_all(messages, v.dim)
    return v.belief


def variable_to_factor_message(v: VariableNode, fid) -> CanonicalGaussian:
    """Belief with the factor's own message divided out (subtraction form)."""
    return v.belief - v.inbox[fid]


def factor_likelihood(f: FactorNode, h_eval: Callable | None = None) -> CanonicalGaussian:
    """Linearized likelihood at ``f.linearization_point``.

    ``h_eval`` may override the model and must return (h(X0), J(X0)).
    """
    x0 = f.linearization_point
    if h_eval is None:
        h, jac = f.model.h(x0), f.model.jacobian(x0)
    else:
        h, jac = h_eval(x0)
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    jac = np.atleast_2d(np.asarray(jac, dtype=np.float64))
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(jac))):
        raise FactorEvaluationError(f"non-finite measurement or Jacobian in factor {f.id!r}")
    lam_s = f.meas_precision
    jt_lam = jac.T @ lam_s
    eta = jt_lam @ (jac @ x0 + f.z - h)
    return CanonicalGaussian(eta, jt_lam @ jac)


def factor_to_variable_message(f: FactorNode, k, damping: float = 0.0,
                               previous: CanonicalGaussian | None = None,
                               likelihood: CanonicalGaussian | None = None) -> CanonicalGaussian:
    """Message from ``f`` to variable ``k``.

    Unary factors return their likelihood unchanged.  Multi-variable factors add
    the other variables' inbound messages, marginalize onto ``k`` and blend with
    ``previous`` by ``damping``.  A result with a negative eigenvalue is rejected
    in favour of ``previous``.
    """
    if k not in f.variables:
        raise KeyError(f"variable {k!r} is not attached to factor {f.id!r}")
    lik = factor_likelihood(f) if likelihood is None else likelihood
    if len(f.variables) == 1:
        return lik
    eta = lik.eta.copy()
    lam = lik.lam.copy()
    keep = None
    for vid, sl in zip(f.variables, f.slices()):
        if vid == k:
            keep = range(sl.start, sl.stop)
            continue
        msg = f.inbox[vid]
        eta[sl] += msg.eta
        lam[sl, sl] += msg.lam
    new = marginalize(CanonicalGaussian(eta, lam), list(keep))
    if previous is not None and damping > 0.0:
        new = CanonicalGaussian((1.0 - damping) * new.eta + damping * previous.eta,
                                (1.0 - damping) * new.lam + damping * previous.lam)
    if previous is not None:
        block = list(keep)
        if not is_psd(new.lam, scale=np.trace(lik.lam[np.ix_(block, block)])):
            return previous
    return new


def _relinearize(graph: GbpGraph, f: FactorNode) -> None:
    if f.model.linear:
        return
    parts = []
    for vid, sl in zip(f.variables, f.slices()):
        v = graph.variables[vid]
        mu = v.mean()
        parts.append(mu if mu is not None else f.linearization_point[sl])
    f.linearization_point = np.concatenate(parts)


def iterate(graph: GbpGraph, n: int, factor_filter: Callable[[FactorNode], bool] | None = None) -> None:
    """Run ``n`` synchronous sweeps over the factors accepted by ``factor_filter``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    accept = factor_filter or (lambda f: True)
    for _ in range(n):
        active = [graph.factors[fid] for fid in sorted(graph.factors) if accept(graph.factors[fid])]
        active_ids = {f.id for f in active}
        for vid in sorted(graph.variables):
            v = graph.variables[vid]
            for fid in sorted(v.inbox):
                if fid in active_ids:
                    graph.factors[fid].inbox[vid] = variable_to_factor_message(v, fid)
        for f in active:
            _relinearize(graph, f)
            lik = factor_likelihood(f)
            for vid in f.variables:
                v = graph.variables[vid]
                v.inbox[f.id] = factor_to_variable_message(
                    f, vid, graph.damping, previous=v.inbox[f.id], likelihood=lik)
        for vid in sorted(graph.variables):
            variable_belief_update(graph.variables[vid])


def dense_information(graph: GbpGraph):
    """Joint (eta, lam) of all linearized factors and priors; variables in sorted id order."""
    order = sorted(graph.variables)
    offsets, total = {}, 0
    for vid in order:
        offsets[vid] = total
        total += graph.variables[vid].dim
    eta = np.zeros(total)
    lam = np.zeros((total, total))
    for vid in order:
        v = graph.variables[vid]
        if v.prior is not None:
            o = offsets[vid]
            eta[o:o + v.dim] += v.prior.eta
            lam[o:o + v.dim, o:o + v.dim] += v.prior.lam
    for fid in sorted(graph.factors):
        f = graph.factors[fid]
        lik = factor_likelihood(f)
        idx = np.concatenate([np.arange(offsets[vid], offsets[vid] + graph.variables[vid].dim)
                              for vid in f.variables])
        eta[idx] += lik.eta
        lam[np.ix_(idx, idx)] += lik.lam
    return order, offsets, eta, lam
