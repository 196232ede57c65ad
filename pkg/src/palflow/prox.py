"""Proximal operators and Moreau envelopes for the nonsmooth blocks.

Every nonsmooth block is represented by a :class:`ProximableFunction` pairing
a value oracle with a prox oracle ``prox(mu, v) = argmin_w g(w) +
(1/2 mu) ||w - v||^2``. Moreau envelopes and their gradients are derived from
the prox, so indicator functions need no subgradient machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np


def _norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float)))


@dataclass
class GroupPartition:
    """Disjoint index groups covering ``{0..n-1}`` with per-group weights and
    an optional elementwise l1 weight."""

    groups: List[np.ndarray]
    weights: np.ndarray
    eta: float = 0.0

    def __post_init__(self):
        self.groups = [np.asarray(g, dtype=int) for g in self.groups]
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.groups):
            raise ValueError("one weight per group required")
        if np.any(self.weights <= 0):
            raise ValueError("group weights must be positive")

    @property
    def n(self) -> int:
        return sum(len(g) for g in self.groups)

    def validate_cover(self, n: int) -> None:
        seen = np.concatenate(self.groups) if self.groups else np.empty(0, dtype=int)
        if len(seen) != n or len(np.unique(seen)) != n or (len(seen) and (seen.min() < 0 or seen.max() >= n)):
            raise ValueError("groups must form a partition of the index range")

    @classmethod
    def uniform(cls, n: int, num_groups: int, weight: float = 1.0, eta: float = 0.0) -> "GroupPartition":
        if n % num_groups:
            raise ValueError("dimension must be divisible by the group count")
        w = n // num_groups
        groups = [np.arange(h * w, (h + 1) * w) for h in range(num_groups)]
        return cls(groups, np.full(num_groups, weight), eta)


@dataclass
class ProximableFunction:
    """Closed proper convex function with an explicit prox.

    ``value`` may return ``inf`` for indicator functions; ``prox`` takes the
    penalty ``mu`` first. ``strong_convexity`` is declared, not estimated.
    """

    value: Callable[[np.ndarray], float]
    prox: Callable[[float, np.ndarray], np.ndarray]
    kind: str = "custom"
    strong_convexity: float = 0.0
    meta: dict = field(default_factory=dict)

    def __call__(self, w: np.ndarray) -> float:
        return float(self.value(np.asarray(w, dtype=float)))


# ---------------------------------------------------------------------------
# elementary prox maps

def prox_l1(mu: float, v: np.ndarray) -> np.ndarray:
    """Entrywise soft threshold at level ``mu``."""
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - mu, 0.0)


def prox_group_lasso(mu: float, part: GroupPartition, v: np.ndarray) -> np.ndarray:
    """Soft threshold by ``eta * mu`` (when ``eta > 0``) followed by per-group
    block shrinkage by ``weight * mu``. Zero blocks map to zero."""
    v = np.asarray(v, dtype=float)
    part.validate_cover(v.size)
    z = prox_l1(part.eta * mu, v) if part.eta > 0 else v.copy()
    out = np.empty_like(z)
    for idx, w in zip(part.groups, part.weights):
        blk = z[idx]
        nrm = np.linalg.norm(blk)
        out[idx] = 0.0 if nrm <= w * mu else (1.0 - w * mu / nrm) * blk
    return out


def prox_nuclear(mu: float, X: np.ndarray) -> np.ndarray:
    """Singular value shrinkage via thin SVD."""
    X = np.asarray(X, dtype=float)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return (U * np.maximum(s - mu, 0.0)) @ Vt


def prox_indicator_orthant(sign: str, v: np.ndarray) -> np.ndarray:
    """Entrywise clamp onto the nonnegative or nonpositive orthant
    (mu-independent projection)."""
    v = np.asarray(v, dtype=float)
    if sign == "nonneg":
        return np.maximum(v, 0.0)
    if sign == "nonpos":
        return np.minimum(v, 0.0)
    raise ValueError("sign must be 'nonneg' or 'nonpos'")


def prox_frobenius_ball_masked(radius: float, mask: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Projection onto ``{X : ||X o mask||_F <= radius}``; entries off the
    mask pass through. When the masked part vanishes the formula's limit is
    the identity."""
    X = np.asarray(X, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if mask.shape != X.shape:
        raise ValueError("mask shape must match the input")
    masked = X * mask
    nrm = np.linalg.norm(masked)
    if nrm == 0.0:
        return X.copy()
    return X * (1.0 - mask) + min(1.0, radius / nrm) * masked


# ---------------------------------------------------------------------------
# ProximableFunction constructors

# Slack when evaluating indicator feasibility at prox outputs; projections are
# exact only up to floating point.
_INDICATOR_TOL = 1e-9


def l1(weight: float = 1.0) -> ProximableFunction:
    return ProximableFunction(
        value=lambda w: weight * float(np.sum(np.abs(w))),
        prox=lambda mu, v: prox_l1(weight * mu, v),
        kind="l1", meta={"weight": weight})


def group_lasso(part: GroupPartition) -> ProximableFunction:
    def value(w):
        w = np.asarray(w, dtype=float)
        total = part.eta * np.sum(np.abs(w))
        for idx, om in zip(part.groups, part.weights):
            total += om * np.linalg.norm(w[idx])
        return float(total)

    return ProximableFunction(
        value=value,
        prox=lambda mu, v: prox_group_lasso(mu, part, v),
        kind="group_lasso", meta={"partition": part})


def nuclear(weight: float = 1.0) -> ProximableFunction:
    return ProximableFunction(
        value=lambda W: weight * float(np.sum(np.linalg.svd(W, compute_uv=False))),
        prox=lambda mu, v: prox_nuclear(weight * mu, v),
        kind="nuclear", meta={"weight": weight})


def indicator_orthant(sign: str) -> ProximableFunction:
    def value(w):
        w = np.asarray(w, dtype=float)
        viol = np.max(-w, initial=0.0) if sign == "nonneg" else np.max(w, initial=0.0)
        scale = 1.0 + float(np.max(np.abs(w), initial=0.0))
        return 0.0 if viol <= _INDICATOR_TOL * scale else np.inf

    return ProximableFunction(
        value=value,
        prox=lambda mu, v: prox_indicator_orthant(sign, v),
        kind=f"indicator_{sign}", meta={"sign": sign})


def frobenius_ball_masked(radius: float, mask: np.ndarray) -> ProximableFunction:
    mask = np.asarray(mask, dtype=float)

    def value(W):
        nrm = np.linalg.norm(np.asarray(W, dtype=float) * mask)
        return 0.0 if nrm <= radius * (1.0 + _INDICATOR_TOL) + _INDICATOR_TOL else np.inf

    return ProximableFunction(
        value=value,
        prox=lambda mu, v: prox_frobenius_ball_masked(radius, mask, v),
        kind="frobenius_ball_masked", meta={"radius": radius, "mask": mask})


def zero() -> ProximableFunction:
    return ProximableFunction(
        value=lambda w: 0.0,
        prox=lambda mu, v: np.array(v, dtype=float, copy=True),
        kind="zero")


# ---------------------------------------------------------------------------
# Moreau envelope

def moreau_value(g: ProximableFunction, mu: float, v: np.ndarray) -> float:
    """``g(prox(v)) + (1/2 mu) ||prox(v) - v||^2``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    p = g.prox(mu, v)
    gv = g(p)
    if not np.isfinite(gv):
        raise ValueError("value oracle is infinite at the prox output; prox and value disagree")
    return gv + _norm(p - np.asarray(v, dtype=float)) ** 2 / (2.0 * mu)


def moreau_grad(g: ProximableFunction, mu: float, v: np.ndarray) -> np.ndarray:
    """``(1/mu) (v - prox(v))``; 1/mu-Lipschitz even for nondifferentiable g."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    v = np.asarray(v, dtype=float)
    return (v - g.prox(mu, v)) / mu


def separable_prox(gs: Sequence[ProximableFunction], mu: float,
                   blocks: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Blockwise prox of a separable sum; one function per block."""
    if len(gs) != len(blocks):
        raise ValueError("need exactly one function per block")
    return [g.prox(mu, b) for g, b in zip(gs, blocks)]


def separable_moreau_value(gs: Sequence[ProximableFunction], mu: float,
                           blocks: Sequence[np.ndarray]) -> float:
    if len(gs) != len(blocks):
        raise ValueError("need exactly one function per block")
    return sum(moreau_value(g, mu, b) for g, b in zip(gs, blocks))
