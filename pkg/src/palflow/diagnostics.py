"""Lyapunov functions, the dual function, distances, and rate fitting."""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .flow import pal_gradient, pal_value, vector_field
from .linops import LinearOperator, vec
from .problem import PrimalDualState, SaddleProblem


@dataclass
class ReferenceSolution:
    """A saddle point together with the optimal objective value."""

    state: Optional[PrimalDualState]
    optimal_value: Optional[float] = None
    meta: dict = dataclass_field(default_factory=dict)

    @classmethod
    def from_state(cls, prob: SaddleProblem, s: PrimalDualState) -> "ReferenceSolution":
        return cls(state=s, optimal_value=prob.objective(s.x, s.z))


def _diff_sq(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum((np.asarray(u) - np.asarray(v)) ** 2) for u, v in zip(a, b)))


def lyapunov_v1(prob: SaddleProblem, s: PrimalDualState, ref: ReferenceSolution,
                alpha: Optional[float] = None) -> float:
    """Quadratic distance function weighting the primal blocks by the dual
    time constant: ``(1/2)(a||x-x*||^2 + a||z-z*||^2 + ||y-y*||^2 +
    ||lam-lam*||^2)``."""
    a = prob.alpha if alpha is None else alpha
    r = ref.state
    return 0.5 * (a * _diff_sq(s.x, r.x) + a * _diff_sq(s.z, r.z)
                  + _diff_sq(s.y, r.y) + float(np.sum((s.lam - r.lam) ** 2)))


def lyapunov_v1_derivative(prob: SaddleProblem, s: PrimalDualState,
                           ref: ReferenceSolution,
                           alpha: Optional[float] = None) -> float:
    """Exact time derivative of the quadratic function along the flow,
    ``<grad V1, field>`` evaluated in closed form."""
    a = prob.alpha if alpha is None else alpha
    r = ref.state
    d = vector_field(prob, s, alpha=a)
    out = a * sum(float(np.sum((xi - ri) * di)) for xi, ri, di in zip(s.x, r.x, d.x))
    out += a * sum(float(np.sum((zi - ri) * di)) for zi, ri, di in zip(s.z, r.z, d.z))
    out += sum(float(np.sum((yi - ri) * di)) for yi, ri, di in zip(s.y, r.y, d.y))
    out += float(np.sum((s.lam - r.lam) * d.lam))
    return out


def decay_bound(prob: SaddleProblem, s: PrimalDualState, ref: ReferenceSolution,
                alpha: Optional[float] = None) -> float:
    """Negative semidefinite upper bound on the derivative of the quadratic
    function: ``-(a / max(L_f, mu)) (||grad f(x) - grad f(x*)||^2 +
    ||g_y||^2 + ||g_lam||^2)``."""
    a = prob.alpha if alpha is None else alpha
    gf = prob.f_grad(s.x)
    gf_star = prob.f_grad(ref.state.x)
    _, _, gy, glam = pal_gradient(prob, s)
    total = _diff_sq(gf, gf_star)
    total += float(sum(np.sum(np.asarray(g) ** 2) for g in gy))
    total += float(np.sum(glam ** 2))
    return -a / max(prob.L_f, prob.mu) * total


# ---------------------------------------------------------------------------
# dual function

@dataclass
class DualEval:
    value: float
    x: List[np.ndarray]
    z: List[np.ndarray]
    grad_y: List[np.ndarray]
    grad_lam: np.ndarray
    iterations: int
    grad_norm_inner: float

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([vec(g) for g in self.grad_y] + [self.grad_lam])


class DualSolveError(RuntimeError):
    pass


def dual_function(prob: SaddleProblem, y: Sequence[np.ndarray], lam: np.ndarray,
                  inner_tol: float = 1e-10, max_iters: int = 100_000,
                  x0: Optional[Sequence[np.ndarray]] = None,
                  z0: Optional[Sequence[np.ndarray]] = None) -> DualEval:
    """Minimize the proximal augmented Lagrangian over the primal variables
    at fixed ``(y, lam)``.

    Accelerated gradient with step ``1/L`` and function-value restart; the
    objective is convex and smooth, so this needs no inner prox. Fails loudly
    when the iteration cap is hit or the value drops below ``-1e12`` (dual
    function unbounded below at this point).
    """
    y = [np.asarray(a, dtype=float) for a in y]
    lam = np.asarray(lam, dtype=float)
    L = prob.lipschitz_xz()
    if L <= 0:
        L = 1.0
    step = 1.0 / L

    def make_state(x, z):
        return PrimalDualState(list(x), list(z), y, lam)

    def value_grad(x, z):
        s = make_state(x, z)
        gx, gz, _, _ = pal_gradient(prob, s)
        return pal_value(prob, s), gx, gz

    x = [np.zeros(sh) for sh in prob.x_shapes] if x0 is None else [np.array(a, dtype=float) for a in x0]
    z = [np.zeros(sh) for sh in prob.z_shapes] if z0 is None else [np.array(a, dtype=float) for a in z0]
    vx = [a.copy() for a in x]
    vz = [a.copy() for a in z]
    theta = 1.0
    f_prev = np.inf
    gnorm = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        fv, gx, gz = value_grad(vx, vz)
        gnorm = float(np.sqrt(sum(np.sum(np.asarray(g) ** 2) for g in gx + gz)))
        if gnorm <= inner_tol:
            x, z = vx, vz
            break
        x_new = [v - step * g for v, g in zip(vx, gx)]
        z_new = [v - step * g for v, g in zip(vz, gz)]
        f_new, _, _ = value_grad(x_new, z_new)
        if f_new < -1e12:
            raise DualSolveError("dual function unbounded below at this dual point")
        if f_new > f_prev:
            # function restart: drop momentum and retake a plain step
            theta = 1.0
            vx = [a.copy() for a in x]
            vz = [a.copy() for a in z]
            f_prev = np.inf
            continue
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta ** 2))
        beta = (theta - 1.0) / theta_new
        vx = [xn + beta * (xn - xo) for xn, xo in zip(x_new, x)]
        vz = [zn + beta * (zn - zo) for zn, zo in zip(z_new, z)]
        x, z, theta, f_prev = x_new, z_new, theta_new, f_new
    else:
        raise DualSolveError(
            f"inner solve failed: gradient norm {gnorm:.3g} above {inner_tol:.3g} "
            f"after {max_iters} iterations")

    s = make_state(x, z)
    val = pal_value(prob, s)
    _, _, gy, glam = pal_gradient(prob, s)
    return DualEval(value=val, x=x, z=z, grad_y=gy, grad_lam=glam,
                    iterations=it, grad_norm_inner=gnorm)


@dataclass
class DualityGaps:
    total: float
    primal_gap: float      # L(p) - d(y, lam)
    dual_gap: float        # d* - d(y, lam)
    dual_value: float


def lyapunov_v2(prob: SaddleProblem, s: PrimalDualState, ref: ReferenceSolution,
                inner_tol: float = 1e-10) -> DualityGaps:
    """Sum of the Lagrangian-vs-dual gap at the state and the dual
    suboptimality gap; the optimal dual value equals the optimal objective."""
    if ref.optimal_value is None:
        raise ValueError("reference solution must carry the optimal value")
    ev = dual_function(prob, s.y, s.lam, inner_tol=inner_tol,
                       x0=s.x, z0=s.z)
    Lp = pal_value(prob, s)
    primal_gap = Lp - ev.value
    dual_gap = ref.optimal_value - ev.value
    return DualityGaps(total=primal_gap + dual_gap, primal_gap=primal_gap,
                       dual_gap=dual_gap, dual_value=ev.value)


# ---------------------------------------------------------------------------
# distances and rate fitting

def distance_to_solution(prob: SaddleProblem, s: PrimalDualState,
                         ref: ReferenceSolution) -> float:
    """Euclidean distance to the reference saddle point, with the multiplier
    difference projected onto the range of the constraint map (the component
    in the orthogonal complement moves between equally valid multipliers)."""
    r = ref.state
    lam_diff = s.lam - r.lam
    EF = LinearOperator.from_matrix(prob._EF_dense())
    A = EF.dense()
    if A.size and np.any(A):
        U, sv, _ = np.linalg.svd(A, full_matrices=False)
        rk = int(np.sum(sv > 1e-9 * sv[0]))
        Ur = U[:, :rk]
        lam_diff = Ur @ (Ur.T @ lam_diff)
    return float(np.sqrt(_diff_sq(s.x, r.x) + _diff_sq(s.z, r.z)
                         + _diff_sq(s.y, r.y) + np.sum(lam_diff ** 2)))


@dataclass
class ExponentialFit:
    rate: float            # decay rate of the squared distance
    log_intercept: float
    r_squared: float
    n_used: int


def fit_exponential_rate(times: np.ndarray, sq_dists: np.ndarray,
                         tail_fraction: float = 0.5,
                         floor: Optional[float] = None) -> ExponentialFit:
    """Least-squares fit of ``log(sq_dist) = b - rate * t`` over the tail
    window.

    Samples at or below the floor (default ``100 * machine eps``) are
    excluded; fewer than five usable samples is an error rather than a
    meaningless fit.
    """
    times = np.asarray(times, dtype=float)
    sq_dists = np.asarray(sq_dists, dtype=float)
    if floor is None:
        floor = 100.0 * np.finfo(float).eps
    t_cut = times[0] + (1.0 - tail_fraction) * (times[-1] - times[0])
    keep = (times >= t_cut) & (sq_dists > floor)
    t, d = times[keep], sq_dists[keep]
    if len(t) < 5:
        raise ValueError("too few usable samples above the floor for a rate fit")
    logd = np.log(d)
    A = np.vstack([np.ones_like(t), -t]).T
    coef, *_ = np.linalg.lstsq(A, logd, rcond=None)
    b, rate = float(coef[0]), float(coef[1])
    pred = A @ coef
    ss_res = float(np.sum((logd - pred) ** 2))
    ss_tot = float(np.sum((logd - np.mean(logd)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ExponentialFit(rate=rate, log_intercept=b, r_squared=r2, n_used=len(t))


def envelope_violation(times: np.ndarray, sq_dists: np.ndarray,
                       M2: float, rho2: float) -> float:
    """Largest amount by which the squared distance exceeds the certified
    envelope ``M2 * sq_dist(t0) * exp(-rho2 (t - t0))``; nonpositive when the
    envelope holds everywhere."""
    times = np.asarray(times, dtype=float)
    sq_dists = np.asarray(sq_dists, dtype=float)
    bound = M2 * sq_dists[0] * np.exp(-rho2 * (times - times[0]))
    return float(np.max(sq_dists - bound))
