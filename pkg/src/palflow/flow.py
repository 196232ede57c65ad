"""Proximal augmented Lagrangian, its gradient field, and ODE integration."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .linops import vec
from .problem import PrimalDualState, SaddleProblem, kkt_residual
from .prox import moreau_value


class FlowError(RuntimeError):
    pass


def _sumsq(blocks: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(np.asarray(b) ** 2) for b in blocks))


def pal_value(prob: SaddleProblem, s: PrimalDualState) -> float:
    """Value of the proximal augmented Lagrangian at the state."""
    mu = prob.mu
    shifted = [zj + mu * yj for zj, yj in zip(s.z, s.y)]
    envelope = sum(moreau_value(b.g, mu, v) for b, v in zip(prob.nonsmooth_blocks, shifted))
    r = prob.constraint_residual(s.x, s.z)
    return (prob.f_value(s.x) + envelope
            + np.sum((r + mu * s.lam) ** 2) / (2.0 * mu)
            - 0.5 * mu * _sumsq(s.y) - 0.5 * mu * float(np.sum(s.lam ** 2)))


def pal_gradient(prob: SaddleProblem, s: PrimalDualState):
    """Partial gradients ``(gx, gz, gy, glam)`` of the proximal augmented
    Lagrangian; ``gx``, ``gz``, ``gy`` are block lists, ``glam`` is flat."""
    mu = prob.mu
    r = prob.constraint_residual(s.x, s.z)
    shift = s.lam + r / mu
    Et = prob.E.adjoint(shift)
    Ft = prob.F.adjoint(shift)
    prox_out = prob.prox_g([zj + mu * yj for zj, yj in zip(s.z, s.y)])
    gx = [g + e for g, e in zip(prob.f_grad(s.x), Et)]
    gz = [(zj + mu * yj - pj) / mu + f
          for zj, yj, pj, f in zip(s.z, s.y, prox_out, Ft)]
    gy = [zj - pj for zj, pj in zip(s.z, prox_out)]
    return gx, gz, gy, r


def vector_field(prob: SaddleProblem, s: PrimalDualState,
                 alpha: Optional[float] = None) -> PrimalDualState:
    """Primal-descent dual-ascent field ``(-gx, -gz, a*gy, a*glam)``."""
    a = prob.alpha if alpha is None else alpha
    gx, gz, gy, glam = pal_gradient(prob, s)
    return PrimalDualState([-g for g in gx], [-g for g in gz],
                           [a * g for g in gy], a * glam)


def blockwise_field(prob: SaddleProblem, s: PrimalDualState,
                    alpha: Optional[float] = None) -> PrimalDualState:
    """Per-block form of the field: the multiplier derivative first, then the
    dual blocks, then the primal blocks reusing those derivatives."""
    a = prob.alpha if alpha is None else alpha
    mu = prob.mu
    lam_dot = a * prob.constraint_residual(s.x, s.z)
    shift = s.lam + lam_dot / (a * mu)
    Et = prob.E.adjoint(shift)
    Ft = prob.F.adjoint(shift)
    prox_out = prob.prox_g([zj + mu * yj for zj, yj in zip(s.z, s.y)])
    y_dot = [a * (zj - pj) for zj, pj in zip(s.z, prox_out)]
    z_dot = [-(yj + yd / (a * mu)) - f for yj, yd, f in zip(s.y, y_dot, Ft)]
    x_dot = [-g - e for g, e in zip(prob.f_grad(s.x), Et)]
    return PrimalDualState(x_dot, z_dot, y_dot, lam_dot)


class FlowField:
    """Flat-state ODE right-hand side for a problem, with a one-entry cache
    of the last evaluated state so diagnostics can reuse the constraint
    residual and prox output. Single-threaded by design."""

    def __init__(self, prob: SaddleProblem, alpha: Optional[float] = None):
        self.prob = prob
        self.alpha = prob.alpha if alpha is None else alpha
        self._cache_key: Optional[np.ndarray] = None
        self._cache_val: Optional[Tuple[np.ndarray, list]] = None
        self.n_evals = 0

    def residual_and_prox(self, flat: np.ndarray):
        if self._cache_key is not None and np.array_equal(flat, self._cache_key):
            return self._cache_val
        s = self.prob.unpack(flat)
        r = self.prob.constraint_residual(s.x, s.z)
        prox_out = self.prob.prox_g(
            [zj + self.prob.mu * yj for zj, yj in zip(s.z, s.y)])
        self._cache_key = flat.copy()
        self._cache_val = (r, prox_out)
        return self._cache_val

    def __call__(self, t: float, flat: np.ndarray) -> np.ndarray:
        self.n_evals += 1
        prob, a, mu = self.prob, self.alpha, self.prob.mu
        s = prob.unpack(flat)
        r, prox_out = self.residual_and_prox(flat)
        shift = s.lam + r / mu
        Et = prob.E.adjoint(shift)
        Ft = prob.F.adjoint(shift)
        x_dot = [-g - e for g, e in zip(prob.f_grad(s.x), Et)]
        z_dot = [-(zj + mu * yj - pj) / mu - f
                 for zj, yj, pj, f in zip(s.z, s.y, prox_out, Ft)]
        y_dot = [a * (zj - pj) for zj, pj in zip(s.z, prox_out)]
        return prob.pack(PrimalDualState(x_dot, z_dot, y_dot, a * r))


@dataclass
class IntegratorConfig:
    method: str = "rk45"            # euler | rk4 | rk45
    h: Optional[float] = None       # fixed-step size
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    t_end: float = 10.0
    stop_kkt: Optional[float] = None
    max_steps: int = 10_000_000
    record_stride: int = 1

    def __post_init__(self):
        if self.method not in ("euler", "rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in ("euler", "rk4") and (self.h is None or self.h <= 0):
            raise ValueError("fixed-step methods need a positive step h")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Trajectory:
    """Time-stamped state sequence with per-sample diagnostics."""

    times: np.ndarray
    states: np.ndarray              # shape (len(times), state_dim), packing order
    diagnostics: dict
    termination: str
    problem: Optional[SaddleProblem] = None
    meta: dict = field(default_factory=dict)

    def state(self, i: int) -> PrimalDualState:
        return self.problem.unpack(self.states[i])

    def final_state(self) -> PrimalDualState:
        return self.state(len(self.times) - 1)

    def to_csv(self, path, extra_columns: Optional[dict] = None) -> None:
        cols = {"t": self.times}
        cols.update(self.diagnostics)
        if extra_columns:
            cols.update(extra_columns)
        names = list(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for i in range(len(self.times)):
                w.writerow([f"{cols[c][i]:.17g}" for c in names])

    def states_to_binary(self, path) -> None:
        """Full state snapshots as little-endian float64 in packing order."""
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())


def _diagnostics(prob: SaddleProblem, ff: FlowField, times, states):
    kkt = np.empty(len(times))
    fieldnorm = np.empty(len(times))
    for i, flat in enumerate(states):
        kkt[i] = kkt_residual(prob, prob.unpack(flat))
        fieldnorm[i] = float(np.linalg.norm(ff(0.0, flat)))
    return {"kkt_residual": kkt, "field_norm": fieldnorm}


def integrate_ode(fun: Callable, y0: np.ndarray, cfg: IntegratorConfig,
                  events: Optional[list] = None, t0: float = 0.0):
    """Integrate a generic flat ODE with the configured method.

    Returns ``(times, states, termination, t_events)``. The adaptive method
    is Dormand-Prince 4(5) with error-controlled step rejection and dense
    event location; fixed-step methods are forward Euler and classic RK4.
    """
    y0 = np.asarray(y0, dtype=float)
    if cfg.method == "rk45":
        sol = solve_ivp(fun, (t0, cfg.t_end), y0, method="RK45",
                        rtol=cfg.rel_tol, atol=cfg.abs_tol, events=events,
                        dense_output=False)
        if not sol.success and sol.status == -1:
            raise FlowError(f"stiff/failed: {sol.message}")
        if not np.all(np.isfinite(sol.y)):
            raise FlowError("non-finite state encountered")
        term = "event" if sol.status == 1 else "t_end"
        return sol.t, sol.y.T, term, (sol.t_events if events else None)

    h = cfg.h
    n_steps = int(np.ceil((cfg.t_end - t0) / h))
    if n_steps > cfg.max_steps:
        n_steps = cfg.max_steps
    times = [t0]
    states = [y0.copy()]
    y = y0.copy()
    t = t0
    term = "t_end"
    for k in range(n_steps):
        if cfg.method == "euler":
            y = y + h * fun(t, y)
        else:  # rk4
            k1 = fun(t, y)
            k2 = fun(t + h / 2, y + h / 2 * k1)
            k3 = fun(t + h / 2, y + h / 2 * k2)
            k4 = fun(t + h, y + h * k3)
            y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (k + 1) * h
        if not np.all(np.isfinite(y)):
            raise FlowError("non-finite state encountered")
        if (k + 1) % cfg.record_stride == 0 or k == n_steps - 1:
            times.append(t)
            states.append(y.copy())
        if events:
            hit = [ev(t, y) <= 0 for ev in events]
            if any(hit):
                term = "event"
                break
    return np.asarray(times), np.asarray(states), term, None


def integrate(prob: SaddleProblem, s0: PrimalDualState, cfg: IntegratorConfig,
              alpha: Optional[float] = None) -> Trajectory:
    """Integrate the primal-dual flow from ``s0``.

    Termination on ``t_end``, on ``stop_kkt`` (residual event located by the
    adaptive integrator), or on ``max_steps``; the reason is recorded.
    """
    ff = FlowField(prob, alpha)
    y0 = prob.pack(s0)

    events = None
    if cfg.stop_kkt is not None:
        def kkt_event(t, y):
            return kkt_residual(prob, prob.unpack(y)) - cfg.stop_kkt
        kkt_event.terminal = True
        kkt_event.direction = -1
        events = [kkt_event]

    if cfg.method == "rk45":
        times, states, term, _ = integrate_ode(ff, y0, cfg, events=events)
        if term == "event":
            term = "stop_kkt"
        if cfg.record_stride > 1:
            keep = np.unique(np.r_[np.arange(0, len(times), cfg.record_stride),
                                   len(times) - 1])
            times, states = times[keep], states[keep]
    else:
        ev = None
        if cfg.stop_kkt is not None:
            ev = [lambda t, y: kkt_residual(prob, prob.unpack(y)) - cfg.stop_kkt]
        times, states, term, _ = integrate_ode(ff, y0, cfg, events=ev)
        if term == "event":
            term = "stop_kkt"

    diag = _diagnostics(prob, ff, times, states)
    return Trajectory(times=np.asarray(times), states=np.asarray(states),
                      diagnostics=diag, termination=term, problem=prob,
                      meta={"method": cfg.method, "alpha": ff.alpha,
                            "packing": "x-blocks, z-blocks, y-blocks, lam (column-major)",
                            "n_evals": ff.n_evals})
