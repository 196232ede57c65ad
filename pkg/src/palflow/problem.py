"""Problem container, KKT residual, assumption checks, and GES certificates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .linops import (BlockOperator, LinearOperator, TOL_RANK,
                     singular_extremes, range_contained, vec, unvec)
from .prox import ProximableFunction, separable_moreau_value


class AssumptionError(RuntimeError):
    """A structural assumption required by a certificate does not hold."""


@dataclass
class SmoothBlock:
    """Convex smooth block with declared Lipschitz and strong convexity
    constants (never estimated)."""

    shape: tuple
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    lipschitz: float = 0.0
    strong_convexity: float = 0.0

    def __post_init__(self):
        self.shape = tuple(np.atleast_1d(self.shape))

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @classmethod
    def quadratic(cls, H: np.ndarray, c: Optional[np.ndarray] = None) -> "SmoothBlock":
        """``(1/2) x^T H x + c^T x`` for symmetric PSD ``H``."""
        H = np.asarray(H, dtype=float)
        c = np.zeros(H.shape[0]) if c is None else np.asarray(c, dtype=float)
        eigs = np.linalg.eigvalsh(H)
        return cls(shape=(H.shape[0],),
                   value=lambda x: 0.5 * x @ H @ x + c @ x,
                   grad=lambda x: H @ x + c,
                   lipschitz=float(eigs[-1]),
                   strong_convexity=float(max(eigs[0], 0.0)))

    @classmethod
    def least_squares(cls, M: np.ndarray, h: np.ndarray) -> "SmoothBlock":
        """``(1/2) ||M x - h||^2``."""
        M = np.asarray(M, dtype=float)
        h = np.asarray(h, dtype=float)
        s = np.linalg.svd(M, compute_uv=False)
        smin = float(s[-1]) if M.shape[0] >= M.shape[1] else 0.0
        return cls(shape=(M.shape[1],),
                   value=lambda x: 0.5 * float(np.sum((M @ x - h) ** 2)),
                   grad=lambda x: M.T @ (M @ x - h),
                   lipschitz=float(s[0]) ** 2,
                   strong_convexity=smin ** 2)


@dataclass
class NonsmoothBlock:
    g: ProximableFunction
    shape: tuple

    def __post_init__(self):
        self.shape = tuple(np.atleast_1d(self.shape))

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape, dtype=int))


@dataclass
class PrimalDualState:
    """State ``p = (x, z, y, lam)``; ``y`` mirrors the ``z`` block shapes and
    ``lam`` lives in the flat constraint space."""

    x: List[np.ndarray]
    z: List[np.ndarray]
    y: List[np.ndarray]
    lam: np.ndarray

    def copy(self) -> "PrimalDualState":
        return PrimalDualState([a.copy() for a in self.x], [a.copy() for a in self.z],
                               [a.copy() for a in self.y], self.lam.copy())


@dataclass
class SaddleProblem:
    """Instance of ``min f(x) + g(z)  s.t.  Ex + Fz = q``.

    Block operators ``E`` and ``F`` are column-partitioned conformably with
    the smooth and nonsmooth blocks; ``mu`` is the augmented Lagrangian
    penalty and ``alpha`` the dual time constant.
    """

    smooth_blocks: List[SmoothBlock]
    nonsmooth_blocks: List[NonsmoothBlock]
    E: BlockOperator
    F: BlockOperator
    q: np.ndarray
    mu: float = 1.0
    alpha: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.mu <= 0 or self.alpha <= 0:
            raise ValueError("mu and alpha must be positive")
        if self.E.p != self.F.p or self.E.p != self.q.size:
            raise ValueError("E, F, and q must share the codomain dimension")
        if [b.shape for b in self.smooth_blocks] != list(self.E.in_shapes):
            raise ValueError("E columns do not match the smooth block shapes")
        if [b.shape for b in self.nonsmooth_blocks] != list(self.F.in_shapes):
            raise ValueError("F columns do not match the nonsmooth block shapes")

    # -- dimensions -------------------------------------------------------
    @property
    def p(self) -> int:
        return self.E.p

    @property
    def m(self) -> int:
        return sum(b.dim for b in self.smooth_blocks)

    @property
    def n(self) -> int:
        return sum(b.dim for b in self.nonsmooth_blocks)

    @property
    def state_dim(self) -> int:
        return self.m + 2 * self.n + self.p

    @property
    def x_shapes(self):
        return [b.shape for b in self.smooth_blocks]

    @property
    def z_shapes(self):
        return [b.shape for b in self.nonsmooth_blocks]

    @property
    def gs(self):
        return [b.g for b in self.nonsmooth_blocks]

    # -- declared constants ----------------------------------------------
    @property
    def L_f(self) -> float:
        return max((b.lipschitz for b in self.smooth_blocks), default=0.0)

    @property
    def m_f(self) -> float:
        """Strong convexity of the strongly convex smooth part (0 if none)."""
        sc = [b.strong_convexity for b in self.smooth_blocks if b.strong_convexity > 0]
        return min(sc) if sc else 0.0

    @property
    def m_g(self) -> float:
        """Strong convexity of the strongly convex nonsmooth part (0 if none)."""
        sc = [b.g.strong_convexity for b in self.nonsmooth_blocks if b.g.strong_convexity > 0]
        return min(sc) if sc else 0.0

    def lipschitz_xz(self) -> float:
        """Upper bound on the Lipschitz constant of the primal gradient of the
        proximal augmented Lagrangian: ``L_f + (1/mu)(1 + sigma_max^2([E F]))``."""
        smax2 = singular_extremes(LinearOperator.from_matrix(self._EF_dense())).sigma_max ** 2
        return self.L_f + (1.0 + smax2) / self.mu

    # -- evaluation -------------------------------------------------------
    def f_value(self, x: Sequence[np.ndarray]) -> float:
        return sum(b.value(xi) for b, xi in zip(self.smooth_blocks, x))

    def f_grad(self, x: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [np.asarray(b.grad(xi), dtype=float) for b, xi in zip(self.smooth_blocks, x)]

    def g_value(self, z: Sequence[np.ndarray]) -> float:
        return sum(b.g(zi) for b, zi in zip(self.nonsmooth_blocks, z))

    def prox_g(self, blocks: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [b.g.prox(self.mu, v) for b, v in zip(self.nonsmooth_blocks, blocks)]

    def objective(self, x: Sequence[np.ndarray], z: Sequence[np.ndarray]) -> float:
        return self.f_value(x) + self.g_value(z)

    def constraint_residual(self, x, z) -> np.ndarray:
        return self.E.apply(list(x)) + self.F.apply(list(z)) - self.q

    # -- state packing (x blocks, z blocks, y blocks, lam; column-major) --
    def pack(self, s: PrimalDualState) -> np.ndarray:
        parts = [vec(a) for a in s.x] + [vec(a) for a in s.z] + [vec(a) for a in s.y]
        parts.append(np.asarray(s.lam, dtype=float))
        return np.concatenate(parts) if parts else np.empty(0)

    def unpack(self, flat: np.ndarray) -> PrimalDualState:
        flat = np.asarray(flat, dtype=float)
        off = 0

        def take(shape):
            nonlocal off
            d = int(np.prod(shape, dtype=int))
            out = unvec(flat[off:off + d], shape)
            off += d
            return out

        x = [take(sh) for sh in self.x_shapes]
        z = [take(sh) for sh in self.z_shapes]
        y = [take(sh) for sh in self.z_shapes]
        lam = flat[off:off + self.p]
        return PrimalDualState(x, z, y, lam)

    def zero_state(self) -> PrimalDualState:
        return PrimalDualState([np.zeros(sh) for sh in self.x_shapes],
                               [np.zeros(sh) for sh in self.z_shapes],
                               [np.zeros(sh) for sh in self.z_shapes],
                               np.zeros(self.p))

    def random_state(self, rng: np.random.Generator, scale: float = 1.0) -> PrimalDualState:
        return PrimalDualState([scale * rng.standard_normal(sh) for sh in self.x_shapes],
                               [scale * rng.standard_normal(sh) for sh in self.z_shapes],
                               [scale * rng.standard_normal(sh) for sh in self.z_shapes],
                               scale * rng.standard_normal(self.p))

    # -- assembled matrices ----------------------------------------------
    def _EF_dense(self) -> np.ndarray:
        return np.hstack([self.E.dense(), self.F.dense()])


def kkt_residual(prob: SaddleProblem, s: PrimalDualState) -> float:
    """Euclidean norm of the stacked first-order optimality violations.

    Stationarity in ``x``, the multiplier identity ``y = -F^T lam``, the prox
    form of ``y in dg(z)``, and primal feasibility; zero exactly on the
    saddle set.
    """
    r = kkt_residual_parts(prob, s)
    return float(np.sqrt(sum(np.sum(a ** 2) for a in r)))


def kkt_residual_parts(prob: SaddleProblem, s: PrimalDualState) -> List[np.ndarray]:
    Et_lam = prob.E.adjoint(s.lam)
    Ft_lam = prob.F.adjoint(s.lam)
    r1 = [g + e for g, e in zip(prob.f_grad(s.x), Et_lam)]
    r2 = [yj + f for yj, f in zip(s.y, Ft_lam)]
    prox_out = prob.prox_g([zj + prob.mu * yj for zj, yj in zip(s.z, s.y)])
    r3 = [zj - pj for zj, pj in zip(s.z, prox_out)]
    r4 = [prob.constraint_residual(s.x, s.z)]
    return [vec(a) for a in r1 + r2 + r3 + r4]


# ---------------------------------------------------------------------------
# assumption checks

class Assumption4Result(NamedTuple):
    holds: bool
    I: tuple
    J: tuple


def check_assumption4(prob: SaddleProblem) -> Assumption4Result:
    """Full column rank of ``[E_I F_J]`` assembled from the blocks whose
    declared strong convexity is zero."""
    I = tuple(i for i, b in enumerate(prob.smooth_blocks) if b.strong_convexity == 0.0)
    J = tuple(j for j, b in enumerate(prob.nonsmooth_blocks) if b.g.strong_convexity == 0.0)
    cols = [prob.E.blocks[i].dense() for i in I] + [prob.F.blocks[j].dense() for j in J]
    if not cols:
        return Assumption4Result(True, I, J)
    A = np.hstack(cols)
    if A.shape[1] > A.shape[0]:
        return Assumption4Result(False, I, J)
    s = np.linalg.svd(A, compute_uv=False)
    holds = bool(s[-1] > TOL_RANK * max(s[0], 1.0))
    return Assumption4Result(holds, I, J)


def check_assumption5(prob: SaddleProblem, tol: float = TOL_RANK) -> bool:
    """Range containment ``R(F) subseteq R(E)``."""
    return range_contained(LinearOperator.from_matrix(prob.F.dense()),
                           LinearOperator.from_matrix(prob.E.dense()), tol)


# ---------------------------------------------------------------------------
# GES certificate

@dataclass
class GesCertificate:
    m_xz: float
    alpha_bar2: float
    M2: float
    rho2: float
    c1: float
    c2: float
    c3: float
    L_xz: float
    empty_set_convention: bool = False
    notes: dict = field(default_factory=dict)


def _submatrix(prob: SaddleProblem, I: Sequence[int], J: Sequence[int]) -> np.ndarray:
    cols = [prob.E.blocks[i].dense() for i in I] + [prob.F.blocks[j].dense() for j in J]
    return np.hstack(cols) if cols else np.zeros((prob.p, 0))


def ges_certificate(prob: SaddleProblem, alpha: Optional[float] = None) -> GesCertificate:
    """Strong convexity modulus, admissible time-constant range, and the
    exponential envelope constants for a certified instance.

    Raises :class:`AssumptionError` when the required rank or range
    conditions fail or ``mu * m_g > 1``.
    """
    holds4, I, J = check_assumption4(prob)
    if not holds4:
        raise AssumptionError("assumption 4 fails: [E_I F_J] is not full column rank")
    if not check_assumption5(prob):
        raise AssumptionError("assumption 5 fails: R(F) is not contained in R(E)")
    mu = prob.mu
    m_g = prob.m_g
    if mu * m_g > 1.0 + 1e-12:
        raise AssumptionError(f"certificate requires mu * m_g <= 1 (got {mu * m_g:.3g})")
    if prob.smooth_blocks and prob.L_f == 0.0 and any(
            np.any(prob.E.blocks[i].dense()) for i in range(len(prob.smooth_blocks))):
        raise AssumptionError("L_f not declared on the smooth blocks")

    m_f = prob.m_f
    if m_f > 0 and m_g > 0:
        m_fg = min(m_f, m_g)
    else:
        m_fg = max(m_f, m_g)

    EF = prob._EF_dense()
    sEF = singular_extremes(LinearOperator.from_matrix(EF))
    empty_convention = False
    if m_fg == 0.0:
        m_xz = sEF.sigma_min ** 2 / mu
    elif not I and not J:
        # All blocks strongly convex: the submatrix formula degenerates, fall
        # back to the per-block strong convexity of the primal gradient map.
        parts = [b.strong_convexity for b in prob.smooth_blocks]
        parts += [b.g.strong_convexity / (1.0 + mu * b.g.strong_convexity)
                  for b in prob.nonsmooth_blocks]
        m_xz = min(parts)
        empty_convention = True
    else:
        Ic = [i for i in range(len(prob.smooth_blocks)) if i not in I]
        Jc = [j for j in range(len(prob.nonsmooth_blocks)) if j not in J]
        sIJ = singular_extremes(LinearOperator.from_matrix(_submatrix(prob, I, J)))
        s_comp = singular_extremes(LinearOperator.from_matrix(_submatrix(prob, Ic, Jc)))
        m_xz = m_fg * sIJ.sigma_min ** 2 / (m_fg * mu + 4.0 * s_comp.sigma_max ** 2)

    L_f = prob.L_f
    L_xz = prob.lipschitz_xz()
    c1 = (L_xz / 2.0 + 1.0) * max(1.0, mu)
    sE = singular_extremes(LinearOperator.from_matrix(prob.E.dense()))
    lam_term = 2.0 * L_f ** 2 / sE.sigma_min ** 2 if (L_f > 0 and sE.sigma_min > 0) else 0.0
    c2 = max(lam_term, 1.0 / mu ** 2)
    sF = singular_extremes(LinearOperator.from_matrix(prob.F.dense()))
    c3 = (2.0 / mu ** 2) * max(1.0, sF.sigma_max ** 2, mu ** 2 * sF.sigma_max ** 2)
    alpha_bar2 = 0.5 * m_xz ** 2 / (sEF.sigma_max ** 2 + 4.0)
    a = prob.alpha if alpha is None else alpha
    M2 = (2.0 * c1 + 1.0) / a
    rho2 = min(0.5, a, a * m_xz) / ((2.0 * c1 + 1.0) * (c2 + 1.0) * (c3 + 1.0))

    return GesCertificate(m_xz=m_xz, alpha_bar2=alpha_bar2, M2=M2, rho2=rho2,
                          c1=c1, c2=c2, c3=c3, L_xz=L_xz,
                          empty_set_convention=empty_convention,
                          notes={"I": I, "J": J, "alpha": a,
                                 "sigma_max_EF": sEF.sigma_max,
                                 "L_xz_bound": "L_f + (1 + sigma_max^2([E F])) / mu"})


# ---------------------------------------------------------------------------
# lifted representation

@dataclass
class LiftedProblem:
    """Lifted form with auxiliary variable ``w`` duplicating ``z``; solution
    sets satisfy ``{(x, z, z)}`` over the original solutions."""

    base: SaddleProblem

    @property
    def primal_dim(self) -> int:
        return self.base.m + 2 * self.base.n

    def g_value(self, w: Sequence[np.ndarray]) -> float:
        return self.base.g_value(w)

    def kkt_residual(self, x, z, w, y, lam) -> float:
        prob = self.base
        Et_lam = prob.E.adjoint(lam)
        Ft_lam = prob.F.adjoint(lam)
        r = [vec(g + e) for g, e in zip(prob.f_grad(x), Et_lam)]
        r += [vec(yj + f) for yj, f in zip(y, Ft_lam)]
        prox_out = prob.prox_g([wj + prob.mu * yj for wj, yj in zip(w, y)])
        r += [vec(wj - pj) for wj, pj in zip(w, prox_out)]
        r += [vec(zj - wj) for zj, wj in zip(z, w)]
        r.append(prob.constraint_residual(x, z))
        return float(np.sqrt(sum(np.sum(a ** 2) for a in r)))


def build_lifted(prob: SaddleProblem) -> LiftedProblem:
    return LiftedProblem(prob)


# ---------------------------------------------------------------------------
# declared-constant verification

def verify_declared_constants(prob: SaddleProblem, rng: np.random.Generator,
                              samples: int = 100, scale: float = 1.0) -> bool:
    """Sample random pairs and warn when a declared Lipschitz or strong
    convexity constant is violated. Returns True when all checks pass."""
    ok = True
    for idx, blk in enumerate(prob.smooth_blocks):
        for _ in range(samples):
            u = scale * rng.standard_normal(blk.shape)
            v = scale * rng.standard_normal(blk.shape)
            du = vec(np.asarray(blk.grad(u)) - np.asarray(blk.grad(v)))
            dv = vec(u - v)
            nv = float(np.linalg.norm(dv))
            if np.linalg.norm(du) > blk.lipschitz * nv * (1 + 1e-8):
                warnings.warn(f"smooth block {idx}: declared Lipschitz constant violated")
                ok = False
                break
            if du @ dv < blk.strong_convexity * nv ** 2 * (1 - 1e-8):
                warnings.warn(f"smooth block {idx}: declared strong convexity violated")
                ok = False
                break
    return ok
