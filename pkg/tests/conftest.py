"""Shared instance builders for the test suite."""

import numpy as np
import pytest

from palflow.linops import BlockOperator, LinearOperator
from palflow.problem import (NonsmoothBlock, PrimalDualState, SaddleProblem,
                             SmoothBlock)
from palflow import prox


def quadratic_equality_instance(rng, p=3, dims=(4, 3), mu=1.0, alpha=1.0,
                                duplicate_row=False, curvature=1.0,
                                e_scale=1.0, a_scale=1.0):
    """Strongly convex quadratic blocks with a pure equality constraint
    (no nonsmooth part). Returns the problem and its saddle point.

    With ``duplicate_row`` the last constraint row repeats the first, making
    the constraint map rank deficient while staying consistent.
    """
    m = sum(dims)
    Hs, cs = [], []
    for d in dims:
        A = a_scale * rng.standard_normal((d + 2, d))
        Hs.append(A.T @ A + curvature * np.eye(d))
        cs.append(rng.standard_normal(d))
    E = e_scale * rng.standard_normal((p, m))
    if duplicate_row:
        E[-1] = E[0]
    q = E @ rng.standard_normal(m)
    if duplicate_row:
        q[-1] = q[0]

    smooth = [SmoothBlock.quadratic(H, c) for H, c in zip(Hs, cs)]
    offs = np.cumsum([0] + list(dims))
    E_blocks = [LinearOperator.from_matrix(E[:, a:b])
                for a, b in zip(offs[:-1], offs[1:])]
    probm = SaddleProblem(smooth, [], BlockOperator(E_blocks),
                          BlockOperator([], p=p), q, mu=mu, alpha=alpha)

    # saddle point from the stationarity system; minimum-norm multiplier
    from scipy.linalg import block_diag
    H = block_diag(*Hs)
    c = np.concatenate(cs)
    K = np.block([[H, E.T], [E, np.zeros((p, p))]])
    rhs = np.concatenate([-c, q])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x_flat, lam = sol[:m], sol[m:]
    x = [x_flat[a:b] for a, b in zip(offs[:-1], offs[1:])]
    s_star = PrimalDualState(x, [], [], lam)
    return probm, s_star


def composite_instance(rng, p=5, x_dims=(4, 3), z_dims=(3, 2), mu=1.0,
                       alpha=1.0):
    """Random convex composite instance with l1 and group-penalty blocks and
    a consistent right-hand side."""
    smooth, E_blocks = [], []
    for d in x_dims:
        A = rng.standard_normal((d + 2, d))
        smooth.append(SmoothBlock.quadratic(A.T @ A, rng.standard_normal(d)))
        E_blocks.append(LinearOperator.from_matrix(rng.standard_normal((p, d))))
    gs = [prox.l1(0.5 + rng.random()),
          prox.group_lasso(prox.GroupPartition([np.arange(z_dims[1])],
                                               [0.5 + rng.random()]))]
    nonsmooth = [NonsmoothBlock(g, (d,)) for g, d in zip(gs, z_dims)]
    F_blocks = [LinearOperator.from_matrix(rng.standard_normal((p, d)))
                for d in z_dims]
    E = BlockOperator(E_blocks)
    F = BlockOperator(F_blocks)
    x0 = [rng.standard_normal(d) for d in x_dims]
    z0 = [rng.standard_normal(d) for d in z_dims]
    q = E.apply(x0) + F.apply(z0)
    return SaddleProblem(smooth, nonsmooth, E, F, q, mu=mu, alpha=alpha)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
