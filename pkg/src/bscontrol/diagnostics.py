"""Machine-checkable diagnostics: duality, convergence orders, gradients.

These are the CLI's `diagnose` suites and double as the backbone of the
acceptance tests.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import (BulkSurfaceField, SpaceTimeField, build_grid,
                       build_time_grid, grad_faces, l2_inner, normal_derivative,
                       sbp_laplacian)
from .insensitize import apply_A_derivative, nonlinear_parts_A
from .solvers import (CoefficientSet, LinearOperatorSet, duality_gap,
                      solve_linear_forward)


def sbp_identity_gap(grid, rng, n_pairs: int = 20) -> float:
    """max scaled defect of <lap y, w>_H + <grad y, grad w> - dnu.w."""
    Hw = grid.trapezoid_weights()
    worst = 0.0
    for _ in range(n_pairs):
        y = rng.standard_normal(grid.n_nodes)
        w = rng.standard_normal(grid.n_nodes)
        lhs = float(np.dot(Hw * sbp_laplacian(y, grid), w))
        mid = float(np.sum(grad_faces(y, grid) * grad_faces(w, grid)) * grid.h)
        dnu = normal_derivative(y, grid)
        bnd = dnu[0] * w[0] + dnu[1] * w[-1]
        scale = (np.linalg.norm(y) * np.linalg.norm(w)) / grid.h**2 + 1e-300
        worst = max(worst, abs(lhs + mid - bnd) / scale)
    return worst


def duality_battery(ops: LinearOperatorSet, rng, n_pairs: int = 100) -> float:
    """max |<LY,W> - <Y,L*W>| / (||Y|| ||W||) over random admissible pairs."""
    g, tg = ops.grid, ops.time_grid
    M = tg.step_count
    worst = 0.0
    for _ in range(n_pairs):
        Y = SpaceTimeField.from_bulk(rng.standard_normal((M + 1, g.n_nodes)))
        W = SpaceTimeField.from_bulk(rng.standard_normal((M + 1, g.n_nodes)))
        Y.bulk[0] = 0.0
        Y.surface[0] = 0.0
        W.bulk[M] = 0.0
        W.surface[M] = 0.0
        gap = abs(duality_gap(Y, W, ops))
        ny = math.sqrt(sum(l2_inner(Y.slice(j), Y.slice(j), g) for j in range(M + 1)) * tg.dt)
        nw = math.sqrt(sum(l2_inner(W.slice(j), W.slice(j), g) for j in range(M + 1)) * tg.dt)
        # the pairing scales like the operator norm ~ 1/dt + sigma/h^2
        scale = ny * nw * (1.0 / tg.dt + ops.sigma0 / g.h**2 + 1.0)
        worst = max(worst, gap / max(scale, 1e-300))
    return worst


def _manufactured_run(cs: CoefficientSet, N: int, M: int, horizon: float,
                      time_profile: str) -> float:
    """Space-time L2 error for psi = profile(t) cos(pi x) on (0,1).

    profile "linear" (1+t) has zero implicit-Euler truncation, isolating
    the spatial order; "decay" e^{-t} carries an O(dt) temporal component.
    """
    grid = build_grid(1.0, N)
    tgrid = build_time_grid(horizon, M)
    ops = LinearOperatorSet.from_coefficients(cs, grid, tgrid)
    x, t = grid.x, tgrid.nodes
    cosx = np.cos(np.pi * x)
    if time_profile == "linear":
        prof, dprof = 1.0 + t, np.ones_like(t)
    elif time_profile == "decay":
        prof, dprof = np.exp(-t), -np.exp(-t)
    else:
        raise ValueError(time_profile)
    exact = prof[:, None] * cosx[None, :]
    f = (dprof[:, None] * cosx[None, :]
         + ops.sigma0 * np.pi**2 * exact + ops.da0 * exact)
    # dnu(psi) = 0 at both ends for cos(pi x) on (0,1)
    fs = dprof[:, None] * cosx[None, [0, -1]] + ops.db0 * exact[:, [0, -1]]
    F = SpaceTimeField(f, fs)
    psi0 = BulkSurfaceField.from_bulk(exact[0])
    Psi = solve_linear_forward(ops, F, psi0)
    w = grid.trapezoid_weights()
    err_b = Psi.bulk - exact
    err_s = Psi.surface - exact[:, [0, -1]]
    return math.sqrt(float(np.einsum("cj,j,cj->", err_b[1:], w, err_b[1:])
                           + np.sum(err_s[1:]**2)) * tgrid.dt)


def convergence_orders(cs: CoefficientSet, horizon: float = 1.0) -> dict:
    """Observed spatial and temporal orders from manufactured solutions.

    Spatial: linear-in-time profile (no temporal truncation), direct error
    ratios over N in {32, 64, 128} at M = 256.  Temporal: decaying profile
    at N = 256 over M in {64, 128, 256}; the order is estimated from error
    increments so the common spatial component cancels.
    """
    es = [_manufactured_run(cs, N, 256, horizon, "linear") for N in (32, 64, 128)]
    spatial = [math.log2(es[i] / es[i + 1]) for i in range(2)]
    et = [_manufactured_run(cs, 256, M, horizon, "decay") for M in (64, 128, 256)]
    temporal_inc = math.log2(max(et[0] - et[1], 1e-300) / max(et[1] - et[2], 1e-300))
    return {"spatial_errors": es, "spatial_orders": spatial,
            "temporal_errors": et, "temporal_order": temporal_inc,
            "spatial_order_min": min(spatial)}


def gradient_check(cs: CoefficientSet, ops: LinearOperatorSet, rng,
                   eps: float = 1e-5, amplitude: float = 0.1) -> float:
    """Central FD of the nonlinear part against its listed derivative.

    Relative error of (A(x + eps d) - A(x - eps d)) / (2 eps) against
    DA(x) d over all four blocks, at a random smooth base and direction.
    """
    g, tg = ops.grid, ops.time_grid
    M = tg.step_count

    def smooth():
        x = g.x / g.length
        t = np.linspace(0, 1, M + 1)
        out = np.zeros((M + 1, g.n_nodes))
        for kx in range(3):
            for kt in range(2):
                out += (rng.standard_normal() / (1 + kx + kt)
                        * np.outer(np.cos(np.pi * kt * t + rng.uniform(0, 6.3)),
                                   np.cos(np.pi * kx * x + rng.uniform(0, 6.3))))
        return SpaceTimeField.from_bulk(amplitude * out)

    Psi, H, Phi, K = smooth(), smooth(), smooth(), smooth()

    def shifted(base, direction, sgn):
        return SpaceTimeField(base.bulk + sgn * eps * direction.bulk,
                              base.surface + sgn * eps * direction.surface)

    Ap = nonlinear_parts_A(shifted(Psi, Phi, +1), shifted(H, K, +1), cs, ops)
    Am = nonlinear_parts_A(shifted(Psi, Phi, -1), shifted(H, K, -1), cs, ops)
    DA = apply_A_derivative(Psi, H, Phi, K, cs, ops)
    num, den = 0.0, 0.0
    for key in ("A1", "A2", "A3", "A4"):
        fd = (Ap[key] - Am[key]) / (2 * eps)
        num += float(np.sum((fd - DA[key])**2))
        den += float(np.sum(DA[key]**2))
    return math.sqrt(num / max(den, 1e-300))
