"""Discrete operators and time steppers for the bulk-surface systems.

Layout conventions shared by every solver and by the least-squares module:

* space-time fields live on time slices 0..M; equation residuals live on
  time cells 1..M (cell c spans [t_{c-1}, t_c]);
* the forward operator anchors cell c at its right slice,
      (L Y)_c = (Y^c - Y^{c-1})/dt + S Y^c,
  the backward operator at its left slice,
      (L* Y)_c = (Y^{c-1} - Y^c)/dt + S Y^{c-1};
* duality pairings: forward residuals pair with right slices, backward
  residuals with left slices.  With those pairings <LY, W> = <Y, L*W>
  holds to roundoff whenever Y vanishes at slice 0 and W at slice M.

S is the spatial generator of the dynamic-boundary system: the bulk row
couples -sigma*lap with the reaction, the surface row carries the normal
flux; assembled against the trapezoid-plus-surface mass, the flux terms
cancel exactly (SBP), which gives machine-precision mass conservation and
unconditional dissipativity of the implicit Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded, solveh_banded

from .errors import ConfigurationError, ContractError, SmallnessViolationError
from .geometry import (BulkSurfaceField, RegionMasks, SpaceTimeField,
                       SpatialGrid, TimeGrid, grad_faces, l2_inner,
                       normal_derivative, sbp_laplacian, stiffness_apply)


# --- coefficients -----------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    """Diffusion sigma/delta with three derivatives, reactions a/b with two,
    and the ellipticity floor rho.  All handles are vectorized callables."""

    sigma: Callable
    dsigma: Callable
    d2sigma: Callable
    d3sigma: Callable
    delta: Callable
    ddelta: Callable
    d2delta: Callable
    d3delta: Callable
    a: Callable
    da: Callable
    d2a: Callable
    b: Callable
    db: Callable
    d2b: Callable
    rho: float
    name: str = "custom"


def validate_coefficients(cs: CoefficientSet, sample_interval=(-2.0, 2.0),
                          n_samples: int = 401) -> None:
    r = np.linspace(*sample_interval, n_samples)
    if np.min(cs.sigma(r)) < cs.rho or np.min(cs.delta(r)) < cs.rho:
        raise ConfigurationError(
            "assumption A7 violated: diffusion coefficients drop below the "
            f"ellipticity floor rho={cs.rho} on {sample_interval}")
    if abs(float(cs.a(0.0))) > 1e-14 or abs(float(cs.b(0.0))) > 1e-14:
        raise ConfigurationError(
            "assumption A8 violated: reaction terms must vanish at 0")
    eps = 1e-6
    pairs = [(cs.sigma, cs.dsigma), (cs.dsigma, cs.d2sigma), (cs.d2sigma, cs.d3sigma),
             (cs.delta, cs.ddelta), (cs.ddelta, cs.d2delta), (cs.d2delta, cs.d3delta),
             (cs.a, cs.da), (cs.da, cs.d2a), (cs.b, cs.db), (cs.db, cs.d2b)]
    for k, (f, df) in enumerate(pairs):
        fd = (f(r + eps) - f(r - eps)) / (2 * eps)
        scale = np.max(np.abs(df(r))) + 1.0
        if np.max(np.abs(fd - df(r))) > 1e-6 * scale:
            raise ConfigurationError(
                f"coefficient derivative #{k} disagrees with finite differences")


def coefficient_preset(name: str, **kw) -> CoefficientSet:
    """Named coefficient families: constant, affine, logistic, polynomial."""
    zero = np.zeros_like
    if name == "constant":
        s0 = kw.get("sigma0", 1.0)
        d0 = kw.get("delta0", 0.8)
        a1 = kw.get("a1", 0.5)
        b1 = kw.get("b1", 0.3)
        return CoefficientSet(
            sigma=lambda r: np.full_like(np.asarray(r, float), s0),
            dsigma=zero, d2sigma=zero, d3sigma=zero,
            delta=lambda r: np.full_like(np.asarray(r, float), d0),
            ddelta=zero, d2delta=zero, d3delta=zero,
            a=lambda r: a1 * np.asarray(r, float), da=lambda r: np.full_like(np.asarray(r, float), a1),
            d2a=zero,
            b=lambda r: b1 * np.asarray(r, float), db=lambda r: np.full_like(np.asarray(r, float), b1),
            d2b=zero, rho=min(s0, d0), name="constant")
    if name == "affine":
        s0, s1 = kw.get("sigma0", 1.0), kw.get("sigma1", 0.2)
        d0, d1 = kw.get("delta0", 0.8), kw.get("delta1", 0.1)
        a1, a2 = kw.get("a1", 0.5), kw.get("a2", 0.25)
        b1, b2 = kw.get("b1", 0.3), kw.get("b2", 0.15)
        return CoefficientSet(
            sigma=lambda r: s0 + s1 * np.asarray(r, float),
            dsigma=lambda r: np.full_like(np.asarray(r, float), s1),
            d2sigma=zero, d3sigma=zero,
            delta=lambda r: d0 + d1 * np.asarray(r, float),
            ddelta=lambda r: np.full_like(np.asarray(r, float), d1),
            d2delta=zero, d3delta=zero,
            a=lambda r: a1 * np.asarray(r, float) + a2 * np.asarray(r, float)**2,
            da=lambda r: a1 + 2 * a2 * np.asarray(r, float),
            d2a=lambda r: np.full_like(np.asarray(r, float), 2 * a2),
            b=lambda r: b1 * np.asarray(r, float) + b2 * np.asarray(r, float)**2,
            db=lambda r: b1 + 2 * b2 * np.asarray(r, float),
            d2b=lambda r: np.full_like(np.asarray(r, float), 2 * b2),
            rho=min(s0 - 2 * abs(s1), d0 - 2 * abs(d1)), name="affine")
    if name == "logistic":
        # saturating tanh profiles; globally bounded derivatives
        s0, s1 = kw.get("sigma0", 1.0), kw.get("sigma1", 0.4)
        d0, d1 = kw.get("delta0", 0.8), kw.get("delta1", 0.3)
        a1, b1 = kw.get("a1", 0.5), kw.get("b1", 0.3)

        def tanh_set(c0, c1):
            return (lambda r: c0 + c1 * np.tanh(r),
                    lambda r: c1 / np.cosh(r)**2,
                    lambda r: -2 * c1 * np.tanh(r) / np.cosh(r)**2,
                    lambda r: c1 * (4 * np.tanh(r)**2 - 2 / np.cosh(r)**2) / np.cosh(r)**2)

        sg = tanh_set(s0, s1)
        dl = tanh_set(d0, d1)
        return CoefficientSet(
            sigma=sg[0], dsigma=sg[1], d2sigma=sg[2], d3sigma=sg[3],
            delta=dl[0], ddelta=dl[1], d2delta=dl[2], d3delta=dl[3],
            a=lambda r: a1 * np.tanh(r),
            da=lambda r: a1 / np.cosh(r)**2,
            d2a=lambda r: -2 * a1 * np.tanh(r) / np.cosh(r)**2,
            b=lambda r: b1 * np.tanh(r),
            db=lambda r: b1 / np.cosh(r)**2,
            d2b=lambda r: -2 * b1 * np.tanh(r) / np.cosh(r)**2,
            rho=min(s0 - s1, d0 - d1), name="logistic")
    if name == "polynomial":
        s0, s2 = kw.get("sigma0", 1.0), kw.get("sigma2", 0.3)
        d0, d2c = kw.get("delta0", 0.8), kw.get("delta2", 0.2)
        a1, a3 = kw.get("a1", 0.5), kw.get("a3", 0.2)
        b1 = kw.get("b1", 0.3)
        return CoefficientSet(
            sigma=lambda r: s0 + s2 * np.asarray(r, float)**2,
            dsigma=lambda r: 2 * s2 * np.asarray(r, float),
            d2sigma=lambda r: np.full_like(np.asarray(r, float), 2 * s2),
            d3sigma=zero,
            delta=lambda r: d0 + d2c * np.asarray(r, float)**2,
            ddelta=lambda r: 2 * d2c * np.asarray(r, float),
            d2delta=lambda r: np.full_like(np.asarray(r, float), 2 * d2c),
            d3delta=zero,
            a=lambda r: a1 * np.asarray(r, float) + a3 * np.asarray(r, float)**3,
            da=lambda r: a1 + 3 * a3 * np.asarray(r, float)**2,
            d2a=lambda r: 6 * a3 * np.asarray(r, float),
            b=lambda r: b1 * np.asarray(r, float),
            db=lambda r: np.full_like(np.asarray(r, float), b1),
            d2b=zero, rho=min(s0, d0), name="polynomial")
    raise ConfigurationError(f"unknown coefficient preset '{name}'")


@dataclass(frozen=True)
class LinearOperatorSet:
    """The frozen-at-zero linear operators L1, L2 and their adjoints."""

    sigma0: float
    delta0: float
    da0: float
    db0: float
    grid: SpatialGrid
    time_grid: TimeGrid
    scheme: str = "implicit_euler"

    @classmethod
    def from_coefficients(cls, cs: CoefficientSet, grid: SpatialGrid,
                          time_grid: TimeGrid) -> "LinearOperatorSet":
        return cls(sigma0=float(cs.sigma(0.0)), delta0=float(cs.delta(0.0)),
                   da0=float(cs.da(0.0)), db0=float(cs.db(0.0)),
                   grid=grid, time_grid=time_grid)


# --- strong residual operators ---------------------------------------------

def apply_L(Y: SpaceTimeField, ops: LinearOperatorSet, variant: str = "L") -> SpaceTimeField:
    """Strong residual fields of the implicit-Euler operators.

    variant "L": residual slices 1..M (forward rows), slice 0 zero.
    variant "Lstar": residual slices 0..M-1 (backward rows), slice M zero.
    Corner bulk rows use the flux-injected SBP Laplacian; surface rows the
    one-sided normal derivative.  The starred variant is the exact
    transpose of the unstarred one under the cell/slice pairings.
    """
    g, dt = ops.grid, ops.time_grid.dt
    M = Y.n_slices - 1
    out = SpaceTimeField.zeros(g, M + 1)
    if variant in ("L", "L12"):
        anchor = slice(1, M + 1)
        other = slice(0, M)
        sign = 1.0
    elif variant in ("Lstar", "L12star"):
        anchor = slice(0, M)
        other = slice(1, M + 1)
        sign = 1.0
    else:
        raise ContractError(f"unknown operator variant '{variant}'")
    yb_a, yb_o = Y.bulk[anchor], Y.bulk[other]
    ys_a, ys_o = Y.surface[anchor], Y.surface[other]
    out.bulk[anchor] = sign * (yb_a - yb_o) / dt \
        - ops.sigma0 * sbp_laplacian(yb_a, g) + ops.da0 * yb_a
    out.surface[anchor] = sign * (ys_a - ys_o) / dt \
        + ops.sigma0 * normal_derivative(yb_a, g) + ops.db0 * ys_a
    return out


def st_pair_forward(res: SpaceTimeField, W: SpaceTimeField, grid: SpatialGrid,
                    dt: float) -> float:
    """<forward residuals, W>: cells pair right slices."""
    M = res.n_slices - 1
    total = 0.0
    for c in range(1, M + 1):
        total += dt * l2_inner(res.slice(c), W.slice(c), grid)
    return total


def st_pair_backward(Y: SpaceTimeField, res: SpaceTimeField, grid: SpatialGrid,
                     dt: float) -> float:
    """<Y, backward residuals>: cells pair left slices."""
    M = res.n_slices - 1
    total = 0.0
    for j in range(M):
        total += dt * l2_inner(Y.slice(j), res.slice(j), grid)
    return total


def duality_gap(Y: SpaceTimeField, W: SpaceTimeField, ops: LinearOperatorSet) -> float:
    """<LY, W> - <Y, L*W>; zero to roundoff when Y^0 = 0 and W^M = 0."""
    dt = ops.time_grid.dt
    a = st_pair_forward(apply_L(Y, ops, "L"), W, ops.grid, dt)
    b = st_pair_backward(Y, apply_L(W, ops, "Lstar"), ops.grid, dt)
    return a - b


# --- banded step systems ----------------------------------------------------

def _corner_lift(grid: SpatialGrid, pair: np.ndarray) -> np.ndarray:
    out = np.zeros(grid.n_nodes)
    out[0], out[-1] = pair[0], pair[1]
    return out


def _constant_step_bands(grid: SpatialGrid, dt: float, sigma0: float,
                         da0: float, db0: float) -> np.ndarray:
    """Upper-banded form of the SPD matrix M/dt + K for solveh_banded."""
    n = grid.n_nodes
    h = grid.h
    Hw = grid.trapezoid_weights()
    Mw = grid.mass_weights()
    diag = Mw / dt + da0 * Hw + sigma0 * 2.0 / h
    diag[0] = Mw[0] / dt + da0 * Hw[0] + sigma0 / h + db0
    diag[-1] = Mw[-1] / dt + da0 * Hw[-1] + sigma0 / h + db0
    off = np.full(n - 1, -sigma0 / h)
    ab = np.zeros((2, n))
    ab[0, 1:] = off
    ab[1] = diag
    return ab


def _weak_rhs(grid: SpatialGrid, fb: np.ndarray, fs: np.ndarray) -> np.ndarray:
    return grid.trapezoid_weights() * fb + _corner_lift(grid, fs)


def solve_linear_forward(ops: LinearOperatorSet, F: SpaceTimeField,
                         psi0: BulkSurfaceField) -> SpaceTimeField:
    """Implicit-Euler forward solve; source slice c feeds step c (c=1..M)."""
    g, tg = ops.grid, ops.time_grid
    if not psi0.is_trace_compatible(1e-12):
        raise ContractError("initial datum must be trace-compatible")
    M, dt = tg.step_count, tg.dt
    ab = _constant_step_bands(g, dt, ops.sigma0, ops.da0, ops.db0)
    Mw = g.mass_weights()
    out = np.empty((M + 1, g.n_nodes))
    out[0] = psi0.bulk
    for c in range(1, M + 1):
        rhs = Mw * out[c - 1] / dt + _weak_rhs(g, F.bulk[c], F.surface[c])
        out[c] = solveh_banded(ab, rhs)
    return SpaceTimeField.from_bulk(out)


def solve_linear_backward(ops: LinearOperatorSet, G: SpaceTimeField,
                          terminal: BulkSurfaceField) -> SpaceTimeField:
    """Backward solve: step c produces slice c-1; source slice c feeds step c."""
    g, tg = ops.grid, ops.time_grid
    if not terminal.is_trace_compatible(1e-12):
        raise ContractError("terminal datum must be trace-compatible")
    M, dt = tg.step_count, tg.dt
    ab = _constant_step_bands(g, dt, ops.sigma0, ops.da0, ops.db0)
    Mw = g.mass_weights()
    out = np.empty((M + 1, g.n_nodes))
    out[M] = terminal.bulk
    for c in range(M, 0, -1):
        rhs = Mw * out[c] / dt + _weak_rhs(g, G.bulk[c], G.surface[c])
        out[c - 1] = solveh_banded(ab, rhs)
    return SpaceTimeField.from_bulk(out)


def _varcoef_backward_bands(grid: SpatialGrid, dt: float, sig_nodes, sig_surf,
                            da_nodes, db_surf) -> np.ndarray:
    """Banded (2,2) matrix of the strong backward rows, H-weighted:

        H [(.)/dt - sig(psi) lap(.) + a'(psi)(.)] + corner surface rows.

    For constant coefficients the flux-injection cancels against the
    surface normal-derivative row and the matrix reduces to the symmetric
    weak one.
    """
    n = grid.n_nodes
    h = grid.h
    Hw = grid.trapezoid_weights()
    Mw = grid.mass_weights()
    A = np.zeros((n, n))  # dense staging, banded extraction below (n is small)
    idx = np.arange(n)
    A[idx, idx] = Mw / dt + Hw * da_nodes
    # interior Laplacian rows: -H sig lap = sig/h * (-1, 2, -1)
    for i in range(1, n - 1):
        A[i, i - 1] += -sig_nodes[i] / h
        A[i, i] += 2 * sig_nodes[i] / h
        A[i, i + 1] += -sig_nodes[i] / h
    # corner rows: -(h/2) sig lap_corner + surface flux row + b' on the trace
    c0 = sig_nodes[0] * 0.5 / h
    A[0, 0] += -c0 * 1 + 0.0
    A[0, 1] += -c0 * -2
    A[0, 2] += -c0 * 1
    cN = sig_nodes[-1] * 0.5 / h
    A[-1, -1] += -cN * 1
    A[-1, -2] += -cN * -2
    A[-1, -3] += -cN * 1
    # surface rows folded onto the shared DOFs
    A[0, 0] += sig_surf[0] * 3.0 / (2 * h) + db_surf[0]
    A[0, 1] += sig_surf[0] * -4.0 / (2 * h)
    A[0, 2] += sig_surf[0] * 1.0 / (2 * h)
    A[-1, -1] += sig_surf[1] * 3.0 / (2 * h) + db_surf[1]
    A[-1, -2] += sig_surf[1] * -4.0 / (2 * h)
    A[-1, -3] += sig_surf[1] * 1.0 / (2 * h)

    ab = np.zeros((5, n))
    for offset in range(-2, 3):
        d = np.diagonal(A, offset)
        ab[2 - offset, max(offset, 0):n + min(offset, 0)] = d
    return ab


def solve_backward_varcoef(grid: SpatialGrid, time_grid: TimeGrid,
                           sigma_of, da_of, db_of, states: SpaceTimeField,
                           G: SpaceTimeField, terminal: BulkSurfaceField) -> SpaceTimeField:
    """Backward solve with coefficients frozen along a given state history.

    Step c (producing slice c-1) samples sigma(psi), a'(psi), b'(psi_G) at
    the cell's right slice c; this mirrors the transpose structure of the
    forward stepping and keeps the discrete duality gap at O(dt).
    """
    g, dt, M = grid, time_grid.dt, time_grid.step_count
    Mw = g.mass_weights()
    out = np.empty((M + 1, g.n_nodes))
    out[M] = terminal.bulk
    for c in range(M, 0, -1):
        sig_n = sigma_of(states.bulk[c])
        sig_s = sigma_of(states.surface[c])
        da_n = da_of(states.bulk[c])
        db_s = db_of(states.surface[c])
        ab = _varcoef_backward_bands(g, dt, sig_n, sig_s, da_n, db_s)
        rhs = Mw * out[c] / dt + _weak_rhs(g, G.bulk[c], G.surface[c])
        out[c - 1] = solve_banded((2, 2), ab, rhs)
    return SpaceTimeField.from_bulk(out)


def solve_linearized_cascade(ops: LinearOperatorSet, F: SpaceTimeField,
                             G: SpaceTimeField, v: np.ndarray,
                             theta: float, theta_s: float,
                             masks: RegionMasks) -> tuple[SpaceTimeField, SpaceTimeField]:
    """Forward psi with source f + v 1_omega, then backward h with source
    g + theta psi 1_O (bulk) and g_G + theta_s psi_G 1_Sigma (surface).

    `v` is a cell-indexed array (M+1, n_nodes) whose slice c feeds step c;
    it is masked to the omega nodes (support enforced).
    """
    g = ops.grid
    vmask = v * masks.omega_nodes[None, :]
    Feff = SpaceTimeField(F.bulk + vmask, F.surface.copy())
    Psi = solve_linear_forward(ops, Feff, BulkSurfaceField.zeros(g))
    Geff = SpaceTimeField(
        G.bulk + theta * Psi.bulk * masks.obs_bulk_nodes[None, :],
        G.surface + theta_s * Psi.surface * masks.obs_surface_mask[None, :])
    H = solve_linear_backward(ops, Geff, BulkSurfaceField.zeros(g))
    return Psi, H


def solve_adjoint_cascade(ops: LinearOperatorSet, f1: SpaceTimeField,
                          g1: SpaceTimeField, theta: float, theta_s: float,
                          masks: RegionMasks) -> tuple[SpaceTimeField, SpaceTimeField]:
    """Adjoint cascade: K forward from zero with g1; Phi backward from zero
    with f1 + theta K 1_O (bulk), f1_G + theta_s K_G 1_Sigma (surface)."""
    g = ops.grid
    K = solve_linear_forward(ops, g1, BulkSurfaceField.zeros(g))
    src = SpaceTimeField(
        f1.bulk + theta * K.bulk * masks.obs_bulk_nodes[None, :],
        f1.surface + theta_s * K.surface * masks.obs_surface_mask[None, :])
    Phi = solve_linear_backward(ops, src, BulkSurfaceField.zeros(g))
    return Phi, K


def weak_residual(ops: LinearOperatorSet, Y: SpaceTimeField, F: SpaceTimeField,
                  backward: bool = False) -> float:
    """Relative distributional residual of the stepped equations.

    Assembles H r_bulk + corner-lift r_surface - quadrature sources per
    cell; this is the exact set of equations the banded solves enforce.
    """
    g, tg = ops.grid, ops.time_grid
    res = apply_L(Y, ops, "Lstar" if backward else "L")
    Hw = g.trapezoid_weights()
    total, scale = 0.0, 0.0
    for c in range(1, tg.step_count + 1):
        j = c - 1 if backward else c      # anchor slice of the step
        known = c if backward else c - 1  # propagated slice
        r = Hw * res.bulk[j] + _corner_lift(g, res.surface[j]) \
            - _weak_rhs(g, F.bulk[c], F.surface[c])
        total += float(np.dot(r, r))
        q = _weak_rhs(g, F.bulk[c], F.surface[c]) \
            + g.mass_weights() * Y.bulk[known] / tg.dt
        scale += float(np.dot(q, q))
    return np.sqrt(total) / max(np.sqrt(scale), 1e-300)


# --- quasilinear solver -----------------------------------------------------

def _face_average(u: np.ndarray) -> np.ndarray:
    return 0.5 * (u[..., 1:] + u[..., :-1])


def _quasilinear_residual(u, uold, cs, grid, dt, src):
    """Weak-form step residual; `src` holds the quadrature-weighted sources
    only (the previous-slice mass term is handled here)."""
    Hw = grid.trapezoid_weights()
    Mw = grid.mass_weights()
    sig_f = cs.sigma(_face_average(u))
    r = Mw * (u - uold) / dt + stiffness_apply(u, grid, face_coeff=sig_f) \
        + Hw * cs.a(u)
    r[0] += cs.b(u[0])
    r[-1] += cs.b(u[-1])
    return r - src


def _quasilinear_jacobian_bands(u, cs, grid, dt):
    n = grid.n_nodes
    h = grid.h
    Hw = grid.trapezoid_weights()
    Mw = grid.mass_weights()
    uf = _face_average(u)
    sig_f = cs.sigma(uf)
    dsig_f = cs.dsigma(uf)
    gu = np.diff(u) / h

    diag = Mw / dt + Hw * cs.da(u)
    diag[0] += cs.db(u[0])
    diag[-1] += cs.db(u[-1])
    lower = np.zeros(n - 1)
    upper = np.zeros(n - 1)
    # stiffness with frozen sig_f
    diag[:-1] += sig_f / h
    diag[1:] += sig_f / h
    lower -= sig_f / h
    upper -= sig_f / h
    # derivative of sig_f wrt nodes: each face adds dsig/2 * gu * (Gw-pattern)
    d = dsig_f * gu * 0.5
    diag[:-1] += -d
    diag[1:] += d
    upper += -d
    lower += d
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    return ab


def solve_quasilinear(cs: CoefficientSet, grid: SpatialGrid, time_grid: TimeGrid,
                      F: SpaceTimeField, psi0: BulkSurfaceField,
                      v: np.ndarray | None = None,
                      masks: RegionMasks | None = None,
                      newton_tol: float = 1e-11, max_newton: int = 25,
                      newton_guess: str = "previous") -> SpaceTimeField:
    """Fully implicit conservative solve of the quasilinear system.

    Divergence form via face-averaged sigma; the surface row shares the
    boundary DOFs and the flux cancels in the weak assembly.  Newton runs
    full steps; non-convergence maps to the small-data hypothesis and
    raises SmallnessViolationError with the failing step.
    """
    if not psi0.is_trace_compatible(1e-12):
        raise ContractError("initial datum must be trace-compatible")
    g, dt, M = grid, time_grid.dt, time_grid.step_count
    Mw = g.mass_weights()
    out = np.empty((M + 1, g.n_nodes))
    out[0] = psi0.bulk
    for c in range(1, M + 1):
        fb = F.bulk[c].copy()
        if v is not None:
            fb = fb + v[c] * (masks.omega_nodes if masks is not None else 1.0)
        src = _weak_rhs(g, fb, F.surface[c])
        scale = max(1.0, float(np.linalg.norm(src + Mw * out[c - 1] / dt)))
        u = out[c - 1].copy() if newton_guess == "previous" else np.zeros(g.n_nodes)
        converged = False
        for _ in range(max_newton):
            r = _quasilinear_residual(u, out[c - 1], cs, g, dt, src)
            if np.linalg.norm(r) <= newton_tol * scale:
                converged = True
                break
            ab = _quasilinear_jacobian_bands(u, cs, g, dt)
            u = u - solve_banded((1, 1), ab, r)
        if not converged:
            r = _quasilinear_residual(u, out[c - 1], cs, g, dt, src)
            raise SmallnessViolationError(
                f"Newton did not converge at step {c} "
                f"(residual {np.linalg.norm(r):.3e}); data outside the "
                "small-data regime", step=c, residual=float(np.linalg.norm(r)))
        out[c] = u
    return SpaceTimeField.from_bulk(out)


def solve_quasilinear_cascade(cs: CoefficientSet, grid: SpatialGrid,
                              time_grid: TimeGrid, F: SpaceTimeField,
                              v: np.ndarray, theta: float, theta_s: float,
                              masks: RegionMasks,
                              newton_guess: str = "previous") -> tuple[SpaceTimeField, SpaceTimeField]:
    """Quasilinear forward state, then the backward equation with
    state-frozen coefficients and sources theta psi 1_O / theta_s psi_G 1_Sigma."""
    Psi = solve_quasilinear(cs, grid, time_grid, F, BulkSurfaceField.zeros(grid),
                            v=v, masks=masks, newton_guess=newton_guess)
    G = SpaceTimeField(
        theta * Psi.bulk * masks.obs_bulk_nodes[None, :],
        theta_s * Psi.surface * masks.obs_surface_mask[None, :])
    H = solve_backward_varcoef(grid, time_grid, cs.sigma, cs.da, cs.db,
                               Psi, G, BulkSurfaceField.zeros(grid))
    return Psi, H


def solve_sensitivity(cs: CoefficientSet, grid: SpatialGrid, time_grid: TimeGrid,
                      Psi: SpaceTimeField, zhat0: BulkSurfaceField) -> SpaceTimeField:
    """Tangent (sensitivity) system along a quasilinear trajectory.

    Exact directional derivative of the discrete quasilinear flow: the
    conservative flux carries sigma(psi) G z + sigma'(psi) z_face G psi,
    coefficients sampled at each cell's right slice.
    """
    if not zhat0.is_trace_compatible(1e-12):
        raise ContractError("perturbation direction must be trace-compatible")
    g, dt, M = grid, time_grid.dt, time_grid.step_count
    n = g.n_nodes
    h = g.h
    Hw = g.trapezoid_weights()
    Mw = g.mass_weights()
    out = np.empty((M + 1, n))
    out[0] = zhat0.bulk
    idx = np.arange(n)
    for c in range(1, M + 1):
        psi = Psi.bulk[c]
        uf = _face_average(psi)
        sig_f = cs.sigma(uf)
        dsig_f = cs.dsigma(uf)
        gpsi = np.diff(psi) / h

        A = np.zeros((n, n))
        A[idx, idx] = Mw / dt + Hw * cs.da(psi)
        A[0, 0] += cs.db(psi[0])
        A[-1, -1] += cs.db(psi[-1])
        # sigma(psi)-weighted stiffness
        A[idx[:-1], idx[:-1]] += sig_f / h
        A[idx[1:], idx[1:]] += sig_f / h
        A[idx[:-1], idx[1:]] += -sig_f / h
        A[idx[1:], idx[:-1]] += -sig_f / h
        # conservative drift: flux_f += dsig_f * zf * gpsi, zf = avg(z)
        d = dsig_f * gpsi * 0.5
        A[idx[:-1], idx[:-1]] += -d
        A[idx[:-1], idx[1:]] += -d
        A[idx[1:], idx[:-1]] += d
        A[idx[1:], idx[1:]] += d

        ab = np.zeros((3, n))
        ab[0, 1:] = np.diagonal(A, 1)
        ab[1] = np.diagonal(A)
        ab[2, :-1] = np.diagonal(A, -1)
        out[c] = solve_banded((1, 1), ab, Mw * out[c - 1] / dt)
    return SpaceTimeField.from_bulk(out)


# --- diagnostics ------------------------------------------------------------

def total_mass(Y: SpaceTimeField, grid: SpatialGrid) -> np.ndarray:
    """Bulk trapezoid integral plus the two surface values, per slice."""
    return Y.bulk @ grid.trapezoid_weights() + Y.surface.sum(axis=1)


def l2_history(Y: SpaceTimeField, grid: SpatialGrid) -> np.ndarray:
    w = grid.trapezoid_weights()
    return np.sqrt(np.einsum("ij,j,ij->i", Y.bulk, w, Y.bulk)
                   + np.einsum("ij,ij->i", Y.surface, Y.surface))


def energy_norm(Y: SpaceTimeField, grid: SpatialGrid, dt: float) -> float:
    """Discrete norm of H^1(0,T;L2) cap L2(0,T;H2): value, time derivative,
    gradient and Laplacian, trapezoid/cell quadrature."""
    w = grid.trapezoid_weights()
    val = float(np.einsum("ij,j,ij->", Y.bulk, w, Y.bulk) * dt
                + np.einsum("ij,ij->", Y.surface, Y.surface) * dt)
    yt = np.diff(Y.bulk, axis=0) / dt
    st = np.diff(Y.surface, axis=0) / dt
    tder = float(np.einsum("ij,j,ij->", yt, w, yt) * dt + np.sum(st * st) * dt)
    gf = grad_faces(Y.bulk, grid)
    grad = float(np.sum(gf * gf) * grid.h * dt)
    lap = sbp_laplacian(Y.bulk, grid)
    lp = float(np.einsum("ij,j,ij->", lap, w, lap) * dt)
    return float(np.sqrt(val + tder + grad + lp))


def h1_norm(f: BulkSurfaceField, grid: SpatialGrid) -> float:
    gf = grad_faces(f.bulk, grid)
    return float(np.sqrt(l2_inner(f, f, grid) + np.sum(gf * gf) * grid.h))


def dump_trajectory_csv(Psi: SpaceTimeField, H: SpaceTimeField,
                        grid: SpatialGrid, time_grid: TimeGrid, path) -> None:
    """Per-run trajectory dump: t, bulk norms and the surface values."""
    np_ = l2_history(Psi, grid)
    nh = l2_history(H, grid)
    with open(path, "w") as fh:
        fh.write("t,psi_norm,psi_surf_left,psi_surf_right,"
                 "h_norm,h_surf_left,h_surf_right\n")
        for j, t in enumerate(time_grid.nodes):
            row = (t, np_[j], Psi.surface[j, 0], Psi.surface[j, 1],
                   nh[j], H.surface[j, 0], H.surface[j, 1])
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
