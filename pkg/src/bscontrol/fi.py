"""Carleman-weighted space-time least squares: the constructive control step.

Unknown pair (Y, Z) of trace-compatible space-time fields with the end
constraints Y(T) = 0, Z(0) = 0 (the end conditions under which the
quadratic form is coercive: Y plays the backward adjoint variable, Z the
forward one).  The quadratic form pairs the five-component residual stack

    R1 = mu0^{-1} (L1* Y - theta  Z 1_O)        (bulk cells, left-anchored)
    R2 = mu0^{-1} (L2* Y - theta_s Z_G 1_Sigma) (surface cells)
    R3 = mu0^{-1}  L1 Z                          (bulk, right-anchored)
    R4 = mu0^{-1}  L2 Z                          (surface)
    R5 = mu1^{-1} sqrt(chi) Y                    (observation, left-anchored)

against itself in the trapezoid-plus-surface inner product, cells weighted
by dt.  The right-hand side functional pairs the forward source F with Y
at left slices and the backward source G with Z at right slices.  With
those anchors the normal equations are, row for row, the implicit-Euler
weak equations of the linearized cascade system, so the recovered triple

    Psi = mu0^{-2} (L1* Phi - theta K 1_O, L2* Phi - theta_s K_G 1_Sigma)
    H   = mu0^{-2} (L1 K, L2 K)
    v   = -chi mu1^{-2} Phi |_omega

satisfies the discrete cascade with sources (F, G) up to the solver
residual, and H vanishes identically on the early cells where mu0^{-2}
underflows to exact zero -- the discrete mechanism that reaches
h(., 0) = 0.

Solver: the weighted normal operator spans the full live range of the
squared Carleman weights (tens of e-folds even over the live window), far
beyond what unpreconditioned conjugate gradients can resolve in doubles.
The default engine assembles the residual stack sparsely (it is block
bidiagonal in time), forms the diagonally scaled normal matrix and
factorizes it with sparse LU plus iterative refinement; a matrix-free CG
engine is retained for comparison.  Optimality is always reported through
the quadratic-form geometry (the relative Galerkin residual), which is the
well-conditioned quantity; Euclidean distances to the re-solved cascade
states are reported as diagnostics of the weight-induced null space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

from .errors import ConditioningError, ContractError
from .geometry import (SpaceTimeField, SpatialGrid, grad_faces, sbp_laplacian)
from .solvers import (LinearOperatorSet, solve_linearized_cascade, weak_residual)
from .weights import ChiBump, WeightTables, log_add, log_ratio, log_weighted_sq_sum


@dataclass
class FIProblem:
    """Sources, weights and solver knobs for one least-squares solve.

    F and G are cell-indexed SpaceTimeFields (slice c holds the cell-c
    sample, c = 1..M; slice 0 is ignored).  theta > 0, theta_s >= 0.
    """

    F: SpaceTimeField
    G: SpaceTimeField
    theta: float
    theta_s: float
    grid: SpatialGrid
    time_grid: "object"
    masks: "object"
    tables: WeightTables
    chi: ChiBump
    ops: LinearOperatorSet
    cg_tol: float = 1e-10
    max_iter: int = 20000
    engine: str = "direct"

    def __post_init__(self):
        if not self.theta > 0:
            raise ContractError(f"theta must be positive, got {self.theta}")
        if self.theta_s < 0:
            raise ContractError(f"theta_s must be >= 0, got {self.theta_s}")
        for nm, lg in self.log_source_norms().items():
            if not (lg < math.inf):
                raise ContractError(f"weighted source norm {nm} is not finite")

    def log_source_norms(self) -> dict:
        """log-space values of ||mu F||^2, ||mu G||^2, ||mu4 F_t||^2."""
        g, dt = self.grid, self.time_grid.dt
        quad_b = g.trapezoid_weights()[None, :] * dt
        lm = self.tables.log_mu
        lm4 = self.tables.log_mu_k[4]
        out = {}
        for nm, S in (("muF", self.F), ("muG", self.G)):
            out[nm] = log_add(
                log_weighted_sq_sum(2 * lm[:, None], S.bulk[1:], quad_b),
                log_weighted_sq_sum(2 * lm[:, None], S.surface[1:], dt))
        Ft_b, Ft_s, lw_t = _cell_time_derivative(self.F.bulk[1:], self.F.surface[1:],
                                                 lm4, dt)
        out["mu4Ft"] = log_add(
            log_weighted_sq_sum(2 * lw_t[:, None], Ft_b, quad_b),
            log_weighted_sq_sum(2 * lw_t[:, None], Ft_s, dt))
        return out

    def log_Y_norm_sq(self) -> float:
        return log_add(*self.log_source_norms().values())


def _cell_time_derivative(cells_b, cells_s, log_w, dt):
    """Centered-at-interface time differences of cell arrays, with the
    interface log-weight taken as the mean of the neighbours'."""
    db = np.diff(cells_b, axis=0) / dt
    ds = np.diff(cells_s, axis=0) / dt
    lw = 0.5 * (log_w[1:] + log_w[:-1])
    return db, ds, lw


@dataclass
class FISolution:
    Phi: SpaceTimeField | None
    K: SpaceTimeField | None
    Psi: SpaceTimeField          # forward view: slice 0 is exactly 0
    H: SpaceTimeField            # backward view: slice M is exactly 0
    v: np.ndarray                # (M+1, n_nodes), slice c = cell-c control
    cg_iters: int
    optimality_residual: float
    ritz_min: float
    ritz_max: float
    h0_norm: float               # recovered-H first-node L2 norm
    engine: str = "direct"
    log_norms: dict = field(default_factory=dict)
    x_dofs: np.ndarray | None = None


class _Stack:
    """Sparse residual stack, its normal matrix, and block helpers.

    Dof packing: Y slices 0..M-1 then Z slices 1..M, each n_nodes wide
    (the constrained end slices are not dofs).  Stack rows are ordered
    (R1 bulk, R2 surface, R3 bulk, R4 surface, R5 observation), cells
    fastest within each block.
    """

    def __init__(self, p: FIProblem):
        g = p.grid
        tg = p.time_grid
        self.p = p
        self.g = g
        self.M = tg.step_count
        self.n = g.n_nodes
        self.dt = tg.dt
        self.h = g.h
        self.Hvec = g.trapezoid_weights()
        self.w0 = p.tables.inv_sq(0)
        self.w1 = p.tables.inv_sq(1)
        self.chi = p.chi.values
        self.sqrt_chi = np.sqrt(p.chi.values)
        self.mO = p.masks.obs_bulk_nodes.astype(float)
        self.mS = p.masks.obs_surface_mask.astype(float)
        self.s0 = p.ops.sigma0
        self.da0 = p.ops.da0
        self.db0 = p.ops.db0
        self.n_dofs = 2 * self.M * self.n
        self._R = None
        self._A = None
        self._wrow = None

    # --- sparse assembly ---------------------------------------------------

    def _spatial_blocks(self):
        n, h = self.n, self.h
        lap = sparse.diags([np.ones(n - 1), np.full(n, -2.0), np.ones(n - 1)],
                           [-1, 0, 1], format="lil")
        lap[0, 0], lap[0, 1], lap[0, 2] = 1.0, -2.0, 1.0
        lap[-1, -1], lap[-1, -2], lap[-1, -3] = 1.0, -2.0, 1.0
        lap = (lap / h**2).tocsr()
        dnu = sparse.lil_matrix((2, n))
        dnu[0, 0], dnu[0, 1], dnu[0, 2] = 3.0, -4.0, 1.0
        dnu[1, -1], dnu[1, -2], dnu[1, -3] = 3.0, -4.0, 1.0
        dnu = (dnu / (2 * h)).tocsr()
        tr = sparse.lil_matrix((2, n))
        tr[0, 0], tr[1, -1] = 1.0, 1.0
        return lap, dnu, tr.tocsr()

    def R_matrix(self) -> sparse.csr_matrix:
        if self._R is not None:
            return self._R
        M, n, dt = self.M, self.n, self.dt
        lap, dnu, tr = self._spatial_blocks()
        Ssp = -self.s0 * lap + self.da0 * sparse.identity(n)
        Ssurf = self.s0 * dnu + self.db0 * tr
        S_L = sparse.hstack([sparse.identity(M), sparse.csr_matrix((M, 1))]).tocsr()
        S_R = sparse.hstack([sparse.csr_matrix((M, 1)), sparse.identity(M)]).tocsr()
        E_Y = sparse.vstack([sparse.identity(M), sparse.csr_matrix((1, M))]).tocsr()
        E_Z = sparse.vstack([sparse.csr_matrix((1, M)), sparse.identity(M)]).tocsr()
        kron = sparse.kron
        EYn = kron(E_Y, sparse.identity(n))
        EZn = kron(E_Z, sparse.identity(n))
        self._R = sparse.bmat([
            [(kron((S_L - S_R) / dt, sparse.identity(n)) + kron(S_L, Ssp)) @ EYn,
             (-self.p.theta * kron(S_R, sparse.diags(self.mO))) @ EZn],
            [(kron((S_L - S_R) / dt, tr) + kron(S_L, Ssurf)) @ EYn,
             (-self.p.theta_s * kron(S_R, sparse.diags(self.mS) @ tr)) @ EZn],
            [None,
             (kron((S_R - S_L) / dt, sparse.identity(n)) + kron(S_R, Ssp)) @ EZn],
            [None,
             (kron((S_R - S_L) / dt, tr) + kron(S_R, Ssurf)) @ EZn],
            [kron(S_L, sparse.diags(self.sqrt_chi)) @ EYn, None],
        ], format="csr")
        return self._R

    def row_weights(self) -> np.ndarray:
        if self._wrow is None:
            dt, Hv = self.dt, self.Hvec
            ones2 = np.ones((1, 2))
            self._wrow = np.concatenate([
                (dt * self.w0[:, None] * Hv[None, :]).ravel(),
                (dt * self.w0[:, None] * ones2).ravel(),
                (dt * self.w0[:, None] * Hv[None, :]).ravel(),
                (dt * self.w0[:, None] * ones2).ravel(),
                (dt * self.w1[:, None] * Hv[None, :]).ravel(),
            ])
        return self._wrow

    def A_matrix(self) -> sparse.csc_matrix:
        if self._A is None:
            R = self.R_matrix()
            self._A = (R.T @ sparse.diags(self.row_weights()) @ R).tocsc()
        return self._A

    def _wmul(self, r: np.ndarray) -> np.ndarray:
        """Weight application with exact zeros: rows of zero weight kill
        whatever the raw residual holds (it may be unrepresentable there)."""
        w = self.row_weights()
        out = np.zeros_like(r)
        nz = w > 0
        out[nz] = w[nz] * r[nz]
        return out

    def apply_A(self, x: np.ndarray) -> np.ndarray:
        R = self.R_matrix()
        return R.T @ self._wmul(R @ x)

    # --- block helpers (dense, vectorized) ----------------------------------

    def unpack(self, x):
        M, n = self.M, self.n
        Yf = np.zeros((M + 1, n))
        Zf = np.zeros((M + 1, n))
        Yf[:M] = x[:M * n].reshape(M, n)
        Zf[1:] = x[M * n:].reshape(M, n)
        return Yf, Zf

    def pack(self, Yd, Zd):
        return np.concatenate([np.asarray(Yd).ravel(), np.asarray(Zd).ravel()])

    def block_shapes(self):
        M, n = self.M, self.n
        return [(M, n), (M, 2), (M, n), (M, 2), (M, n)]

    def split_stack(self, vec):
        out, o = [], 0
        for s in self.block_shapes():
            sz = int(np.prod(s))
            out.append(vec[o:o + sz].reshape(s))
            o += sz
        return tuple(out)

    def forward_blocks(self, x):
        """Unweighted residual blocks via the sparse stack."""
        return self.split_stack(self.R_matrix() @ x)

    def stack_norm_sq(self, x) -> float:
        r = self.R_matrix() @ x
        return float(np.dot(self._wmul(r), r))

    def b_pairing(self, x) -> float:
        return float(np.dot(self.rhs(), x))

    def rhs(self):
        p = self.p
        M, n, dt = self.M, self.n, self.dt
        bY = dt * (self.Hvec[None, :] * p.F.bulk[1:])
        bY[:, 0] += dt * p.F.surface[1:, 0]
        bY[:, -1] += dt * p.F.surface[1:, 1]
        bZ = dt * (self.Hvec[None, :] * p.G.bulk[1:])
        bZ[:, 0] += dt * p.G.surface[1:, 0]
        bZ[:, -1] += dt * p.G.surface[1:, 1]
        return self.pack(bY, bZ)

    def recover_fields(self, x):
        """Scale-safe (c16) recovery: the cell weight multiplies the slices
        before any stencil is applied, so weight-damped products never pass
        through unrepresentable intermediates."""
        p, dt, g = self.p, self.dt, self.g
        M, n = self.M, self.n
        Yf, Zf = self.unpack(x)
        w0c, w1c = self.w0[:, None], self.w1[:, None]

        Ya0, Yo0 = w0c * Yf[:-1], w0c * Yf[1:]
        Za0, Zo0 = w0c * Zf[1:], w0c * Zf[:-1]
        psi_b = (Ya0 - Yo0) / dt - self.s0 * sbp_laplacian(Ya0, g) \
            + self.da0 * Ya0 - p.theta * (w0c * Zf[1:]) * self.mO[None, :]
        psi_s = (Ya0[:, [0, -1]] - Yo0[:, [0, -1]]) / dt \
            + self.s0 * _dnu(Ya0, self.h) + self.db0 * Ya0[:, [0, -1]] \
            - p.theta_s * (w0c * Zf[1:])[:, [0, -1]] * self.mS[None, :]
        h_b = (Za0 - Zo0) / dt - self.s0 * sbp_laplacian(Za0, g) + self.da0 * Za0
        h_s = (Za0[:, [0, -1]] - Zo0[:, [0, -1]]) / dt \
            + self.s0 * _dnu(Za0, self.h) + self.db0 * Za0[:, [0, -1]]
        v_cells = -self.chi[None, :] * (w1c * Yf[:-1])
        return psi_b, psi_s, h_b, h_s, v_cells


def _dnu(y, h):
    left = (3 * y[..., 0] - 4 * y[..., 1] + y[..., 2]) / (2 * h)
    right = (3 * y[..., -1] - 4 * y[..., -2] + y[..., -3]) / (2 * h)
    return np.stack([left, right], axis=-1)


def _fields_to_dofs(st: _Stack, Y: SpaceTimeField, Z: SpaceTimeField):
    M = st.M
    if np.max(np.abs(Y.bulk[M])) > 1e-13 * (1 + np.max(np.abs(Y.bulk))):
        raise ContractError("Y must vanish at its terminal slice (space P)")
    if np.max(np.abs(Z.bulk[0])) > 1e-13 * (1 + np.max(np.abs(Z.bulk))):
        raise ContractError("Z must vanish at its initial slice (space P)")
    return st.pack(Y.bulk[:M].copy(), Z.bulk[1:].copy())


def apply_residual_R(Y: SpaceTimeField, Z: SpaceTimeField, problem: FIProblem) -> dict:
    """Weighted five-component residual stack of a test pair in P."""
    st = _Stack(problem)
    x = _fields_to_dofs(st, Y, Z)
    r1b, r1s, r3b, r3s, r5 = st.forward_blocks(x)
    w0 = np.where(st.w0 > 0, np.sqrt(st.w0), 0.0)[:, None]
    w1 = np.where(st.w1 > 0, np.sqrt(st.w1), 0.0)[:, None]
    return {"adjoint_bulk": w0 * r1b, "adjoint_surface": w0 * r1s,
            "forward_bulk": w0 * r3b, "forward_surface": w0 * r3s,
            "observation": w1 * r5}


def bilinear_B(problem: FIProblem, YZ, YZbar) -> float:
    """B((Y,Z),(Ybar,Zbar)) through the weighted residual stacks."""
    st = _Stack(problem)
    x = _fields_to_dofs(st, *YZ)
    xb = _fields_to_dofs(st, *YZbar)
    R = st.R_matrix()
    return float(np.dot(st.row_weights() * (R @ x), R @ xb))


def linear_F(problem: FIProblem, YZ) -> float:
    st = _Stack(problem)
    return st.b_pairing(_fields_to_dofs(st, *YZ))


class FISolver:
    """Reusable solver: the normal matrix and its factorization depend only
    on the geometry/weights, not on the sources, so outer-loop iterations
    share one factorization.  The solve is then a fixed linear map of the
    right-hand side, and increments of iterated solves inherit the
    contraction of the source corrections exactly."""

    def __init__(self, problem: FIProblem, n_refine: int = 2):
        self.problem = problem
        self.stack = _Stack(problem)
        self.n_refine = n_refine
        A = self.stack.A_matrix()
        diag = A.diagonal()
        # dofs whose diagonal sits > ~30 decades below the peak are
        # numerically invisible; pin them instead of letting subnormal
        # scales poison the factorization
        live = diag > 1e-30 * diag.max()
        self.D = np.where(live, 1.0 / np.sqrt(np.where(live, diag, 1.0)), 0.0)
        dead = (~live).astype(float)
        self.At = (sparse.diags(self.D) @ A @ sparse.diags(self.D)).tocsc() \
            + sparse.diags(dead)
        self._lu = None

    def _factorize(self):
        if self._lu is None:
            try:
                self._lu = splu(self.At)
            except RuntimeError as exc:
                raise ConditioningError(
                    f"sparse factorization failed: {exc}") from exc
        return self._lu

    def solve(self, F: SpaceTimeField | None = None,
              G: SpaceTimeField | None = None) -> FISolution:
        p = self.problem
        if F is not None or G is not None:
            p = FIProblem(F=F if F is not None else p.F,
                          G=G if G is not None else p.G,
                          theta=p.theta, theta_s=p.theta_s, grid=p.grid,
                          time_grid=p.time_grid, masks=p.masks, tables=p.tables,
                          chi=p.chi, ops=p.ops, cg_tol=p.cg_tol,
                          max_iter=p.max_iter, engine=p.engine)
        st = self.stack
        b = _Stack(p).rhs() if p is not self.problem else st.rhs()
        if not np.any(b):
            zero = SpaceTimeField.zeros(st.g, st.M + 1)
            sol = FISolution(Phi=zero, K=zero.copy(), Psi=zero.copy(),
                             H=zero.copy(), v=np.zeros((st.M + 1, st.n)),
                             cg_iters=0, optimality_residual=0.0, ritz_min=0.0,
                             ritz_max=0.0, h0_norm=0.0, engine=p.engine,
                             x_dofs=np.zeros(st.n_dofs))
            sol.log_norms = _solution_log_norms(st, p, sol)
            return sol
        bt = self.D * b
        if p.engine == "direct":
            lu = self._factorize()
            xt = lu.solve(bt)
            # fixed-count refinement keeps the solve a deterministic linear
            # map of b (no data-dependent branching)
            for _ in range(self.n_refine):
                xt = xt + lu.solve(bt - self.At @ xt)
            res = float(np.linalg.norm(bt - self.At @ xt)
                        / max(np.linalg.norm(bt), 1e-300))
            iters = self.n_refine
            rmin, rmax = _lanczos_bounds(self.At, bt, k=60)
        elif p.engine == "cg":
            xt, iters, res, rmin, rmax = _cg(self.At, bt, p.cg_tol, p.max_iter)
        else:
            raise ContractError(f"unknown FI engine '{p.engine}'")
        x = self.D * xt
        return _recover(_Stack(p) if p is not self.problem else st,
                        p, x, iters, res, rmin, rmax)


def solve_fi(problem: FIProblem) -> FISolution:
    """Solve the normal equations and recover (Psi, H, v) via (c16)."""
    return FISolver(problem).solve()


def _cg(At, bt, tol, max_iter):
    """Plain conjugate gradients on the scaled normal matrix.

    Retained for comparison runs; at faithful Carleman weights the scaled
    spectrum exceeds double precision and this engine stalls (reported via
    ConditioningError on a 500-iteration plateau).
    """
    nb = float(np.linalg.norm(bt))
    x = np.zeros_like(bt)
    r = bt.copy()
    p = r.copy()
    rho = float(r @ r)
    alphas, betas = [], []
    best, best_it = math.sqrt(rho), 0
    # convergent CG shows improvement gaps of a few thousand iterations at
    # kappa ~ 1e7; a 5000-iteration plateau marks a genuinely unresolvable
    # spectrum
    plateau = 5000
    it = 0
    while it < max_iter and math.sqrt(rho) > tol * nb:
        Ap = At @ p
        den = float(p @ Ap)
        if den <= 0:
            raise ConditioningError("CG breakdown: nonpositive curvature",
                                    iterations=it)
        al = rho / den
        x += al * p
        r -= al * Ap
        rn = float(r @ r)
        be = rn / rho
        alphas.append(al)
        betas.append(be)
        rho = rn
        p = r + be * p
        it += 1
        res = math.sqrt(rho)
        if res < best:
            best, best_it = res, it
        elif it - best_it >= plateau:
            rmin, rmax = _ritz_from_cg(alphas, betas)
            raise ConditioningError(
                f"CG stagnated for {plateau} iterations at relative residual "
                f"{res / nb:.3e}", iterations=it, ritz_min=rmin, ritz_max=rmax)
    rmin, rmax = _ritz_from_cg(alphas, betas)
    return x, it, math.sqrt(rho) / nb, rmin, rmax


def _ritz_from_cg(alphas, betas):
    from scipy.linalg import eigh_tridiagonal
    k = len(alphas)
    if k == 0:
        return 0.0, 0.0
    d = np.empty(k)
    e = np.empty(max(k - 1, 0))
    d[0] = 1.0 / alphas[0]
    for j in range(1, k):
        d[j] = 1.0 / alphas[j] + betas[j - 1] / alphas[j - 1]
        e[j - 1] = math.sqrt(max(betas[j - 1], 0.0)) / alphas[j - 1]
    if k == 1:
        return float(d[0]), float(d[0])
    vals = eigh_tridiagonal(d, e, eigvals_only=True)
    return float(vals[0]), float(vals[-1])


def _lanczos_bounds(At, seed_vec, k=60):
    """Extreme Ritz values of the scaled normal matrix (observability proxy)."""
    n = At.shape[0]
    v = seed_vec / max(np.linalg.norm(seed_vec), 1e-300)
    alphas, betas = [], []
    v_prev = np.zeros(n)
    beta = 0.0
    for _ in range(min(k, n)):
        w = At @ v - beta * v_prev
        alpha = float(v @ w)
        w -= alpha * v
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        if beta < 1e-300:
            break
        betas.append(beta)
        v_prev, v = v, w / beta
    from scipy.linalg import eigh_tridiagonal
    if len(alphas) == 1:
        return alphas[0], alphas[0]
    vals = eigh_tridiagonal(np.array(alphas), np.array(betas[:len(alphas) - 1]),
                            eigvals_only=True)
    return float(vals[0]), float(vals[-1])


def _recover(st: _Stack, p: FIProblem, x, iters, final_res, rmin, rmax) -> FISolution:
    M, n = st.M, st.n
    psi_b, psi_s, h_b, h_s, v_cells = st.recover_fields(x)
    for arr in (psi_b, psi_s, h_b, h_s, v_cells):
        if not np.all(np.isfinite(arr)):
            raise ConditioningError(
                "recovered fields overflow double range; weight spread too "
                "large for this configuration")

    Yf, Zf = st.unpack(x)
    Phi = SpaceTimeField.from_bulk(Yf) if np.all(np.isfinite(Yf)) else None
    K = SpaceTimeField.from_bulk(Zf) if np.all(np.isfinite(Zf)) else None

    Psi = SpaceTimeField.zeros(st.g, M + 1)
    Psi.bulk[1:] = psi_b            # forward view: cell k -> slice k+1
    Psi.surface[1:] = psi_s
    H = SpaceTimeField.zeros(st.g, M + 1)
    H.bulk[:M] = h_b                # backward view: cell k -> slice k
    H.surface[:M] = h_s

    v = np.zeros((M + 1, n))
    v[1:] = v_cells

    h0 = math.sqrt(max(float(np.dot(st.Hvec * H.bulk[0], H.bulk[0])
                             + np.dot(H.surface[0], H.surface[0])), 0.0))
    sol = FISolution(Phi=Phi, K=K, Psi=Psi, H=H, v=v, cg_iters=iters,
                     optimality_residual=final_res, ritz_min=rmin, ritz_max=rmax,
                     h0_norm=h0, engine=p.engine, x_dofs=x)
    sol.log_norms = _solution_log_norms(st, p, sol)
    return sol


def _solution_log_norms(st: _Stack, p: FIProblem, sol: FISolution) -> dict:
    g, dt = st.g, st.dt
    t = p.tables
    quad_b = g.trapezoid_weights()[None, :] * dt
    lmu0, lmu1, lmu3 = t.log_mu_k[0], t.log_mu_k[1], t.log_mu_k[3]
    out = {
        "mu0Psi": log_add(
            log_weighted_sq_sum(2 * lmu0[:, None], sol.Psi.bulk[1:], quad_b),
            log_weighted_sq_sum(2 * lmu0[:, None], sol.Psi.surface[1:], dt)),
        "mu0H": log_add(
            log_weighted_sq_sum(2 * lmu0[:, None], sol.H.bulk[:-1], quad_b),
            log_weighted_sq_sum(2 * lmu0[:, None], sol.H.surface[:-1], dt)),
        "mu1v": log_weighted_sq_sum(2 * lmu1[:, None], sol.v[1:], quad_b),
    }
    vt_b, _, lw_t = _cell_time_derivative(sol.v[1:], np.zeros((st.M, 2)), lmu3, dt)
    out["mu3vt"] = log_weighted_sq_sum(2 * lw_t[:, None], vt_b, quad_b)
    return out


def galerkin_check(sol: FISolution, problem: FIProblem, n_dirs: int, rng) -> dict:
    """Optimality in the quadratic-form geometry.

    Reports max over random directions of
        |B(x, d) - F(d)| / (||d||_B ||x||_B),
    the Cauchy-Schwarz-consistent relative Galerkin residual, against
    10 cg_tol.
    """
    st = _Stack(problem)
    x = sol.x_dofs
    resid = st.rhs() - st.apply_A(x)
    xB = math.sqrt(max(st.stack_norm_sq(x), 0.0))
    worst, details = 0.0, []
    for _ in range(n_dirs):
        d = rng.standard_normal(st.n_dofs)
        dB = math.sqrt(max(st.stack_norm_sq(d), 0.0))
        gal = abs(float(np.dot(resid, d)))
        scaled = gal / max(10 * problem.cg_tol * dB * xB, 1e-300)
        worst = max(worst, scaled)
        details.append((gal, dB))
    return {"max_scaled_residual": worst, "details": details,
            "pass": worst <= 1.0}


def operator_symmetry_gap(problem: FIProblem, rng, n_pairs: int = 5) -> float:
    """max |<Au, w> - <u, Aw>| scaled robustly over random pairs."""
    st = _Stack(problem)
    worst = 0.0
    for _ in range(n_pairs):
        u = rng.standard_normal(st.n_dofs)
        w = rng.standard_normal(st.n_dofs)
        Au, Aw = st.apply_A(u), st.apply_A(w)
        gap = abs(float(np.dot(Au, w) - np.dot(u, Aw)))
        scale = (_robust_norm(Au) * _robust_norm(w)
                 + _robust_norm(Aw) * _robust_norm(u)) + 1e-300
        worst = max(worst, gap / scale)
    return worst


def _robust_norm(v) -> float:
    m = float(np.max(np.abs(v)))
    if m == 0.0:
        return 0.0
    return m * float(np.linalg.norm(v / m))


def cascade_residual_check(sol: FISolution, problem: FIProblem) -> dict:
    """Does the recovered control solve the discrete linearized cascade?

    Re-solves the cascade with (F, G, v) through the production steppers
    and reports (a) the weak distributional residual of the re-solved pair
    (the solver contract), (b) the relative L2(0,T;L2) distance between
    the recovered pair and the re-solved one (a diagnostic of the
    weight-induced numerical null space; exact-zero on tame weights), and
    (c) the re-solved h(., first node) norm.
    """
    p = problem
    g, tg = p.grid, p.time_grid
    Psi_rs, H_rs = solve_linearized_cascade(p.ops, p.F, p.G, sol.v,
                                            p.theta, p.theta_s, p.masks)
    vmask = sol.v * p.masks.omega_nodes[None, :]
    Feff = SpaceTimeField(p.F.bulk + vmask, p.F.surface.copy())
    res_fwd = weak_residual(p.ops, Psi_rs, Feff)
    Geff = SpaceTimeField(
        p.G.bulk + p.theta * Psi_rs.bulk * p.masks.obs_bulk_nodes[None, :],
        p.G.surface + p.theta_s * Psi_rs.surface * p.masks.obs_surface_mask[None, :])
    res_bwd = weak_residual(p.ops, H_rs, Geff, backward=True)

    dt = tg.dt
    quad = g.trapezoid_weights()[None, :] * dt

    def st_dist(A_b, A_s, B_b, B_s):
        num = float(np.sum(quad * (A_b - B_b)**2) + dt * np.sum((A_s - B_s)**2))
        den = float(np.sum(quad * B_b**2) + dt * np.sum(B_s**2))
        return math.sqrt(num / max(den, 1e-300))

    dist_psi = st_dist(sol.Psi.bulk[1:], sol.Psi.surface[1:],
                       Psi_rs.bulk[1:], Psi_rs.surface[1:])
    dist_h = st_dist(sol.H.bulk[:-1], sol.H.surface[:-1],
                     H_rs.bulk[:-1], H_rs.surface[:-1])
    w = g.trapezoid_weights()
    h0_rs = math.sqrt(float(np.dot(w * H_rs.bulk[0], H_rs.bulk[0])
                            + np.dot(H_rs.surface[0], H_rs.surface[0])))
    return {"weak_residual_forward": res_fwd, "weak_residual_backward": res_bwd,
            "dist_psi": dist_psi, "dist_h": dist_h,
            "resolved_h0_norm": h0_rs,
            "resolved": (Psi_rs, H_rs)}


# --- weighted-estimate verification ----------------------------------------

def _log_sup_sq(log_w, cells_b, cells_s, grid):
    """log sup_k  w_k^2 * ||field_k||_{L2}^2."""
    Hv = grid.trapezoid_weights()
    nrm = np.einsum("kj,j,kj->k", cells_b, Hv, cells_b)
    if cells_s is not None:
        nrm = nrm + np.sum(cells_s**2, axis=1)
    pos = nrm > 0
    if not np.any(pos):
        return -math.inf
    return float(np.max(2 * np.asarray(log_w)[pos] + np.log(nrm[pos])))


def _log_int_sq(log_w, cells_b, cells_s, grid, dt, bulk_only=False,
                face_values=False):
    if face_values:
        quad = grid.h * dt
    else:
        quad = grid.trapezoid_weights()[None, :] * dt
    tot = log_weighted_sq_sum(2 * np.asarray(log_w)[:, None], cells_b, quad)
    if not bulk_only and cells_s is not None:
        tot = log_add(tot, log_weighted_sq_sum(2 * np.asarray(log_w)[:, None],
                                               cells_s, dt))
    return tot


def verify_p1(sol: FISolution, problem: FIProblem) -> dict:
    """LHS/RHS ratios for the control/state estimate and the v_t estimate."""
    src = problem.log_source_norms()
    log_rhs = log_add(src["muF"], src["muG"])
    ln = sol.log_norms
    lhs_c21 = log_add(ln["mu0Psi"], ln["mu0H"], ln["mu1v"])
    if lhs_c21 > -math.inf and log_rhs == -math.inf:
        raise ContractError("nonzero state from identically zero sources")
    return {"ratio_c21": log_ratio(lhs_c21, log_rhs),
            "ratio_c41": log_ratio(ln["mu3vt"], log_rhs),
            "log_lhs_c21": lhs_c21, "log_rhs": log_rhs}


def solution_summary(sol: FISolution, problem: FIProblem) -> dict:
    """Machine-readable per-solve summary (the JSON interface)."""
    p1 = verify_p1(sol, problem)
    p2 = verify_p2(sol, problem)
    return {
        "engine": sol.engine,
        "cg_iters": sol.cg_iters,
        "optimality_residual": sol.optimality_residual,
        "lhs_rhs_ratios": {
            "c21": p1["ratio_c21"], "c41": p1["ratio_c41"],
            "c25": p2["ratio_c25"], "c26": p2["ratio_c26"],
            "c27": p2["ratio_c27"], "c28": p2["ratio_c28"],
        },
        "h0_norm": sol.h0_norm,
        "v_norms": {"log_mu1v_sq": sol.log_norms["mu1v"],
                    "log_mu3vt_sq": sol.log_norms["mu3vt"]},
        "ritz": {"min": sol.ritz_min, "max": sol.ritz_max},
    }


class _FaceGrid:
    """Adapter: face arrays integrated with uniform weight h."""

    def __init__(self, grid: SpatialGrid):
        self._h = grid.h
        self._n = grid.node_count

    def trapezoid_weights(self):
        return np.full(self._n, self._h)


def live_masked_resolved_psi(sol: FISolution, problem: FIProblem) -> SpaceTimeField:
    """Re-solved forward state restricted to the weight-live window.

    The re-solved psi decays at the admissible rate, so its weighted norms
    are finite; masking the dead window (weights unbounded there, state
    below truncation level) makes it a member of the weighted space.  Its
    smoothness in time matters for the difference-quotient estimates: the
    pointwise (c16) field carries solver noise that time-differencing
    amplifies with the grid.
    """
    Psi_rs, _ = solve_linearized_cascade(problem.ops, problem.F, problem.G,
                                         sol.v, problem.theta, problem.theta_s,
                                         problem.masks)
    live = problem.tables.inv_sq(0) > 0
    Psi_rs.bulk[1:][~live] = 0.0
    Psi_rs.surface[1:][~live] = 0.0
    Psi_rs.bulk[0] = 0.0
    Psi_rs.surface[0] = 0.0
    return Psi_rs


def verify_p2(sol: FISolution, problem: FIProblem,
              Psi: SpaceTimeField | None = None,
              H: SpaceTimeField | None = None) -> dict:
    """The four additional weighted estimates; doubles as the X-norm pieces.

    Defaults: the forward state is the live-masked re-solved one (smooth in
    time, admissibly decaying); the backward state is the recovered (c16)
    field, the only representation whose early-time tail respects the
    exploding weights.
    """
    p = problem
    g, tg, t = p.grid, p.time_grid, p.tables
    dt = tg.dt
    if Psi is None:
        Psi = live_masked_resolved_psi(sol, p)
    if H is None:
        H = sol.H
    lm = {k: t.log_mu_k[k] for k in range(6)}

    Pb, Ps = Psi.bulk[1:], Psi.surface[1:]
    Hb, Hs = H.bulk[:-1], H.surface[:-1]

    gP = grad_faces(Pb, g)
    lapP = sbp_laplacian(Pb, g)
    gH = grad_faces(Hb, g)
    lapH = sbp_laplacian(Hb, g)
    Pt_b, Pt_s, lw3 = _cell_time_derivative(Pb, Ps, lm[3], dt)
    Ht_b, Ht_s, _ = _cell_time_derivative(Hb, Hs, lm[3], dt)
    _, _, lw4 = _cell_time_derivative(Pb, Ps, lm[4], dt)
    _, _, lw5 = _cell_time_derivative(Pb, Ps, lm[5], dt)
    gPt = grad_faces(Pt_b, g)
    lapPt = sbp_laplacian(Pt_b, g)
    Ptt_b = np.diff(Pt_b, axis=0) / dt
    Ptt_s = np.diff(Pt_s, axis=0) / dt
    lw5c = lm[5][1:-1]

    src = problem.log_source_norms()
    log_rhs_a = log_add(src["muF"], src["muG"])
    log_rhs_b = log_add(log_rhs_a, src["mu4Ft"])

    fg = _FaceGrid(g)
    lhs_c25 = log_add(
        _log_sup_sq(lm[2], Pb, Ps, g),
        _log_int_sq(lm[2], gP, None, g, dt, face_values=True),
        _log_sup_sq(lm[2], Hb, Hs, g),
        _log_int_sq(lm[2], gH, None, g, dt, face_values=True))
    lhs_c26 = log_add(
        _log_sup_sq(lm[3], gP, None, fg),
        _log_int_sq(lw3, Pt_b, Pt_s, g, dt),
        _log_int_sq(lm[3], lapP, None, g, dt, bulk_only=True),
        _log_sup_sq(lm[3], gH, None, fg),
        _log_int_sq(lw3, Ht_b, Ht_s, g, dt),
        _log_int_sq(lm[3], lapH, None, g, dt, bulk_only=True))
    lhs_c27 = log_add(
        _log_sup_sq(lw4, Pt_b, Pt_s, g),
        _log_int_sq(lw4, gPt, None, g, dt, face_values=True))
    lhs_c28 = log_add(
        _log_sup_sq(lw5, gPt, None, fg),
        _log_int_sq(lw5c, Ptt_b, Ptt_s, g, dt),
        _log_int_sq(lw5, lapPt, None, g, dt, bulk_only=True),
        _log_sup_sq(lm[5], lapP, None, g))

    return {
        "ratio_c25": log_ratio(lhs_c25, log_rhs_a),
        "ratio_c26": log_ratio(lhs_c26, log_rhs_a),
        "ratio_c27": log_ratio(lhs_c27, log_rhs_b),
        "ratio_c28": log_ratio(lhs_c28, log_rhs_b),
        "log_lhs": {"c25": lhs_c25, "c26": lhs_c26, "c27": lhs_c27, "c28": lhs_c28},
        "log_rhs": {"a": log_rhs_a, "b": log_rhs_b},
    }
