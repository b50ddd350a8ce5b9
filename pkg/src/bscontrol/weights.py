"""Carleman weight system: eta profile, alpha/xi/beta/zeta tables, mu family.

Everything is stored and combined in log-space.  The weight exponents
behave like C/t near t = 0 and reach several hundred in natural-log units
even at the most permissive admissible parameters, so plain doubles
overflow; sums of weighted squares are accumulated with logsumexp and
every verification ratio is an exponent difference.

Time-dependent tables are sampled at the cell midpoints t_{c-1/2}, never
at t = 0 or T where the continuous weights are singular.

Conventions:
  alpha(x,t) = (e^{2*lam*m} - e^{lam*(m+eta(x))}) / (t(T-t))
  xi(x,t)    = e^{lam*(m+eta(x))} / (t(T-t))
  beta, zeta = same numerators over ell(t), where ell(t) = t(T-t) on
               [0, T/2] and T^2/4 on [T/2, T]
  gamma      = beta_hat/5 with beta_hat(t) = max_x beta(x,t)
  mu   = e^{5 s gamma} ell^{3/2}      mu0 = e^{4 s gamma} ell^{3/2}
  mu1  = mu0 ell^2                    mu_k = e^{3 s gamma} ell^{(2k+9)/2},
                                            k = 2..5
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, ParameterError, ResolutionError
from .geometry import (RegionMasks, SpaceTimeField, SpatialGrid, TimeGrid,
                       grad_faces, normal_derivative, sbp_laplacian)

LOG_UNDERFLOW = -700.0  # squared inverse weights below e^{-700} become exact 0


def log_weighted_sq_sum(log_w, values, quad) -> float:
    """log( sum quad * exp(log_w) * values^2 ), accumulated stably.

    `log_w`, `values`, `quad` broadcast together; entries with values == 0
    contribute nothing.  Returns -inf for an identically zero field.
    """
    b = np.broadcast_arrays(np.asarray(log_w, dtype=float),
                            np.asarray(values, dtype=float),
                            np.asarray(quad, dtype=float))
    lw, v, q = (x.ravel() for x in b)
    coeff = q * v * v
    if not np.any(coeff > 0):
        return -math.inf
    return float(logsumexp(lw[coeff > 0], b=coeff[coeff > 0]))


def log_add(*log_values: float) -> float:
    vals = [v for v in log_values if v != -math.inf]
    if not vals:
        return -math.inf
    return float(logsumexp(np.array(vals)))


def log_ratio(log_num: float, log_den: float) -> float:
    """exp(log_num - log_den) with the 0/0 -> 0 convention."""
    if log_num == -math.inf:
        return 0.0
    if log_den == -math.inf:
        return math.inf
    return float(math.exp(min(log_num - log_den, 700.0)))


# --- eta profile ------------------------------------------------------------

@dataclass(frozen=True)
class EtaProfile:
    values: np.ndarray
    deriv: np.ndarray
    peak: float
    floor: float           # measured min |eta'| outside omega1
    floor_required: float


def _quintic_arc(kappa_end: float) -> np.ndarray:
    """Coefficients of p(u) = sum c_k u^k with p(0)=0, p'(0)=1, p''(0)=0,
    p(1)=1, p'(1)=0, p''(1)=kappa_end."""
    A = np.zeros((6, 6))
    rhs = np.array([0.0, 1.0, 0.0, 1.0, 0.0, kappa_end])
    powers = np.arange(6)
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    A[2, 2] = 2.0
    A[3] = 1.0
    A[4] = powers
    A[5] = powers * (powers - 1)
    return np.linalg.solve(A, rhs)


def _polyval(coeff: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.polyval(coeff[::-1], u)


def build_eta(grid: SpatialGrid, masks: RegionMasks, peak: float,
              kappa_base: float = -10.0, n_check: int = 10_000) -> EtaProfile:
    """Piecewise-quintic profile: 0 at both ends, 1 at the peak, monotone arcs.

    The two Hermite arcs share the second derivative at the peak
    (kappa_base / max(c, L-c)^2 in x units) so eta is C^2.  Monotonicity
    and the gradient floor outside omega1 are verified on a dense sample;
    violations raise with the measured floor.
    """
    L, c = grid.length, float(peak)
    if not (masks.omega1[0] < c < masks.omega1[1]):
        raise ContractError(
            f"eta peak {c} must lie strictly inside omega1={masks.omega1}")
    span = max(c, L - c)
    d2_peak = kappa_base / span**2
    arc_l = _quintic_arc(d2_peak * c**2)
    arc_r = _quintic_arc(d2_peak * (L - c)**2)

    def eval_eta(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        on_left = x <= c
        u = np.where(on_left, x / c, (L - x) / (L - c))
        val = np.where(on_left, _polyval(arc_l, u), _polyval(arc_r, u))
        dl = np.polyder(np.poly1d(arc_l[::-1]))
        dr = np.polyder(np.poly1d(arc_r[::-1]))
        der = np.where(on_left, dl(u) / c, -dr(u) / (L - c))
        return val, der

    xs = np.linspace(0.0, L, n_check)
    vals, ders = eval_eta(xs)
    inside = (xs > 0) & (xs < L)
    if vals[inside].min() <= 0 or vals.max() > 1 + 1e-12:
        raise ContractError("eta profile failed 0 < eta <= 1 on the dense sample")
    # monotone on each side away from the peak
    lo, hi = masks.omega1
    left_of = xs < lo
    right_of = xs > hi
    if ders[left_of].min() <= 0 or ders[right_of].max() >= 0:
        raise ContractError("eta arcs are not strictly monotone outside omega1")
    floor = float(np.min(np.abs(ders[left_of | right_of])))
    required = 0.5 / span
    if floor < required:
        raise ContractError(
            f"eta gradient floor outside omega1 is {floor:.6g}, below the "
            f"required {required:.6g}")

    values, deriv = eval_eta(grid.x)
    values[0] = values[-1] = 0.0
    return EtaProfile(values=values, deriv=deriv, peak=c, floor=floor,
                      floor_required=required)


# --- parameters -------------------------------------------------------------

@dataclass(frozen=True)
class WeightParams:
    lam: float = 1.0
    m: float = 2.3
    s_coeff: float = 1.0      # s = s_coeff * (T + T^2)
    rho_clip: float = 700.0


@dataclass(frozen=True)
class ValidatedParams:
    lam: float
    m: float
    s: float
    s_coeff: float
    rho_clip: float
    m_threshold: float


def m_threshold(lam: float) -> float:
    return math.log(5.0 * math.exp(lam) - 4.0) / lam


def validate_params(p: WeightParams, horizon: float) -> ValidatedParams:
    if p.lam < 1.0:
        raise ParameterError(f"lambda must be >= 1, got {p.lam}")
    if p.s_coeff < 1.0:
        raise ParameterError(f"s coefficient must be >= 1, got {p.s_coeff}")
    if p.rho_clip <= 0:
        raise ParameterError("rho_clip must be positive")
    thr = m_threshold(p.lam)
    if not p.m > thr:
        raise ParameterError(
            f"m={p.m} too small: the beta_hat < 1.25*beta_check condition "
            f"needs m > log(5 e^lambda - 4)/lambda = {thr:.6f}",
            threshold=thr)
    s = p.s_coeff * (horizon + horizon**2)
    if s < 1.0:
        raise ParameterError(f"s = {s} must be >= 1")
    return ValidatedParams(lam=p.lam, m=p.m, s=s, s_coeff=p.s_coeff,
                           rho_clip=p.rho_clip, m_threshold=thr)


# --- weight tables ----------------------------------------------------------

def ell_value(t, horizon: float):
    t = np.asarray(t, dtype=float)
    return np.where(t <= horizon / 2, t * (horizon - t), horizon**2 / 4)


def ell_prime(t, horizon: float):
    t = np.asarray(t, dtype=float)
    return np.where(t <= horizon / 2, horizon - 2 * t, 0.0)


@dataclass
class WeightTables:
    params: ValidatedParams
    t_mid: np.ndarray                 # (M,)
    ell: np.ndarray                   # (M,)
    gamma: np.ndarray                 # (M,)
    beta_hat: np.ndarray
    beta_check: np.ndarray
    log_mu: np.ndarray                # (M,)
    log_mu_k: np.ndarray              # (6, M): mu0..mu5
    log_alpha: np.ndarray             # (M, N+1)
    log_xi: np.ndarray
    log_beta: np.ndarray
    log_zeta: np.ndarray
    n_live: int = 0                   # cells where mu0^{-2} survives underflow
    clamp_events: list = field(default_factory=list)

    def safe_exp(self, log_values, context: str):
        """exp with the +rho_clip guard; clamped sites are flagged by cell."""
        lv = np.asarray(log_values, dtype=float)
        over = lv > self.params.rho_clip
        if np.any(over):
            cells = np.unique(np.nonzero(np.atleast_2d(over))[0]).tolist()
            self.clamp_events.append((context, cells))
            lv = np.minimum(lv, self.params.rho_clip)
        return np.exp(lv)

    def check_clamp_budget(self):
        """Clamping is tolerated only on the first/last two time cells."""
        M = self.t_mid.size
        for context, cells in self.clamp_events:
            bad = [c for c in cells if 2 <= c < M - 2]
            if bad:
                raise ResolutionError(
                    f"weight exponent clamped away from the time endpoints "
                    f"(context={context}, cells={bad}): weights unresolvable "
                    f"at this grid")

    def inv_sq(self, k: int) -> np.ndarray:
        """mu_k^{-2} per cell; exact 0 below the e^{-700} underflow cut."""
        lw = -2.0 * self.log_mu_k[k]
        out = np.where(lw <= LOG_UNDERFLOW, 0.0, np.exp(np.maximum(lw, LOG_UNDERFLOW)))
        return out


def build_weight_tables(grid: SpatialGrid, time_grid: TimeGrid, eta: EtaProfile,
                        params: ValidatedParams, min_live_cells: int = 8) -> WeightTables:
    lam, m, s = params.lam, params.m, params.s
    T = time_grid.horizon
    tm = time_grid.midpoints
    tT = tm * (T - tm)
    ell = ell_value(tm, T)
    log_ell = np.log(ell)

    # numerators: K(x) = e^{2 lam m} - e^{lam (m + eta)}, positive since m > 1 >= eta
    expo = lam * (m + eta.values)                      # (N+1,)
    K = math.exp(2 * lam * m) - np.exp(expo)
    if K.min() <= 0:
        raise ParameterError("weight numerator must be positive; check m > 1")
    log_K = np.log(K)

    log_alpha = log_K[None, :] - np.log(tT)[:, None]
    log_xi = expo[None, :] - np.log(tT)[:, None]
    log_beta = log_K[None, :] - log_ell[:, None]
    log_zeta = expo[None, :] - log_ell[:, None]

    beta_hat = K.max() / ell
    beta_check = K.min() / ell
    if not np.all(beta_hat < 1.25 * beta_check):
        raise ParameterError("beta_hat < (5/4) beta_check failed; increase m")
    gamma = beta_hat / 5.0

    log_mu = 5 * s * gamma + 1.5 * log_ell
    log_mu_k = np.empty((6, tm.size))
    log_mu_k[0] = 4 * s * gamma + 1.5 * log_ell
    log_mu_k[1] = log_mu_k[0] + 2 * log_ell
    for k in range(2, 6):
        log_mu_k[k] = 3 * s * gamma + (2 * k + 9) / 2 * log_ell

    tables = WeightTables(params=params, t_mid=tm, ell=ell, gamma=gamma,
                          beta_hat=beta_hat, beta_check=beta_check,
                          log_mu=log_mu, log_mu_k=log_mu_k,
                          log_alpha=log_alpha, log_xi=log_xi,
                          log_beta=log_beta, log_zeta=log_zeta)
    tables.n_live = int(np.count_nonzero(tables.inv_sq(0) > 0))
    if tables.n_live < min_live_cells:
        raise ResolutionError(
            f"only {tables.n_live} time cells carry a nonzero mu0^-2 weight "
            f"(need >= {min_live_cells}); the weighted least-squares problem "
            f"degenerates.  Increase T or refine the time grid.")
    return tables


def admissible_time_profile(tables: WeightTables) -> np.ndarray:
    """Normalized profile w(t) with mu(t) w(t) constant: the critical decay
    rate making weighted source norms finite.  Peaks at 1."""
    lm = tables.log_mu
    return np.exp(lm.min() - lm)


def check_elementary_estimates(tables: WeightTables, dt: float) -> dict:
    """Empirical constants for the mu-family inequalities.

    The algebraic identity mu3 mu1^{-2} = mu^{-1} ell^2 is exact in
    log-space and must hold to 1e-12; the algebraic inequalities are
    global exponent differences.  The differential inequalities use
    centered differences on the midpoint grid, restricted to the
    weight-live window: where mu0^{-2} underflows, a time cell cannot
    resolve d/dt of exp(-C/t) and the quotient is unrepresentable (and
    unused by every weighted functional).
    """
    lm, lmk, lell = tables.log_mu, tables.log_mu_k, np.log(tables.ell)
    report = {}
    identity = lmk[3] - 2 * lmk[1] + lm - 2 * lell
    report["identity_mu3_mu1_mu_ell"] = float(np.max(np.abs(identity)))
    # near t=0 the stored logs reach 1e4+, so eps*|log| exceeds 1e-12 there;
    # the tolerance applies where the weights are resolvable
    live0 = tables.inv_sq(0) > 0
    report["identity_max_live"] = float(np.max(np.abs(identity[live0]))) \
        if np.any(live0) else math.nan

    report["C_mu0_le_mu"] = float(np.exp(np.max(lmk[0] - lm)))
    report["C_mu_le_mu5sq"] = float(np.exp(np.max(lm - 2 * lmk[5])))
    for k in range(1, 6):
        report[f"C_mu{k}_le_mu{k - 1}"] = float(np.exp(np.max(lmk[k] - lmk[k - 1])))

    live = tables.inv_sq(0) > 0
    c = slice(1, -1)
    up, dn = slice(2, None), slice(None, -2)
    ok = live[c] & live[up] & live[dn]
    report["live_cells_used"] = int(np.count_nonzero(ok))

    def centered(expo_up, expo_dn):
        vals = (np.exp(np.where(ok, expo_up, -np.inf))
                - np.exp(np.where(ok, expo_dn, -np.inf))) / (2 * dt)
        return float(np.max(np.abs(vals))) if np.any(ok) else math.nan

    # |mu3_t| <= C mu1
    report["C_mu3t_le_mu1"] = centered(lmk[3][up] - lmk[1][c],
                                       lmk[3][dn] - lmk[1][c])
    # (mu3 mu1^{-2})_t <= C mu^{-1}; log(mu3 mu1^{-2}) = -log mu + 2 log ell
    log_D = -lm + 2 * lell
    report["C_D_mu3mu1_t"] = centered(log_D[up] + lm[c], log_D[dn] + lm[c])
    # |mu_k mu_{k,t}| <= C mu_{k-1}^2 for k in 2..5
    for k in range(2, 6):
        report[f"C_mu{k}_mu{k}t"] = centered(
            lmk[k][c] + lmk[k][up] - 2 * lmk[k - 1][c],
            lmk[k][c] + lmk[k][dn] - 2 * lmk[k - 1][c])
    return report


# --- cutoff -----------------------------------------------------------------

@dataclass(frozen=True)
class ChiBump:
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def _smoothstep(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = ((6 * u - 15) * u + 10) * u**3
    d1 = ((30 * u - 60) * u + 30) * u**2
    d2 = ((120 * u - 180) * u + 60) * u
    return s, d1, d2


def build_chi(grid: SpatialGrid, masks: RegionMasks) -> ChiBump:
    """C^2 cutoff: 1 on omega3, smoothstep ramps, exactly 0 outside omega."""
    (oa, ob), (ia, ib) = masks.omega, masks.omega3
    if ia - oa < 2 * grid.h or ob - ib < 2 * grid.h:
        raise ResolutionError(
            "omega3 is not compactly inside omega at this resolution "
            f"(ramp widths {ia - oa:.4g}, {ob - ib:.4g} < 2h = {2 * grid.h:.4g})")
    x = grid.x
    val = np.zeros_like(x)
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    val[(x >= ia) & (x <= ib)] = 1.0

    left = (x > oa) & (x < ia)
    u = (x[left] - oa) / (ia - oa)
    s, s1, s2 = _smoothstep(u)
    val[left], d1[left], d2[left] = s, s1 / (ia - oa), s2 / (ia - oa) ** 2

    right = (x > ib) & (x < ob)
    u = (ob - x[right]) / (ob - ib)
    s, s1, s2 = _smoothstep(u)
    val[right], d1[right], d2[right] = s, -s1 / (ob - ib), s2 / (ob - ib) ** 2
    return ChiBump(values=val, d1=d1, d2=d2)


# --- Carleman functionals ---------------------------------------------------

def _midpoint_pieces(Phi: SpaceTimeField, grid: SpatialGrid, dt: float):
    """Cell-midpoint samples of the field, its time derivative, Laplacian,
    face gradient and normal derivative (arrays indexed by cell)."""
    b, srf = Phi.bulk, Phi.surface
    b_mid = 0.5 * (b[1:] + b[:-1])
    s_mid = 0.5 * (srf[1:] + srf[:-1])
    b_t = (b[1:] - b[:-1]) / dt
    s_t = (srf[1:] - srf[:-1]) / dt
    lap = sbp_laplacian(b_mid, grid)
    gradf = grad_faces(b_mid, grid)
    dnu = normal_derivative(b_mid, grid)
    return b_mid, s_mid, b_t, s_t, lap, gradf, dnu


def _window(tables: WeightTables, t1: float, t2: float) -> np.ndarray:
    return (tables.t_mid >= t1) & (tables.t_mid <= t2)


class _LogAccumulator:
    """Collects (log-weight, value, quadrature) triples per named component.

    The total is produced two independent ways (per-component logsumexp
    then combine, vs one flat logsumexp over every term) so the two-route
    agreement check is a genuine redundancy oracle.
    """

    def __init__(self):
        self._pairs = []   # (name, log_w flat, coeff flat)

    def add(self, name: str, log_w, values, quad):
        b = np.broadcast_arrays(np.asarray(log_w, dtype=float),
                                np.asarray(values, dtype=float),
                                np.asarray(quad, dtype=float))
        lw, v, q = (x.ravel() for x in b)
        coeff = q * v * v
        keep = coeff > 0
        self._pairs.append((name, lw[keep], coeff[keep]))

    def result(self) -> dict:
        comps = {}
        for name, lw, coeff in self._pairs:
            comps[name] = (float(logsumexp(lw, b=coeff)) if lw.size else -math.inf)
        all_lw = np.concatenate([lw for _, lw, _ in self._pairs]) \
            if self._pairs else np.empty(0)
        all_c = np.concatenate([c for _, _, c in self._pairs]) \
            if self._pairs else np.empty(0)
        flat = float(logsumexp(all_lw, b=all_c)) if all_lw.size else -math.inf
        return {"components": comps,
                "log_total": log_add(*comps.values()),
                "log_total_flat": flat}


def carleman_functional_I(Phi: SpaceTimeField, tables: WeightTables,
                          grid: SpatialGrid, dt: float,
                          t1: float = 0.0, t2: float = math.inf) -> dict:
    """Alpha-weighted functional: e^{-2 s alpha} against (s xi)-power factors.

    Tangential-gradient and Laplace-Beltrami surface terms are identically
    zero in 1D and reported as -inf components.
    """
    if not np.allclose(Phi.bulk[:, [0, -1]], Phi.surface, rtol=0, atol=1e-12):
        raise ContractError("carleman_functional_I expects trace-compatible slices")
    p = tables.params
    s, lam = p.s, p.lam
    sel = _window(tables, t1, t2)
    quad_b = grid.trapezoid_weights()[None, :] * dt
    quad_s = dt

    b_mid, s_mid, b_t, s_t, lap, gradf, dnu = _midpoint_pieces(Phi, grid, dt)
    la, lx = tables.log_alpha[sel], tables.log_xi[sel]
    la_face = 0.5 * (la[:, 1:] + la[:, :-1])
    lx_face = 0.5 * (lx[:, 1:] + lx[:, :-1])
    la_G, lx_G = la[:, [0, -1]], lx[:, [0, -1]]
    log_s = math.log(s)
    quad_f = grid.h * dt

    acc = _LogAccumulator()
    acc.add("bulk_time_deriv", -2 * s * np.exp(la) - log_s - lx, b_t[sel], quad_b)
    acc.add("bulk_laplacian", -2 * s * np.exp(la) - log_s - lx, lap[sel], quad_b)
    acc.add("bulk_gradient",
            -2 * s * np.exp(la_face) + math.log(lam**2 * s) + lx_face,
            gradf[sel], quad_f)
    acc.add("bulk_value",
            -2 * s * np.exp(la) + math.log(lam**4 * s**3) + 3 * lx,
            b_mid[sel], quad_b)
    acc.add("surface_time_deriv", -2 * s * np.exp(la_G) - log_s - lx_G,
            s_t[sel], quad_s)
    acc.add("surface_tangential_laplacian", -math.inf, np.zeros(1), 0.0)
    acc.add("surface_tangential_gradient", -math.inf, np.zeros(1), 0.0)
    acc.add("surface_value",
            -2 * s * np.exp(la_G) + math.log(lam**3 * s**3) + 3 * lx_G,
            s_mid[sel], quad_s)
    acc.add("normal_derivative",
            -2 * s * np.exp(la_G) + math.log(lam * s) + lx_G,
            dnu[sel], quad_s)
    return acc.result()


def carleman_functional_Jw(Phi: SpaceTimeField, tables: WeightTables,
                           grid: SpatialGrid, dt: float,
                           t1: float = 0.0, t2: float = math.inf) -> dict:
    """Beta-weighted functional: e^{-2 s beta} against ell-power factors."""
    if not np.allclose(Phi.bulk[:, [0, -1]], Phi.surface, rtol=0, atol=1e-12):
        raise ContractError("carleman_functional_Jw expects trace-compatible slices")
    s = tables.params.s
    sel = _window(tables, t1, t2)
    quad_b = grid.trapezoid_weights()[None, :] * dt
    quad_f = grid.h * dt

    b_mid, s_mid, b_t, s_t, lap, gradf, dnu = _midpoint_pieces(Phi, grid, dt)
    lb = tables.log_beta[sel]
    lb_face = 0.5 * (lb[:, 1:] + lb[:, :-1])
    lb_G = lb[:, [0, -1]]
    lell = np.log(tables.ell[sel])[:, None]

    acc = _LogAccumulator()
    acc.add("bulk_time_deriv", -2 * s * np.exp(lb) + lell, b_t[sel], quad_b)
    acc.add("bulk_laplacian", -2 * s * np.exp(lb) + lell, lap[sel], quad_b)
    acc.add("bulk_gradient", -2 * s * np.exp(lb_face) - lell, gradf[sel], quad_f)
    acc.add("bulk_value", -2 * s * np.exp(lb) - 3 * lell, b_mid[sel], quad_b)
    acc.add("surface_time_deriv", -2 * s * np.exp(lb_G) + lell, s_t[sel], dt)
    acc.add("surface_tangential_laplacian", -math.inf, np.zeros(1), 0.0)
    acc.add("surface_tangential_gradient", -math.inf, np.zeros(1), 0.0)
    acc.add("surface_value", -2 * s * np.exp(lb_G) - 3 * lell, s_mid[sel], dt)
    acc.add("normal_derivative", -2 * s * np.exp(lb_G) - lell, dnu[sel], dt)
    return acc.result()


def empirical_carleman_check(n_samples: int, tables: WeightTables,
                             grid: SpatialGrid, time_grid: TimeGrid,
                             masks: RegionMasks, adjoint_solver, rng) -> dict:
    """Solve the adjoint cascade for random smooth sources and bound both
    Carleman estimates empirically.

    `adjoint_solver(f1, g1)` must return (Phi, K) solving the adjoint
    cascade: K forward from zero data with source g1, Phi backward from
    zero terminal data with source f1 + theta*K*1_O (surface analogues).
    The returned max LHS/RHS ratios are the empirical constants; the run
    itself is the oracle and its value a regression baseline.
    """
    p = tables.params
    s, lam = p.s, p.lam
    dt = time_grid.dt
    quad_b = grid.trapezoid_weights()[None, :] * dt
    omega3 = masks.omega3_nodes.astype(float)

    max_I, max_J = 0.0, 0.0
    for _ in range(n_samples):
        f1, g1 = _random_smooth_source(grid, time_grid, rng), _random_smooth_source(grid, time_grid, rng)
        Phi, K = adjoint_solver(f1, g1)

        lhs_I = log_add(carleman_functional_I(Phi, tables, grid, dt)["log_total"],
                        carleman_functional_I(K, tables, grid, dt)["log_total"])
        lhs_J = log_add(carleman_functional_Jw(Phi, tables, grid, dt)["log_total"],
                        carleman_functional_Jw(K, tables, grid, dt)["log_total"])

        la, lx, lb = tables.log_alpha, tables.log_xi, tables.log_beta
        la_G, lb_G = la[:, [0, -1]], lb[:, [0, -1]]
        lell = np.log(tables.ell)[:, None]
        phi_mid = 0.5 * (Phi.bulk[1:] + Phi.bulk[:-1])
        f1_mid = 0.5 * (f1.bulk[1:] + f1.bulk[:-1])
        g1_mid = 0.5 * (g1.bulk[1:] + g1.bulk[:-1])
        f1s_mid = 0.5 * (f1.surface[1:] + f1.surface[:-1])
        g1s_mid = 0.5 * (g1.surface[1:] + g1.surface[:-1])

        rhs_I = log_add(
            log_weighted_sq_sum(-2 * s * np.exp(la) + math.log(s**7 * lam**8) + 7 * lx,
                                phi_mid * omega3[None, :], quad_b),
            log_weighted_sq_sum(-2 * s * np.exp(la) + math.log(s**3 * lam**4) + 3 * lx,
                                f1_mid, quad_b),
            log_weighted_sq_sum(-2 * s * np.exp(la), g1_mid, quad_b),
            log_weighted_sq_sum(-2 * s * np.exp(la_G), f1s_mid, dt),
            log_weighted_sq_sum(-2 * s * np.exp(la_G), g1s_mid, dt))
        rhs_J = log_add(
            log_weighted_sq_sum(-2 * s * np.exp(lb) - 7 * lell,
                                phi_mid * omega3[None, :], quad_b),
            log_weighted_sq_sum(-2 * s * np.exp(lb) - 3 * lell, f1_mid, quad_b),
            log_weighted_sq_sum(-2 * s * np.exp(lb), g1_mid, quad_b),
            log_weighted_sq_sum(-2 * s * np.exp(lb_G), f1s_mid, dt),
            log_weighted_sq_sum(-2 * s * np.exp(lb_G), g1s_mid, dt))

        max_I = max(max_I, log_ratio(lhs_I, rhs_I))
        max_J = max(max_J, log_ratio(lhs_J, rhs_J))
    return {"max_ratio_alpha": max_I, "max_ratio_beta": max_J,
            "samples": n_samples}


def _random_smooth_source(grid: SpatialGrid, time_grid: TimeGrid, rng) -> SpaceTimeField:
    """Random low-frequency space-time field (trace-compatible)."""
    x = grid.x / grid.length
    t = time_grid.nodes / time_grid.horizon
    out = np.zeros((t.size, x.size))
    for kx in range(3):
        for kt in range(3):
            amp = rng.standard_normal() / (1 + kx + kt)
            phx, pht = rng.uniform(0, 2 * np.pi, size=2)
            out += amp * np.outer(np.cos(2 * np.pi * kt * t + pht),
                                  np.cos(np.pi * kx * x + phx))
    return SpaceTimeField.from_bulk(out)


def dump_weight_csv(tables: WeightTables, path) -> None:
    """CSV of the time-only weight profiles (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ell", "gamma", "log_mu"]
                   + [f"log_mu{k}" for k in range(6)])
        for i in range(tables.t_mid.size):
            row = [tables.t_mid[i], tables.ell[i], tables.gamma[i], tables.log_mu[i]]
            row += [tables.log_mu_k[k][i] for k in range(6)]
            w.writerow([f"{v:.17g}" for v in row])
