import math

import numpy as np
import pytest

from bscontrol.cli import build_setup, load_config
from bscontrol.fi import FIProblem, solve_fi
from bscontrol.geometry import SpaceTimeField
from bscontrol.insensitize import SynthesisBundle
from bscontrol.solvers import LinearOperatorSet, coefficient_preset
from bscontrol.weights import WeightTables, admissible_time_profile


def make_bundle(N=64, M=128, T=8.0, preset="logistic", amplitude=1e-3,
                family="gaussian", seed=12345, **extra):
    cfg = load_config(None)
    cfg.raw["grid"]["cells"] = str(N)
    cfg.raw["time"]["steps"] = str(M)
    cfg.raw["time"]["horizon"] = str(T)
    cfg.raw["coefficients"] = {"preset": preset}
    cfg.raw["source"]["amplitude"] = str(amplitude)
    cfg.raw["source"]["family"] = family
    cfg.raw["run"]["seed"] = str(seed)
    for key, val in extra.items():
        section, name = key.split("__")
        cfg.raw[section][name] = str(val)
    return build_setup(cfg)


def make_tame_bundle(N=32, M=32, T=8.0):
    """Bundle with synthetic O(1) weight tables (no time singularity):
    every cell is live, the quadratic form is resolvable to roundoff, and
    the solve/recovery plumbing can be oracled directly.  Test-only."""
    bundle, _ = make_bundle(N=N, M=M, T=T)
    tables = bundle.tables
    tm = tables.t_mid
    mild = 0.5 + 0.2 * np.sin(2 * np.pi * tm / T)
    log_mu_k = np.stack([(1.0 + 0.1 * k) * mild for k in range(6)])
    synthetic = WeightTables(
        params=tables.params, t_mid=tm, ell=tables.ell, gamma=tables.gamma,
        beta_hat=tables.beta_hat, beta_check=tables.beta_check,
        log_mu=2.0 * mild, log_mu_k=log_mu_k,
        log_alpha=tables.log_alpha, log_xi=tables.log_xi,
        log_beta=tables.log_beta, log_zeta=tables.log_zeta)
    synthetic.n_live = tm.size
    bundle = SynthesisBundle(
        cs=bundle.cs, grid=bundle.grid, time_grid=bundle.time_grid,
        masks=bundle.masks, tables=synthetic, chi=bundle.chi, ops=bundle.ops,
        theta=bundle.theta, theta_s=bundle.theta_s)
    Fsrc = SpaceTimeField.zeros(bundle.grid, M + 1)
    x = bundle.grid.x
    shape = np.exp(-0.5 * ((x - 0.45) / 0.12) ** 2)
    prof = np.sin(np.pi * np.arange(1, M + 1) / M)
    Fsrc.bulk[1:] = 1e-3 * prof[:, None] * shape[None, :]
    Fsrc.surface[1:] = Fsrc.bulk[1:][:, [0, -1]]
    return bundle, Fsrc


def random_source(bundle, rng, amplitude=1e-3):
    """Random smooth spatial shape times the critical admissible profile."""
    g = bundle.grid
    M = bundle.time_grid.step_count
    x = g.x / g.length
    shape = np.zeros_like(x)
    for k in range(1, 5):
        shape += rng.standard_normal() / k * np.cos(np.pi * k * x
                                                    + rng.uniform(0, 2 * np.pi))
    prof = admissible_time_profile(bundle.tables)
    F = SpaceTimeField.zeros(g, M + 1)
    F.bulk[1:] = amplitude * prof[:, None] * shape[None, :]
    F.surface[1:] = F.bulk[1:][:, [0, -1]]
    return F


def make_problem(bundle, F, G=None, theta=None, theta_s=None, **kw):
    g = bundle.grid
    M = bundle.time_grid.step_count
    return FIProblem(F=F, G=G if G is not None else SpaceTimeField.zeros(g, M + 1),
                     theta=bundle.theta if theta is None else theta,
                     theta_s=bundle.theta_s if theta_s is None else theta_s,
                     grid=g, time_grid=bundle.time_grid, masks=bundle.masks,
                     tables=bundle.tables, chi=bundle.chi, ops=bundle.ops, **kw)


@pytest.fixture(scope="session")
def default_setup():
    return make_bundle()


@pytest.fixture(scope="session")
def bundle(default_setup):
    return default_setup[0]


@pytest.fixture(scope="session")
def source(default_setup):
    return default_setup[1]


@pytest.fixture(scope="session")
def fi_solved(bundle, source):
    prob = make_problem(bundle, source)
    return prob, solve_fi(prob)


@pytest.fixture(scope="session")
def tame_setup():
    return make_tame_bundle()
