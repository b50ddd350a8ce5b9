"""Null control of the linearized cascade by weighted least squares.

One solve of the Carleman-weighted normal equations yields the control v
and the state/adjoint pair; the control is supported in the control
region, the recovered backward state vanishes identically on the early
weight-dead cells (the mechanism reaching h(.,0) = 0), and the re-solved
cascade confirms the construction. All weighted estimate ratios are
recorded as regression baselines.
"""

import numpy as np

from bscontrol.cli import build_setup, load_config
from bscontrol.fi import (FIProblem, cascade_residual_check, galerkin_check,
                          solution_summary, solve_fi)
from bscontrol.geometry import SpaceTimeField

cfg = load_config(None)
bundle, F = build_setup(cfg)
M = bundle.time_grid.step_count
prob = FIProblem(F=F, G=SpaceTimeField.zeros(bundle.grid, M + 1),
                 theta=bundle.theta, theta_s=bundle.theta_s, grid=bundle.grid,
                 time_grid=bundle.time_grid, masks=bundle.masks,
                 tables=bundle.tables, chi=bundle.chi, ops=bundle.ops)

sol = solve_fi(prob)
print(f"solve engine: {sol.engine}, refinement steps: {sol.cg_iters}, "
      f"scaled residual: {sol.optimality_residual:.2e}")
print(f"scaled-spectrum Ritz bounds: [{sol.ritz_min:.2e}, {sol.ritz_max:.2e}]")
print(f"control range: [{sol.v.min():.3e}, {sol.v.max():.3e}], "
      f"supported on {int(bundle.masks.omega_nodes.sum())} nodes")

rng = np.random.default_rng(0)
gal = galerkin_check(sol, prob, 20, rng)
print(f"relative Galerkin optimality over 20 random directions: "
      f"{gal['max_scaled_residual']:.2e} (pass = {gal['pass']})")

chk = cascade_residual_check(sol, prob)
print(f"re-solved cascade weak residuals: forward {chk['weak_residual_forward']:.2e}, "
      f"backward {chk['weak_residual_backward']:.2e}")
print(f"h(., first node): recovered {sol.h0_norm:.1e} (exact zero by the "
      f"weight mechanism), re-solved {chk['resolved_h0_norm']:.2e}")

summary = solution_summary(sol, prob)
print("weighted-estimate ratios (regression baselines):")
for key, val in summary["lhs_rhs_ratios"].items():
    print(f"  {key}: {val:.3e}")
