"""Optimal piecewise-constant interventions over five 14-day periods."""

import numpy as np

from epictrl.control import BASELINE_POLICY, case_study_spec, shoot, solve_ocp
from epictrl.model import CASE_ESTIMATE, build_sidher

# true state at day 30 of the synthetic outbreak
x_init = np.array([0.56642, 0.26463, 0.0042653, 0.0037033, 0.00043565, 0.16055])
spec = case_study_spec(build_sidher(CASE_ESTIMATE), x_init)
sol = solve_ocp(spec)
print("status:", sol.status, "| cost:", round(sol.cost, 4), "| KKT residual:", f"{sol.solver_info['kkt_residual']:.1e}")
print("policy (rows = periods, columns = u1..u4):")
print(np.round(sol.policy.values, 3))
for name, r in sol.constraint_report.items():
    print(f"  {name}: max {r['max']:.4f} of limit {r['limit']}")
base = shoot(spec, np.tile(BASELINE_POLICY, spec.n_periods))
print(f"constant policy {BASELINE_POLICY.tolist()}: cost {base.cost:.4f}, worst violation {base.constraints.max():+.4f}")
