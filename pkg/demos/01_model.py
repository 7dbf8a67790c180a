"""Build the SIDHER model, check conservation and compute its Lipschitz constants."""

import numpy as np

from epictrl.model import CASE_X0, TRUE_THETA, Domain, build_sidher, estimate_lipschitz, lipschitz_ratio_check
from epictrl.sim import integrate, nominal_input

model = build_sidher(TRUE_THETA)
print("A =\n", np.round(model.A, 4))

traj = integrate(model, CASE_X0, nominal_input, (0, 30), t_eval=np.linspace(0, 30, 31))
print("population drift over 30 days:", np.abs(traj.states.sum(axis=1) - 1).max())
print("state at day 30:", np.round(traj.states[-1], 5))

for simplex in (False, True):
    dom = Domain.sidher(simplex)
    ell = estimate_lipschitz(model, dom)
    worst = lipschitz_ratio_check(model, dom, ell, n_pairs=10_000)
    print(f"{'simplex' if simplex else 'box':8s} l = {ell:.4f}  worst |df|/(l|dx|) on random pairs = {worst:.4f}")
