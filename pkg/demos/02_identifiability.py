"""Local identifiability and observability from the sampled-output Jacobian rank."""

import numpy as np

from epictrl.identifiability import local_rank_test
from epictrl.model import TRUE_THETA, build_sidher
from epictrl.sim import nominal_input

model = build_sidher(TRUE_THETA)
x0 = np.random.default_rng(0).dirichlet(np.ones(6))
rep = local_rank_test(model, x0, TRUE_THETA, nominal_input, np.arange(31.0))
print(f"rank {rep.numerical_rank} of {rep.jacobian_cols}: {rep.verdict}")
print("singular values:", np.array2string(rep.singular_values, precision=2))
