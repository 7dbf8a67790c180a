"""Feedback estimation and control for structured compartmental epidemic models.

The package covers the three stages of an output-feedback loop around a model of
the form ``dx/dt = A x + G f(H x, u)``, ``y = C x``:

- :mod:`epictrl.model` -- the model class, the SIDHER instance and Lipschitz bounds
- :mod:`epictrl.sim` -- integration, synthetic data and interpolation
- :mod:`epictrl.identifiability` -- numerical local rank test
- :mod:`epictrl.estimation` -- closed-form rates and prediction-error fitting
- :mod:`epictrl.observer` -- LMI observer synthesis, simulation and error checks
- :mod:`epictrl.control` -- piecewise-constant optimal control by single shooting
- :mod:`epictrl.cli` -- config-driven pipeline (``python -m epictrl``)
"""

from epictrl.model import (
    Domain,
    ParameterVector,
    StructuredModel,
    TRUE_THETA,
    CASE_ESTIMATE,
    build_sidher,
    estimate_lipschitz,
    eval_dynamics,
    eval_output,
)
from epictrl.sim import (
    DataSet,
    NoiseSpec,
    Trajectory,
    forecast_polyfit,
    generate_dataset,
    integrate,
    interpolate,
    nominal_input,
)

__version__ = "0.1.0"

__all__ = [
    "DataSet",
    "Domain",
    "NoiseSpec",
    "ParameterVector",
    "StructuredModel",
    "CASE_ESTIMATE",
    "TRUE_THETA",
    "Trajectory",
    "build_sidher",
    "estimate_lipschitz",
    "eval_dynamics",
    "eval_output",
    "forecast_polyfit",
    "generate_dataset",
    "integrate",
    "interpolate",
    "nominal_input",
]
