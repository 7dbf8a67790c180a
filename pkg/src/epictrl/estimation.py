"""Parameter estimation from recorded input/output data.

Two stages: the rates that appear as output ratios (rho, phi, sigma, xi) have
closed-form least-squares estimates; the rest are fitted by prediction-error
minimization with a trust-region reflective solver. The model is driven by the
linearly interpolated recorded input, integrated with fixed-step RK4 aligned to
the sample grid so that every candidate is evaluated on the same discretization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import least_squares

from epictrl.model import (
    MODEL_FAMILIES,
    PARAM_NAMES,
    ParameterVector,
    StructuredModel,
)
from epictrl.sim import DataSet, IntegrationError, integrate_sampled

DEFAULT_BOUNDS = {name: (0.0, 2.0 if name == "beta" else 1.0) for name in PARAM_NAMES}
DEFAULT_INIT = ParameterVector(
    beta=0.5, gamma=0.1, rho=0.1, sigma=0.1, xi=0.1, lam=0.1, phi=0.1, tau=0.1, nu=0.1
)
# support of the random initial-state guess
S0_RANGE = (0.95, 1.0)
I0_RANGE = (0.0, 0.05)
# box for R0 under joint estimation; S0 closes the sum
R0_RANGE = (0.0, 0.05)


class ClosedFormRates(NamedTuple):
    rho: float
    phi: float
    sigma: float
    xi: float


def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def closed_form_rates(data: DataSet, pointwise: bool = False) -> ClosedFormRates:
    """Least-squares estimates of (rho, phi, sigma, xi) from output ratios.

    ``y4 = rho*y3`` and ``y5 = phi*y3`` hold identically, so
    ``rho = int(y3*y4) / int(y3^2)`` is the least-squares slope; likewise for
    sigma and xi with ``y6``. Integrals use the trapezoid rule on the samples.
    With ``pointwise=True`` the time average of the pointwise ratio is used
    instead.
    """
    t, y = data.times, data.y_bar
    if y.shape[1] < 8:
        raise ValueError("closed-form rates need outputs y3..y8")

    def ratio(num_col, den_col):
        a, b = y[:, den_col], y[:, num_col]
        den = np.trapezoid(a * a, t)
        if den < 1e-30:
            raise ValueError(f"no signal in y{den_col + 1}: integral of its square is {den:.3g}")
        if pointwise:
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(a != 0, b / a, 0.0)
            return float(np.trapezoid(r, t) / (t[-1] - t[0]))
        return float(np.trapezoid(a * b, t) / den)

    return ClosedFormRates(ratio(3, 2), ratio(4, 2), ratio(6, 5), ratio(7, 5))


def guess_initial_state(data: DataSet, seed: int = 0) -> np.ndarray:
    """Initial-state guess: random S0, I0; D0, H0, E0 read from the first sample."""
    rng = np.random.default_rng(seed)
    s0 = rng.uniform(*S0_RANGE)
    i0 = rng.uniform(*I0_RANGE)
    y0 = data.y_bar[0]
    d0, h0, e0 = (float(np.clip(y0[k], 0.0, 1.0)) for k in (2, 5, 8))
    x = np.array([s0, i0, d0, h0, e0, 0.0])
    rest = 1.0 - x[:5].sum()
    if rest < 0:
        x[0] = max(0.0, x[0] + rest)
        x[5] = 0.0
        # S0 alone may not absorb the excess when the read-outs are large
        x[:5] /= max(1.0, x[:5].sum())
    else:
        x[5] = min(rest, 1.0)
    return x


def _family(model_family) -> callable:
    if callable(model_family):
        return model_family
    try:
        return MODEL_FAMILIES[model_family]
    except KeyError:
        raise ValueError(f"unknown model family {model_family!r}") from None


def _simulate_outputs(models: list[StructuredModel], x0s, data: DataSet, substeps: int) -> np.ndarray:
    A = np.stack([m.A for m in models])
    G = np.stack([m.G for m in models])
    C = np.stack([m.C for m in models])
    X = integrate_sampled(A, G, models[0].f, models[0].h_index, x0s, data.times, data.u_bar, substeps)
    return np.einsum("bij,btj->bti", C, X)


def objective_value(model_family, data: DataSet, theta: ParameterVector, x0, squared: bool = False,
                    substeps: int = 4) -> tuple[float, bool]:
    """Discretized prediction-error cost ``sum_k w_k ||y_bar(t_k) - y(t_k)||``.

    ``w_k`` are trapezoid weights. Returns ``(value, ok)``; when the
    simulation fails the value is ``inf`` and ``ok`` is False.
    """
    model = _family(model_family)(theta)
    try:
        y = _simulate_outputs([model], np.asarray(x0, dtype=float)[None], data, substeps)[0]
    except IntegrationError:
        return float("inf"), False
    r = np.linalg.norm(data.y_bar - y, axis=1)
    if not np.all(np.isfinite(r)):
        return float("inf"), False
    w = _trapezoid_weights(data.times)
    return float(np.sum(w * r**2) if squared else np.sum(w * r)), True


@dataclass
class EstimationConfig:
    """Settings for :func:`fit_parameters`.

    ``x0_policy`` is ``"guess"`` (initial state fixed at the guess),
    ``"joint"`` (I0 and R0 estimated with the parameters, S0 closing the sum,
    so the state stays on the simplex) or ``"fixed"`` (initial state known and
    given as ``x0_fixed``).
    """

    fixed_params: dict[str, float] = field(default_factory=dict)
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    theta_init: ParameterVector = DEFAULT_INIT
    x0_policy: str = "guess"
    max_iterations: int = 200
    gradient_tolerance: float = 1e-10
    multistart_count: int = 5
    seed: int = 0
    substeps: int = 4
    x0_fixed: tuple[float, ...] | None = None

    def __post_init__(self):
        bounds = dict(DEFAULT_BOUNDS)
        for name, (lo, hi) in self.bounds.items():
            if name not in DEFAULT_BOUNDS:
                raise ValueError(f"unknown parameter {name!r} in bounds")
            if not lo <= hi:
                raise ValueError(f"empty bounds for {name}: [{lo}, {hi}]")
            bounds[name] = (float(lo), float(hi))
        self.bounds = bounds
        for name in self.fixed_params:
            if name not in DEFAULT_BOUNDS:
                raise ValueError(f"unknown fixed parameter {name!r}")
        for name in self.free_names:
            lo, hi = self.bounds[name]
            if not lo <= self.theta_init[name] <= hi:
                raise ValueError(f"theta_init.{name}={self.theta_init[name]} outside bounds [{lo}, {hi}]")
        if self.multistart_count < 1:
            raise ValueError("multistart_count must be at least 1")
        if self.x0_policy not in ("guess", "joint", "fixed"):
            raise ValueError("x0_policy must be 'guess', 'joint' or 'fixed'")
        if (self.x0_policy == "fixed") != (self.x0_fixed is not None):
            raise ValueError("x0_fixed is required with, and only with, x0_policy 'fixed'")
        if self.x0_fixed is not None:
            self.x0_fixed = tuple(float(v) for v in self.x0_fixed)
        if self.max_iterations < 1 or self.gradient_tolerance <= 0 or self.substeps < 1:
            raise ValueError("max_iterations, gradient_tolerance and substeps must be positive")

    @property
    def free_names(self) -> list[str]:
        return [n for n in PARAM_NAMES if n not in self.fixed_params]

    def to_dict(self) -> dict:
        return {
            "fixed_params": dict(self.fixed_params),
            "bounds": {k: list(v) for k, v in self.bounds.items()},
            "theta_init": self.theta_init.as_dict(),
            "x0_policy": self.x0_policy,
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "multistart_count": self.multistart_count,
            "seed": self.seed,
            "substeps": self.substeps,
            "x0_fixed": None if self.x0_fixed is None else list(self.x0_fixed),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimationConfig":
        doc = dict(doc)
        if "theta_init" in doc:
            doc["theta_init"] = ParameterVector.from_dict(doc["theta_init"])
        if "bounds" in doc:
            doc["bounds"] = {k: tuple(v) for k, v in doc["bounds"].items()}
        return cls(**doc)


@dataclass
class StartResult:
    index: int
    theta: ParameterVector | None
    x0: np.ndarray | None
    residual_norm: float
    squared_objective: float
    nfev: int
    status: str
    ok: bool


@dataclass
class EstimationResult:
    theta_hat: ParameterVector
    x0_used: np.ndarray
    residual_norm: float
    squared_objective: float
    convergence_info: dict
    starts: list[StartResult]
    active_bounds: list[str]

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.as_dict(),
            "x0_used": self.x0_used.tolist(),
            "residual_norm": self.residual_norm,
            "squared_objective": self.squared_objective,
            "convergence_info": self.convergence_info,
            "active_bounds": self.active_bounds,
            "starts": [
                {
                    "index": s.index,
                    "theta": None if s.theta is None else s.theta.as_dict(),
                    "x0": None if s.x0 is None else s.x0.tolist(),
                    "residual_norm": s.residual_norm,
                    "squared_objective": s.squared_objective,
                    "nfev": s.nfev,
                    "status": s.status,
                    "ok": s.ok,
                }
                for s in self.starts
            ],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, allow_nan=True)
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text + "\n")
        return text

    def table_csv(self, path=None, truth: ParameterVector | None = None) -> str:
        """Two-column parameter table: true value (blank if unknown) and estimate."""
        lines = ["parameter,true,estimated"]
        for name in PARAM_NAMES:
            t = "" if truth is None else f"{truth[name]:.17g}"
            lines.append(f"{name},{t},{self.theta_hat[name]:.17g}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text)
        return text


class _Problem:
    """Residual and batched finite-difference Jacobian for one fitting task."""

    def __init__(self, family, data: DataSet, config: EstimationConfig, x0_base: np.ndarray):
        self.family = family
        self.data = data
        self.config = config
        self.free = config.free_names
        self.x0_base = x0_base
        self.joint = config.x0_policy == "joint"
        self.sw = np.sqrt(_trapezoid_weights(data.times))
        lo = [config.bounds[n][0] for n in self.free]
        hi = [config.bounds[n][1] for n in self.free]
        if self.joint:
            lo += [I0_RANGE[0], R0_RANGE[0]]
            hi += [I0_RANGE[1], R0_RANGE[1]]
        self.lb, self.ub = np.array(lo, dtype=float), np.array(hi, dtype=float)

    def unpack(self, p):
        values = dict(self.config.fixed_params)
        values.update(zip(self.free, p[: len(self.free)]))
        theta = ParameterVector.from_dict(values)
        x0 = self.x0_base.copy()
        if self.joint:
            x0[1], x0[5] = p[-2], p[-1]
            x0[0] = 1.0 - x0[1:].sum()
        return theta, x0

    def residuals(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        pairs = [self.unpack(p) for p in P]
        models = [self.family(th) for th, _ in pairs]
        y = _simulate_outputs(models, np.array([x for _, x in pairs]), self.data, self.config.substeps)
        r = (self.data.y_bar[None] - y) * self.sw[None, :, None]
        return r.reshape(len(P), -1)

    def fun(self, p):
        r = self.residuals(p)[0]
        if not np.all(np.isfinite(r)):
            raise IntegrationError("non-finite residual", float("nan"))
        return r

    def jac(self, p):
        # central differences, stepping inward at the bounds
        h = 1e-6 * np.maximum(np.abs(p), 1e-3)
        up = np.minimum(p + h, self.ub)
        dn = np.maximum(p - h, self.lb)
        n = len(p)
        P = np.repeat(p[None], 2 * n, axis=0)
        P[np.arange(n), np.arange(n)] = up
        P[n + np.arange(n), np.arange(n)] = dn
        R = self.residuals(P)
        return ((R[:n] - R[n:]) / (up - dn)[:, None]).T


def _clip_into(p, lb, ub):
    # strictly inside, as the reflective solver requires
    span = ub - lb
    return np.clip(p, lb + 1e-10 * span, ub - 1e-10 * span)


def fit_parameters(model_family, data: DataSet, config: EstimationConfig | None = None) -> EstimationResult:
    """Fit the free parameters by trust-region reflective least squares.

    The inner solver minimizes the squared-norm form of the cost; the result
    reports both forms. Start 0 uses ``config.theta_init`` and the initial-state
    guess drawn with ``config.seed``; later starts draw parameters log-uniformly
    within the bounds and guess the initial state with ``seed + k``. The best
    start wins, ties broken by start index.
    """
    config = config or EstimationConfig()
    family = _family(model_family)
    rng = np.random.default_rng(config.seed)
    free = config.free_names
    starts: list[StartResult] = []
    best = None

    for k in range(config.multistart_count):
        if config.x0_fixed is not None:
            x0_guess = np.array(config.x0_fixed)
        else:
            x0_guess = guess_initial_state(data, config.seed + k)
        prob = _Problem(family, data, config, x0_guess)
        if k == 0:
            th0 = np.array([config.theta_init[n] for n in free])
        else:
            lo = np.array([max(config.bounds[n][0], 1e-3 * config.bounds[n][1]) for n in free])
            hi = np.array([config.bounds[n][1] for n in free])
            th0 = np.exp(rng.uniform(np.log(np.maximum(lo, 1e-12)), np.log(np.maximum(hi, 1e-12))))
            th0 = np.clip(th0, [config.bounds[n][0] for n in free], hi)
        p0 = np.concatenate([th0, x0_guess[[1, 5]]]) if prob.joint else th0
        if k == 0:
            theta0, x00 = prob.unpack(p0)
            value, ok = objective_value(family, data, theta0, x00, substeps=config.substeps)
            if not ok:
                raise ValueError("objective is not finite at theta_init")
        if len(p0) == 0:
            theta, x0 = prob.unpack(p0)
            nfev, status, ok = 0, "no free parameters", True
        else:
            p0 = _clip_into(p0, prob.lb, prob.ub)
            try:
                sol = least_squares(
                    prob.fun, p0, jac=prob.jac, bounds=(prob.lb, prob.ub), method="trf",
                    x_scale="jac", gtol=config.gradient_tolerance, max_nfev=config.max_iterations,
                )
                theta, x0 = prob.unpack(sol.x)
                nfev, status, ok = int(sol.nfev), sol.message, True
            except (IntegrationError, ValueError, FloatingPointError) as exc:
                theta, x0, nfev, status, ok = None, None, 0, f"failed: {exc}", False
        if ok:
            r1, _ = objective_value(family, data, theta, x0, substeps=config.substeps)
            r2, _ = objective_value(family, data, theta, x0, squared=True, substeps=config.substeps)
        else:
            r1 = r2 = float("inf")
        start = StartResult(k, theta, x0, r1, r2, nfev, status, bool(ok and np.isfinite(r2)))
        starts.append(start)
        if start.ok and (best is None or start.squared_objective < best.squared_objective):
            best = start

    if best is None:
        reasons = "; ".join(f"start {s.index}: {s.status}" for s in starts)
        raise RuntimeError(f"all starts failed ({reasons})")
    active = []
    for n in free:
        lo, hi = config.bounds[n]
        tol = 1e-8 * max(1.0, hi - lo)
        if best.theta[n] - lo <= tol or hi - best.theta[n] <= tol:
            active.append(n)
    info = {
        "best_start": best.index,
        "nfev": best.nfev,
        "termination": best.status,
        "free_parameters": free,
        "x0_policy": config.x0_policy,
    }
    return EstimationResult(best.theta, best.x0, best.residual_norm, best.squared_objective, info,
                            starts, active)


def ratio_protocol_config(data: DataSet, **overrides) -> EstimationConfig:
    """Config with the four ratio rates fixed at their closed-form estimates.

    Estimates are clipped into their bounds, since noise can push a ratio
    slightly negative.
    """
    rates = closed_form_rates(data)._asdict()
    bounds = dict(DEFAULT_BOUNDS)
    bounds.update({k: tuple(v) for k, v in overrides.pop("bounds", {}).items()})
    fixed = {k: float(np.clip(v, *bounds[k])) for k, v in rates.items()}
    return EstimationConfig(fixed_params=fixed, bounds=bounds, **overrides)


__all__ = [
    "ClosedFormRates",
    "EstimationConfig",
    "EstimationResult",
    "StartResult",
    "closed_form_rates",
    "fit_parameters",
    "guess_initial_state",
    "objective_value",
    "ratio_protocol_config",
]
