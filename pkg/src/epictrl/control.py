"""Optimal intervention policies by direct single shooting.

Inputs are held constant over each of ``n_periods`` periods. The cost

    J = int_{t1}^{t2} x^T Gamma x + u^T Lambda u dt

is minimized subject to input bounds and upper limits on selected states,
enforced on a uniform constraint grid. Gradients come from the forward
sensitivity equations integrated alongside the state.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import Bounds, NonlinearConstraint, minimize, nnls

from epictrl.model import INPUT_NAMES, STATE_NAMES, StructuredModel, eval_dynamics, eval_output
from epictrl.sim import DEFAULT_ATOL, DEFAULT_RTOL, Trajectory, write_csv

CASE_GAMMA = np.diag([0.01, 1.0, 0.0, 2.0, 10.0, 0.0])
CASE_LAMBDA = 0.01 * np.eye(4)
CASE_INPUT_BOUNDS = np.array([[0.0, 1.0], [0.0, 0.9], [0.1, 0.7], [0.0, 0.7]])
CASE_PATH_LIMITS = {"I": 0.5, "H": 0.05, "E": 0.005}


@dataclass(frozen=True, eq=False)
class OcpSpec:
    model_hat: StructuredModel
    x_init: np.ndarray
    t_start: float = 0.0
    period_length: float = 14.0
    n_periods: int = 5
    Gamma: np.ndarray = field(default_factory=lambda: CASE_GAMMA.copy())
    Lambda: np.ndarray = field(default_factory=lambda: CASE_LAMBDA.copy())
    input_bounds: np.ndarray = field(default_factory=lambda: CASE_INPUT_BOUNDS.copy())
    path_limits: dict[str, float] = field(default_factory=lambda: dict(CASE_PATH_LIMITS))
    constraint_grid_dt: float = 0.5

    def __post_init__(self):
        n_x, n_u = self.model_hat.n_x, self.model_hat.n_u
        object.__setattr__(self, "x_init", np.asarray(self.x_init, dtype=float))
        object.__setattr__(self, "Gamma", np.asarray(self.Gamma, dtype=float))
        object.__setattr__(self, "Lambda", np.asarray(self.Lambda, dtype=float))
        object.__setattr__(self, "input_bounds", np.asarray(self.input_bounds, dtype=float))
        if self.x_init.shape != (n_x,):
            raise ValueError(f"x_init must have length {n_x}")
        if self.Gamma.shape != (n_x, n_x) or np.any(self.Gamma != np.diag(np.diag(self.Gamma))):
            raise ValueError("Gamma must be an n_x x n_x diagonal matrix")
        if np.any(np.diag(self.Gamma) < 0):
            raise ValueError("Gamma must be positive semidefinite")
        if self.Lambda.shape != (n_u, n_u) or np.any(self.Lambda != np.diag(np.diag(self.Lambda))):
            raise ValueError("Lambda must be an n_u x n_u diagonal matrix")
        if np.any(np.diag(self.Lambda) <= 0):
            raise ValueError("Lambda diagonal entries must be positive")
        if self.input_bounds.shape != (n_u, 2) or np.any(self.input_bounds[:, 0] > self.input_bounds[:, 1]):
            raise ValueError("input_bounds must be n_u rows of [low, high]")
        for name, lim in self.path_limits.items():
            if name not in STATE_NAMES[:n_x]:
                raise ValueError(f"unknown state {name!r} in path_limits")
            if not 0 < lim <= 1:
                raise ValueError(f"path limit for {name} must lie in (0, 1]")
        if self.n_periods < 0 or self.period_length <= 0 or self.constraint_grid_dt <= 0:
            raise ValueError("n_periods must be >= 0 and lengths positive")
        ratio = self.period_length / self.constraint_grid_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("constraint_grid_dt must divide period_length")

    @property
    def t_end(self) -> float:
        return self.t_start + self.n_periods * self.period_length

    @property
    def n_u(self) -> int:
        return self.model_hat.n_u

    @property
    def n_decision(self) -> int:
        return self.n_periods * self.n_u

    @property
    def limit_index(self) -> list[int]:
        return [STATE_NAMES.index(n) for n in self.path_limits]

    @property
    def limit_values(self) -> np.ndarray:
        return np.array(list(self.path_limits.values()), dtype=float)

    def grid(self) -> np.ndarray:
        steps = int(round(self.period_length / self.constraint_grid_dt))
        return self.t_start + self.constraint_grid_dt * np.arange(self.n_periods * steps + 1)

    def lower(self) -> np.ndarray:
        return np.tile(self.input_bounds[:, 0], self.n_periods)

    def upper(self) -> np.ndarray:
        return np.tile(self.input_bounds[:, 1], self.n_periods)

    def to_dict(self) -> dict:
        return {
            "model_hat": self.model_hat.to_dict(),
            "x_init": self.x_init.tolist(),
            "t_start": self.t_start,
            "period_length": self.period_length,
            "n_periods": self.n_periods,
            "Gamma": np.diag(self.Gamma).tolist(),
            "Lambda": np.diag(self.Lambda).tolist(),
            "input_bounds": self.input_bounds.tolist(),
            "path_limits": dict(self.path_limits),
            "constraint_grid_dt": self.constraint_grid_dt,
        }


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Piecewise-constant input: ``values[k]`` on ``[breakpoints[k], breakpoints[k] + period_length)``."""

    breakpoints: np.ndarray
    values: np.ndarray
    period_length: float

    @classmethod
    def from_flat(cls, spec: OcpSpec, flat) -> "ControlPolicy":
        values = np.asarray(flat, dtype=float).reshape(spec.n_periods, spec.n_u)
        starts = spec.t_start + spec.period_length * np.arange(spec.n_periods)
        return cls(starts, values, spec.period_length)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.floor((t - self.breakpoints[0]) / self.period_length + 1e-12).astype(int)
        k = np.clip(k, 0, len(self.values) - 1)
        return self.values[k]

    def breakpoints_in(self, ta: float, tb: float) -> np.ndarray:
        b = self.breakpoints
        return b[(b > ta) & (b < tb)]

    def flat(self) -> np.ndarray:
        return self.values.ravel().copy()

    def to_csv(self, path=None) -> str:
        names = ["period_start", *INPUT_NAMES[: self.values.shape[1]]]
        return write_csv(path, names, np.hstack([self.breakpoints[:, None], self.values]))


def evaluate_cost(traj: Trajectory, policy: ControlPolicy, Gamma, Lambda) -> float:
    """Trapezoid value of ``int x^T Gamma x + u^T Lambda u dt`` over the policy horizon.

    The trajectory grid must contain every period boundary.
    """
    Gamma, Lambda = np.asarray(Gamma, float), np.asarray(Lambda, float)
    t, x = traj.times, traj.states
    total = 0.0
    for k, a in enumerate(policy.breakpoints):
        b = a + policy.period_length
        ia, ib = np.searchsorted(t, [a - 1e-9, b + 1e-9])
        if ia >= len(t) or abs(t[ia] - a) > 1e-9 or abs(t[ib - 1] - b) > 1e-9:
            raise ValueError(f"trajectory grid does not contain period boundaries {a} and {b}")
        xs = x[ia:ib]
        total += float(np.trapezoid(np.einsum("ti,ij,tj->t", xs, Gamma, xs), t[ia:ib]))
        u = policy.values[k]
        total += float((b - a) * u @ Lambda @ u)
    return total


@dataclass
class ShootResult:
    trajectory: Trajectory
    cost: float
    constraints: np.ndarray
    ok: bool = True
    cost_grad: np.ndarray | None = None
    constraint_jac: np.ndarray | None = None

    def __iter__(self):
        return iter((self.trajectory, self.cost, self.constraints))


def _fu_jac(model: StructuredModel, h, u):
    if model.f.jac_u is not None:
        return model.f.jac_u(h, u)
    # central differences on the algebraic nonlinearity
    eps = 1e-7
    cols = []
    for j in range(len(u)):
        du = np.zeros_like(u)
        du[j] = eps
        cols.append((model.f(h, u + du) - model.f(h, u - du)) / (2 * eps))
    return np.stack(cols, axis=-1)


def shoot(spec: OcpSpec, flat_controls, gradient: bool = False, rtol: float = DEFAULT_RTOL,
          atol: float = DEFAULT_ATOL) -> ShootResult:
    """Simulate the model under a piecewise-constant policy.

    Returns the trajectory on the constraint grid, the cost and the constraint
    values ``g = x_i(t) - limit_i`` (feasible when ``g <= 0``), ordered limit by
    limit, each over the whole grid. With ``gradient=True`` the sensitivities
    ``dx/dp`` are integrated too and the cost gradient and constraint Jacobian
    are returned.
    """
    model = spec.model_hat
    n_x, n_u, n_p = model.n_x, spec.n_u, spec.n_decision
    flat = np.asarray(flat_controls, dtype=float)
    if flat.shape != (n_p,):
        raise ValueError(f"expected {n_p} control values, got shape {flat.shape}")
    lo, hi = spec.lower(), spec.upper()
    if np.any(flat < lo) or np.any(flat > hi):
        warnings.warn("controls outside bounds were clamped", RuntimeWarning, stacklevel=2)
        flat = np.clip(flat, lo, hi)
    policy = ControlPolicy.from_flat(spec, flat)
    grid = spec.grid()
    idx_lim, lims = spec.limit_index, spec.limit_values
    if spec.n_periods == 0:
        traj = Trajectory(grid, spec.x_init[None], eval_output(model, spec.x_init[None]))
        return ShootResult(traj, 0.0, np.zeros(0), True, np.zeros(0), np.zeros((0, 0)))

    A, G, hidx = model.A, model.G, model.h_index
    steps = int(round(spec.period_length / spec.constraint_grid_dt))
    X = np.empty((len(grid), n_x))
    Sx = np.zeros((len(grid), n_x, n_p)) if gradient else None
    X[0] = spec.x_init
    x = spec.x_init.copy()
    S = np.zeros((n_x, n_p))
    ok = True
    for k in range(spec.n_periods):
        u = policy.values[k]
        tg = grid[k * steps: (k + 1) * steps + 1]
        if gradient:
            sel = np.zeros((n_u, n_p))
            sel[:, k * n_u:(k + 1) * n_u] = np.eye(n_u)

            def rhs(t, y, u=u, sel=sel):
                xx = y[:n_x]
                SS = y[n_x:].reshape(n_x, n_p)
                h = xx[hidx]
                dfdx = np.zeros((model.n_f, n_x))
                dfdx[:, hidx] = model.f.jac(h, u)
                Jx = A + G @ dfdx
                Ju = G @ _fu_jac(model, h, u)
                dx = A @ xx + G @ model.f(h, u)
                return np.concatenate([dx, (Jx @ SS + Ju @ sel).ravel()])

            y0 = np.concatenate([x, S.ravel()])
        else:
            def rhs(t, y, u=u):
                return eval_dynamics(model, y, u)

            y0 = x
        sol = solve_ivp(rhs, (tg[0], tg[-1]), y0, method="DOP853", t_eval=tg, rtol=rtol, atol=atol)
        if sol.status != 0 or not np.all(np.isfinite(sol.y)):
            ok = False
            break
        Y = sol.y.T
        X[k * steps:(k + 1) * steps + 1] = Y[:, :n_x]
        x = Y[-1, :n_x].copy()
        if gradient:
            Sx[k * steps:(k + 1) * steps + 1] = Y[:, n_x:].reshape(-1, n_x, n_p)
            S = Sx[(k + 1) * steps].copy()
    if not ok:
        traj = Trajectory(grid, np.full((len(grid), n_x), np.nan))
        nan_g = np.full(len(lims) * len(grid), np.nan)
        return ShootResult(traj, float("inf"), nan_g, False)

    traj = Trajectory(grid, X, eval_output(model, X), policy(grid))
    cost = evaluate_cost(traj, policy, spec.Gamma, spec.Lambda)
    g = np.concatenate([X[:, i] - lim for i, lim in zip(idx_lim, lims)])
    res = ShootResult(traj, cost, g, True)
    if gradient:
        gam = np.diag(spec.Gamma)
        grad = np.zeros(n_p)
        dt = spec.constraint_grid_dt
        w = np.full(len(grid), dt)
        w[0] = w[-1] = dt / 2  # periods share endpoints, so the composite weights are uniform
        grad += np.einsum("t,ti,tip->p", w, 2 * gam * X, Sx)
        lam = np.diag(spec.Lambda)
        grad += (2 * spec.period_length * lam * policy.values).ravel()
        res.cost_grad = grad
        res.constraint_jac = np.concatenate([Sx[:, i, :] for i in idx_lim], axis=0)
    return res


def fd_gradient(spec: OcpSpec, flat, step: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference cost gradient and constraint Jacobian (relative step, stepping inward at bounds)."""
    flat = np.asarray(flat, dtype=float)
    lo, hi = spec.lower(), spec.upper()
    grad = np.zeros(flat.size)
    jac = None
    for i in range(flat.size):
        h = step * max(abs(flat[i]), 1.0)
        up, dn = flat.copy(), flat.copy()
        up[i] = min(flat[i] + h, hi[i])
        dn[i] = max(flat[i] - h, lo[i])
        ru, rd = shoot(spec, up), shoot(spec, dn)
        grad[i] = (ru.cost - rd.cost) / (up[i] - dn[i])
        col = (ru.constraints - rd.constraints) / (up[i] - dn[i])
        if jac is None:
            jac = np.zeros((col.size, flat.size))
        jac[:, i] = col
    return grad, jac


@dataclass
class OcpOptions:
    method: str = "SLSQP"
    max_iterations: int = 300
    tolerance: float = 1e-10
    feasibility_tol: float = 1e-6
    gradient: str = "sensitivity"


@dataclass
class OcpSolution:
    policy: ControlPolicy
    predicted: Trajectory
    cost: float
    constraint_report: dict
    solver_info: dict
    initial_cost: float
    status: str

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "cost": self.cost,
            "initial_cost": self.initial_cost,
            "policy": {"breakpoints": self.policy.breakpoints.tolist(), "values": self.policy.values.tolist(),
                       "period_length": self.policy.period_length},
            "constraint_report": self.constraint_report,
            "solver_info": self.solver_info,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text + "\n")
        return text


def check_constraints(traj: Trajectory, limits: dict[str, float], tol: float = 1e-6) -> dict:
    """Worst margin ``limit - max x_i(t)`` per limit and the first time it is violated beyond ``tol``."""
    report = {}
    for name, lim in limits.items():
        col = traj.states[:, STATE_NAMES.index(name)]
        margin = float(lim - np.max(col))
        bad = np.nonzero(col - lim > tol)[0]
        report[name] = {
            "limit": float(lim),
            "max": float(np.max(col)),
            "margin": margin,
            "violated": bool(bad.size),
            "first_violation_time": float(traj.times[bad[0]]) if bad.size else None,
        }
    return report


class _Cache:
    """Shares one shoot between the cost, constraint and gradient callbacks."""

    def __init__(self, spec: OcpSpec, mode: str):
        self.spec, self.mode, self.key, self.res = spec, mode, None, None
        self.n_shoot = 0

    def get(self, p) -> ShootResult:
        key = np.asarray(p, dtype=float).tobytes()
        if key != self.key:
            p = np.clip(p, self.spec.lower(), self.spec.upper())
            res = shoot(self.spec, p, gradient=self.mode == "sensitivity")
            if self.mode == "fd" and res.ok:
                res.cost_grad, res.constraint_jac = fd_gradient(self.spec, p)
            self.key, self.res = key, res
            self.n_shoot += 1
        return self.res


def kkt_residual(spec: OcpSpec, flat, active_tol: float = 1e-6) -> float:
    """Relative stationarity residual with nonnegative multipliers on active constraints."""
    res = shoot(spec, flat, gradient=True)
    grad = res.cost_grad
    lo, hi = spec.lower(), spec.upper()
    cols = []
    # constraints written as c(p) >= 0; stationarity: grad = sum lambda_i grad c_i
    for i in range(flat.size):
        if flat[i] - lo[i] <= active_tol:
            cols.append(np.eye(flat.size)[i])
        if hi[i] - flat[i] <= active_tol:
            cols.append(-np.eye(flat.size)[i])
    for j in np.nonzero(res.constraints >= -active_tol)[0]:
        cols.append(-res.constraint_jac[j])
    if not cols:
        return float(np.linalg.norm(grad) / max(1.0, np.linalg.norm(grad)))
    _, rnorm = nnls(np.array(cols).T, grad)
    return float(rnorm / max(1.0, np.linalg.norm(grad)))


def initial_guess(spec: OcpSpec) -> np.ndarray:
    """Mid-interval controls; if path-infeasible, raise u1 by bisection toward its upper bound."""
    mid = np.tile(spec.input_bounds.mean(axis=1), spec.n_periods)
    if spec.n_periods == 0:
        return mid

    def violation(u1):
        p = mid.copy()
        p[0::spec.n_u] = u1
        r = shoot(spec, p)
        return (np.max(r.constraints) if r.constraints.size else -1.0), p

    v, p = violation(mid[0])
    if v <= 0:
        return p
    lo_u, hi_u = mid[0], spec.input_bounds[0, 1]
    v_hi, p_hi = violation(hi_u)
    if v_hi > 0:
        return p_hi
    for _ in range(30):
        m = 0.5 * (lo_u + hi_u)
        if violation(m)[0] <= 0:
            hi_u = m
        else:
            lo_u = m
    return violation(hi_u)[1]


def solve_ocp(spec: OcpSpec, options: OcpOptions | None = None, x0_flat=None) -> OcpSolution:
    """Minimize the cost over piecewise-constant controls subject to bounds and path limits."""
    options = options or OcpOptions()
    if options.gradient not in ("sensitivity", "fd"):
        raise ValueError("gradient must be 'sensitivity' or 'fd'")
    p0 = initial_guess(spec) if x0_flat is None else np.asarray(x0_flat, dtype=float)
    first = shoot(spec, p0)
    if spec.n_periods == 0:
        policy = ControlPolicy.from_flat(spec, p0)
        rep = check_constraints(first.trajectory, spec.path_limits, options.feasibility_tol)
        return OcpSolution(policy, first.trajectory, 0.0, rep, {"iterations": 0, "kkt_residual": 0.0},
                           0.0, "success")
    cache = _Cache(spec, options.gradient)
    lo, hi = spec.lower(), spec.upper()
    # constraints in units of their limits, so that all are of order one
    scale = np.repeat(1.0 / spec.limit_values, len(spec.grid()))

    def cost(p):
        return cache.get(p).cost

    def cost_grad(p):
        return cache.get(p).cost_grad

    def cons(p):  # >= 0 when feasible
        return -scale * cache.get(p).constraints

    def cons_jac(p):
        return -scale[:, None] * cache.get(p).constraint_jac

    if options.method == "SLSQP":
        r = minimize(cost, p0, jac=cost_grad, method="SLSQP", bounds=Bounds(lo, hi),
                     constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                     options={"maxiter": options.max_iterations, "ftol": options.tolerance})
    elif options.method == "trust-constr":
        nlc = NonlinearConstraint(cons, 0.0, np.inf, jac=cons_jac)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            r = minimize(cost, p0, jac=cost_grad, method="trust-constr", bounds=Bounds(lo, hi),
                         constraints=[nlc],
                         options={"maxiter": options.max_iterations * 10, "gtol": 1e-8, "xtol": 1e-12})
    else:
        raise ValueError(f"unsupported method {options.method!r}")

    p = np.clip(r.x, lo, hi)
    final = shoot(spec, p)
    policy = ControlPolicy.from_flat(spec, p)
    report = check_constraints(final.trajectory, spec.path_limits, options.feasibility_tol)
    feasible = all(v["margin"] >= -options.feasibility_tol for v in report.values())
    if not feasible:
        worst = min(report, key=lambda k: report[k]["margin"])
        status = f"infeasible (most violated: {worst})"
    elif not r.success and "iteration" in str(r.message).lower():
        status = "max_iterations"
    elif not r.success:
        status = f"failed: {r.message}"
    else:
        status = "success"
    info = {
        "method": options.method,
        "iterations": int(getattr(r, "nit", 0)),
        "message": str(r.message),
        "shoots": cache.n_shoot,
        "kkt_residual": kkt_residual(spec, p, 1e-6),
        "gradient": options.gradient,
    }
    return OcpSolution(policy, final.trajectory, final.cost, report, info, first.cost, status)


def case_study_spec(model_hat: StructuredModel, x_init, t_start: float = 30.0) -> OcpSpec:
    """Five 14-day periods with the case-study weights, bounds and limits."""
    return OcpSpec(model_hat=model_hat, x_init=np.asarray(x_init, dtype=float), t_start=t_start)


BASELINE_POLICY = np.array([0.5, 0.9, 0.4, 0.35])

__all__ = [
    "BASELINE_POLICY",
    "ControlPolicy",
    "OcpOptions",
    "OcpSolution",
    "OcpSpec",
    "ShootResult",
    "check_constraints",
    "evaluate_cost",
    "fd_gradient",
    "initial_guess",
    "kkt_residual",
    "case_study_spec",
    "shoot",
    "solve_ocp",
]
