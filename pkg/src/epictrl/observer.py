"""Robust observer for ``dx/dt = A x + G f(Hx, u)``, ``y = Cx``.

The observer is

    dz/dt = M z + (M L + J) y + N G f(q, u),   q = H xhat + K (y - C xhat),
    xhat  = z + L y,

with ``J = P^-1 S``, ``L = P^-1 R``, ``M = A - L C A - J C``, ``N = I - L C``.
The gains come from a semidefinite program: minimize ``mu`` subject to

    [sym(P A - R C A - S C) + Q,  (P - R C) G]
    [        *                 ,       -I    ]  <= -eps I

    [-Q, (H - K C)^T; H - K C, -I / l^2] <= 0,     [-mu I, R; R^T, -I] <= 0,

``P, Q > 0``, where ``l`` is the Lipschitz constant of ``f`` in its state
argument. Feasibility gives an input-to-state stable estimation error with
respect to process disturbance and measurement noise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import cvxpy as cp
import numpy as np
from scipy.stats import spearmanr

from epictrl.model import StructuredModel, eval_dynamics
from epictrl.sim import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    DataSet,
    IntegrationError,
    solve_segments,
    write_csv,
)

DEFAULT_MARGIN = 1e-6
# extra slack imposed inside the solver so that the returned point still
# satisfies the inequalities after the solver's own feasibility tolerance
SOLVER_SLACK = 1e-6


def model_hash(model: StructuredModel) -> str:
    """SHA-256 over the float64 bytes of ``A, G, C, H``."""
    h = hashlib.sha256()
    for m in (model.A, model.G, model.C, model.H):
        arr = np.ascontiguousarray(m, dtype=np.float64)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _sym(M):
    return (M + M.T) / 2


@dataclass(frozen=True, eq=False)
class SdpProblem:
    A_hat: np.ndarray
    G_hat: np.ndarray
    C_hat: np.ndarray
    H: np.ndarray
    lipschitz: float
    margin: float = DEFAULT_MARGIN
    model_hash: str = ""

    def __post_init__(self):
        if not self.lipschitz >= 0:
            raise ValueError("Lipschitz constant must be nonnegative")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        n = self.A_hat.shape[0]
        if self.A_hat.shape != (n, n):
            raise ValueError("A_hat must be square")
        if self.G_hat.shape[0] != n or self.C_hat.shape[1] != n or self.H.shape[1] != n:
            raise ValueError(
                f"inconsistent dimensions: A {self.A_hat.shape}, G {self.G_hat.shape}, "
                f"C {self.C_hat.shape}, H {self.H.shape}"
            )

    @property
    def dims(self) -> dict[str, int]:
        return {"n_x": self.A_hat.shape[0], "n_f": self.G_hat.shape[1],
                "n_y": self.C_hat.shape[0], "n_H": self.H.shape[0]}

    @property
    def block_sizes(self) -> tuple[int, int, int]:
        d = self.dims
        return d["n_x"] + d["n_f"], d["n_x"] + d["n_H"], d["n_x"] + d["n_y"]

    def blocks(self, P, Q, R, S, K, mu) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
        """The three inequality blocks evaluated at numeric gains (``None`` for l = 0)."""
        A, G, C, H = self.A_hat, self.G_hat, self.C_hat, self.H
        d = self.dims
        X = P @ A - R @ C @ A - S @ C
        PG = (P - R @ C) @ G
        b1 = np.block([[X + X.T + Q, PG], [PG.T, -np.eye(d["n_f"])]])
        b2 = None
        if self.lipschitz > 0:
            HK = H - K @ C
            b2 = np.block([[-Q, HK.T], [HK, -np.eye(d["n_H"]) / self.lipschitz**2]])
        b3 = np.block([[-mu * np.eye(d["n_x"]), R], [R.T, -np.eye(d["n_y"])]])
        return _sym(b1), None if b2 is None else _sym(b2), _sym(b3)


def assemble_sdp(model_hat: StructuredModel, lipschitz: float, margin: float = DEFAULT_MARGIN) -> SdpProblem:
    return SdpProblem(model_hat.A, model_hat.G, model_hat.C, model_hat.H, float(lipschitz), float(margin),
                      model_hash(model_hat))


@dataclass(frozen=True, eq=False)
class ObserverGains:
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    K: np.ndarray
    mu: float
    lipschitz: float
    margin: float
    A_hat: np.ndarray = field(repr=False)
    C_hat: np.ndarray = field(repr=False)
    model_hash: str = ""
    status: str = "optimal"

    feasible = True

    @property
    def J(self) -> np.ndarray:
        return np.linalg.solve(self.P, self.S)

    @property
    def L(self) -> np.ndarray:
        return np.linalg.solve(self.P, self.R)

    @property
    def N(self) -> np.ndarray:
        return np.eye(self.P.shape[0]) - self.L @ self.C_hat

    @property
    def M(self) -> np.ndarray:
        L = self.L
        return self.A_hat - L @ self.C_hat @ self.A_hat - self.J @ self.C_hat

    def with_changes(self, **changes) -> "ObserverGains":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return ObserverGains(**kw)

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k).tolist() for k in ("P", "Q", "R", "S", "K", "J", "L", "M", "N")}
        doc.update(mu=self.mu, lipschitz=self.lipschitz, margin=self.margin, model_hash=self.model_hash,
                   status=self.status, A_hat=self.A_hat.tolist(), C_hat=self.C_hat.tolist())
        return doc

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, doc: dict) -> "ObserverGains":
        arr = {k: np.array(doc[k], dtype=float) for k in ("P", "Q", "R", "S", "K", "A_hat", "C_hat")}
        return cls(mu=float(doc["mu"]), lipschitz=float(doc["lipschitz"]), margin=float(doc["margin"]),
                   model_hash=doc.get("model_hash", ""), status=doc.get("status", "optimal"), **arr)

    @classmethod
    def from_json(cls, path) -> "ObserverGains":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SdpInfeasible:
    """Returned instead of gains when the solver cannot find a feasible point."""

    status: str
    message: str

    feasible = False


def solve_observer_sdp(problem: SdpProblem, solver: str = "CLARABEL", slack: float = SOLVER_SLACK,
                       **solver_opts) -> ObserverGains | SdpInfeasible:
    """Minimize ``mu`` subject to the observer inequalities.

    Returns :class:`SdpInfeasible` for infeasible or failed solves. When the
    Lipschitz constant is zero the second inequality is dropped and ``K = 0``.
    """
    d = problem.dims
    n, ny, nH = d["n_x"], d["n_y"], d["n_H"]
    A, G, C, H = problem.A_hat, problem.G_hat, problem.C_hat, problem.H
    P = cp.Variable((n, n), symmetric=True)
    Q = cp.Variable((n, n), symmetric=True)
    R = cp.Variable((n, ny))
    S = cp.Variable((n, ny))
    K = cp.Variable((nH, ny))
    mu = cp.Variable()

    X = P @ A - R @ C @ A - S @ C
    PG = (P - R @ C) @ G
    b1 = cp.bmat([[X + X.T + Q, PG], [PG.T, -np.eye(d["n_f"])]])
    b3 = cp.bmat([[-mu * np.eye(n), R], [R.T, -np.eye(ny)]])
    s1, s2, s3 = problem.block_sizes
    cons = [
        _sym(b1) << -(problem.margin + slack) * np.eye(s1),
        _sym(b3) << -slack * np.eye(s3),
        P >> slack * np.eye(n),
        Q >> slack * np.eye(n),
    ]
    if problem.lipschitz > 0:
        HK = H - K @ C
        b2 = cp.bmat([[-Q, HK.T], [HK, -np.eye(nH) / problem.lipschitz**2]])
        cons.append(_sym(b2) << -slack * np.eye(s2))
    else:
        cons.append(K == 0)
    prob = cp.Problem(cp.Minimize(mu), cons)
    try:
        prob.solve(solver=solver, **solver_opts)
    except cp.error.SolverError as exc:
        return SdpInfeasible("solver_error", str(exc))
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SdpInfeasible(prob.status, f"solver {solver} returned {prob.status}")
    return ObserverGains(
        P=_sym(P.value), Q=_sym(Q.value), R=R.value, S=S.value, K=K.value, mu=float(mu.value),
        lipschitz=problem.lipschitz, margin=problem.margin, A_hat=problem.A_hat, C_hat=problem.C_hat,
        model_hash=problem.model_hash, status=prob.status,
    )


@dataclass
class VerificationReport:
    passed: bool
    max_eig: dict[str, float]
    min_eig: dict[str, float]
    violations: list[str]
    tol: float

    def to_dict(self) -> dict:
        return {"passed": self.passed, "max_eig": self.max_eig, "min_eig": self.min_eig,
                "violations": self.violations, "tol": self.tol}


def verify_gains(gains: ObserverGains, problem: SdpProblem, tol: float = 1e-7) -> VerificationReport:
    """Recompute the inequality blocks from the gains and check them by eigenvalues."""
    b1, b2, b3 = problem.blocks(gains.P, gains.Q, gains.R, gains.S, gains.K, gains.mu)
    max_eig = {
        "12b": float(np.linalg.eigvalsh(b1).max()),
        "12c": float(np.linalg.eigvalsh(b2).max()) if b2 is not None else -np.inf,
        "12d": float(np.linalg.eigvalsh(b3).max()),
    }
    min_eig = {"P": float(np.linalg.eigvalsh(_sym(gains.P)).min()),
               "Q": float(np.linalg.eigvalsh(_sym(gains.Q)).min())}
    violations = []
    if min_eig["P"] < tol:
        violations.append("P ≻ 0")
    if min_eig["Q"] < tol:
        violations.append("Q ≻ 0")
    if max_eig["12b"] > -problem.margin + tol:
        violations.append("12b")
    if max_eig["12c"] > tol:
        violations.append("12c")
    if max_eig["12d"] > tol:
        violations.append("12d")
    if problem.lipschitz == 0 and np.any(gains.K != 0):
        violations.append("K = 0")
    return VerificationReport(not violations, max_eig, min_eig, violations, tol)


# ---------------------------------------------------------------------------
# running the observer

@dataclass
class ObserverRun:
    times: np.ndarray
    z: np.ndarray
    x_hat: np.ndarray
    y_hat: np.ndarray
    error: np.ndarray | None = None
    failed_at: float | None = None

    def error_norm(self) -> np.ndarray:
        if self.error is None:
            raise ValueError("run has no truth to compare against")
        return np.linalg.norm(self.error, axis=1)

    @property
    def terminal_error(self) -> float:
        return float(self.error_norm()[-1])

    def to_csv(self, path=None) -> str:
        nx, ny = self.z.shape[1], self.y_hat.shape[1]
        names = ["t", *(f"z{i}" for i in range(1, nx + 1)), *(f"xhat{i}" for i in range(1, nx + 1)),
                 *(f"yhat{i}" for i in range(1, ny + 1))]
        cols = [self.times[:, None], self.z, self.x_hat, self.y_hat]
        if self.error is not None:
            names += [f"e{i}" for i in range(1, nx + 1)]
            cols.append(self.error)
        return write_csv(path, names, np.hstack(cols))


def _check_compatible(gains: ObserverGains, model_hat: StructuredModel):
    if gains.model_hash and gains.model_hash != model_hash(model_hat):
        raise ValueError("gains were designed for a different model (hash mismatch)")


def _observer_rhs(gains: ObserverGains, model_hat: StructuredModel, u_of, y_of):
    M, L, J, N, K = gains.M, gains.L, gains.J, gains.N, gains.K
    MLJ = M @ L + J
    NG = N @ model_hat.G
    C, idx, f = model_hat.C, model_hat.h_index, model_hat.f

    def rhs(t, z):
        y, u = y_of(t), u_of(t)
        xh = z + L @ y
        q = xh[idx] + K @ (y - C @ xh)
        return M @ z + MLJ @ y + NG @ f(q, u)

    return rhs


def run_observer(gains: ObserverGains, model_hat: StructuredModel, data: DataSet, xhat0,
                 rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> ObserverRun:
    """Integrate the observer driven by the interpolated recorded data.

    ``z(t0) = xhat0 - L ybar(t0)`` so that ``xhat(t0) = xhat0``. On an
    integration failure the run is truncated and ``failed_at`` is set.
    """
    _check_compatible(gains, model_hat)
    L = gains.L
    u_of, y_of = data.input_interpolant(), data.output_interpolant()
    rhs = _observer_rhs(gains, model_hat, u_of, y_of)
    z0 = np.asarray(xhat0, dtype=float) - L @ data.y_bar[0]
    failed_at = None
    try:
        times, z = solve_segments(rhs, data.span, z0, data.times, data.times, rtol, atol)
    except IntegrationError as exc:
        failed_at = exc.last_time
        keep = data.times <= failed_at
        if keep.sum() < 2:
            times, z = data.times[:1], z0[None]
        else:
            sub = data.times[keep]
            times, z = solve_segments(rhs, (sub[0], sub[-1]), z0, sub, sub, rtol, atol)
    n = len(times)
    x_hat = z + data.y_bar[:n] @ L.T
    y_hat = x_hat @ model_hat.C.T
    error = None
    if data.truth is not None:
        error = data.truth.trajectory.states[:n] - x_hat
    return ObserverRun(times, z, x_hat, y_hat, error, failed_at)


@dataclass
class EquivalenceReport:
    max_discrepancy: float
    times: np.ndarray
    e_direct: np.ndarray
    e_eta: np.ndarray


def error_system_check(gains: ObserverGains, model_hat: StructuredModel, data: DataSet, xhat0,
                       rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                       run: ObserverRun | None = None) -> EquivalenceReport:
    """Compare ``x - xhat`` with the output ``eta - L v`` of the error system.

    The error system is integrated together with the true state:

        d eta/dt = M eta + N G (f(Hx, u) - f(q, u)) + N w - (M L + J) v,

    ``w = dx/dt - A x - G f(Hx, ubar)`` is the model/input mismatch and
    ``v = ybar - C x`` the measurement error, both rebuilt from the truth.
    """
    truth = data.truth
    if truth is None:
        raise ValueError("error-system check needs a synthetic data set with known truth")
    run = run if run is not None else run_observer(gains, model_hat, data, xhat0, rtol, atol)
    M, L, J, N, K = gains.M, gains.L, gains.J, gains.N, gains.K
    MLJ = M @ L + J
    NG = N @ model_hat.G
    C, idx, f = model_hat.C, model_hat.h_index, model_hat.f
    u_of, y_of = data.input_interpolant(), data.output_interpolant()
    n = truth.model.n_x
    tmodel, uin = truth.model, truth.input_fn

    def rhs(t, s):
        x, eta = s[:n], s[n:]
        ub, yb = u_of(t), y_of(t)
        xdot = eval_dynamics(tmodel, x, uin(t))
        fx = f(x[idx], ub)
        w = xdot - model_hat.A @ x - model_hat.G @ fx
        v = yb - C @ x
        xh = x - (eta - L @ v)
        q = xh[idx] + K @ (yb - C @ xh)
        deta = M @ eta + NG @ (fx - f(q, ub)) + N @ w - MLJ @ v
        return np.concatenate([xdot, deta])

    x0 = truth.x0
    eta0 = N @ x0 - run.z[0]
    cuts = data.times
    if callable(getattr(uin, "breakpoints", None)):
        cuts = np.union1d(cuts, uin.breakpoints(*data.span))
    times = run.times
    _, s = solve_segments(rhs, (data.span[0], times[-1]), np.concatenate([x0, eta0]), times, cuts, rtol, atol)
    x, eta = s[:, :n], s[:, n:]
    v = data.y_bar[: len(times)] - x @ C.T
    e_eta = eta - v @ L.T
    e_direct = x - run.x_hat
    return EquivalenceReport(float(np.max(np.abs(e_direct - e_eta))), times, e_direct, e_eta)


@dataclass
class DecayReport:
    horizons: list[float]
    horizon_errors: list[float]
    horizon_strictly_decreasing: bool
    levels: list[float]
    level_medians: list[float]
    medians_nondecreasing: bool
    rank_correlation: float
    decay_rate: float | None = None
    decay_r2: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def decay_fit(run: ObserverRun, t_max: float = 10.0) -> tuple[float, float]:
    """Log-linear fit ``log||e(t)|| ~ a - lam t`` on ``[t0, t0 + t_max]``; returns ``(lam, R^2)``."""
    e = run.error_norm()
    t = run.times
    keep = (t <= t[0] + t_max) & (e > 0)
    x, y = t[keep], np.log(e[keep])
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    r2 = 1 - resid.var() / y.var() if y.var() > 0 else 1.0
    return float(-coef[0]), float(r2)


def iss_decay_metrics(runs_by_level: dict[float, list[ObserverRun]],
                      horizon_runs: dict[float, ObserverRun] | None = None) -> DecayReport:
    """Summarize error decay over horizons and the trend of terminal error with noise.

    ``runs_by_level`` maps a noise level (including 0) to runs at that level;
    ``horizon_runs`` maps a horizon to a zero-noise run over that horizon.
    """
    if len(runs_by_level) < 2 or 0 not in {float(k) for k in runs_by_level}:
        raise ValueError("need at least two noise levels including zero")
    levels = sorted(float(k) for k in runs_by_level)
    by_level = {float(k): v for k, v in runs_by_level.items()}
    medians = [float(np.median([r.terminal_error for r in by_level[lv]])) for lv in levels]
    xs = [lv for lv in levels for _ in by_level[lv]]
    ys = [r.terminal_error for lv in levels for r in by_level[lv]]
    rho = float(spearmanr(xs, ys).statistic)
    horizons, herr = [], []
    rate = r2 = None
    if horizon_runs:
        horizons = sorted(float(h) for h in horizon_runs)
        hr = {float(k): v for k, v in horizon_runs.items()}
        herr = [hr[h].terminal_error for h in horizons]
        rate, r2 = decay_fit(hr[horizons[-1]])
    return DecayReport(
        horizons=horizons,
        horizon_errors=herr,
        horizon_strictly_decreasing=bool(np.all(np.diff(herr) < 0)) if herr else False,
        levels=levels,
        level_medians=medians,
        medians_nondecreasing=bool(np.all(np.diff(medians) >= 0)),
        rank_correlation=rho,
        decay_rate=rate,
        decay_r2=r2,
    )


def truncate(data: DataSet, t_end: float) -> DataSet:
    """Data restricted to ``[t0, t_end]`` (truth trimmed accordingly)."""
    keep = data.times <= t_end + 1e-9
    truth = data.truth
    if truth is not None:
        tr = truth.trajectory
        tr = replace(tr, times=tr.times[keep], states=tr.states[keep], outputs=tr.outputs[keep],
                     inputs=tr.inputs[keep])
        truth = replace(truth, trajectory=tr)
    return DataSet(data.times[keep], data.u_bar[keep], data.y_bar[keep], data.noise, truth)


__all__ = [
    "DecayReport",
    "EquivalenceReport",
    "ObserverGains",
    "ObserverRun",
    "SdpInfeasible",
    "SdpProblem",
    "VerificationReport",
    "assemble_sdp",
    "decay_fit",
    "error_system_check",
    "iss_decay_metrics",
    "model_hash",
    "run_observer",
    "solve_observer_sdp",
    "truncate",
    "verify_gains",
]
