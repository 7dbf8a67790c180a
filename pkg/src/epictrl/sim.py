"""Forward simulation, synthetic data and interpolation of sampled records.

Input signals are plain callables ``u(t)``. If they also expose a
``breakpoints(ta, tb)`` method, the integrator restarts at those times so that
jumps in the input never fall inside a step.
"""

from __future__ import annotations

import bisect
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from epictrl.model import (
    INPUT_NAMES,
    OUTPUT_NAMES,
    STATE_NAMES,
    StructuredModel,
    eval_dynamics,
    eval_output,
)

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-13


class IntegrationError(RuntimeError):
    """Raised when the integrator fails; ``last_time`` is the last good time."""

    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last valid time {last_time:g})")
        self.last_time = last_time


# ---------------------------------------------------------------------------
# containers

def _as_time_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a non-empty 1-D array")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    return times


@dataclass
class Trajectory:
    """Time-stamped states with the matching outputs and inputs."""

    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray | None = None
    inputs: np.ndarray | None = None

    def __post_init__(self):
        self.times = _as_time_grid(self.times)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        for name in ("states", "outputs", "inputs"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self.times):
                raise ValueError(f"{name} has {len(arr)} rows for {len(self.times)} times")

    def to_csv(self, path=None) -> str:
        cols = [self.times[:, None], self.states]
        names = ["t", *STATE_NAMES[: self.states.shape[1]]]
        if self.outputs is not None:
            cols.append(self.outputs)
            names += list(OUTPUT_NAMES[: self.outputs.shape[1]])
        return write_csv(path, names, np.hstack(cols))


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian record noise; stds are scalars or per-channel arrays."""

    input_noise_std: float | Sequence[float] = 1e-3
    output_noise_std: float | Sequence[float] = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("input_noise_std", "output_noise_std"):
            std = np.asarray(getattr(self, name), dtype=float)
            if np.any(std < 0) or not np.all(np.isfinite(std)):
                raise ValueError(f"{name} must be finite and nonnegative")

    def to_dict(self) -> dict:
        def plain(v):
            v = np.asarray(v, dtype=float)
            return float(v) if v.ndim == 0 else v.tolist()

        return {"input_noise_std": plain(self.input_noise_std),
                "output_noise_std": plain(self.output_noise_std), "seed": int(self.seed)}


@dataclass
class SyntheticTruth:
    """What generated a synthetic data set: needed by checks that compare against truth."""

    model: StructuredModel
    x0: np.ndarray
    input_fn: Callable
    trajectory: Trajectory
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL


@dataclass
class DataSet:
    """Recorded inputs ``u_bar`` and outputs ``y_bar`` on a sampling grid."""

    times: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray
    noise: NoiseSpec | None = None
    truth: SyntheticTruth | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = _as_time_grid(self.times)
        self.u_bar = np.atleast_2d(np.asarray(self.u_bar, dtype=float))
        self.y_bar = np.atleast_2d(np.asarray(self.y_bar, dtype=float))
        if len(self.u_bar) != len(self.times) or len(self.y_bar) != len(self.times):
            raise ValueError("u_bar, y_bar and times must have equal lengths")

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def input_interpolant(self) -> "LinearInterpolant":
        return LinearInterpolant(self.times, self.u_bar)

    def output_interpolant(self) -> "LinearInterpolant":
        return LinearInterpolant(self.times, self.y_bar)

    def with_outputs(self, keep: Sequence[int]) -> "DataSet":
        """Copy restricted to the given output columns (0-based)."""
        return DataSet(self.times, self.u_bar, self.y_bar[:, list(keep)], self.noise, self.truth)

    def to_csv(self, path=None) -> str:
        names = ["t", *INPUT_NAMES[: self.u_bar.shape[1]], *OUTPUT_NAMES[: self.y_bar.shape[1]]]
        return write_csv(path, names, np.hstack([self.times[:, None], self.u_bar, self.y_bar]))

    @classmethod
    def from_csv(cls, path, n_u: int = 4) -> "DataSet":
        names, table = read_csv(path)
        if names[0] != "t":
            raise ValueError("data CSV must start with a 't' column")
        return cls(table[:, 0], table[:, 1: 1 + n_u], table[:, 1 + n_u:])


# ---------------------------------------------------------------------------
# CSV helpers (comma separated, LF endings, 17 significant digits)

def write_csv(path, names: Sequence[str], table: np.ndarray) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(table), fmt="%.17g", delimiter=",",
               header=",".join(names), comments="")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, newline="\n")
    return text


def read_csv(path) -> tuple[list[str], np.ndarray]:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    table = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    return header.strip().split(","), table


# ---------------------------------------------------------------------------
# inputs

def _round_half_away(a):
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


class NominalInput:
    """Square-wave-like test input of the SIDHER case study.

    Each channel is ``0.01 * round(trig(t / p)) + 0.015`` with round-to-nearest,
    ties away from zero; values are in {0.005, 0.015, 0.025}.
    """

    # (trig function, period divisor) per channel
    _channels = ((np.sin, 2.0), (np.cos, 2.0), (np.sin, 3.0), (np.cos, 3.0))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        vals = [0.01 * _round_half_away(fn(t / p)) + 0.015 for fn, p in self._channels]
        return np.stack(vals, axis=-1)

    def breakpoints(self, ta: float, tb: float) -> np.ndarray:
        """Times in ``(ta, tb)`` where some channel jumps."""
        pts = []
        for fn, p in self._channels:
            # the rounded value changes where sin/cos crosses +-1/2
            base = (np.array([1, 5, 7, 11]) if fn is np.sin else np.array([2, 4, 8, 10])) * np.pi / 6
            k0 = math.floor(ta / (p * 2 * np.pi)) - 1
            k1 = math.ceil(tb / (p * 2 * np.pi)) + 1
            for k in range(k0, k1 + 1):
                pts.extend(p * (base + 2 * np.pi * k))
        pts = np.unique(np.array(pts))
        return pts[(pts > ta) & (pts < tb)]


_NOMINAL = NominalInput()


def nominal_input(t) -> np.ndarray:
    if np.any(np.asarray(t) < 0):
        raise ValueError("nominal input is defined for t >= 0")
    return _NOMINAL(t)


# lets integrators restart at the jumps of the plain function too
nominal_input.breakpoints = _NOMINAL.breakpoints


class ConstantInput:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def __call__(self, t):
        return self.value.copy()


class LinearInterpolant:
    """Piecewise-linear interpolation of sampled records, exact at the nodes."""

    def __init__(self, times, values):
        self.times = _as_time_grid(times)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if len(self.values) != len(self.times):
            raise ValueError("values and times must have equal lengths")
        self._tlist = self.times.tolist()
        self._slopes = (np.diff(self.values, axis=0) / np.diff(self.times)[:, None]
                        if len(self.times) > 1 else np.zeros((0, self.values.shape[1])))
        span = self.times[-1] - self.times[0]
        self._slack = 1e-12 * max(1.0, abs(self.times[-1]), span)

    def _check(self, t):
        if t < self.times[0] - self._slack or t > self.times[-1] + self._slack:
            raise ValueError(f"t={t} outside sampled range [{self.times[0]}, {self.times[-1]}]")

    def __call__(self, t):
        if np.ndim(t) == 0:
            t = float(t)
            self._check(t)
            if len(self._tlist) == 1:
                return self.values[0].copy()
            k = min(max(bisect.bisect_right(self._tlist, t) - 1, 0), len(self._tlist) - 2)
            return self.values[k] + (t - self._tlist[k]) * self._slopes[k]
        t = np.asarray(t, dtype=float)
        for tt in (t.min(), t.max()):
            self._check(float(tt))
        if len(self._tlist) == 1:
            return np.broadcast_to(self.values[0], t.shape + self.values.shape[1:]).copy()
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        return self.values[k] + (t - self.times[k])[..., None] * self._slopes[k]

    def breakpoints(self, ta: float, tb: float) -> np.ndarray:
        return self.times[(self.times > ta) & (self.times < tb)]


def interpolate(data: DataSet, t) -> tuple[np.ndarray, np.ndarray]:
    """Recorded ``(u_bar, y_bar)`` linearly interpolated at ``t``."""
    return data.input_interpolant()(t), data.output_interpolant()(t)


# ---------------------------------------------------------------------------
# integration

def _segments(ta: float, tb: float, *sources) -> np.ndarray:
    cuts = [np.array([ta, tb])]
    for src in sources:
        if src is None:
            continue
        if callable(getattr(src, "breakpoints", None)):
            cuts.append(np.asarray(src.breakpoints(ta, tb), dtype=float))
        elif callable(src):
            continue
        else:
            cuts.append(np.asarray(src, dtype=float))
    pts = np.unique(np.concatenate(cuts))
    pts = pts[(pts >= ta) & (pts <= tb)]
    # drop cuts closer than round-off to a neighbour
    keep = np.concatenate([[True], np.diff(pts) > 1e-12 * max(1.0, abs(tb))])
    pts = pts[keep]
    pts[-1] = tb
    return pts


def solve_segments(rhs, span, x0, t_eval=None, breakpoints=None, rtol=DEFAULT_RTOL,
                   atol=DEFAULT_ATOL, method="DOP853", max_step=np.inf):
    """Integrate ``dx/dt = rhs(t, x)`` restarting at every breakpoint.

    Inside the segment ``[a, b]`` the right-hand side is called with times
    clamped to ``[a, b)`` so right-continuous inputs never leak across a jump.
    Returns ``(times, states)``; ``times`` is ``t_eval`` if given, otherwise the
    union of the accepted steps.
    """
    ta, tb = map(float, span)
    if not tb > ta:
        raise ValueError(f"integration span must satisfy tb > ta, got {span}")
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite initial state", ta)
    cuts = _segments(ta, tb, breakpoints)
    if t_eval is not None:
        t_eval = _as_time_grid(t_eval)
        if t_eval[0] < ta - 1e-12 or t_eval[-1] > tb + 1e-12:
            raise ValueError("t_eval outside the integration span")
    out_t, out_x = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        eps = 1e-13 * max(1.0, abs(b))

        def seg_rhs(t, y, a=a, b=b):
            return rhs(min(max(t, a), b - eps), y)

        last = b == cuts[-1]
        if t_eval is not None:
            mask = (t_eval >= a) & ((t_eval < b) | (last & (t_eval <= b)))
            wanted = np.clip(t_eval[mask], a, b)
            seg_eval = np.append(wanted, b) if not (wanted.size and wanted[-1] == b) else wanted
        else:
            seg_eval = None
        sol = solve_ivp(seg_rhs, (a, b), x, method=method, t_eval=seg_eval, rtol=rtol, atol=atol,
                        max_step=max_step)
        if sol.status != 0 or not np.all(np.isfinite(sol.y)):
            good = np.all(np.isfinite(sol.y), axis=0)
            t_last = float(sol.t[good][-1]) if good.any() else a
            raise IntegrationError(f"integration failed: {sol.message}", t_last)
        x = sol.y[:, -1].copy()
        if t_eval is None:
            ts, ys = sol.t, sol.y.T
            if out_t:
                ts, ys = ts[1:], ys[1:]
        else:
            ts, ys = sol.t[: wanted.size], sol.y.T[: wanted.size]
        out_t.append(ts)
        out_x.append(ys)
    times = np.concatenate(out_t)
    states = np.concatenate(out_x, axis=0)
    return times, states


def integrate(
    model: StructuredModel,
    x0,
    input_fn: Callable,
    span,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    t_eval=None,
    method: str = "DOP853",
) -> Trajectory:
    """Integrate the model from ``x0`` over ``span`` with an adaptive Runge-Kutta scheme."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,):
        raise ValueError(f"x0 must have shape ({model.n_x},), got {x0.shape}")

    def rhs(t, x):
        return eval_dynamics(model, x, input_fn(t))

    times, states = solve_segments(rhs, span, x0, t_eval, input_fn, rtol, atol, method)
    inputs = np.array([input_fn(t) for t in times])
    return Trajectory(times, states, eval_output(model, states), inputs)


def stack_matrices(models: Sequence[StructuredModel]):
    """Stack ``A``, ``G``, ``C`` of models sharing ``H`` and ``f`` along a batch axis."""
    first = models[0]
    for m in models[1:]:
        if m.f.name != first.f.name or not np.array_equal(m.H, first.H):
            raise ValueError("batched models must share H and f")
    return (np.stack([m.A for m in models]), np.stack([m.G for m in models]),
            np.stack([m.C for m in models]))


def integrate_batch(models: Sequence[StructuredModel], x0s, input_fn, span, t_eval,
                    rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, method="DOP853") -> np.ndarray:
    """Integrate several parameterizations of one model structure as a single system.

    Returns states with shape ``(batch, len(t_eval), n_x)``.
    """
    A, G, _ = stack_matrices(models)
    f, idx = models[0].f, models[0].h_index
    x0s = np.asarray(x0s, dtype=float)
    b, n = x0s.shape

    def rhs(t, y):
        x = y.reshape(b, n)
        u = input_fn(t)
        dx = np.einsum("bij,bj->bi", A, x) + np.einsum("bij,bj->bi", G, f(x[:, idx], u))
        return dx.ravel()

    _, ys = solve_segments(rhs, span, x0s.ravel(), t_eval, input_fn, rtol, atol, method)
    return ys.reshape(len(ys), b, n).transpose(1, 0, 2)


def integrate_sampled(A, G, f, h_index, x0s, times, u_samples, substeps: int = 2) -> np.ndarray:
    """Fixed-step RK4 driven by linearly interpolated input samples.

    Steps are aligned with the sampling grid, where the interpolated input has
    its kinks, so the scheme keeps its fourth order. ``A`` and ``G`` carry a
    leading batch axis; returns states with shape ``(batch, len(times), n_x)``.
    """
    times = _as_time_grid(times)
    u_samples = np.asarray(u_samples, dtype=float)
    x = np.array(x0s, dtype=float)
    b, n = x.shape
    out = np.empty((b, len(times), n))
    out[:, 0] = x
    At = np.swapaxes(A, 1, 2)
    Gt = np.swapaxes(G, 1, 2)

    def rhs(x, u):
        return (x[:, None, :] @ At)[:, 0] + (f(x[:, h_index], u)[:, None, :] @ Gt)[:, 0]

    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        h = dt / substeps
        u0, u1 = u_samples[k], u_samples[k + 1]
        for s in range(substeps):
            a0, am, a1 = s / substeps, (s + 0.5) / substeps, (s + 1) / substeps
            ua, um, ub = u0 + a0 * (u1 - u0), u0 + am * (u1 - u0), u0 + a1 * (u1 - u0)
            k1 = rhs(x, ua)
            k2 = rhs(x + 0.5 * h * k1, um)
            k3 = rhs(x + 0.5 * h * k2, um)
            k4 = rhs(x + h * k3, ub)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[:, k + 1] = x
    if not np.all(np.isfinite(out)):
        bad = np.where(~np.all(np.isfinite(out), axis=(0, 2)))[0][0]
        raise IntegrationError("non-finite state in fixed-step integration", float(times[bad - 1]))
    return out


def rk4_fixed(model: StructuredModel, x0, input_fn, span, dt: float, breakpoints=None) -> np.ndarray:
    """Classical RK4 with (nearly) uniform steps, split at input breakpoints; returns x(tb).

    Independent reference path for checking :func:`integrate`.
    """
    ta, tb = map(float, span)
    cuts = _segments(ta, tb, breakpoints if breakpoints is not None else input_fn)
    x = np.asarray(x0, dtype=float).copy()
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, int(math.ceil((b - a) / dt - 1e-9)))
        h = (b - a) / n
        eps = 1e-13 * max(1.0, abs(b))
        u_seg = input_fn(0.5 * (a + b)) if callable(getattr(input_fn, "breakpoints", None)) else None
        for i in range(n):
            t = a + i * h
            if u_seg is None:
                u1, u2, u3 = input_fn(t), input_fn(min(t + h / 2, b - eps)), input_fn(min(t + h, b - eps))
            else:
                u1 = u2 = u3 = u_seg
            k1 = eval_dynamics(model, x, u1)
            k2 = eval_dynamics(model, x + h / 2 * k1, u2)
            k3 = eval_dynamics(model, x + h / 2 * k2, u2)
            k4 = eval_dynamics(model, x + h * k3, u3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


# ---------------------------------------------------------------------------
# synthetic data

def sample_grid(span, sample_dt: float) -> np.ndarray:
    t0, t1 = map(float, span)
    if sample_dt <= 0:
        raise ValueError("sample_dt must be positive")
    if not t1 > t0:
        raise ValueError(f"data span must satisfy t1 > t0, got {span}")
    n = int(round((t1 - t0) / sample_dt))
    if not math.isclose(t0 + n * sample_dt, t1, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(t1))):
        raise ValueError(f"span length {t1 - t0} is not a multiple of sample_dt={sample_dt}")
    return t0 + sample_dt * np.arange(n + 1)


def generate_dataset(
    model: StructuredModel,
    x0,
    input_fn: Callable,
    span,
    sample_dt: float = 0.1,
    noise: NoiseSpec | None = None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> DataSet:
    """Simulate with the noise-free input and record noisy inputs and outputs.

    Noise is drawn from ``numpy.random.default_rng(noise.seed)``: first the
    input noise ``(T, n_u)``, then the output noise ``(T, n_y)``.
    """
    noise = noise if noise is not None else NoiseSpec(0.0, 0.0, 0)
    times = sample_grid(span, sample_dt)
    traj = integrate(model, x0, input_fn, (times[0], times[-1]), rtol, atol, t_eval=times)
    rng = np.random.default_rng(noise.seed)
    du = rng.standard_normal(traj.inputs.shape) * np.asarray(noise.input_noise_std, dtype=float)
    dy = rng.standard_normal(traj.outputs.shape) * np.asarray(noise.output_noise_std, dtype=float)
    truth = SyntheticTruth(model, np.asarray(x0, dtype=float), input_fn, traj, rtol, atol)
    return DataSet(times, traj.inputs + du, traj.outputs + dy, noise, truth)


# ---------------------------------------------------------------------------
# forecasting

def forecast_polyfit(times, values, degree: int, horizon) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares polynomial fit of ``values(times)`` evaluated at ``horizon`` times.

    Times are centred and scaled before fitting; a rank-deficient design raises
    ``ValueError`` with its condition number.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    horizon = np.atleast_1d(np.asarray(horizon, dtype=float))
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if times.size < degree + 1:
        raise ValueError(f"need at least {degree + 1} points for degree {degree}, got {times.size}")
    centre = times.mean()
    scale = max(np.ptp(times) / 2, 1e-300) if times.size > 1 else 1.0
    V = np.vander((times - centre) / scale, degree + 1, increasing=True)
    coef, _, rank, sv = np.linalg.lstsq(V, values, rcond=None)
    if rank < degree + 1:
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        raise ValueError(f"rank-deficient polynomial fit (rank {rank} < {degree + 1}, cond={cond:.3g})")
    Vh = np.vander((horizon - centre) / scale, degree + 1, increasing=True)
    return horizon, Vh @ coef


__all__ = [
    "ConstantInput", "DataSet", "IntegrationError", "LinearInterpolant", "NoiseSpec",
    "NominalInput", "SyntheticTruth", "Trajectory", "forecast_polyfit", "generate_dataset",
    "integrate", "integrate_batch", "integrate_sampled", "interpolate", "nominal_input",
    "read_csv", "rk4_fixed", "sample_grid", "solve_segments", "stack_matrices", "write_csv",
]
