"""Local identifiability and observability by a sensitivity rank test.

The map ``(x0, theta) -> (y(t_1), ..., y(t_K))`` is differentiated column by
column with central differences; full column rank of that Jacobian means the
initial state and parameters are locally recoverable from the sampled outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from epictrl.model import PARAM_NAMES, ParameterVector, STATE_NAMES, StructuredModel, eval_output
from epictrl.sim import IntegrationError, integrate_batch, write_csv

ZERO_PATTERN_THRESHOLD = 1e-12


@dataclass
class RankReport:
    jacobian_rows: int
    jacobian_cols: int
    singular_values: np.ndarray
    numerical_rank: int
    tolerance: float
    column_names: list[str]
    null_space: np.ndarray
    zero_pattern: np.ndarray = field(repr=False)
    jacobian: np.ndarray = field(repr=False)

    @property
    def identifiable(self) -> bool:
        return self.numerical_rank == self.jacobian_cols

    @property
    def verdict(self) -> str:
        return "identifiable+observable" if self.identifiable else "deficient"

    def to_dict(self) -> dict:
        return {
            "jacobian_rows": self.jacobian_rows,
            "jacobian_cols": self.jacobian_cols,
            "singular_values": self.singular_values.tolist(),
            "numerical_rank": self.numerical_rank,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            "column_names": self.column_names,
            "null_space": self.null_space.tolist(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text + "\n")
        return text

    def zero_pattern_csv(self, path=None) -> str:
        return write_csv(path, self.column_names, self.zero_pattern.astype(int))


def local_rank_test(
    model: StructuredModel,
    x0,
    theta: ParameterVector | None,
    input_fn,
    sample_times,
    fd_step: float = 1e-5,
    tol: float = 1e-8,
    t0: float | None = None,
    output_index=None,
    rtol: float = 1e-12,
    atol: float = 1e-15,
) -> RankReport:
    """Rank of the sampled-output Jacobian with respect to ``(x0, theta)``.

    ``x0`` is the state at ``t0`` (default: the first sample time). Pass
    ``theta=None`` for a model without parameters. ``output_index`` restricts
    the test to a subset of output channels.
    """
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.size == 0:
        raise ValueError("sample_times must be non-empty")
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    x0 = np.asarray(x0, dtype=float)
    t0 = float(sample_times[0]) if t0 is None else float(t0)
    n_x = model.n_x
    th = np.zeros(0) if theta is None else theta.as_array()
    if theta is not None and model.family is None:
        raise ValueError("parameters given but the model has no parameter family")
    base = np.concatenate([x0, th])
    names = [f"{s}0" for s in STATE_NAMES[:n_x]] + (list(PARAM_NAMES) if theta is not None else [])
    rows = output_index if output_index is not None else slice(None)

    # one-sided difference where a rate would turn negative
    points, plan = [], []
    for i in range(base.size):
        h = max(fd_step * abs(base[i]), 1e-8)
        forward_only = i >= n_x and base[i] - h < 0
        up = base.copy()
        up[i] += h
        down = base.copy()
        if not forward_only:
            down[i] -= h
        points += [up, down]
        plan.append((h if forward_only else 2 * h))

    def model_at(p):
        if theta is None:
            return model
        return model.with_theta(ParameterVector.from_array(p[n_x:]))

    span = (t0, float(sample_times[-1]))
    if span[1] <= span[0]:
        span = (t0, t0 + 1.0)
    t_eval = sample_times

    def outputs(pts):
        models = [model_at(p) for p in pts]
        states = integrate_batch(models, [p[:n_x] for p in pts], input_fn, span, t_eval, rtol, atol)
        return np.stack([eval_output(m, s)[:, rows].ravel() for m, s in zip(models, states)])

    try:
        ys = outputs(points)
    except IntegrationError:
        for j, p in enumerate(points):
            try:
                outputs([p])
            except IntegrationError as exc:
                raise ValueError(f"simulation failed when perturbing column {names[j // 2]!r}") from exc
        raise
    jac = np.stack([(ys[2 * i] - ys[2 * i + 1]) / plan[i] for i in range(base.size)], axis=1)

    if jac.size:
        _, s, vt = np.linalg.svd(jac, full_matrices=True)
    else:
        s, vt = np.zeros(0), np.eye(base.size)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s >= tol * smax)) if smax > 0 else 0
    null = vt[rank:].T if rank < base.size else np.zeros((base.size, 0))
    return RankReport(
        jacobian_rows=jac.shape[0],
        jacobian_cols=jac.shape[1],
        singular_values=s,
        numerical_rank=rank,
        tolerance=tol,
        column_names=names,
        null_space=null,
        zero_pattern=np.abs(jac) > ZERO_PATTERN_THRESHOLD,
        jacobian=jac,
    )


__all__ = ["RankReport", "local_rank_test"]
