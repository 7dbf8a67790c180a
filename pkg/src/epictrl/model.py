"""Structured compartmental models ``dx/dt = A x + G f(H x, u)``, ``y = C x``.

The nonlinearity ``f`` is looked up by name in :data:`NONLINEARITIES`, which
keeps models serializable. The SIDHER model (susceptible, infected, detected,
hospitalized, extinct, recovered) is built by :func:`build_sidher`.

All evaluation functions accept arrays with arbitrary leading batch dimensions,
so ``x`` may be ``(n_x,)`` or ``(..., n_x)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

PARAM_NAMES = ("beta", "gamma", "rho", "sigma", "xi", "lambda", "phi", "tau", "nu")
STATE_NAMES = ("S", "I", "D", "H", "E", "R")
OUTPUT_NAMES = tuple(f"y{i}" for i in range(1, 11))
INPUT_NAMES = ("u1", "u2", "u3", "u4")

# attribute names differ from the public names only for ``lambda``
_ATTR = {name: ("lam" if name == "lambda" else name) for name in PARAM_NAMES}


@dataclass(frozen=True)
class ParameterVector:
    """Epidemic rates in 1/day.

    ``beta`` must be nonnegative; every other rate lies in ``[0, 1]``. The
    recovery-immunity rate is stored as ``lam`` but is called ``"lambda"``
    everywhere else (dicts, JSON, CSV).
    """

    beta: float
    gamma: float
    rho: float
    sigma: float
    xi: float
    lam: float
    phi: float
    tau: float
    nu: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, _ATTR[name])
            if not isinstance(value, (int, float, np.floating, np.integer)):
                raise TypeError(f"parameter {name!r} must be a real number, got {value!r}")
            value = float(value)
            object.__setattr__(self, _ATTR[name], value)
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"parameter {name!r} must be finite and nonnegative, got {value}")
            if name != "beta" and value > 1.0:
                raise ValueError(f"parameter {name!r} must lie in [0, 1], got {value}")

    def __getitem__(self, name: str) -> float:
        return getattr(self, _ATTR[name])

    def as_dict(self) -> dict[str, float]:
        return {name: self[name] for name in PARAM_NAMES}

    def as_array(self) -> np.ndarray:
        return np.array([self[name] for name in PARAM_NAMES])

    @classmethod
    def from_dict(cls, values: Mapping[str, float]) -> "ParameterVector":
        unknown = set(values) - set(PARAM_NAMES) - {"lam"}
        if unknown:
            raise ValueError(f"unknown parameter(s): {sorted(unknown)}")
        kwargs = {}
        for name in PARAM_NAMES:
            key = name if name in values else _ATTR[name]
            if key not in values:
                raise ValueError(f"missing parameter {name!r}")
            kwargs[_ATTR[name]] = values[key]
        return cls(**kwargs)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got shape {values.shape}")
        return cls(*[float(v) for v in values])

    def replace(self, **changes: float) -> "ParameterVector":
        values = self.as_dict()
        for name, value in changes.items():
            name = "lambda" if name == "lam" else name
            if name not in values:
                raise ValueError(f"unknown parameter {name!r}")
            values[name] = value
        return ParameterVector.from_dict(values)


#: Rates used to generate the synthetic data of the SIDHER case study.
TRUE_THETA = ParameterVector(
    beta=0.35, gamma=0.1, rho=0.05, sigma=0.04, xi=0.02, lam=0.0167, phi=0.1429, tau=0.3, nu=0.01
)
#: Published estimates for the same data, used as the "estimated model" in the control study.
CASE_ESTIMATE = ParameterVector(
    beta=0.3530, gamma=0.0981, rho=0.0501, sigma=0.0399, xi=0.0202, lam=0.0383, phi=0.1428,
    tau=0.2757, nu=0.0100,
)
#: Initial state of the synthetic outbreak, ordered (S, I, D, H, E, R).
CASE_X0 = np.array([0.999, 0.0005, 0.0005, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# nonlinearities

@dataclass(frozen=True)
class Nonlinearity:
    """Named nonlinearity ``f(h, u)`` with its Jacobians.

    ``func`` maps ``(..., n_in)`` and ``(..., n_u)`` to ``(..., n_out)``;
    ``jac`` maps the same arguments to ``(..., n_out, n_in)`` and the optional
    ``jac_u`` to ``(..., n_out, n_u)``.
    """

    name: str
    n_in: int
    n_u: int
    n_out: int
    func: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False, compare=False)
    jac: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False, compare=False)
    jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = field(default=None, repr=False,
                                                                       compare=False)

    def __call__(self, h, u):
        return self.func(np.asarray(h, dtype=float), np.asarray(u, dtype=float))

    @classmethod
    def constant(cls, value: Sequence[float], n_in: int, n_u: int, name: str | None = None):
        """A state-independent nonlinearity returning ``value`` everywhere."""
        value = np.asarray(value, dtype=float)
        n_out = value.shape[0]

        def func(h, u):
            shape = np.broadcast_shapes(h.shape[:-1], u.shape[:-1])
            return np.broadcast_to(value, shape + (n_out,)).copy()

        def jac(h, u):
            shape = np.broadcast_shapes(h.shape[:-1], u.shape[:-1])
            return np.zeros(shape + (n_out, n_in))

        def jac_u(h, u):
            shape = np.broadcast_shapes(h.shape[:-1], u.shape[:-1])
            return np.zeros(shape + (n_out, n_u))

        return cls(name or f"constant_{n_out}", n_in, n_u, n_out, func, jac, jac_u)


def _sidher_f(h, u):
    S, I, H = h[..., 0], h[..., 1], h[..., 2]
    S, I, H, u1, u2, u3, u4 = np.broadcast_arrays(S, I, H, u[..., 0], u[..., 1], u[..., 2], u[..., 3])
    SI = S * I
    return np.stack([SI, SI * u1, H * u2, I * u3, S * u4], axis=-1)


def _sidher_jac(h, u):
    S, I = h[..., 0], h[..., 1]
    S, I, u1, u2, u3, u4 = np.broadcast_arrays(S, I, u[..., 0], u[..., 1], u[..., 2], u[..., 3])
    out = np.zeros(S.shape + (5, 3))
    out[..., 0, 0] = I
    out[..., 0, 1] = S
    out[..., 1, 0] = I * u1
    out[..., 1, 1] = S * u1
    out[..., 2, 2] = u2
    out[..., 3, 1] = u3
    out[..., 4, 0] = u4
    return out


def _sidher_jac_u(h, u):
    S, I, H = h[..., 0], h[..., 1], h[..., 2]
    S, I, H, _ = np.broadcast_arrays(S, I, H, u[..., 0])
    out = np.zeros(S.shape + (5, 4))
    out[..., 1, 0] = S * I
    out[..., 2, 1] = H
    out[..., 3, 2] = I
    out[..., 4, 3] = S
    return out


NONLINEARITIES: dict[str, Nonlinearity] = {}


def register_nonlinearity(nl: Nonlinearity) -> Nonlinearity:
    NONLINEARITIES[nl.name] = nl
    return nl


SIDHER_F = register_nonlinearity(Nonlinearity("sidher_f", 3, 4, 5, _sidher_f, _sidher_jac, _sidher_jac_u))


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True, eq=False)
class StructuredModel:
    """``dx/dt = A x + G f(H x, u)``, ``y = C x``.

    ``family`` names the builder that maps a :class:`ParameterVector` to the
    matrices (see :data:`MODEL_FAMILIES`); models without parameters leave both
    ``family`` and ``theta`` as ``None``.
    """

    A: np.ndarray
    G: np.ndarray
    C: np.ndarray
    H: np.ndarray
    f: Nonlinearity
    theta: ParameterVector | None = None
    family: str | None = None

    def __post_init__(self):
        for name in ("A", "G", "C", "H"):
            mat = np.array(getattr(self, name), dtype=float)
            if mat.ndim != 2:
                raise ValueError(f"{name} must be a 2-D matrix, got shape {mat.shape}")
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.G.shape[0] != n_x or self.C.shape[1] != n_x or self.H.shape[1] != n_x:
            raise ValueError("A, G, C, H disagree on the state dimension")
        if not np.all((self.H == 0) | (self.H == 1)) or not np.all(self.H.sum(axis=1) == 1):
            raise ValueError("H must be a 0/1 selector matrix with exactly one 1 per row")
        if self.G.shape[1] != self.f.n_out:
            raise ValueError(f"G has {self.G.shape[1]} columns but f returns {self.f.n_out} values")
        if self.H.shape[0] != self.f.n_in:
            raise ValueError(f"H selects {self.H.shape[0]} states but f expects {self.f.n_in}")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.f.n_u

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_g(self) -> int:
        return self.G.shape[1]

    @property
    def n_f(self) -> int:
        return self.f.n_out

    @property
    def n_H(self) -> int:
        return self.H.shape[0]

    @property
    def dims(self) -> dict[str, int]:
        return dict(n_x=self.n_x, n_u=self.n_u, n_y=self.n_y, n_g=self.n_g, n_f=self.n_f, n_H=self.n_H)

    @property
    def h_index(self) -> np.ndarray:
        """State indices picked out by the rows of ``H``."""
        return np.argmax(self.H, axis=1)

    def with_theta(self, theta: ParameterVector) -> "StructuredModel":
        if self.family is None:
            raise ValueError("model has no parameter family; cannot rebuild with new parameters")
        return MODEL_FAMILIES[self.family](theta)

    def with_matrices(self, **mats) -> "StructuredModel":
        """Copy with some of ``A``, ``G``, ``C``, ``H`` replaced; drops the family link."""
        kw = dict(A=self.A, G=self.G, C=self.C, H=self.H)
        kw.update(mats)
        return StructuredModel(f=self.f, theta=self.theta, family=None, **kw)

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "A": self.A.tolist(),
            "G": self.G.tolist(),
            "C": self.C.tolist(),
            "H": self.H.astype(int).tolist(),
            "theta": None if self.theta is None else self.theta.as_dict(),
            "nonlinearity": self.f.name,
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StructuredModel":
        name = doc["nonlinearity"]
        if name not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {name!r}")
        theta = None if doc.get("theta") is None else ParameterVector.from_dict(doc["theta"])
        model = cls(
            A=np.array(doc["A"], dtype=float),
            G=np.array(doc["G"], dtype=float),
            C=np.array(doc["C"], dtype=float),
            H=np.array(doc["H"], dtype=float),
            f=NONLINEARITIES[name],
            theta=theta,
            family=doc.get("family"),
        )
        dims = doc.get("dims")
        if dims is not None and dict(dims) != model.dims:
            raise ValueError(f"declared dims {dict(dims)} do not match matrices {model.dims}")
        return model


def sidher_matrices(theta: ParameterVector):
    """Return ``(A, G, C, H)`` for the SIDHER model, state order (S, I, D, H, E, R)."""
    b, g, rho, s, xi = theta.beta, theta.gamma, theta.rho, theta.sigma, theta.xi
    lam, phi, tau, nu = theta.lam, theta.phi, theta.tau, theta.nu
    A = np.array([
        [0, 0, 0, 0, 0, lam],
        [0, -g, 0, 0, 0, 0],
        [0, 0, -(rho + phi), 0, 0, 0],
        [0, 0, phi, -xi, 0, 0],
        [0, 0, 0, xi, 0, 0],
        [0, g, rho, 0, 0, -lam],
    ], dtype=float)
    G = np.array([
        [-b, b, 0, 0, -nu],
        [b, -b, 0, -tau, 0],
        [0, 0, 0, tau, 0],
        [0, 0, -s + xi, 0, 0],
        [0, 0, -xi, 0, 0],
        [0, 0, s, 0, nu],
    ], dtype=float)
    C = np.array([
        [nu, 0, 0, 0, 0, 0],
        [0, tau, 0, 0, 0, 0],
        [0, 0, 1, 0, 0, 0],
        [0, 0, rho, 0, 0, 0],
        [0, 0, phi, 0, 0, 0],
        [0, 0, 0, 1, 0, 0],
        [0, 0, 0, s, 0, 0],
        [0, 0, 0, xi, 0, 0],
        [0, 0, 0, 0, 1, 0],
        [1, 1, 0, 0, 0, 1],
    ], dtype=float)
    H = np.array([
        [1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0, 0, 0, 1, 0, 0],
    ], dtype=float)
    return A, G, C, H


def build_sidher(theta: ParameterVector) -> StructuredModel:
    if not isinstance(theta, ParameterVector):
        theta = ParameterVector.from_dict(theta)
    A, G, C, H = sidher_matrices(theta)
    return StructuredModel(A=A, G=G, C=C, H=H, f=SIDHER_F, theta=theta, family="sidher")


MODEL_FAMILIES: dict[str, Callable[[ParameterVector], StructuredModel]] = {"sidher": build_sidher}


def _check_last(arr: np.ndarray, n: int, what: str):
    if arr.ndim == 0 or arr.shape[-1] != n:
        raise ValueError(f"{what} must have trailing dimension {n}, got shape {arr.shape}")


def eval_dynamics(model: StructuredModel, x, u) -> np.ndarray:
    """Right-hand side ``A x + G f(H x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_last(x, model.n_x, "state")
    _check_last(u, model.n_u, "input")
    h = x[..., model.h_index]
    return x @ model.A.T + model.f(h, u) @ model.G.T


def eval_output(model: StructuredModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_last(x, model.n_x, "state")
    return x @ model.C.T


# ---------------------------------------------------------------------------
# Lipschitz constant

@dataclass(frozen=True)
class Domain:
    """Compact domain for states and inputs.

    ``state_box`` and ``input_box`` are ``(n, 2)`` arrays of ``[lower, upper]``.
    With ``simplex`` set, states are further restricted to the unit simplex.
    """

    state_box: np.ndarray
    input_box: np.ndarray
    simplex: bool = False

    def __post_init__(self):
        for name in ("state_box", "input_box"):
            box = np.array(getattr(self, name), dtype=float)
            if box.ndim != 2 or box.shape[1] != 2:
                raise ValueError(f"{name} must have shape (n, 2), got {box.shape}")
            if np.any(box[:, 0] > box[:, 1]):
                raise ValueError(f"{name} has an empty interval (lower > upper)")
            box.setflags(write=False)
            object.__setattr__(self, name, box)
        if self.simplex:
            lo = self.state_box[:, 0]
            if lo.sum() > 1.0 or np.all(self.state_box[:, 1] < 0):
                raise ValueError("state box does not intersect the unit simplex")

    @classmethod
    def sidher(cls, simplex: bool = False) -> "Domain":
        state = np.tile([0.0, 1.0], (6, 1))
        inputs = np.array([[0.0, 1.0], [0.0, 0.9], [0.1, 0.7], [0.0, 0.7]])
        return cls(state, inputs, simplex)


def _sigma_max(jac: np.ndarray) -> np.ndarray:
    # largest singular value over a stack of matrices
    return np.linalg.svd(jac, compute_uv=False)[..., 0]


def _axis_is_affine(model: StructuredModel, axis: int, lo: np.ndarray, hi: np.ndarray, rng) -> bool:
    """Check numerically whether the Jacobian is affine along one axis of (h, u)."""
    n_h = model.n_H
    base = lo + (hi - lo) * rng.random((8, lo.size))
    a, b = base.copy(), base.copy()
    a[:, axis], b[:, axis] = lo[axis], hi[axis]
    mid = 0.5 * (a + b)
    ja, jb, jm = (model.f.jac(p[:, :n_h], p[:, n_h:]) for p in (a, b, mid))
    scale = max(1.0, float(np.abs(ja).max()), float(np.abs(jb).max()))
    return bool(np.allclose(jm, 0.5 * (ja + jb), rtol=0.0, atol=1e-12 * scale))


def _simplex_lattice(k: int, density: int) -> np.ndarray:
    """Points of ``{h >= 0, sum(h) <= 1}`` in ``k`` dimensions on a regular lattice."""
    m = density - 1
    pts = [c for c in itertools.product(range(m + 1), repeat=k) if sum(c) <= m]
    return np.array(pts, dtype=float) / m


def estimate_lipschitz(
    model: StructuredModel,
    domain: Domain,
    grid_density: int = 21,
    refine: bool = True,
    max_points: int = 2_000_000,
) -> float:
    """Grid estimate of ``sup sigma_max(df/dh (H x, u))`` over ``domain``.

    Axes along which the Jacobian is affine only need their two endpoints,
    because ``sigma_max`` is convex in the Jacobian entries; the remaining
    axes get ``grid_density`` samples. In simplex mode the selected states are
    sampled on a simplex lattice. The best grid cell is then refined once with
    a finer local grid.
    """
    if grid_density < 2:
        raise ValueError("grid_density must be at least 2")
    if domain.state_box.shape[0] != model.n_x or domain.input_box.shape[0] != model.n_u:
        raise ValueError("domain dimensions do not match the model")
    n_h = model.n_H
    h_box = domain.state_box[model.h_index]
    lo = np.concatenate([h_box[:, 0], domain.input_box[:, 0]])
    hi = np.concatenate([h_box[:, 1], domain.input_box[:, 1]])
    rng = np.random.default_rng(0)
    affine = [
        lo[i] == hi[i] or _axis_is_affine(model, i, lo, hi, rng) for i in range(lo.size)
    ]

    def axis_values(i, density):
        if lo[i] == hi[i]:
            return np.array([lo[i]])
        if affine[i]:
            return np.array([lo[i], hi[i]])
        return np.linspace(lo[i], hi[i], density)

    if domain.simplex:
        h_pts = _simplex_lattice(n_h, grid_density)
        keep = np.all((h_pts >= h_box[:, 0] - 1e-15) & (h_pts <= h_box[:, 1] + 1e-15), axis=1)
        h_pts = h_pts[keep]
        if h_pts.size == 0:
            raise ValueError("no lattice point of the simplex lies inside the state box")
    else:
        h_pts = np.array(list(itertools.product(*[axis_values(i, grid_density) for i in range(n_h)])))
    u_pts = np.array(list(itertools.product(
        *[axis_values(n_h + j, grid_density) for j in range(model.n_u)]
    ))).reshape(-1, model.n_u)

    if len(h_pts) * len(u_pts) > max_points:
        raise ValueError(
            f"grid has {len(h_pts) * len(u_pts)} points (limit {max_points}); lower grid_density"
        )
    jac = model.f.jac(h_pts[:, None, :], u_pts[None, :, :])
    sig = _sigma_max(jac)
    best = float(sig.max())
    if not refine:
        return best

    i, j = np.unravel_index(np.argmax(sig), sig.shape)
    point = np.concatenate([h_pts[i], u_pts[j]])
    curved = [k for k in range(lo.size) if not affine[k]]
    if not curved:
        return best
    # local pass: one grid cell either side of the best point, on non-affine axes only
    cell = (hi - lo) / (grid_density - 1)
    local_density = max(3, min(11, int(round(max_points ** (1.0 / len(curved))))))
    axes = []
    for k in range(lo.size):
        if k in curved:
            axes.append(np.linspace(max(lo[k], point[k] - cell[k]), min(hi[k], point[k] + cell[k]),
                                    local_density))
        else:
            axes.append(np.array([point[k]]))
    pts = np.array(list(itertools.product(*axes)))
    if domain.simplex:
        pts = pts[pts[:, :n_h].sum(axis=1) <= 1.0 + 1e-15]
    if len(pts):
        best = max(best, float(_sigma_max(model.f.jac(pts[:, :n_h], pts[:, n_h:])).max()))
    return best


def lipschitz_ratio_check(model: StructuredModel, domain: Domain, ell: float, n_pairs: int = 10_000,
                          seed: int = 0) -> float:
    """Largest observed ``|f(h1,u) - f(h2,u)| / |h1 - h2|`` divided by ``ell`` on random pairs."""
    rng = np.random.default_rng(seed)
    n_h = model.n_H
    h_box = domain.state_box[model.h_index]

    def draw_h():
        if domain.simplex:
            x = rng.dirichlet(np.ones(model.n_x), size=n_pairs)
            x = np.clip(x, domain.state_box[:, 0], domain.state_box[:, 1])
            return x[:, model.h_index]
        return h_box[:, 0] + (h_box[:, 1] - h_box[:, 0]) * rng.random((n_pairs, n_h))

    h1, h2 = draw_h(), draw_h()
    ub = domain.input_box
    u = ub[:, 0] + (ub[:, 1] - ub[:, 0]) * rng.random((n_pairs, model.n_u))
    num = np.linalg.norm(model.f(h1, u) - model.f(h2, u), axis=-1)
    den = np.linalg.norm(h1 - h2, axis=-1)
    ratio = num / np.where(den > 0, den, np.inf)
    return float(ratio.max() / ell) if ell > 0 else float(ratio.max())


__all__ = [
    "Domain", "INPUT_NAMES", "MODEL_FAMILIES", "NONLINEARITIES", "Nonlinearity", "OUTPUT_NAMES",
    "CASE_X0", "PARAM_NAMES", "ParameterVector", "SIDHER_F", "STATE_NAMES", "StructuredModel",
    "CASE_ESTIMATE", "TRUE_THETA", "build_sidher", "estimate_lipschitz", "eval_dynamics",
    "eval_output", "lipschitz_ratio_check", "register_nonlinearity", "sidher_matrices",
]
