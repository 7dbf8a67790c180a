"""Command-line pipeline: generate, identify, estimate, design-observer, observe, control.

Every stage reads its inputs from files recorded in ``manifest.json`` (checked by
SHA-256) and writes its artifacts next to it, so stages can be rerun one at a time.

Exit codes: 0 success, 2 invalid config or artifact, 3 identify, 4 estimate,
5 observer synthesis, 6 observer run, 7 control.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from epictrl import __version__
from epictrl.control import BASELINE_POLICY, OcpOptions, OcpSpec, shoot, solve_ocp
from epictrl.estimation import (
    EstimationConfig,
    closed_form_rates,
    fit_parameters,
    guess_initial_state,
)
from epictrl.identifiability import local_rank_test
from epictrl.model import (
    CASE_X0,
    TRUE_THETA,
    PARAM_NAMES,
    Domain,
    ParameterVector,
    build_sidher,
    estimate_lipschitz,
)
from epictrl.observer import (
    ObserverGains,
    SdpInfeasible,
    assemble_sdp,
    run_observer,
    solve_observer_sdp,
    verify_gains,
)
from epictrl.sim import (
    DataSet,
    NoiseSpec,
    Trajectory,
    forecast_polyfit,
    generate_dataset,
    nominal_input,
    read_csv,
    write_csv,
)

log = logging.getLogger("epictrl")

STAGES = ("generate", "identify", "estimate", "design-observer", "observe", "control")
EXIT_CODES = {"generate": 2, "identify": 3, "estimate": 4, "design-observer": 5, "observe": 6, "control": 7}

DEFAULT_CONFIG = {
    "model": {"family": "sidher", "theta": TRUE_THETA.as_dict(), "x0": CASE_X0.tolist()},
    "data": {"t0": 0.0, "t1": 30.0, "sample_dt": 0.1, "input_noise_std": 1e-3,
             "output_noise_std": 1e-3, "path": None},
    "identify": {"sample_dt": 1.0, "tol": 1e-8, "fd_step": 1e-5},
    "estimation": {"protocol": "closed_form", "x0_policy": "joint", "multistart_count": 5,
                   "max_iterations": 200, "gradient_tolerance": 1e-10, "substeps": 2,
                   "bounds": {}, "theta_init": None},
    "observer": {"margin": 1e-6, "domain": "simplex", "C_hat_override": None, "verify_tol": 1e-7},
    "ocp": {"period_length": 14.0, "n_periods": 5, "Gamma": [0.01, 1.0, 0.0, 2.0, 10.0, 0.0],
            "Lambda": [0.01, 0.01, 0.01, 0.01],
            "input_bounds": [[0.0, 1.0], [0.0, 0.9], [0.1, 0.7], [0.0, 0.7]],
            "path_limits": {"I": 0.5, "H": 0.05, "E": 0.005}, "constraint_grid_dt": 0.5,
            "method": "SLSQP", "max_iterations": 300, "baseline": BASELINE_POLICY.tolist()},
    "forecast": {"degree": 2, "horizon": 14.0, "dt": 0.5},
    "output_dir": None,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("theta", "bounds",
                                                                                   "path_limits"):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class PipelineConfig:
    model: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["model"]))
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["data"]))
    identify: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["identify"]))
    estimation: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["estimation"]))
    observer: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["observer"]))
    ocp: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["ocp"]))
    forecast: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG["forecast"]))
    output_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls(**_merge(DEFAULT_CONFIG, doc))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULT_CONFIG}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self):
        d = self.data
        if not d["t1"] > d["t0"]:
            raise ConfigError(f"data span must have t1 > t0, got [{d['t0']}, {d['t1']}]")
        if not d["sample_dt"] > 0:
            raise ConfigError("data.sample_dt must be positive")
        if d["path"] is not None and not Path(d["path"]).is_file():
            raise ConfigError(f"data file {d['path']} does not exist")
        if d["path"] is None and self.model.get("theta") is None:
            raise ConfigError("synthetic mode needs model.theta")
        if self.model.get("theta") is not None:
            try:
                ParameterVector.from_dict(self.model["theta"])
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"model.theta: {exc}") from exc
        if self.model["family"] != "sidher":
            raise ConfigError(f"unsupported model family {self.model['family']!r}")
        if len(self.model["x0"]) != 6:
            raise ConfigError("model.x0 must have 6 entries")
        if self.observer["domain"] not in ("simplex", "box"):
            raise ConfigError("observer.domain must be 'simplex' or 'box'")
        if self.estimation["protocol"] not in ("closed_form", "free"):
            raise ConfigError("estimation.protocol must be 'closed_form' or 'free'")
        if int(self.estimation["multistart_count"]) < 1:
            raise ConfigError("estimation.multistart_count must be at least 1")


# ---------------------------------------------------------------------------
# manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Per-stage status, artifact hashes and timings, stored as ``manifest.json``."""

    def __init__(self, root: Path, doc: dict | None = None):
        self.root = Path(root)
        self.doc = doc or {"tool_version": __version__, "config": None, "stages": {}}

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        p = root / "manifest.json"
        if not p.is_file():
            return cls(root)
        with open(p) as fh:
            return cls(root, json.load(fh))

    def save(self):
        text = json.dumps(self.doc, indent=2, sort_keys=True)
        with open(self.path, "w", newline="\n") as fh:
            fh.write(text + "\n")

    def stage(self, name: str) -> dict | None:
        return self.doc["stages"].get(name)

    def record(self, name: str, status: str, inputs: list[str], outputs: list[str], seconds: float,
               message: str = "", extra: dict | None = None):
        self.doc["stages"][name] = {
            "status": status,
            "inputs": {p: sha256_file(self.root / p) for p in inputs},
            "outputs": {p: sha256_file(self.root / p) for p in outputs if (self.root / p).exists()},
            "seconds": round(seconds, 3),
            "message": message,
            **(extra or {}),
        }
        self.save()

    def artifact(self, stage: str, name: str) -> Path:
        """Path of an artifact produced by ``stage``, after checking its hash."""
        entry = self.stage(stage)
        if entry is None or entry["status"] != "ok":
            raise StageError(stage, f"stage {stage!r} has not completed; run it first")
        if name not in entry["outputs"]:
            raise StageError(stage, f"stage {stage!r} did not record artifact {name!r}")
        path = self.root / name
        if not path.is_file() or sha256_file(path) != entry["outputs"][name]:
            raise IntegrityError(f"artifact {name} does not match the hash recorded in the manifest")
        return path

    def missing(self) -> list[str]:
        return [s for s in STAGES if (self.stage(s) or {}).get("status") != "ok"]


class IntegrityError(RuntimeError):
    pass


def _write_json(path: Path, doc) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# stages

def _theta_true(cfg: PipelineConfig) -> ParameterVector | None:
    return None if cfg.model.get("theta") is None else ParameterVector.from_dict(cfg.model["theta"])


def _load_data(man: Manifest) -> DataSet:
    return DataSet.from_csv(man.artifact("generate", "data.csv"))


def _load_truth(man: Manifest) -> Trajectory | None:
    entry = man.stage("generate") or {}
    if "truth.csv" not in entry.get("outputs", {}):
        return None
    names, table = read_csv(man.artifact("generate", "truth.csv"))
    return Trajectory(table[:, 0], table[:, 1:7], table[:, 7:17])


def stage_generate(cfg: PipelineConfig, man: Manifest) -> list[str]:
    d = cfg.data
    if d["path"] is not None:
        data = DataSet.from_csv(d["path"])
        data.to_csv(man.root / "data.csv")
        return ["data.csv"]
    theta = _theta_true(cfg)
    noise = NoiseSpec(d["input_noise_std"], d["output_noise_std"], cfg.seed)
    data = generate_dataset(build_sidher(theta), cfg.model["x0"], nominal_input, (d["t0"], d["t1"]),
                            d["sample_dt"], noise)
    data.to_csv(man.root / "data.csv")
    data.truth.trajectory.to_csv(man.root / "truth.csv")
    return ["data.csv", "truth.csv"]


def stage_identify(cfg: PipelineConfig, man: Manifest) -> list[str]:
    theta = _theta_true(cfg)
    if theta is None:
        _write_json(man.root / "identify.json", {"verdict": "skipped", "reason": "no parameter values"})
        return ["identify.json"]
    d, c = cfg.data, cfg.identify
    times = np.arange(d["t0"], d["t1"] + 1e-9, c["sample_dt"])
    rep = local_rank_test(build_sidher(theta), cfg.model["x0"], theta, nominal_input, times,
                          fd_step=c["fd_step"], tol=c["tol"])
    rep.to_json(man.root / "identify.json")
    rep.zero_pattern_csv(man.root / "zero_pattern.csv")
    if not rep.identifiable:
        raise StageError("identify", f"rank {rep.numerical_rank} < {rep.jacobian_cols}: not identifiable")
    return ["identify.json", "zero_pattern.csv"]


def stage_estimate(cfg: PipelineConfig, man: Manifest) -> list[str]:
    data = _load_data(man)
    e = cfg.estimation
    kw = dict(x0_policy=e["x0_policy"], multistart_count=int(e["multistart_count"]),
              max_iterations=int(e["max_iterations"]), gradient_tolerance=float(e["gradient_tolerance"]),
              substeps=int(e["substeps"]), seed=cfg.seed)
    bounds = {k: tuple(v) for k, v in e["bounds"].items()}
    if e["theta_init"] is not None:
        kw["theta_init"] = ParameterVector.from_dict(e["theta_init"])
    fixed = {}
    if e["protocol"] == "closed_form":
        rates = closed_form_rates(data)._asdict()
        full = EstimationConfig(bounds=bounds).bounds
        fixed = {k: float(np.clip(v, *full[k])) for k, v in rates.items()}
    config = EstimationConfig(fixed_params=fixed, bounds=bounds, **kw)
    res = fit_parameters("sidher", data, config)
    doc = res.to_dict()
    doc["config"] = config.to_dict()
    _write_json(man.root / "estimate.json", doc)
    res.table_csv(man.root / "theta_table.csv", truth=_theta_true(cfg))
    return ["estimate.json", "theta_table.csv"]


def _estimated_model(man: Manifest):
    doc = _read_json(man.artifact("estimate", "estimate.json"))
    return build_sidher(ParameterVector.from_dict(doc["theta_hat"]))


def stage_design_observer(cfg: PipelineConfig, man: Manifest) -> list[str]:
    model_hat = _estimated_model(man)
    o = cfg.observer
    if o["C_hat_override"] is not None:
        C = np.zeros_like(model_hat.C) if o["C_hat_override"] == "zero" else np.array(o["C_hat_override"], float)
        model_hat = model_hat.with_matrices(C=C)
    ell = estimate_lipschitz(model_hat, Domain.sidher(simplex=o["domain"] == "simplex"))
    problem = assemble_sdp(model_hat, ell, o["margin"])
    gains = solve_observer_sdp(problem)
    if isinstance(gains, SdpInfeasible):
        _write_json(man.root / "gains.json", {"status": gains.status, "message": gains.message})
        raise StageError("design-observer", f"observer SDP not solved: {gains.status}")
    rep = verify_gains(gains, problem, o["verify_tol"])
    gains.to_json(man.root / "gains.json")
    _write_json(man.root / "gains_check.json", rep.to_dict())
    if not rep.passed:
        raise StageError("design-observer", f"gain verification failed: {rep.violations}")
    return ["gains.json", "gains_check.json"]


def stage_observe(cfg: PipelineConfig, man: Manifest) -> list[str]:
    data = _load_data(man)
    truth = _load_truth(man)
    model_hat = _estimated_model(man)
    gains = ObserverGains.from_json(man.artifact("design-observer", "gains.json"))
    if cfg.observer["C_hat_override"] is not None:
        raise StageError("observe", "cannot run an observer designed for an overridden output matrix")
    xhat0 = guess_initial_state(data, cfg.seed)
    run = run_observer(gains, model_hat, data, xhat0)
    if truth is not None and len(truth.times) >= len(run.times):
        run.error = truth.states[: len(run.times)] - run.x_hat
    run.to_csv(man.root / "state_estimate.csv")
    names = ["t", *(f"ybar{i}" for i in range(1, 11)), *(f"yhat{i}" for i in range(1, 11))]
    write_csv(man.root / "output_tracking.csv", names,
              np.hstack([run.times[:, None], data.y_bar[: len(run.times)], run.y_hat]))
    if run.failed_at is not None:
        raise StageError("observe", f"observer integration failed at t={run.failed_at}")
    return ["state_estimate.csv", "output_tracking.csv"]


def _ocp_spec(cfg: PipelineConfig, model_hat, x_init, t_start) -> OcpSpec:
    o = cfg.ocp
    return OcpSpec(model_hat=model_hat, x_init=x_init, t_start=t_start, period_length=o["period_length"],
                   n_periods=int(o["n_periods"]), Gamma=np.diag(o["Gamma"]), Lambda=np.diag(o["Lambda"]),
                   input_bounds=np.array(o["input_bounds"], float), path_limits=dict(o["path_limits"]),
                   constraint_grid_dt=o["constraint_grid_dt"])


def stage_control(cfg: PipelineConfig, man: Manifest) -> list[str]:
    model_hat = _estimated_model(man)
    names, table = read_csv(man.artifact("observe", "state_estimate.csv"))
    t1 = float(table[-1, 0])
    x_init = table[-1, 7:13]
    spec = _ocp_spec(cfg, model_hat, x_init, t1)
    sol = solve_ocp(spec, OcpOptions(method=cfg.ocp["method"], max_iterations=int(cfg.ocp["max_iterations"])))
    base = shoot(spec, np.tile(np.clip(cfg.ocp["baseline"], spec.input_bounds[:, 0], spec.input_bounds[:, 1]),
                               spec.n_periods))
    doc = sol.to_dict()
    doc["baseline"] = {"policy": list(cfg.ocp["baseline"]), "cost": base.cost,
                       "feasible": bool(base.constraints.size == 0 or base.constraints.max() <= 1e-6),
                       "max_violation": float(base.constraints.max()) if base.constraints.size else 0.0}
    doc["x_init"] = x_init.tolist()
    _write_json(man.root / "ocp.json", doc)
    sol.policy.to_csv(man.root / "policy.csv")
    sol.predicted.to_csv(man.root / "predicted.csv")
    # polynomial forecast of the extinct fraction from the recorded y9
    data = _load_data(man)
    f = cfg.forecast
    horizon = np.arange(t1, t1 + f["horizon"] + 1e-9, f["dt"])
    th, eh = forecast_polyfit(data.times, data.y_bar[:, 8], int(f["degree"]), horizon)
    write_csv(man.root / "e_forecast.csv", ["t", "E_forecast"], np.column_stack([th, eh]))
    if not sol.status.startswith("success"):
        raise StageError("control", f"optimal control status: {sol.status}")
    return ["ocp.json", "policy.csv", "predicted.csv", "e_forecast.csv"]


STAGE_FUNCS = {
    "generate": stage_generate,
    "identify": stage_identify,
    "estimate": stage_estimate,
    "design-observer": stage_design_observer,
    "observe": stage_observe,
    "control": stage_control,
}
STAGE_INPUTS = {
    "generate": [],
    "identify": [],
    "estimate": ["data.csv"],
    "design-observer": ["estimate.json"],
    "observe": ["data.csv", "estimate.json", "gains.json"],
    "control": ["estimate.json", "state_estimate.csv", "data.csv"],
}


def run_stage(name: str, cfg: PipelineConfig, man: Manifest) -> int:
    man.doc["config"] = cfg.to_dict()
    t = time.perf_counter()
    log.info("stage %s", name)
    try:
        outputs = STAGE_FUNCS[name](cfg, man)
    except IntegrityError as exc:
        log.error("%s", exc)
        man.record(name, "failed", [], [], time.perf_counter() - t, str(exc))
        return 2
    except StageError as exc:
        log.error("%s: %s", name, exc)
        code = EXIT_CODES[exc.stage] if exc.stage == name else 2
        man.record(name, "failed", [], [], time.perf_counter() - t, str(exc))
        return code
    except Exception as exc:  # any other failure inside the stage maps to its exit code
        log.error("%s failed: %s", name, exc)
        man.record(name, "failed", [], [], time.perf_counter() - t, f"{type(exc).__name__}: {exc}")
        return EXIT_CODES[name]
    inputs = [p for p in STAGE_INPUTS[name] if (man.root / p).exists()]
    man.record(name, "ok", inputs, outputs, time.perf_counter() - t)
    return 0


def run_pipeline(cfg: PipelineConfig, root: Path) -> int:
    man = Manifest(root)
    for name in STAGES:
        code = run_stage(name, cfg, man)
        if code:
            return code
    return 0


# ---------------------------------------------------------------------------
# report

def build_report(root: Path) -> tuple[str, str]:
    """Summary text and a comparison CSV for a completed run."""
    man = Manifest.load(root)
    missing = man.missing()
    if missing:
        raise ConfigError(f"incomplete run; missing stages: {', '.join(missing)}")
    for stage, entry in man.doc["stages"].items():
        for name in entry["outputs"]:
            man.artifact(stage, name)
    cfg = man.doc.get("config") or {}
    truth = (cfg.get("model") or {}).get("theta") if (cfg.get("data") or {}).get("path") is None else None
    est = _read_json(root / "estimate.json")
    theta_hat = ParameterVector.from_dict(est["theta_hat"])
    lines, rows = [], []
    if truth is not None:
        tv = ParameterVector.from_dict(truth)
        lines.append(f"{'parameter':<10}{'true':>12}{'estimated':>12}")
        for n in PARAM_NAMES:
            lines.append(f"{n:<10}{tv[n]:>12.4f}{theta_hat[n]:>12.4f}")
            rows.append(f"{n},{tv[n]:.17g},{theta_hat[n]:.17g}")
        header = "parameter,true,estimated"
    else:
        lines.append(f"{'parameter':<10}{'estimated':>12}")
        for n in PARAM_NAMES:
            lines.append(f"{n:<10}{theta_hat[n]:>12.4f}")
            rows.append(f"{n},{theta_hat[n]:.17g}")
        header = "parameter,estimated"
    names, table = read_csv(root / "state_estimate.csv")
    if "e1" in names:
        i = names.index("e1")
        lines.append(f"terminal estimation error: {np.linalg.norm(table[-1, i:i + 6]):.3e}")
    ocp = _read_json(root / "ocp.json")
    base = ocp["baseline"]
    lines.append(f"optimal policy cost: {ocp['cost']:.6g} (status {ocp['status']})")
    lines.append(f"baseline policy cost: {base['cost']:.6g} ({'feasible' if base['feasible'] else 'infeasible'})")
    for k, v in ocp["constraint_report"].items():
        lines.append(f"margin {k}: {v['margin']:+.3e}")
    return "\n".join(lines) + "\n", header + "\n" + "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# entry point

def _output_dir(args, cfg: PipelineConfig) -> Path:
    out = args.output or cfg.output_dir or os.environ.get("EPICTRL_OUTPUT_DIR") or "epictrl_out"
    return Path(out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epictrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"epictrl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (defaults reproduce the case study)")
        sp.add_argument("--output", help="output directory (else config, else $EPICTRL_OUTPUT_DIR)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        root = _output_dir(args, cfg)
        if args.command == "report":
            text, table = build_report(root)
            (root / "report.csv").write_text(table)
            sys.stdout.write(text)
            return 0
        try:
            root.mkdir(parents=True, exist_ok=True)
            probe = root / ".write_test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {root} is not writable: {exc}") from exc
        if args.command == "pipeline":
            return run_pipeline(cfg, root)
        return run_stage(args.command, cfg, Manifest.load(root))
    except (ConfigError, IntegrityError, StageError) as exc:
        print(f"epictrl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
