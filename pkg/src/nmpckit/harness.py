"""Closed-loop benchmark harness: scenarios, simulation, trials, export.

A scenario file (YAML) selects the model, horizon, reference schedule and
scheme; :func:`closed_loop_simulate` runs one closed loop against a plant
integrated with finer substeps, logging per-instant diagnostics. Chain
scenarios add randomized-initial-condition trials with stabilizing-time
statistics. Logs and summaries export to CSV with a JSON run manifest.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import integrator as intg
from .cmon import CMoNConfig
from .errors import ConfigError, NMPCError
from .models import (ChainParams, PendulumParams, chain_steady_state,
                     make_chain_model, make_pendulum_model, ModelSpec)
from .schemes import (ControllerState, OCProblem, SchemeConfig, cmon_sqp,
                      controller_step, initialize_controller)
from .transcription import Multipliers, References, Trajectory

__all__ = [
    "ReferenceSchedule", "ScenarioConfig", "SimulationLog", "TrialSummary",
    "closed_loop_simulate", "randomized_chain_trials", "stabilizing_time",
    "export_log_csv", "parse_log_csv", "export_summary_csv",
    "write_manifest", "load_scenario", "steady_horizon", "perfect_horizon",
]

_TIME_FUZZ = 1e-9


@dataclass
class ReferenceSchedule:
    """Piecewise-constant state and control setpoints over time."""

    times: np.ndarray       # (S,) ascending switch times, first one 0
    states: np.ndarray      # (S, n_x)
    controls: np.ndarray    # (S, n_u)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.times.ndim != 1 or self.times.size == 0:
            raise ConfigError("reference schedule needs at least one segment")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("reference switch times must be increasing")
        if abs(self.times[0]) > 1e-12:
            raise ConfigError("reference schedule must start at time zero")
        if self.states.shape[0] != self.times.size \
                or self.controls.shape[0] != self.times.size:
            raise ConfigError("reference schedule segment counts disagree")

    def segment_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t + _TIME_FUZZ, side="right") - 1
        return np.clip(idx, 0, self.times.size - 1)

    def window(self, t: float, N: int, dt: float) -> References:
        """Reference window with node ``k`` holding the setpoint at
        ``t + k*dt``; later segments enter from the horizon end."""
        tt = t + dt * np.arange(N + 1)
        idx = self.segment_index(tt)
        return References(self.states[idx], self.controls[idx[:N]])


@dataclass
class ScenarioConfig:
    """Everything one benchmark run needs, loadable from YAML."""

    model_kind: str
    horizon: int
    t_s: float
    duration: float
    schedule: ReferenceSchedule
    scheme: SchemeConfig
    model: ModelSpec
    substeps: int = 4
    plant_substep_factor: int = 4
    init_mode: str = "steady"           # steady | perfect
    x0: Optional[np.ndarray] = None     # plant start, default schedule state
    seed: int = 0
    trials: int = 1
    noise_pos: float = 0.0              # chain trial perturbation amplitudes
    noise_vel: float = 0.0
    stabilize_threshold: float = 0.1
    stabilize_cap: Optional[float] = None   # defaults to duration
    raw_text: str = ""                  # byte-exact config echo for manifests
    name: str = "scenario"

    def __post_init__(self):
        if self.duration < 0:
            raise ConfigError("duration must be nonnegative")
        if self.horizon < 2:
            raise ConfigError("horizon must be at least 2")
        if self.t_s <= 0:
            raise ConfigError("sampling interval must be positive")
        if self.substeps < 1 or self.plant_substep_factor < 1:
            raise ConfigError("substep counts must be positive")
        if self.init_mode not in ("steady", "perfect"):
            raise ConfigError(f"unknown init mode {self.init_mode!r}")
        if self.trials < 1:
            raise ConfigError("trial count must be positive")

    @property
    def n_instants(self) -> int:
        return int(round(self.duration / self.t_s))

    def integrator(self) -> intg.IntegratorConfig:
        return intg.IntegratorConfig(dt=self.t_s, substeps=self.substeps)

    def plant_integrator(self) -> intg.IntegratorConfig:
        return intg.IntegratorConfig(
            dt=self.t_s, substeps=self.substeps * self.plant_substep_factor)


# ---------------------------------------------------------------------------
# scenario loading

def _build_model(kind: str, spec: dict):
    if kind == "pendulum":
        pk = {k: float(v) for k, v in (spec.get("params") or {}).items()}
        kwargs = {}
        for key in ("position_limit", "force_limit"):
            if key in spec:
                kwargs[key] = float(spec[key])
        for key in ("stage_weights", "terminal_weights"):
            if key in spec:
                kwargs[key] = np.asarray(spec[key], dtype=float)
        return make_pendulum_model(PendulumParams(**pk), **kwargs)
    if kind == "chain":
        pk = dict(spec.get("params") or {})
        if "n" in pk:
            pk["n"] = int(pk["n"])
        for key in ("m", "D", "D1", "L"):
            if key in pk:
                pk[key] = float(pk[key])
        kwargs = {}
        if "control_limit" in spec:
            kwargs["control_limit"] = float(spec["control_limit"])
        for key in ("stage_weights", "terminal_weights"):
            if key in spec:
                kwargs[key] = np.asarray(spec[key], dtype=float)
        return make_chain_model(ChainParams(**pk), **kwargs)
    raise ConfigError(f"unknown model kind {kind!r}")


def _build_schedule(ref: dict, kind: str, model: ModelSpec
                    ) -> ReferenceSchedule:
    times = np.asarray(ref.get("times", [0.0]), dtype=float)
    if "states" in ref:
        states = np.asarray(ref["states"], dtype=float)
    elif "free_end" in ref and kind == "chain":
        params = model.meta["params"]
        states = np.stack([chain_steady_state(params, p)
                           for p in np.asarray(ref["free_end"], dtype=float)])
    else:
        raise ConfigError("reference block needs 'states' or 'free_end'")
    if states.shape != (times.size, model.n_x):
        raise ConfigError("reference states have the wrong shape")
    if "controls" in ref:
        controls = np.asarray(ref["controls"], dtype=float)
    else:
        controls = np.zeros((times.size, model.n_u))
    return ReferenceSchedule(times, states, controls)


def _build_scheme(spec: dict) -> SchemeConfig:
    spec = dict(spec or {})
    ckw = dict(spec.pop("cmon", None) or {})
    for key in list(ckw):
        if key not in ("threshold_mode",):
            ckw[key] = float(ckw[key])
    kwargs = {}
    if "kind" in spec:
        kwargs["scheme"] = str(spec.pop("kind"))
    if "qp_tol" in spec:
        kwargs["qp_tol"] = float(spec.pop("qp_tol"))
    if "ml_interval" in spec:
        kwargs["ml_interval"] = int(spec.pop("ml_interval"))
    if "track_dto" in spec:
        kwargs["track_dto"] = bool(spec.pop("track_dto"))
    if spec:
        raise ConfigError(f"unknown scheme keys {sorted(spec)}")
    try:
        return SchemeConfig(cmon=CMoNConfig(**ckw), **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad scheme config: {exc}") from None


_SCENARIO_KEYS = frozenset([
    "model", "horizon", "t_s", "duration", "reference", "scheme",
    "substeps", "plant_substep_factor", "init", "x0", "seed", "trials",
    "noise", "stabilize",
])


def scenario_from_dict(doc: dict, raw_text: str = "",
                       name: str = "scenario") -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a mapping")
    extra = set(doc) - _SCENARIO_KEYS
    if extra:
        raise ConfigError(f"unknown scenario keys {sorted(extra)}")
    try:
        mspec = dict(doc["model"])
        kind = str(mspec.pop("kind"))
        model = _build_model(kind, mspec)
        schedule = _build_schedule(dict(doc["reference"]), kind, model)
        noise = dict(doc.get("noise") or {})
        stab = dict(doc.get("stabilize") or {})
        x0 = doc.get("x0")
        return ScenarioConfig(
            model_kind=kind,
            horizon=int(doc["horizon"]),
            t_s=float(doc["t_s"]),
            duration=float(doc["duration"]),
            schedule=schedule,
            scheme=_build_scheme(doc.get("scheme")),
            model=model,
            substeps=int(doc.get("substeps", 4)),
            plant_substep_factor=int(doc.get("plant_substep_factor", 4)),
            init_mode=str(doc.get("init", "steady")),
            x0=None if x0 is None else np.asarray(x0, dtype=float),
            seed=int(doc.get("seed", 0)),
            trials=int(doc.get("trials", 1)),
            noise_pos=float(noise.get("position_amplitude", 0.0)),
            noise_vel=float(noise.get("velocity_amplitude", 0.0)),
            stabilize_threshold=float(stab.get("threshold", 0.1)),
            stabilize_cap=(float(stab["cap"]) if "cap" in stab else None),
            raw_text=raw_text,
            name=name,
        )
    except KeyError as exc:
        raise ConfigError(f"scenario is missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario value: {exc}") from None


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"scenario {path} is not valid YAML: {exc}") \
            from None
    return scenario_from_dict(doc, raw_text=raw, name=path.stem)


# ---------------------------------------------------------------------------
# initialization

def steady_horizon(scenario: ScenarioConfig) -> Trajectory:
    """Constant trajectory at the first reference segment."""
    N = scenario.horizon
    xs = np.repeat(scenario.schedule.states[:1], N + 1, axis=0)
    us = np.repeat(scenario.schedule.controls[:1], N, axis=0)
    return Trajectory(xs, us)


def perfect_horizon(scenario: ScenarioConfig, x0: np.ndarray):
    """Solve the first-instant horizon problem to optimality.

    Runs the zero-tolerance partial-update iteration (equivalent to exact
    Gauss-Newton SQP) from the steady guess.
    """
    model = scenario.model
    guess = steady_horizon(scenario)
    mult0 = Multipliers.zeros(scenario.horizon, model.n_x, model.n_r,
                              model.n_l)
    ocp = OCProblem(model=model, integ=scenario.integrator(),
                    x_hat=np.asarray(x0, dtype=float),
                    refs=scenario.schedule.window(0.0, scenario.horizon,
                                                  scenario.t_s))
    res = cmon_sqp(ocp, guess, mult0,
                   cmon=CMoNConfig(eps_abs=0.0, eps_rel=0.0),
                   tol=1e-8, max_iter=100)
    if not res.converged:
        raise NMPCError("perfect initialization failed to converge")
    return res.traj, res.mult


# ---------------------------------------------------------------------------
# simulation log

_DIAG_COLUMNS = [
    "kkt", "dy_norm", "refreshed", "refresh_fraction", "qp_iterations",
    "integration_calls", "sens_blocks", "adjoint_seeds",
    "kappa_max", "kappa_dual_max", "eta_pri", "eta_dual", "e_bar",
    "dto_e", "dto_ebar", "dto_active_match",
]


@dataclass
class SimulationLog:
    """Per-instant closed-loop record; ``states`` has one extra row."""

    t_s: float
    times: np.ndarray               # (I,)
    states: np.ndarray              # (I+1, n_x) plant states
    controls: np.ndarray            # (I, n_u) applied controls
    diag: dict                      # column name -> (I,) array
    ref_windows: np.ndarray         # (I, N+1, n_x) reference state windows
    failed: bool = False
    failure_reason: str = ""

    @property
    def n_instants(self) -> int:
        return self.times.size

    def control_inf_norms(self) -> np.ndarray:
        if self.controls.size == 0:
            return np.zeros(0)
        return np.abs(self.controls).max(axis=1)


def _collect_log(scenario, times, states, controls, diags, windows,
                 failed=False, reason="") -> SimulationLog:
    I = len(times)
    n_x = scenario.model.n_x
    n_u = scenario.model.n_u
    cols = {}
    for name in _DIAG_COLUMNS:
        cols[name] = np.full(I, np.nan)
    for i, d in enumerate(diags):
        cols["kkt"][i] = d.kkt_residual
        cols["dy_norm"][i] = d.dy_norm
        cols["refreshed"][i] = d.refreshed
        cols["refresh_fraction"][i] = d.refresh_fraction
        cols["qp_iterations"][i] = d.qp_iterations
        cols["integration_calls"][i] = scenario.horizon
        cols["sens_blocks"][i] = d.sens_blocks
        cols["adjoint_seeds"][i] = d.adjoint_seeds
        cols["kappa_max"][i] = d.kappa_max
        cols["kappa_dual_max"][i] = d.kappa_dual_max
        cols["eta_pri"][i] = d.eta_pri
        cols["eta_dual"][i] = d.eta_dual
        cols["e_bar"][i] = d.e_bar
        if d.dto is not None:
            cols["dto_e"][i] = d.dto.e
            cols["dto_ebar"][i] = d.dto.e_bar
            cols["dto_active_match"][i] = float(d.dto.active_match)
    states_arr = np.array(states) if states else np.zeros((1, n_x))
    controls_arr = np.array(controls) if controls else np.zeros((0, n_u))
    windows_arr = np.array(windows) if windows else \
        np.zeros((0, scenario.horizon + 1, n_x))
    return SimulationLog(
        t_s=scenario.t_s, times=np.asarray(times, dtype=float),
        states=states_arr, controls=controls_arr, diag=cols,
        ref_windows=windows_arr, failed=failed, failure_reason=reason)


def closed_loop_simulate(scenario: ScenarioConfig,
                         x0: Optional[np.ndarray] = None) -> SimulationLog:
    """Run one closed loop; controller failures truncate the log."""
    model = scenario.model
    N = scenario.horizon
    Ts = scenario.t_s
    integ = scenario.integrator()
    plant_integ = scenario.plant_integrator()
    schedule = scenario.schedule

    if x0 is None:
        x0 = scenario.x0 if scenario.x0 is not None \
            else schedule.states[0].copy()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,):
        raise ConfigError("initial state has the wrong dimension")

    if scenario.init_mode == "perfect":
        traj0, mult0 = perfect_horizon(scenario, x0)
    else:
        traj0 = steady_horizon(scenario)
        mult0 = Multipliers.zeros(N, model.n_x, model.n_r, model.n_l)
    state = initialize_controller(model, integ, scenario.scheme, traj0,
                                  mult0, refs0=schedule.window(0.0, N, Ts),
                                  x_hat0=x0)

    times, controls, diags, windows = [], [], [], []
    states = [x0.copy()]
    x = x0
    failed, reason = False, ""
    for i in range(scenario.n_instants):
        t = i * Ts
        refs = schedule.window(t, N, Ts)
        try:
            d = controller_step(state, x, refs)
            u0 = state.traj.us[0].copy()
            x = intg.integrate_batch(model, x[None], u0[None],
                                     plant_integ)[0]
        except NMPCError as exc:
            failed = True
            reason = f"{type(exc).__name__}: {exc}"
            break
        times.append(t)
        controls.append(u0)
        diags.append(d)
        windows.append(refs.xs.copy())
        states.append(x.copy())
    return _collect_log(scenario, times, states, controls, diags, windows,
                        failed=failed, reason=reason)


# ---------------------------------------------------------------------------
# stabilizing time and chain trials

def stabilizing_time(log: SimulationLog, threshold: float = 0.1,
                     cap: float = 50.0) -> float:
    """Earliest time from which the control stays below ``threshold``
    in infinity norm; ``cap`` when that never happens or the run failed."""
    if log.failed:
        return float(cap)
    norms = log.control_inf_norms()
    if norms.size == 0:
        return 0.0
    exceed = np.nonzero(norms >= threshold)[0]
    if exceed.size == 0:
        return 0.0
    last = exceed[-1]
    if last == norms.size - 1:
        return float(cap)
    return float(log.times[last] + log.t_s)


@dataclass
class TrialSummary:
    """Aggregate of randomized closed-loop trials for one scheme."""

    scenario_name: str
    scheme: str
    seed: int
    t_st: np.ndarray
    failed: np.ndarray
    cap: float
    logs: Optional[List[SimulationLog]] = None

    @property
    def n_failures(self) -> int:
        return int(self.failed.sum())

    @property
    def mean_t_st(self) -> float:
        return float(self.t_st.mean()) if self.t_st.size else math.nan

    @property
    def iqr_t_st(self) -> float:
        if not self.t_st.size:
            return math.nan
        hi, lo = np.percentile(self.t_st, [75, 25])
        return float(hi - lo)


def perturbed_chain_state(scenario: ScenarioConfig, trial: int) -> np.ndarray:
    """Deterministic per-trial initial state; independent of the scheme."""
    params = scenario.model.meta["params"]
    n = params.n
    rng = np.random.default_rng([int(scenario.seed), int(trial)])
    x = scenario.schedule.states[0].copy()
    x[:3 * n] += rng.uniform(-scenario.noise_pos, scenario.noise_pos, 3 * n)
    x[3 * n:] += rng.uniform(-scenario.noise_vel, scenario.noise_vel,
                             3 * (n - 1))
    return x


def randomized_chain_trials(scenario: ScenarioConfig,
                            trials: Optional[int] = None,
                            keep_logs: bool = False) -> TrialSummary:
    if scenario.model_kind != "chain":
        raise ConfigError("randomized trials are defined for chain scenarios")
    trials = scenario.trials if trials is None else int(trials)
    cap = scenario.stabilize_cap if scenario.stabilize_cap is not None \
        else scenario.duration
    t_st = np.empty(trials)
    failed = np.zeros(trials, dtype=bool)
    logs = [] if keep_logs else None
    for trial in range(trials):
        x0 = perturbed_chain_state(scenario, trial)
        log = closed_loop_simulate(scenario, x0=x0)
        t_st[trial] = stabilizing_time(log, scenario.stabilize_threshold, cap)
        failed[trial] = log.failed or t_st[trial] >= cap
        if keep_logs:
            logs.append(log)
    return TrialSummary(scenario_name=scenario.name,
                        scheme=scenario.scheme.scheme, seed=scenario.seed,
                        t_st=t_st, failed=failed, cap=float(cap), logs=logs)


# ---------------------------------------------------------------------------
# export

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def export_log_csv(log: SimulationLog, path) -> None:
    """One row per instant plus a final state-only row; repr floats so a
    parse reproduces the log exactly."""
    path = Path(path)
    n_x = log.states.shape[1]
    n_u = log.controls.shape[1] if log.controls.ndim == 2 else 0
    header = (["time"] + [f"x{j}" for j in range(n_x)]
              + [f"u{j}" for j in range(n_u)] + _DIAG_COLUMNS)
    lines = [",".join(header)]
    for i in range(log.n_instants):
        row = [_fmt(log.times[i])]
        row += [_fmt(v) for v in log.states[i]]
        row += [_fmt(v) for v in log.controls[i]]
        row += [_fmt(log.diag[c][i]) for c in _DIAG_COLUMNS]
        lines.append(",".join(row))
    # trailing state row: the state reached after the last instant
    final_t = (log.times[-1] + log.t_s) if log.n_instants else 0.0
    row = [_fmt(final_t)] + [_fmt(v) for v in log.states[-1]]
    row += [""] * (n_u + len(_DIAG_COLUMNS))
    lines.append(",".join(row))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise NMPCError(f"cannot write log to {path}: {exc}") from None


def parse_log_csv(path) -> SimulationLog:
    """Inverse of :func:`export_log_csv` (round-trip exact)."""
    path = Path(path)
    try:
        lines = path.read_text().strip().split("\n")
    except OSError as exc:
        raise NMPCError(f"cannot read log from {path}: {exc}") from None
    header = lines[0].split(",")
    n_x = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    n_u = sum(1 for h in header if h.startswith("u") and h[1:].isdigit())
    body = [ln.split(",") for ln in lines[1:]]
    inst = body[:-1]
    times = np.array([float(r[0]) for r in inst])
    states = np.array([[float(v) for v in r[1:1 + n_x]]
                       for r in body])
    controls = np.array([[float(v) for v in r[1 + n_x:1 + n_x + n_u]]
                         for r in inst]).reshape(len(inst), n_u)
    diag = {}
    for j, cname in enumerate(_DIAG_COLUMNS):
        col = 1 + n_x + n_u + j
        diag[cname] = np.array([float(r[col]) for r in inst])
    t_s = times[1] - times[0] if times.size > 1 else (
        float(body[-1][0]) - times[0] if times.size else 0.0)
    return SimulationLog(t_s=t_s, times=times, states=states,
                         controls=controls, diag=diag,
                         ref_windows=np.zeros((len(inst), 0, n_x)))


def export_summary_csv(summary: TrialSummary, path) -> None:
    path = Path(path)
    lines = ["trial,t_st,failed"]
    for i in range(summary.t_st.size):
        lines.append(f"{i},{_fmt(summary.t_st[i])},{int(summary.failed[i])}")
    lines.append("")
    lines.append("scheme,seed,cap,n_failures,mean_t_st,iqr_t_st")
    lines.append(",".join([summary.scheme, str(summary.seed),
                           _fmt(summary.cap), str(summary.n_failures),
                           _fmt(summary.mean_t_st), _fmt(summary.iqr_t_st)]))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise NMPCError(f"cannot write summary to {path}: {exc}") from None


def write_manifest(scenario: ScenarioConfig, path, extra: dict = None
                   ) -> None:
    """JSON run manifest: byte-exact config echo, code version, seed."""
    from . import __version__
    path = Path(path)
    raw = scenario.raw_text
    if not raw:
        raw = yaml.safe_dump(_scenario_doc(scenario), sort_keys=False)
    doc = {
        "scenario": scenario.name,
        "config_echo": raw,
        "code_version": __version__,
        "seed": scenario.seed,
        "scheme": scenario.scheme.scheme,
    }
    if extra:
        doc.update(extra)
    try:
        path.write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise NMPCError(f"cannot write manifest to {path}: {exc}") from None


def _scenario_doc(s: ScenarioConfig) -> dict:
    """Best-effort plain-dict echo for configs built in code."""
    mdl = {"kind": s.model_kind}
    params = s.model.meta.get("params")
    if params is not None:
        pd = dataclasses.asdict(params)
        mdl["params"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                         for k, v in pd.items()}
    sch = {"kind": s.scheme.scheme, "qp_tol": s.scheme.qp_tol,
           "ml_interval": s.scheme.ml_interval,
           "track_dto": s.scheme.track_dto,
           "cmon": dataclasses.asdict(s.scheme.cmon)}
    return {
        "model": mdl,
        "horizon": s.horizon,
        "t_s": s.t_s,
        "duration": s.duration,
        "substeps": s.substeps,
        "plant_substep_factor": s.plant_substep_factor,
        "init": s.init_mode,
        "seed": s.seed,
        "trials": s.trials,
        "reference": {"times": s.schedule.times.tolist(),
                      "states": s.schedule.states.tolist(),
                      "controls": s.schedule.controls.tolist()},
        "scheme": sch,
        "noise": {"position_amplitude": s.noise_pos,
                  "velocity_amplitude": s.noise_vel},
        "stabilize": {"threshold": s.stabilize_threshold,
                      "cap": s.stabilize_cap},
    }
