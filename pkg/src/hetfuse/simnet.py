"""Scenario definition, simulation and the per-step network loop.

Each step runs, in order: local prediction, channel prediction, window
marginalization (conservative or plain), measurement updates, message
construction from the pre-fusion states, fusion in ascending sender id and
channel updates. A centralized filter over the full state vector consumes
every agent's measurements and serves as the reference.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .cf2 import FusionMethod, exchange, init_agents, predict_common
from .consfilter import SparsityPattern, conservative_marginalize
from .errors import ConfigError, HetfuseError, NumericalError
from .ginfo import InfoGaussian, marginalize, to_moments
from .ias import (HarmonicControl, LinearDynamics, MeasModel, double_integrator, ias_predict,
                  ias_update, stale_copies, window_marginalize)
from .metrics import RunMetrics, message_bytes
from .varset import TreeTopology, VariableSet, bias, target, validate_topology

WINDOWS = ("full", "cons1", "plain1")
KINDS = {"static-2d": 2, "dynamic-4d": 4}
PRESET_NAMES = ("static-5x6", "static-2x1", "dynamic-2x1", "dynamic-4x5")


def _cov(value, name) -> np.ndarray:
    a = np.asarray(value, float)
    if a.ndim == 1:
        a = np.diag(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"{name} must be a square matrix or a diagonal list")
    if not np.allclose(a, a.T) or np.linalg.eigvalsh(0.5 * (a + a.T))[0] <= 0:
        raise ConfigError(f"{name} is not positive definite")
    return a


@dataclass
class AgentSpec:
    id: int
    targets: tuple
    R1: np.ndarray
    R2: np.ndarray


@dataclass
class ScenarioConfig:
    name: str
    kind: str
    n_targets: int
    agents: dict
    edges: list
    steps: int = 50
    method: str = "bdf"
    window: str = "full"
    seed: int = 0
    dt: float = 1.0
    q: float = 0.08
    accel: tuple = (1.0, 1.0)
    freq: tuple = (0.1, 0.1)
    target_var: tuple = (100.0, 100.0)
    bias_var: tuple = (5.0, 5.0)
    spacing: float = 50.0
    joint: dict = field(default_factory=dict)

    # -- construction --------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, check: bool = True) -> "ScenarioConfig":
        """Parse a scenario document; ``check=False`` skips :meth:`validate`."""
        try:
            kind = d["targets"]["kind"]
            if kind not in KINDS:
                raise ConfigError(f"unknown target kind {kind!r}; expected one of {sorted(KINDS)}")
            agents = {}
            for a in d["agents"]:
                aid = int(a["id"])
                if aid in agents:
                    raise ConfigError(f"agent {aid} defined twice")
                agents[aid] = AgentSpec(aid, tuple(int(t) for t in a["targets"]),
                                        _cov(a["R1"], f"agent {aid} R1"),
                                        _cov(a["R2"], f"agent {aid} R2"))
            dyn = d.get("dynamics", {})
            pri = d.get("priors", {})
            sim = d.get("sim", {})
            cfg = cls(
                name=d.get("name", "custom"), kind=kind, n_targets=int(d["targets"]["count"]),
                agents=agents, edges=[tuple(int(x) for x in e) for e in d["topology"]["edges"]],
                steps=int(sim.get("steps", 50)), method=str(sim.get("method", "bdf")),
                window=str(sim.get("window", "full")), seed=int(sim.get("seed", 0)),
                dt=float(dyn.get("dt", 1.0)), q=float(dyn.get("q", 0.08)),
                accel=tuple(dyn.get("accel", (1.0, 1.0))), freq=tuple(dyn.get("freq", (0.1, 0.1))),
                target_var=tuple(pri.get("target_var", (100.0,) * KINDS[kind])),
                bias_var=tuple(pri.get("bias_var", (5.0, 5.0))),
                spacing=float(pri.get("spacing", 50.0)),
                joint={tuple(int(x) for x in k.split("-")): int(v)
                       for k, v in d.get("topology", {}).get("joint", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed scenario document: missing or invalid {exc}") from exc
        if check:
            cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "topology": {"edges": [list(e) for e in self.edges],
                         **({"joint": {f"{a}-{b}": v for (a, b), v in self.joint.items()}}
                            if self.joint else {})},
            "targets": {"kind": self.kind, "count": self.n_targets},
            "agents": [{"id": a.id, "targets": list(a.targets), "R1": a.R1.tolist(),
                        "R2": a.R2.tolist()} for a in self.agents.values()],
            "dynamics": {"dt": self.dt, "q": self.q, "accel": list(self.accel),
                         "freq": list(self.freq)},
            "priors": {"target_var": list(self.target_var), "bias_var": list(self.bias_var),
                       "spacing": self.spacing},
            "sim": {"steps": self.steps, "method": self.method, "window": self.window,
                    "seed": self.seed},
        }

    def validate(self):
        if self.steps < 1:
            raise ConfigError("sim.steps must be >= 1")
        if self.window not in WINDOWS:
            raise ConfigError(f"unknown window policy {self.window!r}; expected one of {WINDOWS}")
        try:
            FusionMethod.parse(self.method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.target_var) != self.target_dim or len(self.bias_var) != 2:
            raise ConfigError("prior variances do not match state dimensions")
        if min(self.target_var) <= 0 or min(self.bias_var) <= 0:
            raise ConfigError("prior variances must be positive")
        for a in self.agents.values():
            bad = [t for t in a.targets if not 1 <= t <= self.n_targets]
            if bad:
                raise ConfigError(f"agent {a.id} tracks unknown targets {bad}")
            if a.R1.shape != (2, 2) or a.R2.shape != (2, 2):
                raise ConfigError(f"agent {a.id} noise covariances must be 2x2")
        problems = validate_topology(self.topology)
        if problems:
            raise ConfigError("; ".join(p.message for p in problems))

    # -- derived -------------------------------------------------------
    @property
    def target_dim(self) -> int:
        return KINDS[self.kind]

    @property
    def dynamic(self) -> bool:
        return self.kind != "static-2d"

    @property
    def topology(self) -> TreeTopology:
        d = self.target_dim
        tasks = {a.id: VariableSet([*(target(t, d) for t in a.targets), bias(a.id)])
                 for a in self.agents.values()}
        return TreeTopology(tasks, self.edges)

    def dynamics(self) -> LinearDynamics | None:
        if not self.dynamic:
            return None
        ctl = HarmonicControl(self.accel[0], self.accel[1], self.freq[0], self.freq[1], self.dt)
        return double_integrator(self.dt, self.q, ctl)

    def with_(self, **kw) -> "ScenarioConfig":
        d = dict(self.__dict__)
        d.update(kw)
        out = ScenarioConfig(**d)
        out.validate()
        return out


def load_config(path) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {path} is not valid JSON: {exc}") from exc
    return ScenarioConfig.from_dict(doc)


def preset(name: str) -> ScenarioConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown scenario {name!r}; presets: {', '.join(PRESET_NAMES)}")
    text = resources.files("hetfuse").joinpath("presets").joinpath(f"{name}.json").read_text()
    return ScenarioConfig.from_dict(json.loads(text))


# -- ground truth and measurements -------------------------------------

@dataclass
class GroundTruth:
    targets: np.ndarray  # (steps + 1, n_targets, dim)
    biases: dict
    prior_mean: np.ndarray  # (n_targets, dim)

    def target_state(self, t: int, k: int) -> np.ndarray:
        return self.targets[k, t - 1]


@dataclass
class AgentMeasurements:
    targets: dict  # target id -> 2-vector
    landmark: np.ndarray


def prior_mean(config: ScenarioConfig) -> np.ndarray:
    d = config.target_dim
    out = np.zeros((config.n_targets, d))
    for t in range(config.n_targets):
        pos = config.spacing * np.array([t + 1.0, 0.5 * (t + 1.0)])
        if d == 2:
            out[t] = pos
        else:
            out[t] = [pos[0], 0.0, pos[1], 0.0]
    return out


def simulate_truth(config: ScenarioConfig, rng: np.random.Generator) -> GroundTruth:
    """Initial targets and biases drawn from the prior; dynamic targets then propagated."""
    d = config.target_dim
    mean = prior_mean(config)
    sd_t = np.sqrt(np.asarray(config.target_var))
    sd_b = np.sqrt(np.asarray(config.bias_var))
    x0 = mean + sd_t * rng.standard_normal((config.n_targets, d))
    biases = {a: sd_b * rng.standard_normal(2) for a in sorted(config.agents)}
    xs = np.empty((config.steps + 1, config.n_targets, d))
    xs[0] = x0
    dyn = config.dynamics()
    if dyn is None:
        xs[1:] = x0
    else:
        lq = np.linalg.cholesky(dyn.Q)
        for k in range(1, config.steps + 1):
            u = dyn.u(k)
            w = rng.standard_normal((config.n_targets, d)) @ lq.T
            xs[k] = xs[k - 1] @ dyn.F.T + dyn.G @ u + w
    return GroundTruth(xs, biases, mean)


def _pos(config, x):
    return x if config.target_dim == 2 else x[[0, 2]]


def generate_measurements(truth: GroundTruth, config: ScenarioConfig, step: int,
                          rng: np.random.Generator) -> dict[int, AgentMeasurements]:
    """Target-plus-bias and landmark (bias-only) measurements for every agent."""
    out = {}
    for aid in sorted(config.agents):
        a = config.agents[aid]
        l1, l2 = np.linalg.cholesky(a.R1), np.linalg.cholesky(a.R2)
        s = truth.biases[aid]
        ys = {}
        for t in sorted(a.targets):
            ys[t] = _pos(config, truth.target_state(t, step)) + s + l1 @ rng.standard_normal(2)
        out[aid] = AgentMeasurements(ys, s + l2 @ rng.standard_normal(2))
    return out


@dataclass
class RunData:
    truth: GroundTruth
    measurements: list  # index k-1 holds step k


def simulate_run(config: ScenarioConfig, rng: np.random.Generator) -> RunData:
    truth = simulate_truth(config, rng)
    meas = [generate_measurements(truth, config, k, rng) for k in range(1, config.steps + 1)]
    return RunData(truth, meas)


# -- models and priors --------------------------------------------------

def measurement_models(config: ScenarioConfig) -> dict[int, dict]:
    """Per agent: ``{target id: MeasModel, "landmark": MeasModel}``."""
    d = config.target_dim
    sel = np.eye(2) if d == 2 else np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
    out = {}
    for aid, a in config.agents.items():
        m = {t: MeasModel([target(t, d), bias(aid)], np.hstack([sel, np.eye(2)]), a.R1, aid)
             for t in a.targets}
        m["landmark"] = MeasModel([bias(aid)], np.eye(2), a.R2, aid)
        out[aid] = m
    return out


def shared_prior(config: ScenarioConfig) -> InfoGaussian:
    """Prior over the full state vector (time tag 0 for dynamic targets)."""
    d = config.target_dim
    tag = 0 if config.dynamic else None
    full = config.topology.full_set()
    mean = prior_mean(config)
    vs, mu, var = [], [], []
    for v in full:
        if v.kind == "target":
            vs.append(target(v.entity, d, tag))
            mu.extend(mean[v.entity - 1])
            var.extend(config.target_var)
        else:
            vs.append(v)
            mu.extend([0.0, 0.0])
            var.extend(config.bias_var)
    var = np.asarray(var)
    return InfoGaussian(vs, np.asarray(mu) / var, np.diag(1.0 / var))


def apply_measurements(g: InfoGaussian, models: dict, meas: AgentMeasurements, k) -> InfoGaussian:
    for t in sorted(meas.targets):
        g = ias_update(g, models[t], meas.targets[t], k)
    return ias_update(g, models["landmark"], meas.landmark, k)


def _window(g: InfoGaussian, policy: str, conservative: bool = True):
    if policy == "full":
        return g, 1.0
    drop = stale_copies(g, 1)
    if not len(drop):
        return g, 1.0
    if policy == "cons1" and conservative:
        return conservative_marginalize(g, drop, SparsityPattern.distinct_biases(g.vars))
    return window_marginalize(g, drop), 1.0


# -- network -------------------------------------------------------------

@dataclass
class Network:
    config: ScenarioConfig
    method: FusionMethod
    window: str
    agents: dict
    models: dict
    dyn: LinearDynamics | None
    step: int = 0
    bytes_sent: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)


def build_network(config: ScenarioConfig, method=None, window=None,
                  prior: InfoGaussian | None = None) -> Network:
    method = FusionMethod.parse(method or config.method)
    window = window or config.window
    prior = shared_prior(config) if prior is None else prior
    agents = init_agents(config.topology, method, prior, config.joint or None)
    return Network(config, method, window, agents, measurement_models(config), config.dynamics())


def run_step(net: Network, meas: dict[int, AgentMeasurements], step: int | None = None,
             fuse: bool = True) -> Network:
    """Advance ``net`` one step with the given per-agent measurements."""
    k = net.step + 1 if step is None else step
    tag = k if net.dyn is not None else None
    try:
        if net.dyn is not None:
            u = net.dyn.u(k)
            for st in net.agents.values():
                st.local = ias_predict(st.local, net.dyn, u, k)
                st.channels = {b: predict_common(ch, net.dyn, u, k, net.window)
                               for b, ch in st.channels.items()}
            for a, st in net.agents.items():
                st.local, net.scales[a] = _window(st.local, net.window)
        for a, st in net.agents.items():
            if a in meas:
                st.local = apply_measurements(st.local, net.models[a], meas[a], tag)
        if fuse:
            net.messages = exchange(net.agents, k)
            net.bytes_sent = {a: 0 for a in net.agents}
            for (a, _), m in net.messages.items():
                net.bytes_sent[a] += message_bytes(m.payload.dim)
    except HetfuseError as exc:
        raise type(exc)(f"step {k} ({net.method.value}): {exc}") from exc
    net.step = k
    return net


def fusion_round(net: Network) -> Network:
    """An extra exchange with no new measurements or prediction."""
    net.messages = exchange(net.agents, net.step)
    return net


class CentralFilter:
    """Single filter over the full state vector fed with every measurement.

    Past target copies are always removed by plain marginalization, so
    windowed policies give the exact Kalman filter.
    """

    def __init__(self, config: ScenarioConfig, window: str = "full", prior=None):
        self.config = config
        self.window = window
        self.g = shared_prior(config) if prior is None else prior
        self.models = measurement_models(config)
        self.dyn = config.dynamics()
        self.step = 0

    def run_step(self, meas: dict[int, AgentMeasurements]) -> InfoGaussian:
        k = self.step + 1
        tag = None
        if self.dyn is not None:
            tag = k
            self.g = ias_predict(self.g, self.dyn, self.dyn.u(k), k)
            if self.window != "full":
                self.g = window_marginalize(self.g, window=1)
        for a in sorted(meas):
            self.g = apply_measurements(self.g, self.models[a], meas[a], tag)
        self.step = k
        return self.g


def centralized_oracle(config: ScenarioConfig, measurements: list, window: str | None = None):
    """Per-step centralized posteriors for the measurement sequence."""
    cf = CentralFilter(config, window or config.window)
    return [cf.run_step(m) for m in measurements]


def delayed_batch(config: ScenarioConfig, measurements: list, step: int, observer: int,
                  prior: InfoGaussian | None = None) -> InfoGaussian:
    """Static posterior holding exactly the data that has reached ``observer`` by ``step``.

    With full-rate exchange and send-before-fuse, a measurement taken at
    step ``s`` by an agent ``d`` hops away arrives at step ``s + max(d - 1, 0)``.
    """
    if config.dynamic:
        raise ConfigError("delayed batch reference is defined for static scenarios only")
    g = shared_prior(config) if prior is None else prior
    models = measurement_models(config)
    dist = config.topology.distances(observer)
    for a in sorted(config.agents):
        last = step - max(dist[a] - 1, 0)
        for s in range(1, last + 1):
            g = apply_measurements(g, models[a], measurements[s - 1][a], None)
    return g


# -- Monte Carlo ------------------------------------------------------------

def _current(g: InfoGaussian) -> InfoGaussian:
    stale = stale_copies(g, 1)
    return marginalize(g, g.vars - stale) if len(stale) else g


def _truth_vector(vs: VariableSet, truth: GroundTruth, k: int) -> np.ndarray:
    parts = []
    for v in vs:
        parts.append(truth.target_state(v.entity, k) if v.kind == "target" else truth.biases[v.entity])
    return np.concatenate(parts)


def _record(vs_est, truth, k):
    """(nees, squared error, moments) of one estimate against the truth."""
    mom = to_moments(vs_est)
    err = mom.mu - _truth_vector(vs_est.vars, truth, k)
    val = float(err @ vs_est.lam @ err)
    return val, mom, err


def _run_method(config, data, method, window, cents) -> tuple[np.ndarray, ...]:
    net = build_network(config, method, window)
    agents = sorted(net.agents)
    steps = config.steps
    shape = (steps, len(agents))
    nees_a, sq_a, eig_a = np.empty(shape), np.empty(shape), np.empty(shape)
    bytes_a = np.zeros(shape, dtype=np.int64)
    for k in range(1, steps + 1):
        run_step(net, data.measurements[k - 1], k)
        cent_cur = cents[k - 1]
        for c, a in enumerate(agents):
            st = net.agents[a]
            est = _current(st.local)
            val, mom, err = _record(est, data.truth, k)
            keep = est.vars.select(st.tasks)
            idx = InfoGaussian.zeros(est.vars).index(keep)
            nees_a[k - 1, c] = val
            sq_a[k - 1, c] = float(err[idx] @ err[idx])
            ref = cent_cur.sub(est.vars)
            d = mom.sigma - ref.sigma
            eig_a[k - 1, c] = float(np.linalg.eigvalsh(0.5 * (d + d.T))[0])
            bytes_a[k - 1, c] = net.bytes_sent.get(a, 0)
    dof = [len(_current(net.agents[a].local).zeta) for a in agents]
    smooth = _smoothed_sq_err(net, data.truth) if window == "full" and config.dynamic else None
    return agents, nees_a, sq_a, eig_a, bytes_a, dof, smooth


def _smoothed_sq_err(net: Network, truth: GroundTruth) -> np.ndarray:
    """Squared error of every past step's copy under each agent's final full-history estimate.

    Only the agent's own targets and bias are scored, as for the filtered errors.
    """
    agents = sorted(net.agents)
    out = np.empty((net.step, len(agents)))
    for c, a in enumerate(agents):
        st = net.agents[a]
        mom = to_moments(st.local)
        lay = InfoGaussian.zeros(st.local.vars)
        own_t = [v for v in st.tasks if v.kind == "target"]
        own_b = [v for v in st.tasks if v.kind == "bias"]
        for k in range(1, net.step + 1):
            vs = [v.at(k) for v in own_t] + own_b
            idx = lay.index(vs)
            err = mom.mu[idx] - _truth_vector(vs, truth, k)
            out[k - 1, c] = float(err @ err)
    return out


def run_single(config: ScenarioConfig, methods, window: str, seed_seq) -> list[RunMetrics]:
    """One Monte Carlo run: shared data, centralized reference, then every method."""
    run = int(seed_seq.spawn_key[-1]) if seed_seq.spawn_key else 0
    rng = np.random.default_rng(seed_seq)
    data = simulate_run(config, rng)
    out = []
    steps = config.steps
    try:
        cf = CentralFilter(config, window)
        cents, c_nees, c_sq = [], np.empty((steps, 1)), np.empty((steps, 1))
        for k in range(1, steps + 1):
            cur = _current(cf.run_step(data.measurements[k - 1]))
            val, mom, err = _record(cur, data.truth, k)
            cents.append(mom)
            c_nees[k - 1, 0] = val
            c_sq[k - 1, 0] = float(err @ err)
        out.append(RunMetrics("central", run, [0], c_nees, c_sq, np.zeros((steps, 1)),
                              np.zeros((steps, 1), dtype=np.int64), [len(cents[-1].mu)]))
    except NumericalError as exc:
        nan = np.full((steps, 1), np.nan)
        out.append(RunMetrics("central", run, [0], nan, nan, nan,
                              np.zeros((steps, 1), dtype=np.int64), [0], str(exc)))
        return out + [_failed(config, m, run, str(exc)) for m in methods]
    for m in methods:
        m = FusionMethod.parse(m)
        try:
            agents, n_, s_, e_, b_, dof, sm = _run_method(config, data, m, window, cents)
            out.append(RunMetrics(m.value, run, agents, n_, s_, e_, b_, dof, smooth_sq_err=sm))
        except NumericalError as exc:
            out.append(_failed(config, m, run, str(exc)))
    return out


def _failed(config, method, run, msg) -> RunMetrics:
    agents = sorted(config.agents)
    nan = np.full((config.steps, len(agents)), np.nan)
    return RunMetrics(FusionMethod.parse(method).value, run, agents, nan, nan.copy(), nan.copy(),
                      np.zeros(nan.shape, dtype=np.int64), [0] * len(agents), msg)


def _worker(args):
    config, methods, window, seed_seq = args
    return run_single(config, methods, window, seed_seq)


def worker_count(runs: int) -> int:
    env = os.environ.get("HETFUSE_THREADS")
    n = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(n, runs))


def monte_carlo(config: ScenarioConfig, runs: int, seed: int | None = None, methods=None,
                window: str | None = None, workers: int | None = None) -> dict[str, list[RunMetrics]]:
    """Independent seeded runs; results keyed by method (plus ``"central"``).

    Run ``r`` draws from child ``r`` of ``SeedSequence(seed)``, so results do
    not depend on the worker count.
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    seed = config.seed if seed is None else seed
    methods = [FusionMethod.parse(m).value for m in (methods or [config.method])]
    window = window or config.window
    if window not in WINDOWS:
        raise ConfigError(f"unknown window policy {window!r}")
    children = np.random.SeedSequence(seed).spawn(runs)
    jobs = [(config, methods, window, c) for c in children]
    workers = worker_count(runs) if workers is None else max(1, workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_worker, jobs, chunksize=max(1, runs // (4 * workers))))
    else:
        results = [_worker(j) for j in jobs]
    out: dict[str, list[RunMetrics]] = {"central": []}
    for m in methods:
        out[m] = []
    for rec_list in results:
        for rec in rec_list:
            out[rec.method].append(rec)
    return out


__all__ = [
    "AgentMeasurements", "CentralFilter", "GroundTruth", "Network", "RunData", "ScenarioConfig",
    "build_network", "centralized_oracle", "delayed_batch", "fusion_round",
    "generate_measurements", "load_config", "measurement_models", "monte_carlo", "preset",
    "run_single", "run_step", "shared_prior", "simulate_run", "simulate_truth",
]
