"""Consistency, accuracy and communication metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, SingularMatrix
from .varset import TreeTopology, VariableSet, bias, target


def nees(err, cov) -> float:
    """Normalized estimation error squared ``e^T cov^-1 e``."""
    err = np.asarray(err, float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, float))
    if cov.shape != (err.size, err.size):
        raise DimensionMismatch(f"error of size {err.size} against covariance {cov.shape}")
    try:
        c = cho_factor(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("NEES covariance is not positive definite") from exc
    return float(err @ cho_solve(c, err))


def nees_bounds(runs: int, dof: int, alpha: float = 0.05) -> tuple[float, float]:
    """Two-sided acceptance interval for the ``runs``-average NEES of ``dof`` states."""
    from scipy import stats  # deferred: slow import, unused by the accounting path

    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lo, hi = stats.chi2.ppf([alpha / 2, 1 - alpha / 2], runs * dof) / runs
    return float(lo), float(hi)


def conservativeness(agent_cov, cent_cov) -> float:
    """Smallest eigenvalue of ``agent_cov - cent_cov``; >= 0 is conservative."""
    a = np.atleast_2d(np.asarray(agent_cov, float))
    c = np.atleast_2d(np.asarray(cent_cov, float))
    if a.shape != c.shape:
        raise DimensionMismatch(f"covariances {a.shape} and {c.shape} differ")
    d = a - c
    if not d.any():
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (d + d.T))[0])


def message_bytes(n: int) -> int:
    """Bytes for an ``n``-state payload: vector plus upper triangle in float64."""
    if n < 0:
        raise ValueError("state count must be non-negative")
    return 4 * n * (n + 3)


def rmse(errors, squared: bool = False) -> np.ndarray:
    """Root of the mean squared error over runs (axis 0).

    ``errors`` is ``(runs, steps, d)`` error vectors, or ``(runs, steps)``
    squared norms when ``squared`` is set.
    """
    e = np.asarray(errors, float)
    sq = e if squared else np.sum(e * e, axis=-1)
    return np.sqrt(np.mean(sq, axis=0))


@dataclass
class MethodAccounting:
    method: str
    total_bytes: int
    pct_cf: float
    edge_bytes: dict = field(default_factory=dict)
    local_states: dict = field(default_factory=dict)

    @property
    def max_local_states(self) -> int:
        return max(self.local_states.values())

    @property
    def compute_cost(self) -> int:
        """Largest per-agent cubic inversion cost ``n_local^3``."""
        return self.max_local_states ** 3


def scenario_accounting(topology: TreeTopology, methods=("cf", "bdf", "abdf", "hscf"),
                        joint=None) -> dict[str, MethodAccounting]:
    """Per-method bytes for one fusion round over every directed edge."""
    from .cf2 import FusionMethod, plan_edges

    full = topology.full_set()
    names = [FusionMethod.parse(m) for m in methods]
    if FusionMethod.CF not in names:
        names = [FusionMethod.CF, *names]
    out: dict[str, MethodAccounting] = {}
    for m in names:
        plans = plan_edges(topology, m, joint)
        edge_bytes = {e: message_bytes(p.send_set.dim) for e, p in plans.items()}
        local = {a: (full if m.full_scope else topology.tasks[a]).dim for a in topology.agents}
        out[m.value] = MethodAccounting(m.value, sum(edge_bytes.values()), 0.0, edge_bytes, local)
    cf_total = out["cf"].total_bytes
    for acc in out.values():
        acc.pct_cf = 100.0 * acc.total_bytes / cf_total if cf_total else 0.0
    return out


TABLE2_SIZES = {"small": 1, "medium": 2, "large": 3}


def table2_topology(size: str, bias_dim: int = 6, target_dim: int = 4) -> TreeTopology:
    """Chain of agents, each sharing one target with each neighbor.

    With ``p`` targets per agent, agent ``i`` tracks targets
    ``(i-1)(p-1)+1 .. (i-1)(p-1)+p``; ``p = 1, 2, 3`` gives 2x1, 10x11
    and 25x51 agent x target networks.
    """
    p = TABLE2_SIZES[size]
    n_agents = {1: 2, 2: 10, 3: 25}[p]
    tasks = {}
    for i in range(1, n_agents + 1):
        start = (i - 1) * max(p - 1, 0) + 1
        ts = [target(start + t, target_dim) for t in range(p)]
        tasks[i] = VariableSet([*ts, bias(i, bias_dim)])
    return TreeTopology(tasks, [(i, i + 1) for i in range(1, n_agents)])


@dataclass
class RunMetrics:
    """Per-step, per-agent records of one method on one Monte Carlo run."""

    method: str
    run: int
    agents: list
    nees: np.ndarray
    sq_err: np.ndarray
    min_eig: np.ndarray
    bytes_sent: np.ndarray
    dof: list
    error: str | None = None
    smooth_sq_err: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.nees.shape[0]

    @property
    def ok(self) -> bool:
        return self.error is None


def nees_fraction_in_bounds(records: list[RunMetrics], alpha: float = 0.05) -> dict:
    """Per agent: fraction of steps whose run-averaged NEES lies inside the bounds."""
    good = [r for r in records if r.ok]
    if not good:
        return {}
    stack = np.stack([r.nees for r in good])  # runs, steps, agents
    mean = stack.mean(axis=0)
    out = {}
    for col, agent in enumerate(good[0].agents):
        lo, hi = nees_bounds(len(good), good[0].dof[col], alpha)
        inside = (mean[:, col] >= lo) & (mean[:, col] <= hi)
        out[agent] = float(inside.mean())
    return out


def global_min_eig(records: list[RunMetrics]) -> float:
    vals = [np.nanmin(r.min_eig) for r in records if r.ok and np.isfinite(r.min_eig).any()]
    return float(min(vals)) if vals else float("nan")


def rmse_per_agent(records: list[RunMetrics], smoothed: bool = False) -> np.ndarray:
    """``(steps, agents)`` RMSE over the successful runs.

    With ``smoothed`` the full-history errors of each step's copy are used.
    """
    good = [r for r in records if r.ok]
    if smoothed:
        if any(r.smooth_sq_err is None for r in good):
            raise ValueError("smoothed errors exist only for full-history dynamic runs")
        return rmse(np.stack([r.smooth_sq_err for r in good]), squared=True)
    return rmse(np.stack([r.sq_err for r in good]), squared=True)
