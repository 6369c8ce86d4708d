"""Linear models and the information augmented-state (iAS) filter.

An augmented window is an :class:`~hetfuse.ginfo.InfoGaussian` whose target
variables carry time tags (one copy per retained step) and whose bias
variables are untagged and static. Prediction appends a new copy per target
and couples it to the previous one; it never touches older copies, so the
time-time blocks of the predicted information matrix stay block
tri-diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, SingularMatrix, UnknownVariable
from .ginfo import InfoGaussian, _chol_checked, embed, marginalize
from .varset import Variable, VariableSet
from . import kernels


def _inv_pd(m: np.ndarray, what: str) -> np.ndarray:
    from scipy.linalg import lapack
    chol = _chol_checked(np.asarray(m, float), what)
    inv, _ = lapack.dpotri(chol)
    return np.triu(inv) + np.triu(inv, 1).T


@dataclass
class LinearDynamics:
    """``x_k = F x_{k-1} + G u_k + w_k``, ``w_k ~ N(0, Q)``."""

    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    dt: float = 1.0
    control: Callable[[int], np.ndarray] | None = None
    _q_inv: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, float))
        self.G = np.atleast_2d(np.asarray(self.G, float))
        self.Q = np.atleast_2d(np.asarray(self.Q, float))
        m = self.F.shape[0]
        if self.F.shape != (m, m) or self.Q.shape != (m, m) or self.G.shape[0] != m:
            raise DimensionMismatch("inconsistent F, G, Q shapes")

    @property
    def q_inv(self) -> np.ndarray:
        if self._q_inv is None:
            self._q_inv = _inv_pd(self.Q, "process noise covariance")
        return self._q_inv

    def u(self, k: int) -> np.ndarray:
        if self.control is None:
            return np.zeros(self.G.shape[1])
        return np.asarray(self.control(k), float)


@dataclass(frozen=True)
class HarmonicControl:
    """``u_k = [a_e cos(d_e k dt), a_n sin(d_n k dt)]``."""

    a_e: float = 1.0
    a_n: float = 1.0
    d_e: float = 0.1
    d_n: float = 0.1
    dt: float = 1.0

    def __call__(self, k: int) -> np.ndarray:
        t = k * self.dt
        return np.array([self.a_e * np.cos(self.d_e * t), self.a_n * np.sin(self.d_n * t)])


def double_integrator(dt: float = 1.0, q: float = 0.08, control=None) -> LinearDynamics:
    """2-D constant-velocity target with acceleration input; state ``[e, ve, n, vn]``."""
    F = np.array([[1, dt, 0, 0], [0, 1, 0, 0], [0, 0, 1, dt], [0, 0, 0, 1]], float)
    G = np.array([[0.5 * dt**2, 0], [dt, 0], [0, 0.5 * dt**2], [0, dt]], float)
    return LinearDynamics(F, G, q * np.eye(4), dt, control)


@dataclass
class MeasModel:
    """``y = sum_b H_b x_b + v``, ``v ~ N(0, R)`` over the listed variable blocks.

    ``blocks`` holds base (untagged) variables; at update time a target
    block resolves to its copy at the current time tag.
    """

    blocks: Sequence[Variable]
    H: np.ndarray
    R: np.ndarray
    agent: int | None = None
    _info: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, float))
        self.R = np.atleast_2d(np.asarray(self.R, float))
        n = sum(v.dim for v in self.blocks)
        if self.H.shape[1] != n or self.R.shape != (self.H.shape[0],) * 2:
            raise DimensionMismatch("measurement model shapes do not match its blocks")

    def info_terms(self):
        """``(H^T R^-1, H^T R^-1 H)``, cached."""
        if self._info is None:
            r_inv = _inv_pd(self.R, "measurement noise covariance")
            ht_rinv = self.H.T @ r_inv
            self._info = (ht_rinv, ht_rinv @ self.H)
        return self._info

    def resolve(self, k: int | None) -> list[Variable]:
        if k is None:
            return list(self.blocks)
        return [v.at(k) if v.kind == "target" else v for v in self.blocks]


def _newest_tags(g: InfoGaussian) -> dict:
    # canonical order puts the newest copy of each target first
    out = {}
    for v in g.vars:
        if v.time_tag is not None and v.base not in out:
            out[v.base] = v.time_tag
    return out


def latest_tag(g: InfoGaussian, base: Variable) -> int | None:
    return _newest_tags(g).get(base)


def ias_predict(g: InfoGaussian, dyn: LinearDynamics, u, k: int,
                targets: Sequence[Variable] | None = None) -> InfoGaussian:
    """Append the time-``k`` copy of every target and add its transition factor.

    For each target with previous copy ``p`` and new copy ``c``::

        lam[c, c] += Q^-1        lam[c, p] += -Q^-1 F      lam[p, p] += F^T Q^-1 F
        zeta[c]   += Q^-1 G u    zeta[p]   += -F^T Q^-1 G u

    which is the augmented-window prediction with the new block placed first.
    """
    u = np.asarray(u, float).reshape(-1)
    if targets is None:
        targets = [v for v in g.vars.bases() if v.kind == "target"]
    q_inv = dyn.q_inv
    qf = q_inv @ dyn.F
    ftqf = dyn.F.T @ qf
    qgu = q_inv @ (dyn.G @ u)
    ftqgu = dyn.F.T @ qgu
    m = dyn.F.shape[0]
    # factor over (new, prev)
    f_lam = np.block([[q_inv, -qf], [-qf.T, ftqf]])
    f_zeta = np.concatenate([qgu, -ftqgu])

    newest = _newest_tags(g)
    pairs = []
    for base in targets:
        if base.dim != m:
            raise DimensionMismatch(f"{base.id} has dim {base.dim}, dynamics expect {m}")
        prev_tag = newest.get(base)
        if prev_tag is None:
            raise UnknownVariable(f"no copy of {base.id} in window to propagate")
        if prev_tag != k - 1:
            raise DimensionMismatch(f"{base.id} newest copy is @{prev_tag}, expected @{k - 1}")
        pairs.append((base.at(k), base.at(k - 1)))

    out = embed(g, g.vars | VariableSet(c for c, _ in pairs))
    lam, zeta = out.lam, out.zeta
    for cur, prev in pairs:
        idx = out.index((cur, prev))
        kernels.scatter_add(lam, zeta, f_lam, f_zeta, idx, 1.0)
    return InfoGaussian._raw(out.vars, zeta, 0.5 * (lam + lam.T))


def ias_update(g: InfoGaussian, meas: MeasModel, y, k: int | None = None) -> InfoGaussian:
    """Add ``H^T R^-1 y`` and ``H^T R^-1 H`` at the measured (current-time) blocks."""
    y = np.asarray(y, float).reshape(-1)
    if y.shape[0] != meas.H.shape[0]:
        raise DimensionMismatch(f"measurement has {y.shape[0]} entries, model expects {meas.H.shape[0]}")
    blocks = meas.resolve(k)
    try:
        idx = g.index(blocks)
    except UnknownVariable as exc:
        raise DimensionMismatch(f"measured variables missing from window: {exc}") from exc
    ht_rinv, info_mat = meas.info_terms()
    lam = g.lam.copy()
    zeta = g.zeta.copy()
    kernels.scatter_add(lam, zeta, info_mat, ht_rinv @ y, idx, 1.0)
    return InfoGaussian._raw(g.vars, zeta, lam)


def stale_copies(g: InfoGaussian, window: int = 1) -> VariableSet:
    """Target copies older than the ``window`` newest tags of their target."""
    seen: dict = {}
    out = []
    for v in g.vars:  # newest-first within each target
        if v.time_tag is None:
            continue
        n = seen.get(v.base, 0)
        if n >= window:
            out.append(v)
        seen[v.base] = n + 1
    return VariableSet._ordered(out)


def window_marginalize(g: InfoGaussian, drop=None, window: int = 1) -> InfoGaussian:
    """Plain Schur-complement removal of old target copies.

    This does not preserve conditional independence of biases given the
    retained target copies; see :mod:`hetfuse.consfilter` for the sparse
    conservative alternative.
    """
    drop = stale_copies(g, window) if drop is None else VariableSet(drop)
    if not len(drop):
        return g
    newest = _newest_tags(g)
    for v in drop:
        if v.time_tag is not None and newest.get(v.base) == v.time_tag:
            raise DimensionMismatch(f"refusing to drop newest copy {v.id}")
    return marginalize(g, g.vars - drop)


def as_oracle_step(state, cov, dyn: LinearDynamics, H, R, y, u=None):
    """Covariance-form augmented-state step over a single-target window.

    ``state`` stacks the window newest-first (``m`` entries per step). The
    prediction prepends ``F x_{k-1} + G u`` with cross covariance ``F P``;
    the update adds ``H^T R^-1 H`` and ``H^T R^-1 y`` at the newest block in
    information space. Test oracle for :func:`ias_predict` / :func:`ias_update`.
    """
    state = np.asarray(state, float).reshape(-1)
    cov = np.asarray(cov, float)
    m = dyn.F.shape[0]
    n = state.shape[0]
    u = np.zeros(dyn.G.shape[1]) if u is None else np.asarray(u, float)
    F = dyn.F
    bold_f = np.zeros((m, n))
    bold_f[:, :m] = F
    x_new = F @ state[:m] + dyn.G @ u
    p_new = F @ cov[:m, :m] @ F.T + dyn.Q
    cross = bold_f @ cov
    x_pred = np.concatenate([x_new, state])
    p_pred = np.block([[p_new, cross], [cross.T, cov]])

    if H is None:
        return x_pred, 0.5 * (p_pred + p_pred.T)
    H = np.atleast_2d(np.asarray(H, float))
    r_inv = np.linalg.inv(np.atleast_2d(R))
    J = np.zeros((n + m, m))
    J[:m, :m] = np.eye(m)
    try:
        info_pred = np.linalg.inv(p_pred)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("predicted augmented covariance is singular") from exc
    info_post = info_pred + J @ (H.T @ r_inv @ H) @ J.T
    vec_post = info_pred @ x_pred + J @ (H.T @ r_inv @ np.asarray(y, float).reshape(-1))
    cov_post = np.linalg.inv(info_post)
    cov_post = 0.5 * (cov_post + cov_post.T)
    return cov_post @ vec_post, cov_post
