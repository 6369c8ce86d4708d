"""Information-form Gaussian algebra over labeled variable blocks.

An :class:`InfoGaussian` stores ``zeta = Sigma^-1 mu`` and ``lam = Sigma^-1``
laid out over a canonically ordered :class:`~hetfuse.varset.VariableSet`.
Binary operations align operands by variable label, so contributions
computed by different agents over different sets can be summed directly.

Zero-information values (``lam = 0``) are legal and stand for "no common
prior"; they are rejected by :func:`to_moments` and by eliminating a zero
block in :func:`marginalize`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.linalg import lapack

from . import kernels
from .errors import (DimensionMismatch, NotPositiveDefinite, SingularBlock,
                     SingularMatrix, UnknownVariable)
from .varset import Variable, VariableSet

SYM_TOL = 1e-12
PSD_TOL = 1e-9


def _as_set(vs) -> VariableSet:
    return vs if isinstance(vs, VariableSet) else VariableSet(vs)


class InfoGaussian:
    """Gaussian in information form over an ordered variable set."""

    __slots__ = ("vars", "zeta", "lam")

    def __init__(self, variables, zeta, lam, *, symmetrize=True):
        order = list(variables)
        vs = _as_set(order)
        if len(vs) != len(order):
            raise DimensionMismatch("duplicate variables in InfoGaussian")
        zeta = np.array(zeta, dtype=float).reshape(-1)
        lam = np.array(lam, dtype=float)
        n = vs.dim
        if zeta.shape != (n,) or lam.shape != (n, n):
            raise DimensionMismatch(
                f"expected zeta ({n},) and lam ({n},{n}); got {zeta.shape} and {lam.shape}")
        if tuple(order) != vs.vars:
            perm = _index_in(order, vs.vars)
            zeta = zeta[perm]
            lam = lam[np.ix_(perm, perm)]
        if symmetrize:
            lam = 0.5 * (lam + lam.T)
        self.vars = vs
        self.zeta = zeta
        self.lam = lam

    # -- layout helpers -------------------------------------------------
    def index(self, variables: Iterable[Variable]) -> np.ndarray:
        """Scalar indices of ``variables`` (in the given order)."""
        if isinstance(variables, VariableSet):
            try:
                return self.vars.index_of(variables)
            except KeyError as exc:
                raise UnknownVariable(f"{exc.args[0].id} not in {self.vars}") from None
        lay = self.vars.offsets()
        idx = []
        for v in variables:
            s = lay.get(v)
            if s is None:
                raise UnknownVariable(f"{v.id} not in {self.vars}")
            idx.extend(range(*s))
        return np.asarray(idx, dtype=np.intp)

    def block(self, rows, cols=None) -> np.ndarray:
        r = self.index(rows)
        c = r if cols is None else self.index(cols)
        return self.lam[np.ix_(r, c)]

    def subvector(self, rows) -> np.ndarray:
        return self.zeta[self.index(rows)]

    @property
    def dim(self) -> int:
        return self.zeta.shape[0]

    # -- arithmetic -----------------------------------------------------
    def _combine(self, other: "InfoGaussian", sign: float) -> "InfoGaussian":
        if self.vars == other.vars:
            return InfoGaussian._raw(self.vars, self.zeta + sign * other.zeta,
                                     self.lam + sign * other.lam)
        out = embed(self, self.vars | other.vars)
        lam, zeta = out.lam, out.zeta
        kernels.scatter_add(lam, zeta, np.ascontiguousarray(other.lam),
                            np.ascontiguousarray(other.zeta), out.index(other.vars), sign)
        return InfoGaussian._raw(out.vars, zeta, 0.5 * (lam + lam.T))

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def scaled(self, c: float) -> "InfoGaussian":
        return InfoGaussian._raw(self.vars, c * self.zeta, c * self.lam)

    @classmethod
    def _raw(cls, vs: VariableSet, zeta, lam) -> "InfoGaussian":
        # trusted constructor: canonical order and shapes already guaranteed
        g = object.__new__(cls)
        g.vars = vs
        g.zeta = zeta
        g.lam = lam
        return g

    @classmethod
    def zeros(cls, variables) -> "InfoGaussian":
        vs = _as_set(variables)
        return cls._raw(vs, np.zeros(vs.dim), np.zeros((vs.dim, vs.dim)))

    def min_eig(self) -> float:
        return min_eig_sym(self.lam) if self.dim else 0.0

    def check_psd(self, tol: float = PSD_TOL) -> bool:
        """Smallest eigenvalue >= ``-tol`` relative to the spectral norm (floored at 1)."""
        if not self.dim:
            return True
        w = np.linalg.eigvalsh(self.lam)
        return w[0] >= -tol * max(abs(w[0]), abs(w[-1]), 1.0)

    def allclose(self, other: "InfoGaussian", rtol=1e-10) -> bool:
        if self.vars != other.vars:
            return False
        return (rel_err(self.lam, other.lam) <= rtol
                and rel_err(self.zeta, other.zeta) <= rtol)

    def __repr__(self):
        return f"InfoGaussian({self.vars}, dim={self.dim})"


def _index_in(order, canonical) -> np.ndarray:
    offs, off = {}, 0
    for v in order:
        offs[v] = (off, v.dim)
        off += v.dim
    idx = []
    for v in canonical:
        o, d = offs[v]
        idx.extend(range(o, o + d))
    return np.asarray(idx, dtype=np.intp)


def rel_err(a, b) -> float:
    """Relative error ``||a - b|| / max(||b||, tiny)`` in the Frobenius/2-norm."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    den = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


@dataclass(frozen=True)
class MomentGaussian:
    vars: VariableSet
    mu: np.ndarray
    sigma: np.ndarray

    def sub(self, variables) -> "MomentGaussian":
        """Moment marginal: just the sub-blocks."""
        keep = _as_set(variables)
        g = InfoGaussian.zeros(self.vars)  # reuse layout bookkeeping
        idx = g.index(keep)
        return MomentGaussian(keep, self.mu[idx], self.sigma[np.ix_(idx, idx)])


@dataclass(frozen=True)
class ConditionalInfo:
    """Information-form conditional ``p(S | X)``.

    ``lam_ss`` is the conditional information, ``zeta_s`` the offset and
    ``lam_sx`` the coupling, so ``zeta_{S|X} = zeta_s - lam_sx X``.
    """

    given: VariableSet
    rest: VariableSet
    lam_ss: np.ndarray
    zeta_s: np.ndarray
    lam_sx: np.ndarray


def marginalize(g: InfoGaussian, keep) -> InfoGaussian:
    """Schur-complement marginal over ``keep``."""
    keep = _as_set(keep)
    if not keep <= g.vars:
        missing = keep - g.vars
        raise UnknownVariable(f"cannot keep {missing}: not in {g.vars}")
    if keep == g.vars:
        return g
    drop = g.vars - keep
    lam_k, zeta_k = kernels.marginalize_info(
        g.lam, g.zeta, g.index(keep), g.index(drop))
    return InfoGaussian._raw(keep, zeta_k, lam_k)


def condition_on(g: InfoGaussian, given) -> ConditionalInfo:
    given = _as_set(given)
    if not given <= g.vars:
        raise UnknownVariable(f"cannot condition on {given - g.vars}: not in {g.vars}")
    rest = g.vars - given
    if not len(rest):
        raise DimensionMismatch("conditioning set leaves no free variables")
    ir, ig = g.index(rest), g.index(given)
    return ConditionalInfo(given, rest, g.lam[np.ix_(ir, ir)].copy(),
                           g.zeta[ir].copy(), g.lam[np.ix_(ir, ig)].copy())


def recombine(marginal: InfoGaussian, conditional: ConditionalInfo) -> InfoGaussian:
    """Joint from a marginal over X and a conditional p(S | X)."""
    if marginal.vars != conditional.given:
        raise DimensionMismatch(
            f"marginal over {marginal.vars} but conditional given {conditional.given}")
    c = conditional
    full = c.given | c.rest
    nx = c.given.dim
    try:
        chol, info = lapack.dpotrf(c.lam_ss, lower=0, clean=1)
        if info != 0:
            raise SingularBlock("conditional information block is not positive definite")
        rhs = np.column_stack([c.lam_sx, c.zeta_s])
        sol, _ = lapack.dpotrs(chol, rhs)
    except ValueError as exc:  # pragma: no cover - lapack argument errors
        raise DimensionMismatch(str(exc)) from exc
    # lam_xs lam_ss^-1 [lam_sx | zeta_s]
    proj = c.lam_sx.T @ sol
    zeta = np.concatenate([marginal.zeta + proj[:, -1], c.zeta_s])
    lam = np.empty((full.dim, full.dim))
    lam[:nx, :nx] = marginal.lam + proj[:, :-1]
    lam[:nx, nx:] = c.lam_sx.T
    lam[nx:, :nx] = c.lam_sx
    lam[nx:, nx:] = c.lam_ss
    return InfoGaussian((*c.given, *c.rest), zeta, lam)


def embed(g: InfoGaussian, superset) -> InfoGaussian:
    """Zero-pad ``g`` into the (canonically ordered) ``superset``."""
    superset = _as_set(superset)
    if superset == g.vars:
        return InfoGaussian._raw(g.vars, g.zeta.copy(), g.lam.copy())
    if not g.vars <= superset:
        raise UnknownVariable(f"{g.vars - superset} not in target space {superset}")
    out = InfoGaussian.zeros(superset)
    idx = out.index(g.vars)
    out.zeta[idx] = g.zeta
    out.lam[np.ix_(idx, idx)] = g.lam
    return out


def _chol_checked(m: np.ndarray, what: str):
    chol, info = lapack.dpotrf(m, lower=0, clean=1)
    if info != 0:
        raise SingularMatrix(f"{what} is not positive definite")
    anorm = np.abs(m).sum(axis=0).max()
    rcond, _ = lapack.dpocon(chol, anorm)
    if not rcond >= kernels.RCOND_MIN:
        raise SingularMatrix(f"{what} is numerically singular (rcond={rcond:.3e})")
    return chol


def to_moments(g: InfoGaussian) -> MomentGaussian:
    chol = _chol_checked(g.lam, "information matrix")
    inv, _ = lapack.dpotri(chol)
    sigma = np.triu(inv) + np.triu(inv, 1).T
    mu = sigma @ g.zeta
    return MomentGaussian(g.vars, mu, sigma)


def from_moments(m: MomentGaussian) -> InfoGaussian:
    sigma = 0.5 * (np.asarray(m.sigma, float) + np.asarray(m.sigma, float).T)
    chol = _chol_checked(sigma, "covariance")
    inv, _ = lapack.dpotri(chol)
    lam = np.triu(inv) + np.triu(inv, 1).T
    return InfoGaussian(m.vars.vars, lam @ np.asarray(m.mu, float), lam)


def moments(variables, mu, sigma) -> MomentGaussian:
    """Build a :class:`MomentGaussian`, reordering blocks into canonical order."""
    order = list(variables)
    vs = _as_set(order)
    mu = np.asarray(mu, float).reshape(-1)
    sigma = np.asarray(sigma, float)
    if tuple(order) != vs.vars:
        perm = _index_in(order, vs.vars)
        mu, sigma = mu[perm], sigma[np.ix_(perm, perm)]
    return MomentGaussian(vs, mu, sigma)


def min_eig_sym(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    m = np.asarray(m, float)
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])


def sym_inv_sqrt(m: np.ndarray, *, name: str = "matrix") -> np.ndarray:
    """Unique symmetric positive-definite ``m^{-1/2}``."""
    m = np.asarray(m, float)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    scale = max(abs(w[-1]), 1e-300)
    if w[0] <= 1e-12 * scale:
        raise NotPositiveDefinite(
            f"{name} is not positive definite (eigenvalues {w[0]:.3e} .. {w[-1]:.3e})")
    out = (v / np.sqrt(w)) @ v.T
    return 0.5 * (out + out.T)
