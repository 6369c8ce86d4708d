"""Conservative window marginalization with a bias-sparse information matrix.

Removing an old target copy by Schur complement couples the bias states of
different agents. To keep each agent's bias conditionally independent of the
others given the retained target copies, the marginal information matrix is
replaced by a sparse approximation (bias-to-bias blocks of distinct agents
zeroed) and then uniformly deflated until it lies below the true marginal:

    lam_c = lam_min * lam_sp,   lam_min = min eig(lam_sp^-1/2 lam_tr lam_sp^-1/2)

The information vector is rebuilt as ``lam_c lam_tr^-1 zeta_tr`` so the
mean is unchanged.
"""

from __future__ import annotations

from itertools import combinations
from typing import Iterable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NotPositiveDefinite
from .ginfo import InfoGaussian, marginalize, min_eig_sym, sym_inv_sqrt
from .varset import BIAS, Variable, VariableSet


class SparsityPattern:
    """Unordered variable pairs whose cross-information is forced to zero."""

    def __init__(self, pairs: Iterable[tuple[Variable, Variable]] = ()):
        out = set()
        for a, b in pairs:
            if a == b:
                raise ValueError(f"diagonal block {a.id} cannot be sparsified")
            out.add(frozenset((a, b)))
        self.pairs = frozenset(out)

    @classmethod
    def distinct_biases(cls, variables: Iterable[Variable]) -> "SparsityPattern":
        """Every bias pair belonging to different agents."""
        biases = [v for v in variables if v.kind == BIAS]
        return cls((a, b) for a, b in combinations(biases, 2) if a.entity != b.entity)

    def __len__(self):
        return len(self.pairs)

    def __contains__(self, pair):
        return frozenset(pair) in self.pairs

    def mask(self, variables: VariableSet) -> np.ndarray:
        """Boolean matrix over ``variables`` marking the entries to zero."""
        vs = list(variables)
        offs, off = [], 0
        for v in vs:
            offs.append(off)
            off += v.dim
        out = np.zeros((off, off), dtype=bool)
        for a in range(len(vs)):
            for b in range(a + 1, len(vs)):
                if frozenset((vs[a], vs[b])) in self.pairs:
                    ra = slice(offs[a], offs[a] + vs[a].dim)
                    rb = slice(offs[b], offs[b] + vs[b].dim)
                    out[ra, rb] = True
                    out[rb, ra] = True
        return out


def sparsify(lam_tr: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy of ``lam_tr`` with the masked entries set to zero."""
    out = np.array(lam_tr, dtype=float)
    out[mask] = 0.0
    return out


def deflate(lam_tr: np.ndarray, lam_sp: np.ndarray, *, name: str = "sparse information"):
    """Return ``(lam_min, lam_min * lam_sp)`` with ``lam_min * lam_sp <= lam_tr``."""
    s = sym_inv_sqrt(lam_sp, name=name)
    scale = min_eig_sym(s @ lam_tr @ s)
    return scale, scale * lam_sp


def conservative_marginalize(g: InfoGaussian, drop, pattern: SparsityPattern | None = None):
    """Marginalize ``drop`` out of ``g`` then sparsify and deflate the result.

    Returns ``(window, lam_min)``. With nothing to sparsify the plain marginal
    is returned and ``lam_min`` is 1.
    """
    keep = g.vars - VariableSet(drop)
    dense = marginalize(g, keep)
    if pattern is None:
        pattern = SparsityPattern.distinct_biases(keep)
    mask = pattern.mask(keep)
    if not mask.any():
        return dense, 1.0
    lam_sp = sparsify(dense.lam, mask)
    try:
        scale, lam_c = deflate(dense.lam, lam_sp)
    except NotPositiveDefinite as exc:
        blocks = sorted({v.id for p in pattern.pairs for v in p if v in keep})
        raise NotPositiveDefinite(
            f"sparsified information over {keep} is not positive definite after zeroing "
            f"cross terms among {blocks}: {exc}") from exc
    mean = cho_solve(cho_factor(dense.lam), dense.zeta)
    return InfoGaussian._raw(keep, lam_c @ mean, lam_c), scale
