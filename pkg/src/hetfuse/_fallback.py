"""Pure numpy/scipy implementations of the hot kernels.

Selected by :mod:`hetfuse.kernels` whenever the compiled ``_kernels``
extension is unavailable or ``HETFUSE_BACKEND=python`` is set. Both
backends follow the same LAPACK path (potrf, pocon, potrs) so they accept
and reject exactly the same inputs.
"""

import numpy as np
from scipy.linalg import lapack

from .errors import SingularBlock

RCOND_MIN = 1e-12


def marginalize_info(lam, zeta, keep, drop):
    """Schur-complement elimination of ``drop`` from an information pair.

    Returns ``(lam_kk - lam_kd lam_dd^-1 lam_dk, zeta_k - lam_kd lam_dd^-1 zeta_d)``.
    """
    if drop.size == 0:
        return lam[np.ix_(keep, keep)].copy(), zeta[keep].copy()
    l_dd = lam[np.ix_(drop, drop)]
    l_dk = lam[np.ix_(drop, keep)]
    chol, info = lapack.dpotrf(l_dd, lower=0, clean=1)
    if info != 0:
        raise SingularBlock(f"eliminated block is not positive definite (potrf info={info})")
    anorm = np.abs(l_dd).sum(axis=0).max()
    rcond, _ = lapack.dpocon(chol, anorm)
    if not rcond >= RCOND_MIN:
        raise SingularBlock(f"eliminated block is numerically singular (rcond={rcond:.3e})")
    rhs = np.empty((drop.size, keep.size + 1))
    rhs[:, :-1] = l_dk
    rhs[:, -1] = zeta[drop]
    sol, _ = lapack.dpotrs(chol, rhs)
    lam_k = lam[np.ix_(keep, keep)] - l_dk.T @ sol[:, :-1]
    lam_k = 0.5 * (lam_k + lam_k.T)
    zeta_k = zeta[keep] - l_dk.T @ sol[:, -1]
    return lam_k, zeta_k


def scatter_add(lam, zeta, src_lam, src_zeta, idx, scale):
    """In place: ``lam[idx, idx] += scale*src_lam`` and ``zeta[idx] += scale*src_zeta``."""
    lam[np.ix_(idx, idx)] += scale * src_lam
    zeta[idx] += scale * src_zeta
