"""Kolmogorov-forward evolution of the population over the state grid."""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonUniquenessError, NumericalError
from .hjb import TransitionOperator, solve_shifted
from .model import Density


def fp_forward_step(m: Density, op: TransitionOperator, dt) -> Density:
    """Implicit step ``(I - dt A^T) m' = m``.

    ``I - dt A`` has unit row sums, so its transpose has unit column sums and
    total mass is carried over exactly; it is an M-matrix, so ``m' >= 0``.
    """
    if dt <= 0:
        raise NumericalError("dt must be > 0")
    mass = forward_step_array(m.mass, op.coeffs, dt)
    return Density(mass)


def forward_step_array(mass, coeffs, dt):
    """Array-level implicit transpose step (stacked cells allowed)."""
    new = solve_shifted(coeffs, 1.0 / dt, np.asarray(mass) / dt, transpose=True)
    # roundoff can leave -1e-20 entries
    return np.maximum(new, 0.0)


def _normalised_null_vector(At, row):
    n = At.shape[0]
    M = At.tolil(copy=True)
    M[row, :] = np.ones(n)
    b = np.zeros(n)
    b[row] = 1.0
    try:
        with warnings.catch_warnings():
            # singularity is reported through the non-finite check below
            warnings.simplefilter("ignore", spla.MatrixRankWarning)
            sol = spla.spsolve(M.tocsc(), b)
    except RuntimeError as exc:  # SuperLU: exactly singular
        raise NonUniquenessError(f"generator is reducible: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise NonUniquenessError("generator is reducible: singular normalised system")
    return sol


def stationary_density(op: TransitionOperator, shape=None) -> Density:
    """Solve ``A^T m = 0`` with ``sum(m) = 1``.

    The zero-sum row is replaced by the normalisation. Two different
    replaced rows must give the same answer, otherwise the null space has
    more than one dimension.
    """
    At = sp.csr_matrix(op.matrix.T)
    n = At.shape[0]
    first = _normalised_null_vector(At, 0)
    last = _normalised_null_vector(At, n - 1)
    if np.max(np.abs(first - last)) > 1e-8 or np.min(first) < -1e-9:
        raise NonUniquenessError("generator is reducible: stationary density is not unique")
    m = np.clip(first, 0.0, None)
    m /= m.sum()
    if shape is None:
        shape = op.coeffs["a+"].shape
    return Density(m.reshape(shape))
