"""LU factorisations for the banded systems produced by operator assembly."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sps
from scipy.linalg import lapack
from scipy.sparse.linalg import splu

from .errors import SingularSystemError

__all__ = ["LUFactor", "factorize"]


def _bands(mat):
    coo = mat.tocoo()
    if coo.nnz == 0:
        return 0, 0
    diff = coo.row.astype(np.int64) - coo.col.astype(np.int64)
    return int(max(diff.max(), 0)), int(max(-diff.min(), 0))


class LUFactor:
    """LU factors of a sparse square matrix.

    Narrow-band matrices go through LAPACK ``gbtrf``/``gbtrs``; wider ones
    through SuperLU, which reorders and is faster once the band fills up a
    sizeable fraction of the matrix.
    """

    def __init__(self, matrix, band_fraction=0.25):
        mat = sps.csr_matrix(matrix)
        n = mat.shape[0]
        if mat.shape != (n, n):
            raise ValueError("matrix must be square")
        self.n = n
        kl, ku = _bands(mat)
        self.kl, self.ku = kl, ku
        self.banded = n > 0 and (kl + ku + 1) <= max(band_fraction * n, 8)
        if self.banded:
            ab = np.zeros((2 * kl + ku + 1, n))
            coo = mat.tocoo()
            ab[kl + ku + coo.row - coo.col, coo.col] = coo.data
            lu, piv, info = lapack.dgbtrf(ab, kl, ku)
            if info != 0:
                raise SingularSystemError(f"banded LU failed (info={info})")
            diag = lu[kl + ku]
            if not np.all(np.isfinite(lu)) or np.min(np.abs(diag)) <= np.finfo(float).eps * np.max(np.abs(diag)):
                raise SingularSystemError("matrix is singular to working precision")
            self._lu, self._piv = lu, piv
        else:
            try:
                self._slu = splu(mat.tocsc())
            except RuntimeError as exc:
                raise SingularSystemError(str(exc)) from exc
            diag = self._slu.U.diagonal()
            if np.min(np.abs(diag)) <= np.finfo(float).eps * np.max(np.abs(diag)):
                raise SingularSystemError("matrix is singular to working precision")

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.banded:
            x, info = lapack.dgbtrs(self._lu, self.kl, self.ku, rhs, self._piv)
            if info != 0:
                raise SingularSystemError(f"banded solve failed (info={info})")
        else:
            x = self._slu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("non-finite solution of linear system")
        return x


def factorize(matrix):
    return LUFactor(matrix)
