"""Symmetric factorization helpers shared by the solver and objectives."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh, solve_triangular

JITTER_START_REL = 1e-10
JITTER_MAX_REL = 1e-4
PINV_CUTOFF_REL = 1e-10


class SingularSystemError(np.linalg.LinAlgError):
    """Factorization failed even after maximum jitter escalation."""

    def __init__(self, final_jitter: float):
        self.final_jitter = final_jitter
        super().__init__(
            f"matrix not positive definite after jitter escalation up to "
            f"{final_jitter:.3e}"
        )


class CholFactor:
    """Cholesky factor of A + jitter*I with escalation on failure.

    Jitter starts at JITTER_START_REL * mean(diag(A)) and escalates by
    factors of 10 up to JITTER_MAX_REL * mean(diag(A)).  With
    ``always_jitter`` the base jitter is applied unconditionally, which
    gives a smooth surrogate suitable for differentiation; otherwise an
    unjittered factorization is attempted first.
    """

    def __init__(self, A: np.ndarray, *, always_jitter: bool = False,
                 start_rel: float = JITTER_START_REL):
        A = np.asarray(A, dtype=np.float64)
        scale = float(np.mean(np.diag(A)))
        if not np.isfinite(scale) or scale <= 0:
            scale = 1.0
        jitters = [start_rel * scale]
        while jitters[-1] < JITTER_MAX_REL * scale:
            jitters.append(jitters[-1] * 10.0)
        if not always_jitter:
            jitters.insert(0, 0.0)
        last = jitters[-1]
        for jit in jitters:
            try:
                c, low = cho_factor(
                    A + jit * np.eye(A.shape[0]) if jit else A, lower=True
                )
            except np.linalg.LinAlgError:
                continue
            self._c, self._low = c, low
            self.jitter = jit
            self.n = A.shape[0]
            return
        raise SingularSystemError(last)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self._c, self._low), b)

    def half_solve(self, b: np.ndarray) -> np.ndarray:
        """L^{-1} b for A + jit*I = L L^T."""
        return solve_triangular(self._c, b, lower=self._low)

    def half_solve_t(self, b: np.ndarray) -> np.ndarray:
        """L^{-T} b for A + jit*I = L L^T."""
        return solve_triangular(self._c, b, lower=self._low, trans="T")

    def inv(self) -> np.ndarray:
        return self.solve(np.eye(self.n))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._c))))


def psd_pinv_factor(M: np.ndarray, *, cutoff_rel: float = PINV_CUTOFF_REL):
    """Factor F with M^+ = F F^T for symmetric PSD M, via eigendecomposition.

    Eigenvalues below ``cutoff_rel`` times the largest are treated as zero
    (Moore-Penrose semantics).  Returns ``(F, rank)`` with F of shape
    (m, rank).
    """
    M = np.asarray(M, dtype=np.float64)
    w, U = eigh(0.5 * (M + M.T))
    wmax = float(w[-1]) if w.size else 0.0
    if wmax <= 0:
        return np.zeros((M.shape[0], 0)), 0
    keep = w > cutoff_rel * wmax
    F = U[:, keep] / np.sqrt(w[keep])
    return F, int(keep.sum())
