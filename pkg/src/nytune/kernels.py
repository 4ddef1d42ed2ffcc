"""Gaussian (RBF) kernel with one lengthscale per input dimension.

Everything downstream (solver, objectives, gradients) is built on three
primitives: kernel matrices, kernel diagonals, and gradients of linear
functionals of a kernel matrix.  All evaluation is row-blocked so peak
memory stays at O(block_rows * b) regardless of the left operand size,
and block reductions run in a fixed order so results do not depend on
how the work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BLOCK_ROWS = 4096


class ShapeError(ValueError):
    """Inconsistent array dimensions passed to a kernel operation."""


@dataclass(frozen=True)
class Lengthscales:
    """Per-dimension lengthscales, stored in log-space for positivity.

    Parameters
    ----------
    log_ell : (d,) ndarray
        Log of each lengthscale; ``exp(log_ell)`` is strictly positive
        by construction.
    """

    log_ell: np.ndarray

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.log_ell, dtype=np.float64))
        if arr.ndim != 1 or arr.size < 1:
            raise ShapeError("log_ell must be a 1-d vector with d >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("log_ell entries must be finite")
        object.__setattr__(self, "log_ell", arr)

    @property
    def d(self) -> int:
        return self.log_ell.size

    @property
    def ell(self) -> np.ndarray:
        return np.exp(self.log_ell)

    @classmethod
    def from_value(cls, ell, d: int | None = None) -> "Lengthscales":
        """Build from raw (not log) lengthscales; scalars broadcast to d."""
        ell = np.asarray(ell, dtype=np.float64)
        if ell.ndim == 0:
            if d is None:
                raise ShapeError("scalar lengthscale needs an explicit d")
            ell = np.full(d, float(ell))
        if np.any(ell <= 0):
            raise ValueError("lengthscales must be strictly positive")
        return cls(np.log(ell))


def _as_points(A, d=None, name="A"):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[0] < 1:
        raise ShapeError(f"{name} must be a nonempty (points, d) matrix")
    if d is not None and A.shape[1] != d:
        raise ShapeError(f"{name} has dimension {A.shape[1]}, expected {d}")
    return A


def kernel_eval(x, z, ls: Lengthscales) -> float:
    """k(x, z) = exp(-0.5 * sum_j ((x_j - z_j) / ell_j)^2); always in (0, 1]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if x.size != z.size or x.size != ls.d:
        raise ShapeError("x, z and lengthscales must share dimension d")
    u = (x - z) / ls.ell
    return float(np.exp(-0.5 * np.dot(u, u)))


def kernel_diag(A, ls: Lengthscales) -> np.ndarray:
    """Diagonal k(a_i, a_i); identically one for this kernel."""
    A = _as_points(A, ls.d)
    return np.ones(A.shape[0])


def kernel_matrix(A, B=None, ls: Lengthscales = None, *,
                  block_rows: int = DEFAULT_BLOCK_ROWS) -> np.ndarray:
    """Dense kernel matrix k(A_i, B_j), computed in row blocks of A.

    Passing ``B=None`` (or the same array) takes the symmetric path:
    the result is exactly symmetric with a unit diagonal.
    """
    if ls is None:
        raise TypeError("kernel_matrix requires lengthscales")
    A = _as_points(A, ls.d, "A")
    symmetric = B is None
    if not symmetric:
        B = _as_points(B, ls.d, "B")
        symmetric = B is A or (A.shape == B.shape and np.array_equal(A, B))
    if symmetric:
        B = A
    As = A / ls.ell
    Bs = As if B is A else B / ls.ell
    b_sq = np.einsum("ij,ij->i", Bs, Bs)
    K = np.empty((A.shape[0], B.shape[0]))
    for start in range(0, A.shape[0], block_rows):
        stop = min(start + block_rows, A.shape[0])
        blk = As[start:stop]
        sq = np.einsum("ij,ij->i", blk, blk)[:, None] + b_sq[None, :]
        sq -= 2.0 * (blk @ Bs.T)
        np.maximum(sq, 0.0, out=sq)
        K[start:stop] = np.exp(-0.5 * sq)
    if symmetric:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
    return K


@dataclass
class KernelCotangent:
    """Cotangent on a kernel matrix K(A, B), kept in factored form.

    Represents C = sum_p L_p @ R_p.T  +  sum_q diag(v_q) @ K @ S_q  (+ dense),
    so that row blocks of C are formed on the fly and nothing larger than
    (block_rows, b) is ever materialized.  ``v_q=None`` means no row scaling.
    """

    pairs: list = field(default_factory=list)    # (L (a,w), R (b,w))
    rights: list = field(default_factory=list)   # (v (a,) or None, S (b,b))
    dense: np.ndarray | None = None              # explicit (a,b) cotangent

    def add_pair(self, L, R):
        self.pairs.append((np.atleast_2d(L), np.atleast_2d(R)))

    def add_right(self, v, S):
        self.rights.append((v, S))

    def block(self, K_blk, sl):
        C = np.zeros_like(K_blk)
        if self.dense is not None:
            C += self.dense[sl]
        for L, R in self.pairs:
            C += L[sl] @ R.T
        for v, S in self.rights:
            KS = K_blk @ S
            if v is not None:
                KS *= v[sl, None]
            C += KS
        return C

    def is_empty(self):
        return not self.pairs and not self.rights and self.dense is None


def kernel_grads(A, B, ls: Lengthscales, cot: KernelCotangent, *,
                 K=None, want_dA=True, want_dB=True,
                 block_rows: int = DEFAULT_BLOCK_ROWS):
    """Gradients of s = <C, K(A, B)> for a factored cotangent C.

    Returns ``(d_log_ell, dA, dB)`` where the unwanted point gradients are
    None.  ``K`` may supply a precomputed kernel matrix to slice from.
    Blocks are reduced in a fixed order, so the result is independent of
    the block size.
    """
    A = _as_points(A, ls.d, "A")
    B = _as_points(B, ls.d, "B")
    ell = ls.ell
    inv_ell2 = 1.0 / ell**2
    a, b = A.shape[0], B.shape[0]
    d_log_ell = np.zeros(ls.d)
    dA = np.zeros_like(A) if want_dA else None
    dB = np.zeros_like(B) if want_dB else None
    if cot.is_empty():
        return d_log_ell, dA, dB
    col_sums = np.zeros(b)
    WtA = np.zeros((b, ls.d))
    Bs = B / ell
    b_sq = np.einsum("ij,ij->i", Bs, Bs)
    for start in range(0, a, block_rows):
        stop = min(start + block_rows, a)
        sl = slice(start, stop)
        if K is not None:
            K_blk = K[sl]
        else:
            blk = A[sl] / ell
            sq = np.einsum("ij,ij->i", blk, blk)[:, None] + b_sq[None, :]
            sq -= 2.0 * (blk @ Bs.T)
            np.maximum(sq, 0.0, out=sq)
            K_blk = np.exp(-0.5 * sq)
        W = cot.block(K_blk, sl) * K_blk
        rs = W.sum(axis=1)
        col_sums += W.sum(axis=0)
        WB = W @ B
        if want_dA:
            dA[sl] = -(A[sl] * rs[:, None] - WB) * inv_ell2
        WtA += W.T @ A[sl]
        # sum_ij W_ij (A_iq - B_jq)^2 = sum_i rs_i A_iq^2
        #   - 2 sum_i A_iq (WB)_iq + sum_j cs_j B_jq^2 (last term after loop)
        d_log_ell += (A[sl] ** 2 * rs[:, None]).sum(axis=0)
        d_log_ell -= 2.0 * (A[sl] * WB).sum(axis=0)
    d_log_ell += (B**2 * col_sums[:, None]).sum(axis=0)
    d_log_ell *= inv_ell2
    if want_dB:
        dB = (WtA - B * col_sums[:, None]) * inv_ell2
    return d_log_ell, dA, dB


def kernel_vjp(A, B, ls: Lengthscales, L, R, *,
               block_rows: int = DEFAULT_BLOCK_ROWS):
    """Gradients of s = tr(L^T K(A, B) R) w.r.t. log-lengthscales, A and B.

    L is (a, o) and R is (b, o); the implicit cotangent L @ R.T is only
    ever formed one row block at a time.
    """
    A = _as_points(A, ls.d, "A")
    B = _as_points(B, ls.d, "B")
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if L.shape[0] != A.shape[0] or R.shape[0] != B.shape[0] or L.shape[1] != R.shape[1]:
        raise ShapeError("cotangent factors must be (a, o) and (b, o)")
    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(R))):
        raise ValueError("cotangent factors must be finite")
    cot = KernelCotangent(pairs=[(L, R)])
    return kernel_grads(A, B, ls, cot, block_rows=block_rows)
