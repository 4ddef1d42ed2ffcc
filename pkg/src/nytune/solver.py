"""Closed-form Nystrom kernel ridge regression.

The coefficient solve is the m x m system

    (K_nm^T K_nm + n*lambda*K_mm + jitter*I) beta = K_nm^T Y

factorized by Cholesky with escalating jitter.  Nothing here ever
assembles an n x n matrix; the dense identities live in the test
oracles and in :func:`check_kernel_equivalence`, which is explicitly a
small-n diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import Dataset
from .kernels import Lengthscales, ShapeError, kernel_matrix
from .linalg import CholFactor, SingularSystemError, psd_pinv_factor

RESIDUAL_RTOL = 1e-8


@dataclass(frozen=True)
class HyperParams:
    """The full differentiable hyperparameter state.

    log_lambda is the log of the regularizer, ls the per-dimension
    log-lengthscales and Z the (m, d) inducing-point matrix.
    """

    log_lambda: float
    ls: Lengthscales
    Z: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=np.float64))
        if Z.shape[0] < 1 or Z.shape[1] != self.ls.d:
            raise ShapeError("Z must be (m, d) with m >= 1 matching ls")
        if not (np.isfinite(self.log_lambda) and np.all(np.isfinite(Z))):
            raise ValueError("hyperparameters must be finite")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "log_lambda", float(self.log_lambda))

    @property
    def lam(self) -> float:
        return float(np.exp(self.log_lambda))

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def pack(self) -> np.ndarray:
        """Flatten to (1 + d + m*d,) in the order (log_lambda, log_ell, Z)."""
        return np.concatenate([[self.log_lambda], self.ls.log_ell,
                               self.Z.ravel()])

    def unpack(self, vec: np.ndarray) -> "HyperParams":
        """Rebuild from a packed vector with this object's shapes."""
        vec = np.asarray(vec, dtype=np.float64)
        d, m = self.d, self.m
        if vec.size != 1 + d + m * d:
            raise ShapeError("packed vector has wrong length")
        return HyperParams(vec[0], Lengthscales(vec[1:1 + d]),
                           vec[1 + d:].reshape(m, d))

    def to_dict(self) -> dict:
        return {"log_lambda": self.log_lambda,
                "lambda": self.lam,
                "log_ell": self.ls.log_ell.tolist(),
                "Z": self.Z.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "HyperParams":
        return cls(obj["log_lambda"], Lengthscales(np.asarray(obj["log_ell"])),
                   np.asarray(obj["Z"]))


@dataclass(frozen=True)
class NkrrModel:
    """Fitted coefficients plus the hyperparameters that produced them."""

    beta: np.ndarray
    hp: HyperParams


class NkrrFactors:
    """Factorization cache for one (X, Y, hp) triple.

    ``always_jitter`` switches to the smooth surrogate used by the
    gradient engine (a base jitter is applied unconditionally so the
    factorized system is a differentiable function of the
    hyperparameters).
    """

    def __init__(self, X, Y, hp: HyperParams, *, always_jitter: bool = False,
                 jitter_rel: float | None = None):
        self.X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        self.Y = Y[:, None] if Y.ndim == 1 else Y
        if self.X.shape[0] != self.Y.shape[0]:
            raise ShapeError("X and Y row counts differ")
        if self.X.shape[1] != hp.d:
            raise ShapeError("X dimension does not match hyperparameters")
        self.hp = hp
        self.n = self.X.shape[0]
        self.m = hp.m
        self.c = self.n * hp.lam
        self.K = kernel_matrix(self.X, hp.Z, hp.ls)
        self.M = kernel_matrix(hp.Z, None, hp.ls)
        self.KtK = self.K.T @ self.K
        self.B = self.KtK + self.c * self.M
        kwargs = {} if jitter_rel is None else {"start_rel": jitter_rel}
        self.cholB = CholFactor(self.B, always_jitter=always_jitter, **kwargs)

    @property
    def jitter(self) -> float:
        return self.cholB.jitter

    @cached_property
    def KtY(self) -> np.ndarray:
        return self.K.T @ self.Y

    @cached_property
    def beta(self) -> np.ndarray:
        beta = self.cholB.solve(self.KtY)
        lhs = self.B @ beta + self.jitter * beta
        res = np.linalg.norm(lhs - self.KtY)
        ref = np.linalg.norm(self.KtY)
        if ref > 0 and res > RESIDUAL_RTOL * ref:
            raise SingularSystemError(self.jitter)
        return beta

    @cached_property
    def preds(self) -> np.ndarray:
        return self.K @ self.beta

    @cached_property
    def resid(self) -> np.ndarray:
        return self.Y - self.preds

    @cached_property
    def sq_norm_y(self) -> float:
        return float(np.sum(self.Y**2))

    @cached_property
    def data_term(self) -> float:
        """tr(Y^T K beta) = Y^T H Y."""
        return float(np.sum(self.KtY * self.beta))

    @cached_property
    def reg_risk(self) -> float:
        """Regularized empirical risk n^-1 Y^T (I - H) Y."""
        return (self.sq_norm_y - self.data_term) / self.n

    @cached_property
    def hnorm_sq(self) -> float:
        """Squared RKHS norm beta^T K_mm beta of the fitted function."""
        return float(np.sum(self.beta * (self.M @ self.beta)))

    @cached_property
    def mse(self) -> float:
        return float(np.sum(self.resid**2)) / self.n

    @cached_property
    def _deff_raw(self) -> float:
        # tr(K B^-1 K^T) as a blockwise Frobenius norm of L^-1 K^T; this
        # form stays accurate when B is nearly singular (rank-deficient Z)
        total = 0.0
        for start in range(0, self.n, 4096):
            half = self.cholB.half_solve(self.K[start:start + 4096].T)
            total += float(np.sum(half**2))
        return total

    @cached_property
    def effective_dimension(self) -> float:
        return float(np.clip(self._deff_raw, 0.0, min(self.m, self.n)))

    @cached_property
    def leverage(self) -> np.ndarray:
        """diag(H) with H = K B^-1 K^T."""
        half = self.cholB.half_solve(self.K.T)
        return np.einsum("ji,ji->i", half, half)

    @cached_property
    def mm_pinv(self):
        """(F, rank) with K_mm^+ = F F^T (Moore-Penrose, relative cutoff)."""
        return psd_pinv_factor(self.M)

    @cached_property
    def W(self) -> np.ndarray:
        """Whitened cross matrix: K_tilde = W W^T exactly (pinv branch)."""
        F, _ = self.mm_pinv
        return self.K @ F

    @cached_property
    def trace_ktilde(self) -> float:
        return float(np.sum(self.W**2))

    @cached_property
    def trace_gap(self) -> float:
        # tr(K) = n for the unit-diagonal Gaussian kernel
        return self.n - self.trace_ktilde

    def hat_apply(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        V2 = V[:, None] if V.ndim == 1 else V
        out = self.K @ self.cholB.solve(self.K.T @ V2)
        return out[:, 0] if V.ndim == 1 else out


def fit(data: Dataset, hp: HyperParams) -> NkrrModel:
    """Solve the regularized normal equations for the coefficient matrix."""
    fac = NkrrFactors(data.X, data.Y, hp)
    return NkrrModel(fac.beta, hp)


def predict(model: NkrrModel, Xq) -> np.ndarray:
    """Evaluate sum_j beta_j k(., z_j) at the query points."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
    if Xq.shape[1] != model.hp.d:
        raise ShapeError("query dimension does not match the model")
    return kernel_matrix(Xq, model.hp.Z, model.hp.ls) @ model.beta


def hat_apply(data: Dataset, hp: HyperParams, V) -> np.ndarray:
    """H V without forming H; identical code path to fit-then-predict."""
    fac = NkrrFactors(data.X, data.Y, hp)
    return fac.hat_apply(V)


def check_kernel_equivalence(data: Dataset, hp: HyperParams,
                             *, max_n: int = 200) -> float:
    """Max deviation between the two dense forms of the smoothing matrix.

    Assembles both (K_tilde + n*lambda*I)^-1 K_tilde and
    K_nm (K_nm^T K_nm + n*lambda*K_mm)^+ K_nm^T and returns the
    elementwise max absolute difference.  Diagnostic only; refuses large n.
    """
    if data.n > max_n:
        raise ValueError(f"diagnostic limited to n <= {max_n}")
    K = kernel_matrix(data.X, hp.Z, hp.ls)
    M = kernel_matrix(hp.Z, None, hp.ls)
    c = data.n * hp.lam
    F, _ = psd_pinv_factor(M)
    W = K @ F
    ktilde = W @ W.T
    lhs = np.linalg.solve(ktilde + c * np.eye(data.n), ktilde)
    rhs = K @ np.linalg.pinv(K.T @ K + c * M, hermitian=True) @ K.T
    return float(np.max(np.abs(lhs - rhs)))
