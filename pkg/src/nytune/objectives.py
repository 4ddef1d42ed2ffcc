"""The six hyperparameter-tuning objectives, evaluated exactly.

Every objective returns an :class:`ObjectiveReport` whose ``value`` can be
recomputed from its term breakdown (checked by the property tests).  All
evaluation goes through the m x m factorizations of
:class:`~nytune.solver.NkrrFactors`; trace terms that need the
Moore-Penrose inverse of K_mm take the eigendecomposition branch so
rank-deficient inducing points are handled exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset
from .solver import HyperParams, NkrrFactors

SGPR_MAX_N = 20000

TERM_KEYS = ("data_fit", "complexity", "trace_gap", "regularizer",
             "noise_scale")


class ObjectiveId(str, Enum):
    HOLD_OUT = "hold-out"
    LOOCV = "loocv"
    GCV = "gcv"
    CREG = "creg"
    SGPR = "sgpr"
    PROP = "prop"


class DegenerateLeverageError(ValueError):
    """A leverage H_ii reached 1; the LOOCV ratio is undefined."""

    def __init__(self, index: int, value: float):
        self.index = index
        super().__init__(f"leverage H[{index},{index}] = {value:.17g} >= 1")


class DegenerateTraceError(ValueError):
    """tr(I - H) vanished; the GCV denominator is undefined."""


class SgprScaleError(ValueError):
    """SGPR log-determinant evaluation refused beyond the exact-size cap."""


@dataclass(frozen=True)
class ObjectiveReport:
    """Scalar objective value with its per-term breakdown.

    ``terms`` only stores the terms the objective uses (absent means
    zero); ``meta`` carries the constants (n, lambda, reg_factor) the
    documented recombination needs.
    """

    objective_id: ObjectiveId
    value: float
    terms: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def term(self, key: str) -> float:
        return float(self.terms.get(key, 0.0))

    def recombined_value(self) -> float:
        """Recompute ``value`` from the term breakdown.

        hold-out / loocv / gcv:  data_fit
        creg:  data_fit + complexity
        sgpr:  complexity + data_fit + trace_gap / (n lambda)
        prop:  complexity + (2/(n lambda)) trace_gap data_fit
               + 2 data_fit - (2 - reg_factor) regularizer
        """
        oid = self.objective_id
        if oid in (ObjectiveId.HOLD_OUT, ObjectiveId.LOOCV, ObjectiveId.GCV):
            return self.term("data_fit")
        if oid == ObjectiveId.CREG:
            return self.term("data_fit") + self.term("complexity")
        c = self.meta["n"] * self.meta["lambda"]
        if oid == ObjectiveId.SGPR:
            return (self.term("complexity") + self.term("data_fit")
                    + self.term("trace_gap") / c)
        reg_factor = self.meta.get("reg_factor", 2)
        return (self.term("complexity")
                + (2.0 / c) * self.term("trace_gap") * self.term("data_fit")
                + 2.0 * self.term("data_fit")
                - (2 - reg_factor) * self.term("regularizer"))


def _tuning_factors(data: Dataset, hp: HyperParams) -> NkrrFactors:
    return NkrrFactors(data.X, data.Y, hp)


def effective_dimension(data: Dataset, hp: HyperParams) -> float:
    """tr((K_tilde + n*lambda*I)^-1 K_tilde), via the m x m identity."""
    return _tuning_factors(data, hp).effective_dimension


def trace_gap(data: Dataset, hp: HyperParams) -> float:
    """tr(K - K_tilde) >= 0; uses k(x, x) = 1 so tr(K) = n."""
    return _tuning_factors(data, hp).trace_gap


def eval_holdout(data: Dataset, hp: HyperParams) -> ObjectiveReport:
    """Mean squared validation error of the model fitted on the train part."""
    if data.split is None or data.split.val.size == 0:
        raise ValueError("hold-out objective needs a train/validation split")
    tr = data.train_part()
    va = data.val_part()
    fac = NkrrFactors(tr.X, tr.Y, hp)
    from .kernels import kernel_matrix
    resid = kernel_matrix(va.X, hp.Z, hp.ls) @ fac.beta - va.Y
    value = float(np.sum(resid**2)) / va.n
    return ObjectiveReport(ObjectiveId.HOLD_OUT, value,
                           {"data_fit": value},
                           {"n": tr.n, "lambda": hp.lam, "n_val": va.n})


def eval_loocv(data: Dataset, hp: HyperParams) -> ObjectiveReport:
    """Leave-one-out shortcut: mean of ((y_i - f(x_i)) / (1 - H_ii))^2."""
    fac = _tuning_factors(data, hp)
    h = fac.leverage
    worst = int(np.argmax(h))
    if h[worst] >= 1.0 - 1e-12:
        raise DegenerateLeverageError(worst, float(h[worst]))
    ratios = np.sum(fac.resid**2, axis=1) / (1.0 - h) ** 2
    value = float(ratios.mean())
    return ObjectiveReport(ObjectiveId.LOOCV, value, {"data_fit": value},
                           {"n": fac.n, "lambda": hp.lam})


def eval_gcv(data: Dataset, hp: HyperParams) -> ObjectiveReport:
    """LOOCV with the leverage replaced by its average tr(I - H)/n."""
    fac = _tuning_factors(data, hp)
    tau = fac.n - fac.effective_dimension
    if tau <= 1e-12:
        raise DegenerateTraceError(f"tr(I - H) = {tau:.3e} <= 0")
    value = fac.n * float(np.sum(fac.resid**2)) / tau**2
    return ObjectiveReport(ObjectiveId.GCV, value, {"data_fit": value},
                           {"n": fac.n, "lambda": hp.lam})


def eval_creg(data: Dataset, hp: HyperParams,
              sigma2: float = 1.0) -> ObjectiveReport:
    """Training MSE plus the covariance penalty (2 sigma^2 / n) d_eff."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    fac = _tuning_factors(data, hp)
    complexity = (2.0 * sigma2 / fac.n) * fac.effective_dimension
    value = fac.mse + complexity
    return ObjectiveReport(
        ObjectiveId.CREG, value,
        {"data_fit": fac.mse, "complexity": complexity,
         "noise_scale": sigma2},
        {"n": fac.n, "lambda": hp.lam})


def eval_sgpr(data: Dataset, hp: HyperParams) -> ObjectiveReport:
    """Variational GP bound: logdet + quadratic data fit + trace penalty.

    The log-determinant is computed through the m x m identity
    logdet(K_tilde + c I) = (n - r) log c + logdet(W^T W + c I_r) with
    K_tilde = W W^T; exact evaluation is refused beyond n = 20000.
    """
    if data.n > SGPR_MAX_N:
        raise SgprScaleError(
            f"exact SGPR evaluation capped at n <= {SGPR_MAX_N}, got {data.n}")
    fac = _tuning_factors(data, hp)
    c = fac.c
    W = fac.W
    r = W.shape[1]
    G = W.T @ W + c * np.eye(r)
    cG = cho_factor(G, lower=True)
    logdet = (fac.n - r) * np.log(c) + 2.0 * float(
        np.sum(np.log(np.diag(cG[0]))))
    WtY = W.T @ fac.Y
    quad = (fac.sq_norm_y - float(np.sum(WtY * cho_solve(cG, WtY)))) / c
    tg = fac.trace_gap
    value = logdet + quad + tg / c
    return ObjectiveReport(
        ObjectiveId.SGPR, value,
        {"complexity": logdet, "data_fit": quad, "trace_gap": tg},
        {"n": fac.n, "lambda": hp.lam})


def eval_prop(data: Dataset, hp: HyperParams, sigma2: float = 1.0,
              reg_factor: int = 2) -> ObjectiveReport:
    """Penalized-complexity objective: effective dimension, approximation
    gap times regularized risk, and the regularized risk itself.

    ``sigma2`` defaults to 1 (standardized labels bound the noise);
    ``reg_factor`` in {1, 2} selects the weight of the RKHS-norm part of
    the final risk term.
    """
    if reg_factor not in (1, 2):
        raise ValueError("reg_factor must be 1 or 2")
    fac = _tuning_factors(data, hp)
    c = fac.c
    deff = fac.effective_dimension
    tg = fac.trace_gap
    risk = fac.reg_risk
    regularizer = hp.lam * fac.hnorm_sq
    complexity = (2.0 * sigma2 / fac.n) * deff
    value = (complexity + (2.0 / c) * tg * risk + 2.0 * risk
             - (2 - reg_factor) * regularizer)
    return ObjectiveReport(
        ObjectiveId.PROP, value,
        {"complexity": complexity, "trace_gap": tg, "data_fit": risk,
         "regularizer": regularizer, "noise_scale": sigma2},
        {"n": fac.n, "lambda": hp.lam, "reg_factor": reg_factor})


def evaluate(objective_id, data: Dataset, hp: HyperParams, *,
             sigma2: float = 1.0, reg_factor: int = 2) -> ObjectiveReport:
    """Dispatch to one of the six objectives."""
    oid = ObjectiveId(objective_id)
    if oid == ObjectiveId.HOLD_OUT:
        return eval_holdout(data, hp)
    if oid == ObjectiveId.LOOCV:
        return eval_loocv(data, hp)
    if oid == ObjectiveId.GCV:
        return eval_gcv(data, hp)
    if oid == ObjectiveId.CREG:
        return eval_creg(data, hp, sigma2)
    if oid == ObjectiveId.SGPR:
        return eval_sgpr(data, hp)
    return eval_prop(data, hp, sigma2, reg_factor)
