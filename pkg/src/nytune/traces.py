"""Scalable approximations of the two trace terms.

Hutchinson estimation replaces tr(A) by t^-1 sum_i r_i^T A r_i with
zero-mean unit-variance probes; the subsample estimator replaces
tr(K_tilde) by an unbiased row subsample.  Probes are drawn once per
optimization run and reused at every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Dataset
from .solver import HyperParams, NkrrFactors


class ProbeKind(str, Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"


@dataclass(frozen=True)
class ProbeSet:
    """t fixed random probe vectors with their RNG seed provenance.

    Construction validates that the probes plausibly come from the
    declared zero-mean unit-variance distribution, so deterministic
    vectors such as sqrt(n) * e_i are rejected.
    """

    R: np.ndarray
    kind: ProbeKind
    seed: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] < 1 or R.shape[1] < 1:
            raise ValueError("probes must form an (n, t) matrix")
        kind = ProbeKind(self.kind)
        if kind == ProbeKind.RADEMACHER:
            if not np.all(np.abs(R) == 1.0):
                raise ValueError("rademacher probes must have +/-1 entries")
        else:
            if np.max(np.abs(R)) > 7.0:
                raise ValueError(
                    "entry beyond 7 standard deviations; not a plausible "
                    "standard-normal draw")
            n = R.shape[0]
            if n >= 100:
                means = R.mean(axis=0)
                variances = R.var(axis=0)
                if np.any(np.abs(means) > 6.0 / np.sqrt(n)):
                    raise ValueError("probe column mean too far from zero")
                if np.any(np.abs(variances - 1.0) > 6.0 * np.sqrt(2.0 / n)):
                    raise ValueError("probe column variance too far from one")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "kind", kind)

    @property
    def n(self) -> int:
        return self.R.shape[0]

    @property
    def t(self) -> int:
        return self.R.shape[1]


def make_probes(n: int, t: int, kind: ProbeKind = ProbeKind.GAUSSIAN,
                seed: int = 0) -> ProbeSet:
    """Deterministic probe draw; the same seed gives identical probes."""
    if n < 1 or t < 1:
        raise ValueError("n and t must be >= 1")
    rng = np.random.default_rng(seed)
    kind = ProbeKind(kind)
    if kind == ProbeKind.GAUSSIAN:
        R = rng.standard_normal((n, t))
    else:
        R = rng.integers(0, 2, size=(n, t)).astype(np.float64) * 2.0 - 1.0
    return ProbeSet(R, kind, seed)


def _check_probes(data: Dataset, probes: ProbeSet):
    if probes.n != data.n:
        raise ValueError(f"probes have {probes.n} rows, data has {data.n}")


def ste_effective_dimension(data: Dataset, hp: HyperParams,
                            probes: ProbeSet) -> float:
    """Hutchinson estimate of the effective dimension.

    Runs the coefficient solve with the probes in place of the labels and
    contracts against K_nm^T R; cost O(n m t) beyond one factorization.
    """
    _check_probes(data, probes)
    fac = NkrrFactors(data.X, data.Y, hp)
    V = fac.K.T @ probes.R
    half = fac.cholB.half_solve(V)
    return float(np.sum(half**2)) / probes.t


def ste_trace_ktilde(data: Dataset, hp: HyperParams,
                     probes: ProbeSet) -> float:
    """Hutchinson estimate of tr(K_tilde); n minus this estimates the gap."""
    _check_probes(data, probes)
    fac = NkrrFactors(data.X, data.Y, hp)
    F, _ = fac.mm_pinv
    half = F.T @ (fac.K.T @ probes.R)
    return float(np.sum(half**2)) / probes.t


def subsample_trace_ktilde(data: Dataset, hp: HyperParams, p: int,
                           seed: int = 0) -> float:
    """Row-subsample estimate (n/p) tr(K_pm K_mm^+ K_pm^T).

    Uniform sampling without replacement makes it unbiased; cost
    O(p m^2 + m^3), independent of n once the rows are drawn.
    """
    if p < 1 or p > data.n:
        raise ValueError(f"subsample size must be in [1, {data.n}]")
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(data.n, size=p, replace=False))
    from .kernels import kernel_matrix
    from .linalg import psd_pinv_factor
    Kpm = kernel_matrix(data.X[rows], hp.Z, hp.ls)
    F, _ = psd_pinv_factor(kernel_matrix(hp.Z, None, hp.ls))
    return float(data.n / p * np.sum((Kpm @ F) ** 2))
