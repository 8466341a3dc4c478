"""Asymptotic covariance of the weighted estimator and dispersion matrices.

Given per-unit gradients at the fitted parameter and a sampling scheme, the
estimator's covariance has the sandwich form H^-1 V H^-1 where V depends on
the design family: sum(psi psi^T / mu_i) for with-replacement and multinomial
designs, and sum(psi psi^T (1/mu_i - 1)) without replacement, which vanishes
at a census.

The dispersion matrices defined here turn expected-distance objectives into
linear trace criteria: minimizing E[d(theta_hat)] is the same as minimizing
tr(Gamma M) for the matching M.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .config import DEFAULT
from .errors import InvalidInput, SingularHessian, Unsupported
from .linalg import as_symmetric, spd_inverse
from .sampling import DesignFamily, SamplingScheme


@dataclass(frozen=True)
class GradientSet:
    """Per-unit gradients and curvature of a problem at its fitted parameter.

    ``psi`` holds one gradient per row. Construction checks the first-order
    condition (columns of psi sum to nearly zero) and that the Hessian is
    positive definite, so downstream covariance algebra can rely on both.
    """

    psi: np.ndarray
    hessian: np.ndarray
    theta0: np.ndarray
    expected_hessian: np.ndarray | None = None

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim != 2 or psi.shape[0] < 1:
            raise InvalidInput(f"psi must be an N x p matrix, got shape {psi.shape}")
        if not np.all(np.isfinite(psi)):
            raise InvalidInput("psi contains non-finite entries")
        row_norms = np.linalg.norm(psi, axis=1)
        scale = float(row_norms.max())
        if scale > 0.0:
            imbalance = float(np.max(np.abs(psi.sum(axis=0))))
            if imbalance > DEFAULT.gradient_balance_rtol * scale:
                raise InvalidInput(
                    f"gradient columns sum to {imbalance:.3e}, which exceeds "
                    f"{DEFAULT.gradient_balance_rtol:.1e} of the largest row norm "
                    f"{scale:.3e}; gradients must be evaluated at a fitted parameter"
                )
        h = as_symmetric(self.hessian)
        if h.shape[0] != psi.shape[1]:
            raise InvalidInput(
                f"hessian is {h.shape[0]} x {h.shape[0]} but gradients have "
                f"{psi.shape[1]} columns"
            )
        min_eig = float(np.linalg.eigvalsh(h)[0])
        if min_eig <= 0.0:
            raise SingularHessian(
                f"hessian must be positive definite, min eigenvalue {min_eig:.3e}"
            )

    @property
    def n_units(self) -> int:
        return self.psi.shape[0]

    @property
    def n_params(self) -> int:
        return self.psi.shape[1]

    @cached_property
    def hessian_inv(self) -> np.ndarray:
        return spd_inverse(self.hessian)

    @cached_property
    def v_theta0(self) -> np.ndarray:
        """Total outer-product matrix sum(psi_i psi_i^T), the robust V(theta0)."""
        return as_symmetric(self.psi.T @ self.psi)


@dataclass(frozen=True)
class CovarianceReport:
    v: np.ndarray
    gamma: np.ndarray
    family: DesignFamily


class DispersionKind(enum.Enum):
    """Which matrix turns an expected distance into a trace objective."""

    ER = "d-er"
    OBSERVED_INFO = "observed-info"
    KL = "d-kl"
    EXPECTED_INFO = "expected-info"
    SANDWICH = "d-s"
    EXPLICIT = "explicit"


def gradients_at(problem, theta0) -> GradientSet:
    """Evaluate a risk problem's gradients and Hessians at a fitted parameter."""
    theta = np.asarray(theta0, dtype=float)
    psi = problem.unit_gradients(theta)
    hess = problem.hessian(theta, None)
    expected = problem.expected_hessian(theta) if problem.expected_hessian else None
    return GradientSet(psi=psi, hessian=hess, theta0=theta, expected_hessian=expected)


def v_matrix(grads: GradientSet, scheme: SamplingScheme) -> np.ndarray:
    """Design-dependent middle matrix V(mu; theta0) of the sandwich covariance."""
    if scheme.n_units != grads.n_units:
        raise InvalidInput(
            f"scheme covers {scheme.n_units} units, gradients cover {grads.n_units}"
        )
    if scheme.family is DesignFamily.PO_WOR:
        coef = 1.0 / scheme.mu - 1.0
    else:
        coef = 1.0 / scheme.mu
    v = grads.psi.T @ (grads.psi * coef[:, None])
    return as_symmetric(v)


def gamma(grads: GradientSet, scheme: SamplingScheme) -> CovarianceReport:
    """Sandwich covariance H^-1 V H^-1 for the scheme's design family."""
    v = v_matrix(grads, scheme)
    hinv = grads.hessian_inv
    g = as_symmetric(hinv @ v @ hinv)
    return CovarianceReport(v=v, gamma=g, family=scheme.family)


def dispersion_matrix(
    kind: DispersionKind,
    grads: GradientSet,
    explicit_sigma=None,
) -> np.ndarray:
    """Matrix M with E[distance] proportional to tr(Gamma M).

    ER and observed-information distances use the Hessian; KL and expected
    information use the model-based Hessian; the sandwich distance uses
    H V(theta0)^-1 H, the inverse of the robust covariance; an explicit
    dispersion matrix Sigma contributes its inverse.
    """
    if kind in (DispersionKind.ER, DispersionKind.OBSERVED_INFO):
        return as_symmetric(grads.hessian)
    if kind in (DispersionKind.KL, DispersionKind.EXPECTED_INFO):
        if grads.expected_hessian is None:
            raise Unsupported(
                f"{kind.value} dispersion needs an expected Hessian, which this "
                "problem does not provide"
            )
        return as_symmetric(grads.expected_hessian)
    if kind is DispersionKind.SANDWICH:
        v0_inv = spd_inverse(grads.v_theta0)
        h = grads.hessian
        return as_symmetric(h @ v0_inv @ h)
    if kind is DispersionKind.EXPLICIT:
        if explicit_sigma is None:
            raise InvalidInput("explicit dispersion requires the Sigma matrix")
        return spd_inverse(as_symmetric(explicit_sigma))
    raise InvalidInput(f"unknown dispersion kind {kind!r}")
