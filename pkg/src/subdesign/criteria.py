"""Design criteria: objective values, matrix derivatives, unit coefficients.

Every criterion maps the estimator covariance Gamma to a scalar. Linear
criteria (trace against a fixed matrix) are minimized in closed form; the
spectral ones (D, E, the q-norm family) enter a linearization loop instead.
Both paths reduce to per-unit coefficients

    c_i = || L^T H^-1 psi_i ||^2   with   L L^T = phi(Gamma),

where phi is the criterion's matrix derivative. The derivative of the
objective in the expected count mu_i is then -c_i / mu_i^2, which is what the
finite-difference tests pin down.

Normalization constants (1/p for the average-variance criteria, 1/m for a
p x m target matrix) are kept in both the value and the derivative so paired
criteria coincide exactly, not just up to scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import DEFAULT, NumericConfig
from .covariance import DispersionKind, GradientSet, dispersion_matrix, gamma
from .errors import (
    InvalidInput,
    NotDifferentiable,
    NotPSD,
    SingularMatrix,
)
from .linalg import as_symmetric, psd_factor, spd_inverse, sym_eigen
from .sampling import SamplingScheme

LINEAR_KINDS = frozenset({"A", "C", "L", "V", "Distance"})
NONLINEAR_KINDS = frozenset({"D", "E", "PhiQ"})


@dataclass(frozen=True)
class CriterionSpec:
    """One design criterion, fully parameterized.

    Exactly the fields relevant to ``kind`` are set: a target vector for C,
    a p x m target matrix for L, a feature Gram matrix for V, the exponent for
    PhiQ, and a dispersion kind (plus optional explicit Sigma) for Distance.
    """

    kind: str
    c: np.ndarray | None = None
    l_matrix: np.ndarray | None = None
    gram: np.ndarray | None = None
    q: float | None = None
    dispersion: DispersionKind | None = None
    explicit_sigma: np.ndarray | None = None

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def label(self) -> str:
        if self.kind == "C":
            return "c:" + ",".join(format(v, "g") for v in self.c)
        if self.kind == "PhiQ":
            return f"phi:{self.q:g}"
        if self.kind == "Distance":
            if self.dispersion is DispersionKind.EXPLICIT:
                return "d-explicit"
            return self.dispersion.value
        return self.kind


@dataclass(frozen=True)
class CoefficientSet:
    """Per-unit coefficients c_i driving the optimal allocation mu ~ sqrt(c).

    Coefficients are kept on their raw scale (the solver normalizes); zero
    entries are flagged because they make the optimal scheme infeasible,
    pushing the corresponding expected count to zero.
    """

    c: np.ndarray
    criterion: CriterionSpec
    at_scheme: SamplingScheme | None = None

    @property
    def zero_ids(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.c == 0.0))

    @property
    def has_zeros(self) -> bool:
        return bool(np.any(self.c == 0.0))


def a_opt() -> CriterionSpec:
    """Average parameter variance tr(Gamma)/p."""
    return CriterionSpec(kind="A")


def c_opt(c) -> CriterionSpec:
    """Variance of the linear combination c^T theta."""
    vec = np.asarray(c, dtype=float)
    if vec.ndim != 1 or vec.shape[0] < 1 or not np.all(np.isfinite(vec)):
        raise InvalidInput("c must be a finite non-empty vector")
    if np.all(vec == 0.0):
        raise InvalidInput("c must be non-zero")
    return CriterionSpec(kind="C", c=vec)


def l_opt(l_matrix) -> CriterionSpec:
    """Average variance of the m linear combinations in the columns of L."""
    mat = np.asarray(l_matrix, dtype=float)
    if mat.ndim == 1:
        mat = mat[:, None]
    if mat.ndim != 2 or not np.all(np.isfinite(mat)):
        raise InvalidInput("L must be a finite p x m matrix")
    if np.all(mat == 0.0):
        raise InvalidInput("L must be non-zero")
    return CriterionSpec(kind="L", l_matrix=mat)


def v_opt(gram) -> CriterionSpec:
    """Average prediction variance against a feature Gram matrix."""
    g = as_symmetric(gram)
    return CriterionSpec(kind="V", gram=g)


def d_opt() -> CriterionSpec:
    """Generalized variance det(Gamma)^(1/p)."""
    return CriterionSpec(kind="D")


def e_opt() -> CriterionSpec:
    """Largest eigenvalue of Gamma."""
    return CriterionSpec(kind="E")


def phi_q(q: float) -> CriterionSpec:
    """Eigenvalue q-norm (tr(Gamma^q)/p)^(1/q); q=1 is A, large q approaches E."""
    if not np.isfinite(q) or q <= 0:
        raise InvalidInput(f"phi exponent must be positive, got {q}")
    return CriterionSpec(kind="PhiQ", q=float(q))


def distance_opt(kind: DispersionKind, explicit_sigma=None) -> CriterionSpec:
    """Expected-distance criterion tr(Gamma M)/p for the dispersion matrix M."""
    if kind is DispersionKind.EXPLICIT:
        if explicit_sigma is None:
            raise InvalidInput("explicit dispersion requires the Sigma matrix")
        return CriterionSpec(
            kind="Distance",
            dispersion=kind,
            explicit_sigma=as_symmetric(explicit_sigma),
        )
    return CriterionSpec(kind="Distance", dispersion=kind)


def _static_phi(spec: CriterionSpec, p: int, grads: GradientSet | None) -> np.ndarray:
    """Constant derivative matrix of a linear criterion."""
    if spec.kind == "A":
        return np.eye(p) / p
    if spec.kind == "C":
        if spec.c.shape[0] != p:
            raise InvalidInput(f"c has length {spec.c.shape[0]}, expected {p}")
        return np.outer(spec.c, spec.c)
    if spec.kind == "L":
        if spec.l_matrix.shape[0] != p:
            raise InvalidInput(
                f"L has {spec.l_matrix.shape[0]} rows, expected {p}"
            )
        return (spec.l_matrix @ spec.l_matrix.T) / spec.l_matrix.shape[1]
    if spec.kind == "V":
        if spec.gram.shape[0] != p:
            raise InvalidInput(f"Gram matrix is {spec.gram.shape}, expected {p} x {p}")
        return spec.gram / p
    if spec.kind == "Distance":
        if grads is None:
            raise InvalidInput(
                f"{spec.label} needs the problem's gradients to build its "
                "dispersion matrix"
            )
        m = dispersion_matrix(spec.dispersion, grads, spec.explicit_sigma)
        return m / p
    raise InvalidInput(f"{spec.kind} has no constant derivative matrix")


def _positive_spectrum(gam: np.ndarray, what: str, config: NumericConfig):
    pair = sym_eigen(gam, config)
    top = float(pair.values[0])
    if top <= 0.0 or float(pair.values[-1]) <= config.singular_rtol * top:
        raise SingularMatrix(
            f"{what} needs a full-rank covariance; min eigenvalue "
            f"{float(pair.values[-1]):.3e}",
            min_eigenvalue=float(pair.values[-1]),
        )
    return pair


def phi_value(
    spec: CriterionSpec,
    gam,
    grads: GradientSet | None = None,
    config: NumericConfig = DEFAULT,
) -> float:
    """Scalar objective of the criterion at the covariance matrix."""
    g = as_symmetric(gam)
    p = g.shape[0]
    if spec.is_linear:
        phi = _static_phi(spec, p, grads)
        return float(np.sum(g * phi))
    if spec.kind == "D":
        pair = _positive_spectrum(g, "D-optimality", config)
        return float(np.exp(np.mean(np.log(pair.values))))
    if spec.kind == "E":
        return float(np.linalg.eigvalsh(g)[-1])
    if spec.kind == "PhiQ":
        pair = _positive_spectrum(g, f"phi:{spec.q:g}", config)
        return float((np.sum(pair.values**spec.q) / p) ** (1.0 / spec.q))
    raise InvalidInput(f"unknown criterion kind {spec.kind!r}")


def objective_for_derivative(
    spec: CriterionSpec,
    gam,
    grads: GradientSet | None = None,
    config: NumericConfig = DEFAULT,
) -> float:
    """The objective whose gradient the coefficients represent.

    Identical to ``phi_value`` except for D, where the derivative matrix
    Gamma^-1 belongs to the log-determinant form; both forms share their
    minimizer, so the solver tracks this one.
    """
    if spec.kind == "D":
        pair = _positive_spectrum(as_symmetric(gam), "D-optimality", config)
        return float(np.sum(np.log(pair.values)))
    return phi_value(spec, gam, grads, config)


def phi_matrix_derivative(
    spec: CriterionSpec,
    gam,
    grads: GradientSet | None = None,
    config: NumericConfig = DEFAULT,
) -> np.ndarray:
    """Derivative matrix phi(Gamma) of the objective with respect to Gamma."""
    g = as_symmetric(gam)
    p = g.shape[0]
    if spec.is_linear:
        return _static_phi(spec, p, grads)
    if spec.kind == "D":
        pair = _positive_spectrum(g, "D-optimality", config)
        q_mat = pair.vectors
        inv = (q_mat / pair.values) @ q_mat.T
        return as_symmetric(inv)
    if spec.kind == "E":
        pair = sym_eigen(g, config)
        top = float(pair.values[0])
        if top <= 0.0:
            raise NotDifferentiable("E-optimality derivative undefined at Gamma = 0")
        gap = (top - float(pair.values[1])) / top if p > 1 else 1.0
        if gap < config.eigen_gap_error:
            raise NotDifferentiable(
                f"leading eigenvalue is numerically repeated (relative gap "
                f"{gap:.2e}); E-optimality is not differentiable here"
            )
        if gap < config.eigen_gap_warn:
            warnings.warn(
                f"E-optimality eigen-gap {gap:.2e} is small; the derivative "
                "is ill-conditioned",
                stacklevel=2,
            )
        v1 = pair.vectors[:, 0]
        return np.outer(v1, v1)
    if spec.kind == "PhiQ":
        pair = _positive_spectrum(g, f"phi:{spec.q:g}", config)
        q = spec.q
        trace_q = float(np.sum(pair.values**q))
        scale = p ** (-1.0 / q) * trace_q ** (1.0 / q - 1.0)
        q_mat = pair.vectors
        power = (q_mat * pair.values ** (q - 1.0)) @ q_mat.T
        return as_symmetric(scale * power)
    raise InvalidInput(f"unknown criterion kind {spec.kind!r}")


def coefficients(
    spec: CriterionSpec,
    grads: GradientSet,
    at: SamplingScheme | None = None,
    config: NumericConfig = DEFAULT,
) -> CoefficientSet:
    """Per-unit coefficients c_i = ||L^T H^-1 psi_i||^2 for the criterion.

    Linear criteria have a fixed L; the spectral ones are linearized at the
    scheme ``at``, which is therefore required for them.
    """
    p = grads.n_params
    if spec.is_linear:
        phi = _static_phi(spec, p, grads)
    else:
        if at is None:
            raise InvalidInput(
                f"{spec.label} is linearized around a scheme; pass the current "
                "iterate as `at`"
            )
        report = gamma(grads, at)
        phi = phi_matrix_derivative(spec, report.gamma, grads, config)
    ell = psd_factor(phi, config=config)
    t = grads.psi @ (grads.hessian_inv @ ell)
    c = np.sum(t * t, axis=1)
    return CoefficientSet(c=c, criterion=spec, at_scheme=at)


def leverage(X, theta, clamp: float = 1e-12) -> np.ndarray:
    """Hat-matrix diagonal of a logistic fit: W_ii x_i^T (X^T W X)^-1 x_i."""
    x = np.asarray(X, dtype=float)
    th = np.asarray(theta, dtype=float)
    if x.ndim != 2 or th.shape != (x.shape[1],):
        raise InvalidInput("X must be N x p and theta length p")
    t = x @ th
    pr = np.empty_like(t)
    pos = t >= 0
    pr[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    pr[~pos] = et / (1.0 + et)
    pr = np.clip(pr, clamp, 1.0 - clamp)
    w = pr * (1.0 - pr)
    h_inv = spd_inverse((x * w[:, None]).T @ x)
    return w * np.sum((x @ h_inv) * x, axis=1)


def anticipated_coefficients(model_kind: str, **aux) -> CoefficientSet:
    """Coefficients with unobserved responses replaced by model expectations.

    The exact c_i depend on outcomes that are unknown before sampling; taking
    expectations under a working model yields strictly positive surrogates
    whenever the assumed dispersions are positive, so no unit is starved of
    selection mass. Auxiliary inputs by model:

    * ``lognormal``: weights, predictions (log scale), dispersions, center
      (preliminary location). Anticipates the variance of the location
      component: c_i = w_i^2 ((pred_i - center)^2 + disp_i^2).
    * ``qblogit``: X, theta, deflate. Anticipates the ER distance via the
      logistic leverage h_ii, deflated to h_ii (1 - h_ii) when requested.
    * ``finpop``: weights, predictions (N x m), center, v (m x m), and
      dispersion_matrices (one m x m PSD block per unit, or a single shared
      block). Anticipates the standardized quadratic form:
      c_i = w_i^2 ((pred_i - center)^T V^-1 (pred_i - center) + tr(V^-1 Disp_i)).
    """
    if model_kind == "lognormal":
        w = np.asarray(aux["weights"], dtype=float)
        pred = np.asarray(aux["predictions"], dtype=float)
        disp = np.asarray(aux["dispersions"], dtype=float)
        center = float(aux["center"])
        if not (w.shape == pred.shape == disp.shape) or w.ndim != 1:
            raise InvalidInput("weights, predictions, dispersions must be equal-length vectors")
        if np.any(disp <= 0.0) or not np.all(np.isfinite(disp)):
            raise InvalidInput("dispersions must be strictly positive")
        c = w**2 * ((pred - center) ** 2 + disp**2)
        spec = c_opt(np.array([1.0, 0.0]))
        return CoefficientSet(c=c, criterion=spec)
    if model_kind == "qblogit":
        h = leverage(aux["X"], aux["theta"])
        if aux.get("deflate", False):
            c = h * (1.0 - h)
        else:
            c = h
        return CoefficientSet(c=c, criterion=distance_opt(DispersionKind.ER))
    if model_kind == "finpop":
        w = np.asarray(aux["weights"], dtype=float)
        pred = np.asarray(aux["predictions"], dtype=float)
        center = np.asarray(aux["center"], dtype=float)
        v = as_symmetric(aux["v"])
        if pred.ndim == 1:
            pred = pred[:, None]
        n, m = pred.shape
        if w.shape != (n,) or center.shape != (m,) or v.shape != (m, m):
            raise InvalidInput("inconsistent shapes among weights, predictions, center, v")
        v_inv = spd_inverse(v)
        blocks = np.asarray(aux["dispersion_matrices"], dtype=float)
        if blocks.shape == (m, m):
            blocks = np.broadcast_to(blocks, (n, m, m))
        if blocks.shape != (n, m, m):
            raise InvalidInput(
                f"dispersion_matrices must be ({n}, {m}, {m}) or ({m}, {m}), "
                f"got {blocks.shape}"
            )
        for i in range(n):
            block = 0.5 * (blocks[i] + blocks[i].T)
            min_eig = float(np.linalg.eigvalsh(block)[0])
            if min_eig < -DEFAULT.psd_tol * max(np.linalg.norm(block, "fro"), 1.0):
                raise NotPSD(
                    f"dispersion block {i} has min eigenvalue {min_eig:.3e}"
                )
        resid = pred - center
        quad = np.sum((resid @ v_inv) * resid, axis=1)
        traces = np.einsum("ij,nji->n", v_inv, blocks)
        c = w**2 * (quad + traces)
        return CoefficientSet(c=c, criterion=distance_opt(DispersionKind.SANDWICH))
    raise InvalidInput(f"unknown model kind {model_kind!r}")


def parse_criterion(token: str, problem=None, base_dir: str = ".") -> CriterionSpec:
    """Build a CriterionSpec from its text form.

    Recognized tokens: ``A``, ``c`` or ``c:v1,...,vp``, ``L:@file.csv``, ``V``,
    ``D``, ``E``, ``phi:q``, ``d-er``, ``d-kl``, ``d-s``. A bare ``c`` targets
    the first parameter coordinate; ``V`` derives its Gram matrix from the
    problem, which must then be supplied.
    """
    text = token.strip()
    low = text.lower()
    if low == "a":
        return a_opt()
    if low == "d":
        return d_opt()
    if low == "e":
        return e_opt()
    if low == "v":
        if problem is None:
            raise InvalidInput("criterion V needs the model to build its Gram matrix")
        return v_opt(default_gram(problem))
    if low == "c":
        if problem is None:
            raise InvalidInput(
                "bare criterion c needs the model to size its target vector"
            )
        vec = np.zeros(problem.n_params)
        vec[0] = 1.0
        return c_opt(vec)
    if low.startswith("c:"):
        try:
            vec = np.array([float(v) for v in text[2:].split(",")])
        except ValueError:
            raise InvalidInput(f"cannot parse c vector from {token!r}")
        return c_opt(vec)
    if low.startswith("l:@"):
        import os

        path = text[3:]
        full = path if os.path.isabs(path) else os.path.join(base_dir, path)
        try:
            mat = np.loadtxt(full, delimiter=",", ndmin=2)
        except OSError:
            raise InvalidInput(f"cannot read L matrix from {full!r}")
        return l_opt(mat)
    if low.startswith("phi:"):
        try:
            q = float(text[4:])
        except ValueError:
            raise InvalidInput(f"cannot parse phi exponent from {token!r}")
        return phi_q(q)
    if low == "d-er":
        return distance_opt(DispersionKind.ER)
    if low == "d-kl":
        return distance_opt(DispersionKind.KL)
    if low == "d-s":
        return distance_opt(DispersionKind.SANDWICH)
    raise InvalidInput(f"unknown criterion token {token!r}")


def default_gram(problem) -> np.ndarray:
    """Feature Gram matrix for V-optimality under the empirical measure.

    Logistic models average x x^T over the design rows; the location/scale
    model predicts the location only; the population-mean model predicts the
    full parameter vector.
    """
    if problem.kind == "qblogit":
        x = problem.data["X"]
        return as_symmetric(x.T @ x / x.shape[0])
    if problem.kind == "lognormal":
        return np.diag([1.0, 0.0])
    if problem.kind == "finpop":
        return np.eye(problem.n_params)
    raise InvalidInput(f"no default Gram matrix for model kind {problem.kind!r}")
