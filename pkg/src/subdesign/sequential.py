"""Multi-stage subsampling with pooled estimation.

Stage 1 draws uniformly because no estimate exists yet. Every later stage
fits an auxiliary model to the outcomes revealed so far, anticipates the
allocation coefficients for the units that are still unobserved, and draws
from the resulting scheme. Estimation always pools all stages through a
single inverse-probability weighted fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .criteria import CoefficientSet, CriterionSpec, anticipated_coefficients
from .errors import InvalidInput, SubdesignError, StageFailure, Unsupported
from .models import FitResult, RiskProblem, multiplier_fit
from .sampling import DesignFamily, DrawResult, SamplingScheme, draw, uniform_scheme
from .solver import l_optimal_scheme

SIGMA_FLOOR = 1e-6
COV_EIGEN_FLOOR = 1e-8


@dataclass(frozen=True)
class AuxConfig:
    """Side information available before outcomes are revealed.

    columns : optional (N, k) matrix of predictors for the location model
        used with log-scale outcomes.
    groups : optional (N,) integer labels; group means and a pooled
        within-group covariance stand in for unseen multivariate outcomes.
    deflate : shrink logistic leverage h to h(1-h) when anticipating
        fraction-outcome designs.
    """

    columns: np.ndarray | None = None
    groups: np.ndarray | None = None
    deflate: bool = False

    def __post_init__(self):
        if self.columns is not None:
            cols = np.atleast_2d(np.asarray(self.columns, dtype=float))
            if cols.ndim != 2 or not np.all(np.isfinite(cols)):
                raise InvalidInput("auxiliary columns must be a finite 2-d array")
            object.__setattr__(self, "columns", cols)
        if self.groups is not None:
            g = np.asarray(self.groups)
            if g.ndim != 1:
                raise InvalidInput("group labels must be a 1-d array")
            object.__setattr__(self, "groups", g)


@dataclass(frozen=True)
class StageRecord:
    """Everything produced by one sampling stage."""

    k: int
    scheme: SamplingScheme
    draw: DrawResult
    theta_hat: np.ndarray = field(repr=False)
    m_k: int

    def __post_init__(self):
        theta = np.asarray(self.theta_hat, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta_hat", theta)


def stage_seed(master_seed: int, k: int) -> int:
    """Deterministic per-stage seed derived from the master seed."""
    ss = np.random.SeedSequence(entropy=[int(master_seed), int(k)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def pooled_multipliers(records) -> np.ndarray:
    """Aggregate stage draws into one weight vector.

    Each stage contributes its inverse-probability multipliers S_i / mu_i,
    weighted by that stage's share n_j / m_k of the cumulative budget.
    """
    if not records:
        raise InvalidInput("need at least one stage record")
    sizes = np.array([float(r.scheme.budget_n) for r in records])
    m_k = sizes.sum()
    u = np.zeros(records[0].scheme.n_units)
    for rec, n_j in zip(records, sizes):
        u += (n_j / m_k) * rec.draw.counts / rec.scheme.mu
    return u


def pooled_risk(records, problem: RiskProblem, theta) -> float:
    """Value of the pooled weighted risk at theta."""
    u = pooled_multipliers(records)
    return float(u @ problem.unit_losses(np.asarray(theta, dtype=float)))


def pooled_estimate(
    records,
    problem: RiskProblem,
    theta_init=None,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> FitResult:
    """Fit theta on the stage-share weighted combination of all draws."""
    u = pooled_multipliers(records)
    return multiplier_fit(problem, u, theta_init, tol, max_iter)


def _selected_mask(records) -> np.ndarray:
    total = np.zeros(records[0].scheme.n_units)
    for rec in records:
        total += rec.draw.counts
    return total > 0


def _lognormal_aux(records, problem, config):
    sel = _selected_mask(records)
    ylog = np.log(np.asarray(problem.data["y"], dtype=float))
    n = problem.n_units
    theta = records[-1].theta_hat
    cols = config.columns if config is not None else None
    if cols is not None and cols.shape[0] != n:
        raise InvalidInput(f"auxiliary columns cover {cols.shape[0]} units, expected {n}")

    if cols is None:
        design = np.ones((n, 1))
    else:
        design = np.column_stack([np.ones(n), cols])
    x_sel = design[sel]
    y_sel = ylog[sel]
    coef, _, rank, _ = np.linalg.lstsq(x_sel, y_sel, rcond=None)
    if rank < design.shape[1]:
        warnings.warn(
            "degenerate auxiliary regression, falling back to the global mean",
            RuntimeWarning,
        )
        pred = np.full(n, float(y_sel.mean()))
        resid = y_sel - y_sel.mean()
    else:
        pred = design @ coef
        resid = y_sel - x_sel @ coef
    sigma = max(float(np.sqrt(np.mean(resid**2))), SIGMA_FLOOR)
    return {
        "weights": problem.weights,
        "predictions": pred,
        "dispersions": np.full(n, sigma),
        "center": float(theta[0]),
    }


def _finpop_aux(records, problem, config):
    sel = _selected_mask(records)
    y = np.asarray(problem.data["y"], dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, m = y.shape
    theta = records[-1].theta_hat
    groups = config.groups if config is not None else None

    if groups is None:
        base = y[sel].mean(axis=0)
        pred = np.tile(base, (n, 1))
        resid = y[sel] - base
    else:
        if groups.shape != (n,):
            raise InvalidInput(f"group labels cover {groups.shape} units, expected ({n},)")
        global_mean = y[sel].mean(axis=0)
        pred = np.tile(global_mean, (n, 1))
        resid_rows = []
        missing = 0
        for label in np.unique(groups):
            in_group = groups == label
            seen = in_group & sel
            if not np.any(seen):
                missing += 1
                continue
            mean = y[seen].mean(axis=0)
            pred[in_group] = mean
            resid_rows.append(y[seen] - mean)
        if missing:
            warnings.warn(
                f"{missing} group(s) have no sampled units yet, using the global mean",
                RuntimeWarning,
            )
        resid = np.vstack(resid_rows) if resid_rows else y[sel] - global_mean

    cov = resid.T @ resid / max(len(resid), 1)
    cov = 0.5 * (cov + cov.T)
    min_eig = float(np.linalg.eigvalsh(cov)[0])
    if min_eig < COV_EIGEN_FLOOR:
        cov = cov + (COV_EIGEN_FLOOR - min_eig) * np.eye(m)

    w = problem.weights
    centered = pred - theta
    v_hat = (w[:, None] ** 2 * centered).T @ centered
    v_hat += float(np.sum(w**2)) * cov
    v_hat = 0.5 * (v_hat + v_hat.T)
    return {
        "weights": w,
        "predictions": pred,
        "center": theta,
        "v": v_hat,
        "dispersion_matrices": cov,
    }


def update_aux(records, problem: RiskProblem, config: AuxConfig | None = None) -> dict:
    """Refresh the auxiliary inputs that anticipation needs.

    Only outcomes of units selected in some stage are consulted; predictions
    cover the whole population. The returned mapping feeds straight into
    anticipated_coefficients for the problem's model kind.
    """
    if not records:
        raise InvalidInput("need at least one stage record")
    kind = problem.kind
    if kind == "lognormal":
        return _lognormal_aux(records, problem, config)
    if kind == "finpop":
        return _finpop_aux(records, problem, config)
    if kind == "qblogit":
        deflate = bool(config.deflate) if config is not None else False
        return {
            "X": np.asarray(problem.data["X"], dtype=float),
            "theta": records[-1].theta_hat,
            "deflate": deflate,
        }
    raise Unsupported(f"no auxiliary updater for model kind {kind!r}")


def anticipate_scheme(
    records,
    problem: RiskProblem,
    n_k: float,
    family: DesignFamily,
    config: AuxConfig | None = None,
) -> tuple[SamplingScheme, CoefficientSet]:
    """Allocation for the next stage from anticipated coefficients."""
    aux = update_aux(records, problem, config)
    cs = anticipated_coefficients(problem.kind, **aux)
    scheme = l_optimal_scheme(cs, n_k, family)
    return scheme, cs


def run_k_stages(
    problem: RiskProblem,
    batch_sizes,
    family: DesignFamily,
    seed: int,
    criterion: CriterionSpec | None = None,
    aux_config: AuxConfig | None = None,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> tuple[StageRecord, ...]:
    """Run the full multi-stage pipeline and return one record per stage.

    The first stage samples uniformly; each later stage reallocates using
    coefficients anticipated from everything revealed so far. Any failure
    (empty draw, singular fit, infeasible allocation) aborts with the
    records of the completed stages attached.
    """
    sizes = [float(n) for n in np.atleast_1d(np.asarray(batch_sizes, dtype=float))]
    if len(sizes) < 1:
        raise InvalidInput("need at least one batch size")
    if any(n <= 0 for n in sizes):
        raise InvalidInput("batch sizes must be positive")
    if criterion is not None:
        canonical = anticipated_criterion_label(problem.kind)
        if criterion.label != canonical:
            raise Unsupported(
                f"anticipation for {problem.kind!r} is derived for the "
                f"{canonical!r} criterion, got {criterion.label!r}"
            )

    records: list[StageRecord] = []
    theta = None
    for k, n_k in enumerate(sizes, start=1):
        try:
            if k == 1:
                scheme = uniform_scheme(problem.n_units, n_k, family)
            else:
                scheme, _ = anticipate_scheme(records, problem, n_k, family, aux_config)
            result = draw(scheme, stage_seed(seed, k))
            records.append(
                StageRecord(
                    k=k,
                    scheme=scheme,
                    draw=result,
                    theta_hat=np.zeros(problem.n_params),
                    m_k=int(round(sum(sizes[:k]))),
                )
            )
            fit = pooled_estimate(records, problem, theta_init=theta, tol=tol, max_iter=max_iter)
        except SubdesignError as err:
            records = records[:-1] if records and records[-1].k == k else records
            raise StageFailure(
                f"stage {k} failed: {err}", stage=k, records=tuple(records)
            ) from err
        theta = fit.theta0
        records[-1] = StageRecord(
            k=k,
            scheme=records[-1].scheme,
            draw=records[-1].draw,
            theta_hat=theta,
            m_k=records[-1].m_k,
        )
    return tuple(records)


def anticipated_criterion_label(kind: str) -> str:
    """Label of the criterion each model's anticipation targets."""
    labels = {"lognormal": "c:1,0", "qblogit": "d-er", "finpop": "d-s"}
    if kind not in labels:
        raise Unsupported(f"no anticipated criterion for model kind {kind!r}")
    return labels[kind]
