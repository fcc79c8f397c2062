"""Phase 1: l2-regularized logistic propensity model and its privatization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .core import ConfigError, Dataset, DimensionMismatch
from .dp_primitives import BudgetLedger, Composition, NoiseSource, laplace_perturb_vector

DEFAULT_LAMBDA = 1.0
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10_000


class NonConvergence(UserWarning):
    """Training stopped at max_iters with the gradient above tolerance."""


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    lam: float
    trained_iterations: int = 0
    final_loss: float = float("nan")
    grad_norm: float = float("nan")
    converged: bool = True
    intercept: bool = False
    perturbed: bool = False

    def to_text(self) -> str:
        """Plain-text export: line 1 is lambda, line 2 the comma-separated weights."""
        return f"{self.lam!r}\n" + ",".join(repr(float(w)) for w in self.weights) + "\n"

    @classmethod
    def from_text(cls, text: str, intercept: bool = False) -> "LogisticModel":
        lines = text.strip().splitlines()
        if len(lines) != 2:
            raise ValueError("model file must have exactly two lines")
        weights = np.array([float(v) for v in lines[1].split(",")])
        return cls(weights=weights, lam=float(lines[0]), intercept=intercept)


@dataclass(frozen=True)
class PropensityScores:
    scores: np.ndarray
    perturbed: bool = False


def design_matrix(dataset: Dataset, intercept: bool = False) -> np.ndarray:
    X = dataset.covariates
    if intercept:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    return X


def signed_labels(treatment: np.ndarray) -> np.ndarray:
    """Recode 0/1 treatment as -1/+1."""
    return 2.0 * np.asarray(treatment, dtype=float) - 1.0


def _softplus(z: np.ndarray) -> np.ndarray:
    """Stable log(1 + exp(z))."""
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _objective_at(m: np.ndarray, w: np.ndarray, t: np.ndarray, lam: float) -> float:
    return float(_softplus(-m * t).sum() / m.shape[0] + 0.5 * lam * (w @ w))


def _gradient_at(m: np.ndarray, w: np.ndarray, X: np.ndarray, t: np.ndarray, lam: float) -> np.ndarray:
    coef = -expit(-m * t) * t
    return X.T @ coef / X.shape[0] + lam * w


def _objective(w: np.ndarray, X: np.ndarray, t: np.ndarray, lam: float) -> float:
    return _objective_at(X @ w, w, t, lam)


def _gradient(w: np.ndarray, X: np.ndarray, t: np.ndarray, lam: float) -> np.ndarray:
    return _gradient_at(X @ w, w, X, t, lam)


def _check_dims(model: LogisticModel, X: np.ndarray) -> None:
    if model.weights.shape != (X.shape[1],):
        raise DimensionMismatch(f"model has {model.weights.shape[0]} weights but data has {X.shape[1]} columns")


def loss(model: LogisticModel, dataset: Dataset) -> float:
    """Regularized empirical logistic loss J(w)."""
    X = design_matrix(dataset, model.intercept)
    _check_dims(model, X)
    return _objective(model.weights, X, signed_labels(dataset.treatment), model.lam)


def gradient(model: LogisticModel, dataset: Dataset) -> np.ndarray:
    X = design_matrix(dataset, model.intercept)
    _check_dims(model, X)
    return _gradient(model.weights, X, signed_labels(dataset.treatment), model.lam)


def minimize_logistic(
    X: np.ndarray,
    t: np.ndarray,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> tuple[np.ndarray, int, float, float]:
    """Gradient descent with Armijo backtracking, started at w = 0.

    Returns ``(w, iterations, loss, grad_inf_norm)``. Fully deterministic.
    """
    n, d = X.shape
    w = np.zeros(d)
    m = np.zeros(n)
    f = _objective_at(m, w, t, lam)
    g = _gradient_at(m, w, X, t, lam)
    # J is (lam + ||X||_2^2 / 4n)-smooth; 1/L is always an accepted step
    L = lam + np.linalg.norm(X, ord=2) ** 2 / (4.0 * n)
    step = 2.0 / L
    it = 0
    gnorm = float(np.max(np.abs(g)))
    Xg = X @ g
    while gnorm > tol and it < max_iters:
        gg = float(g @ g)
        while True:
            w_new = w - step * g
            m_new = m - step * Xg
            f_new = _objective_at(m_new, w_new, t, lam)
            if f_new <= f - 0.5 * step * gg or step <= 1.0 / L:
                break
            step *= 0.5
        w, f = w_new, f_new
        # refresh margins exactly so round-off does not accumulate
        m = X @ w
        g = _gradient_at(m, w, X, t, lam)
        gnorm = float(np.max(np.abs(g)))
        Xg = X @ g
        step = min(step * 2.0, 4.0 / L)
        it += 1
    return w, it, f, gnorm


def train(
    dataset: Dataset,
    lam: float = DEFAULT_LAMBDA,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    intercept: bool = False,
) -> LogisticModel:
    """Fit the propensity model of treatment on covariates.

    Hitting ``max_iters`` is not an error: a :class:`NonConvergence` warning is
    issued and the returned model has ``converged=False``.
    """
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    X = design_matrix(dataset, intercept)
    t = signed_labels(dataset.treatment)
    w, it, f, gnorm = minimize_logistic(X, t, float(lam), tol, max_iters)
    converged = gnorm <= tol
    if not converged:
        warnings.warn(
            f"logistic training stopped after {it} iterations with gradient norm {gnorm:.3g} > {tol:g}",
            NonConvergence,
            stacklevel=2,
        )
    return LogisticModel(
        weights=w,
        lam=float(lam),
        trained_iterations=it,
        final_loss=f,
        grad_norm=gnorm,
        converged=converged,
        intercept=intercept,
    )


def weight_sensitivity(n: int, d: int, lam: float) -> float:
    """L1 sensitivity of the trained weights, 2d / (n * lambda)."""
    if n < 1 or d < 1 or not lam > 0:
        raise ConfigError(f"need n >= 1, d >= 1, lambda > 0 (got n={n}, d={d}, lambda={lam})")
    return 2.0 * d / (n * lam)


def privatize_weights(
    model: LogisticModel,
    n: int,
    eps_11: float,
    rng: NoiseSource,
    ledger: BudgetLedger | None = None,
) -> LogisticModel:
    """Add Laplace noise to every weight (sample-level only).

    ``n`` is the training set size; the noise scale is
    ``weight_sensitivity(n, d, lam) / eps_11`` where d counts the intercept
    column when present.
    """
    sens = weight_sensitivity(n, model.weights.shape[0], model.lam)
    noisy = laplace_perturb_vector(model.weights, sens, eps_11, rng)
    if ledger is not None:
        ledger.record("phase1a", eps_11, Composition.SEQUENTIAL)
        ledger.tainted |= rng.disabled
    return replace(model, weights=noisy, perturbed=True)


def score(model: LogisticModel, dataset: Dataset) -> PropensityScores:
    X = design_matrix(dataset, model.intercept)
    _check_dims(model, X)
    return PropensityScores(scores=expit(X @ model.weights), perturbed=False)


def privatize_scores(
    scores: PropensityScores,
    eps_12: float,
    rng: NoiseSource,
    ledger: BudgetLedger | None = None,
) -> PropensityScores:
    """Per-sample Laplace noise with sensitivity 1, then clip to [0, 1].

    Samples are disjoint, so the whole vector is charged ``eps_12`` once.
    """
    noisy = laplace_perturb_vector(scores.scores, 1.0, eps_12, rng)
    if ledger is not None:
        ledger.record("phase1b", eps_12, Composition.PARALLEL)
        ledger.tainted |= rng.disabled
    return PropensityScores(scores=np.clip(noisy, 0.0, 1.0), perturbed=True)
