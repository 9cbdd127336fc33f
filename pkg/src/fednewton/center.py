"""Everything a single data center computes on its own samples.

Local M-estimation runs a damped Newton iteration on the center-average loss,
started at zero (inside the convex basin for all three families) with
step-halving until the mean loss does not increase. The kernel is batched:
any number of centers sharing (n, d) are fitted simultaneously with masked
vectorized updates, and a single center is just a batch of one, so both paths
produce identical iterates.

The local moment estimators evaluate, at a supplied anchor parameter, the mean
Hessian, the mean third-derivative tensor, and the two centered cross-moments
of per-sample gradients with themselves and with per-sample Hessians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    CenterData,
    ModelSpec,
    hessian_weight,
    linear_predictor,
    sample_gradients,
    sample_hessians,
    sample_losses,
    sample_third_tensors,
)


@dataclass(frozen=True)
class NewtonSettings:
    """Solver knobs for local M-estimation."""

    grad_tol: float = 1e-10
    max_iter: int = 100
    damping_shrink: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.damping_shrink < 1.0:
            raise ValueError("damping_shrink must lie in (0, 1)")


@dataclass
class LocalFit:
    """Result of one local M-estimation."""

    theta_hat: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool


@dataclass
class LocalMoments:
    """Moment estimators computed in one pass over a center's samples.

    h_anchor     mean Hessian at the anchor parameter (d, d)
    q_tensor     mean third-derivative tensor (d, d, d)
    q11          mean outer product of centered per-sample gradients (d, d)
    q12          mean of centered gradient (x) centered Hessian, stored as a
                 (d, d, d) tensor whose slice [a] pairs gradient component a
                 with the centered Hessian
    """

    h_anchor: np.ndarray
    q_tensor: np.ndarray
    q11: np.ndarray
    q12: np.ndarray


def _mean_losses(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return np.mean(sample_losses(family, S, y, theta), axis=-1)


def _mean_gradients(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.mean(sample_gradients(family, S, y, theta), axis=-2)


def _mean_hessians(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.mean(sample_hessians(family, S, y, theta), axis=-3)


def _newton_hessians(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # Kernel-internal reduction: contracts out the sample axis without
    # materializing the (k, n, d, d) stack. Per-problem results are identical
    # whether a problem is fitted alone or inside a batch.
    w = hessian_weight(family, linear_predictor(S, theta))
    return np.einsum("kn,knd,kne->kde", w, S, S, optimize=True) / S.shape[1]


def _ridge_solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve one Newton system, falling back to a trace-scaled ridge.

    The ridge only regularizes the solve; reported Hessians stay unmodified.
    """
    d = H.shape[0]
    try:
        step = np.linalg.solve(H, g)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    lam = 1e-8 * np.trace(H) / d
    if not np.isfinite(lam) or lam <= 0:
        lam = 1e-8
    return np.linalg.solve(H + lam * np.eye(d), g)


def _newton_steps(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Batched Newton directions with per-problem ridge fallback."""
    try:
        step = np.linalg.solve(H, g[..., None])[..., 0]
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(g)
    for i in range(H.shape[0]):
        out[i] = _ridge_solve(H[i], g[i])
    return out


def newton_fit_many(
    family: str, S: np.ndarray, y: np.ndarray, settings: NewtonSettings
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fit k M-estimation problems at once.

    S has shape (k, n, d) and y shape (k, n). Returns (theta, grad_norm,
    iterations, converged) stacked over the k problems. Problems are updated
    only while active, so each problem's iterates are independent of which
    others share the batch.
    """
    k, n, d = S.shape
    theta = np.zeros((k, d))
    loss = _mean_losses(family, S, y, theta)
    grad = _mean_gradients(family, S, y, theta)
    grad_norm = np.linalg.norm(grad, axis=1)
    iterations = np.zeros(k, dtype=int)
    stalled = np.zeros(k, dtype=bool)
    active = grad_norm > settings.grad_tol

    for _ in range(settings.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        S_a, y_a = S[idx], y[idx]
        H = _newton_hessians(family, S_a, y_a, theta[idx])
        step = _newton_steps(H, grad[idx])

        # Near the optimum the true Newton decrement drops below the rounding
        # noise of the mean-loss evaluation; a resolution-scaled slack keeps
        # the line search from rejecting steps it cannot measure.
        slack = 64.0 * np.finfo(float).eps * (1.0 + np.abs(loss[idx]))
        alpha = np.ones(idx.size)
        trial = theta[idx] - step
        trial_loss = _mean_losses(family, S_a, y_a, trial)
        for _ in range(settings.max_halvings):
            # NaN/inf trial losses compare False and keep halving.
            bad = ~(trial_loss <= loss[idx] + slack)
            if not bad.any():
                break
            alpha[bad] *= settings.damping_shrink
            trial[bad] = theta[idx][bad] - alpha[bad, None] * step[bad]
            trial_loss[bad] = _mean_losses(family, S_a[bad], y_a[bad], trial[bad])

        accepted = trial_loss <= loss[idx] + slack
        take = idx[accepted]
        theta[take] = trial[accepted]
        loss[take] = trial_loss[accepted]
        if take.size:
            g_new = _mean_gradients(family, S[take], y[take], theta[take])
            grad[take] = g_new
            grad_norm[take] = np.linalg.norm(g_new, axis=1)
        iterations[idx] += 1
        stalled[idx[~accepted]] = True
        active = (grad_norm > settings.grad_tol) & ~stalled

    converged = grad_norm <= settings.grad_tol
    return theta, grad_norm, iterations, converged


def fit_m_estimator(center: CenterData, spec: ModelSpec, settings: NewtonSettings | None = None) -> LocalFit:
    """Compute the center's M-estimator and store it on the center."""
    settings = settings or NewtonSettings()
    if center.n <= center.d:
        raise ValueError(f"center {center.center_id}: n={center.n} <= d={center.d} is ill-posed")
    theta, grad_norm, iterations, converged = newton_fit_many(
        spec.family, center.S[None], center.y[None], settings
    )
    fit = LocalFit(
        theta_hat=theta[0],
        grad_norm=float(grad_norm[0]),
        iterations=int(iterations[0]),
        converged=bool(converged[0]),
    )
    center.fit = fit
    return fit


def mean_gradient(center: CenterData, spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    """Arithmetic mean of per-sample gradients, summed in row order."""
    theta = _check_theta(center, theta)
    return _mean_gradients(spec.family, center.S, center.y, theta)


def mean_hessian(center: CenterData, spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    theta = _check_theta(center, theta)
    return _mean_hessians(spec.family, center.S, center.y, theta)


def _check_theta(center: CenterData, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (center.d,):
        raise ValueError(f"dimension mismatch: theta {theta.shape}, center d={center.d}")
    return theta


def local_moments(center: CenterData, spec: ModelSpec, theta_anchor: np.ndarray) -> LocalMoments:
    """Evaluate the four local moment estimators at the anchor parameter.

    Gradients and Hessians are centered at their within-center means before
    forming the cross-moments, so q11 is symmetric PSD by construction and the
    trailing two axes of each q12 slice inherit the Hessians' symmetry.
    """
    theta_anchor = _check_theta(center, theta_anchor)
    family, S, y = spec.family, center.S, center.y
    n = center.n

    grads = sample_gradients(family, S, y, theta_anchor)
    hessians = sample_hessians(family, S, y, theta_anchor)
    h_anchor = np.mean(hessians, axis=0)
    grads_c = grads - np.mean(grads, axis=0)
    hessians_c = hessians - h_anchor

    q_tensor = np.mean(sample_third_tensors(family, S, y, theta_anchor), axis=0)
    q11 = np.einsum("na,nb->ab", grads_c, grads_c) / n
    q12 = np.einsum("na,nkl->akl", grads_c, hessians_c) / n
    return LocalMoments(h_anchor=h_anchor, q_tensor=q_tensor, q11=q11, q12=q12)
