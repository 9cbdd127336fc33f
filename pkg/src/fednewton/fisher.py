"""Fisher information estimators and the matrix error metrics.

Four estimators are implemented. Two are cross-center regressions needing
only M-estimators and gradients:

  * mg_fisher_estimate regresses centered gradients on centered M-estimator
    deviations and returns an estimate of the Fisher information I0;
  * gm_fisher_estimate regresses the other way round and returns an estimate
    of the inverse Fisher information.

The other two are plain Hessian averages: the local center's (the surrogate
baseline) and the pooled one (an oracle, since it needs all the data).

Errors against the truth are measured in relative spectral norm, computed by
a symmetric eigensolve of M'M rather than an iterative method: dimensions
here are tiny and exactness beats iteration tuning. The true I0 for the
simulated designs has no closed form, so a cached Monte-Carlo reference with
entrywise standard errors is the declared yardstick.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .center import mean_hessian
from .comm import Federation
from .model import ModelSpec, _draw_covariates, hessian_weight, linear_predictor

KIND_MG = "mg"
KIND_GM = "gm"
KIND_LOCAL_HESSIAN = "local_hessian"
KIND_GLOBAL_HESSIAN = "global_hessian"

GRAM_CONDITION_LIMIT = 1e12


class SingularDesignError(RuntimeError):
    """The cross-center Gram matrix is numerically singular."""


@dataclass
class FisherEstimate:
    """A d x d information estimate tagged with its construction.

    For kind == "gm" the matrix estimates the inverse Fisher information;
    every other kind estimates the Fisher information itself. Consumers must
    branch on kind. condition_number records the Gram matrix conditioning for
    the regression kinds and the matrix's own conditioning otherwise.
    """

    matrix: np.ndarray
    kind: str
    eval_theta: np.ndarray
    condition_number: float


def _centered(rows: np.ndarray, center: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    return rows - np.asarray(center, dtype=float)


def _gram_solve(left: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve (left' left) X = rhs, guarding against rank deficiency."""
    gram = left.T @ left
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > GRAM_CONDITION_LIMIT:
        raise SingularDesignError(
            f"cross-center Gram matrix is singular (condition number {cond:.3e})"
        )
    return np.linalg.solve(gram, rhs), cond


def _check_regression_inputs(theta_hats: np.ndarray, grads: np.ndarray) -> None:
    m, d = np.asarray(theta_hats).shape
    if np.asarray(grads).shape != (m, d):
        raise ValueError("estimator and gradient stacks must share shape (m, d)")
    if m < d + 1:
        raise SingularDesignError(
            f"need at least d + 1 = {d + 1} centers for a full-rank Gram matrix, got {m}"
        )


def mg_fisher_estimate(
    theta_hats: np.ndarray,
    theta_bar: np.ndarray,
    grads: np.ndarray,
    grad_bar: np.ndarray,
    eval_theta: np.ndarray | None = None,
) -> FisherEstimate:
    """Fisher information from regressing gradients on M-estimator deviations.

    With D the centered estimators and G the centered gradients (rows per
    center), returns -(D'D)^{-1} (D'G). The output is not symmetrized: the
    finite-sample formula is asymmetric and is consumed as-is.
    """
    _check_regression_inputs(theta_hats, grads)
    dev = _centered(theta_hats, theta_bar)
    gc = _centered(grads, grad_bar)
    solution, cond = _gram_solve(dev, dev.T @ gc)
    matrix = -solution
    theta = np.asarray(eval_theta, dtype=float) if eval_theta is not None else np.full(dev.shape[1], np.nan)
    return FisherEstimate(matrix=matrix, kind=KIND_MG, eval_theta=theta, condition_number=cond)


def gm_fisher_estimate(
    theta_hats: np.ndarray,
    theta_bar: np.ndarray,
    grads: np.ndarray,
    grad_bar: np.ndarray,
    eval_theta: np.ndarray | None = None,
) -> FisherEstimate:
    """Inverse Fisher information from regressing deviations on gradients."""
    _check_regression_inputs(theta_hats, grads)
    dev = _centered(theta_hats, theta_bar)
    gc = _centered(grads, grad_bar)
    solution, cond = _gram_solve(gc, gc.T @ dev)
    matrix = -solution
    theta = np.asarray(eval_theta, dtype=float) if eval_theta is not None else np.full(dev.shape[1], np.nan)
    return FisherEstimate(matrix=matrix, kind=KIND_GM, eval_theta=theta, condition_number=cond)


def local_hessian_estimate(fed: Federation, theta: np.ndarray) -> FisherEstimate:
    """Mean Hessian over the local center's samples (the surrogate baseline)."""
    theta = np.asarray(theta, dtype=float)
    matrix = mean_hessian(fed.local, fed.spec, theta)
    return FisherEstimate(
        matrix=matrix,
        kind=KIND_LOCAL_HESSIAN,
        eval_theta=theta,
        condition_number=float(np.linalg.cond(matrix)),
    )


def global_hessian_estimate(fed: Federation, theta: np.ndarray) -> FisherEstimate:
    """Mean Hessian over all N = m*n samples; an out-of-band oracle baseline."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fed.d,):
        raise ValueError(f"dimension mismatch: theta {theta.shape}, federation d={fed.d}")
    per_center = np.stack([mean_hessian(c, fed.spec, theta) for c in fed.ordered_centers()])
    matrix = np.mean(per_center, axis=0)
    return FisherEstimate(
        matrix=matrix,
        kind=KIND_GLOBAL_HESSIAN,
        eval_theta=theta,
        condition_number=float(np.linalg.cond(matrix)),
    )


# --------------------------------------------------------------------------
# Error metrics
# --------------------------------------------------------------------------


def spectral_norm(matrix: np.ndarray) -> float:
    """Largest singular value via a symmetric eigensolve of M'M."""
    matrix = np.asarray(matrix, dtype=float)
    eigs = np.linalg.eigvalsh(matrix.T @ matrix)
    return float(np.sqrt(max(eigs[-1], 0.0)))


def fisher_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Relative spectral-norm error of an information estimate."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape or estimate.ndim != 2:
        raise ValueError("matrices must be square and share a shape")
    return spectral_norm(truth - estimate) / spectral_norm(truth)


def inverse_fisher_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Relative spectral-norm error of the estimate's inverse against truth's."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape or estimate.ndim != 2:
        raise ValueError("matrices must be square and share a shape")
    truth_inv = np.linalg.inv(truth)
    try:
        estimate_inv = np.linalg.inv(estimate)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"estimate is singular: {exc}") from exc
    if not np.all(np.isfinite(estimate_inv)):
        raise np.linalg.LinAlgError("estimate inverse is not finite")
    return spectral_norm(truth_inv - estimate_inv) / spectral_norm(truth_inv)


# --------------------------------------------------------------------------
# Monte-Carlo reference information matrix
# --------------------------------------------------------------------------

_REFERENCE_BLOCK = 1 << 16


@dataclass
class ReferenceFisher:
    """Monte-Carlo mean Hessian at the true parameter, with entrywise SEs."""

    matrix: np.ndarray
    std_err: np.ndarray
    mc_samples: int
    seed: int
    cache_key: str


def reference_cache_key(spec: ModelSpec, mc_samples: int, seed: int) -> str:
    theta_hash = hashlib.sha256(np.ascontiguousarray(spec.theta0).tobytes()).hexdigest()[:12]
    return f"{spec.family}_d{spec.d}_t{theta_hash}_{spec.covariate_law}_mc{mc_samples}_s{seed}"


def reference_fisher(
    spec: ModelSpec,
    mc_samples: int = 2_000_000,
    seed: int = 20_260_808,
    cache_dir: str | os.PathLike | None = None,
) -> ReferenceFisher:
    """Estimate I0 = E[hessian at theta0] by fresh Monte-Carlo draws.

    GLM Hessians do not involve the response, so only covariates are drawn.
    Accumulation runs over fixed-size blocks in a fixed order; the entrywise
    standard error comes from the usual variance of a mean, which for this
    statistic coincides with the leave-one-out jackknife value.
    """
    key = reference_cache_key(spec, mc_samples, seed)
    path = None
    if cache_dir is not None:
        path = os.path.join(os.fspath(cache_dir), f"ref_fisher_{key}.json")
        if os.path.exists(path):
            with open(path) as fh:
                payload = json.load(fh)
            if payload.get("cache_key") == key:
                return ReferenceFisher(
                    matrix=np.asarray(payload["matrix"], dtype=float),
                    std_err=np.asarray(payload["std_err"], dtype=float),
                    mc_samples=int(payload["mc_samples"]),
                    seed=int(payload["seed"]),
                    cache_key=key,
                )

    d = spec.d
    rng = Generator(Philox(SeedSequence((int(seed), 0))))
    total = np.zeros((d, d))
    total_sq = np.zeros((d, d))
    done = 0
    while done < mc_samples:
        k = min(_REFERENCE_BLOCK, mc_samples - done)
        S = _draw_covariates(rng, spec.covariate_law, k, d)
        w = hessian_weight(spec.family, linear_predictor(S, spec.theta0))
        hessians = w[:, None, None] * (S[:, :, None] * S[:, None, :])
        total += hessians.sum(axis=0)
        total_sq += (hessians * hessians).sum(axis=0)
        done += k
    matrix = total / mc_samples
    var = (total_sq - mc_samples * matrix * matrix) / (mc_samples - 1)
    std_err = np.sqrt(np.maximum(var, 0.0) / mc_samples)
    result = ReferenceFisher(
        matrix=matrix, std_err=std_err, mc_samples=mc_samples, seed=seed, cache_key=key
    )

    if path is not None:
        os.makedirs(os.fspath(cache_dir), exist_ok=True)
        payload = {
            "cache_key": key,
            "family": spec.family,
            "d": spec.d,
            "covariate_law": spec.covariate_law,
            "theta0": [float(v) for v in spec.theta0],
            "mc_samples": mc_samples,
            "seed": seed,
            "matrix": [[float(v) for v in row] for row in matrix],
            "std_err": [[float(v) for v in row] for row in std_err],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    return result
