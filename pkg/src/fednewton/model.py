"""GLM loss families with exact derivatives up to third order, plus synthetic
federated data generation.

Three canonical-link families are supported: logistic regression, Poisson
regression, and a Gaussian quadratic (least-squares) loss. Losses are negative
log-likelihoods with data-independent constants dropped, so gradients and all
higher derivatives are unaffected. Every derivative shares the GLM structure:
with the linear predictor t = s @ theta,

    loss        L(t, y)
    gradient    (mu(t) - y) * s
    hessian     w(t) * outer(s, s)
    third       v(t) * s (x) s (x) s

where mu is the inverse link, w = mu' and v = mu''. Third derivatives are kept
as dense (d, d, d) arrays whose slice [j] is the second-derivative matrix of
the j-th gradient component.

Data generation is deterministic: each center draws from its own Philox
stream keyed by (seed, replication index, center index), so centers are
mutually independent and replications can run in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import expit

LOGISTIC = "logistic"
POISSON = "poisson"
GAUSSIAN_QUADRATIC = "gaussian_quadratic"
FAMILIES = (LOGISTIC, POISSON, GAUSSIAN_QUADRATIC)

STD_NORMAL = "std_normal"
IID_EXP1 = "iid_exp1"
COVARIATE_LAWS = (STD_NORMAL, IID_EXP1)


def default_theta0(d: int) -> np.ndarray:
    """The d**(-1/2) * ones coefficient vector used in all stock scenarios."""
    return np.full(d, 1.0 / np.sqrt(d))


@dataclass(frozen=True)
class ModelSpec:
    """Generative ground truth: family, dimension, true coefficients, design law."""

    family: str
    d: int
    theta0: np.ndarray
    covariate_law: str = STD_NORMAL
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ValueError(f"unknown covariate law {self.covariate_law!r}")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        theta0 = np.array(self.theta0, dtype=float)
        if theta0.shape != (self.d,):
            raise ValueError(f"theta0 must have shape ({self.d},)")
        theta0.flags.writeable = False
        object.__setattr__(self, "theta0", theta0)
        if int(self.seed) < 0:
            raise ValueError("seed must be a non-negative integer")
        object.__setattr__(self, "seed", int(self.seed))


@dataclass
class Sample:
    """One observation: response y and covariate vector s."""

    y: float
    s: np.ndarray


@dataclass
class CenterData:
    """All samples held by one data center, stored as arrays.

    S has shape (n, d) with one covariate row per sample, y has shape (n,).
    ``fit`` is populated once by the local M-estimation step and never
    rewritten afterwards.
    """

    center_id: int
    S: np.ndarray
    y: np.ndarray
    fit: "LocalFit | None" = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def d(self) -> int:
        return self.S.shape[1]


# --------------------------------------------------------------------------
# Family link functions, vectorized over the linear predictor
# --------------------------------------------------------------------------


def mean_response(family: str, t: np.ndarray) -> np.ndarray:
    """Inverse link mu(t): sigmoid, exp, or identity."""
    if family == LOGISTIC:
        return expit(t)
    if family == POISSON:
        return np.exp(t)
    if family == GAUSSIAN_QUADRATIC:
        return np.asarray(t, dtype=float)
    raise ValueError(f"unknown family {family!r}")


def hessian_weight(family: str, t: np.ndarray) -> np.ndarray:
    """Second-derivative weight w(t) = mu'(t)."""
    if family == LOGISTIC:
        p = expit(t)
        return p * (1.0 - p)
    if family == POISSON:
        return np.exp(t)
    if family == GAUSSIAN_QUADRATIC:
        return np.ones_like(np.asarray(t, dtype=float))
    raise ValueError(f"unknown family {family!r}")


def third_weight(family: str, t: np.ndarray) -> np.ndarray:
    """Third-derivative weight v(t) = mu''(t)."""
    if family == LOGISTIC:
        p = expit(t)
        return p * (1.0 - p) * (1.0 - 2.0 * p)
    if family == POISSON:
        return np.exp(t)
    if family == GAUSSIAN_QUADRATIC:
        return np.zeros_like(np.asarray(t, dtype=float))
    raise ValueError(f"unknown family {family!r}")


def loss_terms(family: str, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample loss at linear predictor t.

    The logistic log-partition uses logaddexp(0, t) = log(1 + exp(t)), which
    stays finite for any |t| a float64 can hold.
    """
    if family == LOGISTIC:
        return -y * t + np.logaddexp(0.0, t)
    if family == POISSON:
        return -y * t + np.exp(t)
    if family == GAUSSIAN_QUADRATIC:
        return 0.5 * (y - t) ** 2
    raise ValueError(f"unknown family {family!r}")


# --------------------------------------------------------------------------
# Batched kernels over sample arrays
# --------------------------------------------------------------------------
# The linear predictor uses einsum rather than @ so that each row's dot
# product is computed identically whether one sample or a million are passed;
# per-sample results are therefore bit-identical to batched ones.


def linear_predictor(S: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.einsum("...nd,...d->...n", S, theta)


def sample_losses(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return loss_terms(family, linear_predictor(S, theta), y)


def sample_gradients(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    resid = mean_response(family, linear_predictor(S, theta)) - y
    return resid[..., None] * S


def sample_hessians(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    w = hessian_weight(family, linear_predictor(S, theta))
    return w[..., None, None] * (S[..., :, None] * S[..., None, :])


def sample_third_tensors(family: str, S: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    v = third_weight(family, linear_predictor(S, theta))
    # Associate as s_j * (s_k * s_l): the trailing index pair is then exactly
    # symmetric (float multiplication commutes, it does not associate).
    pair = S[..., :, None] * S[..., None, :]
    cube = S[..., :, None, None] * pair[..., None, :, :]
    return v[..., None, None, None] * cube


# --------------------------------------------------------------------------
# Single-sample operations
# --------------------------------------------------------------------------


def _check_sample(theta: np.ndarray, sample: Sample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    s = np.asarray(sample.s, dtype=float)
    if theta.shape != s.shape or theta.ndim != 1:
        raise ValueError(f"dimension mismatch: theta {theta.shape}, covariate {s.shape}")
    return theta, s[None, :], np.asarray([sample.y], dtype=float)


def loss_value(spec: ModelSpec, theta: np.ndarray, sample: Sample) -> float:
    """Loss of one sample at theta; convex in theta for every family."""
    theta, S, y = _check_sample(theta, sample)
    return float(sample_losses(spec.family, S, y, theta)[0])


def gradient(spec: ModelSpec, theta: np.ndarray, sample: Sample) -> np.ndarray:
    theta, S, y = _check_sample(theta, sample)
    return sample_gradients(spec.family, S, y, theta)[0]


def hessian(spec: ModelSpec, theta: np.ndarray, sample: Sample) -> np.ndarray:
    theta, S, y = _check_sample(theta, sample)
    return sample_hessians(spec.family, S, y, theta)[0]


def third_tensor(spec: ModelSpec, theta: np.ndarray, sample: Sample) -> np.ndarray:
    """Dense (d, d, d) third-derivative tensor of the loss at theta."""
    theta, S, y = _check_sample(theta, sample)
    return sample_third_tensors(spec.family, S, y, theta)[0]


def quadratic_contraction(tensor: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Contract a (d, d, d) tensor with u twice: out[j] = u @ tensor[j] @ u.

    Quadratic in u by construction, and exactly so in floating point when u is
    scaled by a power of two.
    """
    tensor = np.asarray(tensor, dtype=float)
    u = np.asarray(u, dtype=float)
    if tensor.ndim != 3 or len(set(tensor.shape)) != 1:
        raise ValueError(f"expected a cubic (d, d, d) tensor, got shape {tensor.shape}")
    if u.shape != tensor.shape[:1]:
        raise ValueError(f"dimension mismatch: tensor {tensor.shape}, u {u.shape}")
    return np.einsum("jkl,k,l->j", tensor, u, u)


# --------------------------------------------------------------------------
# Federated data generation
# --------------------------------------------------------------------------


def _center_rng(seed: int, rep: int, index: int) -> Generator:
    return Generator(Philox(SeedSequence((int(seed), int(rep), int(index)))))


def _draw_covariates(rng: Generator, law: str, n: int, d: int) -> np.ndarray:
    if law == STD_NORMAL:
        return rng.standard_normal((n, d))
    if law == IID_EXP1:
        return rng.standard_exponential((n, d))
    raise ValueError(f"unknown covariate law {law!r}")


def _draw_responses(rng: Generator, family: str, t: np.ndarray) -> np.ndarray:
    if family == LOGISTIC:
        return (rng.random(t.shape[0]) < expit(t)).astype(float)
    if family == POISSON:
        return rng.poisson(np.exp(t)).astype(float)
    if family == GAUSSIAN_QUADRATIC:
        # Unit noise variance; this family is a testing vehicle, not a
        # simulated scenario, and only derivatives matter downstream.
        return t + rng.standard_normal(t.shape[0])
    raise ValueError(f"unknown family {family!r}")


def _make_center(spec: ModelSpec, rep: int, center_id: int, n: int) -> CenterData:
    rng = _center_rng(spec.seed, rep, center_id)
    S = _draw_covariates(rng, spec.covariate_law, n, spec.d)
    y = _draw_responses(rng, spec.family, linear_predictor(S, spec.theta0))
    return CenterData(center_id=center_id, S=S, y=y)


def generate_federation(spec: ModelSpec, m: int, n: int, rep: int = 0) -> list[CenterData]:
    """Draw m independent centers of n samples each.

    Fully determined by (spec, m, n, rep); center i uses the stream keyed
    (spec.seed, rep, i) so adding centers never perturbs existing ones.
    """
    if m < 1:
        raise ValueError("need at least one center")
    if n <= spec.d:
        raise ValueError(f"n={n} too small: local M-estimation needs n > d={spec.d}")
    return [_make_center(spec, rep, i, n) for i in range(1, m + 1)]


def generate_shared_design_federation(spec: ModelSpec, m: int, n: int, rep: int = 0) -> list[CenterData]:
    """All m centers share one covariate block; responses are drawn per center.

    With identical designs every center has the same Hessian, which makes the
    quadratic family exactly linear-algebraic: the main exactness oracle for
    the cross-center Fisher estimators.
    """
    if m < 1:
        raise ValueError("need at least one center")
    if n <= spec.d:
        raise ValueError(f"n={n} too small: local M-estimation needs n > d={spec.d}")
    S = _draw_covariates(_center_rng(spec.seed, rep, 0), spec.covariate_law, n, spec.d)
    t = linear_predictor(S, spec.theta0)
    centers = []
    for i in range(1, m + 1):
        y = _draw_responses(_center_rng(spec.seed, rep, i), spec.family, t)
        centers.append(CenterData(center_id=i, S=S.copy(), y=y))
    return centers


def dump_federation_csv(centers: list[CenterData], path) -> None:
    """Write a federation as CSV with header ``center,row,y,s1..sd``."""
    d = centers[0].d
    header = "center,row,y," + ",".join(f"s{j}" for j in range(1, d + 1))
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for c in centers:
            for row in range(c.n):
                cells = [str(c.center_id), str(row + 1), repr(float(c.y[row]))]
                cells.extend(repr(float(v)) for v in c.S[row])
                fh.write(",".join(cells) + "\n")
