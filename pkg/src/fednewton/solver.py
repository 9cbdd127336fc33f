"""Distributed Newton-like algorithms, one-step bias-adjusted estimators, and
Wald confidence intervals.

Every iterative run follows the same synchronous protocol: collect all
M-estimators once up front, then per round broadcast the current iterate,
collect gradients, build the round's information estimate, and take a full
Newton-like step (no damping; a blow-up aborts the trace with a "diverged"
status instead of being silently suppressed). A T-round trace therefore logs
exactly m*d + 2*T*m*d scalars.

The one-step estimators start from the local center's own M-estimator, take a
single Newton-like step with a cross-center information estimate, and then
explicitly remove the two terms quadratic in the initial error, using moment
estimators evaluated locally at the average M-estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .center import NewtonSettings, local_moments
from .comm import (
    CommLog,
    Federation,
    broadcast_and_collect_gradients,
    collect_m_estimators,
    pooled_oracle_fit,
)
from .fisher import (
    SingularDesignError,
    global_hessian_estimate,
    gm_fisher_estimate,
    local_hessian_estimate,
    mg_fisher_estimate,
)
from .model import quadratic_contraction

ALG_MG = "mg"
ALG_GM = "gm"
ALG_CSL = "csl"
ALG_GLOBAL_NEWTON = "global_newton"
ALGORITHMS = (ALG_MG, ALG_GM, ALG_CSL, ALG_GLOBAL_NEWTON)

INIT_AVERAGE = "average_m_est"
INIT_LOCAL = "local_m_est"
INIT_CUSTOM = "custom"

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"

OS_MG = "MG_OS"
OS_GM = "GM_OS"
OS_CSL = "CSL_OS"
OS_AVG = "AVG"


@dataclass
class TraceRound:
    """State after round t (t = 0 is the initial estimator)."""

    t: int
    theta: np.ndarray
    grad_bar_norm: float
    delta_oracle: float
    delta_truth: float
    comm_scalars: int


@dataclass
class IterateTrace:
    algorithm: str
    init_kind: str
    rounds: list[TraceRound] = field(default_factory=list)
    status: str = STATUS_OK
    comm: CommLog = field(default_factory=CommLog)


@dataclass
class OneStepResult:
    theta_os: np.ndarray
    kind: str
    q12_correction: np.ndarray
    q_correction: np.ndarray
    variance_hat: np.ndarray | None


@dataclass
class ConfidenceInterval:
    coordinate: int
    lower: float
    upper: float
    level: float


def oracle_distance(theta: np.ndarray, theta_star: np.ndarray) -> float:
    """Relative l2 distance to the pooled oracle M-estimator."""
    theta_star = np.asarray(theta_star, dtype=float)
    denom = float(np.linalg.norm(theta_star))
    if denom == 0.0:
        raise ValueError("oracle estimator has zero norm")
    return float(np.linalg.norm(theta_star - np.asarray(theta, dtype=float)) / denom)


def _resolve_init(
    init, theta_hats: np.ndarray, theta_bar: np.ndarray, fed: Federation
) -> tuple[np.ndarray, str]:
    if isinstance(init, str):
        if init == INIT_AVERAGE:
            return theta_bar, INIT_AVERAGE
        if init == INIT_LOCAL:
            ids = [c.center_id for c in fed.ordered_centers()]
            return theta_hats[ids.index(fed.local_index)], INIT_LOCAL
        raise ValueError(f"unknown init {init!r}")
    theta = np.asarray(init, dtype=float)
    if theta.shape != (fed.d,):
        raise ValueError(f"dimension mismatch: init {theta.shape}, federation d={fed.d}")
    return theta, INIT_CUSTOM


def _diverged(delta_truth: float, delta_truth0: float, theta: np.ndarray) -> bool:
    # Ten-fold growth of the distance to truth counts as divergence; the
    # absolute floor keeps a near-perfect init from tripping the ratio test.
    if not np.all(np.isfinite(theta)):
        return True
    return delta_truth > max(10.0 * delta_truth0, 0.5)


def _run_newton_like(
    fed: Federation,
    algorithm: str,
    init,
    num_rounds: int,
    settings: NewtonSettings | None = None,
    theta_star: np.ndarray | None = None,
) -> IterateTrace:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if num_rounds < 1:
        raise ValueError("need at least one round")
    settings = settings or NewtonSettings()
    theta0_true = fed.spec.theta0

    log = CommLog()
    theta_hats, theta_bar, delta_log = collect_m_estimators(fed, settings)
    log.extend(delta_log)
    theta, init_kind = _resolve_init(init, theta_hats, theta_bar, fed)
    if theta_star is None:
        theta_star = pooled_oracle_fit(fed, settings)

    trace = IterateTrace(algorithm=algorithm, init_kind=init_kind, comm=log)
    delta_truth0 = float(np.linalg.norm(theta - theta0_true))
    trace.rounds.append(
        TraceRound(
            t=0,
            theta=theta,
            grad_bar_norm=np.nan,
            delta_oracle=oracle_distance(theta, theta_star),
            delta_truth=delta_truth0,
            comm_scalars=log.total_scalars,
        )
    )

    for t in range(num_rounds):
        grads, grad_bar, delta_log = broadcast_and_collect_gradients(fed, theta)
        log.extend(delta_log)
        trace.rounds[-1].grad_bar_norm = float(np.linalg.norm(grad_bar))
        try:
            if algorithm == ALG_MG:
                est = mg_fisher_estimate(theta_hats, theta_bar, grads, grad_bar, eval_theta=theta)
                step = np.linalg.solve(est.matrix, grad_bar)
            elif algorithm == ALG_GM:
                est = gm_fisher_estimate(theta_hats, theta_bar, grads, grad_bar, eval_theta=theta)
                step = est.matrix @ grad_bar
            elif algorithm == ALG_CSL:
                est = local_hessian_estimate(fed, theta)
                step = np.linalg.solve(est.matrix, grad_bar)
            else:
                est = global_hessian_estimate(fed, theta)
                step = np.linalg.solve(est.matrix, grad_bar)
        except SingularDesignError as exc:
            raise SingularDesignError(f"round {t}: {exc}") from exc
        theta = theta - step
        delta_truth = float(np.linalg.norm(theta - theta0_true))
        trace.rounds.append(
            TraceRound(
                t=t + 1,
                theta=theta,
                grad_bar_norm=np.nan,
                delta_oracle=oracle_distance(theta, theta_star) if np.all(np.isfinite(theta)) else np.nan,
                delta_truth=delta_truth,
                comm_scalars=log.total_scalars,
            )
        )
        if _diverged(delta_truth, delta_truth0, theta):
            trace.status = STATUS_DIVERGED
            break
    return trace


def run_mg_newton(fed, init, num_rounds, settings=None, theta_star=None) -> IterateTrace:
    """Newton-like iteration whose learning rate is the MG information estimate."""
    return _run_newton_like(fed, ALG_MG, init, num_rounds, settings, theta_star)


def run_gm_newton(fed, init, num_rounds, settings=None, theta_star=None) -> IterateTrace:
    """Newton-like iteration multiplying gradients by the GM inverse estimate."""
    return _run_newton_like(fed, ALG_GM, init, num_rounds, settings, theta_star)


def run_csl(fed, init, num_rounds, settings=None, theta_star=None) -> IterateTrace:
    """Surrogate baseline: Newton steps with the local center's Hessian."""
    return _run_newton_like(fed, ALG_CSL, init, num_rounds, settings, theta_star)


def run_global_newton(fed, init, num_rounds, settings=None, theta_star=None) -> IterateTrace:
    """Oracle baseline: Newton steps with the pooled Hessian."""
    return _run_newton_like(fed, ALG_GLOBAL_NEWTON, init, num_rounds, settings, theta_star)


# --------------------------------------------------------------------------
# One-step bias-adjusted estimators
# --------------------------------------------------------------------------


@dataclass
class OneStepSuite:
    """All four one-step estimators built from a single gradient round."""

    mg: OneStepResult
    gm: OneStepResult
    csl: OneStepResult
    avg: OneStepResult
    comm: CommLog


def one_step_suite(fed: Federation, settings: NewtonSettings | None = None) -> OneStepSuite:
    """Build every one-step estimator from one collection + one gradient round.

    The initial estimator is the local center's M-estimator; the anchor for
    the local moment estimators is the average M-estimator. Both adjusted
    estimators subtract the same two correction terms and share the same
    plug-in variance, the GM-sandwich of the local gradient covariance.
    """
    settings = settings or NewtonSettings()
    log = CommLog()
    theta_hats, theta_bar, delta_log = collect_m_estimators(fed, settings)
    log.extend(delta_log)
    ids = [c.center_id for c in fed.ordered_centers()]
    theta_init = theta_hats[ids.index(fed.local_index)]

    grads, grad_bar, delta_log = broadcast_and_collect_gradients(fed, theta_init)
    log.extend(delta_log)

    moments = local_moments(fed.local, fed.spec, theta_bar)
    delta0 = theta_init - theta_bar
    try:
        q12_term = np.linalg.solve(moments.q11, quadratic_contraction(moments.q12, delta0))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"gradient covariance estimate is singular: {exc}") from exc
    q_term = 0.5 * np.linalg.solve(moments.h_anchor, quadratic_contraction(moments.q_tensor, delta0))

    info = mg_fisher_estimate(theta_hats, theta_bar, grads, grad_bar, eval_theta=theta_init)
    omega = gm_fisher_estimate(theta_hats, theta_bar, grads, grad_bar, eval_theta=theta_init)
    variance = omega.matrix @ moments.q11 @ omega.matrix.T

    theta_mg = theta_init - np.linalg.solve(info.matrix, grad_bar) - q12_term + q_term
    theta_gm = theta_init - omega.matrix @ grad_bar - q12_term + q_term
    local_h = local_hessian_estimate(fed, theta_init)
    theta_csl = theta_init - np.linalg.solve(local_h.matrix, grad_bar)

    zero = np.zeros(fed.d)
    return OneStepSuite(
        mg=OneStepResult(theta_mg, OS_MG, q12_term, q_term, variance),
        gm=OneStepResult(theta_gm, OS_GM, q12_term, q_term, variance),
        csl=OneStepResult(theta_csl, OS_CSL, zero, zero, None),
        avg=OneStepResult(theta_bar, OS_AVG, zero, zero, None),
        comm=log,
    )


def one_step_mg(fed: Federation, settings: NewtonSettings | None = None) -> OneStepResult:
    """Bias-adjusted one-step estimator driven by the MG information estimate."""
    return one_step_suite(fed, settings).mg


def one_step_gm(fed: Federation, settings: NewtonSettings | None = None) -> OneStepResult:
    """Bias-adjusted one-step estimator driven by the GM inverse estimate."""
    return one_step_suite(fed, settings).gm


def normal_quantile(p: float) -> float:
    """Standard normal quantile, accurate to machine precision."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile argument must lie in (0, 1)")
    return float(ndtri(p))


def confidence_intervals(
    result: OneStepResult, n: int, m: int, level: float = 0.95
) -> list[ConfidenceInterval]:
    """Per-coordinate Wald intervals theta_j +/- z * sqrt(V_jj / (n*m))."""
    if result.variance_hat is None:
        raise ValueError(f"one-step kind {result.kind!r} carries no variance estimate")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    diag = np.diag(result.variance_hat)
    if np.any(diag < 0):
        raise ValueError("variance estimate has a negative diagonal entry")
    z = normal_quantile(0.5 * (1.0 + level))
    half = z * np.sqrt(diag / (n * m))
    return [
        ConfidenceInterval(coordinate=j, lower=float(result.theta_os[j] - half[j]),
                           upper=float(result.theta_os[j] + half[j]), level=level)
        for j in range(result.theta_os.shape[0])
    ]


# --------------------------------------------------------------------------
# CSV serialization
# --------------------------------------------------------------------------


def _fmt(value: float) -> str:
    if value != value:  # NaN
        return "nan"
    return format(value, ".12g")


def trace_to_csv(trace: IterateTrace) -> str:
    lines = ["algorithm,init,t,deltaO,deltaTrue,gradBarNorm,commScalars"]
    for r in trace.rounds:
        lines.append(
            f"{trace.algorithm},{trace.init_kind},{r.t},{_fmt(r.delta_oracle)},"
            f"{_fmt(r.delta_truth)},{_fmt(r.grad_bar_norm)},{r.comm_scalars}"
        )
    return "\n".join(lines) + "\n"


def one_step_to_csv(
    results: list[OneStepResult],
    n: int,
    m: int,
    level: float = 0.95,
    theta0: np.ndarray | None = None,
) -> str:
    """``kind,coord,estimate,lower,upper,covered`` rows for one-step estimators.

    Interval cells stay empty for kinds without a variance estimate; the
    covered flag is emitted only when the true parameter is supplied.
    """
    lines = ["kind,coord,estimate,lower,upper,covered"]
    for res in results:
        intervals = confidence_intervals(res, n, m, level) if res.variance_hat is not None else None
        for j, est in enumerate(res.theta_os):
            if intervals is None:
                lower = upper = covered = ""
            else:
                ci = intervals[j]
                lower, upper = _fmt(ci.lower), _fmt(ci.upper)
                covered = "" if theta0 is None else str(int(ci.lower <= theta0[j] <= ci.upper))
            lines.append(f"{res.kind},{j + 1},{_fmt(float(est))},{lower},{upper},{covered}")
    return "\n".join(lines) + "\n"
