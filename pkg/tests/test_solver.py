"""Iterative algorithms, one-step estimators, confidence intervals, CSVs."""

import sys

import numpy as np
import pytest

import fednewton as fn
from fednewton import solver
from fednewton.comm import Federation
from fednewton.fisher import SingularDesignError
from fednewton.model import (
    GAUSSIAN_QUADRATIC,
    LOGISTIC,
    POISSON,
    ModelSpec,
    default_theta0,
)


def _shared_gaussian_fed(m=8, n=60, d=3, seed=5):
    spec = ModelSpec(GAUSSIAN_QUADRATIC, d, default_theta0(d), seed=seed)
    return Federation(centers=fn.generate_shared_design_federation(spec, m, n), spec=spec)


def _fed(family, d, m, n, seed):
    spec = ModelSpec(family, d, default_theta0(d), seed=seed)
    return Federation(centers=fn.generate_federation(spec, m, n), spec=spec)


# ---------------------------------------------------------------------------
# Iterative algorithms
# ---------------------------------------------------------------------------


def test_shared_quadratic_converges_in_one_round():
    fed = _shared_gaussian_fed()
    for runner in (solver.run_mg_newton, solver.run_gm_newton):
        trace = runner(fed, solver.INIT_AVERAGE, 1)
        assert trace.status == "ok"
        assert trace.rounds[1].delta_oracle <= 1e-10


def test_fixed_point_at_oracle():
    fed = _fed(POISSON, 3, 30, 200, seed=2)
    star = fn.pooled_oracle_fit(fed)
    for runner in (solver.run_mg_newton, solver.run_gm_newton, solver.run_csl, solver.run_global_newton):
        trace = runner(fed, star, 1, theta_star=star)
        moved = np.linalg.norm(trace.rounds[1].theta - star)
        assert moved <= 1e-7, runner.__name__


def test_csl_single_center_is_plain_newton():
    fed = _fed(LOGISTIC, 2, 1, 300, seed=3)
    theta_hats, _, _ = fn.collect_m_estimators(fed)
    trace = solver.run_csl(fed, np.zeros(2), 20)
    dist = np.linalg.norm(trace.rounds[-1].theta - theta_hats[0])
    assert dist <= 1e-8


def test_csl_quadratic_heterogeneous_centers_contracts():
    fed = _fed(GAUSSIAN_QUADRATIC, 3, 6, 80, seed=4)
    trace = solver.run_csl(fed, solver.INIT_AVERAGE, 4)
    deltas = [r.delta_oracle for r in trace.rounds]
    assert all(b < a for a, b in zip(deltas, deltas[1:]))


def test_global_newton_dominates_after_one_round():
    fed = _fed(POISSON, 4, 50, 200, seed=6)
    star = fn.pooled_oracle_fit(fed)
    traces = {
        name: runner(fed, solver.INIT_AVERAGE, 2, theta_star=star)
        for name, runner in [
            ("gl", solver.run_global_newton),
            ("mg", solver.run_mg_newton),
            ("csl", solver.run_csl),
        ]
    }
    assert traces["gl"].rounds[1].delta_oracle <= traces["mg"].rounds[1].delta_oracle
    assert traces["gl"].rounds[1].delta_oracle <= traces["csl"].rounds[1].delta_oracle


def test_trace_round_zero_holds_initial_estimator():
    fed = _fed(POISSON, 3, 10, 150, seed=7)
    init = np.array([0.3, 0.3, 0.3])
    trace = solver.run_mg_newton(fed, init, 2)
    np.testing.assert_array_equal(trace.rounds[0].theta, init)
    assert trace.init_kind == "custom"
    assert trace.rounds[0].comm_scalars == fed.m * fed.d


def test_communication_identity_all_algorithms():
    fed = _fed(POISSON, 3, 12, 150, seed=8)
    star = fn.pooled_oracle_fit(fed)
    m, d, T = fed.m, fed.d, 3
    for runner in (solver.run_mg_newton, solver.run_gm_newton, solver.run_csl, solver.run_global_newton):
        trace = runner(fed, solver.INIT_AVERAGE, T, theta_star=star)
        assert trace.comm.total_scalars == m * d + 2 * T * m * d
        for r in trace.rounds:
            assert r.comm_scalars == m * d + 2 * r.t * m * d


def test_comm_scalars_nondecreasing_and_grad_norm_recorded():
    fed = _fed(POISSON, 3, 10, 150, seed=9)
    trace = solver.run_gm_newton(fed, solver.INIT_AVERAGE, 2)
    comm = [r.comm_scalars for r in trace.rounds]
    assert comm == sorted(comm)
    assert np.isfinite(trace.rounds[0].grad_bar_norm)
    assert np.isfinite(trace.rounds[1].grad_bar_norm)
    assert np.isnan(trace.rounds[2].grad_bar_norm)


def test_divergence_aborts_with_status():
    # A wildly wrong custom init makes the Poisson gradients explode.
    fed = _fed(POISSON, 3, 6, 100, seed=10)
    init = np.full(3, 40.0)
    trace = solver.run_mg_newton(fed, init, 5)
    assert trace.status == "diverged"
    assert len(trace.rounds) < 6


def test_singular_design_propagates_with_round():
    fed = _fed(LOGISTIC, 3, 3, 100, seed=11)  # m = d < d + 1
    with pytest.raises(SingularDesignError) as err:
        solver.run_mg_newton(fed, solver.INIT_AVERAGE, 1)
    assert "round 0" in str(err.value)


def test_gm_scalar_update_hand_check():
    # d = 1: one GM round is literally theta - omega * mean_gradient.
    fed = _fed(POISSON, 1, 12, 80, seed=18)
    theta_hats, theta_bar, _ = fn.collect_m_estimators(fed)
    grads, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta_bar)
    dev = theta_hats[:, 0] - theta_bar[0]
    gc = grads[:, 0] - grad_bar[0]
    omega = -np.sum(gc * dev) / np.sum(gc * gc)
    expected = theta_bar[0] - omega * grad_bar[0]
    trace = solver.run_gm_newton(fed, solver.INIT_AVERAGE, 1)
    assert trace.rounds[1].theta[0] == pytest.approx(expected, rel=1e-12)


def test_oracle_distance_basics():
    star = np.array([3.0, 4.0])
    assert solver.oracle_distance(star, star) == 0.0
    assert solver.oracle_distance(2 * star, star) == pytest.approx(1.0)
    assert solver.oracle_distance(np.zeros(2), star) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        solver.oracle_distance(star, np.zeros(2))


# ---------------------------------------------------------------------------
# One-step estimators
# ---------------------------------------------------------------------------


def test_one_step_quadratic_third_derivative_correction_vanishes():
    # The quadratic family has a zero third-derivative tensor, so that
    # correction is exactly zero. The gradient-Hessian cross moment does NOT
    # vanish in-sample (per-sample Hessians s s' vary within a center), so the
    # one-step estimate differs from the plain update by exactly that term.
    fed = _shared_gaussian_fed(m=8, n=60, d=3, seed=12)
    suite = solver.one_step_suite(fed)
    np.testing.assert_array_equal(suite.mg.q_correction, np.zeros(3))
    theta_hats, theta_bar, _ = fn.collect_m_estimators(fed)
    ids = [c.center_id for c in fed.ordered_centers()]
    theta0 = theta_hats[ids.index(fed.local_index)]
    grads, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta0)
    info = fn.mg_fisher_estimate(theta_hats, theta_bar, grads, grad_bar)
    plain = theta0 - np.linalg.solve(info.matrix, grad_bar)
    np.testing.assert_allclose(suite.mg.theta_os, plain - suite.mg.q12_correction, atol=1e-12)
    # The leftover cross-moment correction is a small-sample term.
    assert np.linalg.norm(suite.mg.q12_correction) <= 0.05 * np.linalg.norm(theta0)


def test_one_step_single_center_raises_singular_design():
    fed = _fed(LOGISTIC, 2, 1, 200, seed=13)
    with pytest.raises(SingularDesignError):
        solver.one_step_mg(fed)


def test_one_step_variance_is_symmetric_psd():
    fed = _fed(LOGISTIC, 2, 30, 300, seed=14)
    suite = solver.one_step_suite(fed)
    V = suite.mg.variance_hat
    assert np.max(np.abs(V - V.T)) <= 1e-10
    assert np.linalg.eigvalsh((V + V.T) / 2).min() >= -1e-10
    assert suite.gm.variance_hat is V or np.array_equal(suite.gm.variance_hat, V)


def test_one_step_beats_plain_csl_one_step():
    # One-step comparison study ordering at desk scale.
    mg_dist, csl_dist = [], []
    for rep in range(60):
        spec = ModelSpec(LOGISTIC, 4, default_theta0(4), seed=20_000 + rep)
        fed = Federation(centers=fn.generate_federation(spec, 100, 800), spec=spec)
        star = fn.pooled_oracle_fit(fed)
        suite = solver.one_step_suite(fed)
        mg_dist.append(np.linalg.norm(suite.mg.theta_os - star))
        csl_dist.append(np.linalg.norm(suite.csl.theta_os - star))
    assert np.mean(mg_dist) < np.mean(csl_dist)


def test_one_step_dominates_averaging():
    # The average of M-estimators carries an O(1/n) bias that the adjusted
    # one-step estimators do not.
    mg_dist, avg_dist = [], []
    for rep in range(60):
        spec = ModelSpec(LOGISTIC, 2, default_theta0(2), seed=30_000 + rep)
        fed = Federation(centers=fn.generate_federation(spec, 400, 400), spec=spec)
        star = fn.pooled_oracle_fit(fed)
        suite = solver.one_step_suite(fed)
        mg_dist.append(np.linalg.norm(suite.mg.theta_os - star))
        avg_dist.append(np.linalg.norm(suite.avg.theta_os - star))
    assert np.mean(mg_dist) < np.mean(avg_dist)


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------


def test_interval_half_width_known_quantile():
    res = solver.OneStepResult(
        theta_os=np.zeros(2), kind="MG_OS",
        q12_correction=np.zeros(2), q_correction=np.zeros(2), variance_hat=np.eye(2),
    )
    cis = solver.confidence_intervals(res, n=100, m=100, level=0.95)
    half = (cis[0].upper - cis[0].lower) / 2
    assert half == pytest.approx(1.959963984540054 / 100, abs=1e-9)


def test_interval_width_monotone_in_level():
    res = solver.OneStepResult(
        theta_os=np.zeros(1), kind="GM_OS",
        q12_correction=np.zeros(1), q_correction=np.zeros(1), variance_hat=np.eye(1),
    )
    w95 = solver.confidence_intervals(res, 50, 50, 0.95)[0]
    w99 = solver.confidence_intervals(res, 50, 50, 0.99)[0]
    assert (w99.upper - w99.lower) > (w95.upper - w95.lower)


def test_interval_requires_variance():
    res = solver.OneStepResult(
        theta_os=np.zeros(1), kind="AVG",
        q12_correction=np.zeros(1), q_correction=np.zeros(1), variance_hat=None,
    )
    with pytest.raises(ValueError):
        solver.confidence_intervals(res, 10, 10)


def test_interval_rejects_negative_variance_diagonal():
    res = solver.OneStepResult(
        theta_os=np.zeros(1), kind="MG_OS",
        q12_correction=np.zeros(1), q_correction=np.zeros(1),
        variance_hat=np.array([[-1.0]]),
    )
    with pytest.raises(ValueError):
        solver.confidence_intervals(res, 10, 10)


def test_normal_quantile_tabulated_values():
    assert solver.normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-9)
    assert solver.normal_quantile(0.995) == pytest.approx(2.5758293035489004, abs=1e-9)
    assert solver.normal_quantile(0.5) == 0.0


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------


def test_trace_csv_header_and_rows():
    fed = _fed(POISSON, 2, 8, 100, seed=15)
    trace = solver.run_gm_newton(fed, solver.INIT_AVERAGE, 2)
    text = solver.trace_to_csv(trace)
    lines = text.strip().split("\n")
    assert lines[0] == "algorithm,init,t,deltaO,deltaTrue,gradBarNorm,commScalars"
    assert len(lines) == 4
    cells = lines[1].split(",")
    assert cells[0] == "gm" and cells[1] == "average_m_est" and cells[2] == "0"


def test_one_step_csv_schema_and_coverage_flags():
    fed = _fed(LOGISTIC, 2, 30, 200, seed=16)
    suite = solver.one_step_suite(fed)
    text = solver.one_step_to_csv(
        [suite.mg, suite.avg], fed.n, fed.m, 0.95, theta0=fed.spec.theta0
    )
    lines = text.strip().split("\n")
    assert lines[0] == "kind,coord,estimate,lower,upper,covered"
    mg_rows = [l for l in lines[1:] if l.startswith("MG_OS")]
    avg_rows = [l for l in lines[1:] if l.startswith("AVG")]
    assert len(mg_rows) == 2 and len(avg_rows) == 2
    assert mg_rows[0].split(",")[5] in {"0", "1"}
    assert avg_rows[0].split(",")[3] == "" and avg_rows[0].split(",")[5] == ""


# ---------------------------------------------------------------------------
# Data-plane seal: solver code never touches raw center arrays directly
# ---------------------------------------------------------------------------


class _SpyCenter:
    """Proxy that records which package module touches the raw data arrays."""

    def __init__(self, inner, violations):
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "_violations", violations)

    def __getattr__(self, name):
        if name in ("S", "y"):
            frame = sys._getframe(1)
            while frame is not None:
                mod = frame.f_globals.get("__name__", "")
                if mod.startswith("fednewton."):
                    if mod == "fednewton.solver":
                        self._violations.append(mod)
                    break
                frame = frame.f_back
        return getattr(object.__getattribute__(self, "_inner"), name)

    def __setattr__(self, name, value):
        setattr(object.__getattribute__(self, "_inner"), name, value)


def test_solver_reads_center_data_only_through_lower_layers():
    spec = ModelSpec(POISSON, 3, default_theta0(3), seed=17)
    violations: list[str] = []
    centers = [_SpyCenter(c, violations) for c in fn.generate_federation(spec, 10, 150)]
    fed = Federation(centers=centers, spec=spec)
    solver.run_mg_newton(fed, solver.INIT_AVERAGE, 2)
    solver.run_gm_newton(fed, solver.INIT_AVERAGE, 1)
    solver.run_csl(fed, solver.INIT_AVERAGE, 1)
    solver.one_step_suite(fed)
    assert violations == []
    # The spy does see traffic from the sanctioned modules.
    probe = fed.centers[0].S
    assert probe.shape == (150, 3)
