"""Coordinator protocol: aggregation, accounting, determinism."""

import numpy as np
import pytest

import fednewton as fn
from fednewton.center import mean_gradient
from fednewton.comm import CommLog, Federation, FitError
from fednewton.model import GAUSSIAN_QUADRATIC, LOGISTIC, POISSON, ModelSpec, default_theta0


def _federation(family, d, m, n, seed, shared=False):
    spec = ModelSpec(family, d, default_theta0(d), seed=seed)
    gen = fn.generate_shared_design_federation if shared else fn.generate_federation
    return Federation(centers=gen(spec, m, n), spec=spec)


# ---------------------------------------------------------------------------
# collect_m_estimators
# ---------------------------------------------------------------------------


def test_single_center_average_is_its_estimator():
    fed = _federation(LOGISTIC, 2, 1, 200, seed=1)
    theta_hats, theta_bar, log = fn.collect_m_estimators(fed)
    np.testing.assert_array_equal(theta_bar, theta_hats[0])
    np.testing.assert_array_equal(theta_bar, fed.centers[0].fit.theta_hat)


def test_shared_design_average_equals_pooled_least_squares():
    fed = _federation(GAUSSIAN_QUADRATIC, 3, 6, 80, seed=2, shared=True)
    _, theta_bar, _ = fn.collect_m_estimators(fed)
    S = np.concatenate([c.S for c in fed.ordered_centers()])
    y = np.concatenate([c.y for c in fed.ordered_centers()])
    pooled = np.linalg.solve(S.T @ S, S.T @ y)
    np.testing.assert_allclose(theta_bar, pooled, atol=1e-10)


def test_collect_accounting():
    fed = _federation(POISSON, 4, 8, 100, seed=3)
    _, _, log = fn.collect_m_estimators(fed)
    assert log.rounds == 1
    assert log.scalars_up == 32
    assert log.scalars_down == 0


def test_collect_raises_on_nonconverged_center_with_ids():
    fed = _federation(LOGISTIC, 2, 3, 100, seed=4)
    fn.collect_m_estimators(fed)
    fed.centers[1].fit.converged = False
    with pytest.raises(FitError) as err:
        fn.collect_m_estimators(fed)
    assert err.value.center_ids == [2]


# ---------------------------------------------------------------------------
# broadcast_and_collect_gradients
# ---------------------------------------------------------------------------


def test_gradients_match_per_center_loop_exactly():
    fed = _federation(POISSON, 3, 7, 120, seed=5)
    theta = np.array([0.3, -0.2, 0.1])
    grads, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta)
    loop = np.stack([mean_gradient(c, fed.spec, theta) for c in fed.ordered_centers()])
    np.testing.assert_array_equal(grads, loop)
    np.testing.assert_array_equal(grad_bar, np.mean(loop, axis=0))


def test_gradient_bar_vanishes_when_all_centers_identical():
    spec = ModelSpec(GAUSSIAN_QUADRATIC, 2, default_theta0(2), seed=6)
    base = fn.generate_federation(spec, 1, 50)[0]
    clones = [
        fn.CenterData(center_id=i, S=base.S.copy(), y=base.y.copy()) for i in range(1, 4)
    ]
    fed = Federation(centers=clones, spec=spec)
    theta_hats, theta_bar, _ = fn.collect_m_estimators(fed)
    _, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta_bar)
    assert np.linalg.norm(grad_bar) <= 1e-10


def test_broadcast_accounting():
    fed = _federation(LOGISTIC, 2, 100, 50, seed=7)
    _, _, log = fn.broadcast_and_collect_gradients(fed, np.zeros(2))
    assert log.rounds == 1
    assert log.scalars_down == 200
    assert log.scalars_up == 200


def test_aggregates_invariant_to_storage_permutation():
    fed = _federation(POISSON, 3, 6, 90, seed=8)
    theta = np.array([0.1, 0.1, -0.2])
    theta_hats, theta_bar, _ = fn.collect_m_estimators(fed)
    grads, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta)

    shuffled = Federation(centers=list(reversed(fed.centers)), spec=fed.spec)
    theta_hats2, theta_bar2, _ = fn.collect_m_estimators(shuffled)
    grads2, grad_bar2, _ = fn.broadcast_and_collect_gradients(shuffled, theta)
    np.testing.assert_array_equal(theta_hats, theta_hats2)
    np.testing.assert_array_equal(theta_bar, theta_bar2)
    np.testing.assert_array_equal(grads, grads2)
    np.testing.assert_array_equal(grad_bar, grad_bar2)


# ---------------------------------------------------------------------------
# pooled oracle
# ---------------------------------------------------------------------------


def test_oracle_equals_local_fit_for_single_center():
    fed = _federation(POISSON, 2, 1, 150, seed=9)
    theta_hats, _, _ = fn.collect_m_estimators(fed)
    star = fn.pooled_oracle_fit(fed)
    np.testing.assert_allclose(star, theta_hats[0], atol=1e-12)


def test_oracle_gaussian_closed_form():
    fed = _federation(GAUSSIAN_QUADRATIC, 3, 4, 60, seed=10)
    star = fn.pooled_oracle_fit(fed)
    S = np.concatenate([c.S for c in fed.ordered_centers()])
    y = np.concatenate([c.y for c in fed.ordered_centers()])
    np.testing.assert_allclose(star, np.linalg.solve(S.T @ S, S.T @ y), atol=1e-10)


def test_oracle_consistency_band():
    # ||theta* - theta0|| should be of order sqrt(d / N).
    dists = []
    for rep in range(50):
        spec = ModelSpec(LOGISTIC, 2, default_theta0(2), seed=800 + rep)
        fed = Federation(centers=fn.generate_federation(spec, 20, 5000), spec=spec)
        dists.append(np.linalg.norm(fn.pooled_oracle_fit(fed) - spec.theta0))
    bound = 5 * np.sqrt(2 / 100_000)
    assert np.mean(dists) <= bound


# ---------------------------------------------------------------------------
# CommLog
# ---------------------------------------------------------------------------


def test_commlog_sums_match_events():
    log = CommLog()
    log.begin_round()
    log.record("down", "parameter", 8)
    log.record("up", "gradient", 8)
    log.begin_round()
    log.record("up", "m_estimator", 4)
    assert log.scalars_down == sum(e.scalars for e in log.events if e.direction == "down")
    assert log.scalars_up == sum(e.scalars for e in log.events if e.direction == "up")
    assert log.rounds == 2


def test_commlog_extend_offsets_rounds():
    a = CommLog()
    a.begin_round()
    a.record("up", "m_estimator", 6)
    b = CommLog()
    b.begin_round()
    b.record("down", "parameter", 6)
    a.extend(b)
    assert a.rounds == 2
    assert [e.round for e in a.events] == [1, 2]
    assert a.total_scalars == 12


def test_commlog_csv_format():
    log = CommLog()
    log.begin_round()
    log.record("up", "m_estimator", 12)
    text = log.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "round,direction,kind,scalars"
    assert lines[1] == "1,up,m_estimator,12"


def test_federation_validation():
    spec = ModelSpec(LOGISTIC, 2, default_theta0(2), seed=1)
    centers = fn.generate_federation(spec, 2, 50)
    with pytest.raises(ValueError):
        Federation(centers=centers, spec=spec, local_index=9)
    dup = [centers[0], centers[0]]
    with pytest.raises(ValueError):
        Federation(centers=dup, spec=spec)
