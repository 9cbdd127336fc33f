"""Compare four estimators of the Fisher information on a simulated federation.

The cross-center estimators (MG, GM) need only M-estimators and gradients,
one d-vector per center per round. The local Hessian (LC) is the surrogate
baseline; the pooled Hessian (GL) is an oracle that would require shipping
raw data. Watch the MG/GM errors fall as n grows while LC barely moves.
"""

import numpy as np

import fednewton as fn
from fednewton.fisher import fisher_error, inverse_fisher_error, reference_fisher

D = 4
SIGMA2 = 1 / 256
M = 200
REPS = 30

spec0 = fn.ModelSpec(fn.LOGISTIC, D, fn.default_theta0(D))
print(f"reference information matrix: logistic d={D}, 2M Monte-Carlo draws ...")
ref = reference_fisher(spec0, mc_samples=2_000_000, seed=1)
print(np.array_str(ref.matrix, precision=4))

print(f"\nmean relative errors over {REPS} replications, m={M} centers, "
      f"theta ~ N(theta0, {SIGMA2} I)\n")
print(f"{'n':>6} | {'LC':>8} {'GL':>8} {'MG':>8} {'GM':>8}   (error vs information matrix)")
for n in (100, 200, 400, 800):
    errs = {k: [] for k in ("LC", "GL", "MG", "GM")}
    for rep in range(REPS):
        spec = fn.ModelSpec(fn.LOGISTIC, D, fn.default_theta0(D), seed=1000 + rep)
        fed = fn.make_federation(spec, M, n, rep=rep)
        theta_hats, theta_bar, _ = fn.collect_m_estimators(fed)
        rng = np.random.default_rng(5000 + rep)
        theta = spec.theta0 + np.sqrt(SIGMA2) * rng.standard_normal(D)
        grads, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta)
        errs["LC"].append(fisher_error(fn.local_hessian_estimate(fed, theta).matrix, ref.matrix))
        errs["GL"].append(fisher_error(fn.global_hessian_estimate(fed, theta).matrix, ref.matrix))
        errs["MG"].append(
            fisher_error(fn.mg_fisher_estimate(theta_hats, theta_bar, grads, grad_bar).matrix, ref.matrix)
        )
        omega = fn.gm_fisher_estimate(theta_hats, theta_bar, grads, grad_bar).matrix
        errs["GM"].append(fisher_error(np.linalg.inv(omega), ref.matrix))
    print(f"{n:>6} | " + " ".join(f"{np.mean(errs[k]):8.4f}" for k in ("LC", "GL", "MG", "GM")))

print("\nSame comparison for the inverse information (one n):")
n = 400
errs = {k: [] for k in ("LC", "GM")}
for rep in range(REPS):
    spec = fn.ModelSpec(fn.LOGISTIC, D, fn.default_theta0(D), seed=1000 + rep)
    fed = fn.make_federation(spec, M, n, rep=rep)
    theta_hats, theta_bar, _ = fn.collect_m_estimators(fed)
    rng = np.random.default_rng(5000 + rep)
    theta = spec.theta0 + np.sqrt(SIGMA2) * rng.standard_normal(D)
    grads, grad_bar, _ = fn.broadcast_and_collect_gradients(fed, theta)
    errs["LC"].append(inverse_fisher_error(fn.local_hessian_estimate(fed, theta).matrix, ref.matrix))
    omega = fn.gm_fisher_estimate(theta_hats, theta_bar, grads, grad_bar).matrix
    errs["GM"].append(inverse_fisher_error(np.linalg.inv(omega), ref.matrix))
print(f"n={n}: inverse-error LC={np.mean(errs['LC']):.4f}  GM={np.mean(errs['GM']):.4f}")
