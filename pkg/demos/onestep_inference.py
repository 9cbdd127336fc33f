"""One-step bias-adjusted estimation with Wald confidence intervals.

A single gradient round after collecting the M-estimators is enough to build
the two adjusted one-step estimators, their plug-in variance, and per
coordinate confidence intervals. A small Monte-Carlo loop at the end shows
the intervals covering the truth at roughly the nominal rate, and the plain
average of M-estimators trailing behind on accuracy.
"""

import numpy as np

import fednewton as fn
from fednewton import solver

M, N, D = 100, 800, 2
LEVEL = 0.95

spec = fn.ModelSpec(fn.LOGISTIC, D, fn.default_theta0(D), seed=11)
fed = fn.make_federation(spec, M, N)
star = fn.pooled_oracle_fit(fed)
suite = solver.one_step_suite(fed)

print(f"logistic federation: m={M} x n={N}, d={D}, truth theta0 = {spec.theta0}")
print(f"\n{'method':>7} | {'distance to oracle':>19}")
for res in (suite.mg, suite.gm, suite.csl, suite.avg):
    print(f"{res.kind:>7} | {np.linalg.norm(res.theta_os - star):19.5f}")

print(f"\n{int(LEVEL * 100)}% intervals from the adjusted one-step estimators:")
print(solver.one_step_to_csv([suite.mg, suite.gm], N, M, LEVEL, theta0=spec.theta0))

REPS = 40
hits = 0
for rep in range(REPS):
    spec_r = fn.ModelSpec(fn.LOGISTIC, D, fn.default_theta0(D), seed=2000 + rep)
    fed_r = fn.make_federation(spec_r, M, N)
    res = solver.one_step_mg(fed_r)
    ci = solver.confidence_intervals(res, N, M, LEVEL)[0]
    hits += int(ci.lower <= spec_r.theta0[0] <= ci.upper)
print(f"coverage of coordinate 1 over {REPS} fresh replications: {hits / REPS:.2f} "
      f"(nominal {LEVEL})")
