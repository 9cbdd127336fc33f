"""Simulated coordinator/parallel-center protocol with exact message accounting.

This is the only path through which the distributed algorithms touch center
data. Costs are counted in scalars (8 bytes each if you want bytes): one
collection of M-estimators moves m*d scalars up, and each gradient round moves
m*d down (the broadcast parameter) plus m*d up (the returned gradients).
Aggregation always runs in center-id order, so permuting how centers are
stored never changes a single bit of any aggregate.

The pooled oracle fit deliberately bypasses the protocol: it exists only to
evaluate the algorithms against the all-data M-estimator and is never charged
to the log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .center import NewtonSettings, LocalFit, newton_fit_many
from .model import CenterData, ModelSpec, mean_response, linear_predictor

DIRECTION_UP = "up"
DIRECTION_DOWN = "down"


class FitError(RuntimeError):
    """Raised when one or more centers fail to produce a converged M-estimator."""

    def __init__(self, message: str, center_ids: list[int]):
        super().__init__(message)
        self.center_ids = center_ids


@dataclass
class CommEvent:
    round: int
    direction: str
    kind: str
    scalars: int


@dataclass
class CommLog:
    """Cumulative record of simulated communication."""

    rounds: int = 0
    scalars_up: int = 0
    scalars_down: int = 0
    events: list[CommEvent] = field(default_factory=list)

    @property
    def total_scalars(self) -> int:
        return self.scalars_up + self.scalars_down

    def record(self, direction: str, kind: str, scalars: int) -> None:
        if direction not in (DIRECTION_UP, DIRECTION_DOWN):
            raise ValueError(f"unknown direction {direction!r}")
        self.events.append(CommEvent(self.rounds, direction, kind, int(scalars)))
        if direction == DIRECTION_UP:
            self.scalars_up += int(scalars)
        else:
            self.scalars_down += int(scalars)

    def begin_round(self) -> None:
        self.rounds += 1

    def extend(self, other: "CommLog") -> None:
        offset = self.rounds
        for e in other.events:
            self.events.append(CommEvent(e.round + offset, e.direction, e.kind, e.scalars))
        self.rounds += other.rounds
        self.scalars_up += other.scalars_up
        self.scalars_down += other.scalars_down

    def to_csv(self) -> str:
        lines = ["round,direction,kind,scalars"]
        for e in self.events:
            lines.append(f"{e.round},{e.direction},{e.kind},{e.scalars}")
        return "\n".join(lines) + "\n"


@dataclass
class Federation:
    """An m-center federation plus the index of the local/coordinating center."""

    centers: list[CenterData]
    spec: ModelSpec
    local_index: int = 1

    def __post_init__(self):
        if not self.centers:
            raise ValueError("federation needs at least one center")
        dims = {c.d for c in self.centers}
        sizes = {c.n for c in self.centers}
        if len(dims) != 1 or len(sizes) != 1:
            raise ValueError("all centers must share the same n and d")
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids):
            raise ValueError("center ids must be unique")
        if self.local_index not in set(ids):
            raise ValueError(f"local_index {self.local_index} is not a center id")

    @property
    def m(self) -> int:
        return len(self.centers)

    @property
    def n(self) -> int:
        return self.centers[0].n

    @property
    def d(self) -> int:
        return self.centers[0].d

    @property
    def local(self) -> CenterData:
        for c in self.centers:
            if c.center_id == self.local_index:
                return c
        raise LookupError(f"no center with id {self.local_index}")

    def ordered_centers(self) -> list[CenterData]:
        return sorted(self.centers, key=lambda c: c.center_id)

    def stacked_data(self) -> tuple[np.ndarray, np.ndarray]:
        """(m, n, d) covariates and (m, n) responses in center-id order.

        Built once and reused; center data is immutable by contract.
        """
        cached = getattr(self, "_stacked", None)
        if cached is None:
            ordered = self.ordered_centers()
            cached = (np.stack([c.S for c in ordered]), np.stack([c.y for c in ordered]))
            object.__setattr__(self, "_stacked", cached)
        return cached


def make_federation(
    spec: ModelSpec, m: int, n: int, rep: int = 0, local_index: int = 1
) -> Federation:
    from .model import generate_federation

    return Federation(centers=generate_federation(spec, m, n, rep), spec=spec, local_index=local_index)


def _fit_all(fed: Federation, settings: NewtonSettings) -> None:
    """Fit every unfitted center in one batched Newton run."""
    pending = [c for c in fed.ordered_centers() if c.fit is None]
    if not pending:
        return
    S = np.stack([c.S for c in pending])
    y = np.stack([c.y for c in pending])
    theta, grad_norm, iterations, converged = newton_fit_many(fed.spec.family, S, y, settings)
    for i, c in enumerate(pending):
        c.fit = LocalFit(
            theta_hat=theta[i],
            grad_norm=float(grad_norm[i]),
            iterations=int(iterations[i]),
            converged=bool(converged[i]),
        )


def collect_m_estimators(
    fed: Federation, settings: NewtonSettings | None = None
) -> tuple[np.ndarray, np.ndarray, CommLog]:
    """One round: every center uploads its M-estimator; coordinator averages.

    Returns (stacked estimators in center-id order, their average, log delta).
    Any non-converged center aborts the collection with the offending ids.
    """
    settings = settings or NewtonSettings()
    _fit_all(fed, settings)
    ordered = fed.ordered_centers()
    bad = [c.center_id for c in ordered if not c.fit.converged]
    if bad:
        raise FitError(f"centers failed to converge: {bad}", center_ids=bad)
    theta_hats = np.stack([c.fit.theta_hat for c in ordered])
    theta_bar = np.mean(theta_hats, axis=0)
    log = CommLog()
    log.begin_round()
    log.record(DIRECTION_UP, "m_estimator", fed.m * fed.d)
    return theta_hats, theta_bar, log


def broadcast_and_collect_gradients(
    fed: Federation, theta: np.ndarray
) -> tuple[np.ndarray, np.ndarray, CommLog]:
    """One round: broadcast theta, collect each center's mean gradient.

    Returns (stacked gradients in center-id order, their average, log delta).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fed.d,):
        raise ValueError(f"dimension mismatch: theta {theta.shape}, federation d={fed.d}")
    S, y = fed.stacked_data()
    resid = mean_response(fed.spec.family, linear_predictor(S, theta)) - y
    grads = np.mean(resid[..., None] * S, axis=1)
    grad_bar = np.mean(grads, axis=0)
    log = CommLog()
    log.begin_round()
    log.record(DIRECTION_DOWN, "parameter", fed.m * fed.d)
    log.record(DIRECTION_UP, "gradient", fed.m * fed.d)
    return grads, grad_bar, log


def pooled_oracle_fit(fed: Federation, settings: NewtonSettings | None = None) -> np.ndarray:
    """M-estimator on the pooled N = m*n samples; out-of-band, never logged."""
    settings = settings or NewtonSettings()
    S, y = fed.stacked_data()
    S = S.reshape(1, fed.m * fed.n, fed.d)
    y = y.reshape(1, fed.m * fed.n)
    theta, grad_norm, _, converged = newton_fit_many(fed.spec.family, S, y, settings)
    if not converged[0]:
        raise FitError(
            f"pooled oracle fit failed to converge (grad norm {grad_norm[0]:.3e})", center_ids=[]
        )
    return theta[0]
