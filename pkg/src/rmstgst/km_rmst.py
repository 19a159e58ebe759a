"""Unadjusted Kaplan-Meier restricted mean comparison.

The benchmark the adjusted analysis is measured against: product-limit
curves per arm, restricted means by rectangle sums on [0, tau], and the
classical variance built from remaining-area weights, with the arms
treated as independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientEventsError
from .trial_data import Snapshot

__all__ = ["KmCurve", "KmTestResult", "km_fit", "km_rmst", "km_rmst_test"]


@dataclass(frozen=True)
class KmCurve:
    """Product-limit estimate for one arm, tracked to the snapshot horizon.

    Arrays are indexed by the arm's distinct event times at or below
    tau: ``at_risk`` counts subjects with follow-up reaching each time,
    ``events`` the events there, ``survival`` the post-drop curve value.
    """

    arm: int
    tau: float
    times: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray


def km_fit(snap: Snapshot, arm: int) -> KmCurve:
    """Kaplan-Meier curve for one arm of a snapshot, horizon ``tau``."""
    idx = snap.arm == arm
    times = snap.time[idx]
    events = snap.event[idx].astype(bool)
    horizon = min(snap.u, snap.tau)
    ev = times[events & (times <= horizon)]
    uniq, counts = np.unique(ev, return_counts=True)
    order = np.sort(times)
    at_risk = times.size - np.searchsorted(order, uniq, side="left")
    surv = np.cumprod(1.0 - counts / at_risk)
    return KmCurve(
        arm=arm,
        tau=snap.tau,
        times=uniq,
        at_risk=at_risk.astype(np.int64),
        events=counts.astype(np.int64),
        survival=surv,
    )


def km_rmst(curve: KmCurve) -> tuple[float, float]:
    """Restricted mean and its variance for one Kaplan-Meier curve.

    The mean is the rectangle sum of the step curve from 0 to tau
    (unit height before the first event). The variance weights each
    event time's hazard noise d/(y(y-d)) by the squared area remaining
    under the curve from that time to tau; a time where the risk set is
    exhausted leaves no remaining area and contributes nothing.
    """
    tau = curve.tau
    te = curve.times
    if te.size == 0:
        return tau, 0.0
    widths = np.diff(np.append(te, tau))
    mu = float(te[0] + curve.survival @ widths)
    remaining = np.cumsum((curve.survival * widths)[::-1])[::-1]
    y = curve.at_risk.astype(np.float64)
    d = curve.events.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        noise = np.where(y > d, d / (y * (y - d)), 0.0)
    var = float(np.sum(remaining**2 * noise))
    return mu, var


@dataclass(frozen=True)
class KmTestResult:
    """Unadjusted RMST difference test, shaped like the adjusted result."""

    u: float
    tau: float
    mu0: float
    mu1: float
    delta: float
    se: float
    z: float
    info_level: float

    def to_dict(self) -> dict:
        return {
            "u": self.u,
            "tau": self.tau,
            "mu0": self.mu0,
            "mu1": self.mu1,
            "delta": self.delta,
            "se": self.se,
            "z": self.z,
            "info": self.info_level,
        }


def km_rmst_test(snap: Snapshot) -> KmTestResult:
    """Two-arm unadjusted RMST difference with independent-arm variance.

    Raises:
        InsufficientEventsError: an arm has no event at or before
            min(u, tau), or the variance degenerates to zero.
    """
    horizon = min(snap.u, snap.tau)
    curves = []
    for arm in (0, 1):
        curve = km_fit(snap, arm)
        if curve.times.size == 0:
            raise InsufficientEventsError(
                f"arm {arm} has no events at or before min(u, tau)={horizon}"
            )
        curves.append(curve)
    mu0, var0 = km_rmst(curves[0])
    mu1, var1 = km_rmst(curves[1])
    var = var0 + var1
    if var <= 0:
        raise InsufficientEventsError("degenerate variance: both risk sets exhausted at tau")
    se = float(np.sqrt(var))
    delta = mu1 - mu0
    return KmTestResult(
        u=snap.u,
        tau=snap.tau,
        mu0=mu0,
        mu1=mu1,
        delta=delta,
        se=se,
        z=delta / se,
        info_level=1.0 / var,
    )
