"""Censored-survival evaluation: Kaplan-Meier, time-dependent concordance, Brier scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class StepFunction:
    """Right-continuous step function equal to 1 before the first breakpoint."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        i = np.searchsorted(self.breakpoints, t, side="right")
        out = np.concatenate([[1.0], self.values])[i]
        return float(out) if out.ndim == 0 else out

    def left_limit(self, t):
        t = np.asarray(t, dtype=np.float64)
        i = np.searchsorted(self.breakpoints, t, side="left")
        out = np.concatenate([[1.0], self.values])[i]
        return float(out) if out.ndim == 0 else out


def kaplan_meier(durations, events):
    """Product-limit estimate; events at a time leave before censorings at that time."""
    durations = np.asarray(durations, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    if durations.size == 0:
        raise ValueError("Kaplan-Meier needs at least one observation")
    times = np.unique(durations[events == 1])
    at_risk = (durations[None, :] >= times[:, None]).sum(1)
    deaths = ((durations[None, :] == times[:, None]) & (events[None, :] == 1)).sum(1)
    return StepFunction(times, np.cumprod(1.0 - deaths / at_risk))


def censoring_km(durations, events):
    """Kaplan-Meier estimate of the censoring survival function G."""
    return kaplan_meier(durations, 1 - np.asarray(events, dtype=np.int64))


def default_tau(durations, events):
    durations = np.asarray(durations, dtype=np.float64)
    observed = durations[np.asarray(events) == 1]
    if observed.size == 0:
        raise UndefinedMetricError("no observed events; tau is undefined")
    return float(observed.max())


def comparable_pairs(durations, events, tau):
    """Boolean (n, n) matrix of pairs (i, j) with an event at t_i < t_j, t_i <= tau."""
    t = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events)
    return (e[:, None] == 1) & (t[:, None] < t[None, :]) & (t[:, None] <= tau)


def tdc(durations, events, dcdf, tau=None, return_pairs=False):
    """Antolini-style time-dependent concordance.

    ``dcdf(t)`` must return every patient's predicted death probability at
    time ``t`` as an array of length n. A comparable pair (i, j) counts as
    concordant when DCDF_i(t_i) > DCDF_j(t_i); ties count one half.
    """
    t = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if tau is None:
        tau = default_tau(t, e)
    pairs = comparable_pairs(t, e, tau)
    total = int(pairs.sum())
    if total == 0:
        raise UndefinedMetricError("no comparable pairs for time-dependent concordance")
    score = 0.0
    for i in np.flatnonzero(pairs.any(axis=1)):
        risk = np.asarray(dcdf(t[i]), dtype=np.float64)
        others = risk[pairs[i]]
        score += (others < risk[i]).sum() + 0.5 * (others == risk[i]).sum()
    value = score / total
    return (value, total) if return_pairs else value


def brier(durations, events, scdf_at_t, t, censor_km=None):
    """IPCW Brier score at time ``t`` for predictions ``scdf_at_t`` (length n)."""
    d = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    s = np.asarray(scdf_at_t, dtype=np.float64)
    if censor_km is None:
        censor_km = censoring_km(d, e)
    died = (d <= t) & (e == 1)
    alive = d > t
    total = 0.0
    if died.any():
        g = censor_km.left_limit(d[died])
        if (g <= 0).any():
            raise UndefinedMetricError(f"censoring survival is zero before an event at or before t={t}")
        total += (s[died] ** 2 / g).sum()
    if alive.any():
        g_t = censor_km(t)
        if g_t <= 0:
            raise UndefinedMetricError(f"censoring survival is zero at t={t}")
        total += ((1.0 - s[alive]) ** 2).sum() / g_t
    return total / len(d)


def ibs(durations, events, scdf, tau=None, grid_size=100, censor_km=None):
    """Trapezoid-integrated Brier score over an even grid on [0, tau], divided by tau.

    ``scdf(t)`` returns every patient's predicted survival probability at t.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    d = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if tau is None:
        tau = default_tau(d, e)
    if censor_km is None:
        censor_km = censoring_km(d, e)
    grid = np.linspace(0.0, tau, grid_size)
    scores = np.array([brier(d, e, scdf(t), t, censor_km) for t in grid])
    return integrate_brier(grid, scores, tau)


def integrate_brier(grid, scores, tau):
    """Trapezoid integral of Brier scores over ``grid``, divided by ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(np.trapezoid(np.asarray(scores, dtype=np.float64), np.asarray(grid, dtype=np.float64)) / tau)


@dataclass
class EvalResult:
    tdc: float
    ibs: float
    tau: float
    n_comparable_pairs: int
    grid_size: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        extra = out.pop("extra")
        out.update(extra)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(durations, events, distributions, tau=None, grid_size=100):
    """TDC and IBS for a list of per-patient survival distributions."""
    d = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if tau is None:
        tau = default_tau(d, e)

    def scdf(t):
        return np.array([dist.scdf(t) for dist in distributions])

    def dcdf(t):
        return np.array([dist.dcdf(t) for dist in distributions])

    concordance, pairs = tdc(d, e, dcdf, tau, return_pairs=True)
    integrated = ibs(d, e, scdf, tau, grid_size)
    return EvalResult(float(concordance), integrated, float(tau), pairs, grid_size)
