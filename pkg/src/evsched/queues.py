"""Window-periodic virtual queues, their closed forms and bound audits.

Two backlog recursions appear in the analysis and both are housed here:

* ``net`` clamp (used by the live scheduler): the whole window's net change
  is added before clamping at zero,
  ``q(t+w) = max(q(t) + sum(a) - sum(x), 0)``.
* ``service`` clamp (the form the skip-ahead closed form solves): service is
  clamped first, arrivals always accumulate,
  ``q(t+w) = max(q(t) - sum(x), 0) + sum(a)``.

The two differ whenever the clamp binds while arrivals are positive; the
closed-form evaluator and the increment audits are stated for the ``service``
variant, the lookback floor ``q(t - tau) >= q(t) - w X`` for the ``net``
variant. Empirically all increment bounds hold for both.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Scenario

__all__ = [
    "backlog_series",
    "closed_form_backlog",
    "closed_form_backlog_series",
    "increment_audit",
    "lookback_lower_bound",
    "lookback_audit",
    "BoundConstants",
    "bound_constants",
    "QueueState",
    "export_queue_trace_csv",
]


def backlog_series(
    a: np.ndarray, x: np.ndarray, w: int, clamp: str = "net"
) -> np.ndarray:
    """Evolve the backlog recursion over a full horizon from zero start.

    The first ``w`` values are zero; each later value is driven by the
    arrivals and services of the ``w`` slots before it.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    T = len(a)
    if len(x) != T:
        raise ValueError("arrival and service series must have equal length")
    q = np.zeros(T)
    if clamp == "net":
        for t in range(T - w):
            q[t + w] = max(q[t] + a[t : t + w].sum() - x[t : t + w].sum(), 0.0)
    elif clamp == "service":
        for t in range(T - w):
            q[t + w] = max(q[t] - x[t : t + w].sum(), 0.0) + a[t : t + w].sum()
    else:
        raise ValueError(f"unknown clamp variant {clamp!r}")
    return q


def closed_form_backlog(
    a: np.ndarray,
    x: np.ndarray,
    w: int,
    t: int,
    n: int,
    q_t: float = 0.0,
) -> float:
    """Skip-ahead evaluation of the service-clamped backlog at ``t + n*w``.

    With a zero-initialized queue (``q_t = 0`` and ``t < w``) this is
    ``max over k < n of [sum_{i=k*w}^{n*w-1} a(t+i) - sum_{i=(k+1)*w}^{n*w-1}
    x(t+i)]``; a nonzero ``q_t`` adds the never-emptied branch
    ``q_t + sum a - sum x`` over the whole stretch.
    """
    if not (0 <= t < w):
        raise IndexError(f"t must lie in [0, w), got t={t}, w={w}")
    if n < 1:
        raise IndexError(f"n must be >= 1, got {n}")
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if t + n * w > len(a):
        raise IndexError(
            f"skip-ahead target {t + n * w} is past the series end {len(a)}"
        )
    a_win = a[t : t + n * w]
    x_win = x[t : t + n * w]
    # Candidate k: queue last empty at t + k*w.
    ca = np.concatenate(([0.0], np.cumsum(a_win)))
    cx = np.concatenate(([0.0], np.cumsum(x_win)))
    best = -np.inf
    for k in range(n):
        best = max(best, (ca[n * w] - ca[k * w]) - (cx[n * w] - cx[(k + 1) * w]))
    if q_t > 0.0:
        best = max(best, q_t + ca[n * w] - cx[n * w])
    return float(best)


def closed_form_backlog_series(
    a: np.ndarray, x: np.ndarray, w: int, t: int
) -> np.ndarray:
    """All skip-ahead values q(t + n*w), n = 1..n_max, from a zero start.

    Same closed form as ``closed_form_backlog`` with q(t) = 0, evaluated for
    every n at once: the max over k telescopes into a running maximum of
    ``cumsum(x)[(k+1)*w] - cumsum(a)[k*w]``.
    """
    if not (0 <= t < w):
        raise IndexError(f"t must lie in [0, w), got t={t}, w={w}")
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    n_max = (len(a) - t) // w
    if n_max < 1:
        return np.zeros(0)
    a_win = a[t : t + n_max * w]
    x_win = x[t : t + n_max * w]
    ca = np.concatenate(([0.0], np.cumsum(a_win)))
    cx = np.concatenate(([0.0], np.cumsum(x_win)))
    k = np.arange(n_max)
    head = np.maximum.accumulate(cx[(k + 1) * w] - ca[k * w])
    n = np.arange(1, n_max + 1)
    return (ca[n * w] - cx[n * w]) + head


def increment_audit(q: np.ndarray, w: int, X: float, tol: float = 1e-9) -> list[str]:
    """Check all four increment-bound families on a backlog trace.

    The trace must come from a zero-initialized recursion with arrivals and
    services bounded by ``X``. Returns one message per violated inequality
    (empty for any valid trace):

    * within-window one-step: |q(t+1+n*w) - q(t+n*w)| <= 2 X
    * within-window c-step:   |q(t+c+n*w) - q(t+n*w)| <= 2 c X
    * window boundary:        -2 X <= q(n*w) - q(n*w - 1) <= (w + 2) X
    * boundary c-step:        -2 c X <= q(n*w) - q(n*w - c) <= (w + 2 c) X
    """
    q = np.asarray(q, dtype=float)
    T = len(q)
    violations: list[str] = []

    # Within-window steps, offsets t..t+c staying inside one window.
    for c in range(1, w):
        idx = np.arange(w, T - c)
        idx = idx[(idx % w) <= w - c - 1]  # t in {0..w-c-1} relative to window
        if len(idx):
            diff = np.abs(q[idx + c] - q[idx])
            bad = np.flatnonzero(diff > 2 * c * X + tol)
            for i in bad:
                violations.append(
                    f"|q({idx[i] + c}) - q({idx[i]})| = {diff[i]:.6g} "
                    f"> {2 * c * X:.6g} (c={c})"
                )

    # Window boundaries; the c-step form covers c up to w - 1.
    boundaries = np.arange(w, T, w)
    for c in range(1, max(w, 2)):
        nw = boundaries[boundaries - c >= 0]
        if not len(nw):
            continue
        diff = q[nw] - q[nw - c]
        lo, hi = -2 * c * X, (w + 2 * c) * X
        # c = 1 is the (w + 2) X base case; larger c per the c-step form.
        if c == 1:
            hi = (w + 2) * X
        bad = np.flatnonzero((diff < lo - tol) | (diff > hi + tol))
        for i in bad:
            violations.append(
                f"q({nw[i]}) - q({nw[i] - c}) = {diff[i]:.6g} "
                f"outside [{lo:.6g}, {hi:.6g}]"
            )
    return violations


@dataclass(frozen=True)
class LookbackFloor:
    """Guaranteed queue floors implied by a large future observation."""

    window_floor: float  # q(n*w + tau) >= this whenever q((n+1)*w) >= M
    step_floor: float  # q(t - tau) >= this whenever q(t) >= M (tau < w)


def lookback_lower_bound(M: float, w: int, X: float) -> LookbackFloor:
    """Both lookback floors for a queue observed at level ``M``.

    The window-boundary variant loses ``2 w X`` (even ``w``) or
    ``(2 w - 1) X`` (odd ``w``); the per-step variant loses ``w X``.
    """
    drop = 2 * w * X if w % 2 == 0 else (2 * w - 1) * X
    return LookbackFloor(window_floor=M - drop, step_floor=M - w * X)


def lookback_audit(
    q: np.ndarray, w: int, X: float, tol: float = 1e-9
) -> list[str]:
    """Check both lookback floors at every applicable index of a trace."""
    q = np.asarray(q, dtype=float)
    T = len(q)
    violations: list[str] = []
    drop = 2 * w * X if w % 2 == 0 else (2 * w - 1) * X
    boundaries = np.arange(w, T, w)
    for tau in range(1, w + 1):
        nw = boundaries[boundaries - tau >= 0]
        bad = np.flatnonzero(q[nw - tau] < q[nw] - drop - tol)
        for i in bad:
            violations.append(
                f"q({nw[i] - tau}) = {q[nw[i] - tau]:.6g} < window floor "
                f"{q[nw[i]] - drop:.6g} implied by q({nw[i]})"
            )
    for tau in range(1, w):
        t = np.arange(tau, T)
        bad = np.flatnonzero(q[t - tau] < q[t] - w * X - tol)
        for i in bad:
            violations.append(
                f"q({t[i] - tau}) = {q[t[i] - tau]:.6g} < step floor "
                f"{q[t[i]] - w * X:.6g} implied by q({t[i]})"
            )
    return violations


@dataclass(frozen=True)
class BoundConstants:
    """Analytic constants entering the queue, delay and gap bounds."""

    group_id: str
    Q: float  # uniform backlog bound, kW
    Z: float  # uniform delay-queue bound
    B1: float  # window net-change square bound
    B2: float  # delay-queue drift constant
    X: float  # total group power, kW
    A: float  # per-slot demand peak, kW
    pi_max: float
    V: float


def bound_constants(
    s: Scenario, V: float | dict[str, float], w: int
) -> tuple[dict[str, BoundConstants], float]:
    """Per-group constants plus the total drift constant B.

    ``V`` may be a scalar or a per-group mapping. Requires demand profiles to
    have been built (each group's ``a_bound`` recorded).
    """
    pi_max = s.prices.pi_max
    per_group: dict[str, BoundConstants] = {}
    B = 0.0
    for g in s.groups:
        Vg = V[g.id] if isinstance(V, dict) else float(V)
        if g.a_bound is None:
            raise ValueError(
                f"group {g.id}: a_bound unset; build demand profiles first"
            )
        Xg = g.x_cap_total
        Ag = g.a_bound
        Q = Vg * pi_max + 2 * w * Xg
        Z = Vg * pi_max + 2 * g.alpha / g.parking_slots
        B1 = (w * max(Xg, Ag)) ** 2
        ar = g.alpha / g.parking_slots
        B2 = ar**2 + (w * Xg) ** 2 + 2 * Z * ar
        per_group[g.id] = BoundConstants(
            group_id=g.id, Q=Q, Z=Z, B1=B1, B2=B2, X=Xg, A=Ag, pi_max=pi_max, V=Vg
        )
        B += 0.5 * (B1 + 2 * w * Q * Ag + B2)
    return per_group, B


class QueueState:
    """Live virtual queues of one simulation (net-clamp recursion).

    Values are evaluated causally: ``q(t)`` and ``z(t)`` at decision time
    ``t`` are driven by the realized arrivals and implemented powers over
    ``[t - w, t - 1]``, with the first ``w`` values pinned to zero. The
    delay-queue indicator uses the backlog at the recursion's base time.
    """

    def __init__(self, s: Scenario, w: int):
        self._groups = [g.id for g in s.groups]
        self._alpha_over_r = {
            g.id: g.alpha / g.parking_slots for g in s.groups
        }
        self.w = w
        T = s.grid.num_slots
        self.q = {gid: np.zeros(T + 1) for gid in self._groups}
        self.z = {gid: np.zeros(T + 1) for gid in self._groups}

    def update(
        self,
        group_id: str,
        t: int,
        realized_a: np.ndarray,
        implemented_x: np.ndarray,
    ) -> tuple[float, float]:
        """Compute and store (q, z) at slot ``t`` from the last ``w`` slots."""
        w = self.w
        if t < w:
            return 0.0, 0.0
        if len(realized_a) != w or len(implemented_x) != w:
            raise ValueError(
                f"need exactly {w} realized slots of history, got "
                f"{len(realized_a)} arrivals / {len(implemented_x)} powers"
            )
        base = t - w
        q_prev = self.q[group_id][base]
        z_prev = self.z[group_id][base]
        served = float(np.sum(implemented_x))
        arrived = float(np.sum(realized_a))
        q_new = max(q_prev + arrived - served, 0.0)
        if q_new < 1e-9:  # float dust must not arm the delay indicator
            q_new = 0.0
        indicator = 1.0 if q_prev > 0.0 else 0.0
        z_new = max(
            z_prev - served + self._alpha_over_r[group_id] * indicator, 0.0
        )
        self.q[group_id][t] = q_new
        self.z[group_id][t] = z_new
        return q_new, z_new

    def value(self, group_id: str, t: int) -> tuple[float, float]:
        return float(self.q[group_id][t]), float(self.z[group_id][t])


def export_queue_trace_csv(
    path: str | Path, state: QueueState, num_slots: int
) -> None:
    """Write per-slot queue values as ``t,group_id,q_kw,z,indicator``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "group_id", "q_kw", "z", "indicator"])
        for gid in state._groups:
            for t in range(num_slots):
                q = state.q[gid][t]
                writer.writerow(
                    [t, gid, repr(float(q)), repr(float(state.z[gid][t])),
                     int(q > 0)]
                )
