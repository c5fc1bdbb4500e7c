"""Window energy bounds for aggregate schedules and the relaxation gap.

A group schedule is admissible only if, for every subset of slots, the power
it places inside the subset stays between what the group's EVs must receive
there (given limited capacity elsewhere) and what they can absorb there.
These bounds certify whether an aggregate schedule can be split into valid
per-EV schedules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .model import Scenario

__all__ = [
    "WindowBounds",
    "FeasibilityVerdict",
    "window_bounds",
    "check_p3_feasible",
    "relaxation_gap_bound",
]

EXHAUSTIVE_MAX_SLOTS = 20
DEFAULT_RANDOM_SUBSETS = 256


@dataclass(frozen=True)
class WindowBounds:
    lower: float  # kW-slots that must be delivered inside the window
    upper: float  # kW-slots that can be delivered inside the window
    window: frozenset[int]


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    witness: WindowBounds | None = None
    window_sum: float | None = None

    def __bool__(self) -> bool:
        return self.feasible


def window_bounds(s: Scenario, group_id: str, window: Iterable[int]) -> WindowBounds:
    """Lower/upper bound on the group's power sum over an arbitrary slot set."""
    U = frozenset(int(t) for t in window)
    if any(t < 0 or t >= s.grid.num_slots for t in U):
        raise IndexError("window contains slots outside the grid")
    denom = s.eta * s.grid.slot_hours
    lower = 0.0
    upper = 0.0
    for ev in s.group_members(group_id):
        avail = range(ev.arrival_slot, ev.departure_slot)
        inside = sum(1 for t in avail if t in U)
        outside = len(avail) - inside
        lower += max(0.0, ev.e_req / denom - ev.p_max * outside)
        upper += min(ev.e_max / denom, ev.p_max * inside)
    return WindowBounds(lower=lower, upper=upper, window=U)


def _subset_tables(s: Scenario, group_id: str):
    """Per-EV bitmask data for vectorized subset evaluation."""
    denom = s.eta * s.grid.slot_hours
    masks, p, lo_mass, hi_mass, avail_len = [], [], [], [], []
    for ev in s.group_members(group_id):
        m = 0
        for t in range(ev.arrival_slot, min(ev.departure_slot, s.grid.num_slots)):
            m |= 1 << t
        masks.append(m)
        p.append(ev.p_max)
        lo_mass.append(ev.e_req / denom)
        hi_mass.append(ev.e_max / denom)
        avail_len.append(bin(m).count("1"))
    return masks, p, lo_mass, hi_mass, avail_len


def _bounds_for_mask(mask: int, tables) -> tuple[float, float]:
    masks, p, lo_mass, hi_mass, avail_len = tables
    lower = 0.0
    upper = 0.0
    for m, pv, lo, hi, n_avail in zip(masks, p, lo_mass, hi_mass, avail_len):
        inside = bin(m & mask).count("1")
        outside = n_avail - inside
        lower += max(0.0, lo - pv * outside)
        upper += min(hi, pv * inside)
    return lower, upper


def _mask_to_set(mask: int) -> frozenset[int]:
    return frozenset(t for t in range(mask.bit_length()) if mask >> t & 1)


def check_p3_feasible(
    s: Scenario,
    group_id: str,
    x: np.ndarray,
    mode: str = "exhaustive",
    n_random: int = DEFAULT_RANDOM_SUBSETS,
    seed: int = 0,
    tol: float = 1e-9,
) -> FeasibilityVerdict:
    """Test an aggregate schedule against the window bounds.

    ``exhaustive`` checks every slot subset (horizon capped at 20 slots);
    ``sampled`` checks every contiguous window plus ``n_random`` seeded random
    subsets. The reported witness is the violating subset of lowest
    cardinality, ties broken by lexicographic slot order.
    """
    x = np.asarray(x, dtype=float)
    T = s.grid.num_slots
    if len(x) != T:
        raise ValueError(f"schedule length {len(x)} != num_slots {T}")
    tables = _subset_tables(s, group_id)

    if mode == "exhaustive":
        if T > EXHAUSTIVE_MAX_SLOTS:
            raise ValueError(
                f"exhaustive mode supports at most {EXHAUSTIVE_MAX_SLOTS} slots, "
                f"got {T}"
            )
        candidates = range(1 << T)
    elif mode == "sampled":
        rng = np.random.default_rng(seed)
        cand = {0}
        for a in range(T):
            m = 0
            for b in range(a, T):
                m |= 1 << b
                cand.add(m)
        for _ in range(n_random):
            bits = rng.integers(0, 2, size=T)
            cand.add(int(sum(1 << t for t in range(T) if bits[t])))
        candidates = sorted(cand)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    # Prefix sums make subset power sums cheap for contiguous masks; for the
    # general case we walk the set bits directly.
    # Witness order: smallest subset first; at equal size an upper-bound
    # (capacity excess) violation beats a lower-bound one; then slot order.
    violations: list[tuple[int, int, tuple, int, float, float, float]] = []
    for mask in candidates:
        total = 0.0
        m = mask
        while m:
            t = (m & -m).bit_length() - 1
            total += x[t]
            m &= m - 1
        lower, upper = _bounds_for_mask(mask, tables)
        if total < lower - tol or total > upper + tol:
            slots = tuple(sorted(_mask_to_set(mask)))
            kind = 0 if total > upper + tol else 1
            violations.append((len(slots), kind, slots, mask, lower, upper, total))

    if not violations:
        return FeasibilityVerdict(feasible=True)
    _, _, slots, mask, lower, upper, total = min(violations)
    return FeasibilityVerdict(
        feasible=False,
        witness=WindowBounds(lower=lower, upper=upper, window=_mask_to_set(mask)),
        window_sum=total,
    )


def relaxation_gap_bound(s: Scenario) -> float:
    """Worst-case per-slot cost increase from relaxing the subset constraints.

    Sums each EV's requirement times the price spread over its availability
    window, normalized by the horizon: small spread, small gap.
    """
    prices = s.prices.prices
    T = s.grid.num_slots
    total = 0.0
    for ev in s.fleet:
        window = prices[ev.arrival_slot : min(ev.departure_slot, T)]
        if len(window) == 0:
            continue
        total += ev.e_req * float(window.max() - window.min())
    return total / (s.eta * T * s.grid.slot_hours)
