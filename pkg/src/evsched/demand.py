"""Per-EV and per-group charging demand profiles.

Each EV's requirement is spread into a block profile: full power for the
``t_min`` slots after arrival, one fractional tail slot, zero elsewhere.
Demand registers starting the slot after arrival so that the block plus the
tail carry exactly the required energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Ev, Scenario

__all__ = ["DemandProfile", "demand_profile", "min_full_power_slots", "build_demand"]


class DemandOverflowError(ValueError):
    """Demand profile does not fit inside the scheduling horizon."""


def min_full_power_slots(ev: Ev, eta: float, dt: float) -> int:
    """Number of whole slots at p_max needed before the fractional tail."""
    return int(np.floor(ev.e_req / (ev.p_max * eta * dt)))


def demand_profile(ev: Ev, eta: float, dt: float, T: int) -> np.ndarray:
    """Block demand profile of one EV (kW per slot, length ``T``).

    The profile is p_max on the ``t_min`` slots following arrival, then a
    tail of ``e_req/(eta*dt) - t_min*p_max`` at slot
    ``arrival + t_min + 1``. Summed over slots and multiplied by ``eta*dt``
    it reproduces ``e_req`` exactly, for any slot length.
    """
    t_min = min_full_power_slots(ev, eta, dt)
    tail_slot = ev.arrival_slot + t_min + 1
    if tail_slot >= T:
        raise DemandOverflowError(
            f"ev {ev.id}: demand profile runs to slot {tail_slot}, horizon is {T}"
        )
    a = np.zeros(T)
    a[ev.arrival_slot + 1 : tail_slot] = ev.p_max
    a[tail_slot] = ev.e_req / (eta * dt) - t_min * ev.p_max
    return a


@dataclass
class DemandProfile:
    """Demand profiles for a whole scenario, per EV and aggregated per group."""

    per_ev: dict[str, np.ndarray]
    per_group: dict[str, np.ndarray]
    t_min: dict[str, int]
    # EVs whose tail demand slot falls on/after their departure; kept, flagged.
    late_tails: tuple[str, ...] = ()

    def completion_target_slot(self, ev: Ev) -> int:
        """Slot by which the EV's demand has fully arrived (delay reference)."""
        return ev.arrival_slot + self.t_min[ev.id] + 1


def group_demand(profiles: DemandProfile, group_id: str) -> np.ndarray:
    try:
        return profiles.per_group[group_id]
    except KeyError:
        raise KeyError(f"unknown group id: {group_id!r}") from None


def build_demand(s: Scenario) -> DemandProfile:
    """Construct all demand profiles and record each group's demand peak."""
    T = s.grid.num_slots
    per_ev: dict[str, np.ndarray] = {}
    t_min: dict[str, int] = {}
    late: list[str] = []
    for ev in s.fleet:
        per_ev[ev.id] = demand_profile(ev, s.eta, s.grid.slot_hours, T)
        t_min[ev.id] = min_full_power_slots(ev, s.eta, s.grid.slot_hours)
        if ev.arrival_slot + t_min[ev.id] + 1 >= ev.departure_slot:
            late.append(ev.id)

    per_group: dict[str, np.ndarray] = {}
    for g in s.groups:
        agg = np.zeros(T)
        for v in g.members:
            agg += per_ev[v]
        per_group[g.id] = agg
        g.a_bound = float(agg.max()) if len(g.members) else 0.0

    return DemandProfile(
        per_ev=per_ev, per_group=per_group, t_min=t_min, late_tails=tuple(late)
    )
