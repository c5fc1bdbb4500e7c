"""Static problem data: time grid, fleet, groups and electricity prices.

Units are kW for power, kWh for energy, hours for durations and USD/kWh for
prices. Slots are 0-based internally. A recurring intermediate quantity is the
"power mass" of an EV, its energy requirement expressed as a sum of per-slot
powers: ``E / (eta * slot_hours)`` (kW-slots).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "TimeGrid",
    "Ev",
    "Group",
    "PriceSeries",
    "Scenario",
    "validate_scenario",
    "group_power_cap",
    "power_cap_series",
    "load_fleet_csv",
    "save_fleet_csv",
    "load_prices_csv",
    "save_prices_csv",
]

FLEET_CSV_HEADER = [
    "ev_id",
    "group_id",
    "arrival_slot",
    "departure_slot",
    "p_max_kw",
    "e_req_kwh",
    "e_max_kwh",
    "e_cap_kwh",
]

PRICES_CSV_HEADER = ["slot", "price_usd_per_kwh"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discrete time horizon."""

    num_slots: int
    slot_hours: float


@dataclass(frozen=True)
class Ev:
    """One electric vehicle and its charging task."""

    id: str
    group_id: str
    p_max: float  # kW
    e_req: float  # kWh, required charge
    e_max: float  # kWh, headroom to full battery
    e_cap: float  # kWh, battery capacity
    arrival_slot: int
    departure_slot: int  # exclusive: charging allowed on [arrival, departure)

    @property
    def parking_slots(self) -> int:
        return self.departure_slot - self.arrival_slot

    def is_active(self, t: int) -> bool:
        return self.arrival_slot <= t < self.departure_slot

    def required_mass(self, eta: float, slot_hours: float) -> float:
        """Required charge as a power sum (kW-slots)."""
        return self.e_req / (eta * slot_hours)

    def max_mass(self, eta: float, slot_hours: float) -> float:
        """Maximum admissible charge as a power sum (kW-slots)."""
        return self.e_max / (eta * slot_hours)


@dataclass
class Group:
    """EVs sharing the same parking duration.

    ``a_bound`` (the per-slot demand peak) is filled in once demand profiles
    have been constructed; it is derived data, not configuration.
    """

    id: str
    parking_slots: int
    members: tuple[str, ...]
    alpha: float
    x_cap_total: float  # sum of members' p_max, kW
    a_bound: float | None = None


@dataclass(frozen=True)
class PriceSeries:
    """Per-slot electricity price."""

    prices: np.ndarray  # USD/kWh, length num_slots

    def __post_init__(self):
        object.__setattr__(self, "prices", np.asarray(self.prices, dtype=float))

    @property
    def pi_max(self) -> float:
        return float(np.max(self.prices))

    def __len__(self) -> int:
        return len(self.prices)


@dataclass
class Scenario:
    """Immutable bundle of everything a policy needs to run."""

    grid: TimeGrid
    fleet: tuple[Ev, ...]
    groups: tuple[Group, ...]
    prices: PriceSeries
    eta: float
    lookahead: int

    _ev_index: dict = field(default=None, repr=False, compare=False)
    _group_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.fleet = tuple(self.fleet)
        self.groups = tuple(self.groups)
        self._ev_index = {ev.id: ev for ev in self.fleet}
        self._group_index = {g.id: g for g in self.groups}

    def ev(self, ev_id: str) -> Ev:
        return self._ev_index[ev_id]

    def group(self, group_id: str) -> Group:
        try:
            return self._group_index[group_id]
        except KeyError:
            raise KeyError(f"unknown group id: {group_id!r}") from None

    def group_members(self, group_id: str) -> list[Ev]:
        return [self.ev(v) for v in self.group(group_id).members]


def validate_scenario(s: Scenario) -> list[str]:
    """Return one description per violated structural invariant (empty = valid)."""
    problems: list[str] = []
    if s.grid.num_slots < 1:
        problems.append(f"grid: num_slots must be >= 1, got {s.grid.num_slots}")
    if s.grid.slot_hours <= 0:
        problems.append(f"grid: slot_hours must be > 0, got {s.grid.slot_hours}")
    if not (0.0 < s.eta <= 1.0):
        problems.append(f"scenario: eta must be in (0, 1], got {s.eta}")
    if not (1 <= s.lookahead <= s.grid.num_slots):
        problems.append(
            f"scenario: lookahead must be in [1, {s.grid.num_slots}], got {s.lookahead}"
        )

    for ev in s.fleet:
        if not (0.0 < ev.e_req <= ev.e_max <= ev.e_cap):
            problems.append(
                f"ev {ev.id}: needs 0 < e_req <= e_max <= e_cap, got "
                f"({ev.e_req}, {ev.e_max}, {ev.e_cap})"
            )
        if ev.arrival_slot >= ev.departure_slot:
            problems.append(
                f"ev {ev.id}: arrival_slot {ev.arrival_slot} must precede "
                f"departure_slot {ev.departure_slot}"
            )
        if ev.p_max <= 0:
            problems.append(f"ev {ev.id}: p_max must be > 0, got {ev.p_max}")
        if ev.group_id not in s._group_index:
            problems.append(f"ev {ev.id}: unknown group id {ev.group_id!r}")

    assigned: dict[str, list[str]] = {g.id: [] for g in s.groups}
    for ev in s.fleet:
        if ev.group_id in assigned:
            assigned[ev.group_id].append(ev.id)

    for g in s.groups:
        if g.alpha <= 0:
            problems.append(f"group {g.id}: alpha must be > 0, got {g.alpha}")
        if sorted(g.members) != sorted(assigned[g.id]):
            problems.append(
                f"group {g.id}: member list disagrees with fleet group assignment"
            )
        for v in g.members:
            ev = s._ev_index.get(v)
            if ev is None:
                problems.append(f"group {g.id}: member {v!r} not in fleet")
            elif ev.parking_slots != g.parking_slots:
                problems.append(
                    f"group {g.id}: member {v} parks for {ev.parking_slots} slots, "
                    f"group expects {g.parking_slots}"
                )
        expected_cap = sum(s._ev_index[v].p_max for v in g.members if v in s._ev_index)
        if g.members and abs(g.x_cap_total - expected_cap) > 1e-9:
            problems.append(
                f"group {g.id}: x_cap_total {g.x_cap_total} != sum of member "
                f"p_max {expected_cap}"
            )

    seen: dict[str, str] = {}
    for g in s.groups:
        for v in g.members:
            if v in seen:
                problems.append(f"ev {v}: listed in groups {seen[v]} and {g.id}")
            seen[v] = g.id
    for ev in s.fleet:
        if ev.id not in seen:
            problems.append(f"ev {ev.id}: not covered by any group")

    if len(s.prices) != s.grid.num_slots:
        problems.append(
            f"prices: length {len(s.prices)} != num_slots {s.grid.num_slots}"
        )
    return problems


def group_power_cap(s: Scenario, group_id: str, t: int) -> float:
    """Aggregate power cap of a group at slot ``t`` (kW).

    Sums ``min(e_max / (eta * slot_hours), p_max)`` over members active at
    ``t``; the energy term guards against overcharge within a single slot.
    """
    if not (0 <= t < s.grid.num_slots):
        raise IndexError(f"slot {t} outside grid of {s.grid.num_slots} slots")
    dt = s.grid.slot_hours
    total = 0.0
    for ev in s.group_members(group_id):
        if ev.is_active(t):
            total += min(ev.e_max / (s.eta * dt), ev.p_max)
    return total


def power_cap_series(s: Scenario, group_id: str) -> np.ndarray:
    """Vectorized `group_power_cap` over the whole horizon."""
    T = s.grid.num_slots
    dt = s.grid.slot_hours
    caps = np.zeros(T)
    for ev in s.group_members(group_id):
        per_slot = min(ev.e_max / (s.eta * dt), ev.p_max)
        caps[ev.arrival_slot : min(ev.departure_slot, T)] += per_slot
    return caps


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def load_fleet_csv(path: str | Path) -> list[Ev]:
    """Read the fleet interchange CSV (header required)."""
    evs: list[Ev] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(FLEET_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"fleet CSV missing columns: {sorted(missing)}")
        for row in reader:
            evs.append(
                Ev(
                    id=row["ev_id"],
                    group_id=row["group_id"],
                    arrival_slot=int(row["arrival_slot"]),
                    departure_slot=int(row["departure_slot"]),
                    p_max=float(row["p_max_kw"]),
                    e_req=float(row["e_req_kwh"]),
                    e_max=float(row["e_max_kwh"]),
                    e_cap=float(row["e_cap_kwh"]),
                )
            )
    return evs


def save_fleet_csv(path: str | Path, fleet: list[Ev]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FLEET_CSV_HEADER)
        for ev in fleet:
            writer.writerow(
                [
                    ev.id,
                    ev.group_id,
                    ev.arrival_slot,
                    ev.departure_slot,
                    repr(ev.p_max),
                    repr(ev.e_req),
                    repr(ev.e_max),
                    repr(ev.e_cap),
                ]
            )


def load_prices_csv(path: str | Path) -> PriceSeries:
    """Read the price interchange CSV ``slot,price_usd_per_kwh``."""
    rows: list[tuple[int, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PRICES_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"price CSV missing columns: {sorted(missing)}")
        for row in reader:
            rows.append((int(row["slot"]), float(row["price_usd_per_kwh"])))
    rows.sort()
    slots = [r[0] for r in rows]
    if slots != list(range(len(slots))):
        raise ValueError("price CSV slots must be contiguous from 0")
    return PriceSeries(np.array([r[1] for r in rows]))


def save_prices_csv(path: str | Path, prices: PriceSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRICES_CSV_HEADER)
        for t, p in enumerate(prices.prices):
            writer.writerow([t, repr(float(p))])


def groups_from_fleet(fleet: list[Ev], alpha: float = 1.0) -> tuple[Group, ...]:
    """Build the group table implied by the fleet's ``group_id`` labels."""
    by_id: dict[str, list[Ev]] = {}
    for ev in fleet:
        by_id.setdefault(ev.group_id, []).append(ev)
    groups = []
    for gid in sorted(by_id):
        members = by_id[gid]
        groups.append(
            Group(
                id=gid,
                parking_slots=members[0].parking_slots,
                members=tuple(ev.id for ev in members),
                alpha=alpha,
                x_cap_total=sum(ev.p_max for ev in members),
            )
        )
    return tuple(groups)
