"""Splitting a group schedule into per-EV schedules.

Two routes:

* offline: build a circulation network with per-edge lower/upper bounds
  (source -> slot -> EV -> collector -> source) and solve it by the standard
  lower-bound-elimination reduction to a single max-flow. Power values are
  scaled to integers at 1e-6 kW so the flow computation is exact.
* online: a FIFO ledger that serves queued demand mass in arrival order,
  one slot at a time.

`hoffman_verify` enumerates all node subsets of a small network and checks
the cut condition characterizing circulation feasibility; it must agree with
the max-flow verdict.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
import math
from math import inf

import networkx as nx
import numpy as np

from .model import Scenario, power_cap_series

__all__ = [
    "CirculationNetwork",
    "DisaggregationResult",
    "build_circulation_network",
    "circulation_disaggregate",
    "hoffman_verify",
    "FifoLedger",
    "fifo_disaggregate",
]

SOURCE = "s"
COLLECTOR = "r"
FLOW_SCALE = 10**6  # 1e-6 kW resolution


def _slot(t: int) -> tuple:
    return ("slot", t)


def _ev(ev_id: str) -> tuple:
    return ("ev", ev_id)


@dataclass(frozen=True)
class CirculationNetwork:
    """Directed graph with [lower, upper] bounds per edge."""

    nodes: tuple
    edges: tuple  # (u, v, lower, upper)

    def check_edge_bounds(self) -> list[str]:
        return [
            f"edge {u}->{v}: lower {lo} > upper {hi}"
            for (u, v, lo, hi) in self.edges
            if lo > hi
        ]


def build_circulation_network(
    s: Scenario, group_id: str, x: np.ndarray
) -> CirculationNetwork:
    x = np.asarray(x, dtype=float)
    T = s.grid.num_slots
    denom = s.eta * s.grid.slot_hours
    members = s.group_members(group_id)

    nodes = [SOURCE, COLLECTOR]
    nodes += [_slot(t) for t in range(T)]
    nodes += [_ev(ev.id) for ev in members]

    edges = []
    for t in range(T):
        edges.append((SOURCE, _slot(t), float(x[t]), float(x[t])))
    for ev in members:
        for t in range(ev.arrival_slot, min(ev.departure_slot, T)):
            edges.append((_slot(t), _ev(ev.id), 0.0, ev.p_max))
        edges.append((_ev(ev.id), COLLECTOR, ev.e_req / denom, ev.e_max / denom))
    edges.append((COLLECTOR, SOURCE, 0.0, inf))
    return CirculationNetwork(nodes=tuple(nodes), edges=tuple(edges))


@dataclass
class DisaggregationResult:
    feasible: bool
    # per-EV power schedules (kW, length T); empty when infeasible
    powers: dict[str, np.ndarray] = field(default_factory=dict)
    # node subset whose cut condition fails; None when feasible
    certificate: frozenset | None = None


def _scaled(value: float) -> int:
    return int(round(value * FLOW_SCALE))


def _scaled_lower(value: float) -> int:
    # round toward feasibility so float fuzz cannot tighten a bound
    return int(math.floor(value * FLOW_SCALE + 1e-3))


def _scaled_upper(value: float) -> int:
    return int(math.ceil(value * FLOW_SCALE - 1e-3))


def circulation_disaggregate(
    s: Scenario, group_id: str, x: np.ndarray
) -> DisaggregationResult:
    """Split an aggregate schedule into per-EV schedules, or certify failure.

    Preconditions: 0 <= x(t) <= group power cap at every slot. Feasible
    results satisfy the per-slot sum, per-EV power caps, availability masks
    and per-EV total-energy bounds to within the 1e-6 kW flow resolution.
    """
    x = np.asarray(x, dtype=float)
    T = s.grid.num_slots
    caps = power_cap_series(s, group_id)
    if np.any(x < -1e-9) or np.any(x > caps + 1e-9):
        raise ValueError("aggregate schedule violates per-slot group power caps")

    net = build_circulation_network(s, group_id, x)

    # Lower-bound elimination: replace each edge by capacity (upper - lower)
    # and move the mandatory flow into node imbalances.
    G = nx.DiGraph()
    G.add_nodes_from(net.nodes)
    excess: dict = {n: 0 for n in net.nodes}
    big = _scaled(float(np.sum(x)) + sum(e[3] for e in net.edges if e[3] is not inf))
    for u, v, lo, hi in net.edges:
        lo_i = _scaled_lower(lo)
        hi_i = big if hi is inf else max(_scaled_upper(hi), lo_i)
        G.add_edge(u, v, capacity=hi_i - lo_i, lower=lo_i)
        excess[v] += lo_i
        excess[u] -= lo_i

    super_s, super_t = ("super", "s"), ("super", "t")
    need = 0
    for n, b in excess.items():
        if b > 0:
            G.add_edge(super_s, n, capacity=b, lower=0)
            need += b
        elif b < 0:
            G.add_edge(n, super_t, capacity=-b, lower=0)

    flow_value, flow = nx.maximum_flow(G, super_s, super_t)
    if flow_value >= need:
        powers = {
            ev.id: np.zeros(T) for ev in s.group_members(group_id)
        }
        for (u, v) in G.edges():
            if isinstance(u, tuple) and u[0] == "slot" and isinstance(v, tuple) and v[0] == "ev":
                f = flow[u][v] + G[u][v]["lower"]
                powers[v[1]][u[1]] = f / FLOW_SCALE
        return DisaggregationResult(feasible=True, powers=powers)

    # Min-cut certificate: nodes reachable from the super source in the
    # residual graph form a set violating the cut condition of the original
    # bounded network.
    residual = nx.DiGraph()
    for u, v in G.edges():
        r = G[u][v]["capacity"] - flow[u][v]
        if r > 0:
            residual.add_edge(u, v)
        if flow[u][v] > 0:
            residual.add_edge(v, u)
    reach = {super_s}
    stack = [super_s]
    while stack:
        n = stack.pop()
        for m in residual.successors(n) if n in residual else []:
            if m not in reach:
                reach.add(m)
                stack.append(m)
    witness = frozenset(n for n in reach if n not in (super_s, super_t))
    return DisaggregationResult(feasible=False, certificate=witness)


@dataclass(frozen=True)
class HoffmanVerdict:
    feasible: bool
    failing_subset: frozenset | None = None
    lower_in: float | None = None
    upper_out: float | None = None


HOFFMAN_MAX_NODES = 24


def hoffman_verify(net: CirculationNetwork, tol: float = 1e-9) -> HoffmanVerdict:
    """Exhaustively check the cut condition over all node subsets.

    For every subset W, the lower bounds entering W must not exceed the upper
    bounds leaving W. Returns the first failing subset in (cardinality,
    node-order) order, or a feasible verdict.
    """
    nodes = list(net.nodes)
    if len(nodes) > HOFFMAN_MAX_NODES:
        raise ValueError(
            f"hoffman_verify supports at most {HOFFMAN_MAX_NODES} nodes, "
            f"got {len(nodes)}"
        )
    index = {n: i for i, n in enumerate(nodes)}
    indexed_edges = [(index[u], index[v], lo, hi) for u, v, lo, hi in net.edges]
    for size in range(1, len(nodes)):
        for combo in combinations(range(len(nodes)), size):
            W = set(combo)
            lower_in = 0.0
            upper_out = 0.0
            for ui, vi, lo, hi in indexed_edges:
                if ui not in W and vi in W:
                    lower_in += lo
                elif ui in W and vi not in W:
                    if hi is inf:
                        upper_out = inf
                        break
                    upper_out += hi
            if lower_in > upper_out + tol:
                return HoffmanVerdict(
                    feasible=False,
                    failing_subset=frozenset(nodes[i] for i in W),
                    lower_in=lower_in,
                    upper_out=upper_out,
                )
    return HoffmanVerdict(feasible=True)


# ---------------------------------------------------------------------------
# Online FIFO disaggregation
# ---------------------------------------------------------------------------

@dataclass
class _DemandItem:
    arrival_slot: int
    ev_id: str
    mass: float  # kW-slots outstanding


class FifoLedger:
    """Per-group queue of demand arrivals and per-EV served energy.

    Mass bookkeeping is in kW-slots (multiply by eta * slot_hours for kWh).
    Items are served strictly in (arrival slot, ev id) order; an EV past its
    departure can no longer be served, its leftover mass is tallied as
    expired.
    """

    def __init__(self, s: Scenario, group_id: str):
        self._scenario = s
        self.group_id = group_id
        self.items: deque[_DemandItem] = deque()
        self.served: dict[str, float] = {
            v: 0.0 for v in s.group(group_id).members
        }
        self.expired_mass: float = 0.0

    def add_arrivals(self, t: int, per_ev_demand: dict[str, float]) -> None:
        """Queue slot-``t`` demand, ordered by ev id within the slot."""
        for ev_id in sorted(per_ev_demand):
            mass = per_ev_demand[ev_id]
            if mass > 1e-12:
                self.items.append(_DemandItem(t, ev_id, mass))

    def outstanding(self) -> float:
        return sum(item.mass for item in self.items)

    def drop_expired(self, t: int) -> None:
        keep = deque()
        for item in self.items:
            if self._scenario.ev(item.ev_id).departure_slot <= t:
                self.expired_mass += item.mass
            else:
                keep.append(item)
        self.items = keep


def fifo_disaggregate(
    s: Scenario, group_id: str, x_t: float, t: int, ledger: FifoLedger
) -> tuple[dict[str, float], float]:
    """Allocate slot power ``x_t`` (kW) to EVs in demand-arrival order.

    Each EV is capped at p_max per slot and can only be served while parked.
    Returns (per-EV allocations, unallocated remainder). The ledger's served
    totals are updated in place.
    """
    if x_t < 0:
        raise ValueError(f"x_t must be non-negative, got {x_t}")
    ledger.drop_expired(t)
    alloc: dict[str, float] = {}
    power_left = x_t
    blocked: list[_DemandItem] = []
    while power_left > 1e-12 and ledger.items:
        item = ledger.items[0]
        ev = s.ev(item.ev_id)
        if not ev.is_active(t):
            blocked.append(ledger.items.popleft())
            continue
        headroom = ev.p_max - alloc.get(ev.id, 0.0)
        give = min(item.mass, headroom, power_left)
        if give <= 1e-12:
            blocked.append(ledger.items.popleft())
            continue
        alloc[ev.id] = alloc.get(ev.id, 0.0) + give
        ledger.served[ev.id] += give
        power_left -= give
        item.mass -= give
        if item.mass <= 1e-12:
            ledger.items.popleft()
    for item in reversed(blocked):
        ledger.items.appendleft(item)
    return alloc, power_left
