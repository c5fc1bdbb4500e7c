import numpy as np
import pytest

from evsched.model import Ev, Group, PriceSeries, Scenario, TimeGrid


def make_scenario(
    fleet,
    prices,
    groups=None,
    eta=1.0,
    slot_hours=1.0,
    lookahead=1,
    alpha=1.0,
):
    """Assemble a scenario from a fleet, deriving groups from group_id labels
    unless an explicit group tuple is given."""
    if groups is None:
        from evsched.model import groups_from_fleet

        groups = groups_from_fleet(list(fleet), alpha=alpha)
    prices = PriceSeries(np.asarray(prices, dtype=float))
    return Scenario(
        grid=TimeGrid(num_slots=len(prices), slot_hours=slot_hours),
        fleet=tuple(fleet),
        groups=tuple(groups),
        prices=prices,
        eta=eta,
        lookahead=lookahead,
    )


def two_ev_counterexample(grouped=False, ev2_e_max=1.0):
    """Two EVs over two slots: EV1 can only charge in slot 0, EV2 in both.

    The aggregate-cost optimum x = (0, 2) cannot be split into per-EV
    schedules. With ``grouped`` the EVs sit in singleton per-duration groups
    (structurally valid); otherwise both share one group for the aggregate
    feasibility analysis. ``ev2_e_max = 2`` relaxes EV2's battery headroom so
    that (0, 2) clears the per-slot cap and the failure surfaces inside the
    disaggregation network instead.
    """
    ev1 = Ev(
        id="ev1", group_id="g1" if grouped else "g",
        p_max=1.0, e_req=1.0, e_max=1.0, e_cap=1.0,
        arrival_slot=0, departure_slot=1,
    )
    ev2 = Ev(
        id="ev2", group_id="g2" if grouped else "g",
        p_max=2.0, e_req=1.0, e_max=ev2_e_max, e_cap=ev2_e_max,
        arrival_slot=0, departure_slot=2,
    )
    if grouped:
        groups = (
            Group(id="g1", parking_slots=1, members=("ev1",), alpha=1.0, x_cap_total=1.0),
            Group(id="g2", parking_slots=2, members=("ev2",), alpha=1.0, x_cap_total=2.0),
        )
    else:
        groups = (
            Group(id="g", parking_slots=2, members=("ev1", "ev2"), alpha=1.0, x_cap_total=3.0),
        )
    return make_scenario((ev1, ev2), prices=[0.3, 0.1], groups=groups)


@pytest.fixture
def sec2b():
    return two_ev_counterexample()


@pytest.fixture
def sec2b_grouped():
    return two_ev_counterexample(grouped=True)


def single_ev_scenario(
    p_max=2.0,
    e_req=4.0,
    e_max=6.0,
    arrival=0,
    departure=6,
    T=8,
    prices=None,
    eta=1.0,
    slot_hours=1.0,
    lookahead=1,
):
    ev = Ev(
        id="ev1", group_id="g",
        p_max=p_max, e_req=e_req, e_max=e_max, e_cap=e_max,
        arrival_slot=arrival, departure_slot=departure,
    )
    if prices is None:
        prices = np.full(T, 0.2)
    return make_scenario((ev,), prices=prices, eta=eta,
                         slot_hours=slot_hours, lookahead=lookahead)
