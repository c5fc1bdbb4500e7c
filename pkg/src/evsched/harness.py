"""Scenario generation, price-noise injection, sweeps and experiment runs.

Synthetic fleets follow a commuter shape: arrivals cluster around a morning
peak, parking durations come from a small discrete set (which is what forms
the duration groups), and each EV charges from a random initial state of
charge up to a common target. The default price curve is a duck-curve daily
shape: moderate morning, cheap midday, expensive evening.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import Ev, PriceSeries, Scenario, TimeGrid, groups_from_fleet
from .policies import SUMMARY_COLUMNS, RunReport, simulate

__all__ = [
    "ExperimentConfig",
    "duck_curve_prices",
    "generate_scenario",
    "generate_stationary_scenario",
    "NoisyForecast",
    "apply_price_noise",
    "find_optimal_V",
    "run_experiment",
]

SERVED_TOL_KWH = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment byte for byte."""

    num_evs: int = 100
    num_slots: int = 288
    slot_hours: float = 5.0 / 60.0
    eta: float = 0.95
    arrival_peak_slot: int = 96  # 8:00 with 5-minute slots
    arrival_std_slots: float = 18.0
    duration_choices: tuple[int, ...] = (48, 72, 96, 120, 144)
    soc_min: float = 0.25
    soc_max: float = 0.79
    target_soc: float = 0.80
    p_min_kw: float = 150.0
    p_max_kw: float = 350.0
    e_cap_min_kwh: float = 200.0
    e_cap_max_kwh: float = 400.0
    alpha: float = 1.0
    lookahead: int = 5
    policies: tuple[str, ...] = ("offline", "greedy", "mpc", "dpp")
    V: float = 10.0
    V_per_group: dict[str, float] | None = None
    sigma: float = 0.0
    seed: int = 0
    out_dir: str = "out"
    trials: int = 1

    def validate(self) -> None:
        if self.num_evs < 1:
            raise ConfigError(f"num_evs must be >= 1, got {self.num_evs}")
        if not (0.0 < self.soc_min <= self.soc_max < self.target_soc <= 1.0):
            raise ConfigError(
                "need 0 < soc_min <= soc_max < target_soc <= 1, got "
                f"({self.soc_min}, {self.soc_max}, {self.target_soc})"
            )
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if min(self.duration_choices) < 2:
            raise ConfigError("parking durations must be at least 2 slots")


def duck_curve_prices(num_slots: int, slot_hours: float) -> PriceSeries:
    """Deterministic daily price shape, repeated past 24 hours.

    Morning shoulder, midday dip, evening peak; always positive.
    """
    hours = (np.arange(num_slots) * slot_hours) % 24.0
    p = (
        0.15
        + 0.05 * np.exp(-((hours - 8.0) / 2.0) ** 2)
        + 0.12 * np.exp(-((hours - 19.5) / 2.2) ** 2)
        - 0.09 * np.exp(-((hours - 13.0) / 2.8) ** 2)
    )
    return PriceSeries(p)


def _draw_fleet(cfg: ExperimentConfig, rng: np.random.Generator) -> list[Ev]:
    T = cfg.num_slots
    fleet: list[Ev] = []
    for i in range(cfg.num_evs):
        duration = int(rng.choice(np.array(cfg.duration_choices)))
        arrival = int(
            np.clip(
                round(rng.normal(cfg.arrival_peak_slot, cfg.arrival_std_slots)),
                0,
                T - duration,
            )
        )
        p_max = float(rng.uniform(cfg.p_min_kw, cfg.p_max_kw))
        e_cap = float(rng.uniform(cfg.e_cap_min_kwh, cfg.e_cap_max_kwh))
        soc = float(rng.uniform(cfg.soc_min, cfg.soc_max))
        e_req = (cfg.target_soc - soc) * e_cap
        e_max = (1.0 - soc) * e_cap
        fleet.append(
            Ev(
                id=f"ev{i:04d}",
                group_id=f"g{duration:03d}",
                p_max=p_max,
                e_req=e_req,
                e_max=e_max,
                e_cap=e_cap,
                arrival_slot=arrival,
                departure_slot=arrival + duration,
            )
        )
    return fleet


def generate_scenario(cfg: ExperimentConfig, prices: PriceSeries | None = None) -> Scenario:
    """Deterministic synthetic scenario for a fixed config and seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    fleet = _draw_fleet(cfg, rng)
    groups = groups_from_fleet(fleet, alpha=cfg.alpha)
    if prices is None:
        prices = duck_curve_prices(cfg.num_slots, cfg.slot_hours)
    return Scenario(
        grid=TimeGrid(num_slots=cfg.num_slots, slot_hours=cfg.slot_hours),
        fleet=tuple(fleet),
        groups=groups,
        prices=prices,
        eta=cfg.eta,
        lookahead=cfg.lookahead,
    )


def generate_stationary_scenario(
    num_days: int,
    evs_per_day: int,
    seed: int = 0,
    slots_per_day: int = 288,
    slot_hours: float = 5.0 / 60.0,
    alpha: float = 1.0,
    lookahead: int = 5,
    price_range: tuple[float, float] = (0.05, 0.35),
) -> Scenario:
    """Long horizon with the same daily arrival pattern and i.i.d. prices.

    The last day receives no arrivals so queues can drain before the horizon
    ends. One template fleet is drawn once and repeated every day.
    """
    rng = np.random.default_rng(seed)
    T = num_days * slots_per_day
    template_cfg = ExperimentConfig(
        num_evs=evs_per_day,
        num_slots=slots_per_day,
        slot_hours=slot_hours,
        alpha=alpha,
        lookahead=lookahead,
        seed=seed,
    )
    template = _draw_fleet(template_cfg, rng)
    fleet: list[Ev] = []
    for day in range(num_days - 1):
        off = day * slots_per_day
        for ev in template:
            fleet.append(
                replace(
                    ev,
                    id=f"d{day:02d}_{ev.id}",
                    arrival_slot=ev.arrival_slot + off,
                    departure_slot=ev.departure_slot + off,
                )
            )
    groups = groups_from_fleet(fleet, alpha=alpha)
    prices = PriceSeries(rng.uniform(price_range[0], price_range[1], size=T))
    return Scenario(
        grid=TimeGrid(num_slots=T, slot_hours=slot_hours),
        fleet=tuple(fleet),
        groups=groups,
        prices=prices,
        eta=0.95,
        lookahead=lookahead,
    )


@dataclass(frozen=True)
class NoisyForecast:
    forecast: PriceSeries
    mape: float  # mean absolute percentage error vs the true series


def apply_price_noise(prices: PriceSeries, sigma: float, seed: int) -> NoisyForecast:
    """Multiplicative Gaussian forecast noise: each price scaled by 1 + sigma*Y.

    Realized costs must always be settled at the true series; this only
    produces what the planners see.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    true = prices.prices
    if sigma == 0:
        return NoisyForecast(forecast=PriceSeries(true.copy()), mape=0.0)
    rng = np.random.default_rng(seed)
    noisy = (1.0 + sigma * rng.standard_normal(len(true))) * true
    nonzero = true != 0
    mape = float(np.mean(np.abs(noisy[nonzero] - true[nonzero]) / np.abs(true[nonzero])))
    return NoisyForecast(forecast=PriceSeries(noisy), mape=mape)


def _serves_all(report: RunReport, member_ids: set[str] | None = None) -> bool:
    if member_ids is None:
        return report.unserved_kwh <= SERVED_TOL_KWH
    return not (set(report.unserved_evs) & member_ids)


def find_optimal_V(
    s: Scenario,
    w: int | None = None,
    v_max: float = 1e6,
    resolution: float = 0.1,
    per_group: bool = False,
    forecast_prices: PriceSeries | None = None,
) -> float | dict[str, float]:
    """Largest penalty weight that still serves every requirement.

    Bisection between 0 (always feasible when capacity suffices) and
    ``v_max``; with ``per_group`` the search runs independently per group,
    which is exact because groups do not interact in the scheduler.
    """
    w = s.lookahead if w is None else w

    def feasible(V: float, members: set[str] | None) -> bool:
        report = simulate(s, "dpp", V=V, w=w, forecast_prices=forecast_prices)
        return _serves_all(report, members)

    def bisect(members: set[str] | None) -> float:
        if not feasible(0.0, members):
            raise ValueError("no feasible V: even V=0 leaves demand unserved")
        lo, hi = 0.0, float(v_max)
        if feasible(hi, members):
            return hi
        while hi - lo > resolution:
            mid = (lo + hi) / 2.0
            if feasible(mid, members):
                lo = mid
            else:
                hi = mid
        return lo

    if not per_group:
        return bisect(None)
    return {g.id: bisect(set(g.members)) for g in s.groups}


def run_experiment(cfg: ExperimentConfig) -> list[RunReport]:
    """Run every configured policy on one scenario and write reports.

    Emits one JSON file per run plus a single summary CSV, all under
    ``cfg.out_dir``. Runs execute serially in grid order so output is
    deterministic for a fixed config.
    """
    cfg.validate()
    s = generate_scenario(cfg)
    forecast = None
    mape = 0.0
    if cfg.sigma > 0:
        noisy = apply_price_noise(s.prices, cfg.sigma, cfg.seed + 1)
        forecast = noisy.forecast
        mape = noisy.mape

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: list[RunReport] = []
    for policy in cfg.policies:
        report = simulate(
            s,
            policy,
            V=cfg.V if policy == "dpp" else None,
            V_per_group=cfg.V_per_group if policy == "dpp_hetero" else None,
            forecast_prices=forecast,
            w=cfg.lookahead,
        )
        reports.append(report)
        report.write_json(out / f"run_{policy}_w{cfg.lookahead}.json")

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.summary_row())
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        d = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in vars(cfg).items()
        }
        d["forecast_mape"] = mape
        json.dump(d, fh, indent=1, sort_keys=True)
    return reports
