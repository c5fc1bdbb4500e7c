"""Command-line entry point.

Subcommands: ``simulate`` (one experiment), ``sweep`` (seed/window grids),
``verify`` (standalone audit suites), ``gen`` (write a synthetic scenario to
CSV), ``prices`` (import a price CSV). Configuration comes from an optional
TOML file; any flag given on the command line overrides the config key of
the same name.

Exit codes: 0 = success with clean audits, 2 = audit violations, 1 = error.
"""

from __future__ import annotations

import argparse
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .aggregation import check_p3_feasible
from .flow import build_circulation_network, circulation_disaggregate, hoffman_verify
from .harness import ExperimentConfig, duck_curve_prices, generate_scenario, run_experiment
from .model import (
    group_power_cap,
    load_prices_csv,
    save_fleet_csv,
    save_prices_csv,
    validate_scenario,
)
from .queues import backlog_series, closed_form_backlog, increment_audit, lookback_audit

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_AUDIT = 2


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    raw = _load_config(getattr(args, "config", None))
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "duration_choices" in raw:
        raw["duration_choices"] = tuple(raw["duration_choices"])
    if "policies" in raw:
        raw["policies"] = tuple(raw["policies"])
    cfg = ExperimentConfig(**raw)

    overrides = {}
    for flag, key in [
        ("w", "lookahead"),
        ("V", "V"),
        ("alpha", "alpha"),
        ("sigma", "sigma"),
        ("seed", "seed"),
        ("out", "out_dir"),
        ("trials", "trials"),
        ("num_evs", "num_evs"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "policy", None):
        overrides["policies"] = tuple(args.policy)
    if getattr(args, "Vg", None):
        vg = {}
        for item in args.Vg:
            gid, _, val = item.partition("=")
            if not val:
                raise ValueError(f"--Vg expects GROUP=FLOAT, got {item!r}")
            vg[gid] = float(val)
        overrides["V_per_group"] = vg
    return replace(cfg, **overrides)


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    reports = run_experiment(cfg)
    bad = False
    for report in reports:
        line = (
            f"{report.policy}: cost {report.total_cost:.2f} USD, "
            f"avg delay {report.avg_delay_h:.3f} h, "
            f"unserved {report.unserved_kwh:.3f} kWh"
        )
        print(line)
        for msg in report.bound_audit:
            print(f"  audit violation: {msg}")
            bad = True
    return EXIT_AUDIT if bad else EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    windows = args.windows or [cfg.lookahead]
    bad = False
    for trial in range(cfg.trials):
        for w in windows:
            sub = replace(
                cfg,
                lookahead=int(w),
                seed=cfg.seed + trial,
                out_dir=str(Path(cfg.out_dir) / f"trial{trial:03d}_w{w}"),
            )
            for report in run_experiment(sub):
                if report.bound_audit:
                    bad = True
                    for msg in report.bound_audit:
                        print(f"trial {trial} w={w} {report.policy}: {msg}")
    print(f"sweep complete: {cfg.trials} trial(s) x {len(windows)} window(s)")
    return EXIT_AUDIT if bad else EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    """Standalone audit suites: queue closed form and bounds, plus
    aggregate-feasibility agreement between the subset check, the flow
    solver, and exhaustive cut enumeration on small random instances."""
    rng = np.random.default_rng(args.seed or 0)
    violations: list[str] = []

    X = 10.0
    for trial in range(50):
        w = int(rng.integers(1, 9))
        T = 120
        a = rng.uniform(0, X, size=T)
        x = rng.uniform(0, X, size=T)
        q = backlog_series(a, x, w, clamp="service")
        for t in range(min(w, T)):
            for n in range(1, (T - 1 - t) // w + 1):
                cf = closed_form_backlog(a, x, w, t, n)
                if abs(cf - q[t + n * w]) > 1e-9:
                    violations.append(
                        f"closed form mismatch at trial {trial}, t={t}, n={n}"
                    )
        violations += increment_audit(q, w, X)
        violations += lookback_audit(backlog_series(a, x, w, clamp="net"), w, X)

    for seed in range(10):
        cfg = ExperimentConfig(
            num_evs=3,
            num_slots=4,
            slot_hours=1.0,
            eta=1.0,
            arrival_peak_slot=0,
            arrival_std_slots=1.0,
            duration_choices=(2, 3),
            p_min_kw=1.0,
            p_max_kw=3.0,
            e_cap_min_kwh=4.0,
            e_cap_max_kwh=8.0,
            seed=seed,
        )
        s = generate_scenario(cfg)
        for g in s.groups:
            caps_mass = sum(
                min(ev.e_max, ev.p_max * ev.parking_slots) for ev in s.group_members(g.id)
            )
            x = np.zeros(4)
            total = min(sum(ev.e_req for ev in s.group_members(g.id)), caps_mass)
            for t in range(4):
                x[t] = min(group_power_cap(s, g.id, t), total)
                total -= x[t]
            verdict = check_p3_feasible(s, g.id, x, mode="exhaustive")
            flow = circulation_disaggregate(s, g.id, x)
            hoffman = hoffman_verify(build_circulation_network(s, g.id, x))
            if not (verdict.feasible == flow.feasible == hoffman.feasible):
                violations.append(
                    f"seed {seed} group {g.id}: verdict disagreement "
                    f"(subset {verdict.feasible}, flow {flow.feasible}, "
                    f"cut {hoffman.feasible})"
                )

    if violations:
        for msg in violations[:20]:
            print(f"audit violation: {msg}")
        print(f"{len(violations)} violation(s)")
        return EXIT_AUDIT
    print("all audits clean")
    return EXIT_OK


def _cmd_gen(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    s = generate_scenario(cfg)
    problems = validate_scenario(s)
    if problems:
        for p in problems:
            print(f"invalid scenario: {p}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_fleet_csv(out / "fleet.csv", list(s.fleet))
    save_prices_csv(out / "prices.csv", s.prices)
    print(f"wrote {out / 'fleet.csv'} and {out / 'prices.csv'}")
    return EXIT_OK


def _cmd_prices(args: argparse.Namespace) -> int:
    if args.prices_cmd == "import":
        series = load_prices_csv(args.path)
        out = Path(args.out or "prices_imported.csv")
        save_prices_csv(out, series)
        print(f"imported {len(series)} slots -> {out}")
        return EXIT_OK
    raise ValueError(f"unknown prices subcommand {args.prices_cmd!r}")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override its keys")
    p.add_argument("--policy", action="append", help="policy name (repeatable)")
    p.add_argument("--w", type=int, help="lookahead window in slots")
    p.add_argument("--V", type=float, help="penalty weight")
    p.add_argument(
        "--Vg",
        action="append",
        metavar="GROUP=FLOAT",
        help="per-group penalty weight (repeatable)",
    )
    p.add_argument("--alpha", type=float, help="delay pressure weight")
    p.add_argument("--sigma", type=float, help="price forecast noise level")
    p.add_argument("--seed", type=int, help="rng seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--trials", type=int, help="number of seeds to run")
    p.add_argument("--num-evs", dest="num_evs", type=int, help="fleet size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evsched", description="EV fleet charging scheduler"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one experiment")
    _add_common_flags(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="run a seed/window grid")
    _add_common_flags(p_sweep)
    p_sweep.add_argument(
        "--windows", type=int, nargs="+", help="lookahead values to sweep"
    )
    p_sweep.set_defaults(func=_cmd_sweep)

    p_verify = sub.add_parser("verify", help="run standalone audit suites")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=_cmd_verify)

    p_gen = sub.add_parser("gen", help="generate a synthetic scenario")
    _add_common_flags(p_gen)
    p_gen.set_defaults(func=_cmd_gen)

    p_prices = sub.add_parser("prices", help="price series utilities")
    prices_sub = p_prices.add_subparsers(dest="prices_cmd", required=True)
    p_import = prices_sub.add_parser("import", help="validate and normalize a price CSV")
    p_import.add_argument("path")
    p_import.add_argument("--out")
    p_import.set_defaults(func=_cmd_prices)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
