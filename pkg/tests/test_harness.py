import numpy as np
import pytest

from evsched.cli import EXIT_AUDIT, EXIT_ERROR, EXIT_OK, main
from evsched.harness import (
    ConfigError,
    ExperimentConfig,
    apply_price_noise,
    duck_curve_prices,
    find_optimal_V,
    generate_scenario,
    generate_stationary_scenario,
    run_experiment,
)
from evsched.model import validate_scenario
from evsched.policies import SUMMARY_COLUMNS, simulate


def small_cfg(**kw):
    base = dict(num_evs=12, seed=0, lookahead=2)
    base.update(kw)
    return ExperimentConfig(**base)


def test_default_dimensions():
    s = generate_scenario(ExperimentConfig(num_evs=5))
    assert s.grid.num_slots == 288
    assert s.eta == 0.95
    assert validate_scenario(s) == []


def test_groups_formed_by_duration():
    s = generate_scenario(small_cfg(num_evs=40))
    for g in s.groups:
        for ev in s.group_members(g.id):
            assert ev.parking_slots == g.parking_slots


def test_seed_repeat_identical_fleet():
    a = generate_scenario(small_cfg())
    b = generate_scenario(small_cfg())
    assert a.fleet == b.fleet
    assert a.prices.prices == pytest.approx(b.prices.prices)


def test_seed_change_differs():
    a = generate_scenario(small_cfg(seed=1))
    b = generate_scenario(small_cfg(seed=2))
    assert a.fleet != b.fleet


def test_invalid_soc_ordering_rejected():
    with pytest.raises(ConfigError, match="soc"):
        generate_scenario(small_cfg(soc_min=0.5, soc_max=0.9, target_soc=0.8))


def test_duck_curve_positive_and_daily():
    p = duck_curve_prices(288 * 2, 5.0 / 60.0).prices
    assert np.all(p > 0)
    assert p[:288] == pytest.approx(p[288:])
    # evening peak above midday dip
    assert p[int(19.5 * 12)] > p[13 * 12]


def test_price_noise_sigma_zero_identity():
    prices = duck_curve_prices(288, 5.0 / 60.0)
    nf = apply_price_noise(prices, 0.0, 7)
    assert nf.mape == 0.0
    assert nf.forecast.prices == pytest.approx(prices.prices)


def test_price_noise_mape_near_four_percent():
    prices = duck_curve_prices(288 * 40, 5.0 / 60.0)
    nf = apply_price_noise(prices, 0.05, 3)
    assert nf.mape == pytest.approx(0.05 * np.sqrt(2 / np.pi), rel=0.05)


def test_price_noise_rejects_negative_sigma():
    with pytest.raises(ValueError):
        apply_price_noise(duck_curve_prices(10, 1.0), -0.1, 0)


def test_planners_survive_sign_flipped_forecasts():
    s = generate_scenario(small_cfg())
    for seed in range(5):
        nf = apply_price_noise(s.prices, 5.0, seed)  # huge noise flips signs
        assert np.any(nf.forecast.prices < 0)
        for policy, kw in [("dpp", {"V": 10.0}), ("mpc", {}), ("greedy", {})]:
            simulate(s, policy, w=2, forecast_prices=nf.forecast, **kw)


def test_find_optimal_v_bracketing():
    s = generate_scenario(small_cfg())
    V = find_optimal_V(s, w=2)
    assert simulate(s, "dpp", V=V, w=2).unserved_kwh <= 1e-6
    assert simulate(s, "dpp", V=V + 0.1, w=2).unserved_kwh > 1e-6


def test_find_optimal_v_per_group_dominates_homogeneous():
    s = generate_scenario(small_cfg())
    homog = find_optimal_V(s, w=2)
    per_group = find_optimal_V(s, w=2, per_group=True)
    assert set(per_group) == {g.id for g in s.groups}
    assert min(per_group.values()) >= homog - 0.2


def test_stationary_scenario_shape():
    s = generate_stationary_scenario(num_days=3, evs_per_day=4, seed=0)
    assert s.grid.num_slots == 3 * 288
    assert len(s.fleet) == 2 * 4  # no arrivals on the final day
    assert validate_scenario(s) == []


def test_run_experiment_outputs(tmp_path):
    cfg = small_cfg(
        policies=("greedy", "dpp"), V=10.0, out_dir=str(tmp_path / "out")
    )
    reports = run_experiment(cfg)
    assert [r.policy for r in reports] == ["greedy", "dpp"]
    summary = (tmp_path / "out" / "summary.csv").read_text().splitlines()
    assert summary[0] == ",".join(SUMMARY_COLUMNS)
    assert len(summary) == 3
    assert (tmp_path / "out" / "run_dpp_w2.json").exists()


def test_run_experiment_deterministic(tmp_path):
    texts = []
    for name in ("a", "b"):
        cfg = small_cfg(policies=("dpp",), V=10.0, sigma=0.05,
                        out_dir=str(tmp_path / name))
        run_experiment(cfg)
        texts.append((tmp_path / name / "summary.csv").read_bytes())
    assert texts[0] == texts[1]


# --- CLI -----------------------------------------------------------------


def test_cli_gen_writes_csvs(tmp_path):
    code = main(["gen", "--seed", "3", "--num-evs", "6", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "fleet.csv").exists()
    assert (tmp_path / "prices.csv").exists()


def test_cli_prices_import_round_trip(tmp_path):
    src = tmp_path / "raw.csv"
    src.write_text("slot,price_usd_per_kwh\n0,0.1\n1,-0.2\n")
    out = tmp_path / "norm.csv"
    assert main(["prices", "import", str(src), "--out", str(out)]) == EXIT_OK
    assert out.exists()


def test_cli_prices_import_bad_file(tmp_path):
    src = tmp_path / "raw.csv"
    src.write_text("slot,price\n0,0.1\n")
    assert main(["prices", "import", str(src)]) == EXIT_ERROR


def test_cli_simulate_with_config_override(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(
        'num_evs = 8\nseed = 1\nlookahead = 2\npolicies = ["greedy"]\n'
        f'out_dir = "{tmp_path / "out"}"\n'
    )
    assert main(["simulate", "--config", str(cfg), "--w", "1"]) == EXIT_OK
    assert (tmp_path / "out" / "run_greedy_w1.json").exists()


def test_cli_unknown_config_key(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text("bogus = 1\n")
    assert main(["simulate", "--config", str(cfg)]) == EXIT_ERROR


def test_cli_verify_clean():
    assert main(["verify", "--seed", "0"]) == EXIT_OK
