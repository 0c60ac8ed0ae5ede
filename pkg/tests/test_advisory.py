import itertools

import numpy as np
import pytest

from koopdrive.advisory import (
    AdvisoryProfile,
    EcoDpConfig,
    PowertrainParams,
    RouteInfeasibleError,
    RouteSpec,
    edge_quantities,
    resample_to_time,
    solve_eco_dp,
    surrogate_powertrain,
)

PT = PowertrainParams()


# ------------------------------------------------------------ powertrain

def test_engine_mode_never_cheaper():
    # the engine burns real fuel at a rate at least the battery equivalence
    # factor, so switching it on cannot lower the equivalent consumption
    rng = np.random.default_rng(0)
    v = rng.uniform(1, 14, 200)
    a = rng.uniform(-2, 1.5, 200)
    m_ev, ds_ev = surrogate_powertrain(v, a, 0, 0.0, PT)
    m_hev, ds_hev = surrogate_powertrain(v, a, 1, 0.0, PT)
    assert np.all(m_hev >= m_ev - 1e-15)


def test_engine_mode_drains_less():
    rng = np.random.default_rng(1)
    v = rng.uniform(1, 14, 200)
    a = rng.uniform(0.1, 1.5, 200)  # accelerating, battery discharging
    _, ds_ev = surrogate_powertrain(v, a, 0, 0.0, PT)
    _, ds_hev = surrogate_powertrain(v, a, 1, 0.0, PT)
    assert np.all(ds_ev < 0)
    assert np.all(np.abs(ds_hev) < np.abs(ds_ev))


def test_regen_charges_battery():
    # hard braking at speed recovers charge
    _, ds = surrogate_powertrain(np.array([12.0]), np.array([-2.0]), 0, 0.0, PT)
    assert ds[0] > 0


def test_ev_mode_burns_no_fuel_only_equivalent():
    m_ev, ds_ev = surrogate_powertrain(np.array([10.0]), np.array([0.0]), 0, 0.0, PT)
    # cruise at 10 m/s: equivalent mass rate = equiv_factor * battery power
    road = PT.a0 + PT.a1 * 10 + PT.a2 * 100
    p_batt = road * 10.0 / PT.eta_drive
    np.testing.assert_allclose(m_ev[0], PT.equiv_factor_kg_per_j * p_batt, rtol=1e-12)
    # SoC slope is per metre of travel
    np.testing.assert_allclose(ds_ev[0], -p_batt / PT.battery_capacity_j / 10.0,
                               rtol=1e-12)


def test_powertrain_validation():
    with pytest.raises(ValueError):
        PowertrainParams(engine_kg_per_j=1e-9)  # cheaper than the equivalence factor
    with pytest.raises(ValueError):
        PowertrainParams(eta_drive=0.0)
    with pytest.raises(ValueError):
        PowertrainParams(engine_battery_share=1.5)


def test_powertrain_requires_motion():
    with pytest.raises(ValueError):
        surrogate_powertrain(np.array([0.0]), np.array([0.0]), 0, 0.0, PT)


# ------------------------------------------------------------ edge pricing

def test_edge_timing_uses_mean_speed():
    cfg = EcoDpConfig()
    feas, a, dt, stage, dsoc = edge_quantities(
        np.array([4.0]), np.array([6.0]), 0, 0.0, 10.0, cfg)
    assert feas[0]
    np.testing.assert_allclose(dt[0], 10.0 / 5.0, rtol=1e-12)
    np.testing.assert_allclose(a[0], (36 - 16) / 20.0, rtol=1e-12)


def test_edge_accel_bounds_enforced():
    cfg = EcoDpConfig()
    feas, *_ = edge_quantities(np.array([0.6]), np.array([10.0]), 0, 0.0, 10.0, cfg)
    assert not feas[0]
    feas, *_ = edge_quantities(np.array([12.0]), np.array([2.0]), 0, 0.0, 10.0, cfg)
    assert not feas[0]


def test_edge_stage_blends_time_and_fuel():
    cfg = EcoDpConfig(gamma=0.5)
    v1, v2 = np.array([8.0]), np.array([8.0])
    feas, a, dt, stage, dsoc = edge_quantities(v1, v2, 0, 0.0, 10.0, cfg)
    m_eqf, _ = surrogate_powertrain(np.array([8.0]), np.array([0.0]), 0, 0.0, cfg.powertrain)
    expect = (0.5 * m_eqf[0] / cfg.resolved_m_dot_norm + 0.5) * dt[0]
    np.testing.assert_allclose(stage[0], expect, rtol=1e-12)


def test_gamma_zero_is_pure_time():
    cfg = EcoDpConfig(gamma=0.0)
    _, _, dt, stage, _ = edge_quantities(np.array([8.0]), np.array([8.0]), 1, 0.0, 10.0, cfg)
    np.testing.assert_array_equal(stage, dt)


# ------------------------------------------------------------ route spec

def test_route_csv_roundtrip(tmp_path):
    n = 11
    stop = np.zeros(n, dtype=bool)
    stop[[0, 10]] = True
    route = RouteSpec(step_m=10.0, v_min=np.zeros(n), v_max=np.full(n, 13.9),
                      stop=stop, grade=np.linspace(-0.01, 0.01, n))
    p = tmp_path / "route.csv"
    route.to_csv(p)
    back = RouteSpec.read_csv(p)
    assert back.step_m == route.step_m
    np.testing.assert_array_equal(back.v_max, route.v_max)
    np.testing.assert_array_equal(back.stop, route.stop)
    np.testing.assert_array_equal(back.grade, route.grade)


def test_route_validation():
    with pytest.raises(ValueError):
        RouteSpec(step_m=0.0, v_min=np.zeros(3), v_max=np.ones(3),
                  stop=np.zeros(3, dtype=bool), grade=np.zeros(3))
    with pytest.raises(ValueError):
        RouteSpec(step_m=10.0, v_min=np.full(3, 5.0), v_max=np.full(3, 2.0),
                  stop=np.zeros(3, dtype=bool), grade=np.zeros(3))
    with pytest.raises(ValueError):
        RouteSpec(step_m=10.0, v_min=np.zeros(2), v_max=np.ones(3),
                  stop=np.zeros(3, dtype=bool), grade=np.zeros(3))


def test_config_validation():
    with pytest.raises(ValueError):
        EcoDpConfig(gamma=1.5)
    with pytest.raises(ValueError):
        EcoDpConfig(soc_min=0.5, soc_max=0.4)
    with pytest.raises(ValueError):
        EcoDpConfig(soc_terminal_floor=0.95)
    with pytest.raises(ValueError):
        EcoDpConfig(speed_floor=0.0)
    with pytest.raises(ValueError):
        EcoDpConfig(a_min=1.0, a_max=0.5)


# ------------------------------------------------------------ DP oracle

def accel_only_toy():
    """Five nodes whose speed windows rise fast enough that no admissible
    transition decelerates, keeping every stage strictly battery-draining."""
    v_min = np.array([0.0, 2.0, 4.5, 6.0, 6.0])
    v_max = np.array([9.5, 5.5, 7.5, 7.5, 7.5])
    stop = np.array([True, False, False, False, False])
    grade = np.array([0.01, 0.0, -0.005, 0.02, 0.0])
    return RouteSpec(step_m=10.0, v_min=v_min, v_max=v_max, stop=stop, grade=grade)


def toy_config(**kw):
    defaults = dict(gamma=0.5, v_levels=5, soc_levels=3,
                    soc_initial=0.55, soc_terminal_floor=0.26)
    defaults.update(kw)
    return EcoDpConfig(**defaults)


def enumerate_paths(route, config):
    """Exhaustive reference: every admissible speed/engine sequence, exact
    continuous SoC, costs accumulated right to left."""
    vgrid = np.linspace(config.speed_floor, float(np.max(route.v_max)), config.v_levels)
    S = route.n_steps
    adm = []
    for j in range(S + 1):
        if route.stop[j]:
            adm.append([0])
        else:
            adm.append([int(i) for i in np.where(
                (vgrid >= route.v_min[j] - 1e-9) & (vgrid <= route.v_max[j] + 1e-9))[0]])
    best = None
    for speeds in itertools.product(*adm):
        for engines in itertools.product((0, 1), repeat=S):
            soc = config.soc_initial
            stages = []
            ok = True
            for j in range(S):
                feas, a, dt, stage, dsoc = edge_quantities(
                    np.array([vgrid[speeds[j]]]), np.array([vgrid[speeds[j + 1]]]),
                    engines[j], route.grade[j], route.step_m, config)
                if not feas[0]:
                    ok = False
                    break
                soc = min(soc + float(dsoc[0]), config.soc_max)
                if soc < config.soc_min - 1e-12:
                    ok = False
                    break
                stages.append(float(stage[0]))
            if not ok or soc <= config.soc_terminal_floor:
                continue
            cost = 0.0
            for s in reversed(stages):
                cost = s + cost
            if best is None or cost < best:
                best = cost
    return best


def test_dp_matches_enumeration_exactly():
    route = accel_only_toy()
    config = toy_config()
    prof = solve_eco_dp(route, config)
    oracle = enumerate_paths(route, config)
    assert oracle is not None
    assert prof.total_cost == oracle


def test_dp_matches_enumeration_other_gammas():
    route = accel_only_toy()
    for gamma in (0.0, 0.25, 1.0):
        config = toy_config(gamma=gamma)
        prof = solve_eco_dp(route, config)
        assert prof.total_cost == enumerate_paths(route, config)


def test_dp_matches_enumeration_second_toy():
    # 4-level grid on [0.6, 8]: 0.6, 3.07, 5.53, 8.0; windows rise so the
    # admissible graph is accel/cruise only
    v_min = np.array([0.0, 2.5, 5.0, 7.0])
    v_max = np.array([8.0, 5.6, 8.0, 8.0])
    stop = np.array([True, False, False, False])
    grade = np.array([0.0, 0.015, 0.0, 0.0])
    route = RouteSpec(step_m=12.0, v_min=v_min, v_max=v_max, stop=stop, grade=grade)
    config = toy_config(v_levels=4)
    prof = solve_eco_dp(route, config)
    assert prof.total_cost == enumerate_paths(route, config)


def test_dp_profile_keeps_constraints():
    route = accel_only_toy()
    config = toy_config()
    prof = solve_eco_dp(route, config)
    # speed window at every node, stop pinned at the crawl floor
    assert prof.v_ref[0] == config.speed_floor
    for j in range(1, len(prof.v_ref)):
        assert route.v_min[j] - 1e-9 <= prof.v_ref[j] <= route.v_max[j] + 1e-9
    # acceleration bounds step by step
    for j in range(route.n_steps):
        a = (prof.v_ref[j + 1] ** 2 - prof.v_ref[j] ** 2) / (2 * route.step_m)
        assert config.a_min - 1e-9 <= a <= config.a_max + 1e-9
    # battery inside its window, strict terminal floor
    assert np.all(prof.soc >= config.soc_min - 1e-12)
    assert np.all(prof.soc <= config.soc_max + 1e-12)
    assert prof.soc[-1] > config.soc_terminal_floor
    assert np.all((prof.engine_on == 0) | (prof.engine_on == 1))
    assert prof.node_times[-1] == pytest.approx(prof.duration)


def test_dp_prefers_electric_when_unconstrained():
    route = accel_only_toy()
    prof = solve_eco_dp(route, toy_config())
    assert int(prof.engine_on.sum()) == 0


def test_infeasible_soc_raises():
    route = accel_only_toy()
    config = toy_config(soc_initial=0.21, soc_terminal_floor=0.89)
    with pytest.raises(RouteInfeasibleError) as exc:
        solve_eco_dp(route, config)
    assert exc.value.node_index == 0


def test_infeasible_kinematics_raises():
    # stops bracketing a mandatory high-speed node that a_max cannot reach
    v_min = np.array([0.0, 9.0, 0.0])
    v_max = np.array([13.9, 13.9, 13.9])
    stop = np.array([True, False, True])
    route = RouteSpec(step_m=10.0, v_min=v_min, v_max=v_max, stop=stop,
                      grade=np.zeros(3))
    with pytest.raises(RouteInfeasibleError) as exc:
        solve_eco_dp(route, EcoDpConfig())
    assert "reachable" in str(exc.value)


def test_duration_grows_with_energy_weight():
    # pure time weighting cannot be slower than heavier energy weightings
    route = accel_only_toy()
    d = {}
    for gamma in (0.0, 0.5, 1.0):
        d[gamma] = solve_eco_dp(route, toy_config(gamma=gamma)).duration
    assert d[0.0] <= d[0.5] <= d[1.0]


# ------------------------------------------------------------ resampling

def test_resample_grid():
    route = accel_only_toy()
    prof = solve_eco_dp(route, toy_config())
    t, v = resample_to_time(prof, 0.025)
    assert t[0] == 0.0
    np.testing.assert_allclose(np.diff(t), 0.025, rtol=0, atol=1e-12)
    # endpoint-exclusive: the grid covers [0, duration)
    assert t[-1] <= prof.duration
    assert len(t) == int(np.floor(prof.duration / 0.025 + 1e-9))
    assert v.min() >= toy_config().speed_floor - 1e-9
    assert v.max() <= np.max(route.v_max) + 1e-9


def test_resample_interpolates_between_nodes():
    route = accel_only_toy()
    prof = solve_eco_dp(route, toy_config())
    t, v = resample_to_time(prof, 0.025)
    # node times map back onto the profile speeds
    for j, tn in enumerate(prof.node_times[:-1]):
        k = int(round(tn / 0.025))
        if k < len(v):
            assert abs(v[min(k, len(v) - 1)] - prof.v_ref[j]) < 0.5


def test_profile_csv(tmp_path):
    route = accel_only_toy()
    prof = solve_eco_dp(route, toy_config())
    p = tmp_path / "prof.csv"
    prof.to_csv(p)
    header = p.read_text().splitlines()[0]
    assert "position_m" in header
    assert "v_ref_mps" in header
    assert len(p.read_text().splitlines()) == len(prof.v_ref) + 1
