import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nomadgrid.config import CostSection, StudyConfig
from nomadgrid.env import EnvMode, PlanningEnv
from nomadgrid.ledger import (InfraState, cabling_cost, comms_cost, constraint_flags, discounted_npc,
                              expansion_cost, infra_costs_month, operational_costs_month, salvage_value,
                              stove_cost, system_mass, tech_specs)
from nomadgrid.powerflow import F_BUY, F_COAL, F_ED, F_SELL, F_UL_EL, N_FLOWS, ScenarioArrays
from nomadgrid.rigid import RigidDesign, simulate_design
from nomadgrid.scenario import HourLayout, assemble_scenario

C = CostSection()
SPECS = tech_specs(C)


def test_expansion_cost_pv_500():
    base = 2.64 * 500 ** 0.95
    pe = 0.352 * 1.3 * 0.769 * 500
    assert expansion_cost(SPECS["pv"], 500.0) == pytest.approx(base + pe, rel=1e-12)
    assert expansion_cost(SPECS["pv"], 0.0) == 0.0
    with pytest.raises(ValueError):
        expansion_cost(SPECS["pv"], -1.0)


def test_eh_carries_no_power_electronics():
    eh = SPECS["eh"]
    assert expansion_cost(eh, 800.0) == pytest.approx(C.k_eh * 800 ** C.alpha_ms1)


def test_linear_exponent():
    from nomadgrid.ledger import TechSpec
    sp = TechSpec(2.0, 1.0, 1.0, 1.0, 120, 0.0, 0.0, 0.0, 0.7, 1.0)
    assert expansion_cost(sp, 1000.0) == pytest.approx(2 * expansion_cost(sp, 500.0))


def test_salvage_examples():
    sp = SPECS["pv"]
    new = salvage_value(sp, 500.0, sp.life_months)
    assert new == pytest.approx(0.7 * 2.64 * 500 ** 0.95)
    assert new == pytest.approx(677.2, abs=0.1)
    assert salvage_value(sp, 500.0, 0) == 0.0
    assert salvage_value(sp, 500.0, sp.life_months / 2) == pytest.approx(new / 2)
    with pytest.raises(ValueError):
        salvage_value(sp, 500.0, sp.life_months + 1)


def test_comms_and_cabling():
    assert comms_cost(10.0, 20.0, C.c_cc) == 0.0
    # per-metre price of 5.2 USD on the ring circumference
    assert cabling_cost(7.0, 6.85, 5.2) == pytest.approx(5.2 * 2 * math.pi * 0.15 * 1000)
    assert cabling_cost(7.0, 6.85, 5.2) == pytest.approx(4901, abs=1.0)
    assert cabling_cost(6.0, 6.85, 5.2) == 0.0


def test_high_water_marks_monotone():
    infra = InfraState()
    rng = np.random.default_rng(0)
    prev = (0.0, 0.0)
    for _ in range(200):
        d, r = rng.uniform(0, 100), rng.uniform(5, 9)
        cost = infra_costs_month(infra, d, r, True, C)
        assert infra.max_past_dist >= prev[0] and infra.max_past_radius >= prev[1]
        if d <= prev[0] and r <= prev[1]:
            assert cost == 0.0
        prev = (infra.max_past_dist, infra.max_past_radius)
    assert infra_costs_month(InfraState(), 50.0, 7.0, False, C) == 0.0


def _flows(kw):
    f = np.zeros(N_FLOWS)
    for k, v in kw.items():
        f[k] = v
    return f


def test_coal_cost():
    opex, _, _ = operational_costs_month(_flows({F_COAL: 1000.0}), np.zeros(4), C)
    assert opex == pytest.approx(40.0)


def test_unmet_allowance():
    opex, _, _ = operational_costs_month(_flows({F_ED: 100.0, F_UL_EL: 4.0}), np.zeros(4), C)
    assert opex == 0.0
    opex, _, _ = operational_costs_month(_flows({F_ED: 100.0, F_UL_EL: 6.0}), np.zeros(4), C)
    assert opex == pytest.approx(C.c_ul * 1.0)


def test_grid_trade():
    _, grid, _ = operational_costs_month(_flows({F_BUY: 100.0, F_SELL: 50.0}), np.zeros(4), C)
    assert grid == pytest.approx(0.041 * 100 - 0.17 * 50)
    assert grid == pytest.approx(-4.40)


def test_caps_and_flags():
    assert C.budget_per_ger_usd * 18 == pytest.approx(1980)
    assert C.mass_per_ger_kg * 18 == pytest.approx(2160)
    assert system_mass(np.zeros(4), 0.0, C) == 0.0
    b, m = constraint_flags(1980.0, 2160.0, 18, C)
    assert not b and not m
    b, m = constraint_flags(1980.01, 2160.01, 18, C)
    assert b and m


def test_stove_schedule():
    months = np.arange(0, 200)
    due = stove_cost(months, 3, C) > 0
    assert list(months[due]) == [84, 168]


def test_discounting():
    costs = np.zeros(13)
    costs[12] = 1000.0
    assert discounted_npc(costs, 0.05) == pytest.approx(952.38, abs=0.005)
    assert discounted_npc(np.arange(5.0), 0.0) == 10.0
    assert discounted_npc(np.zeros(30), 0.05) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(SPECS)), st.floats(1.0, 20000.0), st.booleans())
def test_concave_and_salvage_below_cost(tech, theta, ms2):
    sp = SPECS[tech]
    assert expansion_cost(sp, 2 * theta, ms2) < 2 * expansion_cost(sp, theta, ms2)
    assert salvage_value(sp, theta, sp.life_months, ms2) < expansion_cost(sp, theta, ms2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=40), st.floats(0.0, 0.2), st.floats(0.001, 0.1))
def test_npc_linear_and_decreasing(costs, r, dr):
    x = np.array(costs)
    assert discounted_npc(2 * x, r) == pytest.approx(2 * discounted_npc(x, r), rel=1e-12, abs=1e-9)
    if len(x) > 1 and x[1:].sum() > 1e-6:
        assert discounted_npc(x, r + dr) < discounted_npc(x, r)


@pytest.mark.parametrize("charge_ring", [False, True])
@pytest.mark.parametrize("theta,eh,pp", [((600.0, 300.0, 1200.0, 500.0), True, True),
                                         ((800.0, 0.0, 1500.0, 0.0), False, False)])
def test_env_prices_a_fixed_design_like_the_batch_evaluator(theta, eh, pp, charge_ring):
    cfg = StudyConfig().replace(study={"n_gers": 2, "horizon_months": 130, "rep_days": 1},
                                costs={"charge_initial_ring": charge_ring})
    lay = HourLayout.from_config(cfg)
    sps = [assemble_scenario(cfg, s, lay) for s in (1, 2)]
    run = simulate_design(RigidDesign(theta, eh, pp), ScenarioArrays.stack(sps), lay, cfg)
    env = PlanningEnv(cfg, None, EnvMode(training=False, pp_enabled=pp, eh_allowed=eh), lay, theta)
    for k, sp in enumerate(sps):
        env.reset(sp)
        while not env.done:
            env.step(np.zeros(4, dtype=int))
        assert np.allclose(env.flows, run.flows[k], rtol=1e-10, atol=1e-9)
        assert np.allclose(env.ledger[:, 4], run.costs.c_total[k], rtol=1e-10, atol=1e-7)
        assert np.allclose(env.ledger[:, 5], run.costs.mass_kg[k], rtol=1e-10)
        assert np.array_equal(env.ledger[:, 6].astype(bool), run.costs.budget_flag[k])
        assert discounted_npc(env.ledger[:, 4], cfg.costs.discount_rate) == pytest.approx(run.npc[k], rel=1e-10)
