"""Monthly cost accounting: investment, operation, grid trade, carbon, mass and NPC.

Functions accept scalars or numpy arrays so the rigid evaluator can price a
whole scenario batch at once while the environment prices single months.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import CostSection, StudyConfig
from .powerflow import (F_BUY, F_COAL, F_CO2, F_DIST, F_ED, F_SELL, F_UL_EL, TECHS)

# flags: columns of a monthly ledger row
LEDGER_COLUMNS = ("c_inv", "c_opex", "c_grid", "c_co2", "c_total", "mass_kg", "budget_flag", "mass_flag")


@dataclass(frozen=True)
class TechSpec:
    k_inv: float
    alpha_ms1: float
    alpha_ms2: float
    k_ms2_factor: float
    life_months: int
    om_rate: float          # USD per kW (kWh for storage) per month
    eps_pe: float
    c_pe: float
    k_salv: float
    unit_mass: float        # kg per kW (kWh for storage)

    def __post_init__(self):
        for a in (self.alpha_ms1, self.alpha_ms2):
            if not 0 < a <= 1:
                raise ValueError("EoS exponent must lie in (0, 1]")
        if not 0 < self.k_salv < 1:
            raise ValueError("salvage factor must lie in (0, 1)")
        if self.life_months <= 0:
            raise ValueError("component life must be positive")

    def k_alpha(self, ms2):
        ms2 = np.asarray(ms2, dtype=bool)
        k = np.where(ms2, self.k_inv * self.k_ms2_factor, self.k_inv)
        a = np.where(ms2, self.alpha_ms2, self.alpha_ms1)
        return k, a


def tech_specs(c: CostSection) -> dict[str, TechSpec]:
    """Specs keyed by technology. Power electronics ride on PV, wind and storage only."""
    def spec(k, life_yr, om, eps, mass):
        return TechSpec(k, c.alpha_ms1, c.alpha_ms2, c.k_ms2_factor, int(round(life_yr * 12)),
                        om, eps, c.c_pe, c.k_salv, mass)
    return {
        "pv": spec(c.k_pv, c.life_pv_yr, c.c_om_pv, c.eps_pe, c.mass_pv_kg_per_kw),
        "wind": spec(c.k_wind, c.life_wind_yr, c.c_om_wind, c.eps_pe, c.mass_wind_kg_per_kw),
        "bess": spec(c.k_ba, c.life_ba_yr, c.c_om_ba, c.eps_pe, c.mass_ba_kg_per_kwh),
        "eh": spec(c.k_eh, c.life_eh_yr, c.c_om_eh, 0.0, c.mass_eh_kg_per_kw),
    }


def base_cost(spec: TechSpec, theta, ms2=False):
    """Economies-of-scale term ``K theta^alpha`` (0 at theta = 0)."""
    k, a = spec.k_alpha(ms2)
    theta = np.asarray(theta, dtype=float)
    return np.where(theta > 0, k * np.power(np.maximum(theta, 0.0), a), 0.0)


def expansion_cost(spec: TechSpec, theta_new, ms2=False, sf_pe: float = 1.3):
    """``K theta^alpha + c_pe sf eps theta`` in USD."""
    theta_new = np.asarray(theta_new, dtype=float)
    if np.any(theta_new < 0):
        raise ValueError("theta_new must be nonnegative")
    out = base_cost(spec, theta_new, ms2) + spec.c_pe * sf_pe * spec.eps_pe * theta_new
    return float(out) if out.ndim == 0 else out


def salvage_value(spec: TechSpec, theta_sv, remaining_life, ms2=False):
    """``k_salv (remaining / life) K theta^alpha``."""
    rem = np.asarray(remaining_life, dtype=float)
    if np.any(rem < 0) or np.any(rem > spec.life_months):
        raise ValueError("remaining life must lie in [0, life]")
    out = spec.k_salv * rem / spec.life_months * base_cost(spec, theta_sv, ms2)
    return float(out) if out.ndim == 0 else out


def comms_cost(dist_kwh, past_max_kwh, c_cc: float):
    return c_cc * np.maximum(0.0, np.asarray(dist_kwh) - past_max_kwh)


def cabling_cost(radius_km, past_max_km, c_ic_usd_per_m: float):
    """Cable for the extra ring circumference beyond the previous maximum radius."""
    return c_ic_usd_per_m * 2.0 * math.pi * np.maximum(0.0, np.asarray(radius_km) - past_max_km) * 1000.0


def operational_costs_month(flows: np.ndarray, theta_total: np.ndarray, c: CostSection,
                            specs: dict[str, TechSpec] | None = None):
    """``(C_opex, C_grid, C_co2)`` from monthly flows ``(..., N_FLOWS)``.

    ``theta_total`` holds system capacities (W, W, Wh, W) with matching leading axes.
    """
    specs = specs or tech_specs(c)
    theta_total = np.asarray(theta_total, dtype=float)
    om = 0.0
    for j, t in enumerate(TECHS):
        kw = theta_total[..., j] / 1000.0
        om = om + specs[t].om_rate * kw + c.c_om_pe * specs[t].eps_pe * kw
    coal = c.c_coal_usd_per_t * flows[..., F_COAL] / 1000.0
    ul = c.c_ul * np.maximum(0.0, flows[..., F_UL_EL] - c.ul_allowance * flows[..., F_ED])
    opex = coal + om + ul
    grid = c.c_grid * flows[..., F_BUY] - c.p_grid * flows[..., F_SELL]
    co2 = c.carbon_price_usd_per_t * flows[..., F_CO2]
    return opex, grid, co2


def system_mass(theta_total, cable_km, c: CostSection, specs: dict[str, TechSpec] | None = None):
    specs = specs or tech_specs(c)
    theta_total = np.asarray(theta_total, dtype=float)
    mass = c.mass_cable_kg_per_km * np.asarray(cable_km, dtype=float)
    for j, t in enumerate(TECHS):
        kw = theta_total[..., j] / 1000.0
        mass = mass + specs[t].unit_mass * kw + c.mass_pe_kg_per_kw * specs[t].eps_pe * kw
    return mass


def constraint_flags(cost_usd, mass_kg, n_gers: int, c: CostSection):
    """``(budget_violated, mass_violated)``; sitting exactly on a cap is feasible."""
    budget = np.asarray(cost_usd) > c.budget_per_ger_usd * n_gers
    mass = np.asarray(mass_kg) > c.mass_per_ger_kg * n_gers
    return budget, mass


def stove_cost(month, n_gers: int, c: CostSection):
    """Coal stove replacement for every ger each ``stove_interval_months`` (none at month 0)."""
    m = np.asarray(month)
    due = (m > 0) & (m % c.stove_interval_months == 0)
    return np.where(due, c.stove_cost_usd * n_gers, 0.0)


def discount_factors(n_months: int, annual_rate: float) -> np.ndarray:
    return (1.0 + annual_rate) ** (-np.arange(n_months) / 12.0)


def discounted_npc(costs, annual_rate: float):
    """Sum of ``c_m / (1 + rate)^(m / 12)`` over the last axis, month 0 undiscounted."""
    costs = np.asarray(costs, dtype=float)
    return costs @ discount_factors(costs.shape[-1], annual_rate)


@dataclass
class InfraState:
    max_past_dist: float = 0.0
    max_past_radius: float = 0.0

    @property
    def cabling_km(self) -> float:
        return 2.0 * math.pi * self.max_past_radius


def infra_costs_month(infra: InfraState, dist_kwh: float, radius_km: float, pp_enabled: bool,
                      c: CostSection) -> float:
    """Comms and cabling charges on new maxima; updates the high-water marks in place."""
    if not pp_enabled:
        return 0.0
    cost = float(comms_cost(dist_kwh, infra.max_past_dist, c.c_cc)
                 + cabling_cost(radius_km, infra.max_past_radius, c.c_ic_usd_per_m))
    infra.max_past_dist = max(infra.max_past_dist, dist_kwh)
    infra.max_past_radius = max(infra.max_past_radius, radius_km)
    return cost


# -- fixed-design pricing ------------------------------------------------------

@dataclass
class CostBreakdown:
    """Monthly ledger arrays with shape (S, M)."""

    c_inv: np.ndarray
    c_opex: np.ndarray
    c_grid: np.ndarray
    c_co2: np.ndarray
    mass_kg: np.ndarray
    budget_flag: np.ndarray
    mass_flag: np.ndarray
    capex0: float

    @property
    def c_total(self) -> np.ndarray:
        return self.c_inv + self.c_opex + self.c_grid + self.c_co2

    def rows(self, s: int) -> list[tuple]:
        tot = self.c_total
        return [(m, self.c_inv[s, m], self.c_opex[s, m], self.c_grid[s, m], self.c_co2[s, m],
                 tot[s, m], self.mass_kg[s, m], int(self.budget_flag[s, m]), int(self.mass_flag[s, m]))
                for m in range(tot.shape[1])]


def replacement_months(life_months: int, horizon: int) -> np.ndarray:
    return np.arange(life_months, horizon, life_months)


def fixed_design_costs(theta_node, flows: np.ndarray, r_m: np.ndarray, ms2: np.ndarray,
                       pp_enabled: bool, cfg: StudyConfig) -> CostBreakdown:
    """Price a homogeneous design held fixed over the horizon.

    Zero-stage purchase at month 0, like-for-like replacement at end of life,
    terminal salvage of the remaining life in the last month.
    """
    c = cfg.costs
    n = cfg.study.n_gers
    specs = tech_specs(c)
    theta_node = np.asarray(theta_node, dtype=float)
    s_count, horizon = flows.shape[:2]
    inv = np.zeros(horizon)
    capex0 = 0.0
    for j, t in enumerate(TECHS):
        th = theta_node[j]
        if th <= 0:
            continue
        sp = specs[t]
        ec0 = n * expansion_cost(sp, th, ms2[0], c.sf_pe)
        inv[0] += ec0
        capex0 += ec0
        last_buy = 0
        for m in replacement_months(sp.life_months, horizon):
            inv[m] += n * expansion_cost(sp, th, ms2[m], c.sf_pe)
            last_buy = m
        if c.terminal_salvage:
            used = horizon - last_buy
            rem = max(0, sp.life_months - used)
            inv[-1] -= n * salvage_value(sp, th, rem, ms2[last_buy])
    inv = inv + stove_cost(np.arange(horizon), n, c)
    c_inv = np.tile(inv, (s_count, 1))
    cable = np.zeros((s_count, horizon))
    if pp_enabled:
        hw_r = np.maximum.accumulate(r_m, axis=1)
        r_start = np.zeros((s_count, 1)) if c.charge_initial_ring else r_m[:, :1]
        prev_r = np.concatenate([r_start, hw_r[:, :-1]], axis=1)
        dist = flows[..., F_DIST]
        hw_d = np.maximum.accumulate(dist, axis=1)
        prev_d = np.concatenate([np.zeros((s_count, 1)), hw_d[:, :-1]], axis=1)
        c_inv = c_inv + cabling_cost(r_m, prev_r, c.c_ic_usd_per_m) + comms_cost(dist, prev_d, c.c_cc)
        cable = 2.0 * math.pi * hw_r
    theta_total = theta_node * n
    opex, grid, co2 = operational_costs_month(flows, np.broadcast_to(theta_total, flows.shape[:2] + (4,)),
                                              c, specs)
    mass = system_mass(theta_total, cable, c, specs)
    total = c_inv + opex + grid + co2
    budget_base = total.copy()
    budget_base[:, 0] -= capex0
    budget, mflag = constraint_flags(budget_base, mass, n, c)
    return CostBreakdown(c_inv, opex, grid, co2, mass, budget, mflag, capex0)
