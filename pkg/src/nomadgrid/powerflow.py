"""Hourly load-following dispatch, plug-and-play redistribution and grid exchange.

All hourly power quantities are in W; with a one-hour step they double as Wh.
The numba kernels take a packed parameter vector (see :func:`pack_params`)
so one compiled kernel serves the environment (one month at a time) and the
rigid evaluator (whole horizons, many scenarios).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .config import PowerflowSection, StudyConfig
from .scenario import HourLayout, ScenarioPath

KWH_PER_MJ = 1.0 / 3.6

# packed parameter layout
P_ETA_INV, P_ETA_BA, P_C_IN, P_C_OUT, P_SOC_MIN = 0, 1, 2, 3, 4
P_R_PER_M, P_V, P_CAP_FRAC, P_THETA_PP, P_THETA_GRID = 5, 6, 7, 8, 9
P_ETA_STOVE, P_COAL_KWH_KG, P_EF_GRID, P_EF_COAL = 10, 11, 12, 13
N_PARAMS = 14

# monthly output columns
(F_ED, F_HD, F_RES, F_DIST, F_LOSS, F_UL_EL, F_UL_HEAT, F_COAL, F_BUY, F_SELL, F_CO2,
 F_EH, F_WASTE, F_CHARGE, F_DISCHARGE, F_DIST_HOURS) = range(16)
N_FLOWS = 16
FLOW_NAMES = ("ed_kwh", "hd_kwh", "res_kwh", "dist_kwh", "loss_kwh", "ul_el_kwh", "ul_heat_kwh",
              "coal_kg", "grid_buy_kwh", "grid_sell_kwh", "co2_t", "eh_kwh", "wasted_kwh",
              "charge_kwh", "discharge_kwh", "dist_hours")
# per-node monthly outputs
NF_UL, NF_EXC = 0, 1

# capacity columns
PV, WIND, BA, EH = 0, 1, 2, 3
TECHS = ("pv", "wind", "bess", "eh")


@dataclass(frozen=True)
class LineParams:
    rho_cb: float = 1.678e-8
    a_cs: float = 1.5e-6
    alpha_cb: float = 0.393
    t_ref: float = 20.0
    t_actual: float = 20.0
    v_dist: float = 220.0

    def __post_init__(self):
        if min(self.rho_cb, self.a_cs, self.v_dist) <= 0:
            raise ValueError("line parameters must be positive")

    @property
    def r_per_m(self) -> float:
        """Temperature-adjusted resistance per metre of conductor (ohm/m)."""
        return self.rho_cb / self.a_cs * (1.0 + self.alpha_cb * (self.t_actual - self.t_ref) / 100.0)

    @classmethod
    def from_section(cls, pf: PowerflowSection) -> "LineParams":
        return cls(pf.rho_cb_ohm_m, pf.a_cs_mm2 * 1e-6, pf.alpha_cb_pct_per_c,
                   pf.t_ref_c, pf.t_actual_c, pf.v_dist)


def pack_params(pf: PowerflowSection, pp_enabled: bool = True) -> np.ndarray:
    p = np.zeros(N_PARAMS)
    p[P_ETA_INV] = pf.eta_inv
    p[P_ETA_BA] = pf.eta_ba
    p[P_C_IN] = pf.c_in
    p[P_C_OUT] = pf.c_out
    p[P_SOC_MIN] = pf.soc_min
    p[P_R_PER_M] = LineParams.from_section(pf).r_per_m
    p[P_V] = pf.v_dist
    p[P_CAP_FRAC] = pf.pp_cap_frac
    p[P_THETA_PP] = pf.theta_ppmg_w if pp_enabled else 0.0
    p[P_THETA_GRID] = pf.theta_grid_w
    p[P_ETA_STOVE] = pf.eta_stove
    p[P_COAL_KWH_KG] = pf.coal_mj_per_kg * KWH_PER_MJ
    p[P_EF_GRID] = pf.ef_grid_t_per_mwh
    p[P_EF_COAL] = pf.ef_coal_t_per_t
    return p


# -- scalar building blocks ----------------------------------------------------

@numba.njit(cache=True, error_model="numpy")
def nanogrid_dispatch_hour(th_pv, th_wind, th_ba, th_eh, e_ba, ed, hd, pv_cf, wind_cf,
                           eta_inv, eta_ba, c_in, c_out, soc_min):
    """One node, one hour. Returns
    ``(p_res, eh_res, dis_el, dis_heat, charge, ul_el, ul_heat, eh_head, excess, e_new)``.

    ``dis_*`` are battery output powers, ``charge`` is the battery input power.
    """
    p_res = (th_pv * pv_cf + th_wind * wind_cf) * eta_inv
    net = p_res - ed
    if net >= 0.0:
        ul_el = 0.0
        surplus = net
    else:
        ul_el = -net
        surplus = 0.0
    # EH only draws from surplus left after the electricity load
    eh_res = min(hd, th_eh, surplus)
    surplus -= eh_res
    ul_heat = hd - eh_res
    eh_head = th_eh - eh_res

    sq = math.sqrt(eta_ba)
    e_min = soc_min * th_ba
    out_max = min(c_out * th_ba, max(0.0, e_ba - e_min) * sq)
    in_max = min(c_in * th_ba, max(0.0, th_ba - e_ba) / sq)
    dis_el = 0.0
    dis_heat = 0.0
    charge = 0.0
    if ul_el > 0.0:
        dis_el = min(out_max, ul_el)
        ul_el -= dis_el
    elif surplus <= 0.0 and ul_heat > 0.0 and eh_head > 0.0:
        dis_heat = min(out_max, ul_heat, eh_head)
        ul_heat -= dis_heat
        eh_head -= dis_heat
    elif surplus > 0.0:
        charge = min(in_max, surplus)
        surplus -= charge
    e_new = e_ba + charge * sq - (dis_el + dis_heat) / sq
    # guard against rounding drift at the bounds
    if e_new > th_ba:
        e_new = th_ba
    if e_new < 0.0:
        e_new = 0.0
    return p_res, eh_res, dis_el, dis_heat, charge, ul_el, ul_heat, eh_head, surplus, e_new


@numba.njit(cache=True, error_model="numpy")
def pp_distribute(need_total, excess_total, theta_ppmg, ed_total, cap_frac):
    return max(0.0, min(need_total, excess_total, theta_ppmg, cap_frac * ed_total))


@numba.njit(cache=True, error_model="numpy")
def line_loss(p_dist, n_nodes, l_cb_m, r_per_m, v):
    """Thermal ring losses with a homogeneous split over ``n_nodes`` segments, clamped to ``p_dist``."""
    if p_dist <= 0.0:
        return 0.0
    p_node = p_dist / n_nodes
    r = r_per_m * l_cb_m / n_nodes
    i = p_node / v
    loss = n_nodes * 3.0 * r * i * i
    return min(loss, p_dist)


@numba.njit(cache=True, error_model="numpy")
def grid_exchange(theta_grid, eh_head, unmet_heat, excess, grid_up):
    """Signed grid power: positive buys (to serve heat through the EH), negative sells."""
    if grid_up == 0:
        return 0.0
    buy = min(theta_grid, eh_head, unmet_heat)
    if buy > 0.0:
        return buy
    return -min(theta_grid, max(0.0, excess))


def coal_and_emissions(unmet_heat_wh: float, grid_buy_wh: float, pf: PowerflowSection | None = None):
    """``(coal_kg, co2_t)`` for stove heat and grid purchases given in Wh."""
    pf = pf or PowerflowSection()
    coal_kwh_per_kg = pf.coal_mj_per_kg * KWH_PER_MJ
    coal_kg = unmet_heat_wh / 1000.0 / (pf.eta_stove * coal_kwh_per_kg)
    co2 = pf.ef_grid_t_per_mwh * grid_buy_wh / 1e6 + pf.ef_coal_t_per_t * coal_kg / 1000.0
    return coal_kg, co2


def distribution_losses(p_node_w: float, l_node_m: float, line: LineParams, n_nodes: int = 1):
    """Loss (W) and DL% for ``n_nodes`` identical segments carrying ``p_node_w`` over ``l_node_m``."""
    p_dist = p_node_w * n_nodes
    loss = line_loss(p_dist, n_nodes, l_node_m * n_nodes, line.r_per_m, line.v_dist)
    return loss, (100.0 * loss / p_dist if p_dist > 0 else 0.0)


# -- system hour ---------------------------------------------------------------

# hourly record columns (W)
(H_RES, H_ED, H_HD, H_ED_SERVED, H_EH, H_CHARGE, H_DISCHARGE, H_DIST, H_LOSS, H_BUY, H_SELL,
 H_WASTE, H_UL_EL, H_UL_HEAT, H_NEED, H_EG) = range(16)
N_HOUR = 16


@numba.njit(cache=True, error_model="numpy")
def system_hour(theta, e_ba, ed, hd, pv_cf, wind_cf, grid_up, l_cb_m, p, n_total,
                node_ul, node_exc, rec, work):
    """Dispatch every node, redistribute over the ring, trade with the grid.

    ``theta`` is (N, 4); ``e_ba``, ``ed``, ``hd`` are (N,) and ``e_ba`` is
    updated in place. ``node_ul``/``node_exc`` receive per-node final unmet
    electricity and pre-distribution excess. ``rec`` receives the system
    hourly record (see ``H_*``). ``work`` is (4, N) scratch space.
    """
    n = theta.shape[0]
    need = work[0]
    ul_el = work[1]
    ul_heat = work[2]
    head = work[3]
    for k in range(rec.shape[0]):
        rec[k] = 0.0
    need_tot = 0.0
    exc_tot = 0.0
    ed_tot = 0.0
    for i in range(n):
        (p_res, eh_res, dis_el, dis_heat, charge, u_el, u_heat, h, exc, e_new) = nanogrid_dispatch_hour(
            theta[i, PV], theta[i, WIND], theta[i, BA], theta[i, EH], e_ba[i], ed[i], hd[i],
            pv_cf, wind_cf, p[P_ETA_INV], p[P_ETA_BA], p[P_C_IN], p[P_C_OUT], p[P_SOC_MIN])
        e_ba[i] = e_new
        ul_el[i] = u_el
        ul_heat[i] = u_heat
        head[i] = h
        node_exc[i] = exc
        if exc > 0.0:
            need[i] = 0.0
        else:
            need[i] = u_el + min(u_heat, h)
        need_tot += need[i]
        exc_tot += exc
        ed_tot += ed[i]
        rec[H_RES] += p_res
        rec[H_ED] += ed[i]
        rec[H_HD] += hd[i]
        rec[H_EH] += eh_res + dis_heat
        rec[H_CHARGE] += charge
        rec[H_DISCHARGE] += dis_el + dis_heat
    rec[H_NEED] = need_tot
    rec[H_EG] = exc_tot

    p_dist = pp_distribute(need_tot, exc_tot, p[P_THETA_PP], ed_tot, p[P_CAP_FRAC])
    loss = line_loss(p_dist, n_total, l_cb_m, p[P_R_PER_M], p[P_V])
    delivered = p_dist - loss
    if delivered > 0.0:
        for i in range(n):
            if need[i] > 0.0:
                share = delivered * need[i] / need_tot
                to_el = min(share, ul_el[i])
                ul_el[i] -= to_el
                to_heat = share - to_el
                ul_heat[i] -= to_heat
                head[i] -= to_heat
                rec[H_EH] += to_heat
    exc_left = exc_tot - p_dist

    uh_tot = 0.0
    head_tot = 0.0
    ul_tot = 0.0
    for i in range(n):
        uh_tot += ul_heat[i]
        head_tot += head[i]
        ul_tot += ul_el[i]
        node_ul[i] = ul_el[i]
    pg = grid_exchange(p[P_THETA_GRID], head_tot, uh_tot, exc_left, grid_up)
    buy = max(pg, 0.0)
    sell = max(-pg, 0.0)
    rec[H_EH] += buy
    rec[H_ED_SERVED] = ed_tot - ul_tot
    rec[H_DIST] = p_dist
    rec[H_LOSS] = loss
    rec[H_BUY] = buy
    rec[H_SELL] = sell
    rec[H_WASTE] = max(0.0, exc_left - sell)
    rec[H_UL_EL] = ul_tot
    rec[H_UL_HEAT] = max(0.0, uh_tot - buy)


# -- month loop ----------------------------------------------------------------

@numba.njit(cache=True, error_model="numpy")
def simulate_months(theta, e_ba, m0, m1, ed_m, hd_m, r_m, node_scale, pv_cf, wind_cf, grid_up,
                    cal_month, days, ms2, hours, weight, start, ed_shape_s, ed_shape_w, hd_shape,
                    p, n_total, refill, flows, node_flows):
    """Simulate months ``m0 <= m < m1`` of one scenario with fixed capacities.

    ``flows`` (M, N_FLOWS) and ``node_flows`` (M, N, 2) are filled for those
    months. ``refill[m]`` tops every battery up at the start of month ``m``
    (a fresh replacement arrives charged). ``e_ba`` is updated in place.
    """
    n = theta.shape[0]
    ed = np.empty(n)
    hd = np.empty(n)
    nu = np.empty(n)
    nx = np.empty(n)
    rec = np.empty(N_HOUR)
    work = np.empty((4, n))
    coal_kwh_kg = p[P_ETA_STOVE] * p[P_COAL_KWH_KG]
    for m in range(m0, m1):
        if refill[m]:
            for i in range(n):
                e_ba[i] = theta[i, BA]
        w = weight[m]
        ed_day = ed_m[m] * 1000.0 / days[m]
        hd_day = hd_m[m] * 1000.0 / days[m]
        l_cb_m = 2.0 * math.pi * r_m[m] * 1000.0
        up_allowed = ms2[m]
        acc = np.zeros(N_FLOWS)
        for i in range(n):
            node_flows[m, i, NF_UL] = 0.0
            node_flows[m, i, NF_EXC] = 0.0
        for h in range(start[m], start[m] + hours[m]):
            hod = (h - start[m]) % 24
            es = ed_shape_w[hod] if ms2[m] else ed_shape_s[hod]
            for i in range(n):
                ed[i] = ed_day * es * node_scale[i]
                hd[i] = hd_day * hd_shape[hod] * node_scale[i]
            g = grid_up[h] if up_allowed else 0
            system_hour(theta, e_ba, ed, hd, pv_cf[h], wind_cf[h], g, l_cb_m, p, n_total, nu, nx, rec, work)
            acc[F_ED] += rec[H_ED]
            acc[F_HD] += rec[H_HD]
            acc[F_RES] += rec[H_RES]
            acc[F_DIST] += rec[H_DIST]
            acc[F_LOSS] += rec[H_LOSS]
            acc[F_UL_EL] += rec[H_UL_EL]
            acc[F_UL_HEAT] += rec[H_UL_HEAT]
            acc[F_BUY] += rec[H_BUY]
            acc[F_SELL] += rec[H_SELL]
            acc[F_EH] += rec[H_EH]
            acc[F_WASTE] += rec[H_WASTE]
            acc[F_CHARGE] += rec[H_CHARGE]
            acc[F_DISCHARGE] += rec[H_DISCHARGE]
            if rec[H_DIST] > 0.0:
                acc[F_DIST_HOURS] += 1.0
            for i in range(n):
                node_flows[m, i, NF_UL] += nu[i] * w / 1000.0
                node_flows[m, i, NF_EXC] += nx[i] * w / 1000.0
        for k in range(N_FLOWS):
            if k != F_DIST_HOURS:
                flows[m, k] = acc[k] * w / 1000.0
        flows[m, F_DIST_HOURS] = acc[F_DIST_HOURS] * w
        flows[m, F_COAL] = flows[m, F_UL_HEAT] / coal_kwh_kg
        flows[m, F_CO2] = p[P_EF_GRID] * flows[m, F_BUY] / 1000.0 + p[P_EF_COAL] * flows[m, F_COAL] / 1000.0


@numba.njit(cache=True, error_model="numpy")
def simulate_batch(theta, ed_m, hd_m, r_m, node_scale, pv_cf, wind_cf, grid_up,
                   cal_month, days, ms2, hours, weight, start, ed_shape_s, ed_shape_w, hd_shape,
                   p, n_total, refill, flows, node_flows):
    """Full horizon for S scenarios sharing one fixed design; batteries start full.

    Scenario arrays carry a leading S axis; ``flows`` is (S, M, N_FLOWS).
    """
    n_s = ed_m.shape[0]
    n_m = ed_m.shape[1]
    n = theta.shape[0]
    for s in range(n_s):
        e_ba = theta[:, BA].copy()
        simulate_months(theta, e_ba, 0, n_m, ed_m[s], hd_m[s], r_m[s], node_scale[s], pv_cf[s],
                        wind_cf[s], grid_up[s], cal_month, days, ms2, hours, weight, start,
                        ed_shape_s, ed_shape_w, hd_shape, p, n_total, refill, flows[s], node_flows[s])
    return n


# -- Python-facing wrappers ----------------------------------------------------

@dataclass
class ScenarioArrays:
    """Scenario streams stacked for the kernels (leading axis = scenario)."""

    seeds: np.ndarray
    ed_m: np.ndarray
    hd_m: np.ndarray
    r_m: np.ndarray
    node_scale: np.ndarray
    pv_cf: np.ndarray
    wind_cf: np.ndarray
    grid_up: np.ndarray

    @classmethod
    def stack(cls, scenarios: list[ScenarioPath]) -> "ScenarioArrays":
        if not scenarios:
            raise ValueError("empty scenario set")
        return cls(np.array([s.seed for s in scenarios], dtype=np.int64),
                   np.stack([s.ed_monthly for s in scenarios]),
                   np.stack([s.hd_monthly for s in scenarios]),
                   np.stack([s.r_cluster_monthly for s in scenarios]),
                   np.stack([s.node_scale for s in scenarios]),
                   np.stack([s.pv_cf for s in scenarios]),
                   np.stack([s.wind_cf for s in scenarios]),
                   np.stack([s.grid_up for s in scenarios]).astype(np.uint8))

    def __len__(self):
        return len(self.seeds)

    def with_radius(self, r_m: np.ndarray) -> "ScenarioArrays":
        return ScenarioArrays(self.seeds, self.ed_m, self.hd_m, r_m, self.node_scale,
                              self.pv_cf, self.wind_cf, self.grid_up)


def layout_args(layout: HourLayout, cfg: StudyConfig):
    sc = cfg.scenario
    return (layout.cal_month, layout.days, layout.ms2, layout.hours, layout.weight, layout.start,
            np.asarray(sc.ed_shape_summer, float), np.asarray(sc.ed_shape_winter, float),
            np.asarray(sc.hd_shape, float))


def run_fixed_design(theta_node: np.ndarray, arrays: ScenarioArrays, layout: HourLayout,
                     cfg: StudyConfig, pp_enabled: bool, refill: np.ndarray | None = None):
    """Simulate a homogeneous fixed design over every scenario.

    ``theta_node`` is the per-ger capacity vector (pv, wind, bess, eh).
    Returns ``(flows (S, M, N_FLOWS), node_flows (S, M, N, 2))``.
    """
    n = cfg.study.n_gers
    theta = np.tile(np.asarray(theta_node, dtype=float), (n, 1))
    s, m = arrays.ed_m.shape
    if refill is None:
        refill = np.zeros(m, dtype=np.bool_)
    flows = np.zeros((s, m, N_FLOWS))
    node_flows = np.zeros((s, m, n, 2))
    simulate_batch(theta, arrays.ed_m, arrays.hd_m, arrays.r_m, arrays.node_scale, arrays.pv_cf,
                   arrays.wind_cf, arrays.grid_up, *layout_args(layout, cfg),
                   pack_params(cfg.powerflow, pp_enabled), float(n), refill, flows, node_flows)
    return flows, node_flows


def dispatch_system_hour(theta: np.ndarray, e_ba: np.ndarray, ed: np.ndarray, hd: np.ndarray,
                         pv_cf: float, wind_cf: float, grid_up: int, l_cb_m: float,
                         pf: PowerflowSection | None = None, pp_enabled: bool = True) -> dict:
    """Run one system hour outside a month loop; returns the hourly record as a dict.

    ``e_ba`` is copied, the updated value is returned under ``"e_ba"``.
    """
    pf = pf or PowerflowSection()
    theta = np.asarray(theta, dtype=float).reshape(-1, 4)
    n = theta.shape[0]
    e = np.array(e_ba, dtype=float)
    rec = np.zeros(N_HOUR)
    nu = np.zeros(n)
    nx = np.zeros(n)
    system_hour(theta, e, np.asarray(ed, float), np.asarray(hd, float), float(pv_cf), float(wind_cf),
                int(grid_up), float(l_cb_m), pack_params(pf, pp_enabled), float(n), nu, nx, rec,
                np.empty((4, n)))
    keys = ("res", "ed", "hd", "ed_served", "eh", "charge", "discharge", "dist", "loss", "buy",
            "sell", "waste", "ul_el", "ul_heat", "need", "eg")
    out = dict(zip(keys, rec.tolist()))
    out["e_ba"] = e
    out["node_ul"] = nu
    out["node_exc"] = nx
    return out
