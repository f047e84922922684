"""Out-of-sample comparison of alternatives: risk metrics, value of flexibility,
value of plug-and-play, the cluster-radius sweep and strategy digests.

Cost-like metrics (NPC, its tails, emissions, unmet load) are all "lower is
better"; values of flexibility are reported as improvements, i.e. the
baseline's expected value minus the alternative's.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import io
from .config import StudyConfig
from .env import ABANDON, MAX, ONE, EnvMode
from .flexible import RolloutResult, rollout_policy
from .powerflow import F_CO2, F_DIST, F_EH, F_LOSS, F_UL_EL, F_UL_HEAT, TECHS, ScenarioArrays
from .rigid import RigidDesign, simulate_design
from .scenario import HourLayout, ScenarioPath

METRICS = ("enpc", "var", "vag", "emissions", "tul")
# baselines the published flexibility column is measured against, per metric
NAMED_BASELINE = {"enpc": "bd2", "var": "bd1", "vag": "bd2", "emissions": "bd1", "tul": "bd1"}
VOPP_PAIRS = (("fd_nopp", "fd"), ("bd1", "bd3"), ("bd2", "bd4"))
SHORTAGE_EDGES = (0.0, 0.05, 0.1, 0.2, 0.5)
ACTION_LABELS = {ONE: "expand_one", MAX: "expand_max", ABANDON: "abandon"}

REPORT_HEADER = ["alternative", "enpc_usd", "var5_usd", "vag95_usd", "emissions_t", "tul_kwh", "n_scenarios"]
VOF_HEADER = ["metric", "ev_flexible", "best_baseline", "ev_best_baseline", "vof_vs_best", "named_baseline",
              "ev_named_baseline", "vof_vs_named", "vof_operational", "vof_strategic"]
VOPP_HEADER = ["pair", "ev_nopp_usd", "ev_withpp_usd", "vopp_usd", "pct_dtul", "pct_dco2"]
SWEEP_HEADER = ["radius_km", "dl_pct", "vopp"]
TRAJ_HEADER = ["month", "tech", "mean_w", "lo95_w", "hi95_w"]
HEAT_HEADER = ["month", "coal_kwh", "eh_kwh", "co2_t"]


class PairingError(ValueError):
    """Alternatives were evaluated on different scenario seeds."""


def nearest_rank(x, q: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``q`` percent at or below it."""
    xs = np.sort(np.asarray(x, dtype=float))
    if xs.size == 0:
        raise ValueError("empty sample")
    k = max(1, math.ceil(q / 100.0 * xs.size))
    return float(xs[min(k, xs.size) - 1])


@dataclass
class Alternative:
    """Paired per-scenario outcomes of one design or policy."""

    name: str
    seeds: np.ndarray
    npc: np.ndarray
    emissions: np.ndarray
    tul: np.ndarray
    theta: np.ndarray | None = None    # (S, M, 4) system capacity per month
    heat: np.ndarray | None = None     # (M, 3) coal heat kWh, EH heat kWh, CO2 t

    @property
    def enpc(self) -> float:
        return float(np.mean(self.npc))

    @property
    def var5(self) -> float:
        return nearest_rank(self.npc, 95.0)

    @property
    def vag95(self) -> float:
        return nearest_rank(self.npc, 5.0)

    def metric(self, z: str) -> float:
        if z == "enpc":
            return self.enpc
        if z == "var":
            return self.var5
        if z == "vag":
            return self.vag95
        if z == "emissions":
            return float(np.mean(self.emissions))
        if z == "tul":
            return float(np.mean(self.tul))
        raise ValueError(f"unknown metric {z!r}")


def _heat_mix(flows: np.ndarray) -> np.ndarray:
    return np.stack([flows[..., F_UL_HEAT].mean(0), flows[..., F_EH].mean(0), flows[..., F_CO2].mean(0)], axis=1)


def design_alternative(name: str, design: RigidDesign, arrays: ScenarioArrays, layout: HourLayout,
                       cfg: StudyConfig) -> Alternative:
    run = simulate_design(design, arrays, layout, cfg)
    theta = np.broadcast_to(np.asarray(design.theta) * cfg.study.n_gers, run.flows.shape[:2] + (4,))
    return Alternative(name, arrays.seeds.copy(), run.npc, run.flows[..., F_CO2].sum(axis=1),
                       run.flows[..., F_UL_EL].sum(axis=1), np.array(theta), _heat_mix(run.flows))


def rollout_alternative(name: str, r: RolloutResult) -> Alternative:
    return Alternative(name, r.seeds.copy(), r.npc, r.emissions, r.tul, r.theta, r.heat_mix())


def check_pairing(alternatives) -> np.ndarray:
    """Common seed vector of the alternatives; raises :class:`PairingError` on any mismatch."""
    alts = list(alternatives)
    if not alts:
        raise PairingError("no alternatives to compare")
    ref = alts[0].seeds
    for a in alts[1:]:
        if not np.array_equal(a.seeds, ref):
            raise PairingError(f"alternative {a.name!r} was evaluated on a different seed set "
                               f"than {alts[0].name!r}")
    return ref


@dataclass
class EvaluationReport:
    alternatives: dict[str, Alternative]

    def __post_init__(self):
        self.seeds = check_pairing(self.alternatives.values())

    def rows(self) -> list[tuple]:
        return [(a.name, a.enpc, a.var5, a.vag95, a.metric("emissions"), a.metric("tul"), len(a.npc))
                for a in self.alternatives.values()]


# -- value of flexibility and of plug-and-play ---------------------------------

def improvement(ev_baseline: float, ev_alternative: float) -> float:
    return ev_baseline - ev_alternative


def vopp(ev_nopp: float, ev_withpp: float) -> float:
    return ev_nopp - ev_withpp


def decompose(total: float, operational: float) -> tuple[float, float]:
    """``(total', strategic)`` with ``strategic + operational == total'`` exactly.

    ``total'`` differs from ``total`` by at most one rounding of the sum.
    """
    strategic = total - operational
    return strategic + operational, strategic


@dataclass
class VofRow:
    metric: str
    ev_flexible: float
    best_baseline: str
    ev_best: float
    vof_vs_best: float
    named_baseline: str
    ev_named: float
    vof_vs_named: float
    vof_operational: float
    vof_strategic: float

    def as_tuple(self) -> tuple:
        return dataclasses.astuple(self)


def vof_table(flexible: Alternative, baselines: dict[str, Alternative],
              flexible_nopp: Alternative | None = None) -> list[VofRow]:
    """Flexibility value per metric against the best and the named baseline.

    The operational part is the plug-and-play value of the flexible pair; the
    strategic part is the remainder, so the two always add up to the total.
    """
    alts = [flexible, *baselines.values()] + ([flexible_nopp] if flexible_nopp is not None else [])
    check_pairing(alts)
    if not baselines:
        raise ValueError("no baselines supplied")
    rows = []
    for z in METRICS:
        ev_f = flexible.metric(z)
        evs = {k: b.metric(z) for k, b in baselines.items()}
        best = min(sorted(evs), key=lambda k: evs[k])
        named = NAMED_BASELINE[z] if NAMED_BASELINE[z] in evs else best
        op = vopp(flexible_nopp.metric(z), ev_f) if flexible_nopp is not None else 0.0
        total, strat = decompose(improvement(evs[best], ev_f), op)
        rows.append(VofRow(z, ev_f, best, evs[best], total, named, evs[named], improvement(evs[named], ev_f),
                           op, strat))
    return rows


def _pct(new: float, old: float) -> float:
    return 100.0 * (new - old) / old if old != 0 else 0.0


def vopp_table(alternatives: dict[str, Alternative]) -> list[tuple]:
    """``(pair, ev_nopp, ev_withpp, vopp, %dTUL, %dCO2)`` for every available no-PP / PP pair."""
    rows = []
    for a, b in VOPP_PAIRS:
        if a in alternatives and b in alternatives:
            na, wb = alternatives[a], alternatives[b]
            check_pairing([na, wb])
            rows.append((f"{b}/{a}", na.enpc, wb.enpc, vopp(na.enpc, wb.enpc),
                         _pct(wb.metric("tul"), na.metric("tul")),
                         _pct(wb.metric("emissions"), na.metric("emissions"))))
    return rows


# -- radius sweep --------------------------------------------------------------

def annual_dl_pct(flows: np.ndarray) -> float:
    """Mean over scenarios and years of ``100 * losses / distributed`` (0 for years with no transfer)."""
    s, m = flows.shape[:2]
    years = -(-m // 12)
    pad = years * 12 - m
    loss = np.pad(flows[..., F_LOSS], ((0, 0), (0, pad))).reshape(s, years, 12).sum(-1)
    dist = np.pad(flows[..., F_DIST], ((0, 0), (0, pad))).reshape(s, years, 12).sum(-1)
    pct = np.divide(100.0 * loss, dist, out=np.zeros_like(loss), where=dist > 0)
    return float(pct.mean())


def breakeven_radius(radii, vopp_values) -> float | None:
    """First radius where VoPP falls from positive to nonpositive (piecewise linear), or None."""
    r = np.asarray(radii, dtype=float)
    v = np.asarray(vopp_values, dtype=float)
    for i in range(len(r) - 1):
        if v[i] > 0 and v[i + 1] <= 0:
            return float(r[i] + (r[i + 1] - r[i]) * v[i] / (v[i] - v[i + 1]))
    return None


@dataclass
class SweepResult:
    radii: np.ndarray
    dl_pct: np.ndarray
    vopp: np.ndarray
    breakeven: float | None

    def rows(self) -> list[tuple]:
        return list(zip(self.radii.tolist(), self.dl_pct.tolist(), self.vopp.tolist()))


def _scaled_paths(scenarios: list[ScenarioPath], factor: float) -> list[ScenarioPath]:
    return [dataclasses.replace(sp, r_cluster_monthly=sp.r_cluster_monthly * factor) for sp in scenarios]


def radius_sweep(cfg: StudyConfig, scenarios: list[ScenarioPath], radii, layout: HourLayout | None = None,
                 design: RigidDesign | None = None, policy=None, bounds=None,
                 initial_theta=None) -> SweepResult:
    """Rescale every radius path to start at each grid radius and compare PP on/off.

    Pass either a rigid ``design`` or a trained ``policy`` (with its bounds and
    zero-stage design).
    """
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) <= 0):
        raise ValueError("radius grid must be increasing")
    if (design is None) == (policy is None):
        raise ValueError("pass exactly one of design or policy")
    layout = layout or HourLayout.from_config(cfg)
    arrays = ScenarioArrays.stack(scenarios)
    dl, vp = [], []
    for r in radii:
        factor = r / cfg.scenario.r0_km
        if design is not None:
            scaled = arrays.with_radius(arrays.r_m * factor)
            on = simulate_design(dataclasses.replace(design, pp_enabled=True), scaled, layout, cfg)
            off = simulate_design(dataclasses.replace(design, pp_enabled=False), scaled, layout, cfg)
            dl.append(annual_dl_pct(on.flows))
            vp.append(vopp(float(off.npc.mean()), float(on.npc.mean())))
        else:
            paths = _scaled_paths(scenarios, factor)
            on = rollout_policy(policy, cfg, bounds, paths, initial_theta, EnvMode(False, True), layout)
            off = rollout_policy(policy, cfg, bounds, paths, initial_theta, EnvMode(False, False), layout)
            dl.append(annual_dl_pct(on.flows))
            vp.append(vopp(float(off.npc.mean()), float(on.npc.mean())))
    dl_a, vp_a = np.array(dl), np.array(vp)
    return SweepResult(radii, dl_a, vp_a, breakeven_radius(radii, vp_a))


# -- strategy digest -----------------------------------------------------------

@dataclass
class StrategyDigest:
    expansion_months: np.ndarray        # (M, 4) count of expansions per month and technology
    res_eh_ratio: list[float | None]    # per month; None while no EH is installed
    action_shortage: np.ndarray         # (len(ACTION_LABELS) + 1, len(SHORTAGE_EDGES))

    def timing_rows(self) -> list[tuple]:
        return [(m, *map(int, row)) for m, row in enumerate(self.expansion_months)]

    def ratio_rows(self) -> list[tuple]:
        return [(m, "" if v is None else v) for m, v in enumerate(self.res_eh_ratio)]

    def shortage_rows(self) -> list[tuple]:
        labels = ["none", *ACTION_LABELS.values()]
        edges = list(SHORTAGE_EDGES) + [math.inf]
        return [(labels[a], edges[b], edges[b + 1], int(self.action_shortage[a, b]))
                for a in range(len(labels)) for b in range(len(SHORTAGE_EDGES))]


def strategy_digest(r: RolloutResult) -> StrategyDigest:
    acts = r.actions
    s, m = acts.shape[:2]
    tech, kind = acts[..., 0], acts[..., 1]
    expanding = (tech >= 0) & ((kind == ONE) | (kind == MAX))
    months = np.zeros((m, 4), dtype=np.int64)
    for j in range(4):
        months[:, j] = (expanding & (tech == j)).sum(axis=0)
    res = r.theta[..., 0].mean(0) + r.theta[..., 1].mean(0)
    eh = r.theta[..., 3].mean(0)
    ratio = [float(res[t] / eh[t]) if eh[t] > 0 else None for t in range(m)]
    bucket = np.searchsorted(np.asarray(SHORTAGE_EDGES), r.prev_ul_frac, side="right") - 1
    row = np.where(tech >= 0, kind, 0)
    order = [0, *ACTION_LABELS]
    hist = np.zeros((len(order), len(SHORTAGE_EDGES)), dtype=np.int64)
    for a_i, a in enumerate(order):
        sel = row == a
        hist[a_i] = np.bincount(bucket[sel].ravel(), minlength=len(SHORTAGE_EDGES))[:len(SHORTAGE_EDGES)]
    return StrategyDigest(months, ratio, hist)


# -- writers -------------------------------------------------------------------

def capacity_trajectory_rows(alt: Alternative) -> list[tuple]:
    rows = []
    for t in range(alt.theta.shape[1]):
        for j, name in enumerate(TECHS):
            x = alt.theta[:, t, j]
            rows.append((t, name, float(x.mean()), nearest_rank(x, 2.5), nearest_rank(x, 97.5)))
    return rows


def heat_mix_rows(alt: Alternative) -> list[tuple]:
    return [(t, *map(float, row)) for t, row in enumerate(alt.heat)]


def _seeds(alt_seeds) -> tuple[int, int]:
    return int(np.min(alt_seeds)), int(np.max(alt_seeds))


def write_report(out_dir, report: EvaluationReport, config_hash: str, focus: str | None = None) -> list:
    """report.csv, scenario_npc.csv, and trajectory/heat-mix files for the ``focus`` alternative."""
    seeds = _seeds(report.seeds)
    paths = [io.write_csv(f"{out_dir}/report.csv", REPORT_HEADER, report.rows(), "report", config_hash, seeds)]
    names = list(report.alternatives)
    per = [(int(sd), *(report.alternatives[n].npc[i] for n in names)) for i, sd in enumerate(report.seeds)]
    paths.append(io.write_csv(f"{out_dir}/scenario_npc.csv", ["seed", *names], per, "scenario_npc",
                              config_hash, seeds))
    alt = report.alternatives[focus or names[0]]
    paths.append(io.write_csv(f"{out_dir}/capacity_trajectory.csv", TRAJ_HEADER, capacity_trajectory_rows(alt),
                              "capacity_trajectory", config_hash, seeds, alternative=alt.name))
    paths.append(io.write_csv(f"{out_dir}/heat_mix.csv", HEAT_HEADER, heat_mix_rows(alt), "heat_mix",
                              config_hash, seeds, alternative=alt.name))
    return paths


def write_vof(out_dir, rows: list[VofRow], vopp_rows: list[tuple], config_hash: str, seeds) -> list:
    # full precision so the decomposition identity survives the round trip
    return [io.write_csv(f"{out_dir}/vof.csv", VOF_HEADER, [r.as_tuple() for r in rows], "vof", config_hash,
                         seeds, float_fmt=".17g"),
            io.write_csv(f"{out_dir}/vopp.csv", VOPP_HEADER, vopp_rows, "vopp", config_hash, seeds,
                         float_fmt=".17g")]


def write_sweep(out_dir, res: SweepResult, config_hash: str, seeds) -> object:
    be = "none" if res.breakeven is None else f"{res.breakeven:.6g}"
    return io.write_csv(f"{out_dir}/sweep.csv", SWEEP_HEADER, res.rows(), "sweep", config_hash, seeds,
                        breakeven_km=be)


def write_digest(out_dir, d: StrategyDigest, config_hash: str, seeds) -> list:
    return [io.write_csv(f"{out_dir}/expansion_timing.csv", ["month", *TECHS], d.timing_rows(),
                         "expansion_timing", config_hash, seeds),
            io.write_csv(f"{out_dir}/res_eh_ratio.csv", ["month", "res_eh_ratio"], d.ratio_rows(),
                         "res_eh_ratio", config_hash, seeds),
            io.write_csv(f"{out_dir}/action_shortage.csv", ["action", "shortage_lo", "shortage_hi", "count"],
                         d.shortage_rows(), "action_shortage", config_hash, seeds)]
