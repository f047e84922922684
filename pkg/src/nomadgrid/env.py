"""Monthly capacity-expansion environment.

One episode walks a :class:`~nomadgrid.scenario.ScenarioPath` month by month.
Each step takes four action heads (PV, wind, BESS, EH), applies at most one
capacity change, simulates the month's hourly power flows and prices the
month. Rewards are negative monthly costs in USD (plus penalties in
training mode); the learner applies its own scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import StudyConfig
from .ledger import (InfraState, TechSpec, constraint_flags, expansion_cost, infra_costs_month,
                     operational_costs_month, salvage_value, stove_cost, system_mass, tech_specs)
from .powerflow import (BA, EH, F_DIST, F_UL_EL, N_FLOWS, NF_EXC, NF_UL, TECHS, layout_args, pack_params,
                        simulate_months)
from .scenario import HourLayout, ScenarioPath

NOOP, ONE, MAX, ABANDON = 0, 1, 2, 3
N_HEADS = 4
FEATURES = ("ed", "hd", "r_cluster", "l_cb", "theta_pv", "theta_wind", "theta_eh", "theta_bess",
            "ul_final", "mass", "time_remaining")
OBS_DIM = len(FEATURES)
# heads in arbitration priority order: PV > wind > BESS > EH
HEAD_TECH = (0, 1, 2, 3)


@dataclass
class Bounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != (OBS_DIM,) or self.hi.shape != (OBS_DIM,):
            raise ValueError(f"bounds need {OBS_DIM} features")

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return np.clip((raw - self.lo) / span, 0.0, 1.0)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(np.concatenate([self.lo, self.hi]).astype("<f8").tobytes()).hexdigest()[:16]

    def save(self, path, config_hash: str, seeds: tuple[int, int] | None = None) -> Path:
        rows = [(f, self.lo[i], self.hi[i]) for i, f in enumerate(FEATURES)]
        return io.write_csv(path, ["feature", "min", "max"], rows, "bounds", config_hash, seeds, float_fmt=".17g")

    @classmethod
    def load(cls, path, config_hash: str | None = None) -> "Bounds":
        _, header, rows = io.read_csv(path, "bounds", config_hash)
        if header != ["feature", "min", "max"]:
            raise io.ArtifactError(f"{path}: bad bounds header")
        table = {r[0]: (float(r[1]), float(r[2])) for r in rows}
        missing = [f for f in FEATURES if f not in table]
        if missing:
            raise io.ArtifactError(f"{path}: missing bounds for {', '.join(missing)}")
        return cls(np.array([table[f][0] for f in FEATURES]), np.array([table[f][1] for f in FEATURES]))

    @classmethod
    def identity(cls) -> "Bounds":
        return cls(np.zeros(OBS_DIM), np.ones(OBS_DIM))


@dataclass
class Vintage:
    theta: float
    age: int
    ms2: bool


@dataclass
class EnvMode:
    training: bool = True
    pp_enabled: bool = True
    eh_allowed: bool = True


def max_affordable_modules(spec: TechSpec, budget: float, ms2: bool, module: float = 500.0,
                           sf_pe: float = 1.3, k_cap: int = 10_000) -> int:
    """Largest k with ``expansion_cost(k * module) <= budget`` (cost is increasing in k)."""
    if budget <= 0 or expansion_cost(spec, module, ms2, sf_pe) > budget:
        return 0
    lo, hi = 1, 2
    while hi <= k_cap and expansion_cost(spec, hi * module, ms2, sf_pe) <= budget:
        lo, hi = hi, hi * 2
    hi = min(hi, k_cap + 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if expansion_cost(spec, mid * module, ms2, sf_pe) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def allocate_action_to_node(prev_ul: np.ndarray, prev_exc: np.ndarray, tech: int, kind: int) -> int:
    """Generators and storage go where unmet load was largest last month; EH and abandonment
    go where excess generation was largest. ``argmax`` breaks ties on the lowest index."""
    if tech == EH or kind == ABANDON:
        return int(np.argmax(prev_exc))
    return int(np.argmax(prev_ul))


@dataclass
class StepInfo:
    month: int
    applied: tuple[int, int, int, int] | None   # (tech, kind, node, modules)
    flows: np.ndarray
    ledger: np.ndarray                           # LEDGER_COLUMNS order
    cost: float
    penalty: float


class PlanningEnv:
    def __init__(self, cfg: StudyConfig, bounds: Bounds | None = None, mode: EnvMode | None = None,
                 layout: HourLayout | None = None, initial_theta=None):
        self.cfg = cfg
        self.bounds = bounds
        self.mode = mode or EnvMode()
        self.layout = layout or HourLayout.from_config(cfg)
        self.n = cfg.study.n_gers
        self.T = cfg.study.horizon_months
        self.specs = tech_specs(cfg.costs)
        self.spec_list = [self.specs[t] for t in TECHS]
        self.n_options = 4 if cfg.env.abandonment else 3
        self.initial_theta = np.zeros(4) if initial_theta is None else np.asarray(initial_theta, float)
        self._largs = layout_args(self.layout, cfg)
        self._params = pack_params(cfg.powerflow, self.mode.pp_enabled)
        self._refill = np.zeros(self.T, dtype=np.bool_)
        self.scenario: ScenarioPath | None = None
        self.done = True

    # -- episode control -------------------------------------------------------

    def reset(self, scenario: ScenarioPath, initial_theta=None, mode: EnvMode | None = None) -> np.ndarray:
        if scenario.months != self.T:
            raise ValueError(f"scenario horizon {scenario.months} != configured {self.T} months")
        if len(scenario.node_scale) != self.n:
            raise ValueError(f"scenario has {len(scenario.node_scale)} gers, config has {self.n}")
        if mode is not None and mode != self.mode:
            self.mode = mode
            self._params = pack_params(self.cfg.powerflow, mode.pp_enabled)
        self.scenario = scenario
        theta0 = self.initial_theta if initial_theta is None else np.asarray(initial_theta, float)
        theta0 = theta0.copy()
        if not self.mode.eh_allowed:
            theta0[EH] = 0.0
        ms2_0 = bool(self.layout.ms2[0])
        self.theta = np.tile(theta0, (self.n, 1))
        self.vintages = [[[] for _ in range(4)] for _ in range(self.n)]
        self.capex0 = 0.0
        for i in range(self.n):
            for j in range(4):
                if theta0[j] > 0:
                    self.vintages[i][j].append(Vintage(theta0[j], 0, ms2_0))
                    self.capex0 += expansion_cost(self.spec_list[j], theta0[j], ms2_0, self.cfg.costs.sf_pe)
        self.e_ba = self.theta[:, BA].copy()
        self.infra = InfraState()
        if self.mode.pp_enabled and not self.cfg.costs.charge_initial_ring:
            self.infra.max_past_radius = float(scenario.r_cluster_monthly[0])
        self.month = 0
        self.prev_ul = np.zeros(self.n)
        self.prev_exc = np.zeros(self.n)
        self.prev_ul_total = 0.0
        self.prev_running = 0.0
        self.mass = self._mass()
        self.flows = np.zeros((self.T, N_FLOWS))
        self.node_flows = np.zeros((self.T, self.n, 2))
        self.ledger = np.zeros((self.T, 8))
        self.theta_hist = np.zeros((self.T, 4))
        self.actions = np.full((self.T, 4), -1, dtype=np.int64)   # tech, kind, node, modules
        self.done = False
        return self._obs()

    def raw_features(self) -> np.ndarray:
        m = min(self.month, self.T - 1)
        sp = self.scenario
        tot = self.theta.sum(axis=0)
        r = sp.r_cluster_monthly[m]
        return np.array([sp.ed_monthly[m], sp.hd_monthly[m], r, 2.0 * math.pi * r,
                         tot[0], tot[1], tot[3], tot[2], self.prev_ul_total, self.mass,
                         (self.T - m) / self.T])

    def observe(self) -> np.ndarray:
        if self.bounds is None:
            raise RuntimeError("normalization bounds not loaded")
        raw = self.raw_features()
        obs = self.bounds.normalize(raw)
        obs[-1] = raw[-1]
        return obs

    def _obs(self) -> np.ndarray:
        # without bounds (e.g. during the bounds pre-pass) the raw features are returned
        return self.observe() if self.bounds is not None else self.raw_features()

    # -- actions ---------------------------------------------------------------

    def _ms2(self) -> bool:
        return bool(self.layout.ms2[self.month])

    def _known_inv_this_month(self) -> float:
        c = self.cfg.costs
        cost = float(stove_cost(self.month, self.n, c))
        for i in range(self.n):
            for j in range(4):
                for v in self.vintages[i][j]:
                    if v.age >= self.spec_list[j].life_months:
                        cost += expansion_cost(self.spec_list[j], v.theta, self._ms2(), c.sf_pe)
        return cost

    def budget_headroom(self) -> float:
        cap = self.cfg.costs.budget_per_ger_usd * self.n
        return max(0.0, cap - self.prev_running - self._known_inv_this_month())

    def resolve(self, action, probs=None):
        """Arbitrate the heads down to one effective change ``(tech, kind, node, modules)`` or None."""
        action = np.asarray(action, dtype=np.int64)
        if action.shape != (N_HEADS,):
            raise ValueError("action needs one choice per head")
        module = self.cfg.env.module_w
        candidates = []
        budget = None
        for j in HEAD_TECH:
            kind = int(action[j])
            if kind == NOOP:
                continue
            if kind >= self.n_options:
                raise ValueError(f"option {kind} not available")
            if j == EH and not self.mode.eh_allowed:
                continue
            if kind == ABANDON:
                node = allocate_action_to_node(self.prev_ul, self.prev_exc, j, kind)
                if self.theta[node, j] <= 0:
                    continue
                k = 0
            elif kind == ONE:
                node = allocate_action_to_node(self.prev_ul, self.prev_exc, j, kind)
                k = 1
            else:
                if budget is None:
                    budget = self.budget_headroom()
                k = max_affordable_modules(self.spec_list[j], budget, self._ms2(), module,
                                           self.cfg.costs.sf_pe)
                if k == 0:
                    continue
                node = allocate_action_to_node(self.prev_ul, self.prev_exc, j, kind)
            p = float(probs[j][kind]) if probs is not None else 0.0
            candidates.append((p, j, kind, node, k))
        if not candidates:
            return None
        # highest selected-option probability wins; earlier head wins ties
        best = max(candidates, key=lambda c: (c[0], -c[1]))
        return best[1:]

    def _apply(self, change) -> float:
        """Apply a resolved change; returns the investment charge (negative for salvage)."""
        tech, kind, node, k = change
        c = self.cfg.costs
        spec = self.spec_list[tech]
        ms2 = self._ms2()
        if kind == ABANDON:
            credit = 0.0
            for v in self.vintages[node][tech]:
                credit += salvage_value(spec, v.theta, max(0, spec.life_months - v.age), v.ms2)
            self.vintages[node][tech] = []
            self.theta[node, tech] = 0.0
            if tech == BA:
                self.e_ba[node] = 0.0
            return -credit
        dtheta = k * self.cfg.env.module_w
        self.vintages[node][tech].append(Vintage(dtheta, 0, ms2))
        self.theta[node, tech] += dtheta
        if tech == BA:
            # new batteries arrive fully charged
            self.e_ba[node] += dtheta
        return expansion_cost(spec, dtheta, ms2, c.sf_pe)

    def _replacements(self) -> float:
        c = self.cfg.costs
        ms2 = self._ms2()
        cost = 0.0
        for i in range(self.n):
            for j in range(4):
                spec = self.spec_list[j]
                for v in self.vintages[i][j]:
                    if v.age >= spec.life_months:
                        cost += expansion_cost(spec, v.theta, ms2, c.sf_pe)
                        v.age = 0
                        v.ms2 = ms2
                        if j == BA:
                            self.e_ba[i] = min(self.theta[i, BA], self.e_ba[i] + v.theta)
        return cost

    def _terminal_salvage(self) -> float:
        total = 0.0
        for i in range(self.n):
            for j in range(4):
                spec = self.spec_list[j]
                for v in self.vintages[i][j]:
                    rem = max(0, spec.life_months - (v.age + 1))
                    total += salvage_value(spec, v.theta, rem, v.ms2)
        return total

    def _mass(self) -> float:
        cable = self.infra.cabling_km if self.mode.pp_enabled else 0.0
        return float(system_mass(self.theta.sum(axis=0), cable, self.cfg.costs, self.specs))

    # -- step ------------------------------------------------------------------

    def step(self, action, probs=None):
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        c = self.cfg.costs
        m = self.month
        sp = self.scenario
        change = self.resolve(action, probs)
        inv = self.capex0 if m == 0 else 0.0
        if change is not None:
            inv += self._apply(change)
            self.actions[m] = change
        inv += self._replacements()
        inv += float(stove_cost(m, self.n, c))

        simulate_months(self.theta, self.e_ba, m, m + 1, sp.ed_monthly, sp.hd_monthly,
                        sp.r_cluster_monthly, sp.node_scale, sp.pv_cf, sp.wind_cf, sp.grid_up,
                        *self._largs, self._params, float(self.n), self._refill, self.flows,
                        self.node_flows)
        fl = self.flows[m]
        inv += infra_costs_month(self.infra, fl[F_DIST], sp.r_cluster_monthly[m],
                                 self.mode.pp_enabled, c)
        theta_tot = self.theta.sum(axis=0)
        opex, grid, co2 = operational_costs_month(fl, theta_tot, c, self.specs)
        opex, grid, co2 = float(opex), float(grid), float(co2)
        if m == self.T - 1 and c.terminal_salvage:
            inv -= self._terminal_salvage()
        for i in range(self.n):
            for j in range(4):
                for v in self.vintages[i][j]:
                    v.age += 1
        self.mass = self._mass()
        total = inv + opex + grid + co2
        budget_base = total - (self.capex0 if m == 0 else 0.0)
        bflag, mflag = constraint_flags(budget_base, self.mass, self.n, c)
        bflag, mflag = bool(bflag), bool(mflag)
        self.ledger[m] = (inv, opex, grid, co2, total, self.mass, bflag, mflag)
        self.theta_hist[m] = theta_tot
        penalty = self.cfg.env.penalty_usd * (int(bflag) + int(mflag)) if self.mode.training else 0.0

        self.prev_ul = self.node_flows[m, :, NF_UL].copy()
        self.prev_exc = self.node_flows[m, :, NF_EXC].copy()
        self.prev_ul_total = float(fl[F_UL_EL])
        self.prev_running = opex + grid + co2
        self.month += 1
        self.done = self.month >= self.T
        obs = self._obs()
        info = StepInfo(m, change, fl.copy(), self.ledger[m].copy(), total, penalty)
        return obs, -(total + penalty), self.done, info
