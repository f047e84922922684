"""Rigid baseline designs: fixed per-ger capacities sized by a genetic algorithm."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .config import StudyConfig
from .ledger import CostBreakdown, discounted_npc, fixed_design_costs
from .powerflow import F_CO2, F_UL_EL, ScenarioArrays, run_fixed_design
from .scenario import HourLayout

# variant -> (eh_allowed, pp_enabled)
VARIANTS = {"bd1": (False, False), "bd2": (True, False), "bd3": (False, True), "bd4": (True, True)}
RESULT_HEADER = ["variant", "theta_pv_w", "theta_wind_w", "theta_bess_wh", "theta_eh_w", "enpc_usd",
                 "penalty_usd"]


@dataclass(frozen=True)
class RigidDesign:
    theta: tuple[float, float, float, float]   # per ger: pv W, wind W, bess Wh, eh W
    eh_allowed: bool = True
    pp_enabled: bool = False
    variant: str = ""

    def __post_init__(self):
        if len(self.theta) != 4 or min(self.theta) < 0:
            raise ValueError("design needs four nonnegative capacities")
        if not self.eh_allowed and self.theta[3] != 0:
            raise ValueError("EH capacity must be 0 when EH is not allowed")

    @classmethod
    def for_variant(cls, variant: str, theta) -> "RigidDesign":
        eh, pp = VARIANTS[variant]
        th = [float(x) for x in theta]
        if not eh:
            th[3] = 0.0
        return cls(tuple(th), eh, pp, variant)


@dataclass
class DesignFitness:
    enpc: float
    penalty: float
    npc: np.ndarray                 # per scenario
    violations: float               # expected violating months per scenario
    emissions: np.ndarray           # per scenario, t
    tul: np.ndarray                 # per scenario, kWh

    @property
    def fitness(self) -> float:
        return self.enpc + self.penalty


@dataclass
class DesignRun:
    """Full per-scenario outputs of one fixed design (for reports)."""

    design: RigidDesign
    flows: np.ndarray
    costs: CostBreakdown
    npc: np.ndarray


def simulate_design(design: RigidDesign, arrays: ScenarioArrays, layout: HourLayout,
                    cfg: StudyConfig) -> DesignRun:
    refill = np.zeros(layout.months, dtype=np.bool_)
    life_ba = int(round(cfg.costs.life_ba_yr * 12))
    refill[life_ba::life_ba] = True
    flows, _ = run_fixed_design(design.theta, arrays, layout, cfg, design.pp_enabled, refill)
    costs = fixed_design_costs(design.theta, flows, arrays.r_m, layout.ms2, design.pp_enabled, cfg)
    npc = discounted_npc(costs.c_total, cfg.costs.discount_rate)
    return DesignRun(design, flows, costs, npc)


def evaluate_design(design: RigidDesign, arrays: ScenarioArrays, layout: HourLayout,
                    cfg: StudyConfig) -> DesignFitness:
    if len(arrays) == 0:
        raise ValueError("empty scenario set")
    run = simulate_design(design, arrays, layout, cfg)
    viol = (run.costs.budget_flag.sum(axis=1) + run.costs.mass_flag.sum(axis=1)).mean()
    return DesignFitness(float(run.npc.mean()), float(cfg.rigid.penalty_usd * viol), run.npc,
                         float(viol), run.flows[..., F_CO2].sum(axis=1),
                         run.flows[..., F_UL_EL].sum(axis=1))


class _Evaluator:
    """Memoised fitness over integer-watt genes."""

    def __init__(self, variant, arrays, layout, cfg):
        self.variant = variant
        self.arrays, self.layout, self.cfg = arrays, layout, cfg
        self.cache: dict[tuple, float] = {}

    def __call__(self, genes: np.ndarray) -> float:
        key = tuple(int(g) for g in genes)
        if key not in self.cache:
            d = RigidDesign.for_variant(self.variant, key)
            self.cache[key] = evaluate_design(d, self.arrays, self.layout, self.cfg).fitness
        return self.cache[key]


def gene_bounds(variant: str, cfg: StudyConfig) -> np.ndarray:
    r = cfg.rigid
    ub = np.array([r.ub_pv_w, r.ub_wind_w, r.ub_bess_wh, r.ub_eh_w])
    if not VARIANTS[variant][0]:
        ub[3] = 0.0
    return ub


@dataclass
class GaResult:
    design: RigidDesign
    fitness: DesignFitness
    history: list[float] = field(default_factory=list)   # best-ever fitness per generation
    evaluations: int = 0


def ga_optimize(variant: str, arrays: ScenarioArrays, layout: HourLayout, cfg: StudyConfig,
                seed: int = 0, ub: np.ndarray | None = None) -> GaResult:
    """Real-coded GA: tournament selection, blend crossover, Gaussian mutation, elitism.

    Genes are per-ger capacities rounded to whole watts inside ``[0, ub]``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    g = cfg.rigid
    rng = np.random.default_rng(seed)
    ub = gene_bounds(variant, cfg) if ub is None else np.asarray(ub, dtype=float)
    evaluate = _Evaluator(variant, arrays, layout, cfg)
    sigma = g.mutation_frac * ub

    pop = np.rint(rng.random((g.population, 4)) * ub)
    # anchor the corners of the box: nothing installed, and everything at its cap
    pop[0] = 0.0
    fit = np.array([evaluate(x) for x in pop])
    best_i = int(np.argmin(fit))
    best, best_fit = pop[best_i].copy(), fit[best_i]
    history = [best_fit]
    stall = 0
    for _ in range(g.generations):
        children = [best.copy()]
        while len(children) < g.population:
            a = _tournament(rng, fit, g.tournament)
            b = _tournament(rng, fit, g.tournament)
            pa, pb = pop[a], pop[b]
            if rng.random() < g.crossover_rate:
                w = rng.uniform(-0.25, 1.25, size=4)
                c1 = w * pa + (1 - w) * pb
                c2 = w * pb + (1 - w) * pa
            else:
                c1, c2 = pa.copy(), pb.copy()
            for c in (c1, c2):
                mask = rng.random(4) < g.mutation_rate
                c += mask * rng.standard_normal(4) * sigma
                children.append(np.rint(np.clip(c, 0.0, ub)))
        pop = np.array(children[:g.population])
        fit = np.array([evaluate(x) for x in pop])
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best, best_fit = pop[i].copy(), fit[i]
            stall = 0
        else:
            stall += 1
        history.append(best_fit)
        if stall >= g.stall_generations:
            break
    design = RigidDesign.for_variant(variant, best)
    return GaResult(design, evaluate_design(design, arrays, layout, cfg), history, len(evaluate.cache))


def _tournament(rng, fit, k):
    idx = rng.integers(0, len(fit), size=k)
    return int(idx[np.argmin(fit[idx])])


def random_search(variant: str, arrays: ScenarioArrays, layout: HourLayout, cfg: StudyConfig,
                  n: int, seed: int = 0) -> tuple[RigidDesign, float]:
    """Best of ``n`` uniform-random designs in the gene box."""
    rng = np.random.default_rng(seed)
    ub = gene_bounds(variant, cfg)
    evaluate = _Evaluator(variant, arrays, layout, cfg)
    best, best_fit = None, np.inf
    for _ in range(n):
        x = np.rint(rng.random(4) * ub)
        f = evaluate(x)
        if f < best_fit:
            best, best_fit = x, f
    return RigidDesign.for_variant(variant, best), float(best_fit)


# -- result files --------------------------------------------------------------

def save_results(path, results: dict[str, GaResult], config_hash: str, seeds: tuple[int, int]):
    rows = []
    for v in sorted(results):
        r = results[v]
        rows.append((v, *r.design.theta, r.fitness.enpc, r.fitness.penalty))
    return io.write_csv(path, RESULT_HEADER, rows, "baseline", config_hash, seeds)


def load_results(path, config_hash: str | None = None) -> dict[str, tuple[RigidDesign, float, float]]:
    _, header, rows = io.read_csv(path, "baseline", config_hash)
    if header != RESULT_HEADER:
        raise io.ArtifactError(f"{path}: bad baseline header")
    out = {}
    for r in rows:
        d = RigidDesign.for_variant(r[0], [float(x) for x in r[1:5]])
        out[r[0]] = (d, float(r[5]), float(r[6]))
    return out
