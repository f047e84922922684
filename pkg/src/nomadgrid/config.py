"""Study configuration: defaults, TOML loading and hashing.

Every default is either a case-study value (Mongolian ger community, 18
dwellings, 30-year horizon) or a documented modelling choice. Configs are
TOML files with one table per section; unknown sections or keys are
rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

ENV_OUT = "NOMADGRID_OUT"
ENV_SEED = "NOMADGRID_SEED"

# disjoint seed blocks; each block holds up to SEED_BLOCK scenarios
SEED_STRIDE = 10_000_000
SEED_BLOCK = 1_000_000


class ConfigError(ValueError):
    pass


# Ulaanbaatar mean monthly temperatures (degC), Jan..Dec; drives the
# heating-degree month weights.
UB_MONTHLY_TEMP_C = (-21.6, -16.6, -7.4, 1.2, 8.7, 14.9, 17.0, 15.0, 8.3, -0.3, -11.6, -19.2)
_DAYS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)


def heating_degree_weights(base_c: float = 14.0) -> list[float]:
    hdd = [max(0.0, base_c - t) * d for t, d in zip(UB_MONTHLY_TEMP_C, _DAYS)]
    total = sum(hdd)
    return [h / total for h in hdd]


def _lamp_fridge_shape(fridge: bool) -> list[float]:
    # 20 W lamp for 10 h (evening 17-23h, morning 5-8h); 80 W fridge all day
    lamp_hours = {5, 6, 7, 17, 18, 19, 20, 21, 22, 23}
    watts = [(20.0 if h in lamp_hours else 0.0) + (80.0 if fridge else 0.0) for h in range(24)]
    total = sum(watts)
    return [w / total for w in watts]


def _heat_shape() -> list[float]:
    # heavier demand overnight, lighter in the warm afternoon
    raw = [1.25 if (h < 7 or h >= 20) else (0.75 if 11 <= h < 17 else 1.0) for h in range(24)]
    total = sum(raw)
    return [r / total for r in raw]


@dataclass
class StudySection:
    horizon_months: int = 360
    n_gers: int = 18
    start_month: int = 1
    # representative days per month; 0 simulates every calendar hour
    rep_days: int = 3
    seed: int = 0
    n_eval: int = 2000
    n_fit: int = 2000
    n_bounds: int = 10000


@dataclass
class ScenarioSection:
    ed0_summer_kwh: float = 63.0
    ed0_winter_kwh: float = 6.0
    hd0_annual_kwh: float = 11500.0
    mu_ed: float = 0.0314
    sigma_ed: float = 0.15
    mu_hd: float = 0.01
    sigma_hd: float = 0.065
    r0_km: float = 6.85
    mu_migration: float = 0.005
    sigma_migration: float = 0.05
    # spring (MAM), summer (JJA), autumn (SON), winter (DJF)
    radius_season_mult: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    cf_pv: float = 0.198
    cf_wind: float = 0.222
    sigma_pv: float = 0.193
    sigma_wind: float = 0.142
    grid_beta_a: float = 1.0
    grid_beta_b: float = 9.0
    # lognormal spread of per-ger demand around the community mean
    sigma_node: float = 0.25
    ms2_months: list[int] = field(default_factory=lambda: [10, 11, 12, 1, 2, 3])
    ed_shape_summer: list[float] = field(default_factory=lambda: _lamp_fridge_shape(True))
    ed_shape_winter: list[float] = field(default_factory=lambda: _lamp_fridge_shape(False))
    hd_shape: list[float] = field(default_factory=_heat_shape)
    hd_month_weights: list[float] = field(default_factory=heating_degree_weights)


@dataclass
class PowerflowSection:
    eta_inv: float = 0.90
    eta_ba: float = 0.75
    c_in: float = 0.5
    c_out: float = 0.5
    soc_min: float = 0.2
    rho_cb_ohm_m: float = 1.678e-8
    a_cs_mm2: float = 1.5
    alpha_cb_pct_per_c: float = 0.393
    t_ref_c: float = 20.0
    t_actual_c: float = 20.0
    v_dist: float = 220.0
    pp_cap_frac: float = 0.3
    # ~16 A per phase on 1.5 mm2 copper at 220 V, three phases
    theta_ppmg_w: float = 10_000.0
    theta_grid_w: float = 2000.0
    eta_stove: float = 0.25
    coal_mj_per_kg: float = 14.6
    ef_grid_t_per_mwh: float = 0.711
    ef_coal_t_per_t: float = 1.37


@dataclass
class CostSection:
    discount_rate: float = 0.05
    k_pv: float = 2.64
    k_wind: float = 1.91
    k_ba: float = 0.70
    k_eh: float = 1.52
    alpha_ms1: float = 0.95
    alpha_ms2: float = 0.85
    k_ms2_factor: float = 0.97
    eps_pe: float = 0.769
    c_pe: float = 0.352
    sf_pe: float = 1.3
    k_salv: float = 0.7
    life_pv_yr: float = 25.0
    life_wind_yr: float = 20.0
    life_ba_yr: float = 10.0
    life_eh_yr: float = 13.0
    # USD per kW (per kWh for storage) per month
    c_om_pv: float = 0.0048
    c_om_wind: float = 0.0032
    c_om_ba: float = 0.0
    c_om_eh: float = 0.0
    c_om_pe: float = 0.0001
    c_coal_usd_per_t: float = 40.0
    c_ul: float = 0.3417
    ul_allowance: float = 0.05
    c_grid: float = 0.041
    p_grid: float = 0.17
    c_cc: float = 0.04
    # 5.2 USD per km of ring circumference
    c_ic_usd_per_m: float = 0.0052
    # charge the starting ring at month 0; otherwise only extensions beyond the starting radius
    charge_initial_ring: bool = False
    carbon_price_usd_per_t: float = 0.0
    stove_cost_usd: float = 15.0
    stove_interval_months: int = 84
    budget_per_ger_usd: float = 110.0
    mass_per_ger_kg: float = 120.0
    mass_pv_kg_per_kw: float = 60.0
    mass_wind_kg_per_kw: float = 80.0
    mass_ba_kg_per_kwh: float = 8.0
    mass_eh_kg_per_kw: float = 3.0
    mass_pe_kg_per_kw: float = 2.0
    mass_cable_kg_per_km: float = 15.0
    terminal_salvage: bool = True


@dataclass
class RigidSection:
    population: int = 64
    generations: int = 200
    stall_generations: int = 30
    tournament: int = 3
    crossover_rate: float = 0.9
    mutation_frac: float = 0.1
    mutation_rate: float = 0.5
    ub_pv_w: float = 5000.0
    ub_wind_w: float = 5000.0
    ub_bess_wh: float = 10000.0
    ub_eh_w: float = 5000.0
    penalty_usd: float = 1000.0
    n_random: int = 1000


@dataclass
class EnvSection:
    module_w: float = 500.0
    penalty_usd: float = 1000.0
    reward_scale: float = 1000.0
    abandonment: bool = False
    # zero-stage design of the flexible system: "zero", "bd1".."bd4"
    initial_design: str = "bd4"


@dataclass
class LearnerSection:
    hidden: list[int] = field(default_factory=lambda: [64] * 6)
    lr: float = 7e-4
    momentum: float = 0.9
    # 0 selects the monthly financial discount factor
    gamma: float = 0.0
    c_trunc: float = 12.3
    replay_ratio: float = 5.0
    replay_start: int = 20_000
    buffer_capacity: int = 100_000
    n_steps: int = 50
    n_envs: int = 4
    total_steps: int = 6_000_000
    tau: float = 0.995
    delta: float = 1.0
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 10.0
    eval_deterministic: bool = True
    checkpoint_every: int = 50


@dataclass
class AnalysisSection:
    sweep_radii_km: list[float] = field(default_factory=lambda: [float(r) for r in range(2, 17)])
    sweep_design: str = "bd4"


@dataclass
class StudyConfig:
    study: StudySection = field(default_factory=StudySection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    powerflow: PowerflowSection = field(default_factory=PowerflowSection)
    costs: CostSection = field(default_factory=CostSection)
    rigid: RigidSection = field(default_factory=RigidSection)
    env: EnvSection = field(default_factory=EnvSection)
    learner: LearnerSection = field(default_factory=LearnerSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    # seed blocks derived from the global seed
    @property
    def eval_seed_base(self) -> int:
        return self.study.seed * SEED_STRIDE

    @property
    def fit_seed_base(self) -> int:
        return self.study.seed * SEED_STRIDE + SEED_BLOCK

    @property
    def bounds_seed_base(self) -> int:
        return self.study.seed * SEED_STRIDE + 2 * SEED_BLOCK

    @property
    def train_seed_base(self) -> int:
        return self.study.seed * SEED_STRIDE + 3 * SEED_BLOCK

    @property
    def gamma(self) -> float:
        if self.learner.gamma > 0:
            return self.learner.gamma
        return monthly_discount_factor(self.costs.discount_rate)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections: dict[str, Any]) -> "StudyConfig":
        """Copy with per-section field overrides, e.g. ``replace(study={"n_gers": 1})``."""
        data = self.to_dict()
        for name, updates in sections.items():
            if name not in data:
                raise ConfigError(f"unknown section [{name}]")
            for key in updates:
                if key not in data[name]:
                    raise ConfigError(f"unknown key '{key}' in [{name}]")
            data[name].update(updates)
        return from_dict(data)


def monthly_discount_factor(annual_rate: float) -> float:
    return (1.0 + annual_rate) ** (-1.0 / 12.0)


_SECTION_TYPES = {
    "study": StudySection,
    "scenario": ScenarioSection,
    "powerflow": PowerflowSection,
    "costs": CostSection,
    "rigid": RigidSection,
    "env": EnvSection,
    "learner": LearnerSection,
    "analysis": AnalysisSection,
}


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {key}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key}: expected array, got {value!r}")
        if default and isinstance(default[0], float):
            return [float(v) for v in value]
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key}: expected string, got {value!r}")
        return value
    return value


def from_dict(data: dict[str, Any]) -> StudyConfig:
    sections = {}
    for name, values in data.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        cls = _SECTION_TYPES[name]
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown key '{unknown[0]}' in [{name}]")
        kwargs = {k: _coerce(name, k, getattr(defaults, k), v) for k, v in values.items()}
        sections[name] = cls(**{**dataclasses.asdict(defaults), **kwargs})
    cfg = StudyConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: StudyConfig) -> None:
    s, sc = cfg.study, cfg.scenario
    if s.horizon_months < 1:
        raise ConfigError("[study] horizon_months must be >= 1")
    if s.n_gers < 1:
        raise ConfigError("[study] n_gers must be >= 1")
    if not 1 <= s.start_month <= 12:
        raise ConfigError("[study] start_month must be in 1..12")
    if s.rep_days < 0 or s.rep_days > 31:
        raise ConfigError("[study] rep_days must be in 0..31")
    for n in ("n_eval", "n_fit", "n_bounds"):
        if not 0 < getattr(s, n) < SEED_BLOCK:
            raise ConfigError(f"[study] {n} must be in 1..{SEED_BLOCK - 1}")
    for name in ("ed_shape_summer", "ed_shape_winter", "hd_shape"):
        shape = getattr(sc, name)
        if len(shape) != 24 or min(shape) < 0 or abs(sum(shape) - 1.0) > 1e-9:
            raise ConfigError(f"[scenario] {name} needs 24 nonnegative weights summing to 1")
    if len(sc.hd_month_weights) != 12 or min(sc.hd_month_weights) < 0:
        raise ConfigError("[scenario] hd_month_weights needs 12 nonnegative weights")
    if len(sc.radius_season_mult) != 4:
        raise ConfigError("[scenario] radius_season_mult needs 4 values")
    if not (0 < sc.cf_pv < 1 and 0 < sc.cf_wind < 1):
        raise ConfigError("[scenario] capacity factors must lie in (0, 1)")
    if cfg.env.initial_design not in ("zero", "bd1", "bd2", "bd3", "bd4"):
        raise ConfigError("[env] initial_design must be zero or bd1..bd4")
    if cfg.analysis.sweep_design not in ("bd1", "bd2", "bd3", "bd4", "fd"):
        raise ConfigError("[analysis] sweep_design must be bd1..bd4 or fd")


def parse_config(path: str | os.PathLike | None = None) -> StudyConfig:
    """Load a TOML config; a missing path or empty file yields the defaults.

    ``NOMADGRID_SEED`` overrides ``[study] seed``.
    """
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from None
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        data.setdefault("study", {})["seed"] = int(env_seed)
    return from_dict(data)


def dump_toml(cfg: StudyConfig) -> str:
    """Serialise a resolved config back to TOML (flat tables, scalars and arrays)."""

    def fmt(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        return "[" + ", ".join(fmt(x) for x in v) + "]"

    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)
