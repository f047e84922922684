"""Seeded uncertainty scenarios: demand, heating, cluster radius, renewables, grid.

Every generator is a pure function of its parameters and an integer seed.
One :class:`ScenarioPath` holds a full horizon for one community; the
hourly streams cover only the *simulated* hours (representative days or
the full calendar, see :class:`HourLayout`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import StudyConfig

DAYS_IN_MONTH = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])

# calendar month (1..12) -> season index: 0 spring, 1 summer, 2 autumn, 3 winter
SEASON_OF_MONTH = np.array([3, 3, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3])

# stream order for SeedSequence.spawn; append only
_STREAMS = ("demand", "radius", "res", "grid", "node")


@dataclass(frozen=True)
class GbmParams:
    x0: float
    mu: float
    sigma: float
    dt: float = 1.0

    def __post_init__(self):
        if not self.x0 > 0:
            raise ValueError(f"GBM x0 must be positive, got {self.x0}")
        if not self.dt > 0:
            raise ValueError(f"GBM dt must be positive, got {self.dt}")
        if self.sigma < 0:
            raise ValueError(f"GBM sigma must be nonnegative, got {self.sigma}")


@dataclass(frozen=True)
class HourlyShape:
    values: tuple[float, ...]
    season: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (24,) or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("hourly shape needs 24 nonnegative weights summing to 1")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gbm_path(p: GbmParams, n_steps: int, rng_seed) -> np.ndarray:
    """Exact GBM discretisation ``X_k = x0 exp((mu - sigma^2/2) k dt + sigma W_k)``.

    Returns ``n_steps + 1`` values with ``X_0 = x0``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = _rng(rng_seed)
    dw = rng.standard_normal(n_steps) * math.sqrt(p.dt)
    w = np.concatenate(([0.0], np.cumsum(dw)))
    t = np.arange(n_steps + 1) * p.dt
    return p.x0 * np.exp((p.mu - 0.5 * p.sigma**2) * t + p.sigma * w)


@dataclass(frozen=True)
class HourLayout:
    """Which hours are simulated for each month of the horizon.

    With ``rep_days = K > 0`` every month is represented by K days whose
    flows are scaled by ``days / K``; ``rep_days = 0`` simulates all hours.
    """

    cal_month: np.ndarray      # (T,) 1..12
    days: np.ndarray           # (T,)
    ms2: np.ndarray            # (T,) bool
    hours: np.ndarray          # (T,) simulated hours per month
    weight: np.ndarray         # (T,) energy scale per simulated hour
    start: np.ndarray          # (T+1,) offsets into the hourly streams

    @property
    def months(self) -> int:
        return len(self.cal_month)

    @property
    def total_hours(self) -> int:
        return int(self.start[-1])

    @classmethod
    def build(cls, horizon_months: int, start_month: int, rep_days: int, ms2_months: Sequence[int]):
        m = np.arange(horizon_months)
        cal = (start_month - 1 + m) % 12 + 1
        days = DAYS_IN_MONTH[cal - 1]
        ms2 = np.isin(cal, np.asarray(ms2_months))
        if rep_days > 0:
            sim_days = np.full(horizon_months, rep_days)
        else:
            sim_days = days.copy()
        hours = sim_days * 24
        weight = days / sim_days
        start = np.concatenate(([0], np.cumsum(hours))).astype(np.int64)
        return cls(cal.astype(np.int64), days.astype(np.int64), ms2, hours.astype(np.int64),
                   weight.astype(float), start)

    @classmethod
    def from_config(cls, cfg: StudyConfig) -> "HourLayout":
        s = cfg.study
        return cls.build(s.horizon_months, s.start_month, s.rep_days, cfg.scenario.ms2_months)

    def hour_of_day(self) -> np.ndarray:
        return np.arange(self.total_hours) % 24

    def month_of_hour(self) -> np.ndarray:
        return np.repeat(np.arange(self.months), self.hours)


@dataclass
class ScenarioPath:
    seed: int
    months: int
    ed_monthly: np.ndarray         # per-ger kWh
    hd_monthly: np.ndarray         # per-ger kWh
    r_cluster_monthly: np.ndarray  # km
    pv_cf: np.ndarray              # per simulated hour
    wind_cf: np.ndarray
    grid_up: np.ndarray            # uint8 per simulated hour
    node_scale: np.ndarray         # per-ger demand multiplier, mean 1
    pv_noise: np.ndarray | None = None
    wind_noise: np.ndarray | None = None

    @property
    def l_cb_km(self) -> np.ndarray:
        return 2.0 * math.pi * self.r_cluster_monthly

    def identical(self, other: "ScenarioPath") -> bool:
        fields = ("ed_monthly", "hd_monthly", "r_cluster_monthly", "pv_cf", "wind_cf",
                  "grid_up", "node_scale")
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in fields)


def build_demand_series(ed0_summer: float, ed0_winter: float, hd0_annual: float,
                        gbm_ed: GbmParams, gbm_hd: GbmParams, seed, layout: HourLayout,
                        hd_month_weights: Sequence[float]):
    """Monthly per-ger electricity and heating demand (kWh).

    The GBM multiplier ``X_y / x0`` is shared by all months of year ``y``;
    electricity uses the summer baseline in MS1 months and the winter one in
    MS2 months; heating spreads the annual figure over calendar-month weights.
    """
    if min(ed0_summer, ed0_winter, hd0_annual) <= 0:
        raise ValueError("demand baselines must be positive")
    rng_ed, rng_hd = _split(seed, 2)
    n_years = (layout.months - 1) // 12 + 1
    year = np.arange(layout.months) // 12
    ed_mult = gbm_path(gbm_ed, n_years, rng_ed) / gbm_ed.x0
    hd_mult = gbm_path(gbm_hd, n_years, rng_hd) / gbm_hd.x0
    base_ed = np.where(layout.ms2, ed0_winter, ed0_summer)
    w = np.asarray(hd_month_weights, dtype=float)
    w = w / w.sum()
    ed = base_ed * ed_mult[year]
    hd = hd0_annual * w[layout.cal_month - 1] * hd_mult[year]
    return ed, hd


def build_mobility_series(r0: float, seasonal_mult: Sequence[float], gbm: GbmParams, seed,
                          layout: HourLayout) -> np.ndarray:
    """Monthly cluster radius: ``r0 * seasonal multiplier * annual GBM multiplier``."""
    if not r0 > 0:
        raise ValueError("r0 must be positive")
    n_years = (layout.months - 1) // 12 + 1
    mult = gbm_path(gbm, n_years, _rng(seed)) / gbm.x0
    season = SEASON_OF_MONTH[layout.cal_month - 1]
    return r0 * np.asarray(seasonal_mult, dtype=float)[season] * mult[np.arange(layout.months) // 12]


def res_base_profiles(cf_pv: float, cf_wind: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (12, 24) capacity-factor bases whose calendar-year mean equals the targets."""
    if not (0 < cf_pv < 1 and 0 < cf_wind < 1):
        raise ValueError("capacity factors must lie in (0, 1)")
    months = np.arange(12)
    hour = np.arange(24) + 0.5
    # ~47.9 N: day length from ~8.4 h (Dec) to ~15.8 h (Jun)
    day_len = 12.1 - 3.7 * np.cos(2 * np.pi * (months + 0.5) / 12.0)
    irr = 0.75 - 0.25 * np.cos(2 * np.pi * (months + 0.5) / 12.0)
    sunrise = 12.5 - day_len / 2
    phase = (hour[None, :] - sunrise[:, None]) / day_len[:, None]
    pv = np.where((phase > 0) & (phase < 1), np.sin(np.pi * np.clip(phase, 0, 1)), 0.0) * irr[:, None]
    # windiest in spring, calmest in late summer; afternoon maximum
    wind_month = 1.0 + 0.3 * np.cos(2 * np.pi * (months - 3.5) / 12.0)
    wind = wind_month[:, None] * (1.0 + 0.25 * np.sin(2 * np.pi * (hour[None, :] - 9.0) / 24.0))
    pv *= cf_pv / _annual_mean(pv)
    wind *= cf_wind / _annual_mean(wind)
    return pv, wind


def _annual_mean(profile: np.ndarray) -> float:
    return float((profile.sum(axis=1) * DAYS_IN_MONTH).sum() / (24 * DAYS_IN_MONTH.sum()))


def build_res_profiles(cf_pv: float, cf_wind: float, sigma_pv: float, sigma_wind: float, seed,
                       layout: HourLayout):
    """Hourly capacity factors ``clip(base * max(0, 1 + N(0, sigma)), 0, 1)``.

    Returns ``(pv_cf, wind_cf, pv_noise, wind_noise)`` over the layout's hours.
    """
    if sigma_pv < 0 or sigma_wind < 0:
        raise ValueError("noise sigma must be nonnegative")
    pv_base, wind_base = res_base_profiles(cf_pv, cf_wind)
    rng_pv, rng_wind = _split(seed, 2)
    month = layout.cal_month[layout.month_of_hour()] - 1
    hod = layout.hour_of_day()
    n = layout.total_hours
    pv_noise = np.maximum(0.0, 1.0 + sigma_pv * rng_pv.standard_normal(n))
    wind_noise = np.maximum(0.0, 1.0 + sigma_wind * rng_wind.standard_normal(n))
    pv = np.clip(pv_base[month, hod] * pv_noise, 0.0, 1.0)
    wind = np.clip(wind_base[month, hod] * wind_noise, 0.0, 1.0)
    return pv, wind, pv_noise, wind_noise


def build_grid_availability(a: float, b: float, seed, layout: HourLayout,
                            blackout_prob: np.ndarray | None = None) -> np.ndarray:
    """Hourly grid flags: monthly blackout rate ``q ~ Beta(a, b)``, hourly ``Bernoulli(1 - q)``.

    MS1 months are always 0 (no grid while rural). ``blackout_prob`` forces q.
    """
    if not (a > 0 and b > 0):
        raise ValueError("beta shape parameters must be positive")
    rng = _rng(seed)
    q = rng.beta(a, b, size=layout.months)
    if blackout_prob is not None:
        q = np.broadcast_to(np.asarray(blackout_prob, dtype=float), q.shape)
    u = rng.random(layout.total_hours)
    q_h = q[layout.month_of_hour()]
    ms2_h = layout.ms2[layout.month_of_hour()]
    return ((u >= q_h) & ms2_h).astype(np.uint8)


def node_scales(n: int, sigma: float, seed) -> np.ndarray:
    if n == 1 or sigma == 0:
        return np.ones(n)
    z = np.exp(sigma * _rng(seed).standard_normal(n))
    return z / z.mean()


def _split(seed, k: int) -> list[np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(k)]


def assemble_scenario(cfg: StudyConfig, seed: int, layout: HourLayout | None = None) -> ScenarioPath:
    sc = cfg.scenario
    layout = layout or HourLayout.from_config(cfg)
    streams = dict(zip(_STREAMS, np.random.SeedSequence(seed).spawn(len(_STREAMS))))
    ed, hd = build_demand_series(
        sc.ed0_summer_kwh, sc.ed0_winter_kwh, sc.hd0_annual_kwh,
        GbmParams(1.0, sc.mu_ed, sc.sigma_ed), GbmParams(1.0, sc.mu_hd, sc.sigma_hd),
        streams["demand"], layout, sc.hd_month_weights)
    r = build_mobility_series(sc.r0_km, sc.radius_season_mult,
                              GbmParams(1.0, sc.mu_migration, sc.sigma_migration),
                              np.random.default_rng(streams["radius"]), layout)
    pv, wind, pv_noise, wind_noise = build_res_profiles(
        sc.cf_pv, sc.cf_wind, sc.sigma_pv, sc.sigma_wind,
        streams["res"], layout)
    grid = build_grid_availability(sc.grid_beta_a, sc.grid_beta_b,
                                   np.random.default_rng(streams["grid"]), layout)
    scale = node_scales(cfg.study.n_gers, sc.sigma_node, np.random.default_rng(streams["node"]))
    return ScenarioPath(seed, layout.months, ed, hd, r, pv, wind, grid, scale, pv_noise, wind_noise)


def scenario_set(cfg: StudyConfig, n: int, base_seed: int) -> list[ScenarioPath]:
    layout = HourLayout.from_config(cfg)
    return [assemble_scenario(cfg, base_seed + k, layout) for k in range(n)]


# -- CSV cache -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_scenario_csv(path_monthly: Path, path_hourly: Path, sp: ScenarioPath, meta: str = "") -> None:
    """Monthly ``month, ed_kwh, hd_kwh, r_km`` and hourly ``hour, pv_cf, wind_cf, grid_up``."""
    scale = ";".join(_fmt(v) for v in sp.node_scale)
    head = f"# seed={sp.seed} node_scale={scale}{(' ' + meta) if meta else ''}\n"
    with open(path_monthly, "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["month", "ed_kwh", "hd_kwh", "r_km"])
        for m in range(sp.months):
            w.writerow([m, _fmt(sp.ed_monthly[m]), _fmt(sp.hd_monthly[m]), _fmt(sp.r_cluster_monthly[m])])
    with open(path_hourly, "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "pv_cf", "wind_cf", "grid_up"])
        for h in range(len(sp.pv_cf)):
            w.writerow([h, _fmt(sp.pv_cf[h]), _fmt(sp.wind_cf[h]), int(sp.grid_up[h])])


def _read_rows(path: Path, header: list[str]) -> tuple[dict[str, str], list[list[str]]]:
    meta: dict[str, str] = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        else:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return meta, rows[1:]


def read_hourly_csv(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Import an hourly trace ``hour, pv_cf, wind_cf, grid_up`` (e.g. measured data)."""
    _, rows = _read_rows(Path(path), ["hour", "pv_cf", "wind_cf", "grid_up"])
    arr = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(-1, 3)
    pv, wind, grid = arr[:, 0], arr[:, 1], arr[:, 2]
    if np.any((pv < 0) | (pv > 1) | (wind < 0) | (wind > 1)):
        raise ValueError(f"{path}: capacity factors must lie in [0, 1]")
    if not np.all(np.isin(grid, (0.0, 1.0))):
        raise ValueError(f"{path}: grid_up must be 0 or 1")
    return pv, wind, grid.astype(np.uint8)


def read_scenario_csv(path_monthly: Path, path_hourly: Path) -> ScenarioPath:
    meta, rows = _read_rows(Path(path_monthly), ["month", "ed_kwh", "hd_kwh", "r_km"])
    arr = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(-1, 3)
    pv, wind, grid = read_hourly_csv(path_hourly)
    scale = np.array([float(v) for v in meta.get("node_scale", "1").split(";")])
    return ScenarioPath(int(meta.get("seed", -1)), len(arr), arr[:, 0], arr[:, 1], arr[:, 2],
                        pv, wind, grid, scale)
