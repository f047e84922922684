"""Glue for the flexible design: bounds pre-pass, training environments, batched rollouts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acer import AcerSettings, Policy, PolicyParameters, TrainLog, train
from .config import StudyConfig
from .env import OBS_DIM, Bounds, EnvMode, PlanningEnv
from .ledger import discounted_npc
from .powerflow import F_CO2, F_EH, F_UL_EL, F_UL_HEAT
from .scenario import HourLayout, ScenarioPath, assemble_scenario


class ScenarioStream:
    """Endless training scenarios; stream ``i`` of ``k`` uses seeds ``base + i + j * k``."""

    def __init__(self, cfg: StudyConfig, layout: HourLayout, index: int, n_streams: int):
        self.cfg, self.layout = cfg, layout
        self.next_seed = cfg.train_seed_base + index
        self.stride = n_streams

    def __next__(self) -> ScenarioPath:
        sp = assemble_scenario(self.cfg, self.next_seed, self.layout)
        self.next_seed += self.stride
        return sp


class TrainingEnv:
    """Planning env that draws a fresh scenario on every reset."""

    def __init__(self, env: PlanningEnv, stream: ScenarioStream):
        self.env, self.stream = env, stream

    def reset(self):
        return self.env.reset(next(self.stream))

    def step(self, action, probs=None):
        return self.env.step(action, probs)


def compute_bounds(cfg: StudyConfig, scenarios: list[ScenarioPath], initial_theta, seed: int,
                   layout: HourLayout | None = None) -> Bounds:
    """Feature ranges seen under a uniform-random policy over ``scenarios``."""
    layout = layout or HourLayout.from_config(cfg)
    env = PlanningEnv(cfg, None, EnvMode(training=True), layout, initial_theta)
    rng = np.random.default_rng(seed)
    lo = np.full(OBS_DIM, np.inf)
    hi = np.full(OBS_DIM, -np.inf)
    for sp in scenarios:
        raw = env.reset(sp)
        while True:
            lo = np.minimum(lo, raw)
            hi = np.maximum(hi, raw)
            if env.done:
                break
            raw, _, _, _ = env.step(rng.integers(0, env.n_options, size=4))
    lo[-1], hi[-1] = 0.0, 1.0
    return Bounds(lo, hi)


def train_policy(cfg: StudyConfig, bounds: Bounds, initial_theta, on_update=None,
                 layout: HourLayout | None = None) -> tuple[PolicyParameters, PolicyParameters, TrainLog]:
    """Returns ``(initial_params, trained_params, log)``."""
    layout = layout or HourLayout.from_config(cfg)
    s = AcerSettings.from_config(cfg)
    n_opt = 4 if cfg.env.abandonment else 3
    params = PolicyParameters.init(OBS_DIM, cfg.learner.hidden, 4, n_opt, cfg.train_seed_base)
    init = params.copy()

    def factory(i):
        env = PlanningEnv(cfg, bounds, EnvMode(training=True), layout, initial_theta)
        return TrainingEnv(env, ScenarioStream(cfg, layout, i, s.n_envs))

    trained, log = train(factory, params, s, cfg.train_seed_base + 1, on_update)
    return init, trained, log


@dataclass
class RolloutResult:
    """Per-scenario test-mode outcomes of one alternative."""

    seeds: np.ndarray
    npc: np.ndarray            # (S,)
    ledger: np.ndarray         # (S, M, 8)
    flows: np.ndarray          # (S, M, N_FLOWS)
    theta: np.ndarray          # (S, M, 4) system capacities after each month's action
    actions: np.ndarray        # (S, M, 4) tech, kind, node, modules (-1 = none)
    prev_ul_frac: np.ndarray   # (S, M) previous-month unmet electricity / demand

    @property
    def emissions(self) -> np.ndarray:
        return self.flows[..., F_CO2].sum(axis=1)

    @property
    def tul(self) -> np.ndarray:
        return self.flows[..., F_UL_EL].sum(axis=1)

    @property
    def violations(self) -> tuple[float, float]:
        return float(self.ledger[..., 6].sum(axis=1).mean()), float(self.ledger[..., 7].sum(axis=1).mean())

    def heat_mix(self) -> np.ndarray:
        """(M, 3) scenario means of coal heat (kWh), EH heat (kWh) and CO2 (t)."""
        return np.stack([self.flows[..., F_UL_HEAT].mean(0), self.flows[..., F_EH].mean(0),
                         self.flows[..., F_CO2].mean(0)], axis=1)


def rollout_policy(policy: Policy | None, cfg: StudyConfig, bounds: Bounds | None,
                   scenarios: list[ScenarioPath], initial_theta, mode: EnvMode,
                   layout: HourLayout | None = None, script=None) -> RolloutResult:
    """Run every scenario in lockstep (one batched forward pass per month).

    ``policy=None`` takes all no-ops; ``script(month) -> action`` overrides the policy.
    """
    layout = layout or HourLayout.from_config(cfg)
    envs = [PlanningEnv(cfg, bounds, mode, layout, initial_theta) for _ in scenarios]
    obs = np.stack([e.reset(sp) for e, sp in zip(envs, scenarios)])
    T = cfg.study.horizon_months
    prev_frac = np.zeros((len(envs), T))
    for m in range(T):
        if script is not None:
            acts = np.tile(np.asarray(script(m), dtype=np.int64), (len(envs), 1))
            probs = None
        elif policy is not None:
            acts, probs = policy.act(obs)
        else:
            acts, probs = np.zeros((len(envs), 4), dtype=np.int64), None
        for i, e in enumerate(envs):
            if m > 0:
                ed = e.flows[m - 1, 0]
                prev_frac[i, m] = e.flows[m - 1, F_UL_EL] / ed if ed > 0 else 0.0
            o, _, _, _ = e.step(acts[i], None if probs is None else probs[i])
            obs[i] = o
    ledger = np.stack([e.ledger for e in envs])
    return RolloutResult(np.array([sp.seed for sp in scenarios], dtype=np.int64),
                         discounted_npc(ledger[..., 4], cfg.costs.discount_rate), ledger,
                         np.stack([e.flows for e in envs]), np.stack([e.theta_hist for e in envs]),
                         np.stack([e.actions for e in envs]), prev_frac)

