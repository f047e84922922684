"""Command line entry point: ``nomadgrid [global flags] <command> <subcommand> [flags]``.

Artifacts land in the output directory (``--out``, ``$NOMADGRID_OUT`` or ``./out``)
and carry the config hash; later stages refuse artifacts from another config.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .acer import Policy, load_checkpoint, save_checkpoint
from .analysis import (EvaluationReport, PairingError, design_alternative, radius_sweep, rollout_alternative,
                       strategy_digest, vof_table, vopp_table, write_digest, write_report, write_sweep, write_vof)
from .analysis import Alternative
from .config import ENV_OUT, ConfigError, StudyConfig, dump_toml, parse_config
from .env import Bounds, EnvMode
from .flexible import compute_bounds, rollout_policy, train_policy
from .powerflow import ScenarioArrays
from .rigid import VARIANTS, RigidDesign, ga_optimize, load_results, save_results
from .scenario import HourLayout, scenario_set, write_scenario_csv

log = logging.getLogger("nomadgrid")

EVAL_HEADER = ["seed", "alternative", "npc_usd", "emissions_t", "tul_kwh"]


class PrerequisiteError(RuntimeError):
    pass


# -- artifact paths ------------------------------------------------------------

def _baseline_path(out: Path, variant: str) -> Path:
    return out / f"baseline_{variant}.csv"


def _seed_span(base: int, n: int) -> tuple[int, int]:
    return base, base + n - 1


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"missing {path.name} in {path.parent}; run `{hint}` first")
    return path


def _load_baseline(out: Path, variant: str, cfg: StudyConfig) -> RigidDesign:
    path = _need(_baseline_path(out, variant), f"nomadgrid baseline fit --variant {variant}")
    return load_results(path, cfg.hash())[variant][0]


def _initial_theta(out: Path, cfg: StudyConfig) -> list[float]:
    name = cfg.env.initial_design
    if name == "zero":
        return [0.0, 0.0, 0.0, 0.0]
    return list(_load_baseline(out, name, cfg).theta)


def _load_policy(out: Path, cfg: StudyConfig, bounds: Bounds):
    params, header = load_checkpoint(_need(out / "policy.ckpt", "nomadgrid drl train"), cfg.hash())
    if header.get("bounds_hash") != bounds.digest():
        raise io.ArtifactError("policy.ckpt was trained with different normalisation bounds; rerun "
                               "`nomadgrid drl train`")
    return params, header


def _validate(paths) -> None:
    for p in paths:
        p = Path(p)
        if p.suffix == ".csv":
            io.read_csv(p)
        elif not p.exists() or p.stat().st_size == 0:
            raise io.ArtifactError(f"{p} was not written")


# -- commands ------------------------------------------------------------------

def cmd_scenario_gen(args, cfg: StudyConfig, out: Path) -> list:
    bases = {"eval": cfg.eval_seed_base, "fit": cfg.fit_seed_base, "bounds": cfg.bounds_seed_base}
    sizes = {"eval": cfg.study.n_eval, "fit": cfg.study.n_fit, "bounds": cfg.study.n_bounds}
    n = args.n if args.n is not None else sizes[args.set]
    base = bases[args.set]
    d = out / "scenarios" / args.set
    d.mkdir(parents=True, exist_ok=True)
    meta = f"config_hash={cfg.hash()}"
    paths, rows = [], []
    for sp in scenario_set(cfg, n, base):
        pm, ph = d / f"scenario_{sp.seed}_monthly.csv", d / f"scenario_{sp.seed}_hourly.csv"
        write_scenario_csv(pm, ph, sp, meta)
        paths += [pm, ph]
        rows.append((sp.seed, pm.name, ph.name))
    paths.append(io.write_csv(d / "index.csv", ["seed", "monthly", "hourly"], rows, "scenario_index",
                              cfg.hash(), _seed_span(base, n)))
    return paths


def cmd_baseline_fit(args, cfg: StudyConfig, out: Path) -> list:
    variants = sorted(VARIANTS) if args.variant == "all" else [args.variant]
    layout = HourLayout.from_config(cfg)
    arrays = ScenarioArrays.stack(scenario_set(cfg, cfg.study.n_fit, cfg.fit_seed_base))
    seeds = _seed_span(cfg.fit_seed_base, cfg.study.n_fit)
    paths = []
    for v in variants:
        t0 = time.time()
        res = ga_optimize(v, arrays, layout, cfg, seed=cfg.fit_seed_base + list(VARIANTS).index(v))
        log.info("%s: theta=%s fitness=%.2f (%d evaluations, %.1fs)", v, res.design.theta,
                 res.fitness.fitness, res.evaluations, time.time() - t0)
        paths.append(save_results(_baseline_path(out, v), {v: res}, cfg.hash(), seeds))
        paths.append(io.write_csv(out / f"ga_history_{v}.csv", ["generation", "best_fitness_usd"],
                                  list(enumerate(res.history)), "ga_history", cfg.hash(), seeds))
    return paths


def cmd_bounds_compute(args, cfg: StudyConfig, out: Path) -> list:
    theta0 = _initial_theta(out, cfg)
    layout = HourLayout.from_config(cfg)
    scen = scenario_set(cfg, cfg.study.n_bounds, cfg.bounds_seed_base)
    b = compute_bounds(cfg, scen, theta0, cfg.bounds_seed_base, layout)
    return [b.save(out / "bounds.csv", cfg.hash(), _seed_span(cfg.bounds_seed_base, cfg.study.n_bounds))]


def cmd_drl_train(args, cfg: StudyConfig, out: Path) -> list:
    theta0 = _initial_theta(out, cfg)
    bounds = Bounds.load(_need(out / "bounds.csv", "nomadgrid bounds compute"), cfg.hash())
    layout = HourLayout.from_config(cfg)
    extra = {"initial_theta": theta0}
    ckpt = out / "policy.ckpt"

    def on_update(u, params, tlog):
        if cfg.learner.checkpoint_every and u % cfg.learner.checkpoint_every == 0:
            save_checkpoint(ckpt, params, cfg.hash(), bounds.digest(), {**extra, "update": u})
            r = tlog.rows[-1] if tlog.rows else None
            if r is not None:
                log.info("update %d steps %d mean return %.1f kl %.2e", *r[:4])

    t0 = time.time()
    init, trained, tlog = train_policy(cfg, bounds, theta0, on_update, layout)
    log.info("training finished in %.1fs%s", time.time() - t0, " (halted on non-finite update)" if tlog.halted else "")
    paths = [save_checkpoint(out / "policy_init.ckpt", init, cfg.hash(), bounds.digest(), extra),
             save_checkpoint(ckpt, trained, cfg.hash(), bounds.digest(), {**extra, "halted": tlog.halted})]
    span = (cfg.train_seed_base, cfg.train_seed_base)
    paths.append(io.write_csv(out / "train_log.csv", ["update", "steps", "mean_return_usd", "kl", "grad_norm"],
                              tlog.rows, "train_log", cfg.hash(), span))
    return paths


def _evaluation_rows(alts: dict[str, Alternative]) -> list[tuple]:
    rows = []
    for name, a in alts.items():
        for i, sd in enumerate(a.seeds):
            rows.append((int(sd), name, float(a.npc[i]), float(a.emissions[i]), float(a.tul[i])))
    return rows


def _read_evaluation(out: Path, cfg: StudyConfig) -> dict[str, Alternative]:
    _, header, rows = io.read_csv(_need(out / "evaluation.csv", "nomadgrid evaluate"), "evaluation", cfg.hash())
    if header != EVAL_HEADER:
        raise io.ArtifactError("evaluation.csv: bad header")
    cols: dict[str, list] = {}
    for r in rows:
        cols.setdefault(r[1], []).append((int(r[0]), float(r[2]), float(r[3]), float(r[4])))
    alts = {}
    for name, vals in cols.items():
        a = np.array(vals)
        alts[name] = Alternative(name, a[:, 0].astype(np.int64), a[:, 1], a[:, 2], a[:, 3])
    return alts


def cmd_evaluate(args, cfg: StudyConfig, out: Path) -> list:
    layout = HourLayout.from_config(cfg)
    scen = scenario_set(cfg, cfg.study.n_eval, cfg.eval_seed_base)
    arrays = ScenarioArrays.stack(scen)
    alts: dict[str, Alternative] = {}
    for v in sorted(VARIANTS):
        if _baseline_path(out, v).exists():
            alts[v] = design_alternative(v, _load_baseline(out, v, cfg), arrays, layout, cfg)
    have_policy = (out / "policy.ckpt").exists()
    if not alts and not have_policy:
        raise PrerequisiteError(f"no designs to evaluate in {out}; run `nomadgrid baseline fit --variant all` "
                                "and/or `nomadgrid drl train` first")
    paths = []
    seeds = _seed_span(cfg.eval_seed_base, cfg.study.n_eval)
    focus = None
    if have_policy:
        bounds = Bounds.load(_need(out / "bounds.csv", "nomadgrid bounds compute"), cfg.hash())
        params, header = _load_policy(out, cfg, bounds)
        theta0 = header["initial_theta"]
        greedy = cfg.learner.eval_deterministic
        fd = rollout_policy(Policy(params, greedy, cfg.eval_seed_base), cfg, bounds, scen, theta0,
                            EnvMode(False, True), layout)
        fdn = rollout_policy(Policy(params, greedy, cfg.eval_seed_base), cfg, bounds, scen, theta0,
                             EnvMode(False, False), layout)
        alts["fd"] = rollout_alternative("fd", fd)
        alts["fd_nopp"] = rollout_alternative("fd_nopp", fdn)
        if (out / "policy_init.ckpt").exists():
            p0, _ = load_checkpoint(out / "policy_init.ckpt", cfg.hash())
            init = rollout_policy(Policy(p0, False, cfg.eval_seed_base), cfg, bounds, scen, theta0,
                                  EnvMode(False, True), layout)
            alts["fd_init"] = rollout_alternative("fd_init", init)
        paths += write_digest(out, strategy_digest(fd), cfg.hash(), seeds)
        focus = "fd"
    report = EvaluationReport(alts)
    paths += write_report(out, report, cfg.hash(), focus)
    paths.append(io.write_csv(out / "evaluation.csv", EVAL_HEADER, _evaluation_rows(alts), "evaluation",
                              cfg.hash(), seeds, float_fmt=".17g"))
    for row in report.rows():
        log.info("%-8s ENPC %10.1f  VaR %10.1f  VaG %10.1f", *row[:4])
    return paths


def cmd_analyze_vof(args, cfg: StudyConfig, out: Path) -> list:
    alts = _read_evaluation(out, cfg)
    if "fd" not in alts or "fd_nopp" not in alts:
        raise PrerequisiteError("evaluation.csv has no flexible design; run `nomadgrid drl train` and "
                                "`nomadgrid evaluate` first")
    baselines = {k: v for k, v in alts.items() if k in VARIANTS}
    if not baselines:
        raise PrerequisiteError("evaluation.csv has no baseline designs; run `nomadgrid baseline fit "
                                "--variant all` and `nomadgrid evaluate` first")
    rows = vof_table(alts["fd"], baselines, alts["fd_nopp"])
    seeds = (int(alts["fd"].seeds.min()), int(alts["fd"].seeds.max()))
    for r in rows:
        log.info("%-9s vof_vs_best %12.2f (vs %s)  operational %10.2f  strategic %10.2f", r.metric,
                 r.vof_vs_best, r.best_baseline, r.vof_operational, r.vof_strategic)
    return write_vof(out, rows, vopp_table(alts), cfg.hash(), seeds)


def cmd_sweep_radius(args, cfg: StudyConfig, out: Path) -> list:
    layout = HourLayout.from_config(cfg)
    scen = scenario_set(cfg, cfg.study.n_eval, cfg.eval_seed_base)
    radii = cfg.analysis.sweep_radii_km
    which = cfg.analysis.sweep_design
    if which == "fd":
        bounds = Bounds.load(_need(out / "bounds.csv", "nomadgrid bounds compute"), cfg.hash())
        params, header = _load_policy(out, cfg, bounds)
        res = radius_sweep(cfg, scen, radii, layout, policy=Policy(params, cfg.learner.eval_deterministic,
                                                                     cfg.eval_seed_base),
                           bounds=bounds, initial_theta=header["initial_theta"])
    else:
        res = radius_sweep(cfg, scen, radii, layout, design=_load_baseline(out, which, cfg))
    log.info("break-even radius: %s", "none in range" if res.breakeven is None else f"{res.breakeven:.2f} km")
    return [write_sweep(out, res, cfg.hash(), _seed_span(cfg.eval_seed_base, cfg.study.n_eval))]


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nomadgrid", description="Stochastic planning of mobile plug-and-play "
                                "multi-energy microgrids.")
    p.add_argument("--config", help="TOML study config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="global seed (overrides config and $NOMADGRID_SEED)")
    p.add_argument("--out", help="output directory (default $NOMADGRID_OUT or ./out)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for compiled kernels")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scenario").add_subparsers(dest="sub", required=True)
    g = sc.add_parser("gen", help="write scenario CSVs")
    g.add_argument("--n", type=int, help="number of scenarios (default: size of the chosen set)")
    g.add_argument("--set", choices=("eval", "fit", "bounds"), default="eval")
    g.set_defaults(func=cmd_scenario_gen)

    bl = sub.add_parser("baseline").add_subparsers(dest="sub", required=True)
    f = bl.add_parser("fit", help="GA-size a rigid design")
    f.add_argument("--variant", choices=(*sorted(VARIANTS), "all"), required=True)
    f.set_defaults(func=cmd_baseline_fit)

    bd = sub.add_parser("bounds").add_subparsers(dest="sub", required=True)
    bd.add_parser("compute", help="feature normalisation ranges").set_defaults(func=cmd_bounds_compute)

    dr = sub.add_parser("drl").add_subparsers(dest="sub", required=True)
    dr.add_parser("train", help="train the flexible policy").set_defaults(func=cmd_drl_train)

    sub.add_parser("evaluate", help="out-of-sample report").set_defaults(func=cmd_evaluate, sub=None)

    an = sub.add_parser("analyze").add_subparsers(dest="sub", required=True)
    an.add_parser("vof", help="value of flexibility and plug-and-play").set_defaults(func=cmd_analyze_vof)

    sw = sub.add_parser("sweep").add_subparsers(dest="sub", required=True)
    sw.add_parser("radius", help="distribution loss and VoPP vs cluster radius").set_defaults(
        func=cmd_sweep_radius)
    return p


def _set_threads(n: int) -> None:
    import numba
    # kernels are serial; the portable layer avoids probing optional TBB installs
    numba.config.THREADING_LAYER = "workqueue"
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(study={"seed": args.seed})
    except (ConfigError, OSError) as exc:
        print(f"nomadgrid: config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or os.environ.get(ENV_OUT) or "out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(dump_toml(cfg))
    _set_threads(args.threads)
    log.info("config %s seed %d -> %s", cfg.hash(), cfg.study.seed, out)
    try:
        paths = args.func(args, cfg, out)
        _validate(paths)
    except PrerequisiteError as exc:
        print(f"nomadgrid: missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except (io.ArtifactError, PairingError) as exc:
        print(f"nomadgrid: artifact error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
