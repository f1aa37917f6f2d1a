"""Command-line entry point: ``fieldflow <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import regcfm
from .env import ScenarioKind, generate_scenario, read_scenario, synthesize_demonstrations, write_grid_pgm, write_scenario
from .field import solve_field, write_field_csv, write_field_pgm
from .harness import (ALL_MODES, ModelCache, Mode, PipelineConfig, PipelineError, ablation_suite,
                      benchmark_scenarios, config_hash, load_config, prepare_all, prepare_scenario, refine_episode,
                      run_episodes, steps_sweep, train_mode_model, training_scenarios)
from .metrics import aggregate, format_records_jsonl, format_summary_csv, summary_row
from .prior import extract_prior, read_mixture_csv, write_mixture_csv
from .trajectory import write_trajectory_csv

log = logging.getLogger("fieldflow")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    over = {"seed": args.seed} if args.seed is not None else {}
    if getattr(args, "mode", None):
        over["mode"] = Mode.parse(args.mode).value
    if getattr(args, "episodes", None):
        over["episodes_per_kind"] = args.episodes
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    for name in ("rho", "kappa", "epsilon", "train_steps", "n_steps"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    return replace(cfg, **over) if over else cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _provenance(cfg: PipelineConfig) -> dict:
    return {"config_hash": config_hash(cfg), "master_seed": cfg.seed}


def cmd_gen_scenarios(args) -> None:
    cfg = _config(args)
    out = _out(args)
    kinds = [ScenarioKind.parse(k) for k in (args.kinds.split(",") if args.kinds else cfg.kinds)]
    size = args.size or cfg.size
    names = []
    for k in kinds:
        for i in range(args.count):
            s = generate_scenario(k, cfg.seed * 1000 + i, size, cfg.resolution)
            stem = f"{k.value}_{s.seed}"
            write_scenario(s, out / f"{stem}.json")
            write_grid_pgm(s.grid, out / f"{stem}.pgm")
            names.append(f"{stem}.json")
    _write(out / "scenarios.txt", "\n".join(names) + "\n")


def cmd_solve_field(args) -> None:
    cfg = _config(args)
    out = _out(args)
    s = read_scenario(args.scenario)
    labels = synthesize_demonstrations(s, cfg.n_demos, cfg.demo_noise, cfg.seed)
    mu = cfg.mu if args.mu is None else args.mu
    nu = cfg.nu if args.nu is None else args.nu
    f = solve_field(labels, s.grid, mu, nu, args.solver or cfg.solver, args.tol)
    write_field_csv(f, out / "field.csv")
    write_field_pgm(f, out / "field.pgm")
    _write(out / "field.json", json.dumps({**_provenance(cfg), "residual": f.residual, "iterations": f.iterations,
                                            "mu": mu, "nu": nu}, sort_keys=True, indent=2) + "\n")


def cmd_extract_priors(args) -> None:
    cfg = _config(args)
    out = _out(args)
    s = read_scenario(args.scenario)
    labels = synthesize_demonstrations(s, cfg.n_demos, cfg.demo_noise, cfg.seed)
    f = solve_field(labels, s.grid, cfg.mu, cfg.nu, cfg.solver)
    prior = extract_prior(f, s.grid, s.start, s.goal, args.K or cfg.K, args.M or cfg.M,
                          cfg.temperature if args.temperature is None else args.temperature,
                          cfg.delta if args.delta is None else args.delta, cfg.n_waypoints, cfg.score_weights)
    write_mixture_csv(prior, out / "mixture.csv")


def cmd_train_flow(args) -> None:
    cfg = _config(args)
    out = _out(args)
    contexts = prepare_all(cfg, training_scenarios(cfg))
    res = train_mode_model(cfg, contexts, cfg.mode)
    regcfm.save_model(res.model, out / "model.bin")
    if args.text:
        regcfm.save_model_text(res.model, out / "model.txt")
    trace = "\n".join(["step,loss"] + [f"{i + 1},{float(v)!r}" for i, v in enumerate(res.trace)]) + "\n"
    _write(out / "loss_trace.csv", trace)
    _write(out / "train.json", json.dumps({**_provenance(cfg), "mode": cfg.mode, "initial_loss": res.initial_loss,
                                            "final_loss": res.final_loss}, sort_keys=True, indent=2) + "\n")


def _model(cfg: PipelineConfig, path, cache: ModelCache | None = None):
    if path:
        return regcfm.load_model(path)
    return (cache or ModelCache(cfg)).get(cfg.mode)


def cmd_refine(args) -> None:
    cfg = _config(args)
    out = _out(args)
    s = read_scenario(args.scenario)
    ctx = prepare_scenario(cfg, s)
    model = _model(cfg, args.model)
    if args.prior:
        ctx.mixture = read_mixture_csv(args.prior)
    tau = refine_episode(cfg, ctx, model, cfg.mode, args.n_steps or cfg.n_steps)
    write_trajectory_csv(tau, out / "trajectory.csv")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    out = _out(args)
    contexts = prepare_all(cfg, benchmark_scenarios(cfg))
    model = _model(cfg, args.model)
    episodes = run_episodes(cfg, contexts, model, cfg.mode)
    rep = aggregate(episodes, cfg.ms_successes_only)
    prov = _provenance(cfg)
    _write(out / "episodes.jsonl", format_records_jsonl(rep.records, {**prov, "mode": cfg.mode}))
    row = {"config_hash": prov["config_hash"], "seed": cfg.seed, "mode": cfg.mode, **summary_row(rep)}
    _write(out / "summary.csv", format_summary_csv([row]))


def cmd_sweep_steps(args) -> None:
    cfg = _config(args)
    out = _out(args)
    steps = [int(v) for v in args.steps.split(",")]
    contexts = prepare_all(cfg, benchmark_scenarios(cfg))
    cache = ModelCache(cfg)
    if args.model:
        cache.put(cfg.mode, regcfm.load_model(args.model))
    res = steps_sweep(cfg, contexts, steps, cfg.mode, cache)
    _write(out / "sweep.csv", format_summary_csv(res.rows))
    if args.timing:
        rows = [{"N": n, "seconds_per_episode": t} for n, t in res.seconds_per_call.items()]
        _write(out / "sweep_timing.csv", format_summary_csv(rows))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    out = _out(args)
    modes = [Mode.parse(m) for m in args.modes.split(",")] if args.modes else list(ALL_MODES)
    contexts = prepare_all(cfg, benchmark_scenarios(cfg))
    res = ablation_suite(cfg, contexts, modes)
    prov = _provenance(cfg)
    _write(out / "ablation.csv", format_summary_csv(res.rows))
    for m in res.modes:
        _write(out / f"episodes_{m}.jsonl", format_records_jsonl(res.reports[m].records, {**prov, "mode": m}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", default="out", help="output directory")
    common.add_argument("--workers", type=int, help="episode worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fieldflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenarios", parents=[common], help="write scenario files and grids")
    g.add_argument("--kinds", help="comma-separated kinds (default: config kinds)")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--size", type=int)
    g.set_defaults(func=cmd_gen_scenarios)

    f = sub.add_parser("solve-field", parents=[common], help="label a scenario and solve for its success field")
    f.add_argument("--scenario", required=True)
    f.add_argument("--mu", type=float)
    f.add_argument("--nu", type=float)
    f.add_argument("--solver", choices=["cg", "direct"])
    f.add_argument("--tol", type=float, default=1e-10, help="relative residual tolerance for cg")
    f.set_defaults(func=cmd_solve_field)

    e = sub.add_parser("extract-priors", parents=[common], help="build the mixture prior for a scenario")
    e.add_argument("--scenario", required=True)
    e.add_argument("--K", "--k", dest="K", type=int, help="raw shortest paths")
    e.add_argument("--M", "--m", dest="M", type=int, help="mixture components")
    e.add_argument("--temperature", "--temp", dest="temperature", type=float)
    e.add_argument("--delta", type=float)
    e.set_defaults(func=cmd_extract_priors)

    t = sub.add_parser("train-flow", parents=[common], help="train the refinement flow")
    t.add_argument("--mode", help="ablation mode (default: config mode)")
    t.add_argument("--rho", type=float)
    t.add_argument("--kappa", type=float)
    t.add_argument("--eps", dest="epsilon", type=float)
    t.add_argument("--steps", dest="train_steps", type=int)
    t.add_argument("--text", action="store_true", help="also write the text checkpoint")
    t.set_defaults(func=cmd_train_flow)

    r = sub.add_parser("refine", parents=[common], help="refine one prior sample")
    r.add_argument("--scenario", required=True)
    r.add_argument("--model")
    r.add_argument("--prior", help="mixture file from extract-priors")
    r.add_argument("--mode")
    r.add_argument("--n-steps", dest="n_steps", type=int)
    r.set_defaults(func=cmd_refine)

    v = sub.add_parser("evaluate", parents=[common], help="run the benchmark in one mode")
    v.add_argument("--model")
    v.add_argument("--mode")
    v.add_argument("--episodes", type=int, help="episodes per scenario kind")
    v.add_argument("--n-steps", dest="n_steps", type=int)
    v.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep-steps", parents=[common], help="success rate against Euler step count")
    w.add_argument("--steps", default="1,2,5,10")
    w.add_argument("--model")
    w.add_argument("--mode")
    w.add_argument("--episodes", type=int)
    w.add_argument("--timing", action="store_true", help="also write wall-clock per episode (not reproducible)")
    w.set_defaults(func=cmd_sweep_steps)

    a = sub.add_parser("ablate", parents=[common], help="paired comparison over ablation modes")
    a.add_argument("--modes", help="comma-separated modes (default: all)")
    a.add_argument("--episodes", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
