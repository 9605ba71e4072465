"""Command-line entry point: ``causalcredit <command> [--flags]``.

Commands
--------
gen           draw an environment and write dataset.jsonl, hidden.jsonl, truth.json
train-model   fit the causal reward model; writes model.json, metrics.csv, curves.png
assign        replace the team reward by per-agent rewards; writes an assigned JSONL
train-policy  offline CQL on assigned (individual) or team rewards
eval          greedy rollouts of a trained policy in the generating environment
oracle        closed-form linear decomposition and brute-force mask search
ablate        sweep lambda1, lambda2 or the graph variant over three seeds

Exit codes: 0 success, 2 usage, 3 data/config mismatch, 4 numerical failure.
The environment variable MACCA_SEED, when set, overrides every seed flag.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, oracle, pipeline, plotting
from .approximator import NonFiniteGradient
from .causalmodel import AssignedDataset, CausalModel, NumericalFailure, assign_rewards
from .core import (DatasetFormatError, DimensionMismatch, RunConfig, read_dataset,
                   validate_dataset, write_dataset)
from .oracle import BudgetError, ConditioningError
from .policy import EvalReport, PolicyDivergence, QEnsemble, evaluate, train_policy
from .synthenv import (FAMILIES, HiddenRewards, TIERS, collect_dataset, load_truth, make_env,
                       save_truth)

EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class Mismatch(Exception):
    pass


def _env_seed(flag_value: int | None) -> int | None:
    raw = os.environ.get("MACCA_SEED")
    if raw is None or raw == "":
        return flag_value
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MACCA_SEED must be an integer, got {raw!r}") from None


def _out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file {p} does not exist")
    return p


def _load_dataset(path: str, extra_keys=()):
    try:
        res = read_dataset(_existing(path, "dataset"), extra_keys=extra_keys)
    except DatasetFormatError as exc:
        raise Mismatch(str(exc)) from exc
    ds = res[0] if extra_keys else res
    problems = validate_dataset(ds)
    if problems:
        raise Mismatch("dataset failed validation: " + "; ".join(str(v) for v in problems[:5]))
    return res


def _resolve_config(args, tier: str | None = None) -> RunConfig:
    base = RunConfig.for_tier(tier) if tier in TIERS else RunConfig()
    try:
        cfg = RunConfig.load(_existing(args.config, "config"), base) if args.config else base
    except ValueError as exc:
        raise UsageError(f"bad config: {exc}") from exc
    seed = _env_seed(getattr(args, "seed", None))
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _echo(cfg: RunConfig) -> None:
    print("# resolved config")
    print(cfg.to_text(), end="", flush=True)


def _check_dims(what: str, got, expected) -> None:
    if tuple(got) != tuple(expected):
        raise Mismatch(f"{what}: {tuple(got)} does not match dataset {tuple(expected)}")


def _optional_truth(path: str | None):
    return load_truth(_existing(path, "truth")) if path else (None, None)


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.agents < 1:
        raise UsageError("--agents must be >= 1")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    seed = _env_seed(args.seed)
    print(f"# gen env={args.env} agents={args.agents} tier={args.tier} episodes={args.episodes} "
          f"seed={seed} state_dim={args.state_dim} actions={args.actions} "
          f"sparsity={args.sparsity} noise={args.noise}", flush=True)
    out = _out_dir(args.out, args.force)
    env, truth = make_env(args.env, args.agents, (args.state_dim, args.actions), args.sparsity,
                          seed, noise_sigma=args.noise)
    ds, hidden = collect_dataset(env, truth, args.tier, args.episodes, seed)
    write_dataset(ds, out / "dataset.jsonl")
    hidden.write(out / "hidden.jsonl")
    save_truth(env, truth, out / "truth.json")
    print(f"wrote {len(ds)} transitions to {out}")
    return 0


def cmd_train_model(args) -> int:
    ds = _load_dataset(args.data)
    cfg = _resolve_config(args, ds.tier)
    _echo(cfg)
    out = _out_dir(args.out, args.force)
    _, truth = _optional_truth(args.truth)
    if truth is not None:
        _check_dims("truth state dims", truth.state_masks.shape, (ds.n_agents, ds.state_dim))
    hidden = HiddenRewards.read(_existing(args.hidden, "hidden")) if args.hidden else None
    if hidden is not None:
        _check_dims("hidden reward table", hidden.r.shape, (len(ds), ds.n_agents))
    run = pipeline.fit_model(ds, cfg, truth, hidden)
    run.model.save(out / "model.json")
    rows = pipeline.metrics_rows(run.log)
    metrics.write_metrics_csv(rows, out / "metrics.csv")
    plotting.plot_training_curves(run.log.rows, ["heldout_mse", "S_sr", "S_ar", "mask_f1"],
                                  out / "curves.png", "causal model training")
    final = run.final
    print(f"final held-out mse {final['heldout_mse']:.5g} (Var R {final['var_R']:.5g}) "
          f"S_sr {final['S_sr']:.3f} S_ar {final['S_ar']:.3f}")
    if run.fidelity is not None:
        print("decomposition correlation per agent: "
              + " ".join(f"{c:.4f}" for c in run.fidelity.corr))
    return 0


def cmd_assign(args) -> int:
    ds = _load_dataset(args.data)
    model = CausalModel.load(_existing(args.model, "model"))
    _check_dims("model state dims", model.state_dims, ds.state_dims)
    _check_dims("model action counts", model.action_counts, ds.action_counts)
    print(f"# assign graph_mode={model.graph_mode} h={model.h} clip={not args.no_clip}",
          flush=True)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    assigned = assign_rewards(model, ds, clip=not args.no_clip and model.graph_mode != "FCG")
    assigned.write(out)
    print(f"wrote {len(ds)} assigned transitions to {out}")
    return 0


def cmd_train_policy(args) -> int:
    mode = args.mode.upper()
    if mode == "INDIVIDUAL":
        ds, extra = _load_dataset(args.data, extra_keys=("r_hat",))
        r_hat = np.asarray([e["r_hat"] for e in extra], dtype=np.float64)
        if r_hat.shape != (len(ds), ds.n_agents):
            raise Mismatch(f"assigned rewards {r_hat.shape} do not match dataset "
                           f"{(len(ds), ds.n_agents)}")
        data = AssignedDataset(ds, r_hat)
    else:
        ds = _load_dataset(args.data)
        data = ds
    cfg = _resolve_config(args, ds.tier)
    _echo(cfg)
    out = _out_dir(args.out, args.force)
    env, truth = _optional_truth(args.truth)
    eval_fn = None
    if truth is not None:
        _check_dims("truth state dims", env.state_dims, ds.state_dims)

        def eval_fn(qe, step):
            rep = evaluate(qe, env, truth, cfg.eval_episodes, cfg.seed)
            return {"mean_return": rep.mean_return, "normalized_score": rep.normalized_score}

    qe, log = train_policy(data, cfg, mode, eval_fn=eval_fn)
    qe.save(out / "policy.json")
    nan = float("nan")
    rows = [metrics.MetricsRow(step=int(r["step"]), S_sr=nan, S_ar=nan, recon_mse=nan,
                               normalized_score=r.get("normalized_score"))
            for r in log.rows]
    metrics.write_metrics_csv(rows, out / "metrics.csv")
    keys = [k for k in log.rows[-1] if k.startswith("loss")] + ["mean_return"]
    plotting.plot_training_curves(log.rows, keys, out / "curves.png", f"CQL ({mode.lower()})")
    print(f"wrote policy to {out / 'policy.json'}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    qe = QEnsemble.load(_existing(args.policy, "policy"))
    env, truth = load_truth(_existing(args.truth, "truth"))
    _check_dims("policy state dims", qe.state_dims, env.state_dims)
    _check_dims("policy action counts", qe.action_counts, env.action_counts)
    seed = _env_seed(args.seed)
    print(f"# eval episodes={args.episodes} seed={seed}", flush=True)
    rep = evaluate(qe, env, truth, args.episodes, seed)
    text = json.dumps(rep.to_dict(), indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        rep.write(args.out)
    return 0


def cmd_oracle(args) -> int:
    ds = _load_dataset(args.data)
    env, truth = load_truth(_existing(args.truth, "truth"))
    _check_dims("truth state dims", env.state_dims, ds.state_dims)
    _check_dims("truth action counts", env.action_counts, ds.action_counts)
    print(f"# oracle lambda={args.ridge_lambda} max_dims={args.max_dims}", flush=True)
    decomp = oracle.linear_decomposition_oracle(ds, truth, lam=args.ridge_lambda)
    try:
        masks = oracle.brute_force_masks(ds, args.max_dims, scope=truth.scope)
    except BudgetError as exc:
        print(f"brute-force search skipped: {exc}", file=sys.stderr)
        masks = None
    report = oracle.oracle_report(decomp, masks)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        oracle.write_report(report, args.out)
    return 0


def cmd_ablate(args) -> int:
    try:
        values = pipeline.parse_values(args.sweep, args.values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = _resolve_config(args, args.tier)
    _echo(cfg)
    out = _out_dir(args.out, args.force)
    seeds = [cfg.seed + k for k in range(args.seeds)]

    def factory(seed):
        return pipeline.make_bundle(args.env, args.agents, args.tier, args.episodes, seed)

    def progress(row):
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in row.items()), flush=True)

    rows = pipeline.run_sweep(args.sweep, values, cfg, seeds, factory, progress)
    pipeline.write_rows(rows, out / "runs.csv")
    summary = pipeline.summarize(rows, values)
    pipeline.write_rows(summary, out / "summary.csv")
    keys = {"lambda1": ["S_sr", "S_ar"], "lambda2": ["S_ar", "S_sr"],
            "graph": ["mean_return", "decomp_corr"]}[args.sweep]
    plotting.plot_ablation(summary, keys, out / "ablation.png", args.sweep)
    for r in summary:
        print(f"{r['value']}: " + " ".join(f"{k}={r[k + '_mean']:.4g}±{r[k + '_std']:.2g}"
                                           for k in keys))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causalcredit", description=__doc__.split("\n")[0],
                                allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, allow_abbrev=False)
        sp.set_defaults(func=func)
        return sp

    g = add("gen", cmd_gen, "generate an environment and an offline dataset")
    g.add_argument("--env", choices=FAMILIES, default="LINEAR")
    g.add_argument("--agents", type=int, required=True)
    g.add_argument("--tier", choices=TIERS, default="expert")
    g.add_argument("--episodes", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--state-dim", type=int, default=pipeline.DEFAULT_DIMS[0])
    g.add_argument("--actions", type=int, default=pipeline.DEFAULT_DIMS[1])
    g.add_argument("--sparsity", type=float, default=pipeline.DEFAULT_SPARSITY)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")

    t = add("train-model", cmd_train_model, "train the causal reward model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--truth", help="truth.json, enables mask F1 in the log")
    t.add_argument("--hidden", help="hidden.jsonl, enables decomposition correlation")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")

    a = add("assign", cmd_assign, "assign individual rewards with a trained model")
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--no-clip", action="store_true", help="skip threshold clipping")
    a.add_argument("--force", action="store_true")

    tp = add("train-policy", cmd_train_policy, "offline CQL on individual or team rewards")
    tp.add_argument("--data", required=True)
    tp.add_argument("--mode", choices=("individual", "team"), required=True)
    tp.add_argument("--config")
    tp.add_argument("--truth", help="truth.json, enables periodic evaluation")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--out", required=True)
    tp.add_argument("--force", action="store_true")

    e = add("eval", cmd_eval, "evaluate a greedy policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="also write the JSON report here")

    o = add("oracle", cmd_oracle, "closed-form and brute-force references")
    o.add_argument("--data", required=True)
    o.add_argument("--truth", required=True)
    o.add_argument("--ridge-lambda", type=float, default=1e-3)
    o.add_argument("--max-dims", type=int, default=oracle.MAX_SEARCH_DIMS)
    o.add_argument("--out", help="also write the JSON report here")

    ab = add("ablate", cmd_ablate, "sweep a hyperparameter over three seeds")
    ab.add_argument("--sweep", choices=sorted(pipeline.SWEEPS), required=True)
    ab.add_argument("--values", required=True, help="comma separated, e.g. 0,0.007,0.05")
    ab.add_argument("--config")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--env", choices=FAMILIES, default="LINEAR")
    ab.add_argument("--agents", type=int, default=3)
    ab.add_argument("--tier", choices=TIERS, default="expert")
    ab.add_argument("--episodes", type=int, default=400)
    ab.add_argument("--out", required=True)
    ab.add_argument("--force", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (Mismatch, DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (NumericalFailure, PolicyDivergence, NonFiniteGradient, ConditioningError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
