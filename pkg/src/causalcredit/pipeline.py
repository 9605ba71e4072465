"""End-to-end experiment steps shared by the command line and the test-suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .causalmodel import (AssignedDataset, CausalModel, assign_rewards, build_model,
                          hard_masks, train_model, evaluation_rows, Batch)
from .core import OfflineDataset, RunConfig, TrainingLog
from .policy import EvalReport, QEnsemble, evaluate, train_policy
from .synthenv import EnvSpec, GroundTruthSpec, HiddenRewards, collect_dataset, make_env

DEFAULT_DIMS = (6, 5)
DEFAULT_SPARSITY = 0.3
GRAPH_VARIANTS = ("FCG", "FG", "DG", "DG-noclip")


@dataclass
class Bundle:
    env: EnvSpec
    truth: GroundTruthSpec
    ds: OfflineDataset
    hidden: HiddenRewards


def make_bundle(kind: str = "LINEAR", n_agents: int = 3, tier: str = "expert",
                episodes: int = 400, seed: int = 0, dims=DEFAULT_DIMS,
                sparsity: float = DEFAULT_SPARSITY, noise_sigma: float = 0.0) -> Bundle:
    env, truth = make_env(kind, n_agents, dims, sparsity, seed, noise_sigma=noise_sigma)
    ds, hidden = collect_dataset(env, truth, tier, episodes, seed)
    return Bundle(env, truth, ds, hidden)


def metrics_rows(log: TrainingLog) -> list[metrics.MetricsRow]:
    """Convert a model-training log into CSV rows."""
    nan = float("nan")
    return [metrics.MetricsRow(step=int(r["step"]), S_sr=r["S_sr"], S_ar=r["S_ar"],
                               recon_mse=r["heldout_mse"],
                               mask_f1_state=r.get("mask_f1_state", nan),
                               mask_f1_action=r.get("mask_f1_action", nan),
                               decomp_corr=r.get("decomp_corr", nan))
            for r in log.rows]


@dataclass
class ModelRun:
    model: CausalModel
    log: TrainingLog
    assigned: AssignedDataset
    fidelity: metrics.Fidelity | None

    @property
    def final(self) -> dict:
        return self.log.last()


def fit_model(ds: OfflineDataset, config: RunConfig, truth: GroundTruthSpec | None = None,
              hidden: HiddenRewards | None = None) -> ModelRun:
    """Train the causal model, assign rewards and score the decomposition if truth is known."""
    model, log = train_model(build_model(ds, config), ds, config, truth=truth)
    clip = config.clip_enabled and config.graph_mode != "FCG"
    assigned = assign_rewards(model, ds, clip=clip)
    fid = None
    if hidden is not None:
        fid = metrics.decomposition_fidelity(assigned.r_hat, hidden.r)
        if log.rows:
            log.rows[-1]["decomp_corr"] = fid.min_corr
    return ModelRun(model, log, assigned, fid)


def learned_graph(model: CausalModel, ds: OfflineDataset, config: RunConfig
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Majority-voted hard graph over the evaluation sample (actions vote only when taken)."""
    batch = Batch.from_dataset(ds, evaluation_rows(ds, config.mask_samples, config.seed))
    hs, ha = hard_masks(model, batch.s, batch.a_onehot, config.h)
    return metrics.graph_from_arrays(hs, ha, batch.a_onehot)


@dataclass
class PolicyRun:
    qe: QEnsemble
    log: TrainingLog
    report: EvalReport


def fit_policy(data, config: RunConfig, env: EnvSpec, truth: GroundTruthSpec, mode: str,
               rewards: np.ndarray | None = None, eval_episodes: int | None = None) -> PolicyRun:
    episodes = eval_episodes or config.eval_episodes

    def eval_fn(qe, step):
        rep = evaluate(qe, env, truth, episodes, config.seed)
        return {"mean_return": rep.mean_return, "normalized_score": rep.normalized_score}

    qe, log = train_policy(data, config, mode, rewards=rewards, eval_fn=eval_fn)
    return PolicyRun(qe, log, evaluate(qe, env, truth, episodes, config.seed))


def graph_variant_config(config: RunConfig, variant: str) -> RunConfig:
    variant = variant.strip()
    if variant not in GRAPH_VARIANTS:
        raise ValueError(f"graph variant must be one of {GRAPH_VARIANTS}, got {variant!r}")
    if variant == "DG-noclip":
        return config.replace(graph_mode="DG", clip_enabled=False)
    return config.replace(graph_mode=variant, clip_enabled=True)


def run_graph_variant(bundle: Bundle, config: RunConfig, variant: str,
                      eval_episodes: int | None = None) -> dict:
    cfg = graph_variant_config(config, variant)
    mr = fit_model(bundle.ds, cfg, bundle.truth, bundle.hidden)
    pr = fit_policy(mr.assigned, cfg, bundle.env, bundle.truth, "INDIVIDUAL",
                    eval_episodes=eval_episodes)
    return {"variant": variant, "mean_return": pr.report.mean_return,
            "std_return": pr.report.std_return, "normalized_score": pr.report.normalized_score,
            "S_sr": mr.final["S_sr"], "S_ar": mr.final["S_ar"],
            "decomp_corr": mr.fidelity.min_corr if mr.fidelity else float("nan")}


SWEEPS = {"lambda1": "lambda1", "lambda2": "lambda2", "graph": "graph"}


def parse_values(sweep: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ValueError("no sweep values given")
    if sweep == "graph":
        for v in items:
            graph_variant_config(RunConfig(), v)
        return items
    vals = [float(v) for v in items]
    if any(v < 0 for v in vals):
        raise ValueError("regularisation weights must be >= 0")
    return vals


def run_sweep(sweep: str, values: Sequence, config: RunConfig, seeds: Sequence[int],
              data_factory=make_bundle, progress=None) -> list[dict]:
    """One row per (value, seed); a data bundle is built once per seed."""
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {sorted(SWEEPS)}")
    rows = []
    for seed in seeds:
        bundle = data_factory(seed=seed)
        cfg = config.replace(seed=seed)
        for value in values:
            if sweep == "graph":
                row = run_graph_variant(bundle, cfg, value)
            else:
                mr = fit_model(bundle.ds, cfg.replace(**{sweep: float(value)}), bundle.truth,
                               bundle.hidden)
                row = {"S_sr": mr.final["S_sr"], "S_ar": mr.final["S_ar"],
                       "mask_f1": mr.final.get("mask_f1", float("nan")),
                       "recon_mse": mr.final["heldout_mse"],
                       "decomp_corr": mr.fidelity.min_corr if mr.fidelity else float("nan")}
            row = {"value": value, "seed": seed, **{k: v for k, v in row.items() if k != "variant"}}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize(rows: list[dict], values: Sequence) -> list[dict]:
    """Mean and sample std per sweep value over seeds, in the order of ``values``."""
    keys = [k for k in rows[0] if k not in ("value", "seed")]
    out = []
    for v in values:
        cell = [r for r in rows if r["value"] == v]
        summ = {"value": v, "n_seeds": len(cell)}
        for k in keys:
            xs = np.array([np.nan if r[k] is None else r[k] for r in cell], dtype=float)
            summ[f"{k}_mean"] = float(np.mean(xs))
            summ[f"{k}_std"] = float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
        out.append(summ)
    return out


def write_rows(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
