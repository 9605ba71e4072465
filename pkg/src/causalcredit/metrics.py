"""Sparsity, mask recovery, decomposition fidelity and normalised score."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass
from decimal import Decimal, localcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import MaskPair, state_slices

METRICS_HEADER = ("step", "S_sr", "S_ar", "recon_mse", "mask_f1_state", "mask_f1_action",
                  "decomp_corr", "normalized_score")


@dataclass
class MetricsRow:
    step: int
    S_sr: float
    S_ar: float
    recon_mse: float
    mask_f1_state: float = float("nan")
    mask_f1_action: float = float("nan")
    decomp_corr: float = float("nan")
    normalized_score: float | None = None

    def __post_init__(self):
        for name in ("S_sr", "S_ar", "mask_f1_state", "mask_f1_action"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not np.isnan(self.decomp_corr) and not -1.0 <= self.decomp_corr <= 1.0:
            raise ValueError(f"decomp_corr={self.decomp_corr} outside [-1, 1]")


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            d = asdict(row)
            writer.writerow(["" if d[k] is None else d[k] for k in METRICS_HEADER])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _own_block_fraction(mask: np.ndarray, agent: int, dims: Sequence[int]) -> float:
    block = mask[..., state_slices(dims)[agent]]
    return float(np.mean(block > 0))


def sparsity_rate(hard_masks: Sequence[MaskPair], which: str, dims: Sequence[int]) -> float:
    """Mean over agents of the active fraction of each agent's own block.

    ``dims`` are the per-agent state dims (``which="STATE"``) or action
    counts (``which="ACTION"``).  Several masks for the same agent (one per
    sampled timestep) are averaged first.
    """
    which = which.upper()
    if which not in ("STATE", "ACTION"):
        raise ValueError("which must be STATE or ACTION")
    per_agent: dict[int, list[float]] = defaultdict(list)
    for m in hard_masks:
        vec = m.state_mask if which == "STATE" else m.action_mask
        per_agent[m.agent_id].append(_own_block_fraction(vec, m.agent_id, dims))
    if not per_agent:
        raise ValueError("no masks given")
    return float(np.mean([np.mean(v) for v in per_agent.values()]))


def sparsity_from_arrays(hard: np.ndarray, dims: Sequence[int]) -> float:
    """Same as :func:`sparsity_rate` for an array of shape (B, N, D) or (N, D)."""
    hard = hard if hard.ndim == 3 else hard[None]
    return float(np.mean([_own_block_fraction(hard[:, i], i, dims) for i in range(hard.shape[1])]))


def cross_sparsity(hard: np.ndarray, dims: Sequence[int]) -> float:
    """Active fraction of entries outside each agent's own block (0 for one agent)."""
    hard = hard if hard.ndim == 3 else hard[None]
    n = hard.shape[1]
    if n < 2:
        return 0.0
    vals = []
    for i, sl in enumerate(state_slices(dims)):
        other = np.delete(hard[:, i], np.arange(sl.start, sl.stop), axis=-1)
        vals.append(float(np.mean(other > 0)))
    return float(np.mean(vals))


def majority_vote(hard: np.ndarray, support: np.ndarray | None = None) -> np.ndarray:
    """Collapse per-timestep masks (B, N, D) to (N, D) by strict majority.

    With ``support`` (B, D), entry j only votes at timesteps where input j is
    nonzero.  A one-hot action entry cannot influence the reward while that
    action is not taken, so a dynamic mask is free to switch it off there;
    counting those timesteps would make every rarely taken action look absent.
    Entries never supported get 0.
    """
    if hard.ndim == 2:
        return (hard > 0).astype(float)
    on = hard > 0
    if support is None:
        return (np.mean(on, axis=0) > 0.5).astype(float)
    w = (np.asarray(support) != 0).astype(float)[:, None, :]
    count = w.sum(axis=0)
    votes = (on * w).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(count > 0, votes / np.maximum(count, 1.0), 0.0)
    return (frac > 0.5).astype(float)


def precision_recall_f1(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def f1_from_arrays(hard: np.ndarray, truth: np.ndarray, support: np.ndarray | None = None
                   ) -> dict[str, float]:
    return precision_recall_f1(majority_vote(hard, support), truth)


def mask_f1(hard_masks: Sequence[MaskPair], truth,
            action_inputs: Sequence[np.ndarray] | None = None) -> dict[str, dict[str, float]]:
    """Precision/recall/F1 for state, action and pooled masks against a ground truth.

    Masks are grouped by agent and majority-voted when an agent has more
    than one (dynamic graphs sampled at several timesteps).  ``action_inputs``
    gives the one-hot joint action behind each mask; when present an action
    entry only votes at timesteps where it was taken.
    """
    n = truth.state_masks.shape[0]
    groups: dict[int, list[int]] = defaultdict(list)
    for k, m in enumerate(hard_masks):
        groups[m.agent_id].append(k)
    if sorted(groups) != list(range(n)):
        raise ValueError(f"need masks for agents 0..{n - 1}, got {sorted(groups)}")
    pred_s, pred_a = [], []
    for i in range(n):
        ks = groups[i]
        pred_s.append(majority_vote(np.stack([hard_masks[k].state_mask for k in ks])[:, None])[0])
        support = None if action_inputs is None else np.stack([action_inputs[k] for k in ks])
        pred_a.append(majority_vote(np.stack([hard_masks[k].action_mask for k in ks])[:, None],
                                    support)[0])
    pred_s, pred_a = np.stack(pred_s), np.stack(pred_a)
    pooled = precision_recall_f1(np.concatenate([pred_s, pred_a], axis=1),
                                 np.concatenate([truth.state_masks, truth.action_masks], axis=1))
    return {"state": precision_recall_f1(pred_s, truth.state_masks),
            "action": precision_recall_f1(pred_a, truth.action_masks),
            "pooled": pooled}


def graph_from_arrays(hard_s: np.ndarray, hard_a: np.ndarray, a_onehot: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Voted (N, D_s), (N, D_a) graphs from per-timestep hard masks."""
    return majority_vote(hard_s), majority_vote(hard_a, a_onehot)


def pooled_f1(hard_s: np.ndarray, hard_a: np.ndarray, a_onehot: np.ndarray, truth) -> float:
    """F1 over all state and action entries together."""
    gs, ga = graph_from_arrays(hard_s, hard_a, a_onehot)
    return precision_recall_f1(np.concatenate([gs, ga], axis=1),
                               np.concatenate([truth.state_masks, truth.action_masks], axis=1))["f1"]


@dataclass(frozen=True)
class Fidelity:
    corr: np.ndarray   # (N,)
    mse: np.ndarray    # (N,)

    @property
    def min_corr(self) -> float:
        return float(np.min(self.corr))

    @property
    def mean_corr(self) -> float:
        return float(np.mean(self.corr))


def decomposition_fidelity(r_hat: np.ndarray, r_true: np.ndarray) -> Fidelity:
    """Per-agent Pearson correlation and MSE after removing each agent's mean."""
    r_hat = np.asarray(r_hat, dtype=np.float64)
    r_true = np.asarray(r_true, dtype=np.float64)
    if r_hat.shape != r_true.shape:
        raise ValueError(f"assigned rewards {r_hat.shape} and hidden rewards {r_true.shape} differ")
    a = r_hat - r_hat.mean(axis=0)
    b = r_true - r_true.mean(axis=0)
    denom = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, np.sum(a * b, axis=0) / denom, np.nan)
    return Fidelity(corr=np.clip(corr, -1.0, 1.0), mse=np.mean((a - b) ** 2, axis=0))


def normalized_score(score: float, random_score: float, expert_score: float) -> float:
    """Score rescaled so the random anchor maps to 0 and the expert anchor to 100.

    Returns are usually reported as short decimals, so the ratio is evaluated
    in decimal arithmetic on the shortest round-trip text of each float; a
    score halfway between the anchors then comes out as exactly 50.
    """
    if expert_score == random_score:
        raise ValueError("expert and random scores coincide; normalised score undefined")
    s, lo, hi = (Decimal(repr(float(v))) for v in (score, random_score, expert_score))
    with localcontext() as ctx:
        ctx.prec = 60
        return float(100 * (s - lo) / (hi - lo))

