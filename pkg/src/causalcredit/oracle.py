"""Closed-form and exhaustive references the learned model is checked against.

Three independent tools live here:

* :func:`ridge_solve` computes the ridge weights twice, once from the d x d
  normal equations and once from the n x n kernel system, and refuses to
  answer when the two disagree.
* :func:`linear_decomposition_oracle` fits the summed per-agent linear
  feature map to the team reward and reads off per-agent weights.
* :func:`brute_force_masks` enumerates every mask of one agent at a time
  and keeps the sparsest one with the best held-out fit.

:func:`finite_diff_check` is the central-difference gradient checker used
by the tests for every hand-written backward pass.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import OfflineDataset, one_hot_actions, state_slices

AGREEMENT_TOL = 1e-8
MAX_SEARCH_DIMS = 12
# Above this many rows the n x n system is not formed explicitly; its inverse
# is applied through the thin SVD of the features instead (same algebra).
DUAL_DIRECT_ROWS = 2048


class ConditioningError(ArithmeticError):
    """The primal and dual ridge forms disagree beyond tolerance."""


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class RidgeSolution:
    weights: np.ndarray
    lam: float
    residual_mse: float
    agreement_error: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("ridge coefficient must be positive")

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.weights.shape[0]:
            raise ValueError(f"feature width {features.shape[-1]} != weight length "
                             f"{self.weights.shape[0]}")
        return features @ self.weights


def _primal(phi: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    d = phi.shape[1]
    gram = phi.T @ phi + lam * np.eye(d)
    return cho_solve(cho_factor(gram, lower=True), phi.T @ r)


def _dual(phi: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    n = phi.shape[0]
    if n <= DUAL_DIRECT_ROWS:
        kernel = phi @ phi.T + lam * np.eye(n)
        alpha = cho_solve(cho_factor(kernel, lower=True), r)
    else:
        # (lam I + U S^2 U^T)^-1 r  =  U diag(1/(lam+s^2)) U^T r + (r - U U^T r) / lam
        u, s, _ = np.linalg.svd(phi, full_matrices=False)
        ur = u.T @ r
        # project twice: the 1/lam factor would amplify round-off left inside range(U)
        perp = r - u @ ur
        perp -= u @ (u.T @ perp)
        alpha = u @ (ur / (lam + s * s)) + perp / lam
    return phi.T @ alpha


def ridge_solve(features: np.ndarray, targets: np.ndarray, lam: float,
                tol: float = AGREEMENT_TOL) -> RidgeSolution:
    """Minimiser of 0.5*||R - Phi W||^2 + 0.5*lam*||W||^2 from both closed forms.

    The agreement check is element-wise, relative to ``max(1, max|W|)``.
    """
    phi = np.asarray(features, dtype=np.float64)
    r = np.asarray(targets, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.ndim != 2 or r.ndim != 1 or phi.shape[0] != r.shape[0]:
        raise ValueError(f"need features (n, d) and targets (n,), got {phi.shape} and {r.shape}")
    if phi.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not lam > 0 or not np.isfinite(lam):
        raise ValueError("lambda must be a positive finite number")
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(r))):
        raise ValueError("features and targets must be finite")
    try:
        w_p = _primal(phi, r, lam)
        w_d = _dual(phi, r, lam)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"ridge system is not numerically positive definite for "
                                f"lambda={lam:g} ({exc})") from None
    scale = max(1.0, float(np.max(np.abs(w_p))) if w_p.size else 1.0)
    err = float(np.max(np.abs(w_p - w_d))) / scale if w_p.size else 0.0
    if not err <= tol:
        raise ConditioningError(f"primal and dual ridge solutions differ by {err:.3e} "
                                f"(tolerance {tol:.1e}); the problem is too ill-conditioned "
                                f"for lambda={lam:g}")
    resid = float(np.mean((r - phi @ w_p) ** 2))
    return RidgeSolution(weights=w_p, lam=float(lam), residual_mse=resid, agreement_error=err)


# -- linear decomposition -----------------------------------------------------


def agent_features(ds: OfflineDataset, scope: str = "local") -> list[np.ndarray]:
    """Per-agent feature blocks: own state and own action one-hot (local) or everything."""
    s = ds.arrays["s"]
    a_oh = one_hot_actions(ds.arrays["a"], ds.action_counts)
    if scope == "joint":
        full = np.concatenate([s, a_oh], axis=1)
        return [full for _ in range(ds.n_agents)]
    s_sl = state_slices(ds.state_dims)
    a_sl = state_slices(ds.action_counts)
    return [np.concatenate([s[:, s_sl[i]], a_oh[:, a_sl[i]]], axis=1) for i in range(ds.n_agents)]


def canonical_action_weights(w: np.ndarray, counts) -> np.ndarray:
    """Shift each agent's action-weight block so that its largest entry is 0.

    Adding a constant to every action weight of one agent (and subtracting
    it from another) leaves the team reward unchanged, so only differences
    inside a block are determined by the data.  The cheapest action is used
    as the reference level, matching how LINEAR ground truths are drawn.
    """
    out = np.array(w, dtype=np.float64, copy=True)
    for sl in state_slices(counts):
        if sl.stop > sl.start:
            out[..., sl] -= np.max(out[..., sl], axis=-1, keepdims=True)
    return out


@dataclass(frozen=True)
class OracleDecomposition:
    ridge: RidgeSolution
    w_state: np.ndarray       # (N, D_s), zero outside each agent's searched block
    w_action: np.ndarray      # (N, D_a), canonical gauge
    w_action_raw: np.ndarray  # (N, D_a), as returned by the ridge solve
    r_pred: np.ndarray        # (n, N) individual rewards in the canonical gauge

    @property
    def residual_mse(self) -> float:
        return self.ridge.residual_mse


def linear_decomposition_oracle(ds: OfflineDataset, truth, lam: float = 1e-3
                                ) -> OracleDecomposition:
    """Ridge-fit the summed per-agent linear feature map to the team reward."""
    if truth.family != "LINEAR":
        raise ValueError(f"closed-form oracle needs the LINEAR reward family, got {truth.family}")
    scope = truth.scope
    blocks = agent_features(ds, scope)
    phi = np.concatenate(blocks, axis=1)
    sol = ridge_solve(phi, ds.arrays["R"], lam)
    n, d_s, d_a = ds.n_agents, ds.state_dim, ds.action_dim
    w_state = np.zeros((n, d_s))
    w_action_raw = np.zeros((n, d_a))
    s_sl, a_sl = state_slices(ds.state_dims), state_slices(ds.action_counts)
    offset = 0
    for i, blk in enumerate(blocks):
        w = sol.weights[offset: offset + blk.shape[1]]
        offset += blk.shape[1]
        if scope == "joint":
            w_state[i], w_action_raw[i] = w[:d_s], w[d_s:]
        else:
            w_state[i, s_sl[i]] = w[: ds.state_dims[i]]
            w_action_raw[i, a_sl[i]] = w[ds.state_dims[i]:]
    w_action = canonical_action_weights(w_action_raw, ds.action_counts)
    if scope == "local":
        # only each agent's own block is a free parameter
        for i in range(n):
            keep = np.zeros(d_a, dtype=bool)
            keep[a_sl[i]] = True
            w_action[i, ~keep] = 0.0
    s = ds.arrays["s"]
    a_oh = one_hot_actions(ds.arrays["a"], ds.action_counts)
    r_pred = s @ w_state.T + a_oh @ w_action.T
    return OracleDecomposition(ridge=sol, w_state=w_state, w_action=w_action,
                               w_action_raw=w_action_raw, r_pred=r_pred)


# -- brute-force mask search --------------------------------------------------


@dataclass
class BruteForceResult:
    state_masks: np.ndarray
    action_masks: np.ndarray
    val_mse: float
    ambiguities: list[dict] = field(default_factory=list)
    n_fits: int = 0


def _searched_columns(ds: OfflineDataset, scope: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per agent, the joint state and joint action indices the search may switch on."""
    s_sl, a_sl = state_slices(ds.state_dims), state_slices(ds.action_counts)
    out = []
    for i in range(ds.n_agents):
        if scope == "joint":
            out.append((np.arange(ds.state_dim), np.arange(ds.action_dim)))
        else:
            out.append((np.arange(s_sl[i].start, s_sl[i].stop),
                        np.arange(a_sl[i].start, a_sl[i].stop)))
    return out


def brute_force_masks(ds: OfflineDataset, max_dims: int = MAX_SEARCH_DIMS, *,
                      scope: str = "local", sweeps: int = 2, lam: float = 1e-6,
                      holdout_fraction: float = 0.2, tie_tol: float = 1e-6
                      ) -> BruteForceResult:
    """Exhaustive per-agent mask search with coordinate sweeps over agents.

    Every candidate is scored by the held-out MSE of a ridge fit (no
    intercept) of the team reward on the union of all agents' active
    columns, each agent owning its own copy of its columns.  Candidates whose
    MSE is within ``tie_tol * Var(R)`` of the best are treated as equal and
    the one with the fewest active entries wins; remaining equal-size ties
    are reported in ``ambiguities``.
    """
    if max_dims > MAX_SEARCH_DIMS:
        raise BudgetError(f"max_dims={max_dims} exceeds the hard limit {MAX_SEARCH_DIMS}")
    cols = _searched_columns(ds, scope)
    for i, (cs, ca) in enumerate(cols):
        if len(cs) + len(ca) > max_dims:
            raise BudgetError(f"agent {i} has {len(cs) + len(ca)} searchable dims, "
                              f"budget is {max_dims}")
    x = np.concatenate([ds.arrays["s"], one_hot_actions(ds.arrays["a"], ds.action_counts)],
                       axis=1)
    r = ds.arrays["R"]
    episodes = np.unique(ds.arrays["episode"])
    n_held = max(1, int(round(holdout_fraction * len(episodes)))) if len(episodes) > 1 else 0
    held_eps = episodes[len(episodes) - n_held:]
    held = np.isin(ds.arrays["episode"], held_eps)
    if not held.any():
        held = np.ones_like(held)
    train = ~held if (~held).any() else held
    tol = tie_tol * max(float(np.var(r)), 1e-12)

    d_s = ds.state_dim
    flat_cols = [np.concatenate([cs, d_s + ca]) for cs, ca in cols]
    current = [np.ones(len(c), dtype=bool) for c in flat_cols]
    n_fits = 0

    def score(active: list[np.ndarray]) -> float:
        nonlocal n_fits
        blocks = [x[:, c[m]] for c, m in zip(flat_cols, active) if m.any()]
        n_fits += 1
        if not blocks:
            return float(np.mean(r[held] ** 2))
        phi = np.concatenate(blocks, axis=1)
        sol = _primal(phi[train], r[train], lam)
        return float(np.mean((r[held] - phi[held] @ sol) ** 2))

    ambiguities: list[dict] = []
    best_mse = score(current)
    for sweep in range(sweeps):
        for i in range(len(cols)):
            k = len(flat_cols[i])
            results = []
            for bits in itertools.product((0, 1), repeat=k):
                cand = np.array(bits, dtype=bool)
                trial = list(current)
                trial[i] = cand
                results.append((score(trial), int(cand.sum()), bits))
            top = min(m for m, _, _ in results)
            near = [(l0, m, bits) for m, l0, bits in results if m <= top + tol]
            l0_min = min(l0 for l0, _, _ in near)
            winners = sorted((m, bits) for l0, m, bits in near if l0 == l0_min)
            current[i] = np.array(winners[0][1], dtype=bool)
            best_mse = winners[0][0]
            if sweep == sweeps - 1 and len(winners) > 1:
                ambiguities.append({
                    "agent": i,
                    "equivalent": [[int(j) for j in flat_cols[i][np.array(b, dtype=bool)]]
                                   for _, b in winners],
                    "val_mse": [m for m, _ in winners],
                })

    state_masks = np.zeros((ds.n_agents, ds.state_dim), dtype=np.int64)
    action_masks = np.zeros((ds.n_agents, ds.action_dim), dtype=np.int64)
    for i, (c, m) in enumerate(zip(flat_cols, current)):
        on = c[m]
        state_masks[i, on[on < d_s]] = 1
        action_masks[i, on[on >= d_s] - d_s] = 1
    return BruteForceResult(state_masks=state_masks, action_masks=action_masks,
                            val_mse=best_mse, ambiguities=ambiguities, n_fits=n_fits)


# -- finite differences -------------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    probes: list[dict]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(loss_fn: Callable[[], tuple[float, dict[str, np.ndarray]]],
                      params: dict[str, np.ndarray], n_probes: int = 100, step: float = 1e-5,
                      tol: float = 1e-4, seed: int = 0, floor: float = 1e-8
                      ) -> FiniteDiffReport:
    """Compare analytic gradients with central differences on random entries.

    ``loss_fn()`` reads ``params`` in place and returns ``(loss, grads)``.
    Probes are drawn uniformly over all scalar entries.  The relative error
    of a probe is ``|g - g_num| / max(|g|, |g_num|, floor)``.
    """
    _, grads = loss_fn()
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    if sizes.sum() == 0:
        raise ValueError("no parameters to probe")
    rng = np.random.default_rng(seed)
    probes = []
    worst = 0.0
    for _ in range(n_probes):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        p = params[name]
        idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
        old = p[idx]
        p[idx] = old + step
        up, _ = loss_fn()
        p[idx] = old - step
        down, _ = loss_fn()
        p[idx] = old
        numeric = (up - down) / (2.0 * step)
        analytic = float(np.asarray(grads[name])[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
        probes.append({"param": name, "index": [int(i) for i in idx], "analytic": analytic,
                       "numeric": float(numeric), "rel_error": float(rel)})
    return FiniteDiffReport(max_rel_error=float(worst), tol=float(tol), probes=probes)


# -- reporting ----------------------------------------------------------------


def oracle_report(decomp: OracleDecomposition | None, masks: BruteForceResult | None) -> dict:
    rep: dict = {"weights": None, "residual_mse": None, "masks": None, "ambiguities": [],
                 "ridge_agreement_error": None}
    if decomp is not None:
        rep["weights"] = {"state": decomp.w_state.tolist(), "action": decomp.w_action.tolist()}
        rep["residual_mse"] = decomp.residual_mse
        rep["ridge_agreement_error"] = decomp.ridge.agreement_error
    if masks is not None:
        rep["masks"] = {"state": masks.state_masks.tolist(), "action": masks.action_masks.tolist(),
                        "val_mse": masks.val_mse}
        rep["ambiguities"] = masks.ambiguities
    return rep


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
