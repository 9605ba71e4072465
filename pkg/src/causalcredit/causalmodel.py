"""Mask predictors, individual-reward predictor and their joint training.

For every transition and agent ``i`` the model predicts soft masks over the
joint state and the concatenated one-hot joint action, multiplies them into
the inputs of a shared reward network, and sums the per-agent outputs to
reconstruct the team reward.  An L1 penalty on the soft masks drives
irrelevant entries toward zero; at assignment time entries below ``h`` are
cut to exactly zero.

Three graph modes are supported:

``DG``  masks are network outputs conditioned on (state, action, agent).
``FG``  one learned logit vector per agent, shared across all timesteps.
``FCG`` all-ones masks, nothing to learn on the structure side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approximator import Adam, MLP, prefixed
from .core import (MaskPair, OfflineDataset, RunConfig, TrainingLog, derive_seed,
                   one_hot_actions, state_slices, write_dataset)
from . import metrics

MODEL_VERSION = 1


class NumericalFailure(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def admissible_masks(state_dims, action_counts, scope: str) -> tuple[np.ndarray, np.ndarray]:
    """0/1 matrices (N, D_s), (N, D_a) of entries each agent's mask may use."""
    n = len(state_dims)
    if scope == "joint":
        return np.ones((n, sum(state_dims))), np.ones((n, sum(action_counts)))
    adm_s = np.zeros((n, sum(state_dims)))
    adm_a = np.zeros((n, sum(action_counts)))
    for i, (ss, sa) in enumerate(zip(state_slices(state_dims), state_slices(action_counts))):
        adm_s[i, ss] = 1.0
        adm_a[i, sa] = 1.0
    return adm_s, adm_a


@dataclass
class Batch:
    s: np.ndarray        # (B, D_s)
    a_onehot: np.ndarray  # (B, D_a)
    R: np.ndarray        # (B,)

    @classmethod
    def from_dataset(cls, ds: OfflineDataset, idx: np.ndarray | None = None) -> "Batch":
        arr = ds.arrays
        s, a, R = arr["s"], arr["a"], arr["R"]
        if idx is not None:
            s, a, R = s[idx], a[idx], R[idx]
        return cls(s=s, a_onehot=one_hot_actions(a, ds.action_counts), R=R)


class CausalModel:
    """Parameters of the structure predictors and the reward predictor."""

    def __init__(self, state_dims, action_counts, graph_mode: str = "DG", h: float = 0.1,
                 scope: str = "local", hidden: int = 256, seed: int = 0, mask_init: float = 0.95):
        if graph_mode not in ("FCG", "FG", "DG"):
            raise ValueError(f"unknown graph mode {graph_mode!r}")
        if h < 0:
            raise ValueError("h must be >= 0")
        self.state_dims = tuple(int(d) for d in state_dims)
        self.action_counts = tuple(int(c) for c in action_counts)
        self.graph_mode = graph_mode
        self.h = float(h)
        self.scope = scope
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.config_hash = ""
        n, d_s, d_a = self.n_agents, self.state_dim, self.action_dim
        self.adm_state, self.adm_action = admissible_masks(self.state_dims, self.action_counts, scope)
        in_dim = d_s + d_a + n
        init_logit = math.log(mask_init / (1.0 - mask_init))
        self.psi_r = MLP.init(in_dim, 1, derive_seed(seed, "psi_r"), hidden=hidden)
        self.psi_g_state = self.psi_g_action = None
        self.fg_state = self.fg_action = None
        if graph_mode == "DG":
            self.psi_g_state = MLP.init(in_dim, d_s, derive_seed(seed, "psi_g_state"), hidden=hidden)
            self.psi_g_action = MLP.init(in_dim, d_a, derive_seed(seed, "psi_g_action"), hidden=hidden)
            self.psi_g_state.biases[-1][:] = init_logit
            self.psi_g_action.biases[-1][:] = init_logit
        elif graph_mode == "FG":
            self.fg_state = np.full((n, d_s), init_logit)
            self.fg_action = np.full((n, d_a), init_logit)

    @property
    def n_agents(self) -> int:
        return len(self.state_dims)

    def project_input_rows(self) -> None:
        """Cap the norm of the reward net's first-layer rows for masked inputs.

        A mask value and the weights reading that input are otherwise
        interchangeable: shrinking c by k and growing the row by k leaves the
        prediction unchanged while lowering the L1 term.  With the row norm
        capped, the mask has to carry the scale.  Rows may still shrink, so
        the net can ignore an input without help from its mask.
        """
        w = self.psi_r.weights[0]
        rows = w[: self.state_dim + self.action_dim]
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        cap = math.sqrt(2.0 * w.shape[1] / w.shape[0])
        rows *= np.minimum(1.0, cap / np.maximum(norms, 1e-12))

    @property
    def state_dim(self) -> int:
        return sum(self.state_dims)

    @property
    def action_dim(self) -> int:
        return sum(self.action_counts)

    def params(self) -> dict[str, np.ndarray]:
        out = prefixed("psi_r", self.psi_r.params())
        if self.graph_mode == "DG":
            out.update(prefixed("psi_g_state", self.psi_g_state.params()))
            out.update(prefixed("psi_g_action", self.psi_g_action.params()))
        elif self.graph_mode == "FG":
            out["fg_state"] = self.fg_state
            out["fg_action"] = self.fg_action
        return out

    # -- batched internals; rows are (transition, agent) pairs ----------------

    def _expand(self, s, a_onehot):
        b, n = s.shape[0], self.n_agents
        agents = np.tile(np.arange(n), b)
        s_rep = np.repeat(s, n, axis=0)
        a_rep = np.repeat(a_onehot, n, axis=0)
        return s_rep, a_rep, agents, np.eye(n)[agents]

    def _soft_masks(self, s_rep, a_rep, agents, e_rep):
        rows = s_rep.shape[0]
        if self.graph_mode == "FCG":
            return np.ones((rows, self.state_dim)), np.ones((rows, self.action_dim)), None
        if self.graph_mode == "FG":
            ls, la = self.fg_state[agents], self.fg_action[agents]
            cache = None
        else:
            z = np.concatenate([s_rep, a_rep, e_rep], axis=1)
            ls, cache_s = self.psi_g_state.forward(z)
            la, cache_a = self.psi_g_action.forward(z)
            cache = (cache_s, cache_a)
        ps, pa = _sigmoid(ls), _sigmoid(la)
        return ps * self.adm_state[agents], pa * self.adm_action[agents], (ps, pa, cache)

    def soft_masks(self, s: np.ndarray, a_onehot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Soft masks for every transition and agent: arrays (B, N, D_s), (B, N, D_a)."""
        s_rep, a_rep, agents, e_rep = self._expand(np.atleast_2d(s), np.atleast_2d(a_onehot))
        cs, ca, _ = self._soft_masks(s_rep, a_rep, agents, e_rep)
        b = s_rep.shape[0] // self.n_agents
        return cs.reshape(b, self.n_agents, -1), ca.reshape(b, self.n_agents, -1)

    def _rewards_from_masks(self, s_rep, a_rep, e_rep, cs, ca):
        u = np.concatenate([cs * s_rep, ca * a_rep, e_rep], axis=1)
        out, cache = self.psi_r.forward(u)
        return out[:, 0], cache

    def individual_rewards(self, s: np.ndarray, a_onehot: np.ndarray, clip: bool = True
                           ) -> np.ndarray:
        """Assigned rewards (B, N); masks clipped at ``h`` when ``clip``."""
        s_rep, a_rep, agents, e_rep = self._expand(np.atleast_2d(s), np.atleast_2d(a_onehot))
        cs, ca, _ = self._soft_masks(s_rep, a_rep, agents, e_rep)
        if clip and self.graph_mode != "FCG":
            cs, ca = clip_array(cs, self.h), clip_array(ca, self.h)
        r, _ = self._rewards_from_masks(s_rep, a_rep, e_rep, cs, ca)
        return r.reshape(-1, self.n_agents)

    def loss_and_grads(self, batch: Batch, lambda1: float, lambda2: float
                       ) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
        b, n = batch.s.shape[0], self.n_agents
        s_rep, a_rep, agents, e_rep = self._expand(batch.s, batch.a_onehot)
        cs, ca, mcache = self._soft_masks(s_rep, a_rep, agents, e_rep)
        r, rcache = self._rewards_from_masks(s_rep, a_rep, e_rep, cs, ca)
        pred = r.reshape(b, n).sum(axis=1)
        resid = batch.R - pred
        mse = float(np.mean(resid ** 2))
        l1_s = float(cs.sum() / b)
        l1_a = float(ca.sum() / b)
        loss = mse + lambda1 * l1_s + lambda2 * l1_a

        g_out = np.repeat(-2.0 * resid / b, n)[:, None]
        grads_r, g_u = self.psi_r.backward(rcache, g_out)
        grads = prefixed("psi_r", grads_r)
        if self.graph_mode != "FCG":
            d_s, d_a = self.state_dim, self.action_dim
            adm_s, adm_a = self.adm_state[agents], self.adm_action[agents]
            g_cs = g_u[:, :d_s] * s_rep + lambda1 / b
            g_ca = g_u[:, d_s:d_s + d_a] * a_rep + lambda2 / b
            ps, pa, caches = mcache
            g_ls = g_cs * ps * (1.0 - ps) * adm_s
            g_la = g_ca * pa * (1.0 - pa) * adm_a
            if self.graph_mode == "FG":
                gs = np.zeros_like(self.fg_state)
                ga = np.zeros_like(self.fg_action)
                np.add.at(gs, agents, g_ls)
                np.add.at(ga, agents, g_la)
                grads["fg_state"], grads["fg_action"] = gs, ga
            else:
                gs, _ = self.psi_g_state.backward(caches[0], g_ls)
                ga, _ = self.psi_g_action.backward(caches[1], g_la)
                grads.update(prefixed("psi_g_state", gs))
                grads.update(prefixed("psi_g_action", ga))
        stats = {"loss": loss, "recon_mse": mse, "l1_state": l1_s, "l1_action": l1_a}
        return loss, grads, stats

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION, "graph_mode": self.graph_mode, "h": self.h,
            "scope": self.scope, "hidden": self.hidden, "seed": self.seed,
            "state_dims": list(self.state_dims), "action_counts": list(self.action_counts),
            "config_hash": self.config_hash,
            "psi_r": self.psi_r.to_dict(),
            "psi_g_state": self.psi_g_state.to_dict() if self.psi_g_state else None,
            "psi_g_action": self.psi_g_action.to_dict() if self.psi_g_action else None,
            "fg_table": None if self.fg_state is None else
            {"state": self.fg_state.tolist(), "action": self.fg_action.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CausalModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        m = cls(d["state_dims"], d["action_counts"], graph_mode=d["graph_mode"], h=d["h"],
                scope=d["scope"], hidden=2, seed=d["seed"])
        m.hidden = int(d["hidden"])
        m.config_hash = d.get("config_hash", "")
        m.psi_r = MLP.from_dict(d["psi_r"])
        if d["graph_mode"] == "DG":
            m.psi_g_state = MLP.from_dict(d["psi_g_state"])
            m.psi_g_action = MLP.from_dict(d["psi_g_action"])
        elif d["graph_mode"] == "FG":
            m.fg_state = np.asarray(d["fg_table"]["state"], dtype=np.float64)
            m.fg_action = np.asarray(d["fg_table"]["action"], dtype=np.float64)
        return m

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CausalModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_model(ds: OfflineDataset, config: RunConfig) -> CausalModel:
    model = CausalModel(ds.state_dims, ds.action_counts, graph_mode=config.graph_mode,
                        h=config.h, scope=config.mask_scope, hidden=config.hidden,
                        seed=derive_seed(config.seed, "causalmodel"), mask_init=config.mask_init)
    model.config_hash = config.digest()
    return model


# -- single-sample operations ---------------------------------------------------


def _check_agent(model: CausalModel, agent_id: int) -> None:
    if not 0 <= agent_id < model.n_agents:
        raise ValueError(f"unknown agent_id {agent_id} (model has {model.n_agents} agents)")


def _inputs(model: CausalModel, s, a):
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (model.state_dim,):
        raise ValueError(f"state has shape {s.shape}, expected ({model.state_dim},)")
    a = np.asarray(a)
    if a.shape == (model.n_agents,) and np.issubdtype(a.dtype, np.integer):
        a = one_hot_actions(a[None, :], model.action_counts)[0]
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (model.action_dim,):
        raise ValueError(f"action has shape {a.shape}, expected joint indices or one-hot "
                         f"of width {model.action_dim}")
    return s, a


def predict_masks(model: CausalModel, s_t, a_t, agent_id: int) -> MaskPair:
    """Soft masks for one agent at one timestep.  ``a_t`` is indices or one-hot."""
    _check_agent(model, agent_id)
    s, a = _inputs(model, s_t, a_t)
    cs, ca = model.soft_masks(s[None], a[None])
    return MaskPair(agent_id, cs[0, agent_id], ca[0, agent_id], hard=False)


def clip_array(x: np.ndarray, h: float) -> np.ndarray:
    return np.where(np.abs(x) < h, 0.0, x)


def clip_masks(mask: MaskPair, h: float) -> tuple[MaskPair, MaskPair]:
    """Zero entries with magnitude below ``h``; return (clipped soft, hard view)."""
    if h < 0:
        raise ValueError("h must be >= 0")
    cs, ca = clip_array(mask.state_mask, h), clip_array(mask.action_mask, h)
    soft = MaskPair(mask.agent_id, cs, ca, hard=False)
    hard = MaskPair(mask.agent_id, (cs > 0).astype(float), (ca > 0).astype(float), hard=True)
    return soft, hard


def predict_reward(model: CausalModel, s_t, a_t, mask: MaskPair, agent_id: int) -> float:
    _check_agent(model, agent_id)
    s, a = _inputs(model, s_t, a_t)
    if mask.state_mask.shape != (model.state_dim,) or mask.action_mask.shape != (model.action_dim,):
        raise ValueError("mask lengths do not match the model's joint dimensions")
    u = np.concatenate([mask.state_mask * s, mask.action_mask * a,
                        np.eye(model.n_agents)[agent_id]])
    return float(model.psi_r(u)[0])


def model_loss(model: CausalModel, batch: Batch, lambda1: float, lambda2: float
               ) -> tuple[float, dict[str, np.ndarray]]:
    if batch.s.shape[0] == 0:
        raise ValueError("empty batch")
    loss, grads, _ = model.loss_and_grads(batch, lambda1, lambda2)
    return loss, grads


# -- training and assignment ---------------------------------------------------


def split_episodes(ds: OfflineDataset, holdout_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, held-out); the last episodes form the held-out part."""
    ep = ds.arrays["episode"]
    uniq = np.unique(ep)
    n_hold = int(round(len(uniq) * holdout_fraction))
    if holdout_fraction > 0 and len(uniq) > 1:
        n_hold = max(1, min(n_hold, len(uniq) - 1))
    else:
        n_hold = 0
    held = np.isin(ep, uniq[len(uniq) - n_hold:]) if n_hold else np.zeros(len(ep), bool)
    return np.flatnonzero(~held), np.flatnonzero(held)


def evaluation_rows(ds: OfflineDataset, n_rows: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "mask_samples"))
    n = len(ds)
    return np.sort(rng.choice(n, size=min(n_rows, n), replace=False))


def hard_masks(model: CausalModel, s: np.ndarray, a_onehot: np.ndarray, h: float | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """0/1 masks (B, N, D_s), (B, N, D_a): soft masks at or above ``h``."""
    h = model.h if h is None else h
    cs, ca = model.soft_masks(s, a_onehot)
    return (clip_array(cs, h) > 0).astype(float), (clip_array(ca, h) > 0).astype(float)


def train_model(model: CausalModel, ds: OfflineDataset, config: RunConfig, truth=None,
                holdout_fraction: float = 0.1, log_every: int | None = None
                ) -> tuple[CausalModel, TrainingLog]:
    """Minimise reconstruction + mask-L1 with Adam on uniformly sampled minibatches."""
    rng = np.random.default_rng(derive_seed(config.seed, "train_model"))
    train_idx, held_idx = split_episodes(ds, holdout_fraction)
    if len(train_idx) == 0:
        raise ValueError("no training rows")
    eval_idx = held_idx if len(held_idx) else train_idx
    held_batch = Batch.from_dataset(ds, eval_idx)
    probe_batch = Batch.from_dataset(ds, evaluation_rows(ds, config.mask_samples, config.seed))
    if config.pin_input_norm:
        model.project_input_rows()
    params = model.params()
    # the reward net and the mask predictors learn on separate timescales
    reward_names = {k for k in params if k.startswith("psi_r.")}
    opt_r = Adam({k: params[k] for k in reward_names}, lr=config.reward_lr)
    # a per-agent logit table moves at most ~lr per step, so FG gets its own rate
    graph_lr = config.fg_lr if model.graph_mode == "FG" else config.model_lr
    opt_g = Adam({k: v for k, v in params.items() if k not in reward_names}, lr=graph_lr)
    log = TrainingLog()
    every = log_every or config.eval_interval
    var_r = float(np.var(ds.arrays["R"])) or 1.0
    freeze = int(config.mask_freeze * config.train_steps)
    warmup = config.l1_warmup * config.train_steps
    for step in range(1, config.train_steps + 1):
        idx = train_idx[rng.integers(0, len(train_idx), size=config.batch_size)]
        # masks stay at their initial value while the reward net finds its signs
        ramp = min(1.0, (step - freeze) / warmup) if warmup > 0 else 1.0
        ramp = max(ramp, 0.0)
        loss, grads, stats = model.loss_and_grads(Batch.from_dataset(ds, idx),
                                                  ramp * config.lambda1, ramp * config.lambda2)
        if not math.isfinite(loss):
            raise NumericalFailure("non-finite model loss", step)
        opt_r.step({k: grads[k] for k in reward_names})
        if step > freeze and opt_g.params:
            opt_g.step({k: v for k, v in grads.items() if k not in reward_names})
        if config.pin_input_norm:
            model.project_input_rows()
        if step % every == 0 or step == config.train_steps:
            row = {"step": step, **stats,
                   "heldout_mse": reconstruction_mse(model, held_batch),
                   "var_R": var_r}
            hs, ha = hard_masks(model, probe_batch.s, probe_batch.a_onehot, config.h)
            row["S_sr"] = metrics.sparsity_from_arrays(hs, model.state_dims)
            row["S_ar"] = metrics.sparsity_from_arrays(ha, model.action_counts)
            row["S_sr_cross"] = metrics.cross_sparsity(hs, model.state_dims)
            if truth is not None:
                row["mask_f1_state"] = metrics.f1_from_arrays(hs, truth.state_masks)["f1"]
                row["mask_f1_action"] = metrics.f1_from_arrays(
                    ha, truth.action_masks, probe_batch.a_onehot)["f1"]
                row["mask_f1"] = metrics.pooled_f1(hs, ha, probe_batch.a_onehot, truth)
            log.append(**row)
    return model, log


def reconstruction_mse(model: CausalModel, batch: Batch, chunk: int = 4096) -> float:
    """Team-reward reconstruction error with soft (training-time) masks."""
    total = 0.0
    for start in range(0, batch.s.shape[0], chunk):
        sl = slice(start, start + chunk)
        r = model.individual_rewards(batch.s[sl], batch.a_onehot[sl], clip=False)
        total += float(np.sum((batch.R[sl] - r.sum(axis=1)) ** 2))
    return total / max(batch.s.shape[0], 1)


@dataclass(frozen=True)
class AssignedDataset:
    dataset: OfflineDataset
    r_hat: np.ndarray  # (n, N)

    def __post_init__(self):
        if self.r_hat.shape != (len(self.dataset), self.dataset.n_agents):
            raise ValueError("r_hat must have one row per transition and one column per agent")
        if not np.all(np.isfinite(self.r_hat)):
            raise ValueError("assigned rewards must be finite")

    def write(self, path: str | Path) -> None:
        write_dataset(self.dataset, path, extra=[{"r_hat": row} for row in self.r_hat.tolist()])

    @classmethod
    def read(cls, path: str | Path) -> "AssignedDataset":
        from .core import read_dataset
        ds, extra = read_dataset(path, extra_keys=("r_hat",))
        return cls(ds, np.asarray([e["r_hat"] for e in extra], dtype=np.float64).reshape(len(ds), -1))


def assign_rewards(model: CausalModel, ds: OfflineDataset, clip: bool = True,
                   chunk: int = 4096) -> AssignedDataset:
    """Replace the team reward by per-agent predictions using clipped masks."""
    batch = Batch.from_dataset(ds)
    parts = [model.individual_rewards(batch.s[k:k + chunk], batch.a_onehot[k:k + chunk], clip=clip)
             for k in range(0, len(ds), chunk)]
    r_hat = np.concatenate(parts) if parts else np.zeros((0, ds.n_agents))
    return AssignedDataset(ds, r_hat)
