"""Synthetic cooperative environments with a known sparse reward structure.

Each agent owns a block of a continuous joint state and picks one of
``A_i`` discrete actions.  The chosen action picks a per-dimension gain
applied to the agent's block plus a displacement, so which action looks
best depends on the current state.  Every agent has a hidden individual
reward that reads only the joint-state / one-hot-action dimensions selected
by its true masks; the dataset stores the sum of those rewards (plus
optional noise) as the team reward and nothing else.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (GENERATOR_VERSION, OfflineDataset, dataset_from_arrays, one_hot_actions,
                   state_slices)

FAMILIES = ("LINEAR", "MLP")
TIERS = ("expert", "medium", "medium_replay", "random")
MLP_REWARD_HIDDEN = 8
EXPERT_EPSILON = 0.05
SCORE_EPISODES = 200
MAX_RETRIES = 50
GAIN_LIMIT = 0.9


class EnvGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    state_dims: tuple[int, ...]
    action_counts: tuple[int, ...]
    horizon: int = 25
    drift: float = 0.8
    displacement: tuple[np.ndarray, ...] = ()  # per agent, shape (A_i, d_i)
    gain: tuple[np.ndarray, ...] = ()          # per agent, shape (A_i, d_i); empty -> drift
    process_noise: float = 1.0
    init_std: float = 1.0

    def __post_init__(self):
        if len(self.state_dims) < 1 or len(self.state_dims) != len(self.action_counts):
            raise EnvGenerationError("need matching, non-empty state_dims and action_counts")
        if min(self.state_dims) < 1 or min(self.action_counts) < 1:
            raise EnvGenerationError("all state dims and action counts must be >= 1")
        if self.horizon < 2:
            raise EnvGenerationError("episode length must be >= 2")

    @property
    def n_agents(self) -> int:
        return len(self.state_dims)

    @property
    def state_dim(self) -> int:
        return sum(self.state_dims)

    @property
    def action_dim(self) -> int:
        return sum(self.action_counts)

    def mean_next_state(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Expected next joint state for (n, D_s) states and (n, N) actions."""
        out = self.drift * np.asarray(s, dtype=np.float64)
        for i, sl in enumerate(state_slices(self.state_dims)):
            if self.gain:
                out[:, sl] = self.gain[i][a[:, i]] * s[:, sl]
            out[:, sl] += self.displacement[i][a[:, i]]
        return out

    def to_dict(self) -> dict:
        return {"state_dims": list(self.state_dims), "action_counts": list(self.action_counts),
                "horizon": self.horizon, "drift": self.drift,
                "displacement": [d.tolist() for d in self.displacement],
                "gain": [g.tolist() for g in self.gain],
                "process_noise": self.process_noise, "init_std": self.init_std}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(state_dims=tuple(d["state_dims"]), action_counts=tuple(d["action_counts"]),
                   horizon=int(d["horizon"]), drift=float(d["drift"]),
                   displacement=tuple(np.asarray(x, dtype=np.float64) for x in d["displacement"]),
                   gain=tuple(np.asarray(x, dtype=np.float64) for x in d.get("gain", ())),
                   process_noise=float(d["process_noise"]), init_std=float(d["init_std"]))


@dataclass(frozen=True)
class GroundTruthSpec:
    state_masks: np.ndarray       # (N, D_s) of 0/1
    action_masks: np.ndarray      # (N, D_a) of 0/1
    family: str
    reward_params: tuple[dict, ...]
    noise_sigma: float = 0.0
    scope: str = "local"
    seed: int = 0
    scores: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.state_masks.shape[0]

    @property
    def expert_score(self) -> float:
        return self.scores["expert"]["mean"]

    @property
    def random_score(self) -> float:
        return self.scores["random"]["mean"]

    def individual_rewards(self, s: np.ndarray, a_onehot: np.ndarray) -> np.ndarray:
        """Noiseless r_i for every row: (n, D_s), (n, D_a) -> (n, N)."""
        s = np.atleast_2d(s)
        a_onehot = np.atleast_2d(a_onehot)
        out = np.empty((s.shape[0], self.n_agents))
        for i, p in enumerate(self.reward_params):
            xs = s * self.state_masks[i]
            xa = a_onehot * self.action_masks[i]
            if self.family == "LINEAR":
                out[:, i] = xs @ p["w_state"] + xa @ p["w_action"]
            else:
                x = np.concatenate([xs, xa], axis=1)
                out[:, i] = np.tanh(x @ p["W1"].T + p["b1"]) @ p["v"]
        return out

    def to_dict(self) -> dict:
        params = [{k: np.asarray(v).tolist() for k, v in p.items()} for p in self.reward_params]
        return {"family": self.family, "scope": self.scope, "seed": self.seed,
                "noise_sigma": self.noise_sigma,
                "state_masks": self.state_masks.astype(int).tolist(),
                "action_masks": self.action_masks.astype(int).tolist(),
                "reward_params": params, "scores": self.scores}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthSpec":
        params = tuple({k: np.asarray(v, dtype=np.float64) for k, v in p.items()}
                       for p in d["reward_params"])
        return cls(state_masks=np.asarray(d["state_masks"], dtype=np.int64),
                   action_masks=np.asarray(d["action_masks"], dtype=np.int64),
                   family=d["family"], reward_params=params,
                   noise_sigma=float(d["noise_sigma"]), scope=d.get("scope", "local"),
                   seed=int(d.get("seed", 0)), scores=d.get("scores", {}))


def save_truth(env: EnvSpec, truth: GroundTruthSpec, path: str | Path) -> None:
    payload = {"version": 1, "env": env.to_dict(), "truth": truth.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_truth(path: str | Path) -> tuple[EnvSpec, GroundTruthSpec]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return EnvSpec.from_dict(payload["env"]), GroundTruthSpec.from_dict(payload["truth"])


def _broadcast(value, n: int, what: str) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise EnvGenerationError(f"{what} needs {n} entries, got {len(value)}")
    return value


def _draw_block_mask(rng: np.random.Generator, size: int, density: float) -> np.ndarray:
    """Bernoulli(density) mask with at least one 1 and (when size > 1) at least one 0."""
    while True:
        m = (rng.random(size) < density).astype(np.int64)
        if m.sum() >= 1 and (size == 1 or m.sum() < size):
            return m


def _draw_weights(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    w = rng.choice([-1.0, 1.0], size=mask.shape) * rng.uniform(0.5, 1.5, size=mask.shape)
    return w * mask


def _draw_truth(kind: str, state_dims, action_counts, sparsity, scope, rng, noise_sigma, seed):
    n = len(state_dims)
    d_s, d_a = sum(state_dims), sum(action_counts)
    s_sl, a_sl = state_slices(state_dims), state_slices(action_counts)
    state_masks = np.zeros((n, d_s), dtype=np.int64)
    action_masks = np.zeros((n, d_a), dtype=np.int64)
    for i in range(n):
        if scope == "local":
            state_masks[i, s_sl[i]] = _draw_block_mask(rng, state_dims[i], sparsity)
            action_masks[i, a_sl[i]] = _draw_block_mask(rng, action_counts[i], sparsity)
        else:
            state_masks[i] = _draw_block_mask(rng, d_s, sparsity)
            action_masks[i] = _draw_block_mask(rng, d_a, sparsity)
    params = []
    for i in range(n):
        if kind == "LINEAR":
            # Action effects are costs.  A per-agent constant is invisible in the
            # team reward, so the free actions act as the reference level.
            params.append({"w_state": _draw_weights(rng, state_masks[i]),
                           "w_action": -np.abs(_draw_weights(rng, action_masks[i]))})
        else:
            cols = np.concatenate([state_masks[i], action_masks[i]])
            w1 = rng.normal(0.0, 1.0, size=(MLP_REWARD_HIDDEN, d_s + d_a)) * cols
            params.append({"W1": w1, "b1": rng.normal(0.0, 0.5, size=MLP_REWARD_HIDDEN),
                           "v": _draw_weights(rng, np.ones(MLP_REWARD_HIDDEN))})
    return GroundTruthSpec(state_masks=state_masks, action_masks=action_masks, family=kind,
                           reward_params=tuple(params), noise_sigma=float(noise_sigma),
                           scope=scope, seed=int(seed))


def make_env(kind: str, n_agents: int, dims, sparsity: float, seed: int, *,
             noise_sigma: float = 0.0, horizon: int = 25, scope: str = "local",
             score_episodes: int = SCORE_EPISODES) -> tuple[EnvSpec, GroundTruthSpec]:
    """Draw an environment and its hidden reward structure.

    ``dims`` is ``(state_dims, action_counts)``; either entry may be a scalar
    shared by all agents.  ``sparsity`` is the Bernoulli density of the true
    masks inside each agent's own block (``scope="local"``) or over the whole
    joint space (``scope="joint"``).  If the behavior tiers do not come out
    ordered random < medium < expert the draw is repeated with ``seed + 1``.
    """
    kind = kind.upper()
    if kind not in FAMILIES:
        raise EnvGenerationError(f"reward family must be one of {FAMILIES}")
    if n_agents < 1:
        raise EnvGenerationError("n_agents must be >= 1")
    if not 0.0 < sparsity < 1.0:
        raise EnvGenerationError("sparsity must lie in (0, 1)")
    if scope not in ("local", "joint"):
        raise EnvGenerationError("scope must be 'local' or 'joint'")
    state_dims = _broadcast(dims[0], n_agents, "state dims")
    action_counts = _broadcast(dims[1], n_agents, "action counts")
    if min(state_dims) < 1 or min(action_counts) < 1:
        raise EnvGenerationError("all state dims and action counts must be >= 1")
    budget = state_dims if scope == "local" else [sum(state_dims)] * n_agents
    if any(sparsity * d < 1.0 for d in budget):
        raise EnvGenerationError("sparsity * state dim must be >= 1 for every agent")

    for attempt in range(MAX_RETRIES):
        s = int(seed) + attempt
        rng = np.random.default_rng(np.random.SeedSequence([s, 0x5EED]))
        displacement = tuple(rng.normal(0.0, 0.5, size=(a, d))
                             for d, a in zip(state_dims, action_counts))
        gain = tuple(rng.uniform(-GAIN_LIMIT, GAIN_LIMIT, size=(a, d))
                     for d, a in zip(state_dims, action_counts))
        env = EnvSpec(state_dims=state_dims, action_counts=action_counts, horizon=horizon,
                      displacement=displacement, gain=gain)
        truth = _draw_truth(kind, state_dims, action_counts, sparsity, scope, rng, noise_sigma, s)
        scores = {tier: _score(env, truth, tier, score_episodes, s)
                  for tier in ("random", "medium", "expert")}
        if scores["random"]["mean"] < scores["medium"]["mean"] < scores["expert"]["mean"]:
            return env, GroundTruthSpec(**{**truth.__dict__, "scores": scores})
    raise EnvGenerationError(f"no ordered behavior tiers after {MAX_RETRIES} seeds")


# -- behavior policies --------------------------------------------------------


@dataclass(frozen=True)
class BehaviorPolicy:
    """Per-agent action distributions for one data tier.

    ``progress`` in [0, 1] is the position of the episode within the
    collection run; only ``medium_replay`` uses it.
    """

    tier: str
    env: EnvSpec
    truth: GroundTruthSpec
    epsilon: float = EXPERT_EPSILON

    def expert_probs(self, s: np.ndarray) -> list[np.ndarray]:
        s = np.atleast_2d(s)
        n = s.shape[0]
        out = []
        for i, count in enumerate(self.env.action_counts):
            scores = np.empty((n, count))
            for k in range(count):
                a = np.zeros((n, self.env.n_agents), dtype=np.int64)
                a[:, i] = k
                onehot = one_hot_actions(a, self.env.action_counts)
                now = self.truth.individual_rewards(s, onehot)[:, i]
                nxt = self.truth.individual_rewards(self.env.mean_next_state(s, a), onehot)[:, i]
                scores[:, k] = now + nxt
            greedy = np.zeros((n, count))
            greedy[np.arange(n), np.argmax(scores, axis=1)] = 1.0
            out.append((1.0 - self.epsilon) * greedy + self.epsilon / count)
        return out

    def action_probs(self, s: np.ndarray, progress: float = 1.0) -> list[np.ndarray]:
        s = np.atleast_2d(s)
        n = s.shape[0]
        uniform = [np.full((n, c), 1.0 / c) for c in self.env.action_counts]
        tier = self.tier
        if tier == "random":
            return uniform
        expert = self.expert_probs(s)
        if tier == "expert":
            return expert
        weight = {"medium": 0.5, "medium_replay": 0.5 * float(progress)}[tier]
        return [weight * e + (1.0 - weight) * u for e, u in zip(expert, uniform)]


def behavior_policy(tier: str, env: EnvSpec, truth: GroundTruthSpec, seed: int = 0) -> BehaviorPolicy:
    tier = tier.lower()
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}")
    return BehaviorPolicy(tier=tier, env=env, truth=truth)


def _sample(probs: list[np.ndarray], rngs: Sequence[np.random.Generator]) -> np.ndarray:
    n = len(rngs)
    a = np.empty((n, len(probs)), dtype=np.int64)
    for e, rng in enumerate(rngs):
        u = rng.random(len(probs))
        for i, p in enumerate(probs):
            a[e, i] = min(int(np.searchsorted(np.cumsum(p[e]), u[i], side="right")), len(p[e]) - 1)
    return a


def episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode_id)]))


@dataclass
class Rollouts:
    s: np.ndarray        # (E, T, D_s)
    a: np.ndarray        # (E, T, N)
    r: np.ndarray        # (E, T, N) noiseless individual rewards
    eps: np.ndarray      # (E, T) realised team noise
    s_next: np.ndarray   # (E, T, D_s)

    def returns(self) -> np.ndarray:
        return self.r.sum(axis=(1, 2)) + self.eps.sum(axis=1)


def rollout(env: EnvSpec, truth: GroundTruthSpec, act: Callable[[np.ndarray, np.ndarray, list], np.ndarray],
            episode_ids: Sequence[int], seed: int) -> Rollouts:
    """Run episodes in lockstep; each episode draws from its own RNG stream.

    ``act(states, progress, rngs)`` returns (E, N) actions.
    """
    ids = list(episode_ids)
    n_ep, T, n, d_s = len(ids), env.horizon, env.n_agents, env.state_dim
    rngs = [episode_rng(seed, e) for e in ids]
    total = max(ids) if ids else 0
    progress = np.array([e / total if total > 0 else 1.0 for e in ids])
    S = np.empty((n_ep, T, d_s))
    A = np.empty((n_ep, T, n), dtype=np.int64)
    Rw = np.empty((n_ep, T, n))
    Eps = np.empty((n_ep, T))
    Sn = np.empty((n_ep, T, d_s))
    s = np.stack([rng.normal(0.0, env.init_std, size=d_s) for rng in rngs]) if n_ep else np.empty((0, d_s))
    for t in range(T):
        a = np.asarray(act(s, progress, rngs), dtype=np.int64)
        onehot = one_hot_actions(a, env.action_counts)
        r = truth.individual_rewards(s, onehot)
        noise = np.stack([rng.normal(0.0, env.process_noise, size=d_s) for rng in rngs])
        if truth.noise_sigma > 0:
            eps = np.array([rng.normal(0.0, truth.noise_sigma, size=n).sum() for rng in rngs])
        else:
            eps = np.zeros(n_ep)
        s_next = env.mean_next_state(s, a) + noise
        S[:, t], A[:, t], Rw[:, t], Eps[:, t], Sn[:, t] = s, a, r, eps, s_next
        s = s_next
    return Rollouts(S, A, Rw, Eps, Sn)


def policy_actor(policy: BehaviorPolicy):
    def act(s, progress, rngs):
        if policy.tier == "medium_replay":
            rows = [policy.action_probs(s[e:e + 1], progress[e]) for e in range(len(rngs))]
            probs = [np.concatenate([row[i] for row in rows]) for i in range(policy.env.n_agents)]
        else:
            probs = policy.action_probs(s)
        return _sample(probs, rngs)
    return act


def _score(env, truth, tier, n_episodes, seed) -> dict:
    pol = behavior_policy("medium" if tier == "medium" else tier, env, truth)
    ro = rollout(env, truth, policy_actor(pol), range(n_episodes), seed=seed + 7919)
    ret = ro.returns()
    return {"mean": float(ret.mean()), "std": float(ret.std()), "n": int(n_episodes)}


@dataclass(frozen=True)
class HiddenRewards:
    episode: np.ndarray
    t: np.ndarray
    r: np.ndarray     # (n, N)
    eps: np.ndarray   # (n,)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for k in range(len(self.eps)):
                fh.write(json.dumps({"episode": int(self.episode[k]), "t": int(self.t[k]),
                                     "r": self.r[k].tolist(), "eps": float(self.eps[k])},
                                    separators=(",", ":")) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "HiddenRewards":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        return cls(episode=np.array([r["episode"] for r in rows], dtype=np.int64),
                   t=np.array([r["t"] for r in rows], dtype=np.int64),
                   r=np.array([r["r"] for r in rows], dtype=np.float64).reshape(len(rows), -1),
                   eps=np.array([r["eps"] for r in rows], dtype=np.float64))


def collect_dataset(env: EnvSpec, truth: GroundTruthSpec, tier: str, n_episodes: int, seed: int,
                    env_name: str | None = None) -> tuple[OfflineDataset, HiddenRewards]:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    pol = behavior_policy(tier, env, truth, seed)
    ro = rollout(env, truth, policy_actor(pol), range(n_episodes), seed=seed)
    E, T = n_episodes, env.horizon
    episode = np.repeat(np.arange(E), T)
    t = np.tile(np.arange(T), E)
    r = ro.r.reshape(E * T, -1)
    eps = ro.eps.reshape(E * T)
    R = r.sum(axis=1) + eps
    done = t == T - 1
    ds = dataset_from_arrays(episode, t, ro.s.reshape(E * T, -1), ro.a.reshape(E * T, -1), R,
                             ro.s_next.reshape(E * T, -1), done, env.state_dims, env.action_counts,
                             env=env_name or truth.family, tier=pol.tier, seed=int(seed),
                             generator=GENERATOR_VERSION)
    return ds, HiddenRewards(episode=episode, t=t, r=r, eps=eps)
