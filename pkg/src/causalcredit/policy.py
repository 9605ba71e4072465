"""Per-agent conservative Q-learning on assigned or team rewards.

Each agent sees only its own state block and keeps two online Q networks
plus delayed target copies.  Training is offline: minibatches come from the
dataset, the TD target uses the clipped double estimate of the targets, and
a logsumexp penalty keeps values of unseen actions down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .approximator import Adam, MLP, prefixed
from .core import OfflineDataset, RunConfig, TrainingLog, derive_seed, state_slices
from .synthenv import EnvSpec, GroundTruthSpec, rollout

REWARD_MODES = ("INDIVIDUAL", "TEAM")
Q_LIMIT = 1e6
FORMAT_VERSION = 1


class PolicyDivergence(FloatingPointError):
    def __init__(self, message: str, step: int, agent: int, value: float):
        super().__init__(f"{message} (step {step}, agent {agent}, |Q|={value:.3g})")
        self.step, self.agent, self.value = step, agent, value


@dataclass
class AgentQ:
    online: list[MLP]
    target: list[MLP]

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k, net in enumerate(self.online):
            out.update(prefixed(f"q{k}", net.params()))
        return out

    def sync(self) -> None:
        for t, o in zip(self.target, self.online):
            t.load_from(o)


@dataclass
class QEnsemble:
    state_dims: tuple[int, ...]
    action_counts: tuple[int, ...]
    agents: list[AgentQ]
    sync_every: int = 100
    updates: int = 0
    config_hash: str = ""

    @classmethod
    def init(cls, state_dims, action_counts, seed: int, hidden: int = 256,
             sync_every: int = 100) -> "QEnsemble":
        agents = []
        for i, (d, a) in enumerate(zip(state_dims, action_counts)):
            online = [MLP.init(d, a, derive_seed(seed, f"q{i}.{k}"), hidden=hidden) for k in range(2)]
            agents.append(AgentQ(online=online, target=[net.copy() for net in online]))
        return cls(state_dims=tuple(state_dims), action_counts=tuple(action_counts),
                   agents=agents, sync_every=int(sync_every))

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def observations(self, s: np.ndarray, agent_id: int) -> np.ndarray:
        return np.asarray(s)[..., state_slices(self.state_dims)[agent_id]]

    def after_update(self) -> bool:
        """Count one update of every agent; hard-sync targets on the period."""
        self.updates += 1
        if self.updates % self.sync_every == 0:
            for ag in self.agents:
                ag.sync()
            return True
        return False

    def to_dict(self) -> dict:
        return {"version": FORMAT_VERSION, "state_dims": list(self.state_dims),
                "action_counts": list(self.action_counts), "sync_every": self.sync_every,
                "updates": self.updates, "config_hash": self.config_hash,
                "agents": [{"online": [n.to_dict() for n in ag.online],
                            "target": [n.to_dict() for n in ag.target]} for ag in self.agents]}

    @classmethod
    def from_dict(cls, d: dict) -> "QEnsemble":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported policy artifact version {d.get('version')!r}")
        agents = [AgentQ(online=[MLP.from_dict(x) for x in ag["online"]],
                         target=[MLP.from_dict(x) for x in ag["target"]]) for ag in d["agents"]]
        return cls(state_dims=tuple(d["state_dims"]), action_counts=tuple(d["action_counts"]),
                   agents=agents, sync_every=int(d["sync_every"]), updates=int(d["updates"]),
                   config_hash=d.get("config_hash", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "QEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class AgentBatch:
    """Transitions seen by one agent: own observation, own action, its reward."""

    o: np.ndarray
    a: np.ndarray
    r: np.ndarray
    o_next: np.ndarray
    done: np.ndarray


def _logsumexp(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = q.max(axis=1, keepdims=True)
    e = np.exp(q - m)
    z = e.sum(axis=1, keepdims=True)
    return (m + np.log(z))[:, 0], e / z


def td_targets(ag: AgentQ, batch: AgentBatch, gamma: float) -> np.ndarray:
    """r + gamma * (1 - done) * min_k Qbar_k(o', argmax_a Qbar_1(o', a))."""
    q1 = ag.target[0](batch.o_next)
    q2 = ag.target[1](batch.o_next)
    a_star = np.argmax(q1, axis=1)
    rows = np.arange(len(a_star))
    boot = np.minimum(q1[rows, a_star], q2[rows, a_star])
    return batch.r + gamma * (1.0 - batch.done) * boot


def cql_loss(ag: AgentQ, batch: AgentBatch, gamma: float, alpha: float
             ) -> tuple[float, dict[str, np.ndarray], dict]:
    """Averaged over both online nets: TD error to the shared target plus alpha times the
    logsumexp-minus-data-action gap, each averaged over the batch."""
    if batch.r is None:
        raise ValueError("batch has no reward field")
    y = td_targets(ag, batch, gamma)
    n = len(y)
    rows = np.arange(n)
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    stats = {"td": 0.0, "gap": 0.0, "q_max": 0.0}
    for k, net in enumerate(ag.online):
        q, cache = net.forward(batch.o)
        q_a = q[rows, batch.a]
        lse, soft = _logsumexp(q)
        gap = lse - q_a
        td = float(np.mean((q_a - y) ** 2))
        total += (td + alpha * float(np.mean(gap))) / len(ag.online)
        heads = len(ag.online)
        g = alpha * soft / (n * heads)
        g[rows, batch.a] += (2.0 * (q_a - y) - alpha) / (n * heads)
        gk, _ = net.backward(cache, g)
        grads.update(prefixed(f"q{k}", gk))
        stats["td"] += td / heads
        stats["gap"] += float(np.mean(gap)) / heads
        stats["q_max"] = max(stats["q_max"], float(np.max(np.abs(q))))
        stats[f"min_gap{k}"] = float(np.min(gap))
    return total, grads, stats


def agent_batch(qe: QEnsemble, arrays: dict, rewards: np.ndarray, idx: np.ndarray,
                agent_id: int) -> AgentBatch:
    return AgentBatch(o=qe.observations(arrays["s"][idx], agent_id),
                      a=arrays["a"][idx, agent_id],
                      r=rewards[idx, agent_id],
                      o_next=qe.observations(arrays["s_next"][idx], agent_id),
                      done=arrays["done"][idx].astype(np.float64))


def reward_table(data, reward_mode: str, rewards: np.ndarray | None = None) -> np.ndarray:
    """(n, N) per-agent rewards fed to training.

    TEAM copies the team reward to every agent.  INDIVIDUAL uses ``rewards``
    when given (for example the hidden true rewards), otherwise the assigned
    ``r_hat`` carried by ``data``.
    """
    reward_mode = reward_mode.upper()
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
    ds = dataset_of(data)
    if reward_mode == "TEAM":
        return np.repeat(ds.arrays["R"][:, None], ds.n_agents, axis=1)
    table = rewards if rewards is not None else getattr(data, "r_hat", None)
    if table is None:
        raise ValueError("INDIVIDUAL mode needs assigned rewards (r_hat) or an explicit table")
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (len(ds), ds.n_agents):
        raise ValueError(f"reward table shape {table.shape} != {(len(ds), ds.n_agents)}")
    if not np.all(np.isfinite(table)):
        raise ValueError("reward table contains non-finite values")
    return table


def dataset_of(data) -> OfflineDataset:
    return data if isinstance(data, OfflineDataset) else data.dataset


def train_policy(data, config: RunConfig, reward_mode: str = "INDIVIDUAL",
                 rewards: np.ndarray | None = None, eval_fn=None
                 ) -> tuple[QEnsemble, TrainingLog]:
    """Offline CQL for every agent on shared minibatches.

    ``eval_fn(qe, step)``, when given, is called every ``eval_interval``
    updates and its dict result is merged into the log.
    """
    ds = dataset_of(data)
    table = reward_table(data, reward_mode, rewards)
    arrays = ds.arrays
    qe = QEnsemble.init(ds.state_dims, ds.action_counts, derive_seed(config.seed, "policy"),
                        hidden=config.hidden, sync_every=config.target_sync)
    qe.config_hash = config.digest()
    opts = [Adam(ag.params(), lr=config.policy_lr) for ag in qe.agents]
    rng = np.random.default_rng(derive_seed(config.seed, "policy_batches"))
    log = TrainingLog()
    n = len(ds)
    for step in range(1, config.policy_steps + 1):
        idx = rng.integers(0, n, size=config.batch_size)
        row = {"step": step}
        for i, (ag, opt) in enumerate(zip(qe.agents, opts)):
            loss, grads, stats = cql_loss(ag, agent_batch(qe, arrays, table, idx, i),
                                          config.gamma, config.cql_alpha)
            if not np.isfinite(loss) or stats["q_max"] > Q_LIMIT:
                raise PolicyDivergence("Q-values diverged", step, i, stats["q_max"])
            opt.step(grads)
            row[f"loss{i}"] = loss
        qe.after_update()
        if step % config.eval_interval == 0 or step == config.policy_steps:
            if eval_fn is not None:
                row.update(eval_fn(qe, step))
            log.append(**row)
    return qe, log


@dataclass
class GreedyPolicy:
    """Decentralised argmax over the mean of each agent's two online nets.

    ``np.argmax`` returns the first maximiser, so ties go to the lowest index.
    """

    qe: QEnsemble

    def q_values(self, s: np.ndarray, agent_id: int) -> np.ndarray:
        ag = self.qe.agents[agent_id]
        o = self.qe.observations(np.atleast_2d(s), agent_id)
        return 0.5 * (ag.online[0](o) + ag.online[1](o))

    def act(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        return np.stack([np.argmax(self.q_values(s, i), axis=1)
                         for i in range(self.qe.n_agents)], axis=1)


@dataclass
class EvalReport:
    mean_return: float
    std_return: float
    n_episodes: int
    normalized_score: float | None = None
    returns: list[float] = field(default_factory=list)

    @property
    def stderr(self) -> float:
        return self.std_return / np.sqrt(self.n_episodes)

    def to_dict(self) -> dict:
        return {"mean_return": self.mean_return, "std_return": self.std_return,
                "n_episodes": self.n_episodes, "normalized_score": self.normalized_score}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def evaluate_actor(act, env: EnvSpec, truth: GroundTruthSpec, n_episodes: int, seed: int
                   ) -> EvalReport:
    """Undiscounted team return of ``act(states, progress, rngs)`` over fresh episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    roll = rollout(env, truth, act, range(n_episodes), derive_seed(seed, "evaluate"))
    rets = roll.returns()
    score = None
    if truth.scores:
        score = metrics.normalized_score(float(rets.mean()), truth.random_score, truth.expert_score)
    return EvalReport(mean_return=float(rets.mean()), std_return=float(rets.std()),
                      n_episodes=int(n_episodes), normalized_score=score,
                      returns=[float(x) for x in rets])


def evaluate(policy: GreedyPolicy | QEnsemble, env: EnvSpec, truth: GroundTruthSpec,
             n_episodes: int, seed: int) -> EvalReport:
    if isinstance(policy, QEnsemble):
        policy = GreedyPolicy(policy)
    if tuple(env.state_dims) != policy.qe.state_dims or \
            tuple(env.action_counts) != policy.qe.action_counts:
        raise ValueError("environment dimensions do not match the policy")
    return evaluate_actor(lambda s, progress, rngs: policy.act(s), env, truth, n_episodes, seed)
