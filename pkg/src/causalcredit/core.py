"""Shared data model: transitions, offline datasets, masks and run configuration."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATASET_VERSION = 1
GENERATOR_VERSION = "1"
GRAPH_MODES = ("FCG", "FG", "DG")
MASK_SCOPES = ("local", "joint")
TIERS = ("random", "medium", "medium_replay", "expert")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    episode_id: int
    t: int
    joint_state: tuple[float, ...]
    joint_action: tuple[int, ...]
    team_reward: float
    next_joint_state: tuple[float, ...]
    terminal: bool


@dataclass(frozen=True)
class OfflineDataset:
    transitions: tuple[Transition, ...]
    state_dims: tuple[int, ...]
    action_counts: tuple[int, ...]
    env: str = "unknown"
    tier: str = "unknown"
    seed: int = 0
    generator: str = GENERATOR_VERSION

    @property
    def n_agents(self) -> int:
        return len(self.state_dims)

    @property
    def agent_dims(self) -> list[tuple[int, int]]:
        return list(zip(self.state_dims, self.action_counts))

    @property
    def state_dim(self) -> int:
        return sum(self.state_dims)

    @property
    def action_dim(self) -> int:
        return sum(self.action_counts)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def n_episodes(self) -> int:
        return len({tr.episode_id for tr in self.transitions})

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Column-stacked float64/int views used by the learners."""
        n = len(self.transitions)
        ds, na = self.state_dim, self.n_agents
        out = {
            "episode": np.fromiter((tr.episode_id for tr in self.transitions), np.int64, n),
            "t": np.fromiter((tr.t for tr in self.transitions), np.int64, n),
            "s": np.array([tr.joint_state for tr in self.transitions], dtype=np.float64).reshape(n, ds),
            "a": np.array([tr.joint_action for tr in self.transitions], dtype=np.int64).reshape(n, na),
            "R": np.fromiter((tr.team_reward for tr in self.transitions), np.float64, n),
            "s_next": np.array([tr.next_joint_state for tr in self.transitions],
                               dtype=np.float64).reshape(n, ds),
            "done": np.fromiter((tr.terminal for tr in self.transitions), bool, n),
        }
        for arr in out.values():
            arr.flags.writeable = False
        return out

    def header(self) -> dict:
        return {"version": DATASET_VERSION, "n_agents": self.n_agents,
                "agent_state_dims": list(self.state_dims),
                "agent_action_counts": list(self.action_counts),
                "env": self.env, "tier": self.tier, "seed": self.seed,
                "generator": self.generator}


def state_slices(state_dims: Sequence[int]) -> list[slice]:
    offsets = np.concatenate([[0], np.cumsum(state_dims)]).astype(int)
    return [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(state_dims))]


def one_hot_actions(actions: np.ndarray, action_counts: Sequence[int]) -> np.ndarray:
    """Encode (n, N) action indices as (n, sum(A_i)) concatenated one-hot blocks."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    n = actions.shape[0]
    out = np.zeros((n, int(sum(action_counts))))
    offset = 0
    rows = np.arange(n)
    for i, count in enumerate(action_counts):
        out[rows, offset + actions[:, i]] = 1.0
        offset += count
    return out


def agent_one_hot(agent_id: int, n_agents: int) -> np.ndarray:
    e = np.zeros(n_agents)
    e[agent_id] = 1.0
    return e


@dataclass(frozen=True)
class MaskPair:
    agent_id: int
    state_mask: np.ndarray
    action_mask: np.ndarray
    hard: bool = False

    def __post_init__(self):
        for name in ("state_mask", "action_mask"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ValueError(f"{name} entries must lie in [0, 1]")
            if self.hard and not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValueError(f"hard {name} must be 0/1")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Violation:
    message: str
    episode: int | None = None
    t: int | None = None
    index: int | None = None

    def __str__(self) -> str:
        where = []
        if self.index is not None:
            where.append(f"row {self.index}")
        if self.episode is not None:
            where.append(f"episode {self.episode}")
        if self.t is not None:
            where.append(f"t={self.t}")
        return f"[{', '.join(where)}] {self.message}" if where else self.message


def validate_dataset(ds: OfflineDataset) -> list[Violation]:
    """Collect every invariant violation; an empty list means the dataset is usable."""
    out: list[Violation] = []
    if ds.n_agents < 1:
        out.append(Violation("dataset has no agents"))
    if len(ds.action_counts) != len(ds.state_dims):
        out.append(Violation("agent_state_dims and agent_action_counts differ in length"))
        return out
    for i, (d, a) in enumerate(ds.agent_dims):
        if d < 1 or a < 1:
            out.append(Violation(f"agent {i} has degenerate dims (d_s={d}, A={a})"))
    ds_total, n_agents = ds.state_dim, ds.n_agents

    seen_closed: set[int] = set()
    current: int | None = None
    expected_t = 0
    terminal_seen = False
    prev: Transition | None = None

    def close_episode(ep: int, last: Transition | None) -> None:
        if last is not None and not last.terminal:
            out.append(Violation("episode has no terminal transition at its end", ep, last.t))
        seen_closed.add(ep)

    for idx, tr in enumerate(ds.transitions):
        ep = tr.episode_id
        if ep < 0:
            out.append(Violation("negative episode id", ep, tr.t, idx))
        if ep != current:
            if current is not None:
                close_episode(current, prev)
            if ep in seen_closed:
                out.append(Violation("episode is not a contiguous block", ep, tr.t, idx))
            current, expected_t, terminal_seen = ep, 0, False
        elif terminal_seen:
            out.append(Violation("transition after terminal within episode", ep, tr.t, idx))
        if tr.t != expected_t:
            out.append(Violation(f"timestep {tr.t} where {expected_t} expected", ep, tr.t, idx))
        expected_t = tr.t + 1
        if len(tr.joint_state) != ds_total:
            out.append(Violation(f"joint_state length {len(tr.joint_state)} != {ds_total}", ep, tr.t, idx))
        if len(tr.next_joint_state) != ds_total:
            out.append(Violation(f"next_joint_state length {len(tr.next_joint_state)} != {ds_total}",
                                 ep, tr.t, idx))
        if not all(math.isfinite(v) for v in tr.joint_state) or \
                not all(math.isfinite(v) for v in tr.next_joint_state) or \
                not math.isfinite(tr.team_reward):
            out.append(Violation("non-finite value", ep, tr.t, idx))
        if len(tr.joint_action) != n_agents:
            out.append(Violation(f"joint_action length {len(tr.joint_action)} != {n_agents}", ep, tr.t, idx))
        else:
            for i, (a, count) in enumerate(zip(tr.joint_action, ds.action_counts)):
                if not 0 <= a < count:
                    out.append(Violation(f"agent {i} action {a} outside [0, {count})", ep, tr.t, idx))
        terminal_seen = terminal_seen or tr.terminal
        prev = tr
    if current is not None:
        close_episode(current, prev)
    return out


# -- JSON Lines I/O ---------------------------------------------------------


def _transition_to_json(tr: Transition) -> str:
    obj = {"episode": tr.episode_id, "t": tr.t, "s": list(tr.joint_state),
           "a": list(tr.joint_action), "R": tr.team_reward,
           "s_next": list(tr.next_joint_state), "done": tr.terminal}
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_dataset(ds: OfflineDataset, path: str | Path, extra: Sequence[dict] | None = None) -> None:
    """Write header plus one JSON object per transition.

    ``extra`` optionally supplies per-row keys merged into each transition
    object (used for assigned rewards).
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(ds.header(), separators=(",", ":")) + "\n")
        for k, tr in enumerate(ds.transitions):
            line = _transition_to_json(tr)
            if extra is not None:
                line = line[:-1] + "," + json.dumps(extra[k], separators=(",", ":"))[1:]
            fh.write(line + "\n")


def _as_int(value, what: str, line: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetFormatError(f"{what} must be an integer", line)
    return value


def _as_floats(value, what: str, line: int, length: int) -> tuple[float, ...]:
    if not isinstance(value, list) or len(value) != length:
        raise DatasetFormatError(f"{what} must be an array of {length} numbers", line)
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise DatasetFormatError(f"{what} contains a non-number", line)
    return tuple(float(v) for v in value)


def read_dataset(path: str | Path, extra_keys: Iterable[str] = ()
                 ) -> OfflineDataset | tuple[OfflineDataset, list[dict]]:
    """Parse a dataset file.  With ``extra_keys`` also return those per-row values."""
    extra_keys = tuple(extra_keys)
    extras: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("missing header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"header is not valid JSON ({exc.msg})", 1) from None
    if not isinstance(header, dict):
        raise DatasetFormatError("header must be an object", 1)
    for key in ("version", "n_agents", "agent_state_dims", "agent_action_counts"):
        if key not in header:
            raise DatasetFormatError(f"header missing {key!r}", 1)
    if header["version"] != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {header['version']!r}", 1)
    state_dims = tuple(int(d) for d in header["agent_state_dims"])
    action_counts = tuple(int(a) for a in header["agent_action_counts"])
    n_agents = _as_int(header["n_agents"], "n_agents", 1)
    if len(state_dims) != n_agents or len(action_counts) != n_agents:
        raise DatasetFormatError("header dims disagree with n_agents", 1)
    ds_total = sum(state_dims)

    transitions = []
    for lineno, raw in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise DatasetFormatError("transition must be an object", lineno)
        missing = {"episode", "t", "s", "a", "R", "s_next", "done"} - obj.keys()
        if missing:
            raise DatasetFormatError(f"missing keys {sorted(missing)}", lineno)
        a = obj["a"]
        if not isinstance(a, list) or len(a) != n_agents:
            raise DatasetFormatError(f"a must be an array of {n_agents} integers", lineno)
        if not isinstance(obj["done"], bool):
            raise DatasetFormatError("done must be a boolean", lineno)
        r = obj["R"]
        if isinstance(r, bool) or not isinstance(r, (int, float)):
            raise DatasetFormatError("R must be a number", lineno)
        transitions.append(Transition(
            episode_id=_as_int(obj["episode"], "episode", lineno),
            t=_as_int(obj["t"], "t", lineno),
            joint_state=_as_floats(obj["s"], "s", lineno, ds_total),
            joint_action=tuple(_as_int(v, "action", lineno) for v in a),
            team_reward=float(r),
            next_joint_state=_as_floats(obj["s_next"], "s_next", lineno, ds_total),
            terminal=obj["done"],
        ))
        if extra_keys:
            try:
                extras.append({k: obj[k] for k in extra_keys})
            except KeyError as exc:
                raise DatasetFormatError(f"missing key {exc.args[0]!r}", lineno) from None
    ds = OfflineDataset(transitions=tuple(transitions), state_dims=state_dims,
                        action_counts=action_counts, env=str(header.get("env", "unknown")),
                        tier=str(header.get("tier", "unknown")), seed=int(header.get("seed", 0)),
                        generator=str(header.get("generator", GENERATOR_VERSION)))
    return (ds, extras) if extra_keys else ds


def dataset_from_arrays(episode, t, s, a, R, s_next, done, state_dims, action_counts,
                        **meta) -> OfflineDataset:
    transitions = tuple(
        Transition(int(episode[k]), int(t[k]), tuple(float(v) for v in s[k]),
                   tuple(int(v) for v in a[k]), float(R[k]),
                   tuple(float(v) for v in s_next[k]), bool(done[k]))
        for k in range(len(R)))
    return OfflineDataset(transitions=transitions, state_dims=tuple(int(d) for d in state_dims),
                          action_counts=tuple(int(c) for c in action_counts), **meta)


# -- Run configuration -------------------------------------------------------

# (lambda1, lambda2, cql_alpha, h) per data tier
TIER_DEFAULTS = {
    "expert": (7e-3, 7e-3, 5.0, 0.1),
    "medium": (5e-3, 5e-3, 0.5, 0.1),
    "medium_replay": (5e-3, 7e-3, 1.0, 0.1),
    "random": (1e-7, 1e-3, 1.0, 0.1),
}


@dataclass(frozen=True)
class RunConfig:
    lambda1: float = 7e-3
    lambda2: float = 7e-3
    h: float = 0.1
    model_lr: float = 3e-4
    policy_lr: float = 3e-4
    batch_size: int = 1024
    gamma: float = 0.95
    cql_alpha: float = 5.0
    train_steps: int = 5000
    seed: int = 0
    graph_mode: str = "DG"
    clip_enabled: bool = True
    eval_interval: int = 1000
    eval_episodes: int = 10
    # package-level knobs for training schedule and evaluation
    policy_steps: int = 5000
    hidden: int = 256
    mask_scope: str = "local"
    mask_init: float = 0.95
    pin_input_norm: bool = True
    reward_lr: float = 3e-4
    mask_freeze: float = 0.2
    l1_warmup: float = 0.2
    fg_lr: float = 1e-2
    target_sync: int = 100
    mask_samples: int = 512

    def __post_init__(self):
        problems = []
        for name in ("lambda1", "lambda2", "h", "cql_alpha"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        for name in ("model_lr", "policy_lr", "reward_lr", "fg_lr"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("batch_size", "train_steps", "eval_interval", "eval_episodes",
                     "policy_steps", "hidden", "target_sync", "mask_samples"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if self.graph_mode not in GRAPH_MODES:
            problems.append(f"graph_mode must be one of {GRAPH_MODES}")
        if self.mask_scope not in MASK_SCOPES:
            problems.append(f"mask_scope must be one of {MASK_SCOPES}")
        for name in ("mask_freeze", "l1_warmup"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if not 0.0 < self.mask_init < 1.0:
            problems.append("mask_init must lie in (0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def for_tier(cls, tier: str, **overrides) -> "RunConfig":
        lam1, lam2, alpha, h = TIER_DEFAULTS[tier]
        base = dict(lambda1=lam1, lambda2=lam2, cql_alpha=alpha, h=h)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(value, types[key], key, lineno)
        return replace(base or cls(), **values)

    @classmethod
    def load(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(value: str, typ: str, key: str, lineno: int):
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for a named sub-module."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def last(self) -> dict:
        return self.rows[-1] if self.rows else {}
