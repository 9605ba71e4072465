"""Fully-connected ReLU networks with hand-written reverse mode and Adam.

Every network used by the package (mask predictors, reward predictor,
Q-functions) is an instance of :class:`MLP`.  Arrays are float64 and all
randomness flows from an explicit seed, so two runs with the same inputs
produce bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_WIDTH = 256
N_HIDDEN = 3
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def architecture(in_dim: int, out_dim: int, hidden: int = HIDDEN_WIDTH,
                 n_hidden: int = N_HIDDEN) -> list[int]:
    if in_dim < 1 or out_dim < 1 or hidden < 1:
        raise ShapeError(f"dimensions must be >= 1, got in={in_dim} out={out_dim} hidden={hidden}")
    return [in_dim] + [hidden] * n_hidden + [out_dim]


@dataclass
class Cache:
    """Activations recorded by :meth:`MLP.forward` for the backward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    squeeze: bool


@dataclass
class MLP:
    arch: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0
    init_scheme: str = "he_uniform"

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int, hidden: int = HIDDEN_WIDTH,
             n_hidden: int = N_HIDDEN) -> "MLP":
        """He-uniform hidden layers, fan-in scaled uniform output layer, zero biases."""
        arch = architecture(in_dim, out_dim, hidden, n_hidden)
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        n_layers = len(arch) - 1
        for k in range(n_layers):
            fan_in, fan_out = arch[k], arch[k + 1]
            if k < n_layers - 1:
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(arch=arch, weights=weights, biases=biases, seed=int(seed))

    @property
    def in_dim(self) -> int:
        return self.arch[0]

    @property
    def out_dim(self) -> int:
        return self.arch[-1]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"fc{k}.W"] = w
            out[f"fc{k}.b"] = b
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def copy(self) -> "MLP":
        return MLP(arch=list(self.arch), weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases], seed=self.seed,
                   init_scheme=self.init_scheme)

    def load_from(self, other: "MLP") -> None:
        """Overwrite parameters in place with a copy of ``other``'s."""
        if other.arch != self.arch:
            raise ShapeError(f"architecture mismatch {other.arch} vs {self.arch}")
        for dst, src in zip(self.weights + self.biases, other.weights + other.biases):
            dst[...] = src

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        inputs, preacts = [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            h = np.maximum(z, 0.0) if k < last else z
        return (h[0] if squeeze else h), Cache(inputs, preacts, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: Cache, upstream: np.ndarray
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Return (parameter gradients, input gradient) for ``sum(upstream * output)``."""
        g = np.asarray(upstream, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        n = cache.inputs[0].shape[0]
        if g.shape != (n, self.out_dim):
            raise ShapeError(f"upstream gradient shape {g.shape} != {(n, self.out_dim)}")
        grads: dict[str, np.ndarray] = {}
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k < last:
                g = g * (cache.preacts[k] > 0.0)
            grads[f"fc{k}.W"] = cache.inputs[k].T @ g
            grads[f"fc{k}.b"] = g.sum(axis=0)
            g = g @ self.weights[k].T
        grads = {name: grads[name] for name in self.params()}
        return grads, (g[0] if cache.squeeze else g)

    def to_dict(self) -> dict:
        layers = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            layers[f"fc{k}"] = {"W": w.tolist(), "b": b.tolist()}
        return {"arch": list(self.arch), "seed": self.seed, "init": self.init_scheme,
                "version": FORMAT_VERSION, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network version {d.get('version')!r}")
        arch = [int(a) for a in d["arch"]]
        weights, biases = [], []
        for k in range(len(arch) - 1):
            layer = d["layers"][f"fc{k}"]
            w = np.asarray(layer["W"], dtype=np.float64).reshape(arch[k], arch[k + 1])
            b = np.asarray(layer["b"], dtype=np.float64).reshape(arch[k + 1])
            weights.append(w)
            biases.append(b)
        return cls(arch=arch, weights=weights, biases=biases, seed=int(d.get("seed", 0)),
                   init_scheme=d.get("init", "he_uniform"))


@dataclass
class Adam:
    """Bias-corrected Adam acting in place on a dict of named arrays."""

    params: dict[str, np.ndarray]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient {name} has shape {g.shape}, "
                                 f"parameter has {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def prefixed(prefix: str, d: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in d.items()}
