"""MLP function approximators, stochastic policy heads, and optimizers.

Networks hold their weights as one flat float64 vector so that optimizer
state, soft target updates, and checkpoints all operate on plain arrays.
Hidden layers use tanh, the output layer is linear.

Two forward paths exist for every network: a plain numpy path (rollouts,
bootstrap targets) and a graph path built on :mod:`safelab.autodiff`
(loss gradients). Both read the same flat layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from . import autodiff as ad
from .autodiff import Var

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_SQUASH_EPS = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite numbers."""


# ---------------------------------------------------------------------------
# flat-parameter MLP
# ---------------------------------------------------------------------------


def mlp_n_params(layer_sizes) -> int:
    return sum((nin + 1) * nout for nin, nout in zip(layer_sizes[:-1], layer_sizes[1:]))


def mlp_init_params(layer_sizes, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled Gaussian weights, zero biases."""
    chunks = []
    for nin, nout in zip(layer_sizes[:-1], layer_sizes[1:]):
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(nin), size=nin * nout))
        chunks.append(np.zeros(nout))
    return np.concatenate(chunks)


def mlp_forward(layer_sizes, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Deterministic batched forward pass; x has shape (batch, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer_sizes[0]:
        raise ValueError(
            f"input shape {x.shape} does not match input size {layer_sizes[0]}"
        )
    h = x
    offset = 0
    last = len(layer_sizes) - 2
    for i, (nin, nout) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        w = params[offset : offset + nin * nout].reshape(nin, nout)
        offset += nin * nout
        b = params[offset : offset + nout]
        offset += nout
        h = h @ w + b
        if i != last:
            h = np.tanh(h)
    return h


def mlp_forward_var(layer_sizes, params: Var, x, offset: int = 0) -> Var:
    """Graph forward pass; ``params`` is the flat parameter node."""
    h = ad.as_var(x)
    last = len(layer_sizes) - 2
    for i, (nin, nout) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        w = ad.reshape(ad.slice1d(params, offset, offset + nin * nout), (nin, nout))
        offset += nin * nout
        b = ad.slice1d(params, offset, offset + nout)
        offset += nout
        h = ad.matmul(h, w) + b
        if i != last:
            h = ad.tanh(h)
    return h


class Mlp:
    """Feed-forward net with a flat parameter vector (tanh hidden, linear out)."""

    kind = "mlp"

    def __init__(self, layer_sizes, params: np.ndarray | None = None):
        self.layer_sizes = list(int(n) for n in layer_sizes)
        n = mlp_n_params(self.layer_sizes)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    @classmethod
    def init_random(cls, layer_sizes, rng: np.random.Generator) -> "Mlp":
        return cls(layer_sizes, mlp_init_params(layer_sizes, rng))

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.layer_sizes, self.params, x)

    def forward_var(self, params: Var, x) -> Var:
        return mlp_forward_var(self.layer_sizes, params, x)

    def clone(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.params.copy())


def soft_update(target, source, tau: float):
    """target <- tau * source + (1 - tau) * target, elementwise on flat params."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    tp, sp = target.params, source.params
    if tp.shape != sp.shape:
        raise ValueError(f"parameter length mismatch: {tp.shape} vs {sp.shape}")
    target.params = tau * sp + (1.0 - tau) * tp
    return target


# ---------------------------------------------------------------------------
# policy heads
# ---------------------------------------------------------------------------


class SoftmaxPolicy:
    """Discrete policy: MLP logits with a softmax head."""

    kind = "softmax_policy"

    def __init__(self, layer_sizes, params: np.ndarray | None = None):
        self.layer_sizes = list(int(n) for n in layer_sizes)
        self.n_actions = self.layer_sizes[-1]
        n = mlp_n_params(self.layer_sizes)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    @classmethod
    def init_random(cls, layer_sizes, rng: np.random.Generator) -> "SoftmaxPolicy":
        return cls(layer_sizes, mlp_init_params(layer_sizes, rng))

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def clone(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.layer_sizes, self.params.copy())

    def probs(self, obs: np.ndarray) -> np.ndarray:
        logits = mlp_forward(self.layer_sizes, self.params, obs)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        a, _ = self.sample_and_logprob(obs, rng)
        return a

    def act_det(self, obs: np.ndarray) -> int:
        p = self.probs(obs[None, :])[0]
        return int(np.argmax(p))

    def sample_and_logprob(self, obs: np.ndarray, rng: np.random.Generator):
        p = self.probs(obs[None, :])[0]
        a = int(rng.choice(self.n_actions, p=p))
        return a, float(np.log(p[a]))

    def sample_batch(self, obs: np.ndarray, m: int, rng: np.random.Generator):
        """m sampled actions per row: returns (m, B) ints and (m, B) log-probs."""
        p = self.probs(obs)
        b = obs.shape[0]
        u = rng.random((m, b, 1))
        cdf = np.cumsum(p, axis=1)[None, :, :]
        acts = np.minimum((u > cdf).sum(axis=2), self.n_actions - 1)
        logp = np.log(p[np.arange(b)[None, :], acts])
        return acts, logp

    # graph builders ----------------------------------------------------

    def logits_var(self, params: Var, obs: np.ndarray) -> Var:
        return mlp_forward_var(self.layer_sizes, params, obs)

    def probs_and_logprobs_var(self, params: Var, obs: np.ndarray):
        logits = self.logits_var(params, obs)
        return ad.softmax(logits, axis=1), ad.log_softmax(logits, axis=1)


class GaussianPolicy:
    """Continuous policy: tanh-squashed Gaussian with learnable per-dim log-std.

    The flat parameter vector is the MLP mean-head parameters followed by
    ``action_dim`` log-std entries. Actions live in [-1, 1]^d.
    """

    kind = "gaussian_policy"

    def __init__(self, layer_sizes, params: np.ndarray | None = None):
        self.layer_sizes = list(int(n) for n in layer_sizes)
        self.action_dim = self.layer_sizes[-1]
        self._n_mlp = mlp_n_params(self.layer_sizes)
        n = self._n_mlp + self.action_dim
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    @classmethod
    def init_random(
        cls, layer_sizes, rng: np.random.Generator, log_std_init: float = -0.5
    ) -> "GaussianPolicy":
        mlp = mlp_init_params(layer_sizes, rng)
        log_std = np.full(layer_sizes[-1], log_std_init)
        return cls(layer_sizes, np.concatenate([mlp, log_std]))

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def clone(self) -> "GaussianPolicy":
        return GaussianPolicy(self.layer_sizes, self.params.copy())

    def mean_and_std(self, obs: np.ndarray):
        mu = mlp_forward(self.layer_sizes, self.params[: self._n_mlp], obs)
        log_std = np.clip(self.params[self._n_mlp :], LOG_STD_MIN, LOG_STD_MAX)
        return mu, np.exp(log_std)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        a, _ = self.sample_and_logprob(obs, rng)
        return a

    def act_det(self, obs: np.ndarray) -> np.ndarray:
        mu, _ = self.mean_and_std(obs[None, :])
        return np.tanh(mu[0])

    def sample_and_logprob(self, obs: np.ndarray, rng: np.random.Generator):
        a, logp = self._sample(obs[None, :], rng.standard_normal((1, self.action_dim)))
        return a[0], float(logp[0])

    def _sample(self, obs: np.ndarray, eps: np.ndarray):
        mu, std = self.mean_and_std(obs)
        u = mu + std * eps
        a = np.tanh(u)
        logp = gaussian_logpdf(u, mu, std) - np.log(1.0 - a * a + _SQUASH_EPS).sum(axis=1)
        return a, logp

    def sample_batch(self, obs: np.ndarray, m: int, rng: np.random.Generator):
        """m sampled actions per row: (m, B, d) actions and (m, B) log-probs."""
        b = obs.shape[0]
        eps = rng.standard_normal((m, b, self.action_dim))
        acts = np.empty((m, b, self.action_dim))
        logp = np.empty((m, b))
        for i in range(m):
            acts[i], logp[i] = self._sample(obs, eps[i])
        return acts, logp

    # graph builders ----------------------------------------------------

    def reparam_var(self, params: Var, obs: np.ndarray, eps: np.ndarray):
        """Differentiable squashed sample for fixed noise; returns (a, logp)."""
        mu = mlp_forward_var(self.layer_sizes, params, obs)
        log_std = ad.clip(
            ad.slice1d(params, self._n_mlp, self._n_mlp + self.action_dim),
            LOG_STD_MIN,
            LOG_STD_MAX,
        )
        std = ad.exp(log_std)
        u = mu + std * eps
        a = ad.tanh(u)
        z = (u - mu) * ad.exp(-log_std)
        logp_gauss = ad.vsum((-0.5) * z * z - log_std - 0.5 * _LOG_2PI, axis=1)
        squash = ad.vsum(ad.log(1.0 - a * a + _SQUASH_EPS), axis=1)
        return a, logp_gauss - squash


def gaussian_logpdf(u: np.ndarray, mu: np.ndarray, std: np.ndarray) -> np.ndarray:
    z = (u - mu) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI).sum(axis=1)


# ---------------------------------------------------------------------------
# critics over (state, action) pairs
# ---------------------------------------------------------------------------


def action_enc_dim(space) -> int:
    """Width of the action encoding fed to critics (one-hot for discrete)."""
    return space.n if hasattr(space, "n") else space.dim


def encode_actions(space, actions) -> np.ndarray:
    """Batched critic encoding: one-hot for discrete, raw vector for boxes."""
    if hasattr(space, "n"):
        idx = np.asarray(actions, dtype=np.intp).reshape(-1)
        out = np.zeros((idx.shape[0], space.n))
        out[np.arange(idx.shape[0]), idx] = 1.0
        return out
    acts = np.asarray(actions, dtype=np.float64)
    return acts.reshape(-1, space.dim)


def critic_values(net: Mlp, obs: np.ndarray, actions, space) -> np.ndarray:
    """Q(s, a) for a batch, as a flat (B,) array."""
    x = np.hstack([obs, encode_actions(space, actions)])
    return net.forward(x)[:, 0]


def critic_values_all_discrete(net: Mlp, obs: np.ndarray, space) -> np.ndarray:
    """Q(s, a) for every discrete action at once, as (B, n_actions)."""
    b = obs.shape[0]
    tiled = np.repeat(obs, space.n, axis=0)
    acts = np.tile(np.arange(space.n), b)
    return critic_values(net, tiled, acts, space).reshape(b, space.n)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment accumulators for one flat parameter vector."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def clone(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step, self.m.copy(), self.v.copy()
        )


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update; mutates ``state`` and returns the new parameters."""
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise DivergenceError(
            f"non-finite gradient at optimizer step {state.step + 1} "
            f"({bad}/{grad.size} coordinates)"
        )
    if state.m.shape != params.shape:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, net, rng_state: dict | None = None) -> None:
    """JSON header line followed by the raw little-endian float64 parameters."""
    header = {
        "kind": net.kind,
        "layer_sizes": net.layer_sizes,
        "n_params": int(net.n_params),
        "rng_state": rng_state,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(net.params, dtype="<f8").tobytes())


_KINDS = {}


def load_checkpoint(path):
    """Rebuild the net from a checkpoint file; returns (net, header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        raw = fh.read()
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if params.shape[0] != header["n_params"]:
        raise ValueError(
            f"checkpoint {path}: expected {header['n_params']} parameters, "
            f"found {params.shape[0]}"
        )
    cls = _KINDS[header["kind"]]
    return cls(header["layer_sizes"], params), header


_KINDS.update(
    {
        "mlp": Mlp,
        "softmax_policy": SoftmaxPolicy,
        "gaussian_policy": GaussianPolicy,
    }
)
