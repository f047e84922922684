"""Actor-critic with experience replay, written from scratch in numpy.

The policy is multi-discrete: ``n_heads`` independent softmax groups of
``n_options`` each. The critic emits one Q value per (head, option), and each
head's state value is the policy-weighted mean of its Q values. Retrace
targets, truncated importance weights with bias correction, and the
trust-region projection are all applied per head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"NGACER1\n"


# -- network -------------------------------------------------------------------

class MLP:
    """Fully connected tanh network with a linear output layer over a flat parameter vector."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, flat=None):
        self.sizes = [int(s) for s in sizes]
        self.shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        self.n_params = sum(a * b + b for a, b in self.shapes)
        if flat is None:
            flat = np.zeros(self.n_params)
            if rng is not None:
                self._init(flat, rng)
        elif len(flat) != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {len(flat)}")
        self.flat = flat

    def _init(self, flat, rng):
        off = 0
        for a, b in self.shapes:
            lim = 1.0 / math.sqrt(a)
            flat[off:off + a * b] = rng.uniform(-lim, lim, size=a * b)
            off += a * b + b   # biases stay zero

    def layers(self, flat=None):
        flat = self.flat if flat is None else flat
        off = 0
        out = []
        for a, b in self.shapes:
            w = flat[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((w, flat[off:off + b]))
            off += b
        return out

    def forward(self, x, flat=None):
        acts = [x]
        h = x
        layers = self.layers(flat)
        for k, (w, b) in enumerate(layers):
            z = h @ w + b
            h = np.tanh(z) if k < len(layers) - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, acts, dout, flat=None) -> np.ndarray:
        grad = np.zeros(self.n_params)
        layers = self.layers(flat)
        offs = []
        off = 0
        for a, b in self.shapes:
            offs.append(off)
            off += a * b + b
        delta = dout
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            a, b = self.shapes[k]
            o = offs[k]
            grad[o:o + a * b] = (acts[k].T @ delta).ravel()
            grad[o + a * b:o + a * b + b] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ w.T) * (1.0 - acts[k] ** 2)
        return grad


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PolicyParameters:
    obs_dim: int
    hidden: list[int]
    n_heads: int
    n_options: int
    actor: MLP
    critic: MLP
    avg_actor: np.ndarray
    momentum: np.ndarray

    @classmethod
    def init(cls, obs_dim: int, hidden: Sequence[int], n_heads: int, n_options: int, seed: int):
        rng = np.random.default_rng(seed)
        out = n_heads * n_options
        actor = MLP([obs_dim, *hidden, out], rng)
        critic = MLP([obs_dim, *hidden, out], rng)
        return cls(obs_dim, list(hidden), n_heads, n_options, actor, critic, actor.flat.copy(),
                   np.zeros(actor.n_params + critic.n_params))

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.actor.flat, self.critic.flat])

    def set_flat(self, flat: np.ndarray):
        na = self.actor.n_params
        self.actor.flat = flat[:na].copy()
        self.critic.flat = flat[na:].copy()

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.obs_dim, list(self.hidden), self.n_heads, self.n_options,
                                MLP(self.actor.sizes, flat=self.actor.flat.copy()),
                                MLP(self.critic.sizes, flat=self.critic.flat.copy()),
                                self.avg_actor.copy(), self.momentum.copy())

    def _group(self, out):
        return out.reshape(out.shape[:-1] + (self.n_heads, self.n_options))


def policy_forward(params: PolicyParameters, obs: np.ndarray):
    """``(probs, q, v)`` with shapes (B, H, O), (B, H, O), (B, H); ``v = sum(pi * q)``."""
    obs = np.atleast_2d(obs)
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation length {obs.shape[-1]} != {params.obs_dim}")
    logits, _ = params.actor.forward(obs)
    q, _ = params.critic.forward(obs)
    probs = softmax(params._group(logits))
    q = params._group(q)
    if not (np.all(np.isfinite(probs)) and np.all(np.isfinite(q))):
        raise FloatingPointError("non-finite network output")
    return probs, q, (probs * q).sum(axis=-1)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One option per head from (B, H, O) probabilities (inverse-CDF sampling)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    return np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1)


# -- targets and gradients -----------------------------------------------------

def retrace_targets(rewards, dones, q_taken, values, rho_bar, v_boot, gamma: float) -> np.ndarray:
    """Backward Retrace recursion along the last time axis.

    ``rewards``/``dones`` are (..., T) (broadcast over trailing head axes via
    ``q_taken``/``values``/``rho_bar`` of shape (..., T, H)); ``v_boot`` is the
    value of the state after the last step, shape (..., H).
    """
    q_taken = np.asarray(q_taken, dtype=float)
    values = np.asarray(values, dtype=float)
    rho_bar = np.asarray(rho_bar, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = q_taken.shape[-2]
    out = np.empty_like(q_taken)
    q_ret = np.asarray(v_boot, dtype=float).copy()
    for t in range(T - 1, -1, -1):
        r = rewards[..., t, None]
        nd = 1.0 - dones[..., t, None]
        q_ret = r + gamma * nd * q_ret
        out[..., t, :] = q_ret
        q_ret = rho_bar[..., t, :] * (q_ret - q_taken[..., t, :]) + values[..., t, :]
    return out


def trust_region_project(g: np.ndarray, k: np.ndarray, delta: float) -> np.ndarray:
    """``g - max(0, (k.g - delta) / |k|^2) k`` along the last axis."""
    kg = (k * g).sum(axis=-1, keepdims=True)
    kk = (k * k).sum(axis=-1, keepdims=True)
    scale = np.where(kk > 0, np.maximum(0.0, kg - delta) / np.where(kk > 0, kk, 1.0), 0.0)
    return g - scale * k


def actor_logit_gradient(probs, q, values, q_ret, actions, mu, c: float, entropy_coef: float):
    """Ascent direction on the logits, shape (..., H, O).

    Truncated on-sample term ``min(c, rho) (Q_ret - V) grad log pi(a)`` plus the
    bias correction ``sum_a max(0, 1 - c / rho(a)) pi(a) (Q(a) - V) grad log pi(a)``
    and an entropy bonus.
    """
    n_opt = probs.shape[-1]
    onehot = np.eye(n_opt)[actions]
    pi_a = (probs * onehot).sum(-1)
    mu_a = (mu * onehot).sum(-1)
    rho_c = np.minimum(c, pi_a / mu_a)
    adv = q_ret - values
    g = (rho_c * adv)[..., None] * (onehot - probs)
    rho_all = probs / mu
    w = np.maximum(0.0, 1.0 - c / rho_all)
    coef = w * probs * (q - values[..., None])
    g += coef - probs * coef.sum(-1, keepdims=True)
    if entropy_coef:
        logp = np.log(probs)
        ent = -(probs * logp).sum(-1, keepdims=True)
        g += entropy_coef * (-probs * (logp + ent))
    return g


def actor_surrogate(params: PolicyParameters, obs, actions, coef_taken, coef_all, entropy_coef,
                    flat=None) -> float:
    """Loss whose gradient equals minus the mean actor direction (coefficients frozen).

    ``coef_taken`` (B, H) multiplies ``log pi(a)``; ``coef_all`` (B, H, O)
    multiplies ``log pi`` of every option.
    """
    logits, _ = params.actor.forward(obs, flat)
    z = params._group(logits)
    z = z - z.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    probs = np.exp(logp)
    onehot = np.eye(params.n_options)[actions]
    obj = (coef_taken * (logp * onehot).sum(-1)).sum() + (coef_all * logp).sum()
    obj += entropy_coef * (-(probs * logp).sum())
    return -obj / obs.shape[0]


def critic_loss(params: PolicyParameters, obs, actions, q_ret, value_coef=1.0, flat=None) -> float:
    q, _ = params.critic.forward(obs, flat)
    q = params._group(q)
    onehot = np.eye(params.n_options)[actions]
    qa = (q * onehot).sum(-1)
    return value_coef * 0.5 * ((qa - q_ret) ** 2).sum() / obs.shape[0]


def surrogate_coefficients(probs, q, values, q_ret, actions, mu, c):
    """Frozen coefficients of ``log pi`` matching :func:`actor_logit_gradient` (without entropy)."""
    onehot = np.eye(probs.shape[-1])[actions]
    pi_a = (probs * onehot).sum(-1)
    mu_a = (mu * onehot).sum(-1)
    coef_taken = np.minimum(c, pi_a / mu_a) * (q_ret - values)
    w = np.maximum(0.0, 1.0 - c / (probs / mu))
    coef_all = w * probs * (q - values[..., None])
    return coef_taken, coef_all


def actor_grad_from_logits(params: PolicyParameters, acts, dlogits) -> np.ndarray:
    return params.actor.backward(acts, dlogits.reshape(dlogits.shape[0], -1))


def critic_grad(params: PolicyParameters, acts, q, actions, q_ret, value_coef=1.0) -> np.ndarray:
    onehot = np.eye(params.n_options)[actions]
    qa = (q * onehot).sum(-1)
    dq = value_coef * (qa - q_ret)[..., None] * onehot / q.shape[0]
    return params.critic.backward(acts, dq.reshape(dq.shape[0], -1))


# -- replay --------------------------------------------------------------------

@dataclass
class Segment:
    obs: np.ndarray        # (T, D)
    actions: np.ndarray    # (T, H)
    mu: np.ndarray         # (T, H, O)
    rewards: np.ndarray    # (T,)
    dones: np.ndarray      # (T,)
    last_obs: np.ndarray   # (D,)

    def __post_init__(self):
        taken = np.take_along_axis(self.mu, self.actions[..., None], -1)
        if np.any(taken <= 0):
            raise ValueError("behaviour probability of a taken action must be positive")


class ReplayBuffer:
    def __init__(self, capacity_transitions: int, start_transitions: int):
        self.capacity = int(capacity_transitions)
        self.start = int(start_transitions)
        self.segments: list[Segment] = []
        self.transitions = 0
        self._next = 0

    def __len__(self):
        return self.transitions

    @property
    def ready(self) -> bool:
        return self.transitions >= self.start

    def add(self, seg: Segment):
        n = len(seg.rewards)
        max_segments = max(1, self.capacity // n)
        if len(self.segments) < max_segments:
            self.segments.append(seg)
            self.transitions += n
        else:
            old = self.segments[self._next]
            self.transitions += n - len(old.rewards)
            self.segments[self._next] = seg
            self._next = (self._next + 1) % max_segments

    def sample(self, k: int, rng: np.random.Generator) -> list[Segment]:
        if not self.ready:
            raise RuntimeError("replay sampled before the start threshold")
        idx = rng.integers(0, len(self.segments), size=k)
        return [self.segments[i] for i in idx]


# -- learner -------------------------------------------------------------------

@dataclass
class AcerSettings:
    lr: float = 7e-4
    momentum: float = 0.9
    gamma: float = 0.99
    c_trunc: float = 12.3
    replay_ratio: float = 5.0
    replay_start: int = 20_000
    buffer_capacity: int = 100_000
    n_steps: int = 50
    n_envs: int = 4
    total_steps: int = 6_000_000
    tau: float = 0.995
    delta: float = 1.0
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 10.0
    reward_scale: float = 1000.0

    @classmethod
    def from_config(cls, cfg) -> "AcerSettings":
        l = cfg.learner
        return cls(l.lr, l.momentum, cfg.gamma, l.c_trunc, l.replay_ratio, l.replay_start,
                   l.buffer_capacity, l.n_steps, l.n_envs, l.total_steps, l.tau, l.delta,
                   l.entropy_coef, l.value_coef, l.max_grad_norm, cfg.env.reward_scale)


@dataclass
class UpdateStats:
    grad_norm: float
    kl: float
    loss_critic: float


def acer_update(params: PolicyParameters, segs: list[Segment], s: AcerSettings) -> UpdateStats:
    """One gradient step on a batch of equal-length segments (in place)."""
    E = len(segs)
    T = len(segs[0].rewards)
    H, O = params.n_heads, params.n_options
    obs = np.concatenate([np.stack([g.obs for g in segs]).reshape(E * T, -1),
                          np.stack([g.last_obs for g in segs])])
    actions = np.stack([g.actions for g in segs])            # (E, T, H)
    mu = np.stack([g.mu for g in segs])                      # (E, T, H, O)
    rewards = np.stack([g.rewards for g in segs]) / s.reward_scale
    dones = np.stack([g.dones for g in segs]).astype(float)

    logits, a_acts = params.actor.forward(obs)
    q_out, c_acts = params.critic.forward(obs)
    probs_all = softmax(params._group(logits))
    q_all = params._group(q_out)
    v_all = (probs_all * q_all).sum(-1)
    probs = probs_all[:E * T].reshape(E, T, H, O)
    q = q_all[:E * T].reshape(E, T, H, O)
    v = v_all[:E * T].reshape(E, T, H)
    v_boot = v_all[E * T:] * (1.0 - dones[:, -1])[:, None]

    onehot = np.eye(O)[actions]
    pi_a = (probs * onehot).sum(-1)
    mu_a = (mu * onehot).sum(-1)
    rho_bar = np.minimum(1.0, pi_a / mu_a)
    q_a = (q * onehot).sum(-1)
    q_ret = retrace_targets(rewards, dones, q_a, v, rho_bar, v_boot, s.gamma)

    g = actor_logit_gradient(probs, q, v, q_ret, actions, mu, s.c_trunc, s.entropy_coef)
    avg_logits, _ = params.actor.forward(obs[:E * T], params.avg_actor)
    avg_probs = softmax(params._group(avg_logits)).reshape(E, T, H, O)
    k = probs - avg_probs
    g = trust_region_project(g, k, s.delta)
    n = E * T
    dlogits = np.zeros((n + E, H * O))
    dlogits[:n] = (-g / n).reshape(n, H * O)
    grad_a = params.actor.backward(a_acts, dlogits)
    dq = np.zeros((n + E, H, O))
    dq[:n] = (s.value_coef * (q_a - q_ret)[..., None] * onehot / n).reshape(n, H, O)
    grad_c = params.critic.backward(c_acts, dq.reshape(n + E, H * O))
    # separate networks, separate clipping: the critic's scale must not throttle the actor
    norm = 0.0
    for gr in (grad_a, grad_c):
        nrm = float(np.sqrt(gr @ gr))
        if not np.isfinite(nrm):
            raise FloatingPointError("non-finite gradient")
        if nrm > s.max_grad_norm:
            gr *= s.max_grad_norm / nrm
        norm = max(norm, nrm)
    grad = np.concatenate([grad_a, grad_c])
    params.momentum = s.momentum * params.momentum + grad
    params.set_flat(params.flat - s.lr * params.momentum)
    params.avg_actor = s.tau * params.avg_actor + (1.0 - s.tau) * params.actor.flat
    kl = float((avg_probs * (np.log(avg_probs) - np.log(probs))).sum(-1).mean())
    closs = float(0.5 * ((q_a - q_ret) ** 2).mean())
    return UpdateStats(norm, kl, closs)


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)   # update, steps, mean_return, kl, grad_norm
    halted: bool = False


def train(env_factory: Callable[[int], object], params: PolicyParameters, s: AcerSettings, seed: int,
          on_update: Callable[[int, PolicyParameters, TrainLog], None] | None = None,
          log_every: int = 1) -> tuple[PolicyParameters, TrainLog]:
    """Lockstep rollouts from ``n_envs`` environments, one on-policy update per rollout,
    then Poisson(replay_ratio) replay updates once the buffer passes its start threshold.

    Environments expose ``reset() -> obs`` and ``step(actions, probs) -> (obs, reward, done, info)``.
    A non-finite update halts training and returns the last good parameters.
    """
    rng = np.random.default_rng(seed)
    envs = [env_factory(i) for i in range(s.n_envs)]
    obs = np.stack([e.reset() for e in envs])
    buf = ReplayBuffer(s.buffer_capacity, s.replay_start)
    log = TrainLog()
    ep_ret = np.zeros(s.n_envs)
    recent: list[float] = []
    steps = 0
    update = 0
    good = params.copy()
    while steps < s.total_steps:
        segs = _rollout(envs, params, obs, s.n_steps, rng, ep_ret, recent)
        obs = np.stack([g.last_obs for g in segs])
        steps += s.n_envs * s.n_steps
        for g in segs:
            buf.add(g)
        try:
            st = acer_update(params, segs, s)
            if buf.ready:
                for _ in range(rng.poisson(s.replay_ratio)):
                    acer_update(params, buf.sample(s.n_envs, rng), s)
            if not np.all(np.isfinite(params.flat)):
                raise FloatingPointError("non-finite parameters")
        except FloatingPointError:
            log.halted = True
            params = good
            break
        update += 1
        good = params.copy()
        if update % log_every == 0:
            mean_ret = float(np.mean(recent[-20:])) if recent else float("nan")
            log.rows.append((update, steps, mean_ret, st.kl, st.grad_norm))
        if on_update is not None:
            on_update(update, params, log)
    return params, log


def _rollout(envs, params, obs, n_steps, rng, ep_ret, recent) -> list[Segment]:
    E = len(envs)
    H, O = params.n_heads, params.n_options
    o_buf = np.zeros((E, n_steps, params.obs_dim))
    a_buf = np.zeros((E, n_steps, H), dtype=np.int64)
    mu_buf = np.zeros((E, n_steps, H, O))
    r_buf = np.zeros((E, n_steps))
    d_buf = np.zeros((E, n_steps), dtype=bool)
    for t in range(n_steps):
        probs, _, _ = policy_forward(params, obs)
        acts = sample_actions(probs, rng)
        o_buf[:, t] = obs
        a_buf[:, t] = acts
        mu_buf[:, t] = probs
        nxt = np.empty_like(obs)
        for i, env in enumerate(envs):
            o2, r, done, _ = env.step(acts[i], probs[i])
            r_buf[i, t] = r
            d_buf[i, t] = done
            ep_ret[i] += r
            if done:
                recent.append(ep_ret[i])
                ep_ret[i] = 0.0
                o2 = env.reset()
            nxt[i] = o2
        obs = nxt
    return [Segment(o_buf[i], a_buf[i], mu_buf[i], r_buf[i], d_buf[i], obs[i].copy()) for i in range(E)]


# -- evaluation helpers --------------------------------------------------------

class Policy:
    """Acting wrapper: greedy (argmax per head) or sampled."""

    def __init__(self, params: PolicyParameters, greedy: bool = True, seed: int = 0):
        self.params = params
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)

    def act(self, obs: np.ndarray):
        probs, _, _ = policy_forward(self.params, obs)
        if self.greedy:
            acts = probs.argmax(-1)
        else:
            acts = sample_actions(probs, self.rng)
        return acts, probs


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: PolicyParameters, config_hash: str, bounds_hash: str,
                    extra: dict | None = None) -> Path:
    header = {"obs_dim": params.obs_dim, "hidden": params.hidden, "n_heads": params.n_heads,
              "n_options": params.n_options, "actor": params.actor.n_params,
              "critic": params.critic.n_params, "blocks": ["actor", "critic", "avg_actor", "momentum"],
              "bounds_hash": bounds_hash, "config_hash": config_hash, **(extra or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    weights = np.concatenate([params.actor.flat, params.critic.flat, params.avg_actor, params.momentum])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(weights.astype("<f8").tobytes())
    return path


def load_checkpoint(path, config_hash: str | None = None) -> tuple[PolicyParameters, dict]:
    from .io import ArtifactError
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing checkpoint {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise ArtifactError(f"{path}: not a policy checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack("<I", data[off:off + 4])
    header = json.loads(data[off + 4:off + 4 + n])
    if config_hash is not None and header.get("config_hash") != config_hash:
        raise ArtifactError(f"{path}: config hash {header.get('config_hash')} does not match the "
                            f"active config ({config_hash}); retrain with the current config")
    w = np.frombuffer(data[off + 4 + n:], dtype="<f8").astype(float)
    na, nc = header["actor"], header["critic"]
    if len(w) != 3 * na + 2 * nc:
        raise ArtifactError(f"{path}: truncated weights")
    sizes = [header["obs_dim"], *header["hidden"], header["n_heads"] * header["n_options"]]
    params = PolicyParameters(header["obs_dim"], list(header["hidden"]), header["n_heads"],
                              header["n_options"], MLP(sizes, flat=w[:na].copy()),
                              MLP(sizes, flat=w[na:na + nc].copy()), w[na + nc:2 * na + nc].copy(),
                              w[2 * na + nc:].copy())
    return params, header
