"""Soft actor-critic conditioned on the joint latent sample.

Squashed-Gaussian policy, double Q critics with a Polyak-averaged target
value network, per-task episode replay buffers, and the three losses. The
critic loss exposes gradients with respect to the latent inputs so the caller
can route them into the context encoders; actor and value losses deliberately
do not (only the critic and KL terms train the encoders).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .encoders import Transition

LOG_STD_BOUNDS = (-20.0, 2.0)
_SQUASH_EPS = 1e-6


class Actor:
    """Tanh-squashed Gaussian policy over [s, z_global, z_local]."""

    def __init__(self, state_dim: int, action_dim: int, latent_dim: int,
                 hidden: tuple[int, ...], rng: np.random.Generator,
                 action_scale: float = 1.0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.action_scale = action_scale
        self.net = nn.MLP(nn.MLPConfig(state_dim + latent_dim, 2 * action_dim,
                                       hidden=hidden, head="linear"), rng)

    @property
    def modules(self) -> list[nn.Module]:
        return [self.net]

    def _dist(self, x):
        raw, cache = self.net.forward(x)
        mu = raw[..., :self.action_dim]
        log_std = np.clip(raw[..., self.action_dim:], *LOG_STD_BOUNDS)
        inside = (raw[..., self.action_dim:] > LOG_STD_BOUNDS[0]) & \
                 (raw[..., self.action_dim:] < LOG_STD_BOUNDS[1])
        return mu, log_std, inside, cache

    def sample_with_cache(self, x: np.ndarray, noise: np.ndarray):
        """Reparameterized squashed action and its log density, batched."""
        mu, log_std, inside, net_cache = self._dist(x)
        std = np.exp(log_std)
        pre = mu + std * noise
        t = np.tanh(pre)
        action = self.action_scale * t
        sq = self.action_scale * (1.0 - t * t) + _SQUASH_EPS
        log_pi = (-log_std - 0.5 * np.log(2.0 * np.pi) - 0.5 * noise * noise
                  - np.log(sq)).sum(axis=-1)
        cache = (net_cache, noise, std, t, sq, inside)
        return action, log_pi, cache

    def sample_backward(self, cache, dpre, dlog_std_extra, accumulate=True):
        """Push gradients on the pre-squash action (and any explicit log-std
        term) back into the policy parameters; returns the input gradient."""
        net_cache, noise, std, t, sq, inside = cache
        dmu = dpre
        dlog_std = dpre * std * noise + dlog_std_extra
        draw = np.concatenate([dmu, dlog_std * inside], axis=-1)
        return self.net.backward(net_cache, draw, accumulate=accumulate)

    def act(self, s, z_global, z_local, mode: str = "stochastic",
            rng: np.random.Generator | None = None) -> np.ndarray:
        """Single action for one state and latent pair."""
        x = np.concatenate([np.atleast_1d(s), np.atleast_1d(z_global), np.atleast_1d(z_local)])
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite actor input")
        mu, log_std, _, _ = self._dist(x)
        if mode == "deterministic":
            return self.action_scale * np.tanh(mu)
        if mode != "stochastic":
            raise ValueError(f"unknown action mode {mode!r}")
        eps = rng.standard_normal(self.action_dim)
        return self.action_scale * np.tanh(mu + np.exp(log_std) * eps)


class Critic:
    """Two Q networks plus a value network with a Polyak-averaged target."""

    def __init__(self, state_dim: int, action_dim: int, latent_dim: int,
                 hidden: tuple[int, ...], rng: np.random.Generator,
                 single_q: bool = False):
        def make(in_dim):
            return nn.MLP(nn.MLPConfig(in_dim, 1, hidden=hidden, head="linear"), rng)

        self.state_dim, self.action_dim, self.latent_dim = state_dim, action_dim, latent_dim
        self.single_q = single_q
        self.q1 = make(state_dim + action_dim + latent_dim)
        self.q2 = None if single_q else make(state_dim + action_dim + latent_dim)
        self.v = make(state_dim + latent_dim)
        self.v_target = make(state_dim + latent_dim)
        for k, p in self.v.params.items():
            self.v_target.params[k][...] = p

    @property
    def q_modules(self) -> list[nn.Module]:
        return [self.q1] if self.single_q else [self.q1, self.q2]

    @property
    def v_modules(self) -> list[nn.Module]:
        return [self.v]

    def q_min(self, x: np.ndarray):
        """Elementwise min over the Q heads with caches and the select mask."""
        y1, c1 = self.q1.forward(x)
        if self.single_q:
            return y1[..., 0], (c1, None, None)
        y2, c2 = self.q2.forward(x)
        take1 = y1[..., 0] <= y2[..., 0]
        return np.where(take1, y1[..., 0], y2[..., 0]), (c1, c2, take1)

    def q_min_input_grad(self, cache, dqmin):
        """Input gradient of min(Q1,Q2) without touching Q parameters."""
        c1, c2, take1 = cache
        if self.single_q:
            return self.q1.backward(c1, dqmin[..., None], accumulate=False)
        g1 = self.q1.backward(c1, (dqmin * take1)[..., None], accumulate=False)
        g2 = self.q2.backward(c2, (dqmin * ~take1)[..., None], accumulate=False)
        return g1 + g2

    def polyak_update(self, tau: float) -> None:
        if not (0.0 < tau <= 1.0):
            raise ValueError(f"tau must be in (0, 1], got {tau}")
        for k, p in self.v.params.items():
            tgt = self.v_target.params[k]
            tgt *= 1.0 - tau
            tgt += tau * p


@dataclass
class TransitionBatch:
    """Flattened batch of transitions with aligned per-row latent inputs."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray  # true environment termination only, never horizon truncation

    def __post_init__(self):
        n = self.s.shape[0]
        if not all(arr.shape[0] == n for arr in (self.a, self.r, self.s_next, self.terminal)):
            raise ValueError("batch arrays misaligned")

    @property
    def n(self) -> int:
        return self.s.shape[0]


def critic_loss(critic: Critic, batch: TransitionBatch, z_global: np.ndarray,
                z_local: np.ndarray, gamma: float, want_grads: bool = True,
                target_latents: tuple | None = None):
    """Mean squared Bellman error summed over both Q heads.

    ``z_global``/``z_local`` are per-row (n, dim) arrays. The bootstrap
    target r + gamma*(1-terminal)*V_target(s', z) is a constant: the latent
    fed to the target value net carries no gradient (``target_latents``
    overrides which values it sees). Returns (loss, dz_global, dz_local)
    with per-row latent gradients; Q parameter gradients are accumulated
    when ``want_grads``.
    """
    n = batch.n
    if z_global.shape[0] != n or z_local.shape[0] != n:
        raise ValueError("latents misaligned with batch")
    z = np.concatenate([z_global, z_local], axis=-1)
    zt = z if target_latents is None else np.concatenate(target_latents, axis=-1)
    x = np.concatenate([batch.s, batch.a, z], axis=-1)
    xt = np.concatenate([batch.s_next, zt], axis=-1)
    vt, _ = critic.v_target.forward(xt)
    target = batch.r + gamma * (1.0 - batch.terminal) * vt[:, 0]

    loss = 0.0
    dz = np.zeros_like(z)
    for net in critic.q_modules:
        q, cache = net.forward(x)
        err = q[:, 0] - target
        loss += float(np.mean(err * err))
        if want_grads:
            dx = net.backward(cache, (2.0 * err / n)[:, None])
            dz += dx[:, critic.state_dim + critic.action_dim:]
    g = critic.latent_dim - z_local.shape[1]
    return loss, dz[:, :g], dz[:, g:]


def actor_loss(actor: Actor, critic: Critic, s: np.ndarray, z_global: np.ndarray,
               z_local: np.ndarray, alpha_ent: float,
               rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
               want_grads: bool = True):
    """Reparameterized policy objective mean(alpha*log pi - min Q).

    Latents are treated as constants here (no gradient into the encoders).
    Returns (loss, info) with the fresh actions and their log densities in
    ``info`` for reuse by the value regression.
    """
    n = s.shape[0]
    z = np.concatenate([z_global, z_local], axis=-1)
    xpi = np.concatenate([s, z], axis=-1)
    if noise is None:
        noise = rng.standard_normal((n, actor.action_dim))
    a_new, log_pi, pi_cache = actor.sample_with_cache(xpi, noise)
    xq = np.concatenate([s, a_new, z], axis=-1)
    q_min, q_cache = critic.q_min(xq)
    loss = float(np.mean(alpha_ent * log_pi - q_min))

    if want_grads:
        # d loss / d action via the selected Q head (params untouched)
        dxq = critic.q_min_input_grad(q_cache, np.full(n, -1.0 / n))
        da = dxq[:, critic.state_dim:critic.state_dim + critic.action_dim]
        t, sq = pi_cache[3], pi_cache[4]
        # d log_pi / d pre = 2 * scale * t * (1-t^2) / (scale*(1-t^2)+eps)
        dlogpi_dpre = 2.0 * actor.action_scale * t * (1.0 - t * t) / sq
        dpre = (alpha_ent / n) * dlogpi_dpre + da * actor.action_scale * (1.0 - t * t)
        dlog_std_extra = np.full_like(t, -alpha_ent / n)
        actor.sample_backward(pi_cache, dpre, dlog_std_extra)

    info = {"actions": a_new, "log_pi": log_pi, "q_min": q_min}
    return loss, info


def value_loss(critic: Critic, s: np.ndarray, z_global: np.ndarray, z_local: np.ndarray,
               target: np.ndarray, want_grads: bool = True) -> float:
    """Regression of V(s, z) toward a fixed target (no gradient into latents)."""
    x = np.concatenate([s, z_global, z_local], axis=-1)
    v, cache = critic.v.forward(x)
    err = v[:, 0] - target
    loss = float(np.mean(err * err))
    if want_grads:
        critic.v.backward(cache, (2.0 * err / len(err))[:, None])
    return loss


def value_target(info: dict, alpha_ent: float) -> np.ndarray:
    """Soft value regression target from fresh actions: min Q - alpha*log pi."""
    return info["q_min"] - alpha_ent * info["log_pi"]


def value_loss_and_target_update(critic: Critic, s, z_global, z_local, target,
                                 tau: float, optimizer: nn.Adam | None = None) -> float:
    """Convenience wrapper: value regression, optional Adam step, Polyak update."""
    critic.v.zero_grads()
    loss = value_loss(critic, s, z_global, z_local, target)
    if optimizer is not None:
        optimizer.step()
    critic.polyak_update(tau)
    return loss


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    """Arrays for one episode, in step order."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    @property
    def length(self) -> int:
        return self.s.shape[0]


class ReplayBuffer:
    """Per-task episode store with a transition-count capacity.

    Whole episodes are evicted oldest-first once the stored transition count
    exceeds the capacity; insertion order is tracked so recent-context
    sampling can window over the newest transitions.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: list[Episode] = []
        self._n_transitions = 0
        self.total_inserted = 0

    def __len__(self) -> int:
        return self._n_transitions

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def add_episode(self, ep: Episode) -> None:
        self.episodes.append(ep)
        self._n_transitions += ep.length
        self.total_inserted += ep.length
        while self._n_transitions > self.capacity and len(self.episodes) > 1:
            gone = self.episodes.pop(0)
            self._n_transitions -= gone.length

    def sample_episodes(self, batch: int, rng: np.random.Generator) -> list[Episode]:
        """Uniform draw of whole episodes, with replacement, order preserved."""
        if not self.episodes:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self.episodes), size=batch)
        return [self.episodes[i] for i in idx]

    def sample_recent_contexts(self, n: int, recency_window: int,
                               rng: np.random.Generator):
        """n transitions uniform over the most recent ``recency_window`` stored.

        Returns (list of Transition, info) where info records the effective
        window and whether sampling used replacement (n exceeding the window).
        """
        if not self.episodes:
            raise ValueError("cannot sample contexts from an empty buffer")
        window = min(recency_window, self._n_transitions)
        replacement = n > window
        offsets = rng.integers(0, window, size=n) if replacement else \
            rng.choice(window, size=n, replace=False)
        # offset 0 = newest transition
        out = []
        lengths = [ep.length for ep in self.episodes]
        for off in offsets:
            k = int(off)
            for ep_i in range(len(self.episodes) - 1, -1, -1):
                if k < lengths[ep_i]:
                    t = lengths[ep_i] - 1 - k
                    ep = self.episodes[ep_i]
                    out.append(Transition(ep.s[t], ep.a[t], float(ep.r[t]), ep.s_next[t]))
                    break
                k -= lengths[ep_i]
        info = {"window": int(window), "replacement": bool(replacement)}
        return out, info
