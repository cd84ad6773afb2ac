"""Minimal differentiable building blocks: MLPs, a gated recurrent cell, Adam.

Networks store float64 parameters in plain dicts and implement explicit
forward/backward pairs; callers chain vector-Jacobian products by hand. A
finite-difference harness verifies any loss against central differences.
No general computation graph: each forward returns the cache its backward
needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_VERSION = "contextrl-ckpt-v1"
_LOGVAR_CLIP = (-20.0, 6.0)
VAR_FLOOR = 1e-6
CONC_FLOOR = 1e-4

HEADS = ("linear", "gaussian", "softmax", "concentration")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Module:
    """Parameter container: ``params`` and same-shaped ``grads`` dicts."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


@dataclass
class MLPConfig:
    in_dim: int
    out_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    head: str = "linear"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all dims must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def raw_out_dim(self) -> int:
        # the gaussian head splits its raw output into mean and log-variance
        return 2 * self.out_dim if self.head == "gaussian" else self.out_dim


class MLP(Module):
    """Fully-connected net with a family-specific output head.

    Heads: ``linear`` (raw), ``gaussian`` (mean and floored variance from a
    log-variance half), ``softmax`` (simplex probabilities), ``concentration``
    (softplus plus 1e-4 floor, for Dirichlet parameters).
    """

    def __init__(self, cfg: MLPConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.in_dim, *cfg.hidden, cfg.raw_out_dim]
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            w, b = _init_linear(rng, dims[i], dims[i + 1])
            self._register(f"w{i}", w)
            self._register(f"b{i}", b)
        if cfg.head == "gaussian":
            # start with sharp predicted variances so early samples carry signal
            self.params[f"b{self.n_layers - 1}"][cfg.out_dim:] = -2.0

    def forward(self, x: np.ndarray):
        """Returns (output, cache). Output is (mean, var) for the gaussian head."""
        x = np.asarray(x, float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input to MLP")
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.cfg.in_dim}")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[f"w{i}"].T + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0) if self.cfg.activation == "relu" else np.tanh(h)
            acts.append(h)
        out, head_cache = self._apply_head(h)
        cache = (acts, head_cache, squeeze)
        if squeeze:
            out = tuple(o[0] for o in out) if isinstance(out, tuple) else out[0]
        return out, cache

    def _apply_head(self, raw):
        head = self.cfg.head
        if head == "linear":
            return raw, None
        if head == "gaussian":
            d = self.cfg.out_dim
            mean = raw[..., :d]
            logvar = np.clip(raw[..., d:], *_LOGVAR_CLIP)
            ev = np.exp(logvar)
            return (mean, ev + VAR_FLOOR), (raw[..., d:], ev)
        if head == "softmax":
            z = raw - raw.max(axis=-1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=-1, keepdims=True)
            return p, p
        sig = _sigmoid(raw)
        return _softplus(raw) + CONC_FLOOR, sig

    def backward(self, cache, grad_out, accumulate: bool = True) -> np.ndarray:
        """Pushes grad_out through the net; returns the input gradient.

        ``grad_out`` is (dmean, dvar) for the gaussian head. Parameter
        gradients are accumulated into ``self.grads`` unless ``accumulate``
        is False.
        """
        if cache is None:
            raise ValueError("backward called without a preceding forward")
        acts, head_cache, squeeze = cache
        draw = self._head_backward(grad_out, head_cache, squeeze)
        d = draw
        for i in reversed(range(self.n_layers)):
            a_in = acts[i]
            if i < self.n_layers - 1:
                post = acts[i + 1]
                if self.cfg.activation == "relu":
                    d = d * (post > 0.0)
                else:
                    d = d * (1.0 - post * post)
            if accumulate:
                self.grads[f"w{i}"] += d.T @ a_in
                self.grads[f"b{i}"] += d.sum(axis=0)
            d = d @ self.params[f"w{i}"]
        return d[0] if squeeze else d

    def _head_backward(self, grad_out, head_cache, squeeze):
        head = self.cfg.head
        if head == "gaussian":
            dmean, dvar = grad_out
            dmean = np.atleast_2d(np.asarray(dmean, float))
            dvar = np.atleast_2d(np.asarray(dvar, float))
            logvar, ev = head_cache
            inside = (logvar > _LOGVAR_CLIP[0]) & (logvar < _LOGVAR_CLIP[1])
            dlogvar = dvar * ev * inside
            return np.concatenate([dmean, dlogvar], axis=-1)
        g = np.asarray(grad_out, float)
        if squeeze and g.ndim == 1:
            g = g[None, :]
        if head == "linear":
            return g
        if head == "softmax":
            p = head_cache
            return p * (g - (g * p).sum(axis=-1, keepdims=True))
        return g * head_cache


@dataclass
class RecurrentCellConfig:
    in_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.hidden_dim < 1:
            raise ValueError("dims must be >= 1")


class GatedCell(Module):
    """Gated-update recurrence: update gate u and candidate c.

    h' = (1 - u) * h + u * c,  u = sigmoid(Wu x + Uu h + bu),
    c = tanh(Wc x + Uc h + bc).
    """

    def __init__(self, cfg: RecurrentCellConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        for gate in ("u", "c"):
            w, b = _init_linear(rng, cfg.in_dim, cfg.hidden_dim)
            uw, _ = _init_linear(rng, cfg.hidden_dim, cfg.hidden_dim)
            self._register(f"w{gate}", w)
            self._register(f"u{gate}", uw)
            self._register(f"b{gate}", b)

    def step(self, x: np.ndarray, h: np.ndarray):
        """One recurrence step; returns (h_next, cache)."""
        x = np.asarray(x, float)
        h = np.asarray(h, float)
        squeeze = x.ndim == 1
        if squeeze:
            x, h = x[None, :], h[None, :]
        if x.shape[-1] != self.cfg.in_dim or h.shape[-1] != self.cfg.hidden_dim:
            raise ValueError("recurrent step shape mismatch")
        p = self.params
        u = _sigmoid(x @ p["wu"].T + h @ p["uu"].T + p["bu"])
        c = np.tanh(x @ p["wc"].T + h @ p["uc"].T + p["bc"])
        h_next = (1.0 - u) * h + u * c
        cache = (x, h, u, c, squeeze)
        return (h_next[0] if squeeze else h_next), cache

    def backward(self, cache, dh_next, accumulate: bool = True):
        """Returns (dx, dh) for one step given dL/dh_next."""
        if cache is None:
            raise ValueError("backward called without a preceding step")
        x, h, u, c, squeeze = cache
        d = np.atleast_2d(np.asarray(dh_next, float))
        du = d * (c - h)
        dc = d * u
        dh = d * (1.0 - u)
        du_pre = du * u * (1.0 - u)
        dc_pre = dc * (1.0 - c * c)
        p = self.params
        if accumulate:
            self.grads["wu"] += du_pre.T @ x
            self.grads["uu"] += du_pre.T @ h
            self.grads["bu"] += du_pre.sum(axis=0)
            self.grads["wc"] += dc_pre.T @ x
            self.grads["uc"] += dc_pre.T @ h
            self.grads["bc"] += dc_pre.sum(axis=0)
        dx = du_pre @ p["wu"] + dc_pre @ p["wc"]
        dh = dh + du_pre @ p["uu"] + dc_pre @ p["uc"]
        if squeeze:
            return dx[0], dh[0]
        return dx, dh


class Adam:
    """Adam over the parameters of one or more modules."""

    def __init__(self, modules: Iterable[Module], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.modules = list(modules)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [{k: np.zeros_like(v) for k, v in mod.params.items()} for mod in self.modules]
        self.v = [{k: np.zeros_like(v) for k, v in mod.params.items()} for mod in self.modules]

    def step(self) -> None:
        """One update from the accumulated gradients; rejects non-finite grads."""
        for i, mod in enumerate(self.modules):
            for k, g in mod.grads.items():
                if not np.all(np.isfinite(g)):
                    raise ValueError(f"non-finite gradient in parameter {k!r}; step rejected")
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for i, mod in enumerate(self.modules):
            for k, p in mod.params.items():
                g = mod.grads[k]
                self.m[i][k] = self.beta1 * self.m[i][k] + (1.0 - self.beta1) * g
                self.v[i][k] = self.beta2 * self.v[i][k] + (1.0 - self.beta2) * g * g
                mhat = self.m[i][k] / b1c
                vhat = self.v[i][k] / b2c
                p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# gradient verification harness
# ---------------------------------------------------------------------------

def flat_params(modules: Iterable[Module]) -> np.ndarray:
    return np.concatenate([p.ravel() for mod in modules for p in mod.params.values()] or [np.zeros(0)])


def set_flat_params(modules: Iterable[Module], vec: np.ndarray) -> None:
    i = 0
    for mod in modules:
        for p in mod.params.values():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size
    if i != vec.size:
        raise ValueError("flat vector length mismatch")


def flat_grads(modules: Iterable[Module]) -> np.ndarray:
    return np.concatenate([g.ravel() for mod in modules for g in mod.grads.values()] or [np.zeros(0)])


def gradient_check(modules: list[Module], loss_fn: Callable[[], float],
                   backward_fn: Callable[[], float], rng: np.random.Generator,
                   n_directions: int = 10, n_coords: int = 20,
                   eps: float = 1e-5, atol: float = 1e-8) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` evaluates the loss from the modules' current parameters with
    no side effects; ``backward_fn`` recomputes it while accumulating
    gradients. Checks ``n_directions`` random directional derivatives plus
    ``n_coords`` individual coordinates.
    """
    for mod in modules:
        mod.zero_grads()
    backward_fn()
    analytic = flat_grads(modules)
    theta = flat_params(modules).copy()
    n = theta.size

    def fd_along(direction: np.ndarray) -> float:
        set_flat_params(modules, theta + eps * direction)
        hi = loss_fn()
        set_flat_params(modules, theta - eps * direction)
        lo = loss_fn()
        set_flat_params(modules, theta)
        return (hi - lo) / (2.0 * eps)

    worst = 0.0
    for _ in range(n_directions):
        d = rng.standard_normal(n)
        d /= np.linalg.norm(d)
        fd = fd_along(d)
        an = float(analytic @ d)
        denom = max(abs(fd), abs(an))
        if denom > atol:
            worst = max(worst, abs(fd - an) / denom)
    coords = rng.choice(n, size=min(n_coords, n), replace=False)
    for j in coords:
        e = np.zeros(n)
        e[j] = 1.0
        fd = fd_along(e)
        an = float(analytic[j])
        denom = max(abs(fd), abs(an))
        if denom > atol:
            worst = max(worst, abs(fd - an) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, nets: dict[str, Module], seed: int, extra: dict | None = None) -> None:
    """Archive every network's flat parameter vector with shape metadata."""
    arrays = {}
    meta = {"version": CHECKPOINT_VERSION, "seed": int(seed), "nets": {}, "extra": extra or {}}
    for name, net in nets.items():
        shapes = {k: list(v.shape) for k, v in net.params.items()}
        meta["nets"][name] = shapes
        flat = np.concatenate([v.ravel() for v in net.params.values()])
        arrays[name] = flat
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, nets: dict[str, Module]) -> dict:
    """Restores parameters in place; returns the stored metadata."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        for name, net in nets.items():
            if name not in meta["nets"]:
                raise ValueError(f"checkpoint missing network {name!r}")
            flat = data[name]
            i = 0
            for k, p in net.params.items():
                want = tuple(meta["nets"][name][k])
                if want != p.shape:
                    raise ValueError(f"shape mismatch for {name}.{k}: {want} vs {p.shape}")
                p[...] = flat[i:i + p.size].reshape(p.shape)
                i += p.size
    return meta
