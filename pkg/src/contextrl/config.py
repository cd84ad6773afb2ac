"""Experiment configuration: YAML parsing, validation, echo, latent declarations.

Every field has a default; unknown keys are rejected with their full path so
typos fail loudly. The effective configuration round-trips through YAML
unchanged, and command-line overrides take precedence over file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import distributions as dist
from . import envs
from .meta import MODES, MetaConfig

CONFIG_VERSION = "contextrl-config-v1"


class ConfigError(ValueError):
    """Validation failure; the message carries the offending field path."""


@dataclass
class EnvConfig:
    family: str = "velocity"
    horizon: int = 100
    n_train_tasks: int = 10
    n_test_tasks: int = 4
    min_goal: float = -1.0
    max_goal: float = 3.0
    radius: float = 1.0
    n_subtasks_min: int = 2
    n_subtasks_max: int = 3
    goal_mode: str = "arc"
    goal_choices: list | None = None
    task_seed: int = 0

    def params(self) -> dict:
        return {
            "min_goal": self.min_goal, "max_goal": self.max_goal, "radius": self.radius,
            "n_subtasks_min": self.n_subtasks_min, "n_subtasks_max": self.n_subtasks_max,
            "goal_mode": self.goal_mode, "goal_choices": self.goal_choices,
        }

    def sample_tasks(self):
        return envs.sample_tasks(self.family, self.n_train_tasks, self.n_test_tasks,
                                 self.horizon, self.params(),
                                 np.random.default_rng(self.task_seed))


@dataclass
class LatentConfig:
    global_blocks: list = field(default_factory=lambda: ["dirichlet:3", "dirichlet:3"])
    local_blocks: list = field(default_factory=lambda: ["categorical:3", "categorical:3"])
    temperature: float = 1.0
    dirichlet_fusion: str = "paper"


@dataclass
class ExperimentConfig:
    """Full experiment description: training hyperparameters, environment,
    latent declaration, seeds and output location."""

    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/experiment"
    mode: str = "ocean"
    epochs: int = 50
    sac_iters_per_epoch: int = 200
    k_trajs: int = 2
    batch_episodes: int = 8
    beta: float = 0.1
    tr: int = 5
    n_context: int = 64
    context_window: int = 20_000
    test_episodes: int = 3
    eval_deterministic: bool = True
    gamma: float = 0.99
    tau: float = 0.005
    alpha_ent: float = 0.2
    lr_encoder: float = 3e-4
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    buffer_capacity: int = 100_000
    single_q: bool = False
    reward_scale: float = 1.0
    hidden: list = field(default_factory=lambda: [64, 64])
    recurrent_hidden: int = 64
    env: EnvConfig = field(default_factory=EnvConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)

    def latent_specs(self):
        return (latent_spec_from_pairs(self.latent.global_blocks, self.latent.temperature,
                                       "latent.global"),
                latent_spec_from_pairs(self.latent.local_blocks, self.latent.temperature,
                                       "latent.local"))

    def to_meta_config(self) -> MetaConfig:
        gspec, lspec = self.latent_specs()
        return MetaConfig(
            global_spec=gspec, local_spec=lspec, mode=self.mode, epochs=self.epochs,
            sac_iters_per_epoch=self.sac_iters_per_epoch, k_trajs=self.k_trajs,
            batch_episodes=self.batch_episodes, beta=self.beta, tr=self.tr,
            n_context=self.n_context, context_window=self.context_window,
            test_episodes=self.test_episodes, eval_deterministic=self.eval_deterministic,
            gamma=self.gamma, tau=self.tau, alpha_ent=self.alpha_ent,
            lr_encoder=self.lr_encoder, lr_actor=self.lr_actor, lr_critic=self.lr_critic,
            buffer_capacity=self.buffer_capacity, single_q=self.single_q,
            reward_scale=self.reward_scale, hidden=tuple(self.hidden),
            recurrent_hidden=self.recurrent_hidden,
            dirichlet_fusion=self.latent.dirichlet_fusion,
        )


_FAMILY_NAMES = {
    "gaussian": dist.Family.GAUSSIAN,
    "categorical": dist.Family.CATEGORICAL,
    "dirichlet": dist.Family.DIRICHLET,
    "logitnormal": dist.Family.LOGIT_NORMAL,
}


def latent_spec_from_pairs(pairs: list, temperature: float, path: str) -> dist.LatentSpec:
    """Parse ["family:dim", ...] declarations into a LatentSpec."""
    if not pairs:
        raise ConfigError(f"{path}: needs at least one block")
    blocks = []
    for i, pair in enumerate(pairs):
        try:
            name, dim_s = str(pair).split(":")
            fam = _FAMILY_NAMES[name.strip().lower()]
            dim = int(dim_s)
        except (ValueError, KeyError):
            raise ConfigError(f"{path}[{i}]: expected 'family:dim' with family in "
                              f"{sorted(_FAMILY_NAMES)}, got {pair!r}") from None
        if dim < 1:
            raise ConfigError(f"{path}[{i}]: dim must be >= 1")
        blocks.append(dist.LatentBlockSpec(fam, dim, temperature=temperature))
    return dist.LatentSpec(blocks)


def prior_sweep_blocks(family: str, total_dim: int) -> list[str]:
    """Block declaration preserving the total latent size for a prior sweep:
    location-scale families get one wide block, simplex families split into
    dimension-2 blocks."""
    if family not in _FAMILY_NAMES:
        raise ConfigError(f"unknown prior family {family!r}")
    if family in ("gaussian", "logitnormal"):
        return [f"{family}:{total_dim}"]
    if total_dim % 2:
        raise ConfigError(f"prior sweep needs an even total latent dim, got {total_dim}")
    return [f"{family}:2"] * (total_dim // 2)


# ---------------------------------------------------------------------------
# dict <-> dataclass with full-path validation
# ---------------------------------------------------------------------------

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return _is_int(v) or isinstance(v, float)


def _build(cls, data: dict, path: str, nested: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {path}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        if f.name in nested:
            _require(isinstance(val, dict), f"{path}{f.name}: expected a mapping")
            kwargs[f.name] = _build(nested[f.name], val, f"{path}{f.name}.", {})
        else:
            kwargs[f.name] = val
    return cls(**kwargs)


_LATENT_KEY_ALIASES = {"global": "global_blocks", "local": "local_blocks"}


def parse_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Load, override and validate an experiment configuration.

    ``path`` may be None or an empty file (all defaults). ``overrides`` maps
    dotted field paths (e.g. ``env.family``) to values and wins over the file.
    """
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        _require(isinstance(loaded, dict), "config root must be a mapping")
        data = loaded
    for dotted, value in (overrides or {}).items():
        node = data
        *heads, last = dotted.split(".")
        for h in heads:
            node = node.setdefault(h, {})
        node[last] = value
    return config_from_dict(data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if isinstance(data.get("latent"), dict):
        data["latent"] = {_LATENT_KEY_ALIASES.get(k, k): v
                          for k, v in data["latent"].items()}
    cfg = _build(ExperimentConfig, data, "", {"env": EnvConfig, "latent": LatentConfig})
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    _require(isinstance(cfg.seeds, list) and cfg.seeds and all(_is_int(s) for s in cfg.seeds),
             "seeds: must be a nonempty list of integers")
    _require(cfg.mode in MODES, f"mode: must be one of {MODES}, got {cfg.mode!r}")
    for name in ("epochs", "sac_iters_per_epoch", "k_trajs", "batch_episodes", "tr",
                 "n_context", "context_window", "test_episodes", "buffer_capacity",
                 "recurrent_hidden"):
        _require(_is_int(getattr(cfg, name)) and getattr(cfg, name) >= 1,
                 f"{name}: must be an integer >= 1")
    _require(_is_num(cfg.beta) and cfg.beta >= 0, "beta: must be >= 0")
    _require(_is_num(cfg.gamma) and 0 < cfg.gamma <= 1, "gamma: must be in (0, 1]")
    _require(_is_num(cfg.tau) and 0 < cfg.tau <= 1, "tau: must be in (0, 1]")
    _require(_is_num(cfg.alpha_ent) and cfg.alpha_ent >= 0, "alpha_ent: must be >= 0")
    for name in ("lr_encoder", "lr_actor", "lr_critic", "reward_scale"):
        _require(_is_num(getattr(cfg, name)) and getattr(cfg, name) > 0,
                 f"{name}: must be > 0")
    _require(isinstance(cfg.hidden, list) and all(_is_int(h) and h >= 1 for h in cfg.hidden),
             "hidden: must be a list of integers >= 1")
    _require(isinstance(cfg.single_q, bool), "single_q: must be a boolean")
    _require(isinstance(cfg.eval_deterministic, bool), "eval_deterministic: must be a boolean")

    env = cfg.env
    _require(env.family in envs.FAMILIES,
             f"env.family: must be one of {envs.FAMILIES}, got {env.family!r}")
    _require(_is_int(env.horizon) and env.horizon >= 5, "env.horizon: must be an integer >= 5")
    _require(_is_int(env.n_train_tasks) and env.n_train_tasks >= 1,
             "env.n_train_tasks: must be >= 1")
    _require(_is_int(env.n_test_tasks) and env.n_test_tasks >= 1,
             "env.n_test_tasks: must be >= 1")
    _require(env.min_goal < env.max_goal, "env.min_goal: must be < env.max_goal")
    _require(_is_num(env.radius) and env.radius > 0, "env.radius: must be > 0")
    _require(1 <= env.n_subtasks_min <= env.n_subtasks_max,
             "env.n_subtasks_min: need 1 <= min <= max")
    _require(env.goal_mode in ("arc", "dirichlet"),
             f"env.goal_mode: must be 'arc' or 'dirichlet', got {env.goal_mode!r}")
    _require(_is_int(env.task_seed), "env.task_seed: must be an integer")
    if env.goal_choices is not None:
        _require(isinstance(env.goal_choices, list) and env.goal_choices
                 and all(_is_num(g) for g in env.goal_choices),
                 "env.goal_choices: must be a nonempty list of numbers")

    lat = cfg.latent
    _require(lat.dirichlet_fusion in ("paper", "exact"),
             "latent.dirichlet_fusion: must be 'paper' or 'exact'")
    _require(_is_num(lat.temperature) and lat.temperature > 0,
             "latent.temperature: must be > 0")
    cfg.latent_specs()  # raises ConfigError on malformed block declarations
    cfg.to_meta_config()  # final consistency check


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    lat = d.pop("latent")
    d["latent"] = {"global": lat["global_blocks"], "local": lat["local_blocks"],
                   "temperature": lat["temperature"],
                   "dirichlet_fusion": lat["dirichlet_fusion"]}
    return d


def dump_config(cfg: ExperimentConfig) -> str:
    return f"# {CONFIG_VERSION}\n" + yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def echo_config(cfg: ExperimentConfig, out_path) -> None:
    with open(out_path, "w") as f:
        f.write(dump_config(cfg))
