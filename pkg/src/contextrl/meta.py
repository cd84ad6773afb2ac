"""Meta-training loop, online trajectory collection, meta-test adaptation.

One iteration per task: sample recent contexts, fuse the global posterior,
re-infer local latents along a batch of replayed episodes with the current
encoder parameters, then push critic gradients and the beta-weighted KL
gradients into the encoders while the actor and value nets train on detached
latents. Ablation modes rewire which latents exist and how they update.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import distributions as dist
from . import encoders, envs, nn, sac

MODES = ("ocean", "ocean_rnn", "ocean_no_global", "pearl", "stochastic_pearl")

METRICS_VERSION = "contextrl-metrics-v1"
CURVES_VERSION = "contextrl-curves-v1"

METRIC_COLUMNS = ("epoch", "train_return", "test_return", "kl_global", "kl_local",
                  "kl_total", "actor_loss", "critic_loss", "value_loss", "seed")


@dataclass
class MetaConfig:
    """Training hyperparameters; defaults are desk-scale."""

    global_spec: dist.LatentSpec
    local_spec: dist.LatentSpec
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
    hidden: tuple[int, ...] = (64, 64)
    recurrent_hidden: int = 64
    dirichlet_fusion: str = "paper"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.k_trajs, self.batch_episodes, self.tr) < 1:
            raise ValueError("K, B and tr must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class ModeWiring:
    """How the latent machinery is assembled for one mode."""

    mode: str
    use_local_encoder: bool
    rnn_mode: bool
    zero_global: bool
    resample_each_step: bool
    local_spec: dist.LatentSpec


def apply_mode(config: MetaConfig) -> ModeWiring:
    """Component wiring for the configured mode.

    pearl holds a single per-episode sample of the fused global posterior in
    the local slot (local encoder disabled); stochastic_pearl resamples that
    slot from the same fixed posterior every step; ocean_rnn strips the
    stochastic conditioning and conditional priors from the local encoder;
    ocean_no_global pins the global slot to zeros and drops its KL term.
    """
    mode = config.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("pearl", "stochastic_pearl"):
        return ModeWiring(mode, use_local_encoder=False, rnn_mode=False,
                          zero_global=False, resample_each_step=mode == "stochastic_pearl",
                          local_spec=config.global_spec)
    return ModeWiring(mode, use_local_encoder=True, rnn_mode=mode == "ocean_rnn",
                      zero_global=mode == "ocean_no_global", resample_each_step=False,
                      local_spec=config.local_spec)


@dataclass
class Trajectory:
    """Rollout record: the episode plus its latent bookkeeping."""

    episode: sac.Episode
    z_global: np.ndarray
    local_records: list  # dicts: {"t", "z"} plus posteriors/priors when inferred
    cum_reward: float

    def local_kl(self) -> float:
        """Sum of the stored per-step KL(posterior || prior) over the rollout."""
        posts = [r["posteriors"] for r in self.local_records if "posteriors" in r]
        priors = [r["priors"] for r in self.local_records if "priors" in r]
        if not posts:
            return 0.0
        return encoders.local_kl_total(posts, priors)


class Agent:
    """All trainable networks for one experiment, wired per mode."""

    def __init__(self, config: MetaConfig, family: str, rng: np.random.Generator):
        self.config = config
        self.family = family
        self.wiring = apply_mode(config)
        self.state_dim = envs.obs_dim(family)
        self.action_dim = envs.action_dim(family)
        self.feat_dim = encoders.feature_dim(self.state_dim, self.action_dim)
        self.block_feat_dim = encoders.block_dim(self.state_dim, self.action_dim, config.tr)

        g_dim = config.global_spec.total_dim
        l_dim = self.wiring.local_spec.total_dim
        self.g_dim, self.l_dim = g_dim, l_dim

        self.global_enc = None
        if not self.wiring.zero_global:
            self.global_enc = encoders.GlobalEncoder(
                self.feat_dim, config.global_spec, config.hidden, rng,
                dirichlet_fusion=config.dirichlet_fusion)
        self.local_enc = None
        if self.wiring.use_local_encoder:
            self.local_enc = encoders.LocalEncoder(
                self.block_feat_dim, self.wiring.local_spec, config.hidden,
                config.recurrent_hidden, rng, rnn_mode=self.wiring.rnn_mode)
        self.actor = sac.Actor(self.state_dim, self.action_dim, g_dim + l_dim,
                               config.hidden, rng)
        self.critic = sac.Critic(self.state_dim, self.action_dim, g_dim + l_dim,
                                 config.hidden, rng, single_q=config.single_q)

    @property
    def encoder_modules(self) -> list[nn.Module]:
        mods = []
        if self.global_enc is not None:
            mods += self.global_enc.modules
        if self.local_enc is not None:
            mods += self.local_enc.modules
        return mods

    def named_nets(self) -> dict[str, nn.Module]:
        nets = {"actor": self.actor.net, "v": self.critic.v, "v_target": self.critic.v_target,
                "q1": self.critic.q1}
        if self.critic.q2 is not None:
            nets["q2"] = self.critic.q2
        if self.global_enc is not None:
            for i, net in enumerate(self.global_enc.nets):
                nets[f"global_{i}"] = net
        if self.local_enc is not None:
            nets["local_cell"] = self.local_enc.cell
            for i, net in enumerate(self.local_enc.enc_nets):
                nets[f"local_enc_{i}"] = net
            for i, net in enumerate(self.local_enc.prior_nets):
                nets[f"local_prior_{i}"] = net
        return nets

    def zero_grads(self) -> None:
        for net in self.named_nets().values():
            net.zero_grads()

    # -- latent helpers ------------------------------------------------------

    def global_posterior(self, context_feats: np.ndarray | None):
        """Fused global posterior (with cache) or the prior when no contexts."""
        if self.wiring.zero_global:
            return None, None
        if context_feats is None or len(context_feats) == 0:
            return [dist.prior_params(b) for b in self.config.global_spec.blocks], None
        return self.global_enc.infer_with_cache(np.asarray(context_feats))

    def sample_block_set(self, spec: dist.LatentSpec, posts, rng,
                         batch_shape: tuple = ()):
        """Concatenated reparameterized sample across a block list."""
        segs, caches = [], []
        for block, post in zip(spec.blocks, posts):
            noise = dist.draw_base_noise(block, rng, batch_shape)
            z, c = dist.sample_with_cache(post, noise, block.temperature)
            segs.append(z)
            caches.append(c)
        return dist.LatentSpec.concat(segs), caches

    def sample_global(self, posts, rng):
        if self.wiring.zero_global:
            return np.zeros(self.g_dim), None
        return self.sample_block_set(self.config.global_spec, posts, rng)


# ---------------------------------------------------------------------------
# rollouts (Algorithm 2 and the meta-test protocol)
# ---------------------------------------------------------------------------

def _featurize(s, a, r, s_next, scale):
    return encoders.transition_features(s, a, r, s_next, reward_scale=scale)


def run_episode(agent: Agent, task: envs.TaskSpec, global_posts, rng: np.random.Generator,
                deterministic: bool = False):
    """One rollout with online local inference; returns (Trajectory, features).

    ``global_posts`` is the fused global posterior (or prior) the episode's
    z_global and, in the pearl modes, the local slot are sampled from.
    """
    cfg = agent.config
    wiring = agent.wiring
    tr = cfg.tr
    z_g, _ = agent.sample_global(global_posts, rng)

    local_state = None
    local_posts = None
    z_l = None
    if wiring.use_local_encoder:
        local_state = agent.local_enc.init_state(rng)
    else:
        z_l, _ = agent.sample_block_set(wiring.local_spec, global_posts, rng)
        local_posts = global_posts

    state, obs = envs.reset(task, rng)
    recent = deque(maxlen=tr)
    records = [] if wiring.use_local_encoder else [{"t": 0, "z": z_l.copy()}]
    ss, aa, rr, sn, term = [], [], [], [], []
    feats = []
    mode = "deterministic" if deterministic else "stochastic"

    for t in range(task.horizon):
        if wiring.use_local_encoder and t % tr == 0:
            # the first block is all padding, mirroring training re-inference
            block = _block_from_recent(recent, agent.feat_dim, tr)
            local_state, posts, priors, _ = agent.local_enc.step(
                local_state, block, rng=rng, tr=tr)
            z_l = local_state.z
            records.append({"t": t, "z": z_l.copy(), "posteriors": posts, "priors": priors})
        elif wiring.resample_each_step and t > 0:
            z_l, _ = agent.sample_block_set(wiring.local_spec, local_posts, rng)
            records.append({"t": t, "z": z_l.copy()})
        action = agent.actor.act(obs, z_g, z_l, mode=mode, rng=rng)
        state, res = envs.step(state, action)
        ss.append(obs)
        aa.append(action)
        rr.append(res.reward)
        sn.append(res.observation)
        term.append(0.0)  # fixed-horizon families never truly terminate
        feats.append(_featurize(obs, action, res.reward, res.observation, cfg.reward_scale))
        obs = res.observation

    ep = sac.Episode(np.array(ss), np.array(aa), np.array(rr), np.array(sn), np.array(term))
    traj = Trajectory(episode=ep, z_global=z_g.copy(), local_records=records,
                      cum_reward=float(ep.r.sum()))
    return traj, feats


def _block_from_recent(recent: deque, feat_dim: int, tr: int) -> np.ndarray:
    """Flattened [features, validity] slots, oldest first, zero-padded."""
    block = np.zeros(tr * (feat_dim + 1))
    pad = tr - len(recent)
    for i, f in enumerate(recent):
        o = (pad + i) * (feat_dim + 1)
        block[o:o + feat_dim] = f
        block[o + feat_dim] = 1.0
    return block


def traj_collect(agent: Agent, task: envs.TaskSpec, buffer: sac.ReplayBuffer,
                 k_trajs: int, rng: np.random.Generator) -> list[Trajectory]:
    """Collect K trajectories; the context set starts empty and accumulates
    across the K rollouts, so the first one samples its global latent from
    the prior."""
    context_feats: list[np.ndarray] = []
    trajs = []
    for _ in range(k_trajs):
        posts, _ = agent.global_posterior(np.array(context_feats) if context_feats else None)
        traj, feats = run_episode(agent, task, posts, rng)
        context_feats.extend(feats)
        buffer.add_episode(traj.episode)
        trajs.append(traj)
    return trajs


def meta_test(agent: Agent, test_tasks: list[envs.TaskSpec], n_episodes: int,
              rng: np.random.Generator, deterministic: bool | None = None) -> np.ndarray:
    """Frozen-parameter adaptation: per task, episode 1 samples the global
    latent from the prior and later episodes fuse the contexts gathered in
    the earlier ones; local latents always update online. Returns the
    (n_tasks, n_episodes) adaptation curve of returns."""
    if deterministic is None:
        deterministic = agent.config.eval_deterministic
    out = np.zeros((len(test_tasks), n_episodes))
    for ti, task in enumerate(test_tasks):
        context_feats: list[np.ndarray] = []
        for e in range(n_episodes):
            posts, _ = agent.global_posterior(np.array(context_feats) if context_feats else None)
            traj, feats = run_episode(agent, task, posts, rng, deterministic=deterministic)
            context_feats.extend(feats)
            out[ti, e] = traj.cum_reward
    return out


# ---------------------------------------------------------------------------
# one training update (the body of Algorithm 1's task loop)
# ---------------------------------------------------------------------------

def task_update(agent: Agent, buffer: sac.ReplayBuffer, rng: np.random.Generator,
                beta: float | None = None) -> dict:
    """Losses and gradients for one task; gradients accumulate into the nets.

    Returns the logged breakdown plus the latent bookkeeping needed to
    recompute the KL decomposition independently.
    """
    cfg = agent.config
    wiring = agent.wiring
    beta = cfg.beta if beta is None else beta

    ctx, _ = buffer.sample_recent_contexts(cfg.n_context, cfg.context_window, rng)
    ctx_feats = encoders.episode_features(
        np.stack([c.state for c in ctx]), np.stack([c.action for c in ctx]),
        np.array([c.reward for c in ctx]), np.stack([c.next_state for c in ctx]),
        cfg.reward_scale)
    gposts, gcache = agent.global_posterior(ctx_feats)
    z_g, g_sample_caches = agent.sample_global(gposts, rng)

    episodes = buffer.sample_episodes(cfg.batch_episodes, rng)
    B = len(episodes)
    T = episodes[0].length
    s = np.stack([ep.s for ep in episodes])
    a = np.stack([ep.a for ep in episodes])
    r = np.stack([ep.r for ep in episodes])
    s_next = np.stack([ep.s_next for ep in episodes])
    terminal = np.stack([ep.terminal for ep in episodes])

    # local latents re-inferred along the sampled episodes with current params
    seq = None
    zl_rows = None
    local_sample_caches = None
    kl_local = 0.0
    if wiring.use_local_encoder:
        feats = encoders.episode_features(s, a, r, s_next, cfg.reward_scale)
        blocks = encoders.build_blocks(feats, cfg.tr)
        seq = agent.local_enc.run_sequence(blocks, rng, tr=cfg.tr)
        kl_local = encoders.local_kl_total(seq["posteriors"], seq["priors"])
        reps = _step_repeats(T, cfg.tr)
        zl = np.repeat(seq["z"], reps, axis=1)  # (B, T, l_dim)
    elif wiring.resample_each_step:
        zl, local_sample_caches = agent.sample_block_set(
            wiring.local_spec, gposts, rng, batch_shape=(B, T))
    else:  # pearl: one sample per update, shared across the batch
        zl_one, local_sample_caches = agent.sample_block_set(wiring.local_spec, gposts, rng)
        zl = np.broadcast_to(zl_one, (B, T, agent.l_dim)).copy()

    kl_global = 0.0
    if not wiring.zero_global:
        gpriors = [dist.prior_params(b) for b in cfg.global_spec.blocks]
        kl_global = sum(float(np.sum(dist.kl(q, p))) for q, p in zip(gposts, gpriors))
    kl_total = beta * (kl_global + kl_local)

    batch = sac.TransitionBatch(
        s=s.reshape(B * T, -1), a=a.reshape(B * T, -1), r=r.reshape(B * T),
        s_next=s_next.reshape(B * T, -1), terminal=terminal.reshape(B * T))
    zg_rows = np.broadcast_to(z_g, (B * T, agent.g_dim)).copy()
    zl_rows = zl.reshape(B * T, agent.l_dim)

    c_loss, dzg_rows, dzl_rows = sac.critic_loss(
        agent.critic, batch, zg_rows, zl_rows, cfg.gamma)
    a_loss, info = sac.actor_loss(agent.actor, agent.critic, batch.s, zg_rows, zl_rows,
                                  cfg.alpha_ent, rng=rng)
    v_loss = sac.value_loss(agent.critic, batch.s, zg_rows, zl_rows,
                            sac.value_target(info, cfg.alpha_ent))

    # encoder gradients: critic z-gradients plus beta-weighted KL gradients
    dz_g = dzg_rows.sum(axis=0)
    dzl_steps = dzl_rows.reshape(B, T, agent.l_dim)

    gpost_grads = None
    if not wiring.zero_global:
        gpost_grads = [dist.zeros_like_params(p) for p in gposts]
        for grad_arr, p in zip(gpost_grads, _split_block_grads(cfg.global_spec, dz_g, g_sample_caches)):
            dist.accumulate_params(grad_arr, p)
        if beta != 0.0:
            for grad_arr, q, p in zip(gpost_grads, gposts, gpriors):
                gq, _ = dist.kl_backward(q, p, beta)
                dist.accumulate_params(grad_arr, gq)

    if wiring.use_local_encoder:
        dZ = _fold_step_grads(dzl_steps, cfg.tr, seq["n_steps"])
        dposts = dpriors = None
        if beta != 0.0:
            dposts, dpriors = encoders.local_kl_backward(seq["posteriors"], seq["priors"], beta)
        agent.local_enc.sequence_backward(seq, dZ, dposts, dpriors)
    elif gpost_grads is not None:
        # the local slot was sampled from the global posterior: route its grads there
        if wiring.resample_each_step:
            seg_grads = wiring.local_spec.split(dzl_steps)
        else:
            seg_grads = wiring.local_spec.split(dzl_steps.sum(axis=(0, 1)))
        for grad_arr, cache, seg in zip(gpost_grads, local_sample_caches, seg_grads):
            p = dist.sample_backward(cache, seg)
            dist.accumulate_params(grad_arr, _sum_param_batch(p))

    if gpost_grads is not None and gcache is not None:
        agent.global_enc.backward(gcache, gpost_grads)

    return {
        "critic_loss": c_loss, "actor_loss": a_loss, "value_loss": v_loss,
        "kl_global": kl_global, "kl_local": kl_local, "kl_total": kl_total,
        "global_posteriors": gposts, "seq": seq, "beta": beta,
    }


def _step_repeats(T: int, tr: int) -> np.ndarray:
    n = -(-T // tr)
    reps = np.full(n, tr)
    reps[-1] = T - tr * (n - 1)
    return reps


def _fold_step_grads(dzl_steps: np.ndarray, tr: int, n_steps: int) -> np.ndarray:
    """Sum per-transition latent gradients within each temporal-resolution window."""
    B, T, L = dzl_steps.shape
    out = np.zeros((B, n_steps, L))
    for j in range(n_steps):
        out[:, j] = dzl_steps[:, j * tr:min((j + 1) * tr, T)].sum(axis=1)
    return out


def _split_block_grads(spec: dist.LatentSpec, dz: np.ndarray, caches) -> list:
    out = []
    for seg, cache in zip(spec.split(dz), caches):
        out.append(dist.sample_backward(cache, seg))
    return out


def _sum_param_batch(p: dist.PosteriorParams) -> dist.PosteriorParams:
    red = lambda a: None if a is None else a.reshape(-1, a.shape[-1]).sum(axis=0)
    return dist.PosteriorParams(p.family, red(p.mean), red(p.var), red(p.probs), red(p.conc))


# ---------------------------------------------------------------------------
# the meta-training loop (Algorithm 1)
# ---------------------------------------------------------------------------

def training_iteration(agent: Agent, buffers: list[sac.ReplayBuffer],
                       optimizers: dict, rng: np.random.Generator) -> dict:
    """One SAC iteration over all tasks: accumulate gradients, then update."""
    agent.zero_grads()
    infos = []
    for buffer in buffers:
        infos.append(task_update(agent, buffer, rng))
    if optimizers.get("encoder") is not None:
        optimizers["encoder"].step()
    optimizers["actor"].step()
    optimizers["q"].step()
    optimizers["v"].step()
    agent.critic.polyak_update(agent.config.tau)
    keys = ("critic_loss", "actor_loss", "value_loss", "kl_global", "kl_local", "kl_total")
    return {k: float(np.mean([i[k] for i in infos])) for k in keys}


def make_optimizers(agent: Agent) -> dict:
    cfg = agent.config
    enc = agent.encoder_modules
    return {
        "encoder": nn.Adam(enc, cfg.lr_encoder) if enc else None,
        "actor": nn.Adam(agent.actor.modules, cfg.lr_actor),
        "q": nn.Adam(agent.critic.q_modules, cfg.lr_critic),
        "v": nn.Adam(agent.critic.v_modules, cfg.lr_critic),
    }


def meta_train(config: MetaConfig, train_tasks: list[envs.TaskSpec],
               test_tasks: list[envs.TaskSpec], seed: int, dump_path=None):
    """Full training run; returns (agent, metrics rows, per-epoch wall times).

    A non-finite loss or gradient aborts the epoch; when ``dump_path`` is set
    the failing parameters are checkpointed there before the error is raised.
    """
    rng = np.random.default_rng(seed)
    family = train_tasks[0].family
    agent = Agent(config, family, rng)
    buffers = [sac.ReplayBuffer(config.buffer_capacity) for _ in train_tasks]
    optimizers = make_optimizers(agent)

    rows = []
    wall_times = []
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            collected = []
            for task, buffer in zip(train_tasks, buffers):
                collected += traj_collect(agent, task, buffer, config.k_trajs, rng)
            epoch_stats = []
            for _ in range(config.sac_iters_per_epoch):
                stats = training_iteration(agent, buffers, optimizers, rng)
                if not all(np.isfinite(v) for v in stats.values()):
                    raise RuntimeError(f"non-finite loss at epoch {epoch}: {stats}")
                epoch_stats.append(stats)
            curve = meta_test(agent, test_tasks, config.test_episodes, rng)
            row = {
                "epoch": epoch,
                "train_return": float(np.mean([t.cum_reward for t in collected])),
                "test_return": float(np.mean(curve[:, -1])),
                "seed": seed,
            }
            for k in ("kl_global", "kl_local", "kl_total", "actor_loss", "critic_loss",
                      "value_loss"):
                row[k] = float(np.mean([s[k] for s in epoch_stats]))
            if not all(np.isfinite(v) for v in row.values()):
                raise RuntimeError(f"non-finite metric at epoch {epoch}: {row}")
            rows.append(row)
            wall_times.append(time.perf_counter() - t0)
    except (RuntimeError, ValueError):
        if dump_path is not None:
            nn.save_checkpoint(dump_path, agent.named_nets(), seed,
                               extra={"note": "state dump after aborted epoch"})
        raise
    return agent, rows, wall_times


# ---------------------------------------------------------------------------
# metrics tables
# ---------------------------------------------------------------------------

def format_metrics(rows: list[dict]) -> str:
    """Comma-separated metrics table, one row per epoch, version-tagged.

    Wall time is deliberately excluded so identical runs produce identical
    bytes; timings travel in a separate file.
    """
    lines = [f"# {METRICS_VERSION}", ",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def format_curves(curve: np.ndarray, task_ids: list | None = None) -> str:
    """Adaptation-curve table: task id, episode index, return."""
    lines = [f"# {CURVES_VERSION}", "task,episode,return"]
    n_tasks, n_eps = curve.shape
    ids = task_ids if task_ids is not None else list(range(n_tasks))
    for ti in range(n_tasks):
        for e in range(n_eps):
            lines.append(f"{ids[ti]},{e},{curve[ti, e]!r}")
    return "\n".join(lines) + "\n"


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(format_metrics(rows))


def write_curves(path, curve: np.ndarray, task_ids=None) -> None:
    with open(path, "w") as f:
        f.write(format_curves(curve, task_ids))


def write_timings(path, wall_times: list[float]) -> None:
    with open(path, "w") as f:
        f.write("epoch,wall_time_s\n")
        for i, w in enumerate(wall_times):
            f.write(f"{i},{w:.3f}\n")
