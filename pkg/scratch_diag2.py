"""Scratch: does the trained local latent track the goal, and does the policy use it?"""
import numpy as np

from contextrl import distributions as dist
from contextrl import envs, meta

gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3, 0.5)] * 2)
lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.GAUSSIAN, 3)])
cfg = meta.MetaConfig(
    global_spec=gspec, local_spec=lspec, mode="ocean",
    epochs=18, sac_iters_per_epoch=150, k_trajs=2, batch_episodes=4,
    beta=0.03, tr=5, n_context=48, context_window=1500, test_episodes=3,
    eval_deterministic=False, gamma=0.8, tau=0.01, alpha_ent=0.1,
    lr_encoder=1e-3, lr_actor=1.5e-3, lr_critic=1.5e-3,
    buffer_capacity=4000, hidden=(32,), recurrent_hidden=32)

train, test = envs.sample_tasks(
    "velocity", 10, 4, 100,
    {"min_goal": -1.0, "max_goal": 1.0, "goal_choices": [-1.0, 1.0]},
    np.random.default_rng(0))
agent, rows, _ = meta.meta_train(cfg, train, test, seed=0)
print("final train/test:", rows[-1]["train_return"], rows[-1]["test_return"])

rng = np.random.default_rng(5)
# correlate the local posterior mean with the active goal on test rollouts
all_mu, all_goal = [], []
for task in test:
    ctx = []
    for e in range(3):
        posts, _ = agent.global_posterior(np.array(ctx) if ctx else None)
        traj, feats = meta.run_episode(agent, task, posts, rng)
        ctx.extend(feats)
    vs = traj.episode.s_next[:, 0]
    goals = np.array([task.goal_at(t) for t in range(task.horizon)])
    print(f"\ntask goals={task.goals} switches={task.switch_steps} "
          f"ep3 return={traj.cum_reward:.1f}")
    print("  v    :", " ".join(f"{v:5.1f}" for v in vs[::5]))
    print("  goal :", " ".join(f"{g:5.1f}" for g in goals[::5]))
    mus = np.array([r["posteriors"][0].mean for r in traj.local_records])
    for k in range(3):
        print(f"  mu[{k}] :", " ".join(f"{m:5.1f}" for m in mus[:, k]))
    for rec in traj.local_records:
        all_mu.append(rec["posteriors"][0].mean)
        all_goal.append(goals[min(rec["t"], task.horizon - 1)])
mu = np.array(all_mu)
goal = np.array(all_goal)
for k in range(mu.shape[1]):
    c = np.corrcoef(mu[:, k], goal)[0, 1]
    print(f"\ncorr(mu[{k}], active goal) = {c:.3f}")

# does the policy respond to z_l? probe action vs synthetic z_l
posts, _ = agent.global_posterior(None)
zg, _ = agent.sample_global(posts, rng)
state_v = 0.0
print("\npolicy response at v=0 to local-latent sweep (deterministic action):")
for k in range(3):
    pos = np.zeros(3)
    pos[k] = 1.5
    neg = np.zeros(3)
    neg[k] = -1.5
    a_pos = agent.actor.act(np.array([state_v]), zg, pos, mode="deterministic")
    a_neg = agent.actor.act(np.array([state_v]), zg, neg, mode="deterministic")
    print(f"  dim {k}: z=+1.5 -> a={a_pos[0]:+.2f}   z=-1.5 -> a={a_neg[0]:+.2f}")
