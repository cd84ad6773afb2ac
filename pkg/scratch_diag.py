"""Scratch: trace latent behavior and policy tracking after a short training run."""
import numpy as np

from contextrl import distributions as dist
from contextrl import envs, meta

temp = 0.5
gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3, temp)] * 2)
lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3, temp)] * 2)
cfg = meta.MetaConfig(
    global_spec=gspec, local_spec=lspec, mode="ocean",
    epochs=8, sac_iters_per_epoch=150, k_trajs=2, batch_episodes=6,
    beta=0.3, tr=5, n_context=48, context_window=1500, test_episodes=3,
    eval_deterministic=False, gamma=0.9, tau=0.01, alpha_ent=0.05,
    lr_encoder=5e-4, lr_actor=2e-3, lr_critic=2e-3,
    buffer_capacity=4000, hidden=(32,), recurrent_hidden=32)

train, test = envs.sample_tasks(
    "velocity", 6, 3, 100,
    {"min_goal": -1.0, "max_goal": 3.0, "goal_choices": [-1.0, 3.0]},
    np.random.default_rng(0))
agent, rows, _ = meta.meta_train(cfg, train, test, seed=0)
print("last epochs:", [f"{r['test_return']:.0f}" for r in rows[-3:]])

rng = np.random.default_rng(123)
curve = meta.meta_test(agent, test, 3, rng)
print("adaptation curve per episode:\n", np.round(curve, 1))

# trace one test task: the third (most adapted) episode
task = test[0]
print(f"\ntask goals={task.goals} switches={task.switch_steps}")
ctx = []
for e in range(3):
    posts, _ = agent.global_posterior(np.array(ctx) if ctx else None)
    traj, feats = meta.run_episode(agent, task, posts, rng)
    ctx.extend(feats)
    vs = traj.episode.s_next[:, 0]
    goals = np.array([task.goal_at(t) for t in range(task.horizon)])
    err = np.abs(vs - goals)
    print(f"\nepisode {e}: return {traj.cum_reward:.1f}")
    print("  v    :", " ".join(f"{v:5.1f}" for v in vs[::5]))
    print("  goal :", " ".join(f"{g:5.1f}" for g in goals[::5]))
    zl = np.array([r["z"] for r in traj.local_records])
    print("  z_l argmax blocks:", [tuple(np.argmax(z[o:o+3]) for o in (0, 3)) for z in zl])

# compare: a training task third episode
task = train[0]
print(f"\nTRAIN task goals={task.goals} switches={task.switch_steps}")
ctx = []
for e in range(3):
    posts, _ = agent.global_posterior(np.array(ctx) if ctx else None)
    traj, feats = meta.run_episode(agent, task, posts, rng)
    ctx.extend(feats)
print(f"train-task episode 3 return: {traj.cum_reward:.1f}")
vs = traj.episode.s_next[:, 0]
goals = np.array([task.goal_at(t) for t in range(task.horizon)])
print("  v    :", " ".join(f"{v:5.1f}" for v in vs[::5]))
print("  goal :", " ".join(f"{g:5.1f}" for g in goals[::5]))
