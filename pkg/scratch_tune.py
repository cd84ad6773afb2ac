"""Scratch: timing and learning probes for acceptance-scale configs."""
import sys
import time

import numpy as np

from contextrl import distributions as dist
from contextrl import envs, meta


def cfg_fwdback(**kw):
    d = dict(
        global_spec=dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3),
                                     dist.LatentBlockSpec(dist.Family.DIRICHLET, 3)]),
        local_spec=dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3),
                                    dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3)]),
        mode="pearl", epochs=10, sac_iters_per_epoch=30, k_trajs=2,
        batch_episodes=8, beta=0.1, tr=5, n_context=32, context_window=2000,
        test_episodes=2, hidden=(32, 32), recurrent_hidden=32,
        lr_encoder=1e-3, lr_actor=1e-3, lr_critic=1e-3,
        gamma=0.99, tau=0.005, alpha_ent=0.2,
    )
    d.update(kw)
    return meta.MetaConfig(**d)


def run(name, config, train_tasks, test_tasks, seed=0):
    t0 = time.time()
    agent, rows, walls = meta.meta_train(config, train_tasks, test_tasks, seed)
    dt = time.time() - t0
    oracle = np.mean([envs.oracle_return(t) for t in test_tasks])
    print(f"[{name}] seed={seed} total={dt:.1f}s per-epoch={np.mean(walls):.2f}s "
          f"oracle={oracle:.2f}")
    for r in rows:
        print(f"  ep{r['epoch']:02d} train={r['train_return']:8.2f} "
              f"test={r['test_return']:8.2f} klg={r['kl_global']:7.3f} "
              f"kll={r['kl_local']:8.3f} c={r['critic_loss']:8.3f} "
              f"a={r['actor_loss']:7.3f} v={r['value_loss']:8.3f}")
    return rows


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "fwdback"
    if which == "fwdback":
        # sanity: 2-task single-stage velocity, pearl
        train, test = envs.sample_tasks(
            "velocity", 2, 2, 50,
            {"min_goal": -1.0, "max_goal": 1.0, "goal_choices": [-1.0, 1.0],
             "n_subtasks_min": 1, "n_subtasks_max": 1})
        run("fwdback-pearl",
            cfg_fwdback(epochs=15, sac_iters_per_epoch=200, tau=0.01, gamma=0.95,
                        alpha_ent=0.05), train, test)
    elif which == "timing":
        train, test = envs.sample_tasks(
            "velocity", 8, 4, 100, {"min_goal": -1.0, "max_goal": 3.0},
            np.random.default_rng(0))
        run("vel-ocean-timing", cfg_fwdback(mode="ocean", epochs=2,
                                            sac_iters_per_epoch=20), train, test)
    elif which == "multistage":
        mode = sys.argv[2] if len(sys.argv) > 2 else "ocean"
        seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
        temp = float(sys.argv[4]) if len(sys.argv) > 4 else 0.5
        gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3, temp)] * 2)
        lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3, temp)] * 2)
        train, test = envs.sample_tasks(
            "velocity", 8, 4, 100, {"min_goal": -1.0, "max_goal": 3.0},
            np.random.default_rng(0))
        run(f"vel-{mode}-t{temp}", cfg_fwdback(
            mode=mode, global_spec=gspec, local_spec=lspec,
            epochs=15, sac_iters_per_epoch=150, tau=0.01, gamma=0.95,
            alpha_ent=0.05, test_episodes=3, beta=0.05, tr=5), train, test, seed=seed)
    elif which == "multistage2":
        mode = sys.argv[2] if len(sys.argv) > 2 else "ocean"
        seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
        beta = float(sys.argv[4]) if len(sys.argv) > 4 else 0.3
        lre = float(sys.argv[5]) if len(sys.argv) > 5 else 5e-4
        det = bool(int(sys.argv[6])) if len(sys.argv) > 6 else False
        epochs = int(sys.argv[7]) if len(sys.argv) > 7 else 12
        temp = 0.5
        gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3, temp)] * 2)
        lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3, temp)] * 2)
        train, test = envs.sample_tasks(
            "velocity", 6, 3, 100,
            {"min_goal": -1.0, "max_goal": 3.0, "goal_choices": [-1.0, 3.0]},
            np.random.default_rng(0))
        run(f"vel2-{mode}-b{beta}-lre{lre}-det{det}", cfg_fwdback(
            mode=mode, global_spec=gspec, local_spec=lspec,
            epochs=epochs, sac_iters_per_epoch=150, batch_episodes=6,
            tau=0.01, gamma=0.9, alpha_ent=0.05, test_episodes=3, beta=beta, tr=5,
            lr_encoder=lre, lr_actor=2e-3, lr_critic=2e-3,
            eval_deterministic=det,
            hidden=(32,), recurrent_hidden=32, n_context=48, context_window=1500,
            buffer_capacity=4000), train, test, seed=seed)
    elif which == "sym":
        mode = sys.argv[2] if len(sys.argv) > 2 else "ocean"
        seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
        beta = float(sys.argv[4]) if len(sys.argv) > 4 else 0.1
        lre = float(sys.argv[5]) if len(sys.argv) > 5 else 1e-3
        temp = float(sys.argv[6]) if len(sys.argv) > 6 else 0.35
        epochs = int(sys.argv[7]) if len(sys.argv) > 7 else 18
        gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3, temp)] * 2)
        lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3, temp)] * 2)
        train, test = envs.sample_tasks(
            "velocity", 6, 3, 100,
            {"min_goal": -1.0, "max_goal": 1.0, "goal_choices": [-1.0, 1.0]},
            np.random.default_rng(0))
        run(f"sym-{mode}-b{beta}-lre{lre}-t{temp}", cfg_fwdback(
            mode=mode, global_spec=gspec, local_spec=lspec,
            epochs=epochs, sac_iters_per_epoch=150, batch_episodes=6, k_trajs=3,
            tau=0.01, gamma=0.8, alpha_ent=0.1, test_episodes=3, beta=beta, tr=5,
            lr_encoder=lre, lr_actor=2e-3, lr_critic=2e-3,
            eval_deterministic=False,
            hidden=(32,), recurrent_hidden=32, n_context=48, context_window=1500,
            buffer_capacity=4000), train, test, seed=seed)
    elif which == "symg":
        mode = sys.argv[2] if len(sys.argv) > 2 else "ocean"
        seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
        beta = float(sys.argv[4]) if len(sys.argv) > 4 else 0.1
        ldim = int(sys.argv[5]) if len(sys.argv) > 5 else 3
        epochs = int(sys.argv[6]) if len(sys.argv) > 6 else 15
        n_train = int(sys.argv[7]) if len(sys.argv) > 7 else 16
        iters = int(sys.argv[8]) if len(sys.argv) > 8 else 80
        gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3, 0.5)] * 2)
        lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.GAUSSIAN, ldim)])
        train, test = envs.sample_tasks(
            "velocity", n_train, 4, 100,
            {"min_goal": -1.0, "max_goal": 1.0, "goal_choices": [-1.0, 1.0]},
            np.random.default_rng(0))
        cfg = cfg_fwdback(
            mode=mode, global_spec=gspec, local_spec=lspec,
            epochs=epochs, sac_iters_per_epoch=iters, batch_episodes=4, k_trajs=2,
            tau=0.01, gamma=0.8, alpha_ent=0.1, test_episodes=3, beta=beta, tr=5,
            lr_encoder=1e-3, lr_actor=1.5e-3, lr_critic=1.5e-3,
            eval_deterministic=False,
            hidden=(32,), recurrent_hidden=32, n_context=48, context_window=1500,
            buffer_capacity=4000)
        import time as _t
        t0 = _t.time()
        agent, rows, walls = meta.meta_train(cfg, train, test, seed)
        print(f"[symg-{mode}-b{beta}-l{ldim}] total={_t.time()-t0:.0f}s "
              f"oracle={np.mean([envs.oracle_return(t) for t in test]):.1f}")
        for r in rows[-6:]:
            print(f"  ep{r['epoch']:02d} train={r['train_return']:8.2f} "
                  f"test={r['test_return']:8.2f} klg={r['kl_global']:7.3f} "
                  f"kll={r['kl_local']:8.3f}")
        rng = np.random.default_rng(999)
        on_test = meta.meta_test(agent, test, 3, rng)
        on_train = meta.meta_test(agent, train, 3, rng)
        print(f"  final eval: test tasks {np.mean(on_test[:, -1]):.1f} "
              f"train tasks {np.mean(on_train[:, -1]):.1f}")
        print(f"  adaptation: test {np.round(on_test.mean(axis=0), 1)} "
              f"train {np.round(on_train.mean(axis=0), 1)}")
    elif which == "pointrobot":
        prior = sys.argv[2] if len(sys.argv) > 2 else "dirichlet"
        seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
        beta = float(sys.argv[4]) if len(sys.argv) > 4 else 0.1
        epochs = int(sys.argv[5]) if len(sys.argv) > 5 else 12
        temp = 0.5
        specs = {
            "dirichlet": dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 2, temp)] * 3),
            "categorical": dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 2, temp)] * 3),
            "gaussian": dist.LatentSpec([dist.LatentBlockSpec(dist.Family.GAUSSIAN, 6, temp)]),
        }
        train, test = envs.sample_tasks(
            "point_robot", 10, 4, 40, {"goal_mode": "dirichlet"},
            np.random.default_rng(0))
        cfg = cfg_fwdback(
            mode="pearl", global_spec=specs[prior], local_spec=specs[prior],
            epochs=epochs, sac_iters_per_epoch=150, batch_episodes=4, k_trajs=2,
            tau=0.01, gamma=0.9, alpha_ent=0.1, test_episodes=3, beta=beta, tr=5,
            lr_encoder=1e-3, lr_actor=1.5e-3, lr_critic=1.5e-3,
            eval_deterministic=False,
            hidden=(32,), recurrent_hidden=32, n_context=48, context_window=1500,
            buffer_capacity=4000)
        import time as _t
        t0 = _t.time()
        agent, rows, _ = meta.meta_train(cfg, train, test, seed)
        oracle = np.mean([envs.oracle_return(t) for t in test])
        finals = [meta.meta_test(agent, test, 3, np.random.default_rng(1000 + r))[:, -1].mean()
                  for r in range(4)]
        print(f"[pr-{prior}-b{beta}] seed={seed} total={_t.time()-t0:.0f}s "
              f"oracle={oracle:.1f} final={np.mean(finals):.2f}")
        for r in rows[-4:]:
            print(f"  ep{r['epoch']:02d} train={r['train_return']:8.2f} "
                  f"test={r['test_return']:8.2f} klg={r['kl_global']:7.3f}")
