"""Acceptance suite: one test per criterion, each printing a pass line.

Criteria 4-6 run real (desk-scale) training; they are the slow part of the
suite and share their artifacts through session-scoped fixtures. Tolerances
and orderings asserted here are the package's exit criteria.
"""

import dataclasses
import time

import numpy as np
import pytest

from contextrl import cli, config as cfgmod
from contextrl import distributions as dist
from contextrl import encoders, envs, meta, nn, sac
from helpers import ALL_FAMILIES, random_params


def report(name: str, detail: str = ""):
    print(f"\n[acceptance] {name}: PASS {detail}")


# ---------------------------------------------------------------------------
# criterion 1: distribution suite (< 2 min)
# ---------------------------------------------------------------------------

class TestCriterion1Distributions:
    def test_distribution_suite(self):
        t0 = time.time()
        rng = np.random.default_rng(2024)
        for family in ALL_FAMILIES:
            # fusion identity / idempotence / symmetry
            ps = [random_params(family, 4, rng) for _ in range(5)]
            single = dist.fuse([ps[0]])
            idem = dist.fuse([ps[0]] * 5)
            perm = dist.fuse(ps[::-1])
            ref = dist.fuse(ps)
            for name in ("mean", "var", "probs", "conc"):
                a = getattr(ps[0], name)
                if a is None:
                    continue
                assert np.max(np.abs(getattr(single, name) - a)) < 1e-9
                assert np.max(np.abs(getattr(idem, name) - a)) < 1e-9
                assert np.max(np.abs(getattr(perm, name) - getattr(ref, name))) < 1e-9
            # KL properties over random parameters
            for _ in range(100):
                q = random_params(family, 4, rng)
                p = random_params(family, 4, rng)
                assert dist.kl(q, p) >= -1e-9
                assert abs(dist.kl(q, q)) < 1e-9
            # Monte Carlo moment check: 1e5 samples within 4 standard errors
            params = random_params(family, 3, rng)
            spec = dist.LatentBlockSpec(family, 3)
            n = 100_000
            zs = dist.sample(params, dist.draw_base_noise(spec, rng, (n,)))
            if family is dist.Family.CATEGORICAL:
                hard = np.zeros_like(zs)
                hard[np.arange(n), zs.argmax(axis=-1)] = 1.0
                zs = hard
            target = dist.analytic_mean(params)
            se = zs.std(axis=0, ddof=1) / np.sqrt(n)
            assert np.all(np.abs(zs.mean(axis=0) - target) <= 4 * np.maximum(se, 1e-12))
        elapsed = time.time() - t0
        assert elapsed < 120.0
        report("criterion 1 (distribution suite)", f"in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: gradient suite (< 5 min)
# ---------------------------------------------------------------------------

class TestCriterion2Gradients:
    def test_gradient_suite(self):
        t0 = time.time()
        worst_overall = {}

        # every network head, >= 20 random draws each
        for head in nn.HEADS:
            worst = 0.0
            for draw in range(20):
                rng = np.random.default_rng(10_000 + 31 * draw)
                net = nn.MLP(nn.MLPConfig(4, 3, hidden=(8,), head=head), rng)
                x = rng.normal(size=(3, 4))
                w = rng.normal(size=(3, 3))

                def loss():
                    y, _ = net.forward(x)
                    if head == "gaussian":
                        return float((w * y[0]).sum() + 0.5 * (w * y[1]).sum())
                    return float((w * y).sum())

                def backward():
                    y, cache = net.forward(x)
                    net.backward(cache, (w, 0.5 * w) if head == "gaussian" else w)
                    return loss()

                worst = max(worst, nn.gradient_check([net], loss, backward, rng,
                                                     n_directions=4, n_coords=6))
            assert worst < 1e-4, head
            worst_overall[f"mlp-{head}"] = worst

        # recurrent cell through a 10-step chain
        worst = 0.0
        for draw in range(20):
            rng = np.random.default_rng(20_000 + 7 * draw)
            cell = nn.GatedCell(nn.RecurrentCellConfig(3, 4), rng)
            xs = rng.normal(size=(10, 3))
            w = rng.normal(size=4)

            def run():
                h, caches = np.zeros(4), []
                for t in range(10):
                    h, c = cell.step(xs[t], h)
                    caches.append(c)
                return float(w @ h), caches

            def loss():
                return run()[0]

            def backward():
                val, caches = run()
                dh = w.copy()
                for c in reversed(caches):
                    _, dh = cell.backward(c, dh)
                return val

            worst = max(worst, nn.gradient_check([cell], loss, backward, rng,
                                                 n_directions=4, n_coords=6))
        assert worst < 1e-4
        worst_overall["recurrent-cell"] = worst

        # critic / actor / value losses
        S, A, G, L = 2, 1, 3, 2
        worst_c = worst_a = worst_v = 0.0
        for draw in range(20):
            rng = np.random.default_rng(30_000 + 13 * draw)
            actor = sac.Actor(S, A, G + L, (8,), rng)
            critic = sac.Critic(S, A, G + L, (8,), rng)
            batch = sac.TransitionBatch(rng.normal(size=(4, S)), rng.uniform(-1, 1, (4, A)),
                                        rng.normal(size=4), rng.normal(size=(4, S)),
                                        np.zeros(4))
            zg, zl = rng.normal(size=(4, G)), rng.normal(size=(4, L))
            noise = rng.standard_normal((4, A))
            target = rng.normal(size=4)

            def closs():
                return sac.critic_loss(critic, batch, zg, zl, 0.95, want_grads=False)[0]

            def cback():
                return sac.critic_loss(critic, batch, zg, zl, 0.95)[0]

            worst_c = max(worst_c, nn.gradient_check(critic.q_modules, closs, cback, rng,
                                                     n_directions=4, n_coords=6))

            def aloss():
                return sac.actor_loss(actor, critic, batch.s, zg, zl, 0.2, noise=noise,
                                      want_grads=False)[0]

            def aback():
                return sac.actor_loss(actor, critic, batch.s, zg, zl, 0.2, noise=noise)[0]

            worst_a = max(worst_a, nn.gradient_check(actor.modules, aloss, aback, rng,
                                                     n_directions=4, n_coords=6))

            def vloss():
                return sac.value_loss(critic, batch.s, zg, zl, target, want_grads=False)

            def vback():
                return sac.value_loss(critic, batch.s, zg, zl, target)

            worst_v = max(worst_v, nn.gradient_check(critic.v_modules, vloss, vback, rng,
                                                     n_directions=4, n_coords=6))
        assert worst_c < 1e-4 and worst_a < 1e-4 and worst_v < 1e-4
        worst_overall.update({"critic-loss": worst_c, "actor-loss": worst_a,
                              "value-loss": worst_v})

        # global KL through fusion (dirichlet blocks present: 1e-3)
        gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3),
                                 dist.LatentBlockSpec(dist.Family.GAUSSIAN, 2)])
        worst = 0.0
        for draw in range(20):
            rng = np.random.default_rng(40_000 + 17 * draw)
            enc = encoders.GlobalEncoder(6, gspec, (8,), rng)
            ctx = rng.normal(size=(4, 6))
            priors = enc.prior()

            def gloss():
                posts = enc.infer(ctx)
                return sum(float(dist.kl(q, p)) for q, p in zip(posts, priors))

            def gback():
                posts, cache = enc.infer_with_cache(ctx)
                enc.backward(cache, [dist.kl_backward(q, p)[0]
                                     for q, p in zip(posts, priors)])
                return gloss()

            worst = max(worst, nn.gradient_check(enc.modules, gloss, gback, rng,
                                                 n_directions=4, n_coords=6))
        assert worst < 1e-3
        worst_overall["global-kl"] = worst

        # local KL through a 5-step recurrent chain
        lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3),
                                 dist.LatentBlockSpec(dist.Family.GAUSSIAN, 2)])
        worst = 0.0
        for draw in range(20):
            rng = np.random.default_rng(50_000 + 19 * draw)
            enc = encoders.LocalEncoder(6, lspec, (8,), 5, rng)
            blocks = rng.normal(size=(2, 5, 6))

            def seq():
                return enc.run_sequence(blocks, np.random.default_rng(60_000 + draw))

            def lloss():
                s = seq()
                return encoders.local_kl_total(s["posteriors"], s["priors"])

            def lback():
                s = seq()
                val = encoders.local_kl_total(s["posteriors"], s["priors"])
                dposts, dpriors = encoders.local_kl_backward(s["posteriors"], s["priors"])
                enc.sequence_backward(s, None, dposts, dpriors)
                return val

            worst = max(worst, nn.gradient_check(enc.modules, lloss, lback, rng,
                                                 n_directions=4, n_coords=6))
        assert worst < 1e-4
        worst_overall["local-kl-5step"] = worst

        # dirichlet pathwise sampling (implicit gradients, 1e-3)
        worst = 0.0
        for draw in range(20):
            rng = np.random.default_rng(70_000 + 23 * draw)
            params = random_params(dist.Family.DIRICHLET, 3, rng)
            noise = dist.draw_base_noise(dist.LatentBlockSpec(dist.Family.DIRICHLET, 3), rng)
            w = rng.normal(size=3)
            z, cache = dist.sample_with_cache(params, noise)
            grad = dist.sample_backward(cache, w)
            eps = 1e-5
            for j in range(3):
                c = params.conc.copy()
                c[j] += eps
                hi = float(w @ dist.sample(dist.PosteriorParams.dirichlet(c), noise))
                c[j] -= 2 * eps
                lo = float(w @ dist.sample(dist.PosteriorParams.dirichlet(c), noise))
                fd = (hi - lo) / (2 * eps)
                denom = max(abs(fd), abs(grad.conc[j]), 1e-8)
                worst = max(worst, abs(fd - grad.conc[j]) / denom)
        assert worst < 1e-3
        worst_overall["dirichlet-pathwise"] = worst

        elapsed = time.time() - t0
        assert elapsed < 300.0
        detail = ", ".join(f"{k}={v:.1e}" for k, v in worst_overall.items())
        report("criterion 2 (gradient suite)", f"in {elapsed:.1f}s; worst rel errs: {detail}")


# ---------------------------------------------------------------------------
# criterion 3: KL decomposition bookkeeping (1e-9 on 10 random batches)
# ---------------------------------------------------------------------------

class TestCriterion3Decomposition:
    def test_logged_kl_matches_recomputation(self):
        gspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.DIRICHLET, 3)] * 2)
        lspec = dist.LatentSpec([dist.LatentBlockSpec(dist.Family.CATEGORICAL, 3)] * 2)
        cfg = meta.MetaConfig(global_spec=gspec, local_spec=lspec, mode="ocean",
                              epochs=1, sac_iters_per_epoch=1, k_trajs=2,
                              batch_episodes=2, tr=5, n_context=8, context_window=200,
                              hidden=(16,), recurrent_hidden=8, beta=0.1)
        train, _ = envs.sample_tasks("velocity", 1, 1, 20,
                                     {"min_goal": -1.0, "max_goal": 3.0},
                                     np.random.default_rng(3))
        agent = meta.Agent(cfg, "velocity", np.random.default_rng(3))
        buf = sac.ReplayBuffer(cfg.buffer_capacity)
        rng = np.random.default_rng(4)
        meta.traj_collect(agent, train[0], buf, 4, rng)
        gpriors = [dist.prior_params(b) for b in gspec.blocks]
        worst = 0.0
        for _ in range(10):
            agent.zero_grads()
            info = meta.task_update(agent, buf, rng)
            seq = info["seq"]
            recomputed = info["beta"] * encoders.joint_kl(
                info["global_posteriors"], gpriors, seq["posteriors"], seq["priors"])
            worst = max(worst, abs(info["kl_total"] - recomputed))
        assert worst < 1e-9
        report("criterion 3 (KL decomposition)", f"max deviation {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 7: byte-identical determinism
# ---------------------------------------------------------------------------

class TestCriterion7Determinism:
    def test_two_runs_byte_identical(self, tmp_path):
        cfg_text = """
seeds: [9]
epochs: 2
sac_iters_per_epoch: 3
k_trajs: 2
batch_episodes: 2
tr: 5
n_context: 8
test_episodes: 2
hidden: [8]
recurrent_hidden: 6
env: {family: velocity, horizon: 15, n_train_tasks: 2, n_test_tasks: 1}
"""
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(cfg_text)
        blobs = []
        for name in ("runA", "runB"):
            out = tmp_path / name
            rc = cli.main(["train", "--config", str(cfg_path), "--output-dir", str(out)])
            assert rc == 0
            blobs.append((out / "seed9" / "metrics.csv").read_bytes())
        assert blobs[0] == blobs[1]
        report("criterion 7 (determinism)", f"{len(blobs[0])} identical bytes")
