"""Global and local context encoders producing the joint latent sample.

The global encoder maps each transition independently to per-block posterior
parameters and fuses them with the weighted product; the local encoder is a
variational recurrent model (inference net, gated transition cell, conditional
prior net) updated online at a configurable temporal resolution. Both expose
explicit backward passes so critic and KL gradients can be pushed into their
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import distributions as dist
from . import nn

_HEAD_FOR_FAMILY = {
    dist.Family.GAUSSIAN: "gaussian",
    dist.Family.LOGIT_NORMAL: "gaussian",
    dist.Family.CATEGORICAL: "softmax",
    dist.Family.DIRICHLET: "concentration",
}


@dataclass
class Transition:
    """One environment step, the atomic context unit."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


def transition_features(s, a, r, s_next, reward_scale: float = 1.0) -> np.ndarray:
    """Flatten a transition as [s, a, r, s']."""
    return np.concatenate([np.atleast_1d(s), np.atleast_1d(a),
                           [float(r) * reward_scale], np.atleast_1d(s_next)])


def episode_features(s, a, r, s_next, reward_scale: float = 1.0) -> np.ndarray:
    """Vectorized [s, a, r, s'] featurization over step arrays (any batch rank)."""
    return np.concatenate([s, a, reward_scale * np.asarray(r, float)[..., None], s_next],
                          axis=-1)


def feature_dim(state_dim: int, action_dim: int) -> int:
    return 2 * state_dim + action_dim + 1


def block_dim(state_dim: int, action_dim: int, tr: int) -> int:
    # tr slots of [features, validity flag]
    return tr * (feature_dim(state_dim, action_dim) + 1)


def build_blocks(feats: np.ndarray, tr: int) -> np.ndarray:
    """Context blocks for a batch of episodes.

    ``feats`` is (B, T, F). Block j covers the tr transitions preceding acting
    step j*tr, oldest first, each slot carrying a validity flag; the first
    block is all padding. Returns (B, ceil(T/tr), tr*(F+1)).
    """
    if feats.ndim != 3:
        raise ValueError("feats must be (B, T, F)")
    B, T, F = feats.shape
    n_steps = -(-T // tr)
    padded = np.zeros((B, T + tr, F + 1))
    padded[:, tr:, :F] = feats
    padded[:, tr:, F] = 1.0
    usable = padded[:, : n_steps * tr]
    return usable.reshape(B, n_steps, tr * (F + 1))


def _block_mean(params: dist.PosteriorParams) -> np.ndarray:
    fam = params.family
    if fam is dist.Family.GAUSSIAN:
        return params.mean
    if fam is dist.Family.CATEGORICAL:
        return params.probs
    if fam is dist.Family.DIRICHLET:
        return params.conc / params.conc.sum(axis=-1, keepdims=True)
    raise ValueError("mean feedback is not supported for logit-normal blocks")


def _block_mean_backward(params: dist.PosteriorParams, dz: np.ndarray) -> dist.PosteriorParams:
    fam = params.family
    if fam is dist.Family.GAUSSIAN:
        return dist.PosteriorParams(fam, mean=dz.copy(), var=np.zeros_like(dz))
    if fam is dist.Family.CATEGORICAL:
        return dist.PosteriorParams.categorical(dz.copy())
    if fam is dist.Family.DIRICHLET:
        tot = params.conc.sum(axis=-1, keepdims=True)
        m = params.conc / tot
        return dist.PosteriorParams.dirichlet((dz - (dz * m).sum(axis=-1, keepdims=True)) / tot)
    raise ValueError("mean feedback is not supported for logit-normal blocks")


class GlobalEncoder:
    """Per-context inference MLPs (one per global block) fused across contexts."""

    def __init__(self, transition_dim: int, spec: dist.LatentSpec,
                 hidden: tuple[int, ...], rng: np.random.Generator,
                 dirichlet_fusion: str = "paper"):
        self.spec = spec
        self.dirichlet_fusion = dirichlet_fusion
        self.nets = [
            nn.MLP(nn.MLPConfig(transition_dim, b.dim, hidden=hidden,
                                head=_HEAD_FOR_FAMILY[b.family]), rng)
            for b in spec.blocks
        ]

    @property
    def modules(self) -> list[nn.Module]:
        return list(self.nets)

    def prior(self) -> list[dist.PosteriorParams]:
        return [dist.prior_params(b) for b in self.spec.blocks]

    def infer(self, contexts: np.ndarray):
        posts, _ = self.infer_with_cache(contexts)
        return posts

    def infer_with_cache(self, contexts: np.ndarray):
        """Fused posterior per block from an (n, feature) context matrix."""
        contexts = np.asarray(contexts, float)
        if contexts.ndim != 2 or contexts.shape[0] == 0:
            raise ValueError("contexts must be a nonempty (n, feature) matrix")
        posts, caches = [], []
        for block, net in zip(self.spec.blocks, self.nets):
            out, net_cache = net.forward(contexts)
            per_ctx = _params_from_head(block.family, out)
            singles = _unstack_params(per_ctx, contexts.shape[0])
            fused, fuse_cache = dist.fuse_with_cache(singles, self.dirichlet_fusion)
            posts.append(fused)
            caches.append((net_cache, fuse_cache))
        return posts, caches

    def backward(self, caches, grads: list[dist.PosteriorParams | None]) -> None:
        """Push fused-posterior gradients back into the per-block MLPs."""
        for (net_cache, fuse_cache), grad, block, net in zip(caches, grads, self.spec.blocks, self.nets):
            if grad is None:
                continue
            per_ctx = dist.fuse_backward(fuse_cache, grad)
            stacked = _stack_params(per_ctx)
            net.backward(net_cache, _head_grad(block.family, stacked))


def _params_from_head(family: dist.Family, out) -> dist.PosteriorParams:
    if family in (dist.Family.GAUSSIAN, dist.Family.LOGIT_NORMAL):
        mean, var = out
        return dist.PosteriorParams(family, mean=mean, var=var)
    if family is dist.Family.CATEGORICAL:
        return dist.PosteriorParams.categorical(out)
    return dist.PosteriorParams.dirichlet(out)


def _head_grad(family: dist.Family, grad: dist.PosteriorParams):
    if family in (dist.Family.GAUSSIAN, dist.Family.LOGIT_NORMAL):
        return grad.mean, grad.var
    if family is dist.Family.CATEGORICAL:
        return grad.probs
    return grad.conc


def _unstack_params(batched: dist.PosteriorParams, n: int) -> list[dist.PosteriorParams]:
    pick = lambda arr, i: None if arr is None else arr[i]
    return [dist.PosteriorParams(batched.family, pick(batched.mean, i), pick(batched.var, i),
                                 pick(batched.probs, i), pick(batched.conc, i)) for i in range(n)]


def _stack_params(singles: list[dist.PosteriorParams]) -> dist.PosteriorParams:
    f = singles[0]
    stk = lambda name: (None if getattr(f, name) is None
                        else np.stack([getattr(s, name) for s in singles]))
    return dist.PosteriorParams(f.family, stk("mean"), stk("var"), stk("probs"), stk("conc"))


@dataclass
class LocalState:
    """Recurrent inference state: hidden vector, current latent, step index."""

    h: np.ndarray
    z: np.ndarray
    t: int
    posteriors: list | None = None
    priors: list | None = None


class LocalEncoder:
    """Variational recurrent local encoder: q_enc, gated q_tran, q_prior.

    One update consumes the block of the last ``tr`` transitions: the cell
    advances the hidden state from the block and the previous latent sample,
    the inference net emits the new posterior from the block and the updated
    hidden state, and the conditional prior is read from the pre-update hidden
    state. ``rnn_mode`` turns off stochastic conditioning (the cell ignores
    the latent) and replaces every conditional prior with the uninformative
    one.
    """

    def __init__(self, block_feat_dim: int, spec: dist.LatentSpec,
                 hidden: tuple[int, ...], recurrent_dim: int, rng: np.random.Generator,
                 rnn_mode: bool = False, feed_posterior_mean: bool = False):
        self.spec = spec
        self.block_feat_dim = block_feat_dim
        self.recurrent_dim = recurrent_dim
        self.rnn_mode = rnn_mode
        self.feed_posterior_mean = feed_posterior_mean
        self.cell = nn.GatedCell(
            nn.RecurrentCellConfig(block_feat_dim + spec.total_dim, recurrent_dim), rng)
        self.enc_nets = [
            nn.MLP(nn.MLPConfig(block_feat_dim + recurrent_dim, b.dim, hidden=hidden,
                                head=_HEAD_FOR_FAMILY[b.family]), rng)
            for b in spec.blocks
        ]
        self.prior_nets = [
            nn.MLP(nn.MLPConfig(recurrent_dim, b.dim, hidden=hidden,
                                head=_HEAD_FOR_FAMILY[b.family]), rng)
            for b in spec.blocks
        ]

    @property
    def modules(self) -> list[nn.Module]:
        mods = [self.cell, *self.enc_nets]
        if not self.rnn_mode:
            mods += self.prior_nets
        return mods

    def uninformative_priors(self, batch_shape=()) -> list[dist.PosteriorParams]:
        return [dist.prior_params(b, batch_shape) for b in self.spec.blocks]

    def init_state(self, rng: np.random.Generator | None = None,
                   batch_shape: tuple = (), noises: list | None = None) -> LocalState:
        """Zero hidden state and a latent drawn from the uninformative prior."""
        priors = self.uninformative_priors(batch_shape)
        segs = []
        for i, (block, p) in enumerate(zip(self.spec.blocks, priors)):
            noise = noises[i] if noises is not None else dist.draw_base_noise(block, rng, batch_shape)
            segs.append(dist.sample(p, noise, block.temperature))
        return LocalState(h=np.zeros(tuple(batch_shape) + (self.recurrent_dim,)),
                          z=dist.LatentSpec.concat(segs), t=0,
                          posteriors=priors, priors=priors)

    def step(self, state: LocalState, block_feats: np.ndarray,
             rng: np.random.Generator | None = None, noises: list | None = None,
             tr: int = 1):
        """One local update; returns (new_state, posteriors, priors, cache)."""
        block_feats = np.asarray(block_feats, float)
        if not np.all(np.isfinite(block_feats)):
            raise ValueError("non-finite context block")
        if block_feats.shape[-1] != self.block_feat_dim:
            raise ValueError(f"block dim {block_feats.shape[-1]} != {self.block_feat_dim}")
        batch_shape = block_feats.shape[:-1]

        z_prev = state.z
        z_feed = np.zeros_like(z_prev) if self.rnn_mode else z_prev
        x = np.concatenate([block_feats, z_feed], axis=-1)
        h_next, cell_cache = self.cell.step(x, state.h)

        enc_in = np.concatenate([block_feats, h_next], axis=-1)
        posts, priors, enc_caches, prior_caches, sample_caches, segs = [], [], [], [], [], []
        for i, block in enumerate(self.spec.blocks):
            out, ec = self.enc_nets[i].forward(enc_in)
            post = _params_from_head(block.family, out)
            if self.rnn_mode:
                prior, pc = dist.prior_params(block, batch_shape), None
            else:
                pout, pc = self.prior_nets[i].forward(state.h)
                prior = _params_from_head(block.family, pout)
            if self.feed_posterior_mean:
                seg, sc = _block_mean(post), ("mean", post)
            else:
                noise = noises[i] if noises is not None else dist.draw_base_noise(block, rng, batch_shape)
                seg, sc = dist.sample_with_cache(post, noise, block.temperature)
            posts.append(post)
            priors.append(prior)
            enc_caches.append(ec)
            prior_caches.append(pc)
            sample_caches.append(sc)
            segs.append(seg)

        new_state = LocalState(h=h_next, z=dist.LatentSpec.concat(segs), t=state.t + tr,
                               posteriors=posts, priors=priors)
        cache = (cell_cache, enc_caches, prior_caches, sample_caches)
        return new_state, posts, priors, cache

    # -- batched training pass over whole episodes ---------------------------

    def run_sequence(self, blocks: np.ndarray, rng: np.random.Generator,
                     tr: int = 1, init_noises: list | None = None):
        """Latent inference over (B, N, block_feat) context blocks.

        Returns a dict with per-step latents ``z`` (B, N, total_dim),
        posteriors/priors (lists over steps of per-block params), and the
        caches needed by ``sequence_backward``.
        """
        B, N, _ = blocks.shape
        state = self.init_state(rng, batch_shape=(B,), noises=init_noises)
        zs, posts, priors, caches = [], [], [], []
        for j in range(N):
            state, post, prior, cache = self.step(state, blocks[:, j], rng=rng, tr=tr)
            zs.append(state.z)
            posts.append(post)
            priors.append(prior)
            caches.append(cache)
        return {
            "z": np.stack(zs, axis=1),
            "posteriors": posts,
            "priors": priors,
            "caches": caches,
            "n_steps": N,
        }

    def sequence_backward(self, seq: dict, dz_steps: np.ndarray | None,
                          dposts: list | None = None, dpriors: list | None = None) -> None:
        """Backpropagate through the whole recurrence.

        ``dz_steps`` is (B, N, total_dim) gradient on the per-step latent
        samples; ``dposts``/``dpriors`` are lists over steps of per-block
        parameter gradients (entries may be None).
        """
        caches = seq["caches"]
        N = seq["n_steps"]
        offsets = self.spec.offsets
        carry_dz = None
        carry_dh = None
        for j in reversed(range(N)):
            cell_cache, enc_caches, prior_caches, sample_caches = caches[j]
            dz = None
            if dz_steps is not None:
                dz = dz_steps[:, j].copy()
            if carry_dz is not None:
                dz = carry_dz if dz is None else dz + carry_dz

            denc_in_total = None
            dh_prior_total = None
            for i, block in enumerate(self.spec.blocks):
                dpost = None if dposts is None else _maybe(dposts, j, i)
                if dz is not None:
                    seg = dz[..., offsets[i]:offsets[i] + block.dim]
                    sc = sample_caches[i]
                    if isinstance(sc, tuple) and len(sc) == 2 and sc[0] == "mean":
                        from_sample = _block_mean_backward(sc[1], seg)
                    else:
                        from_sample = dist.sample_backward(sc, seg)
                    if dpost is None:
                        dpost = from_sample
                    else:
                        dpost = dpost.copy()
                        dist.accumulate_params(dpost, from_sample)
                if dpost is not None:
                    din = self.enc_nets[i].backward(enc_caches[i],
                                                    _head_grad(block.family, dpost))
                    denc_in_total = din if denc_in_total is None else denc_in_total + din
                dprior = None if dpriors is None else _maybe(dpriors, j, i)
                if dprior is not None and not self.rnn_mode:
                    dh_p = self.prior_nets[i].backward(prior_caches[i],
                                                       _head_grad(block.family, dprior))
                    dh_prior_total = dh_p if dh_prior_total is None else dh_prior_total + dh_p

            dh_next = carry_dh
            if denc_in_total is not None:
                dh_enc = denc_in_total[..., self.block_feat_dim:]
                dh_next = dh_enc if dh_next is None else dh_next + dh_enc
            if dh_next is not None:
                dx, dh_in = self.cell.backward(cell_cache, dh_next)
                carry_dz = None if self.rnn_mode else dx[..., self.block_feat_dim:]
            else:
                dx, dh_in = None, None
                carry_dz = None
            carry_dh = dh_in
            if dh_prior_total is not None:
                carry_dh = dh_prior_total if carry_dh is None else carry_dh + dh_prior_total


def _maybe(grads, j, i):
    if grads is None or grads[j] is None:
        return None
    return grads[j][i]


# ---------------------------------------------------------------------------
# KL bookkeeping
# ---------------------------------------------------------------------------

def local_kl_total(posteriors: list, priors: list) -> float:
    """Sum of per-step, per-block KL(posterior || conditional prior).

    Batched parameters contribute the sum over the batch as well.
    """
    if len(posteriors) != len(priors):
        raise ValueError("posterior/prior step counts differ")
    total = 0.0
    for post_blocks, prior_blocks in zip(posteriors, priors):
        for q, p in zip(post_blocks, prior_blocks):
            total += float(np.sum(dist.kl(q, p)))
    return total


def local_kl_backward(posteriors: list, priors: list, gout: float = 1.0):
    """Per-step per-block gradients of ``local_kl_total`` (posterior and prior sides)."""
    dposts, dpriors = [], []
    for post_blocks, prior_blocks in zip(posteriors, priors):
        dp_step, dr_step = [], []
        for q, p in zip(post_blocks, prior_blocks):
            gq, gp = dist.kl_backward(q, p, gout)
            dp_step.append(gq)
            dr_step.append(gp)
        dposts.append(dp_step)
        dpriors.append(dr_step)
    return dposts, dpriors


def joint_kl(global_posteriors: list, global_priors: list,
             posteriors: list | None = None, priors: list | None = None) -> float:
    """Global-block KL plus the local KL sum (the two-term decomposition)."""
    total = sum(float(np.sum(dist.kl(q, p)))
                for q, p in zip(global_posteriors, global_priors))
    if posteriors:
        total += local_kl_total(posteriors, priors)
    return total
