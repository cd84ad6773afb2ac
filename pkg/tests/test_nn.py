import numpy as np
import pytest

from contextrl import nn


def make_mlp(in_dim=4, out_dim=3, hidden=(8,), head="linear", seed=0):
    return nn.MLP(nn.MLPConfig(in_dim, out_dim, hidden=hidden, head=head),
                  np.random.default_rng(seed))


class TestMLPForward:
    def test_zero_weights_zero_output(self):
        net = make_mlp()
        for p in net.params.values():
            p[...] = 0.0
        y, _ = net.forward(np.array([1.0, -2.0, 3.0, 0.5]))
        assert np.allclose(y, 0.0)

    def test_identity_single_layer(self):
        net = nn.MLP(nn.MLPConfig(3, 3, hidden=()), np.random.default_rng(0))
        net.params["w0"][...] = np.eye(3)
        net.params["b0"][...] = 0.0
        x = np.array([0.3, -1.2, 2.0])
        y, _ = net.forward(x)
        assert np.allclose(y, x)

    def test_deterministic(self):
        net = make_mlp(seed=3)
        x = np.random.default_rng(1).normal(size=(5, 4))
        y1, _ = net.forward(x)
        y2, _ = net.forward(x)
        assert np.array_equal(y1, y2)

    def test_seeded_init_reproducible(self):
        a = make_mlp(seed=11)
        b = make_mlp(seed=11)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_shape_and_finite_errors(self):
        net = make_mlp()
        with pytest.raises(ValueError):
            net.forward(np.zeros(5))
        with pytest.raises(ValueError):
            net.forward(np.array([np.inf, 0, 0, 0]))

    def test_heads(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4))
        p, _ = make_mlp(head="softmax").forward(x)
        assert np.allclose(p.sum(axis=-1), 1.0) and np.all(p > 0)
        alpha, _ = make_mlp(head="concentration").forward(x)
        assert np.all(alpha >= 1e-4)
        (mean, var), _ = make_mlp(head="gaussian").forward(x)
        assert mean.shape == var.shape == (6, 3)
        assert np.all(var >= nn.VAR_FLOOR)


class TestMLPBackward:
    def test_linear_adjoint(self):
        net = nn.MLP(nn.MLPConfig(3, 2, hidden=()), np.random.default_rng(0))
        x = np.array([0.5, -1.0, 2.0])
        _, cache = net.forward(x)
        g = np.array([1.0, -2.0])
        dx = net.backward(cache, g)
        assert np.allclose(dx, net.params["w0"].T @ g)

    def test_zero_grad_out(self):
        net = make_mlp()
        _, cache = net.forward(np.ones(4))
        net.backward(cache, np.zeros(3))
        assert all(np.allclose(g, 0.0) for g in net.grads.values())

    def test_backward_without_forward(self):
        net = make_mlp()
        with pytest.raises(ValueError):
            net.backward(None, np.zeros(3))

    @pytest.mark.parametrize("head", nn.HEADS)
    def test_finite_difference(self, head):
        rng = np.random.default_rng(5)
        net = make_mlp(head=head, seed=7)
        x = rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 3))

        def loss():
            y, _ = net.forward(x)
            if head == "gaussian":
                mean, var = y
                return float((w * mean).sum() + 0.5 * (w * var).sum())
            return float((w * y).sum())

        def backward():
            y, cache = net.forward(x)
            if head == "gaussian":
                net.backward(cache, (w, 0.5 * w))
            else:
                net.backward(cache, w)
            return loss()

        worst = nn.gradient_check([net], loss, backward, rng)
        assert worst < 1e-4

    def test_accumulate_flag_skips_param_grads(self):
        net = make_mlp()
        _, cache = net.forward(np.ones(4))
        net.backward(cache, np.ones(3), accumulate=False)
        assert all(np.allclose(g, 0.0) for g in net.grads.values())


class TestGatedCell:
    def make(self, seed=0):
        return nn.GatedCell(nn.RecurrentCellConfig(3, 4), np.random.default_rng(seed))

    def test_zero_fixed_point(self):
        cell = self.make()
        for p in cell.params.values():
            p[...] = 0.0
        h, _ = cell.step(np.zeros(3), np.zeros(4))
        assert np.allclose(h, 0.0)

    def test_deterministic(self):
        cell = self.make(2)
        x, h = np.ones(3), np.full(4, 0.2)
        h1, _ = cell.step(x, h)
        h2, _ = cell.step(x, h)
        assert np.array_equal(h1, h2)

    def test_shape_mismatch(self):
        cell = self.make()
        with pytest.raises(ValueError):
            cell.step(np.zeros(5), np.zeros(4))

    def test_chained_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        cell = self.make(4)
        xs = rng.normal(size=(10, 3))
        w = rng.normal(size=4)

        def run():
            h = np.zeros(4)
            caches = []
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

        worst = nn.gradient_check([cell], loss, backward, rng)
        assert worst < 1e-4


class TestAdam:
    def test_zero_gradients_no_change(self):
        net = make_tiny()
        before = {k: v.copy() for k, v in net.params.items()}
        opt = nn.Adam([net], lr=0.1)
        opt.step()
        assert all(np.array_equal(before[k], net.params[k]) for k in before)

    def test_first_step_bias_corrected(self):
        net = make_tiny()
        net.params["w"][...] = 0.0
        net.grads["w"][...] = 1.0
        opt = nn.Adam([net], lr=0.1)
        opt.step()
        assert abs(net.params["w"][0] + 0.1) < 1e-6

    def test_deterministic_runs(self):
        results = []
        for _ in range(2):
            net = make_mlp(seed=8)
            opt = nn.Adam([net], lr=1e-3)
            rng = np.random.default_rng(0)
            for _ in range(5):
                net.zero_grads()
                x = rng.normal(size=(3, 4))
                y, cache = net.forward(x)
                net.backward(cache, y)  # grad of 0.5*||y||^2
                opt.step()
            results.append(nn.flat_params([net]))
        assert np.array_equal(results[0], results[1])

    def test_rejects_non_finite(self):
        net = make_tiny()
        net.grads["w"][...] = np.nan
        opt = nn.Adam([net], lr=0.1)
        with pytest.raises(ValueError):
            opt.step()


def make_tiny():
    m = nn.Module()
    m._register("w", np.zeros(1))
    return m


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        nets = {"a": make_mlp(seed=1), "b": make_mlp(seed=2, head="softmax")}
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(path, nets, seed=42, extra={"note": "x"})
        fresh = {"a": make_mlp(seed=9), "b": make_mlp(seed=10, head="softmax")}
        meta = nn.load_checkpoint(path, fresh)
        assert meta["seed"] == 42
        assert meta["version"] == nn.CHECKPOINT_VERSION
        for name in nets:
            for k in nets[name].params:
                assert np.array_equal(nets[name].params[k], fresh[name].params[k])

    def test_missing_net_rejected(self, tmp_path):
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(path, {"a": make_mlp()}, seed=0)
        with pytest.raises(ValueError):
            nn.load_checkpoint(path, {"zz": make_mlp()})
