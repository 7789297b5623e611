import io

import numpy as np
import pytest

from oracles import gradient_check, naive_forward, pair_loss, relative_error
from tdfmatch.net import (
    RELU,
    CheckpointError,
    DivergenceError,
    NetworkSpec,
    Parameters,
    ShapeError,
    TrainConfig,
    backward,
    contrastive_loss,
    conv,
    default_spec,
    desk_spec,
    describe_batch,
    forward,
    init_xavier,
    load_checkpoint,
    pool,
    quantize,
    save_checkpoint,
    siamese_loss_and_grads,
    train,
    train_step,
    xavier_bound,
)


def tiny_spec():
    # 8³ → conv 3³×4 → 6³ → pool 2 → 3³ → conv 3³×8 → 1³: 8-dim descriptor
    return NetworkSpec((conv(3, 4), RELU, pool(2, 2), conv(3, 8), RELU), descriptor_dim=8, input_dim=8)


class TestSpec:
    def test_default_architecture(self):
        spec = default_spec()
        kinds = [layer.kind for layer in spec.layers]
        assert kinds.count("conv3d") == 8 and kinds.count("maxpool3d") == 1
        assert spec.shapes()[-1] == (512, 1, 1, 1)
        assert spec.layers[-1].kind == "relu"
        assert default_spec(final_relu=False).layers[-1].kind == "conv3d"

    def test_desk_architecture(self):
        spec = desk_spec()
        assert sum(layer.kind == "conv3d" for layer in spec.layers) == 4
        assert spec.descriptor_dim == 64

    def test_text_roundtrip(self):
        for spec in (default_spec(), desk_spec(False), tiny_spec()):
            assert NetworkSpec.from_text(spec.to_text()) == spec

    def test_descriptor_dim_mismatch(self):
        with pytest.raises(ShapeError):
            NetworkSpec((conv(3, 4),), descriptor_dim=5, input_dim=3)

    def test_kernel_too_large_names_layer(self):
        with pytest.raises(ShapeError, match="layer 1"):
            NetworkSpec((conv(3, 2), conv(5, 2)), descriptor_dim=2, input_dim=5)

    def test_invalid_layer(self):
        with pytest.raises(ValueError):
            conv(0, 3)
        with pytest.raises(ValueError):
            conv(3, 3, stride=0)


class TestInit:
    def test_biases_zero_and_weights_bounded(self):
        spec = default_spec()
        p = init_xavier(spec, 3)
        assert all(np.all(b == 0) for b in p.biases)
        for i, w in enumerate(p.weights):
            assert np.abs(w).max() <= xavier_bound(spec, i)
        p.check(spec)

    def test_deterministic(self):
        a, b = init_xavier(desk_spec(), 7), init_xavier(desk_spec(), 7)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        c = init_xavier(desk_spec(), 8)
        assert not np.array_equal(a.weights[0], c.weights[0])


class TestForward:
    def test_zero_weights_zero_input(self):
        spec = tiny_spec()
        p = init_xavier(spec)
        p.weights = [np.zeros_like(w) for w in p.weights]
        out, _ = forward(spec, p, np.zeros((8, 8, 8)))
        assert np.all(out == 0)

    def test_single_unit_conv(self):
        spec = NetworkSpec((conv(1, 1),), descriptor_dim=27, input_dim=3)
        p = Parameters([np.full((1, 1, 1, 1, 1), 2.5)], [np.array([-0.75])])
        v = np.random.default_rng(0).random((3, 3, 3))
        out, _ = forward(spec, p, v)
        # x-fastest flattening
        np.testing.assert_array_equal(out[0], (v * 2.5 - 0.75).ravel(order="F"))

    def test_matches_loop_nest_oracle(self):
        spec = NetworkSpec((conv(3, 2), RELU, pool(2, 2)), descriptor_dim=2, input_dim=4)
        rng = np.random.default_rng(1)
        for _ in range(5):
            p = init_xavier(spec, int(rng.integers(1 << 30)))
            p.biases = [rng.normal(size=b.shape) * 0.1 for b in p.biases]
            x = rng.random((4, 4, 4))
            out, _ = forward(spec, p, x)
            assert np.max(np.abs(out[0] - naive_forward(spec, p, x))) <= 1e-12

    def test_strided_conv_matches_oracle(self):
        spec = NetworkSpec((conv(2, 3, stride=2), RELU, conv(3, 2)), descriptor_dim=2, input_dim=7)
        rng = np.random.default_rng(2)
        p = init_xavier(spec, 4)
        x = rng.random((7, 7, 7))
        out, _ = forward(spec, p, x)
        assert np.max(np.abs(out[0] - naive_forward(spec, p, x))) <= 1e-12

    def test_shape_mismatch_names_layer(self):
        spec = tiny_spec()
        with pytest.raises(ShapeError, match="layer 0"):
            forward(spec, init_xavier(spec), np.zeros((9, 9, 9)))

    def test_pool_ties_route_to_lowest_linear_index(self):
        spec = NetworkSpec((pool(2, 2),), descriptor_dim=1, input_dim=2)
        p = Parameters([], [])
        x = np.ones((2, 2, 2))
        out, cache = forward(spec, p, x)
        g = backward(spec, p, cache, np.ones((1, 1)), need_input=True).input[0, 0]
        expected = np.zeros((2, 2, 2))
        expected[0, 0, 0] = 1
        np.testing.assert_array_equal(g, expected)
        # a tie between linear index 1 (x=1) and 2 (y=1) goes to index 1
        x = np.zeros((2, 2, 2))
        x[1, 0, 0] = x[0, 1, 0] = 3.0
        _, cache = forward(spec, p, x)
        g = backward(spec, p, cache, np.ones((1, 1)), need_input=True).input[0, 0]
        assert g[1, 0, 0] == 1 and g.sum() == 1


class TestDescribe:
    def test_batch_independence(self):
        spec = desk_spec()
        p = init_xavier(spec, 0)
        rng = np.random.default_rng(0)
        grids = rng.random((5, 1, 30, 30, 30))
        grids[3] = grids[1]
        many = describe_batch(spec, p, grids)
        assert np.array_equal(many[1], many[3])
        for i in range(5):
            assert np.array_equal(describe_batch(spec, p, grids[i, 0])[0], many[i])
        np.testing.assert_allclose(many, forward(spec, p, grids)[0], rtol=1e-12, atol=1e-14)
        # a 4D array is a stack of grids, as in train()
        assert np.array_equal(describe_batch(spec, p, grids[:, 0]), many)


class TestContrastiveLoss:
    def test_equal_match(self):
        d = np.array([0.3, -0.2])
        loss, g1, g2 = contrastive_loss(d, d, True)
        assert loss == 0 and not g1.any() and not g2.any()

    def test_non_match_beyond_margin(self):
        loss, g1, g2 = contrastive_loss([0, 0], [1.5, 0], False, 1.0)
        assert loss == 0 and not g1.any() and not g2.any()
        loss, g1, _ = contrastive_loss([0, 0], [1.0, 0], False, 1.0)
        assert loss == 0 and not g1.any()

    def test_non_match_hand_value(self):
        loss, g1, g2 = contrastive_loss([0, 0], [0.5, 0], False, 1.0)
        assert loss == pytest.approx(0.125, abs=1e-15)
        # dL/dd1 = -(m - D) (d1 - d2)/D
        np.testing.assert_allclose(g1, [0.5, 0], atol=1e-15)
        np.testing.assert_allclose(g2, -g1)

    def test_non_match_at_zero_distance_uses_zero_subgradient(self):
        loss, g1, g2 = contrastive_loss([1, 2], [1, 2], False, 1.0)
        assert loss == 0.5 and not g1.any() and not g2.any()

    def test_match_gradient(self):
        loss, g1, g2 = contrastive_loss([1.0, 2.0], [0.0, 0.0], True)
        assert loss == pytest.approx(2.5, abs=1e-15)
        np.testing.assert_array_equal(g1, [1, 2])
        np.testing.assert_array_equal(g2, [-1, -2])

    def test_zero_loss_iff(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(100, 4)), rng.normal(size=(100, 4)) * 0.5
        d = np.linalg.norm(a - b, axis=1)
        loss, _, _ = contrastive_loss(a, b, np.zeros(100, bool), 1.0)
        assert np.array_equal(loss == 0, d >= 1.0)
        loss, _, _ = contrastive_loss(a, b, np.ones(100, bool))
        assert np.all(loss > 0)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        lab = rng.random(10) < 0.5
        l1, g1, g2 = contrastive_loss(a, b, lab, 3.0)
        l2, h1, h2 = contrastive_loss(b, a, lab, 3.0)
        np.testing.assert_array_equal(l1, l2)
        np.testing.assert_array_equal(g1, h2)
        np.testing.assert_array_equal(g2, h1)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        for label, margin in ((True, 1.0), (False, 5.0)):
            d1, d2 = rng.normal(size=6), rng.normal(size=6)
            _, g1, _ = contrastive_loss(d1, d2, label, margin)
            for i in range(6):
                e = np.zeros(6)
                e[i] = 1e-6
                num = (contrastive_loss(d1 + e, d2, label, margin)[0]
                       - contrastive_loss(d1 - e, d2, label, margin)[0]) / 2e-6
                assert relative_error(g1[i], num) <= 1e-6


class TestBackward:
    def test_zero_upstream_gradient(self):
        spec = tiny_spec()
        p = init_xavier(spec, 1)
        _, cache = forward(spec, p, np.random.default_rng(0).random((2, 1, 8, 8, 8)))
        g = backward(spec, p, cache, np.zeros((2, 8)), need_input=True)
        assert all(not w.any() for w in g.weights + g.biases) and not g.input.any()

    def test_single_parameter_net(self):
        spec = NetworkSpec((conv(1, 1),), descriptor_dim=8, input_dim=2)
        rng = np.random.default_rng(0)
        xa, xb = rng.random((1, 1, 2, 2, 2)), rng.random((1, 1, 2, 2, 2))
        p = Parameters([np.full((1, 1, 1, 1, 1), 0.7)], [np.zeros(1)])
        for label, margin in ((True, 1.0), (False, 10.0)):
            lab = np.array([label])
            _, grads = siamese_loss_and_grads(spec, p, xa, xb, lab, margin)
            eps = 1e-4
            p.weights[0][...] = 0.7 + eps
            up = pair_loss(spec, p, xa, xb, lab, margin)
            p.weights[0][...] = 0.7 - eps
            down = pair_loss(spec, p, xa, xb, lab, margin)
            p.weights[0][...] = 0.7
            assert abs(grads.weights[0].item() - (up - down) / (2 * eps)) <= 1e-6

    def test_tiny_net_gradients(self):
        spec = tiny_spec()
        rng = np.random.default_rng(3)
        p = init_xavier(spec, 5)
        p.biases = [rng.normal(size=b.shape) * 0.05 for b in p.biases]
        xa, xb = rng.random((2, 1, 8, 8, 8)), rng.random((2, 1, 8, 8, 8))
        worst, checked, _ = gradient_check(spec, p, xa, xb, np.array([True, False]), margin=10.0)
        assert checked >= 200  # both 100-weight layers plus the smooth biases
        assert worst <= 1e-4

    def test_input_gradient(self):
        spec = tiny_spec()
        rng = np.random.default_rng(4)
        p = init_xavier(spec, 6)
        x = rng.random((1, 1, 8, 8, 8))
        up = rng.normal(size=(1, 8))
        _, cache = forward(spec, p, x)
        gin = backward(spec, p, cache, up, need_input=True).input
        for idx in rng.choice(512, 30, replace=False):
            i = np.unravel_index(idx, (8, 8, 8))
            xp, xm = x.copy(), x.copy()
            xp[0, 0][i] += 1e-4
            xm[0, 0][i] -= 1e-4
            num = (forward(spec, p, xp)[0] @ up[0] - forward(spec, p, xm)[0] @ up[0]).item() / 2e-4
            assert relative_error(gin[0, 0][i], num) <= 1e-4

    def test_cache_mismatch(self):
        spec = tiny_spec()
        p = init_xavier(spec)
        _, cache = forward(spec, p, np.zeros((8, 8, 8)))
        other = NetworkSpec((conv(3, 4), RELU, pool(2, 2), conv(3, 8)), descriptor_dim=8, input_dim=8)
        with pytest.raises(ShapeError):
            backward(other, p, cache, np.zeros((1, 8)))


def planes_and_corners(n, rng, dim=8):
    """Distance-like grids: half planes (class 0) and corners (class 1)."""
    c = np.arange(dim) + 0.5 - dim / 2
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    out = []
    for k in range(n):
        off = rng.normal(scale=0.3, size=3)
        if k % 2 == 0:
            d = np.abs(z - off[2])
        else:
            d = np.minimum(np.abs(x - off[0]), np.minimum(np.abs(y - off[1]), np.abs(z - off[2])))
        out.append(1 - np.minimum(d / 3, 1))
    return np.stack(out)


class TestTraining:
    def setup_method(self):
        self.spec = tiny_spec()
        self.params = init_xavier(self.spec, 0)
        rng = np.random.default_rng(0)
        self.a = planes_and_corners(4, rng)[:, None]
        self.b = planes_and_corners(4, rng)[:, None]
        self.b[2:] = self.b[2:][::-1]  # pairs 2,3 now mix classes
        self.labels = np.array([True, True, False, False])

    def test_zero_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.0, batch_size=4)
        new, loss = train_step(self.spec, self.params, self.a, self.b, self.labels, cfg)
        assert np.isfinite(loss) and loss > 0
        assert all(np.array_equal(x, y) for x, y in zip(new.weights, self.params.weights))

    def test_identical_pairs_only_decay(self):
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.01, batch_size=2)
        a = np.concatenate([self.a[:1], self.a[:1]])
        # the non-match sits beyond the margin so it also has zero loss
        p = self.params.copy()
        p.weights = [w * 50 for w in p.weights]
        b = np.concatenate([self.a[:1], self.a[1:2]])
        d = describe_batch(self.spec, p, np.concatenate([a, b]))
        assert np.linalg.norm(d[1] - d[3]) >= 1.0
        new, loss = train_step(self.spec, p, a, b, np.array([True, False]), cfg)
        assert loss == 0
        for w0, w1 in zip(p.weights, new.weights):
            np.testing.assert_allclose(w1, w0 * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_weight_decay_shrinks_norm(self):
        cfg = TrainConfig(learning_rate=0.5, momentum=0.0, weight_decay=0.1, batch_size=2)
        zero = np.zeros_like(self.a[:2])
        p = self.params
        for _ in range(5):
            # zero input + zero bias → equal descriptors: zero data gradient for the match;
            # the non-match is at D = 0 where the zero subgradient applies
            new, _ = train_step(self.spec, p, zero, zero, np.array([True, False]), cfg)
            assert new.norm() < p.norm()
            p = new

    def test_unbalanced_batch_rejected(self):
        with pytest.raises(ValueError):
            train_step(self.spec, self.params, self.a, self.b, np.array([True, True, True, False]), TrainConfig(batch_size=4))

    def test_divergence(self):
        p = self.params.copy()
        p.weights[0][0, 0, 0, 0, 0] = np.inf
        before = p.copy()
        with pytest.raises(DivergenceError, match="divergence"):
            train_step(self.spec, p, self.a, self.b, self.labels, TrainConfig(batch_size=4))
        assert all(np.array_equal(x, y) for x, y in zip(p.weights[1:], before.weights[1:]))

    def test_siamese_swap_symmetry(self):
        l1, g1 = siamese_loss_and_grads(self.spec, self.params, self.a, self.b, self.labels, 1.0)
        l2, g2 = siamese_loss_and_grads(self.spec, self.params, self.b, self.a, self.labels, 1.0)
        assert l1 == pytest.approx(l2, rel=1e-12)
        for x, y in zip(g1.weights, g2.weights):
            np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-14)

    def test_loss_decreases_on_planes_vs_corners(self):
        rng = np.random.default_rng(1)
        a = planes_and_corners(40, rng)
        b = planes_and_corners(40, rng)
        labels = np.arange(40) % 4 < 2
        # non-matches pair a plane with a corner
        for i in np.flatnonzero(~labels):
            b[i] = planes_and_corners(2, rng)[(i + 1) % 2]
        cfg = TrainConfig(learning_rate=1e-3, momentum=0.9, batch_size=8, max_iterations=200, seed=0)
        spec = tiny_spec()
        p0 = init_xavier(spec, 1)
        initial = pair_loss(spec, p0, a[:, None], b[:, None], labels, 1.0)
        p, losses = train(spec, p0, a, b, labels, cfg)
        assert pair_loss(spec, p, a[:, None], b[:, None], labels, 1.0) < initial
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_deterministic_trajectory_and_log(self):
        cfg = TrainConfig(batch_size=4, max_iterations=5, seed=3)
        logs = [io.StringIO(), io.StringIO()]
        runs = [train(self.spec, self.params, self.a, self.b, self.labels, cfg, log=log) for log in logs]
        assert runs[0][1] == runs[1][1]
        assert all(np.array_equal(x, y) for x, y in zip(runs[0][0].weights, runs[1][0].weights))
        lines = logs[0].getvalue().splitlines()
        assert len(lines) == 5
        parts = lines[0].split()
        assert parts[0] == "iter" and parts[1] == "1" and parts[2] == "loss" and parts[4] == "time_ms"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=3)
        with pytest.raises(ValueError):
            TrainConfig(contrastive_margin=0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        spec = desk_spec()
        p = quantize(init_xavier(spec, 2))
        p.biases = [np.float32(0.25) * np.arange(len(b)) for b in p.biases]
        p = quantize(p)
        save_checkpoint(tmp_path / "c.3dmc", spec, p)
        spec2, q = load_checkpoint(tmp_path / "c.3dmc")
        assert spec2 == spec
        for x, y in zip(p.weights + p.biases, q.weights + q.biases):
            assert x.tobytes() == y.tobytes()
        grids = list(np.random.default_rng(0).random((3, 30, 30, 30)))
        np.testing.assert_array_equal(describe_batch(spec, p, grids), describe_batch(spec2, q, grids))

    def test_quantize_is_what_loading_returns(self, tmp_path):
        spec = tiny_spec()
        p = init_xavier(spec, 9)
        save_checkpoint(tmp_path / "c", spec, p)
        _, q = load_checkpoint(tmp_path / "c")
        assert all(np.array_equal(x, y) for x, y in zip(quantize(p).weights, q.weights))

    def test_weight_order_x_fastest(self, tmp_path):
        spec = NetworkSpec((conv(2, 1),), descriptor_dim=1, input_dim=2)
        w = np.zeros((1, 1, 2, 2, 2))
        w[0, 0, 1, 0, 0] = 1.0  # x = 1 → second value
        save_checkpoint(tmp_path / "c", spec, Parameters([w], [np.zeros(1)]))
        data = (tmp_path / "c").read_bytes()
        n = int.from_bytes(data[8:12], "little")
        vals = np.frombuffer(data[12 + n:], "<f4")
        np.testing.assert_array_equal(vals, [0, 1, 0, 0, 0, 0, 0, 0, 0])

    def test_layer_count_mismatch(self, tmp_path):
        spec = tiny_spec()
        save_checkpoint(tmp_path / "c", spec, init_xavier(spec))
        data = (tmp_path / "c").read_bytes()
        (tmp_path / "short").write_bytes(data[:-4 * 8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "short")
        (tmp_path / "long").write_bytes(data + bytes(16))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "long")

    def test_bad_magic_and_version(self, tmp_path):
        spec = tiny_spec()
        save_checkpoint(tmp_path / "c", spec, init_xavier(spec))
        data = bytearray((tmp_path / "c").read_bytes())
        (tmp_path / "m").write_bytes(b"NOPE" + bytes(data[4:]))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "m")
        data[4] = 2
        (tmp_path / "v").write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v")

    def test_parameter_shape_mismatch(self):
        spec = tiny_spec()
        p = init_xavier(desk_spec())
        with pytest.raises(ShapeError):
            p.check(spec)
