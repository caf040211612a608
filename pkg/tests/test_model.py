import numpy as np
import pytest

from snc.data import synthetic_blobs, split
from snc.errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    NumericError,
)
from snc.model import (
    ActivationKind,
    LayerSpec,
    NetworkParams,
    TrainConfig,
    activate,
    affine_forward,
    forward,
    init_network,
    layer_signals,
    load_checkpoint,
    loss_and_backward,
    resolve_layer,
    save_checkpoint,
    sgd_momentum_step,
    train,
)
from snc.model import test_error as count_test_errors

RELU = ActivationKind.relu()


def small_net(kind, widths=(8, 8), input_dim=6, classes=3, seed=0, keep=1.0):
    specs = []
    prev = input_dim
    for w in widths:
        spec = LayerSpec(prev, w, kind, dropout_keep_prob=keep)
        specs.append(spec)
        prev = spec.output_dim
    return init_network(specs, classes, seed)


class TestInit:
    def test_bound_and_zero_bias(self):
        net = init_network([LayerSpec(4, 4, RELU)], 2, seed=7)
        limit = np.sqrt(6.0 / 8.0)
        assert np.all(np.abs(net.weights[0]) <= limit)
        assert np.all(net.biases[0] == 0.0)
        assert np.all(net.out_bias == 0.0)

    def test_deterministic(self):
        a = init_network([LayerSpec(4, 4, RELU)], 2, seed=7)
        b = init_network([LayerSpec(4, 4, RELU)], 2, seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_block_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            LayerSpec(4, 10, ActivationKind.lwta(3))

    def test_dimension_chain_error_names_layers(self):
        specs = [LayerSpec(4, 8, RELU), LayerSpec(9, 8, RELU)]
        with pytest.raises(ConfigurationError, match="layer 0.*layer 1"):
            init_network(specs, 2, seed=0)

    def test_maxout_chain_uses_pooled_width(self):
        specs = [
            LayerSpec(4, 8, ActivationKind.maxout(2)),
            LayerSpec(4, 8, ActivationKind.maxout(2)),
        ]
        net = init_network(specs, 2, seed=0)
        assert net.weights[1].shape == (8, 4)


class TestAffine:
    def test_identity(self):
        z = affine_forward(np.eye(2), np.zeros(2), np.array([3.0, -1.0]))
        np.testing.assert_array_equal(z, [3.0, -1.0])

    def test_hand_computed(self):
        z = affine_forward(np.array([[1.0, 1.0]]), np.array([0.5]), np.array([1.0, 2.0]))
        np.testing.assert_allclose(z, [3.5])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(12)
        W = rng.standard_normal((8, 8))
        b = rng.standard_normal(8)
        x = rng.standard_normal(8)
        expected = np.zeros(8)
        for i in range(8):
            acc = b[i]
            for j in range(8):
                acc += W[i, j] * x[j]
            expected[i] = acc
        got = affine_forward(W, b, x)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            affine_forward(np.eye(2), np.zeros(2), np.zeros(3))


class TestActivate:
    def test_relu(self):
        np.testing.assert_array_equal(
            activate(np.array([-1.0, 2.0, 0.0]), RELU), [0.0, 2.0, 0.0]
        )

    def test_lwta_keeps_winner_value(self):
        out = activate(np.array([3.0, 1.0, -2.0, -5.0]), ActivationKind.lwta(2))
        np.testing.assert_array_equal(out, [3.0, 0.0, -2.0, 0.0])

    def test_maxout_pools_blocks(self):
        out = activate(np.array([3.0, 1.0, -2.0, -5.0]), ActivationKind.maxout(2))
        np.testing.assert_array_equal(out, [3.0, -2.0])

    def test_sigmoid(self):
        np.testing.assert_allclose(activate(np.zeros(3), ActivationKind.sigmoid()), 0.5)

    def test_bad_length(self):
        with pytest.raises(DimensionError):
            activate(np.zeros(5), ActivationKind.maxout(2))

    def test_lwta_tie_lowest_index(self):
        out = activate(np.array([2.0, 2.0]), ActivationKind.lwta(2))
        np.testing.assert_array_equal(out, [2.0, 0.0])


class TestForward:
    def test_identity_relu(self):
        net = NetworkParams(
            specs=[LayerSpec(2, 2, RELU)],
            weights=[np.eye(2)],
            biases=[np.zeros(2)],
            out_weight=np.eye(2),
            out_bias=np.zeros(2),
        )
        trace = forward(net, np.array([1.0, -1.0]))
        np.testing.assert_array_equal(trace.postact[0][0], [1.0, 0.0])

    def test_keep_one_train_equals_infer(self):
        net = small_net(RELU, seed=3)
        x = np.random.default_rng(0).standard_normal((5, 6))
        rng = np.random.default_rng(1)
        a = forward(net, x, mode="train", rng=rng)
        b = forward(net, x, mode="infer")
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_softmax_rows_sum_to_one(self):
        net = small_net(ActivationKind.maxout(2), seed=5)
        x = np.random.default_rng(8).standard_normal((100, 6))
        probs = forward(net, x).probs
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_reports_layer(self):
        net = small_net(RELU, seed=2)
        net.weights[1][0, 0] = np.inf
        with pytest.raises(NumericError, match="layer 1"):
            forward(net, np.ones(6))

    def test_input_dim_checked(self):
        net = small_net(RELU)
        with pytest.raises(DimensionError):
            forward(net, np.ones(7))

    def test_dropout_requires_rng(self):
        net = small_net(RELU, keep=0.5)
        with pytest.raises(ConfigurationError):
            forward(net, np.ones(6), mode="train")


class TestDropout:
    def test_inverted_scaling_preserves_expectation(self):
        net = NetworkParams(
            specs=[LayerSpec(4, 4, RELU, dropout_keep_prob=0.7)],
            weights=[np.eye(4)],
            biases=[np.zeros(4)],
            out_weight=np.eye(4)[:2],
            out_bias=np.zeros(2),
        )
        x = np.array([1.0, 2.0, 3.0, 4.0])
        rng = np.random.default_rng(77)
        draws = 100_000
        total = np.zeros(4)
        batch = np.tile(x, (1000, 1))
        for _ in range(draws // 1000):
            trace = forward(net, batch, mode="train", rng=rng)
            total += trace.inputs[-1].sum(axis=0)
        mean = total / draws
        np.testing.assert_allclose(mean, x, rtol=0.01)

    def test_masked_units_get_no_gradient(self):
        net = small_net(RELU, widths=(8,), keep=0.5, seed=4)
        rng = np.random.default_rng(10)
        x = np.abs(rng.standard_normal((1, 6))) + 0.5
        trace = forward(net, x, mode="train", rng=rng)
        mask = trace.drop_masks[0][0]
        _, grads = loss_and_backward(net, trace, np.array([1]))
        d_out_w = grads[-2]  # (classes, hidden) columns follow hidden units
        assert np.all(d_out_w[:, ~mask] == 0.0)


def gating_margin(net, x):
    """Distance of every gated unit from its competition boundary."""
    trace = forward(net, np.atleast_2d(x))
    margin = np.inf
    for z, spec in zip(trace.presyn, net.specs):
        kind = spec.activation
        if kind.kind == "relu":
            margin = min(margin, float(np.abs(z).min()))
        elif kind.kind in ("lwta", "maxout"):
            zb = z.reshape(z.shape[0], -1, kind.block_size)
            top2 = np.sort(zb, axis=2)[:, :, -2:]
            margin = min(margin, float((top2[:, :, 1] - top2[:, :, 0]).min()))
    return margin


def numeric_gradients(net, x, label, h=1e-5):
    grads = []
    for param in net.parameters():
        g = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + h
            lp = loss_and_backward(net, forward(net, x), np.array([label]))[0]
            param[idx] = orig - h
            lm = loss_and_backward(net, forward(net, x), np.array([label]))[0]
            param[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


class TestBackward:
    def test_perfect_prediction_zero_loss(self):
        net = small_net(RELU, widths=(4,), classes=2, seed=1)
        net.out_bias[:] = [60.0, -60.0]  # saturate softmax at class 0
        trace = forward(net, np.zeros((1, 6)))
        assert trace.probs[0, 0] == 1.0
        loss, grads = loss_and_backward(net, trace, np.array([0]))
        assert loss == 0.0
        assert grads[-1][0] == 0.0  # label coordinate of the output bias gradient

    @pytest.mark.parametrize(
        "kind",
        [RELU, ActivationKind.lwta(2), ActivationKind.maxout(2), ActivationKind.sigmoid()],
        ids=["relu", "lwta", "maxout", "sigmoid"],
    )
    def test_gradients_match_finite_differences(self, kind):
        rng = np.random.default_rng(123)
        net = small_net(kind, widths=(8, 8), input_dim=6, classes=3, seed=17)
        checked = 0
        while checked < 10:
            x = rng.standard_normal((1, 6))
            if gating_margin(net, x) < 1e-3:
                continue  # perturbations must not cross a gating boundary
            label = int(rng.integers(0, 3))
            _, analytic = loss_and_backward(net, forward(net, x), np.array([label]))
            numeric = numeric_gradients(net, x, label)
            for a, n in zip(analytic, numeric):
                denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
                rel = np.abs(a - n) / denom
                assert rel.max() < 1e-4
            checked += 1

    def test_inactive_relu_units_get_zero_weight_gradient(self):
        net = small_net(RELU, widths=(8,), seed=9)
        x = np.random.default_rng(2).standard_normal((1, 6))
        trace = forward(net, x)
        inactive = trace.presyn[0][0] < 0
        assert inactive.any()
        _, grads = loss_and_backward(net, trace, np.array([0]))
        dW0 = grads[0]
        assert np.all(dW0[inactive] == 0.0)

    def test_bad_label_rejected(self):
        net = small_net(RELU, classes=3)
        trace = forward(net, np.zeros(6))
        with pytest.raises(ConfigurationError):
            loss_and_backward(net, trace, np.array([3]))


class TestSgd:
    def test_no_motion_without_gradient(self):
        p = [np.array([1.0, 2.0])]
        v = [np.zeros(2)]
        sgd_momentum_step(p, v, [np.zeros(2)], lr=0.5, momentum=0.0)
        np.testing.assert_array_equal(p[0], [1.0, 2.0])

    def test_plain_step(self):
        p = [np.array([0.0])]
        v = [np.zeros(1)]
        sgd_momentum_step(p, v, [np.array([1.0])], lr=1.0, momentum=0.0)
        np.testing.assert_array_equal(p[0], [-1.0])

    def test_two_steps_match_unrolled_recurrence(self):
        lr, mom = 0.1, 0.9
        g1, g2 = 2.0, -1.0
        # v1 = -lr*g1; t1 = v1; v2 = mom*v1 - lr*g2; t2 = t1 + v2
        v1 = -lr * g1
        t1 = v1
        v2 = mom * v1 - lr * g2
        t2 = t1 + v2
        p = [np.array([0.0])]
        v = [np.zeros(1)]
        sgd_momentum_step(p, v, [np.array([g1])], lr, mom)
        np.testing.assert_allclose(p[0], [t1])
        sgd_momentum_step(p, v, [np.array([g2])], lr, mom)
        np.testing.assert_allclose(p[0], [t2])
        np.testing.assert_allclose(v[0], [v2])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(2)], [np.zeros(3)], 0.1, 0.9)


def two_blob_sets(seed=0):
    blob = synthetic_blobs(2, 100, 2, spread=0.02, seed=seed)
    return split(blob, 0.25, seed=seed + 1)


class TestTrain:
    def test_separable_blobs_reach_zero_error(self):
        train_set, val_set = two_blob_sets()
        net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
        cfg = TrainConfig(learning_rate=0.5, momentum=0.9, batch_size=16, max_epochs=50,
                          rng_seed=3, early_stop_patience=50)
        best, log = train(net, train_set, val_set, cfg)
        errors, rate = count_test_errors(best, train_set)
        assert errors == 0
        assert len(log) <= 50

    def test_same_seed_identical_logs(self):
        train_set, val_set = two_blob_sets()
        cfg = TrainConfig(learning_rate=0.2, momentum=0.9, batch_size=16, max_epochs=8,
                          rng_seed=11, early_stop_patience=8)
        runs = []
        for _ in range(2):
            net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
            best, log = train(net, train_set, val_set, cfg)
            runs.append((best, log))
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
            np.testing.assert_array_equal(a, b)

    def test_empty_dataset_rejected(self):
        train_set, val_set = two_blob_sets()
        empty = train_set.take(np.array([], dtype=np.int64))
        net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
        cfg = TrainConfig(learning_rate=0.1)
        with pytest.raises(ConfigurationError):
            train(net, empty, val_set, cfg)

    def test_hooks_see_every_epoch(self):
        train_set, val_set = two_blob_sets()
        net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
        cfg = TrainConfig(learning_rate=0.2, max_epochs=4, early_stop_patience=4)
        seen = []
        train(net, train_set, val_set, cfg, hooks=[lambda e, n: seen.append(e)])
        assert seen == [1, 2, 3, 4]

    def test_target_val_error_stops_early(self):
        train_set, val_set = two_blob_sets()
        net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
        cfg = TrainConfig(learning_rate=0.5, max_epochs=50, early_stop_patience=50,
                          target_val_error=1.0)
        _, log = train(net, train_set, val_set, cfg)
        assert len(log) == 1  # any error rate satisfies a target of 1.0


class TestTestError:
    def test_all_correct(self):
        train_set, val_set = two_blob_sets()
        net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
        cfg = TrainConfig(learning_rate=0.5, max_epochs=50, early_stop_patience=50)
        best, _ = train(net, train_set, val_set, cfg)
        errors, rate = count_test_errors(best, train_set)
        assert (errors, rate) == (0, 0.0)

    def test_counts_single_mistake(self):
        train_set, _ = two_blob_sets()
        subset = train_set.take(np.arange(10))
        net = init_network([LayerSpec(2, 8, RELU)], 2, seed=5)
        cfg = TrainConfig(learning_rate=0.5, max_epochs=30, early_stop_patience=30)
        best, _ = train(net, subset, subset, cfg)
        flipped = subset.take(np.arange(10))
        flipped.labels.setflags(write=True)
        flipped.labels[0] = 1 - flipped.labels[0]
        errors, rate = count_test_errors(best, flipped)
        assert (errors, rate) == (1, 0.1)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(31)
        net = small_net(RELU, widths=(8,), input_dim=4, classes=3, seed=2)
        feats = rng.standard_normal((100, 4))
        labels = rng.integers(0, 3, size=100).astype(np.int32)

        class Tiny:
            features = feats

            def __len__(self):
                return 100

        tiny = Tiny()
        tiny.labels = labels
        expected = 0
        for i in range(100):
            probs = forward(net, feats[i]).probs[0]
            if int(np.argmax(probs)) != labels[i]:
                expected += 1
        errors, rate = count_test_errors(net, tiny)
        assert errors == expected
        assert rate == expected / 100


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        net = small_net(ActivationKind.maxout(2), seed=13)
        p1, p2 = tmp_path / "a.sncm", tmp_path / "b.sncm"
        save_checkpoint(net, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(net.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a, b)
        assert loaded.specs == [LayerSpec(s.input_dim, s.width, s.activation)
                                for s in net.specs]

    def test_truncated_rejected(self, tmp_path):
        net = small_net(RELU, seed=13)
        path = tmp_path / "net.sncm"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        for cut in (0, 3, 11, 40, len(blob) - 1):
            path.write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "net.sncm"
        path.write_bytes(b"XXXX" + bytes(100))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        net = small_net(RELU, seed=13)
        path = tmp_path / "net.sncm"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)


class TestLayerSignals:
    def test_resolve_layer_bounds(self):
        net = small_net(RELU, widths=(8, 8))
        assert resolve_layer(net, -1) == 1
        assert resolve_layer(net, 0) == 0
        with pytest.raises(ConfigurationError):
            resolve_layer(net, 2)

    def test_signals_match_forward(self):
        net = small_net(ActivationKind.maxout(2), widths=(8, 8))
        x = np.random.default_rng(3).standard_normal((20, 6))
        post, pre = layer_signals(net, x, -1, chunk=7)
        trace = forward(net, x)
        np.testing.assert_array_equal(post, trace.postact[1])
        np.testing.assert_array_equal(pre, trace.presyn[1])
