"""Model/layer tests: forward oracles, JVP consistency, checkpoints."""

import numpy as np
import pytest

from sdcprobe.errors import ConfigError, DataFormatError
from sdcprobe.nnet import (
    ActivationFault,
    ComputationGraph,
    Conv2d,
    Flatten,
    Linear,
    Model,
    Relu,
    build_cnn,
    build_mlp,
    load_checkpoint,
    model_checksum,
    save_checkpoint,
)
from sdcprobe.bitfloat import flip_bit


def conv2d_naive(x, w, b=None, stride=1):
    """Six-nested-loop reference convolution, float64 accumulator per cell."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=np.float32)
    for ni in range(n):
        for oi in range(o):
            for y0 in range(oh):
                for x0 in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += float(x[ni, ci, y0 * stride + i, x0 * stride + j]) \
                                     * float(w[oi, ci, i, j])
                    if b is not None:
                        acc += float(b[oi])
                    out[ni, oi, y0, x0] = np.float32(acc)
    return out


class TestConvForward:
    def test_matches_naive_reference_exactly_on_integer_tensors(self):
        # Integer-valued float32 tensors make every partial sum exactly
        # representable, so any summation order gives the same bits.
        rng = np.random.default_rng(0)
        x = rng.integers(-4, 5, size=(3, 2, 6, 6)).astype(np.float32)
        w = rng.integers(-4, 5, size=(4, 2, 3, 3)).astype(np.float32)
        b = rng.integers(-4, 5, size=4).astype(np.float32)
        layer = Conv2d(w, b)
        np.testing.assert_array_equal(layer.apply(x), conv2d_naive(x, w, b))

    def test_matches_naive_reference_on_continuous_tensors(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 7)).astype(np.float32)
        w = rng.normal(size=(2, 3, 2, 3)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        layer = Conv2d(w, b)
        np.testing.assert_allclose(layer.apply(x), conv2d_naive(x, w, b), rtol=1e-6)

    def test_stride_two(self):
        rng = np.random.default_rng(2)
        x = rng.integers(-3, 4, size=(1, 1, 7, 7)).astype(np.float32)
        w = rng.integers(-3, 4, size=(2, 1, 3, 3)).astype(np.float32)
        layer = Conv2d(w, stride=2)
        assert layer.apply(x).shape == (1, 2, 3, 3)
        np.testing.assert_array_equal(layer.apply(x), conv2d_naive(x, w, stride=2))

    def test_tape_forward_matches_apply(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 5, 5)).astype(np.float32)
        layer = Conv2d(rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
                       rng.normal(size=3).astype(np.float32))
        g = ComputationGraph()
        t = layer.tape(g, g.leaf(x))
        np.testing.assert_array_equal(t.data, layer.apply(x))


class TestModelForward:
    def test_identity_linear_passthrough(self):
        model = Model([Flatten(), Linear(np.eye(3, dtype=np.float32))], (1, 1, 3))
        out = model.apply(np.array([[[[1.0, 2.0, 3.0]]]], dtype=np.float32))
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])

    def test_zero_weight_model_gives_zero_logits(self):
        model = build_mlp((1, 1, 4), [3], classes=2, seed=0)
        for p in model.parameters():
            p.data[...] = 0.0
        out = model.apply(np.ones((5, 1, 1, 4), dtype=np.float32))
        np.testing.assert_array_equal(out, np.zeros((5, 2), dtype=np.float32))

    def test_hand_computed_two_layer_mlp(self):
        # x=[1,0]: h = relu(W1 x) = relu([1,3]) = [1,3]; logits = W2 h = [1+6, 3] = [7,3]
        w1 = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        w2 = np.array([[1.0, 2.0], [0.0, 1.0]], dtype=np.float32)
        model = Model([Flatten(), Linear(w1), Relu(), Linear(w2)], (1, 1, 2))
        out = model.apply(np.array([1.0, 0.0], dtype=np.float32).reshape(1, 1, 1, 2))
        np.testing.assert_array_equal(out, [[7.0, 3.0]])

    def test_batch_shape_checked(self):
        model = build_mlp((1, 1, 4), [], classes=2, seed=0)
        with pytest.raises(ConfigError):
            model.apply(np.ones((2, 1, 1, 5), dtype=np.float32))

    def test_layer_composition_checked(self):
        with pytest.raises(ConfigError):
            Model([Flatten(), Linear(np.ones((2, 5), dtype=np.float32))], (1, 1, 3))

    def test_output_shapes(self):
        model = build_cnn((1, 8, 8), (3, 4), kernel=3, hidden=10, classes=2, seed=0)
        kinds = [l.kind for l in model.layers]
        assert kinds == ["conv2d", "relu", "conv2d", "relu", "flatten",
                         "linear", "relu", "linear"]
        shapes = model.output_shapes()
        assert shapes[0] == (3, 6, 6)
        assert shapes[2] == (4, 4, 4)
        assert shapes[4] == (64,)
        assert shapes[-1] == (2,)

    def test_tape_and_plain_forward_agree(self):
        model = build_cnn((1, 6, 6), (2, 3), kernel=3, hidden=8, classes=3, seed=7)
        x = np.random.default_rng(5).normal(size=(4, 1, 6, 6)).astype(np.float32)
        g = ComputationGraph()
        logits_t, acts_t = model.forward_graph(g, x)
        logits, acts = model.apply(x, return_activations=True)
        np.testing.assert_array_equal(logits_t.data, logits)
        for a_t, a in zip(acts_t, acts):
            np.testing.assert_array_equal(a_t.data, a)


class TestActivationFaults:
    def test_fault_flips_one_column_in_both_paths(self):
        model = build_cnn((1, 6, 6), (2, 3), kernel=3, hidden=8, classes=3, seed=7)
        x = np.random.default_rng(5).normal(size=(4, 1, 6, 6)).astype(np.float32)
        fault = ActivationFault(layer_id=1, element_index=10, bit_index=31)
        clean, clean_acts = model.apply(x, return_activations=True)
        faulty, faulty_acts = model.apply(x, output_faults=[fault], return_activations=True)

        flat_clean = clean_acts[1].reshape(4, -1)
        flat_faulty = faulty_acts[1].reshape(4, -1)
        for n in range(4):
            assert flat_faulty[n, 10] == flip_bit(flat_clean[n, 10], 31)
        mask = np.ones(flat_clean.shape[1], dtype=bool)
        mask[10] = False
        np.testing.assert_array_equal(flat_faulty[:, mask], flat_clean[:, mask])

        g = ComputationGraph()
        logits_t, _ = model.forward_graph(g, x, output_faults=[fault])
        np.testing.assert_array_equal(logits_t.data, faulty)

    def test_multiple_faults_on_one_layer(self):
        model = build_mlp((1, 1, 4), [6], classes=2, seed=3)
        x = np.random.default_rng(0).normal(size=(2, 1, 1, 4)).astype(np.float32)
        faults = [ActivationFault(1, 0, 31), ActivationFault(1, 3, 31)]
        _, acts = model.apply(x, output_faults=faults, return_activations=True)
        _, clean_acts = model.apply(x, return_activations=True)
        diff = (acts[1] != clean_acts[1]) | (np.signbit(acts[1]) != np.signbit(clean_acts[1]))
        assert set(np.nonzero(diff.any(axis=0))[0]) <= {0, 3}

    def test_fault_on_flatten_does_not_corrupt_previous_activation(self):
        model = build_cnn((1, 6, 6), (2, 2), kernel=3, hidden=4, classes=2, seed=1)
        x = np.abs(np.random.default_rng(2).normal(size=(2, 1, 6, 6))).astype(np.float32)
        fault = ActivationFault(layer_id=4, element_index=0, bit_index=31)
        _, acts = model.apply(x, output_faults=[fault], return_activations=True)
        _, clean_acts = model.apply(x, return_activations=True)
        np.testing.assert_array_equal(acts[3], clean_acts[3])


class TestJvp:
    def test_transpose_consistency_with_backward(self):
        # <grad_x, dx> must equal <r, J dx> when both sides share the tape's
        # linearization; holds per layer output.
        model = build_cnn((1, 6, 6), (2, 3), kernel=3, hidden=8, classes=3, seed=9)
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 1, 6, 6)).astype(np.float32)
        dx = rng.normal(size=x.shape).astype(np.float32)
        acts, tans = model.jvp(x, dx)
        for lid in range(len(model.layers)):
            r = rng.normal(size=acts[lid].shape).astype(np.float32)
            g = ComputationGraph()
            logits_t, acts_t = model.forward_graph(g, x)
            target = acts_t[lid]
            target.accum_grad(r)
            for node in reversed(g.nodes):
                if node._backward is not None and node.grad is not None:
                    node._backward(node.grad)
            x_leaf = g.nodes[0]
            lhs = float((x_leaf.grad.astype(np.float64) * dx).sum())
            rhs = float((r.astype(np.float64) * tans[lid]).sum())
            assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))

    def test_jvp_matches_fd_on_kink_free_model(self):
        model = build_mlp((1, 1, 5), [], classes=3, seed=4)  # purely linear
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 1, 1, 5)).astype(np.float32)
        dx = rng.normal(size=x.shape).astype(np.float32)
        _, tans = model.jvp(x, dx)
        eps = 1e-2
        fd = (model.apply(x + eps * dx).astype(np.float64)
              - model.apply(x - eps * dx).astype(np.float64)) / (2 * eps)
        np.testing.assert_allclose(tans[-1], fd, rtol=1e-3, atol=1e-4)

    def test_relu_tangent_masked(self):
        model = Model([Flatten(), Linear(np.eye(2, dtype=np.float32)), Relu()], (1, 1, 2))
        x = np.array([[-1.0, 2.0]], dtype=np.float32).reshape(1, 1, 1, 2)
        dx = np.ones_like(x)
        _, tans = model.jvp(x, dx)
        np.testing.assert_array_equal(tans[-1], [[0.0, 1.0]])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_cnn((1, 7, 7), (2, 3), kernel=3, hidden=9, classes=4, seed=21)
        # exercise non-trivial bit patterns, including a subnormal
        model.layers[0].weight.data[0, 0, 0, 0] = np.float32(1e-41)
        path = tmp_path / "model.isdl"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert model_checksum(loaded) == model_checksum(model)
        assert loaded.input_shape == model.input_shape
        assert [l.kind for l in loaded.layers] == [l.kind for l in model.layers]
        for a, b in zip(loaded.parameters(), model.parameters()):
            np.testing.assert_array_equal(a.data.view(np.uint32), b.data.view(np.uint32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.isdl"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected_with_offset(self, tmp_path):
        model = build_mlp((1, 1, 3), [2], classes=2, seed=0)
        path = tmp_path / "model.isdl"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 5])
        with pytest.raises(DataFormatError, match="offset"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = build_mlp((1, 1, 3), [], classes=2, seed=0)
        path = tmp_path / "model.isdl"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataFormatError, match="trailing"):
            load_checkpoint(path)

    def test_checksum_sensitive_to_single_bit(self):
        model = build_mlp((1, 1, 3), [2], classes=2, seed=0)
        before = model_checksum(model)
        w = model.layers[1].weight.data
        w.reshape(-1)[0] = flip_bit(w.reshape(-1)[0], 0)
        assert model_checksum(model) != before

    def test_copy_is_independent(self):
        model = build_mlp((1, 1, 3), [2], classes=2, seed=0)
        clone = model.copy()
        assert model_checksum(clone) == model_checksum(model)
        clone.layers[1].weight.data[0, 0] = 99.0
        assert model_checksum(clone) != model_checksum(model)
