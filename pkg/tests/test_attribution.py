"""Attribution oracles.

Conductance is checked against closed forms on linear models (where the path
integral is exact for any step count) and against the completeness identity
on nonlinear ones.  Weight attribution is checked against finite differences
and its defining signed-sum structure.
"""

import numpy as np
import pytest

from sdcprobe.attribution import (
    AttributionConfig,
    AttributionMap,
    Baseline,
    attribute_all,
    conductance,
    conductance_components,
    eligible_layers,
    load_attribution,
    make_baseline,
    save_attribution,
    weight_attribution,
    weight_attribution_signed,
)
from sdcprobe.data import Dataset, synth_blobs
from sdcprobe.errors import ConfigError, DataFormatError, UsageError
from sdcprobe.nnet import Flatten, Linear, Model, build_mlp, model_checksum


def zeros_baseline(model):
    return make_baseline("zeros", model)


def linear_model(w):
    w = np.asarray(w, dtype=np.float32)
    return Model([Flatten(), Linear(w)], (1, 1, w.shape[1]))


class TestConductanceClosedForm:
    def test_single_linear_model_path_integral_exact(self):
        # F(x) = w·x, baseline 0: Cond at the output element of the predicted
        # class equals w·x itself, for any number of steps.
        w = np.array([[0.5, -2.0, 1.0], [0.1, 0.1, 0.1]], dtype=np.float32)
        model = linear_model(w)
        x = np.array([2.0, 1.0, 4.0], dtype=np.float32)
        logits = w.astype(np.float64) @ x.astype(np.float64)
        pred = int(np.argmax(logits))
        for steps in (1, 7):
            scores = conductance(model, 1, x.reshape(1, 1, 1, 3),
                                 zeros_baseline(model), steps)
            np.testing.assert_allclose(scores[pred], abs(logits[pred]), rtol=1e-5)
            other = 1 - pred
            assert scores[other] == 0.0  # gradient of F w.r.t. the losing logit is 0

    def test_input_layer_conductance_matches_per_feature_products(self):
        # Through the flatten layer, Cond_i = w_pred[i] * x_i exactly.
        w = np.array([[0.5, -2.0, 1.0]], dtype=np.float32)
        model = linear_model(w)
        x = np.array([2.0, 1.0, 4.0], dtype=np.float32)
        scores = conductance(model, 0, x.reshape(1, 1, 1, 3),
                             zeros_baseline(model), steps=3)
        np.testing.assert_allclose(scores, np.abs(w[0] * x), rtol=1e-5)

    def test_baseline_input_gives_zero_scores(self):
        model = build_mlp((1, 1, 4), [5], classes=3, seed=0)
        x = np.zeros((2, 1, 1, 4), dtype=np.float32)
        for lid in range(len(model.layers)):
            scores = conductance(model, lid, x, zeros_baseline(model), steps=4)
            np.testing.assert_array_equal(scores, np.zeros_like(scores))

    def test_layer_id_range_checked(self):
        model = build_mlp((1, 1, 4), [], classes=2, seed=0)
        with pytest.raises(UsageError):
            conductance(model, 5, np.ones((1, 1, 1, 4), dtype=np.float32),
                        zeros_baseline(model), steps=2)


class TestConductanceCompleteness:
    """Sum over a layer's elements of signed conductance equals
    F(x) - F(x') for every layer, up to midpoint-rule error."""

    def f_values(self, model, images, baseline, classes):
        logits_x = model.apply(images)
        logits_b = model.apply(np.broadcast_to(baseline.tensor[None],
                                               images.shape).copy())
        rows = np.arange(images.shape[0])
        return (logits_x[rows, classes].astype(np.float64),
                logits_b[rows, classes].astype(np.float64))

    def test_completeness_on_random_mlp(self):
        model = build_mlp((1, 1, 6), [10, 8], classes=3, seed=12)
        rng = np.random.default_rng(7)
        images = rng.normal(0.5, 0.4, size=(20, 1, 1, 6)).astype(np.float32)
        baseline = zeros_baseline(model)
        from sdcprobe.nnet.training import predict
        classes = predict(model, images)[0]
        comps = conductance_components(model, images, baseline, steps=64,
                                       classes=classes)
        fx, fb = self.f_values(model, images, baseline, classes)
        target = fx - fb
        for lid in range(len(model.layers)):
            total = comps[lid].sum(axis=1)
            err = np.abs(total - target)
            assert np.all(err <= 0.02 * np.abs(target) + 1e-9), \
                f"layer {lid}: max rel err {np.max(err / np.abs(target))}"

    def test_riemann_refinement_shrinks(self):
        model = build_mlp((1, 1, 5), [8], classes=2, seed=3)
        rng = np.random.default_rng(11)
        images = rng.normal(0.4, 0.3, size=(8, 1, 1, 5)).astype(np.float32)
        baseline = zeros_baseline(model)
        score_at = {m: conductance(model, 1, images, baseline, steps=m)
                    for m in (8, 16, 32)}
        d1 = np.linalg.norm(score_at[16] - score_at[8])
        d2 = np.linalg.norm(score_at[32] - score_at[16])
        assert d2 <= d1 + 1e-12


class TestWeightAttribution:
    def test_scalar_linear_gradient_is_input(self):
        # L(x) = w·x with one weight: dL/dw = x = 3
        model = linear_model([[1.0]])
        scores = weight_attribution(model, 1, np.array([[[[3.0]]]], dtype=np.float32))
        np.testing.assert_array_equal(scores, [3.0])

    def test_opposite_inputs_cancel_before_absolute_value(self):
        model = linear_model([[1.0]])
        x = np.array([3.0, -3.0], dtype=np.float32).reshape(2, 1, 1, 1)
        scores = weight_attribution(model, 1, x)
        np.testing.assert_array_equal(scores, [0.0])

    def test_matches_finite_difference_on_mlp(self):
        model = build_mlp((1, 1, 5), [6], classes=3, seed=8)
        rng = np.random.default_rng(2)
        images = rng.normal(0.3, 0.5, size=(7, 1, 1, 5)).astype(np.float32)
        from sdcprobe.nnet.training import predict
        classes = predict(model, images)[0]

        for lid in model.weight_layer_ids():
            got = weight_attribution_signed(model, lid, images, classes=classes)
            layer = model.layers[lid]
            w64 = layer.weight.data.astype(np.float64)

            def total_logit():
                keep = layer.weight.data.copy()
                layer.weight.data = w64.astype(np.float32)
                logits = model.apply(images).astype(np.float64)
                layer.weight.data = keep
                return float(logits[np.arange(7), classes].sum())

            eps = 1e-3
            fd = np.zeros(w64.size)
            flat = w64.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                hi = total_logit()
                flat[i] = keep - eps
                lo = total_logit()
                flat[i] = keep
                fd[i] = (hi - lo) / (2 * eps)
            np.testing.assert_allclose(got, fd, rtol=1e-3, atol=1e-4)

    def test_linear_in_input_set_on_signed_accumulator(self):
        model = build_mlp((1, 1, 4), [5], classes=2, seed=1)
        rng = np.random.default_rng(9)
        a = rng.normal(size=(6, 1, 1, 4)).astype(np.float32)
        b = rng.normal(size=(4, 1, 1, 4)).astype(np.float32)
        from sdcprobe.nnet.training import predict
        ca = predict(model, a)[0]
        cb = predict(model, b)[0]
        both = np.concatenate([a, b])
        cboth = np.concatenate([ca, cb])
        for lid in model.weight_layer_ids():
            sa = weight_attribution_signed(model, lid, a, classes=ca)
            sb = weight_attribution_signed(model, lid, b, classes=cb)
            sab = weight_attribution_signed(model, lid, both, classes=cboth)
            # float32 gradient buffers bound the match at single precision;
            # a structurally wrong accumulator (abs before sum) misses by O(1)
            np.testing.assert_allclose(sab, sa + sb, rtol=1e-5, atol=1e-6)

    def test_weightless_layer_rejected(self):
        model = build_mlp((1, 1, 4), [5], classes=2, seed=1)
        with pytest.raises(UsageError):
            weight_attribution(model, 0, np.ones((1, 1, 1, 4), dtype=np.float32))


class TestAttributeAll:
    def make_dataset(self):
        return synth_blobs(2, 30, 6, 0.3, seed=5)

    def test_zero_weight_model_all_zero_scores(self):
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        for p in model.parameters():
            p.data[...] = 0.0
        amap = attribute_all(model, self.make_dataset(),
                             AttributionConfig("neuron_weight"))
        for arr in amap.scores.values():
            np.testing.assert_array_equal(arr, np.zeros_like(arr))

    def test_deterministic_given_seed(self):
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        ds = self.make_dataset()
        cfg = AttributionConfig("neuron_output", steps=4, sample_count=10, seed=3)
        a = attribute_all(model, ds, cfg)
        b = attribute_all(model, ds, cfg)
        for lid in a.scores:
            np.testing.assert_array_equal(a.scores[lid], b.scores[lid])

    def test_dominant_weight_takes_top_score(self):
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        w = model.layers[1].weight
        w.data[2, 3] = 100.0 * np.abs(w.data).max()
        amap = attribute_all(model, self.make_dataset(),
                             AttributionConfig("neuron_weight"))
        lid = model.weight_layer_ids()[0]
        flat_idx = 2 * w.data.shape[1] + 3
        assert int(np.argmax(amap.scores[lid])) == flat_idx

    def test_eligible_layers(self):
        """Flatten owns no neuron outputs: its values alias the raw input."""
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        assert eligible_layers(model, "neuron_output") == [1, 2, 3]
        assert eligible_layers(model, "neuron_weight") == [1, 3]
        with pytest.raises(ConfigError):
            eligible_layers(model, "bias")

    def test_score_counts_match_element_counts(self):
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        ds = self.make_dataset()
        amap = attribute_all(model, ds, AttributionConfig("neuron_output", steps=2))
        shapes = model.output_shapes()
        for lid, arr in amap.scores.items():
            assert arr.size == int(np.prod(shapes[lid]))


class TestAttributionFile:
    def test_round_trip(self, tmp_path):
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        ds = synth_blobs(2, 10, 6, 0.3, seed=5)
        amap = attribute_all(model, ds, AttributionConfig("neuron_weight", seed=4))
        path = tmp_path / "attr.isat"
        save_attribution(amap, path)
        loaded = load_attribution(path)
        assert loaded.target_kind == amap.target_kind
        assert loaded.model_checksum == model_checksum(model)
        assert loaded.seed == 4
        assert loaded.sample_count == amap.sample_count
        assert sorted(loaded.scores) == sorted(amap.scores)
        for lid in amap.scores:
            np.testing.assert_array_equal(loaded.scores[lid], amap.scores[lid])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.isat"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(DataFormatError, match="magic"):
            load_attribution(path)

    def test_truncation(self, tmp_path):
        model = build_mlp((1, 1, 6), [4], classes=2, seed=0)
        ds = synth_blobs(2, 10, 6, 0.3, seed=5)
        amap = attribute_all(model, ds, AttributionConfig("neuron_weight"))
        path = tmp_path / "attr.isat"
        save_attribution(amap, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(DataFormatError, match="truncated"):
            load_attribution(path)

    def test_negative_scores_rejected(self):
        with pytest.raises(UsageError):
            AttributionMap("neuron_weight", {0: np.array([-1.0])}, "")

    def test_non_finite_scores_rejected(self):
        with pytest.raises(UsageError):
            AttributionMap("neuron_weight", {0: np.array([np.inf])}, "")


class TestBaseline:
    def test_dataset_mean(self):
        ds = synth_blobs(2, 10, 4, 0.2, seed=1)
        model = build_mlp((1, 1, 4), [], classes=2, seed=0)
        b = make_baseline("dataset_mean", model, ds)
        np.testing.assert_allclose(b.tensor, ds.images.mean(axis=0))

    def test_unknown_kind(self):
        model = build_mlp((1, 1, 4), [], classes=2, seed=0)
        with pytest.raises(ConfigError):
            make_baseline("ones", model)

    def test_shape_mismatch_detected(self):
        model = build_mlp((1, 1, 4), [], classes=2, seed=0)
        bad = Baseline("zeros", np.zeros((1, 1, 5), dtype=np.float32))
        with pytest.raises(ConfigError):
            conductance(model, 0, np.ones((1, 1, 1, 4), dtype=np.float32), bad, 2)
