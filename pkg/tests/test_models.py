"""Model zoo and checkpoint format."""

import numpy as np
import pytest

from cvtr import autodiff as ad
from cvtr.models import (Checkpoint, CheckpointError, Conv, Dense, ModelConfig,
                         ModelError, Residual, build_model, load_checkpoint,
                         param_leaves, parameter_count, predict,
                         save_checkpoint)


def count_from_plan(model) -> int:
    """Independent enumeration of the layer plan for the parameter count."""
    total = 0

    def walk(plan):
        nonlocal total
        for step in plan:
            if isinstance(step, (Conv, Dense)):
                total += model.params[step.w].size + model.params[step.b].size
            elif isinstance(step, Residual):
                walk(step.branch)
                if step.projection is not None:
                    walk([step.projection])
    walk(model.plan)
    return total


class TestMnistCnn:
    def test_logit_shape(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=0))
        logits = m.forward(np.random.default_rng(0).random((3, 1, 28, 28)),
                           depth=0)
        assert logits.value.shape == (3, 10)

    def test_parameter_count_matches_enumeration(self):
        cfg = ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=0)
        m = build_model(cfg)
        # hand count of the declared plan: 3x3 valid convs 1-16-16-32-32,
        # two pools, dense 512->128->10
        conv = lambda ci, co: 9 * ci * co + co
        dense = lambda i, o: i * o + o
        expected = (conv(1, 16) + conv(16, 16) + conv(16, 32) + conv(32, 32)
                    + dense(32 * 4 * 4, 128) + dense(128, 10))
        assert parameter_count(cfg) == expected == count_from_plan(m)

    def test_same_seed_identical_params(self):
        a = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=5))
        b = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=5))
        c = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=6))
        assert a.params.allclose(b.params, rtol=0, atol=0)
        assert not a.params.allclose(c.params, rtol=0, atol=0)

    def test_batch_independence(self):
        # no cross-example coupling; tolerance because BLAS kernels may
        # associate sums differently for different batch heights
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=1))
        x = np.random.default_rng(1).random((4, 1, 28, 28))
        solo = m.forward(x[2:3], depth=0).value
        batched = m.forward(x, depth=0).value
        assert np.allclose(solo[0], batched[2], rtol=0, atol=1e-12)

    def test_batch_order_equivariance(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=1))
        x = np.random.default_rng(2).random((5, 1, 28, 28))
        perm = np.array([3, 0, 4, 1, 2])
        assert np.allclose(m.forward(x[perm], depth=0).value,
                           m.forward(x, depth=0).value[perm],
                           rtol=0, atol=1e-12)

    def test_forward_deterministic_bitwise(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=1))
        x = np.random.default_rng(3).random((5, 1, 28, 28))
        assert np.array_equal(m.forward(x, depth=0).value,
                              m.forward(x, depth=0).value)

    def test_zeroed_head_gives_uniform_loss(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=0))
        zeroed = m.with_params(m.params.replace({
            "dense2.w": np.zeros_like(m.params["dense2.w"]),
            "dense2.b": np.zeros_like(m.params["dense2.b"])}))
        x = np.random.default_rng(0).random((2, 1, 28, 28))
        logits = zeroed.forward(x, depth=0)
        assert np.array_equal(logits.value, np.zeros((2, 10)))
        loss = ad.softmax_cross_entropy(logits, [1, 7])
        assert abs(float(loss.value) - np.log(10)) < 1e-12

    def test_input_gradient_shape(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=0))
        x = np.random.default_rng(3).random((2, 1, 28, 28))
        xe = ad.leaf(x)
        loss = ad.softmax_cross_entropy(m.forward(xe), [0, 1])
        (g,) = ad.grad_values(loss, [xe])
        assert g.shape == x.shape

    def test_wrong_input_shape_rejected(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=0))
        with pytest.raises(ModelError):
            m.forward(np.zeros((1, 3, 28, 28)), depth=0)

    def test_weight_gradient_flows(self):
        m = build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=0))
        x = np.random.default_rng(4).random((2, 1, 28, 28))
        leaves = param_leaves(m, depth=1)
        loss = ad.softmax_cross_entropy(m.forward(x, params=leaves), [0, 1])
        grads = ad.grad_values(loss, list(leaves.values()))
        assert any(np.abs(g).max() > 0 for g in grads)
        assert all(g.shape == m.params[n].shape
                   for n, g in zip(leaves, grads))


class TestResnet:
    @pytest.mark.parametrize("depth,width", [(1, 1), (2, 1), (1, 2)])
    def test_shapes_and_count(self, depth, width):
        cfg = ModelConfig("resnet", (3, 32, 32), 10, depth=depth, width=width,
                          seed=0)
        m = build_model(cfg)
        logits = m.forward(np.random.default_rng(0).random((2, 3, 32, 32)),
                           depth=0)
        assert logits.value.shape == (2, 10)
        assert parameter_count(cfg) == count_from_plan(m)

    def test_param_count_closed_form_depth3_width1(self):
        # closed-form count of the declared plan, written out by hand
        cfg = ModelConfig("resnet", (3, 32, 32), 10, depth=3, width=1, seed=0)
        conv = lambda ci, co, k=3: k * k * ci * co + co
        total = conv(3, 16)
        cin = 16
        for cout, stride in [(16, 1), (32, 2), (64, 2)]:
            for i in range(3):
                total += conv(cin, cout) + conv(cout, cout)
                if i == 0 and (stride == 2 or cin != cout):
                    total += conv(cin, cout, k=1)
                cin = cout
        total += 64 * 10 + 10
        assert parameter_count(cfg) == total

    def test_gradient_reaches_stem(self):
        cfg = ModelConfig("resnet", (3, 16, 16), 4, depth=1, width=1, seed=0)
        m = build_model(cfg)
        x = np.random.default_rng(1).random((2, 3, 16, 16))
        leaves = param_leaves(m, depth=1)
        loss = ad.softmax_cross_entropy(m.forward(x, params=leaves), [0, 1])
        grads = ad.grad_values(loss, list(leaves.values()))
        stem = grads[list(leaves).index("stem.w")]
        assert np.abs(stem).max() > 0


class TestConfigValidation:
    def test_bad_arch(self):
        with pytest.raises(ModelError):
            ModelConfig("vgg", (3, 32, 32), 10)

    def test_bad_depth_width_classes(self):
        with pytest.raises(ModelError):
            ModelConfig("resnet", (3, 32, 32), 10, depth=0)
        with pytest.raises(ModelError):
            ModelConfig("resnet", (3, 32, 32), 10, width=0)
        with pytest.raises(ModelError):
            ModelConfig("resnet", (3, 32, 32), 1)


class TestCheckpoint:
    def _model(self):
        return build_model(ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=2))

    def test_round_trip_bit_identical_forward(self):
        m = self._model()
        data = save_checkpoint(m, {"method": "vanilla", "eps": 0.0, "epoch": 7})
        ck = load_checkpoint(data)
        assert ck.meta["epoch"] == 7
        x = np.random.default_rng(0).random((2, 1, 28, 28))
        assert np.array_equal(ck.model().forward(x, depth=0).value,
                              m.forward(x, depth=0).value)

    def test_round_trip_of_round_trip(self):
        m = self._model()
        d1 = save_checkpoint(m, {"epoch": 1})
        d2 = save_checkpoint(load_checkpoint(d1).model(), {"epoch": 1})
        assert d1 == d2

    def test_bad_magic(self):
        data = save_checkpoint(self._model(), {})
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(b"XXXX" + data[4:])

    def test_bad_version(self):
        data = save_checkpoint(self._model(), {})
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(data[:4] + b"\x02\x00\x00\x00" + data[8:])

    def test_truncation(self):
        data = save_checkpoint(self._model(), {})
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(data[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(data[:8])

    def test_trailing_garbage(self):
        data = save_checkpoint(self._model(), {})
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(data + b"\x00" * 8)

    def test_name_set_mismatch(self):
        m = self._model()
        ck = load_checkpoint(save_checkpoint(m, {}))
        # params saved for one architecture, config claiming another
        bad = Checkpoint(ModelConfig("resnet", (3, 32, 32), 10, seed=0),
                         ck.params, ck.meta)
        with pytest.raises(CheckpointError, match="names"):
            bad.model()


class TestPredict:
    def test_matches_argmax(self):
        m = self._model = build_model(
            ModelConfig("mnist-cnn", (1, 28, 28), 10, seed=3))
        x = np.random.default_rng(5).random((7, 1, 28, 28))
        preds = predict(m, x, batch_size=3)
        ref = np.argmax(m.forward(x, depth=0).value, axis=1)
        assert np.array_equal(preds, ref)
