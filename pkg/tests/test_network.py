"""Forward traces, entropy, reverse-mode gradients, Adam, and training."""

import math

import numpy as np
import pytest

import merge_surgeon as ms
from merge_surgeon.network import (
    Adam,
    ModelSpec,
    NetworkError,
    TrainConfig,
    backprop_grads,
    classifier_loss_and_grads,
    cross_entropy_loss,
    forward_layers,
    forward_with_trace,
    head_logits,
    init_backbone,
    init_head,
    softmax_entropy,
)
from merge_surgeon.tensors import bitwise_equal, block_name, head_name


def small_instance(seed, spec=None, batch=6, margin=5e-3):
    """Random params and inputs with all pre-activations clear of the ReLU
    kink, so finite differences stay on one side of every corner."""
    spec = spec or ModelSpec(4, (5, 4, 3), (3,))
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        params = init_backbone(spec, rng)
        head_w, head_b = init_head(spec.head_dims[0], spec.feature_dim, rng)
        params[head_name(0, "weight")] = head_w
        params[head_name(0, "bias")] = head_b
        x = rng.standard_normal((spec.input_dim, batch))
        labels = rng.integers(0, spec.head_dims[0], size=batch)
        layers = forward_layers(params, spec, x)
        pre_activations = []
        z = x
        for layer in range(1, spec.num_layers + 1):
            pre = params[block_name(layer, "weight")] @ z + params[block_name(layer, "bias")][:, None]
            pre_activations.append(pre)
            z = np.maximum(pre, 0.0) if layer < spec.num_layers else pre
        if min(np.abs(p).min() for p in pre_activations) > margin:
            return spec, params, x, labels
    raise AssertionError("could not find a kink-free instance")


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


class TestForward:
    def test_all_zero_params_give_zero_trace(self):
        spec = ModelSpec(3, (4, 2), (2,))
        params = {name: np.zeros(shape) for name, shape in spec.backbone_shapes().items()}
        trace = forward_with_trace(params, spec, np.ones((3, 5)))
        for z in trace:
            assert np.all(z == 0)

    def test_identity_block_passes_non_negative_input(self):
        spec = ModelSpec(3, (3, 3), (2,))
        params = {name: np.zeros(shape) for name, shape in spec.backbone_shapes().items()}
        params["block1.weight"] = np.eye(3)
        x = np.abs(np.random.default_rng(0).standard_normal((3, 4)))
        trace = forward_with_trace(params, spec, x)
        np.testing.assert_allclose(trace[0], x, atol=1e-7)

    def test_against_hand_computed_chain(self):
        rng = np.random.default_rng(4)
        spec = ModelSpec(2, (2, 2), (2,))
        w1 = rng.standard_normal((2, 2))
        b1 = rng.standard_normal(2)
        w2 = rng.standard_normal((2, 2))
        b2 = rng.standard_normal(2)
        x = rng.standard_normal((2, 3))
        params = {"block1.weight": w1, "block1.bias": b1, "block2.weight": w2, "block2.bias": b2}
        trace = forward_with_trace(params, spec, x)
        z1 = np.maximum(w1 @ x + b1[:, None], 0.0)
        z2 = w2 @ z1 + b2[:, None]
        np.testing.assert_allclose(trace[0], z1, atol=1e-6)
        np.testing.assert_allclose(trace[1], z2, atol=1e-6)

    def test_pure(self):
        spec, params, x, _ = small_instance(10)
        a = forward_with_trace(params, spec, x)
        b = forward_with_trace(params, spec, x)
        for za, zb in zip(a, b):
            assert za.tobytes() == zb.tobytes()

    def test_shape_mismatch(self):
        spec = ModelSpec(3, (4, 2), (2,))
        params = {name: np.zeros(shape) for name, shape in spec.backbone_shapes().items()}
        with pytest.raises(NetworkError):
            forward_with_trace(params, spec, np.zeros((5, 2)))


class TestModelSpec:
    def test_requires_two_blocks(self):
        with pytest.raises(NetworkError):
            ModelSpec(4, (8,), (3,))

    def test_rejects_non_positive_dims(self):
        with pytest.raises(NetworkError):
            ModelSpec(0, (8, 4), (3,))
        with pytest.raises(NetworkError):
            ModelSpec(4, (8, 0), (3,))

    def test_backbone_validation(self):
        spec = ModelSpec(3, (4, 2), (2,))
        params = {name: np.zeros(shape) for name, shape in spec.backbone_shapes().items()}
        spec.validate_backbone(params)
        with pytest.raises(NetworkError):
            spec.validate_backbone({k: v for k, v in params.items() if k != "block2.bias"})
        bad = dict(params)
        bad["block1.weight"] = np.zeros((4, 4))
        with pytest.raises(NetworkError):
            spec.validate_backbone(bad)

    def test_text_round_trip(self):
        spec = ModelSpec(16, (32, 32, 16), (5, 5, 5))
        assert ModelSpec.from_text(spec.to_text()) == spec


class TestEntropy:
    def test_uniform_logits(self):
        for classes in (2, 5, 9):
            logits = np.full((classes, 3), 1.7)
            assert softmax_entropy(logits) == pytest.approx(math.log(classes), abs=1e-12)

    def test_near_one_hot(self):
        logits = np.zeros((4, 2))
        logits[1, :] = 1e4
        assert softmax_entropy(logits) < 1e-6

    def test_two_class_value(self):
        # p = (0.25, 0.75); independent evaluation of -sum p ln p.
        expected = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
        assert expected == pytest.approx(0.562335, abs=5e-7)
        logits = np.array([[0.0], [math.log(3.0)]])
        assert softmax_entropy(logits) == pytest.approx(expected, abs=1e-12)

    def test_head_logits_shape_check(self):
        with pytest.raises(NetworkError):
            head_logits(np.zeros((3, 4)), np.zeros(3), np.zeros((5, 2)))


class TestBackprop:
    def test_zero_input_batch(self):
        # Nonzero biases keep units active so the backward signal reaches
        # block 1; its weight grads still vanish because x multiplies them.
        spec, params, _, labels = small_instance(11)
        rng = np.random.default_rng(99)
        for name in list(params):
            if name.endswith(".bias"):
                params[name] = rng.uniform(0.1, 0.5, size=params[name].shape)
        x = np.zeros((spec.input_dim, len(labels)))
        grads = backprop_grads(params, spec, x, labels=labels, head_tag=0)
        assert np.all(grads["block1.weight"] == 0)
        assert np.any(grads["block1.bias"] != 0)

    def test_cross_entropy_gradients_match_finite_differences(self):
        for seed in range(3):
            spec, params, x, labels = small_instance(20 + seed)
            _, grads = classifier_loss_and_grads(params, spec, 0, x, labels)
            eps = 1e-3
            for name in params:
                numeric = np.zeros_like(params[name])
                flat = numeric.reshape(-1)
                for i in range(flat.size):
                    for sign in (1, -1):
                        bumped = {k: v.copy() for k, v in params.items()}
                        bumped[name].reshape(-1)[i] += sign * eps
                        loss, _ = classifier_loss_and_grads(bumped, spec, 0, x, labels)
                        flat[i] += sign * loss / (2 * eps)
                assert relative_error(grads[name], numeric) < 1e-3, name

    def test_affine_layer_mse_adjoint_matches_closed_form(self):
        # Identity first block on non-negative input makes the network a
        # single affine map, so dW = 2 (W X - Y) X^T / N.
        rng = np.random.default_rng(13)
        spec = ModelSpec(3, (3, 2), (2,))
        params = {
            "block1.weight": np.eye(3),
            "block1.bias": np.zeros(3),
            "block2.weight": rng.standard_normal((2, 3)),
            "block2.bias": np.zeros(2),
        }
        x = np.abs(rng.standard_normal((3, 8))) + 0.1
        y = rng.standard_normal((2, 8))
        out = params["block2.weight"] @ x
        adjoint = 2.0 * (out - y) / x.shape[1]
        grads = backprop_grads(params, spec, x, adjoint=adjoint)
        closed_form = 2.0 * (out - y) @ x.T / x.shape[1]
        np.testing.assert_allclose(grads["block2.weight"], closed_form, atol=1e-5)

    def test_mode_exclusivity(self):
        spec, params, x, labels = small_instance(14)
        with pytest.raises(NetworkError):
            backprop_grads(params, spec, x)
        with pytest.raises(NetworkError):
            backprop_grads(params, spec, x, labels=labels, head_tag=0,
                           adjoint=np.zeros((spec.feature_dim, len(labels))))


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        before = params["w"].copy()
        adam = Adam()
        adam.step(params, {"w": np.zeros(3)})
        np.testing.assert_array_equal(params["w"], before)

    def test_descends_a_quadratic(self):
        params = {"w": np.array([5.0])}
        adam = Adam(learning_rate=0.1)
        for _ in range(200):
            adam.step(params, {"w": 2 * params["w"]})
        assert abs(params["w"][0]) < 0.5


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(NetworkError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(NetworkError):
            TrainConfig(betas=(0.9, 1.0))
        with pytest.raises(NetworkError):
            TrainConfig(iterations=0)


@pytest.fixture(scope="module")
def tiny_setup():
    suite = ms.gen_task_suite(3, 2, 5, 3, 120, 60)
    spec = ModelSpec(5, (8, 8, 6), (3, 3))
    cfg = TrainConfig(iterations=150, seed=3)
    return suite, spec, cfg


class TestTraining:

    def test_pretrain_deterministic(self, tiny_setup):
        suite, spec, cfg = tiny_setup
        a = ms.pretrain(spec, suite.mixture, cfg)
        b = ms.pretrain(spec, suite.mixture, cfg)
        assert bitwise_equal(a.params, b.params)
        assert a.losses == b.losses

    def test_expert_deterministic_and_carries_head(self, tiny_setup):
        suite, spec, cfg = tiny_setup
        pre = ms.pretrain(spec, suite.mixture, cfg)
        a = ms.train_expert(pre.params, suite.tasks[1].train, 1, spec, cfg)
        b = ms.train_expert(pre.params, suite.tasks[1].train, 1, spec, cfg)
        assert bitwise_equal(a.params, b.params)
        assert head_name(1, "weight") in a.params
        assert head_name(1, "bias") in a.params

    def test_loss_strictly_decreases(self, tiny_setup):
        suite, spec, cfg = tiny_setup
        pre = ms.pretrain(spec, suite.mixture, cfg)
        assert pre.losses[-1] < pre.losses[0]
        expert = ms.train_expert(pre.params, suite.tasks[0].train, 0, spec, cfg)
        assert expert.losses[-1] < expert.losses[0]

    def test_cross_entropy_loss_helper_matches_training_loss(self, tiny_setup):
        suite, spec, cfg = tiny_setup
        pre = ms.pretrain(spec, suite.mixture, cfg)
        expert = ms.train_expert(pre.params, suite.tasks[0].train, 0, spec, cfg)
        data = suite.tasks[0].train
        loss = cross_entropy_loss(expert.params, spec, 0, data.inputs(), data.labels)
        assert np.isfinite(loss) and loss > 0


def test_reference_experts_hit_90_percent(ref_spec, ref_experts, ref_heads, ref_test_sets):
    for task, expert in enumerate(ref_experts):
        result = ms.evaluate(expert, ref_heads, ref_spec, ref_test_sets, model_id=f"expert{task}")
        assert result.task_accuracies[task] >= 0.9
