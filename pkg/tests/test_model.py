"""Three-branch model: mixed forward, loss stack, gradient routing, inference."""

from __future__ import annotations

import numpy as np
import pytest

from fedpr import (
    Batch,
    ForgeryModel,
    LossWeights,
    Tensor,
    backward,
    forward_mixed,
    infer,
    loss_adversarial,
    loss_personalized,
    loss_shared,
    sgd_step,
    total_loss,
    zero_grads,
)
from fedpr.autodiff import global_average_pool, linear, log_softmax
from fedpr.errors import BatchError, ConfigError, LabelError
from fedpr.model import pairing_permutation

PREFIXES = ("ff.", "fp.", "fs.")


@pytest.fixture
def model():
    return ForgeryModel(np.random.default_rng(42))


@pytest.fixture
def batch():
    rng = np.random.default_rng(7)
    return Batch(images=Tensor(rng.normal(size=(6, 1, 16, 16))), labels=rng.integers(0, 2, size=6))


def grads_by_prefix(model, loss):
    zero_grads(model.named_params())
    backward(loss)
    return {
        pfx: np.concatenate([p.value.grad.ravel() for p in model.named_params(pfx)])
        for pfx in PREFIXES
    }


def log_probs_tensor(rows):
    return Tensor(np.log(np.asarray(rows, dtype=np.float64)))


class TestForwardMixed:
    def test_rows_normalize(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(0))
        for t in (out.log_probs_p, out.log_probs_s, out.log_probs_s_adv):
            np.testing.assert_allclose(np.exp(t.data).sum(axis=1), 1.0, atol=1e-6)

    def test_pair_index_is_permutation(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(1))
        assert sorted(out.pair_index.tolist()) == list(range(batch.size))

    def test_pairing_avoids_fixed_points(self):
        for seed in range(50):
            for size in (2, 3, 5, 8):
                perm = pairing_permutation(np.random.default_rng(seed), size)
                assert sorted(perm.tolist()) == list(range(size))
                assert not np.any(perm == np.arange(size))

    def test_identical_images_with_forced_coefficient(self, model):
        rng = np.random.default_rng(2)
        image = rng.normal(size=(1, 1, 16, 16))
        images = Tensor(np.repeat(image, 4, axis=0))
        batch = Batch(images=images, labels=np.zeros(4, dtype=np.int64))
        out = forward_mixed(model, batch, np.random.default_rng(3), force_lambda=1.0)
        plain = log_softmax(
            linear(
                global_average_pool(model.features(images)),
                model.param("fp.head.weight").value,
                model.param("fp.head.bias").value,
            )
        )
        np.testing.assert_allclose(out.log_probs_p.data, plain.data, atol=1e-5)

    def test_reproducible_bitwise(self, model, batch):
        a = forward_mixed(model, batch, np.random.default_rng(5))
        b = forward_mixed(model, batch, np.random.default_rng(5))
        assert a.log_probs_p.data.tobytes() == b.log_probs_p.data.tobytes()
        assert a.log_probs_s.data.tobytes() == b.log_probs_s.data.tobytes()
        assert np.array_equal(a.pair_index, b.pair_index)

    def test_shared_branch_copies_agree_bitwise(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(6))
        assert out.log_probs_s.data.tobytes() == out.log_probs_s_adv.data.tobytes()

    def test_batch_of_one_rejected(self, model):
        batch = Batch(images=Tensor(np.zeros((1, 1, 16, 16))), labels=np.array([0]))
        with pytest.raises(BatchError):
            forward_mixed(model, batch, np.random.default_rng(0))

    def test_shared_branch_can_be_skipped(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(0), compute_shared=False)
        assert out.log_probs_s is None and out.log_probs_s_adv is None


class TestLosses:
    def test_perfect_prediction_is_zero(self):
        lp = log_probs_tensor([[1.0, 1e-30]])
        assert loss_personalized(lp, np.array([0])).item() == 0.0

    def test_uniform_prediction_two_classes(self):
        lp = log_probs_tensor([[0.5, 0.5], [0.5, 0.5]])
        assert loss_personalized(lp, np.array([0, 1])).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_quarter_probability_single_sample(self):
        lp = log_probs_tensor([[0.25, 0.75]])
        assert loss_personalized(lp, np.array([0])).item() == pytest.approx(np.log(4), abs=1e-12)
        assert loss_personalized(lp, np.array([0])).item() == pytest.approx(1.3863, abs=5e-5)

    def test_adversarial_uniform_is_log_two(self):
        assert loss_adversarial(log_probs_tensor([[0.5, 0.5]])).item() == pytest.approx(
            np.log(2), abs=1e-12
        )

    def test_adversarial_hand_value(self):
        got = loss_adversarial(log_probs_tensor([[0.9, 0.1]])).item()
        assert got == pytest.approx(-0.5 * (np.log(0.9) + np.log(0.1)), abs=1e-12)
        assert got == pytest.approx(1.2040, abs=5e-5)

    def test_total_loss_weighting(self):
        one = Tensor(1.0)
        weights = LossWeights(alpha=0.1, beta=1.0, gamma=1.0)
        assert total_loss(one, one, one, weights).item() == pytest.approx(2.1, abs=1e-12)
        only_lp = LossWeights(alpha=0.0, beta=1.0, gamma=0.0)
        lp, ls, ladv = Tensor(0.7), Tensor(0.3), Tensor(0.9)
        assert total_loss(lp, ls, ladv, only_lp).item() == pytest.approx(0.7, abs=1e-15)
        zero = Tensor(0.0)
        assert total_loss(zero, zero, zero, weights).item() == 0.0

    def test_losses_non_negative(self, model, batch):
        for seed in range(5):
            out = forward_mixed(model, batch, np.random.default_rng(seed))
            assert loss_personalized(out.log_probs_p, batch.labels).item() >= 0.0
            assert loss_shared(out.log_probs_s, batch.labels[out.pair_index]).item() >= 0.0
            assert loss_adversarial(out.log_probs_s_adv).item() >= 0.0

    def test_label_out_of_range(self):
        lp = log_probs_tensor([[0.5, 0.5]])
        with pytest.raises(LabelError):
            loss_personalized(lp, np.array([2]))

    def test_weights_validated(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-0.1)
        with pytest.raises(ConfigError):
            LossWeights(alpha=0.0, beta=0.0, gamma=0.0)


class TestRouting:
    def test_personalized_loss_touches_trunk_and_personal_head(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(0))
        grads = grads_by_prefix(model, loss_personalized(out.log_probs_p, batch.labels))
        assert np.any(grads["ff."] != 0.0)
        assert np.any(grads["fp."] != 0.0)
        assert np.all(grads["fs."] == 0.0)

    def test_shared_loss_touches_shared_head_only(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(1))
        grads = grads_by_prefix(model, loss_shared(out.log_probs_s, batch.labels[out.pair_index]))
        assert np.all(grads["ff."] == 0.0)
        assert np.all(grads["fp."] == 0.0)
        assert np.any(grads["fs."] != 0.0)

    def test_adversarial_loss_touches_trunk_only(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(2))
        grads = grads_by_prefix(model, loss_adversarial(out.log_probs_s_adv))
        assert np.any(grads["ff."] != 0.0)
        assert np.all(grads["fp."] == 0.0)
        assert np.all(grads["fs."] == 0.0)

    def test_sgd_on_shared_loss_leaves_other_branches(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(3))
        before = {n: p.value.data.copy() for n, p in model.params.items()}
        zero_grads(model.named_params())
        backward(loss_shared(out.log_probs_s, batch.labels[out.pair_index]))
        sgd_step(model.named_params(), lr=0.05, momentum=0.5)
        for name, p in model.params.items():
            if name.startswith("fs."):
                assert not np.array_equal(p.value.data, before[name])
            else:
                assert np.array_equal(p.value.data, before[name])

    def test_sgd_on_adversarial_loss_leaves_heads(self, model, batch):
        out = forward_mixed(model, batch, np.random.default_rng(4))
        before = {n: p.value.data.copy() for n, p in model.params.items()}
        zero_grads(model.named_params())
        backward(loss_adversarial(out.log_probs_s_adv))
        sgd_step(model.named_params(), lr=0.05, momentum=0.5)
        for name, p in model.params.items():
            if name.startswith(("fs.", "fp.")):
                assert np.array_equal(p.value.data, before[name])

    def test_total_loss_gradient_is_weighted_sum(self, model, batch):
        weights = LossWeights(alpha=0.1, beta=1.0, gamma=1.0)
        out = forward_mixed(model, batch, np.random.default_rng(5))
        lp = loss_personalized(out.log_probs_p, batch.labels)
        ls = loss_shared(out.log_probs_s, batch.labels[out.pair_index])
        ladv = loss_adversarial(out.log_probs_s_adv)

        parts = {}
        for key, loss in (("lp", lp), ("ls", ls), ("ladv", ladv)):
            zero_grads(model.named_params())
            backward(loss)
            parts[key] = {n: p.value.grad.copy() for n, p in model.params.items()}
        zero_grads(model.named_params())
        backward(total_loss(lp, ls, ladv, weights))
        for name, p in model.params.items():
            want = (
                weights.beta * parts["lp"][name]
                + weights.gamma * parts["ls"][name]
                + weights.alpha * parts["ladv"][name]
            )
            np.testing.assert_allclose(p.value.grad, want, atol=1e-10)


class TestInfer:
    def test_scores_in_unit_interval(self, model):
        rng = np.random.default_rng(8)
        scores = infer(model, Tensor(rng.normal(size=(10, 1, 16, 16))))
        assert scores.shape == (10,)
        assert np.all((scores >= 0.0) & (scores <= 1.0))

    def test_deterministic(self, model):
        rng = np.random.default_rng(9)
        images = Tensor(rng.normal(size=(4, 1, 16, 16)))
        assert infer(model, images).tobytes() == infer(model, images).tobytes()

    def test_zeroed_head_gives_exact_half(self, model):
        model.param("fp.head.weight").value.data[...] = 0.0
        model.param("fp.head.bias").value.data[...] = 0.0
        scores = infer(model, Tensor(np.random.default_rng(10).normal(size=(3, 1, 16, 16))))
        assert np.all(scores == 0.5)

    def test_param_name_partitioning(self, model):
        names = set(model.params)
        assert names == {
            "ff.conv1.weight",
            "ff.conv1.bias",
            "ff.conv2.weight",
            "ff.conv2.bias",
            "fp.head.weight",
            "fp.head.bias",
            "fs.head.weight",
            "fs.head.bias",
        }
