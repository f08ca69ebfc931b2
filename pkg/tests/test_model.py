import dataclasses

import numpy as np
import pytest

from attanet.data_io import gen_toy_dataset
from attanet.gradcheck import COMPOSITE_TOL, run_gradcheck
from attanet.model import (
    TOY_MODEL,
    TOY_TRAIN,
    ModelConfig,
    TrainSettings,
    confusion_matrix,
    evaluate_miou,
    expected_parameter_count,
    init_model,
    joint_loss,
    loss_and_grads,
    miou_from_confusion,
    model_forward,
    poly_lr,
    sgd_step,
    stack_batch,
    train_toy,
    trainable_parameters,
)
from attanet.nn import ConvParams, cross_entropy, named_tensors, replace_tensor
from attanet.tensor import ContractError, Tensor

SMALL = ModelConfig(stem_channels=4, stage_channels=(8, 8, 16))


@pytest.fixture(scope="module")
def toy_data():
    return gen_toy_dataset(16, seed=5)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"num_classes": 1}, {"aux_weight": -1.0}, {"stem_strides": (3, 1)}, {"sam_direction": "up"},
         {"stage_channels": (8, 8, 1)}, {"stage_channels": (8, 8)}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ContractError):
            ModelConfig(**kwargs)

    @pytest.mark.parametrize("strides,stride", [((2, 2), 32), ((2, 1), 16), ((1, 1), 8)])
    def test_output_stride(self, strides, stride):
        assert ModelConfig(stem_strides=strides).output_stride == stride


class TestForward:
    def test_three_logit_maps_at_input_size(self):
        params = init_model(ModelConfig())
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)))
        outs = model_forward(x, params)
        assert [o.shape for o in outs] == [(1, 3, 64, 64)] * 3

    def test_indivisible_input(self):
        with pytest.raises(ContractError):
            model_forward(Tensor(np.zeros((1, 3, 48, 64))), init_model(ModelConfig()))

    def test_eval_deterministic_and_pure(self):
        params = init_model(SMALL)
        before = {name: t.data.copy() for name, t, _ in named_tensors(params)}
        x = Tensor(np.random.default_rng(1).uniform(size=(2, 3, 64, 64)))
        a = model_forward(x, params)
        b = model_forward(x, params)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a, b))
        assert all(np.array_equal(before[name], t.data) for name, t, _ in named_tensors(params))

    def test_training_mode_updates_running_stats(self):
        params = init_model(SMALL)
        x = Tensor(np.random.default_rng(1).uniform(size=(2, 3, 32, 32)))
        model_forward(x, params, training=True)
        assert params.stem[0].bn.running_mean.data.any()

    @pytest.mark.parametrize("seed", range(3))
    def test_ablation_equivalence(self, seed):
        """Zero V and a half gate reduce the full model to the baseline path."""
        full = init_model(dataclasses.replace(SMALL, seed=seed))
        v = full.sam.proj_v
        full.sam.proj_v = ConvParams(Tensor(np.zeros(v.weight.shape)), Tensor(np.zeros(v.bias.shape)))
        head = full.afm.mask_head
        # sigmoid(0) is exactly 0.5, the baseline's fixed blend
        full.afm.mask_head = ConvParams(Tensor(np.zeros(head.weight.shape)), Tensor(np.zeros(head.bias.shape)))

        base = init_model(dataclasses.replace(SMALL, seed=seed + 100, use_sam=False, use_afm=False))
        shared = {name: t for name, t, _ in named_tensors(full)}
        for name, _, _ in named_tensors(base):
            replace_tensor(base, name, shared[name])

        x = Tensor(np.random.default_rng(seed).uniform(size=(2, 3, 64, 64)))
        for a, b in zip(model_forward(x, full), model_forward(x, base)):
            assert np.abs(a.data - b.data).max() <= 1e-10


class TestParameters:
    @pytest.mark.parametrize(
        "config",
        [ModelConfig(), SMALL, TOY_MODEL, dataclasses.replace(SMALL, use_sam=False),
         dataclasses.replace(SMALL, use_afm=False, num_classes=5)],
    )
    def test_count_matches_closed_form(self, config):
        total = sum(t.data.size for _, t in trainable_parameters(init_model(config)))
        assert total == expected_parameter_count(config)

    def test_kaiming_std(self):
        params = init_model(ModelConfig(stage_channels=(16, 32, 64)))
        checked = 0
        for name, t in trainable_parameters(params):
            if not name.endswith("weight"):
                continue
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            if fan_in >= 64 and t.data.size >= 1000:
                target = np.sqrt(2.0 / fan_in)
                assert abs(t.data.std() / target - 1) <= 0.2, name
                checked += 1
        assert checked >= 5

    def test_bn_starts_at_identity(self):
        for name, t in trainable_parameters(init_model(SMALL)):
            if name.endswith("gamma"):
                assert (t.data == 1).all()
            if name.endswith("beta"):
                assert (t.data == 0).all()

    def test_no_dead_parameters(self, toy_data):
        params = init_model(dataclasses.replace(TOY_MODEL, seed=3))
        rng = np.random.default_rng(0)
        alive = {name: False for name, _ in trainable_parameters(params)}
        for _ in range(10):
            images, labels = stack_batch([toy_data[i] for i in rng.integers(0, len(toy_data), 2)])
            _, grads, _ = loss_and_grads(params, images, labels)
            for name, g in grads.items():
                alive[name] |= bool(np.any(g != 0))
        assert [name for name, ok in alive.items() if not ok] == []

    def test_full_model_gradient(self):
        (result,) = run_gradcheck(seed=2, trials=2, ops=["full_model"])
        assert result.max_rel_error <= COMPOSITE_TOL


class TestJointLoss:
    @staticmethod
    def _logits(seed: int):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(3)], rng.integers(0, 3, (2, 4, 4))

    def test_direct_substitution(self):
        # logits chosen so the three cross-entropies are 1.0, 0.5, 0.5
        def two_class(target: float) -> Tensor:
            # softmax prob p of class 0 with -log p = target
            p = np.exp(-target)
            return Tensor(np.array([np.log(p), np.log(1 - p)]).reshape(1, 2, 1, 1))

        labels = np.zeros((1, 1, 1), int)
        loss = joint_loss([two_class(1.0), two_class(0.5), two_class(0.5)], labels, 1.0)
        assert loss.data.item() == pytest.approx(2.0, abs=1e-12)

    def test_zero_weight_leaves_principal(self):
        logits, labels = self._logits(0)
        assert joint_loss(logits, labels, 0.0).data.item() == cross_entropy(logits[0], labels).data.item()

    @pytest.mark.parametrize("seed", range(5))
    def test_recomposition(self, seed):
        logits, labels = self._logits(seed)
        parts = [cross_entropy(t, labels).data.item() for t in logits]
        expected = parts[0] + 0.7 * (parts[1] + parts[2])
        assert abs(joint_loss(logits, labels, 0.7).data.item() - expected) <= 1e-12


class TestSchedule:
    def test_start(self):
        assert poly_lr(0, 100) == 1e-2

    def test_end(self):
        assert poly_lr(100, 100) == 0.0

    def test_midpoint(self):
        assert poly_lr(50, 100, 1e-2, 0.9) == pytest.approx(1e-2 * 0.5**0.9, rel=1e-15)

    @pytest.mark.parametrize("it", [-1, 101])
    def test_out_of_range(self, it):
        with pytest.raises(ContractError):
            poly_lr(it, 100)


class TestSgd:
    @staticmethod
    def _setup(seed: int = 0):
        params = init_model(SMALL)
        rng = np.random.default_rng(seed)
        grads = {name: rng.standard_normal(t.shape) for name, t in trainable_parameters(params)}
        return params, grads

    def test_vanilla(self):
        params, grads = self._setup()
        before = {name: t.data.copy() for name, t in trainable_parameters(params)}
        sgd_step(params, grads, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
        for name, t in trainable_parameters(params):
            assert np.array_equal(t.data, before[name] - 0.1 * grads[name])

    def test_fixed_point(self):
        params, grads = self._setup()
        before = {name: t.data.copy() for name, t in trainable_parameters(params)}
        zero = {name: np.zeros_like(g) for name, g in grads.items()}
        sgd_step(params, zero, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
        for name, t in trainable_parameters(params):
            assert np.array_equal(t.data, before[name])

    def test_two_momentum_steps(self):
        params, grads = self._setup(1)
        before = {name: t.data.copy() for name, t in trainable_parameters(params)}
        velocity: dict = {}
        lr, m = 0.05, 0.9
        for _ in range(2):
            sgd_step(params, grads, velocity, lr=lr, momentum=m, weight_decay=0.0)
        for name, t in trainable_parameters(params):
            # sequential oracle: v1 = g, v2 = m*g + g
            v1 = grads[name]
            p1 = before[name] - lr * v1
            p2 = p1 - lr * (m * v1 + grads[name])
            assert np.abs(t.data - p2).max() <= 1e-12
            assert np.abs((before[name] - t.data) - lr * grads[name] * 2.9).max() <= 1e-12

    def test_weight_decay(self):
        params, grads = self._setup()
        zero = {name: np.zeros_like(g) for name, g in grads.items()}
        before = {name: t.data.copy() for name, t in trainable_parameters(params)}
        sgd_step(params, zero, {}, lr=0.1, momentum=0.9, weight_decay=0.5)
        for name, t in trainable_parameters(params):
            assert np.allclose(t.data, before[name] * 0.95, rtol=0, atol=1e-15)

    def test_missing_gradient(self):
        params, grads = self._setup()
        grads.pop(next(iter(grads)))
        with pytest.raises(ContractError, match="no gradient"):
            sgd_step(params, grads, {}, lr=0.1)


class TestTraining:
    def test_zero_iterations_is_initialization(self, toy_data):
        params, history = train_toy(SMALL, toy_data, 0)
        fresh = init_model(SMALL)
        for (na, a, _), (nb, b, _) in zip(named_tensors(params), named_tensors(fresh)):
            assert na == nb and np.array_equal(a.data, b.data)
        assert history.rows == []

    def test_same_seed_same_loss(self, toy_data):
        settings = TrainSettings(batch_size=2, log_every=5)
        _, h1 = train_toy(SMALL, toy_data, 10, seed=4, settings=settings)
        _, h2 = train_toy(SMALL, toy_data, 10, seed=4, settings=settings)
        assert h1.losses == h2.losses
        assert h1.csv() == h2.csv()
        assert h1.csv().splitlines()[0] == "iter,loss,pixel_acc"
        assert [r[0] for r in h1.rows] == [5, 10]

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train_toy(SMALL, [], 1)

    @pytest.mark.slow
    def test_loss_trend_over_windows(self):
        data = gen_toy_dataset(200, seed=1)
        _, history = train_toy(TOY_MODEL, data, 1500, seed=0, settings=TOY_TRAIN)
        means = [np.mean(history.losses[i : i + 500]) for i in range(0, 1500, 500)]
        assert means[0] > means[1] > means[2]


class TestMiou:
    def test_perfect(self):
        truth = np.random.default_rng(0).integers(0, 3, (4, 8, 8))
        assert miou_from_confusion(confusion_matrix(truth, truth, 3)).miou == 1.0

    def test_disjoint_class(self):
        truth = np.array([[0, 0], [1, 1]])
        pred = np.array([[1, 1], [0, 0]])
        result = miou_from_confusion(confusion_matrix(pred, truth, 2))
        assert result.per_class.tolist() == [0.0, 0.0]

    def test_hand_counted(self):
        pred = np.array([[0, 0], [1, 1]])
        truth = np.array([[0, 1], [1, 1]])
        result = miou_from_confusion(confusion_matrix(pred, truth, 2))
        assert result.per_class.tolist() == pytest.approx([1 / 2, 2 / 3], abs=1e-15)
        assert result.miou == pytest.approx(7 / 12, abs=1e-15)
        assert result.pixel_acc == 0.75

    def test_absent_class_excluded(self):
        pred = truth = np.array([[0, 1], [1, 0]])
        result = miou_from_confusion(confusion_matrix(pred, truth, 3))
        assert np.isnan(result.per_class[2])
        assert result.miou == 1.0

    def test_ignore_index(self):
        truth = np.array([[0, 255], [1, 1]])
        pred = np.array([[0, 0], [1, 1]])
        assert confusion_matrix(pred, truth, 2).sum() == 3

    def test_evaluate_on_dataset(self, toy_data):
        result = evaluate_miou(init_model(SMALL), toy_data)
        assert result.confusion.sum() == len(toy_data) * 64 * 64
        assert 0.0 <= result.miou <= 1.0
