import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FixedLogits
from semirobust.data import make_blobs
from semirobust.exceptions import ContractError
from semirobust.models import (
    MODELS,
    build_model,
    decision_value,
    gradient_check,
    input_gradient,
    load_checkpoint,
    parameter_gradient,
    parameter_hash,
    posteriors,
    predict,
    pseudo_label,
    save_checkpoint,
)
from semirobust.training import LRSchedule, TrainPlan, train


def test_predict_definition():
    m = FixedLogits(torch.log(torch.tensor([0.7, 0.2, 0.1])))
    p = predict(m, torch.zeros(1, 1, 2, 2))
    assert int(p.label) == 0
    assert float(p.decision_value) == pytest.approx(0.5, abs=1e-6)


def test_uniform_posteriors_tie_to_lowest_index():
    m = FixedLogits(torch.zeros(4))
    p = predict(m, torch.zeros(3, 1, 2, 2))
    assert p.label.tolist() == [0, 0, 0]
    assert torch.allclose(p.decision_value, torch.zeros(3))


def test_negative_decision_value_means_misclassified():
    m = FixedLogits(torch.log(torch.tensor([0.1, 0.5, 0.4])))
    x = torch.zeros(1, 1, 2, 2)
    d = decision_value(m, x, torch.tensor([2]))
    assert float(d) == pytest.approx(0.4 - 0.5, abs=1e-6)
    assert int(predict(m, x).label) != 2


@pytest.mark.parametrize("arch", sorted(MODELS))
def test_posterior_simplex(arch):
    m = build_model(arch, seed=0)
    p = posteriors(m, torch.rand(8, 1, 28, 28))
    assert (p >= 0).all()
    assert torch.allclose(p.sum(1), torch.ones(8), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_decision_value_sign_matches_correctness(seed):
    m = build_model("mlp", seed=seed % 7, in_shape=(1, 4, 4), num_classes=3)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(16, 1, 4, 4, generator=g)
    y = torch.randint(0, 3, (16,), generator=g)
    d = decision_value(m, x, y)
    correct = predict(m, x).label == y
    assert torch.equal(d > 0, correct & (d != 0)) or bool(((d > 0) == correct)[d != 0].all())


def test_pseudo_label_idempotent():
    m = build_model("cnn", seed=1)
    x = torch.rand(10, 1, 28, 28)
    assert torch.equal(pseudo_label(m, x), pseudo_label(m, x))
    assert not pseudo_label(m, x).requires_grad


def test_pseudo_label_matches_truth_after_training_on_separable_blobs():
    data = make_blobs(200, seed=0, num_classes=2, spread=0.05)
    model = build_model("linear", seed=0, in_shape=(1, 1, 2), num_classes=2)
    plan = TrainPlan("standard", epochs=60, batch_size=20, schedule=LRSchedule("constant", lr=0.5))
    model, _ = train(plan, model, data)
    assert torch.equal(pseudo_label(model, data.x), data.y)


def test_linear_gradient_matches_closed_form():
    # oracle: d/dx CE(Wx + b, y) = W^T (softmax(Wx + b) - e_y)
    m = build_model("linear", seed=3, in_shape=(1, 4, 4), num_classes=5)
    x = torch.rand(3, 1, 4, 4)
    y = torch.tensor([0, 3, 4])
    W = m.fc.weight.detach().double().numpy()
    b = m.fc.bias.detach().double().numpy()
    xf = x.flatten(1).double().numpy()
    z = xf @ W.T + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(3), y.numpy()] -= 1
    expected = (p @ W).reshape(3, 1, 4, 4)
    got = input_gradient(m, x, y).double().numpy()
    assert np.abs(got - expected).max() < 1e-6
    assert gradient_check(m, x[0], y[0]) < 1e-4


def test_zero_weight_model_gradient_is_zero():
    m = build_model("linear", in_shape=(1, 4, 4), num_classes=3)
    for p in m.parameters():
        torch.nn.init.zeros_(p)
    x = torch.rand(1, 1, 4, 4)
    assert torch.count_nonzero(input_gradient(m, x, torch.tensor([1]))) == 0
    assert gradient_check(m, x, torch.tensor([1])) < 1e-8


@pytest.mark.parametrize("arch", ["mlp", "cnn"])
def test_relu_gradient_check_probes(arch):
    # piecewise-linear nets: the step must not straddle a ReLU/max-pool kink
    m = build_model(arch, seed=0)
    g = np.random.default_rng(0)
    for i in range(10):
        x = torch.from_numpy(g.random((1, 28, 28)).astype(np.float32))
        assert gradient_check(m, x, torch.tensor([i % 10]), h=1e-6, seed=i) < 1e-3


def test_gradient_check_rejects_bad_step():
    with pytest.raises(ContractError):
        gradient_check(build_model("linear"), torch.rand(1, 28, 28), torch.tensor([0]), h=0)


def test_parameter_gradient_shapes():
    m = build_model("mlp", seed=0)
    grads = parameter_gradient(m, torch.rand(4, 1, 28, 28), torch.tensor([0, 1, 2, 3]))
    assert [g.shape for g in grads] == [p.shape for p in m.parameters()]


def test_seeded_build_is_reproducible():
    assert parameter_hash(build_model("cnn", seed=4)) == parameter_hash(build_model("cnn", seed=4))
    assert parameter_hash(build_model("cnn", seed=4)) != parameter_hash(build_model("cnn", seed=5))


def test_unknown_arch():
    with pytest.raises(ContractError):
        build_model("resnet")


def test_checkpoint_round_trip(tmp_path):
    m = build_model("mlp", seed=2, hidden=(8,), in_shape=(1, 4, 4), num_classes=3)
    path = save_checkpoint(m, tmp_path / "m.pt")
    back = load_checkpoint(path)
    assert parameter_hash(back) == parameter_hash(m)
    assert back.config == m.config
    with pytest.raises(ContractError):
        load_checkpoint(path, arch="cnn")
