from __future__ import annotations

import numpy as np
import pytest

from fedelastic import model
from fedelastic.errors import ConfigurationError
from fedelastic.model import Dataset, ModelSpec

SPECS = [
    ModelSpec("linear", 5),
    ModelSpec("logistic", 5, 2),
    ModelSpec("logistic", 5, 4),
    ModelSpec("mlp", 5, 3, hidden=(7,)),
    ModelSpec("mlp", 5, 3, hidden=(6, 4), activation="tanh"),
    ModelSpec("mlp", 5, 4, hidden=(8, 6)),
]


def _data(spec, rng, n=23):
    X = rng.normal(size=(n, spec.input_dim))
    if spec.kind == "linear":
        return Dataset(X, rng.normal(size=n))
    return Dataset(X, rng.integers(0, spec.num_classes, size=n), spec.num_classes)


def fd_relative_errors(spec, rng, probes=20, h=1e-5):
    data = _data(spec, rng)
    errs = []
    for _ in range(probes):
        theta = rng.normal(scale=0.5, size=spec.num_params)
        v = rng.normal(size=spec.num_params)
        _, g = model.loss_and_grad(spec, theta, data)
        num = (model.loss(spec, theta + h * v, data) - model.loss(spec, theta - h * v, data)) / (2 * h)
        ana = float(g @ v)
        errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return errs


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.num_classes}-{s.hidden}-{s.activation}")
def test_gradient_matches_finite_differences(spec):
    errs = fd_relative_errors(spec, np.random.default_rng(7))
    assert max(errs) <= 1e-5


def test_param_counts():
    assert ModelSpec("linear", 5).num_params == 5
    assert ModelSpec("logistic", 5, 2).num_params == 6
    assert ModelSpec("logistic", 5, 4).num_params == 24
    assert ModelSpec("mlp", 784, 10, hidden=(200, 100)).num_params == 178110


def test_unflatten_returns_views():
    spec = ModelSpec("mlp", 3, 2, hidden=(4,))
    theta = np.zeros(spec.num_params)
    layers = model.unflatten(spec, theta)
    layers[0][0][0, 0] = 1.5
    assert theta[0] == 1.5
    assert np.array_equal(model.flatten(spec, layers), theta)


def test_linear_loss_closed_form():
    spec = ModelSpec("linear", 1)
    data = Dataset(np.array([[1.0], [2.0]]), np.array([1.0, 0.0]))
    loss, g = model.loss_and_grad(spec, np.array([1.0]), data)
    # residuals 0 and 2
    assert loss == pytest.approx(1.0)
    assert g[0] == pytest.approx(2.0)


def test_binary_logistic_stable_for_large_logits():
    spec = ModelSpec("logistic", 1, 2)
    data = Dataset(np.array([[1000.0], [-1000.0]]), np.array([1, 0]), 2)
    loss, g = model.loss_and_grad(spec, np.array([1.0, 0.0]), data)
    assert np.isfinite(loss) and loss < 1e-12
    assert np.all(np.isfinite(g))


def test_accuracy_and_predict(blobs):
    spec = ModelSpec("logistic", blobs.input_dim, 4)
    theta = np.zeros(spec.num_params)
    acc = model.accuracy(spec, theta, blobs)
    assert 0.0 <= acc <= 1.0
    with pytest.raises(ConfigurationError):
        model.accuracy(ModelSpec("linear", 6), np.zeros(6), Dataset(blobs.features, blobs.labels * 1.0))


@pytest.mark.parametrize("kwargs", [
    dict(kind="cnn", input_dim=3),
    dict(kind="linear", input_dim=0),
    dict(kind="linear", input_dim=3, num_classes=2),
    dict(kind="logistic", input_dim=3, num_classes=1),
    dict(kind="mlp", input_dim=3, num_classes=2),
    dict(kind="logistic", input_dim=3, num_classes=2, hidden=(4,)),
])
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        ModelSpec(**kwargs)


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), num_classes=3)


def test_batch_rejects_duplicates(blobs):
    with pytest.raises(ConfigurationError):
        blobs.batch([0, 0])


def test_init_params_convex_zero_mlp_scaled(rng):
    assert not model.init_params(ModelSpec("logistic", 4, 3), rng).any()
    spec = ModelSpec("mlp", 100, 3, hidden=(10,))
    theta = model.init_params(spec, rng)
    W0 = model.unflatten(spec, theta)[0][0]
    assert np.abs(W0).max() <= 0.1


def test_synthetic_is_deterministic_and_balanced():
    a = model.make_synthetic(3, 5, 99, 2.0, seed=1)
    b = model.make_synthetic(3, 5, 99, 2.0, seed=1)
    assert np.array_equal(a.features, b.features)
    assert np.bincount(a.labels).tolist() == [33, 33, 33]


def test_linear_zero_theta_zero_targets():
    spec = ModelSpec("linear", 3)
    data = Dataset(np.ones((4, 3)), np.zeros(4))
    assert model.loss(spec, np.zeros(3), data) == 0.0


def test_binary_logistic_at_zero_is_ln2(rng):
    spec = ModelSpec("logistic", 3, 2)
    data = Dataset(rng.normal(size=(9, 3)), rng.integers(0, 2, 9), 2)
    assert model.loss(spec, np.zeros(4), data) == pytest.approx(np.log(2), abs=1e-15)


def _scalar_mlp_forward(W1, b1, W2, b2, x, label):
    # independent oracle: explicit loops, no vectorisation
    hidden = []
    for j in range(len(b1)):
        z = b1[j] + sum(x[i] * W1[i][j] for i in range(len(x)))
        hidden.append(z if z > 0 else 0.0)
    logits = []
    for c in range(len(b2)):
        logits.append(b2[c] + sum(hidden[j] * W2[j][c] for j in range(len(hidden))))
    top = max(logits)
    lse = top + np.log(sum(np.exp(v - top) for v in logits))
    return lse - logits[label]


def test_mlp_loss_matches_scalar_oracle():
    spec = ModelSpec("mlp", 3, 2, hidden=(2,))
    theta = np.array([0.5, -0.3, 0.2, 0.8, -0.6, 0.1, 0.05, -0.1,
                      1.0, -1.0, 0.4, 0.7, 0.2, -0.2])
    X = np.array([[1.0, 2.0, -1.0], [0.0, -0.5, 0.3], [2.0, 0.1, 0.4]])
    y = np.array([0, 1, 1])
    (W1, b1), (W2, b2) = model.unflatten(spec, theta)
    want = np.mean([_scalar_mlp_forward(W1.tolist(), b1.tolist(), W2.tolist(), b2.tolist(), X[i], y[i])
                    for i in range(3)])
    assert model.loss(spec, theta, (X, y)) == pytest.approx(want, rel=1e-14)


def test_quadratic_gradient_is_identity(rng):
    d = 4
    spec = ModelSpec("linear", d)
    X = np.sqrt(d) * np.eye(d)  # mean of 1/2 (sqrt(d) theta_i)^2 over d rows = 1/2 ||theta||^2
    theta = rng.normal(size=d)
    loss, g = model.loss_and_grad(spec, theta, Dataset(X, np.zeros(d)))
    assert loss == pytest.approx(0.5 * theta @ theta)
    assert np.allclose(g, theta, rtol=1e-15, atol=0)


@pytest.mark.parametrize("C", [2, 3])
def test_logistic_bias_gradient_zero_for_balanced_labels(C, rng):
    spec = ModelSpec("logistic", 3, C)
    n = 6 * C
    data = Dataset(rng.normal(size=(n, 3)), np.arange(n) % C, C)
    g = model.grad(spec, np.zeros(spec.num_params), data)
    bias = model.unflatten(spec, g)[0][1]
    assert np.allclose(bias, 0.0, atol=1e-15)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.num_classes}-{s.hidden}")
def test_fd_with_small_step(spec):
    assert max(fd_relative_errors(spec, np.random.default_rng(11), h=1e-6)) <= 1e-5


def test_loss_is_permutation_invariant(rng):
    spec = ModelSpec("mlp", 5, 3, hidden=(4,))
    data = _data(spec, rng)
    theta = rng.normal(size=spec.num_params)
    perm = rng.permutation(len(data))
    assert model.loss(spec, theta, data.subset(perm)) == pytest.approx(model.loss(spec, theta, data), rel=1e-14)


def test_zero_separation_gives_equal_class_means():
    ds = model.make_synthetic(2, 3, 40000, 0.0, seed=0)
    m0 = ds.features[ds.labels == 0].mean(axis=0)
    m1 = ds.features[ds.labels == 1].mean(axis=0)
    assert np.abs(m0 - m1).max() < 0.05


def test_well_separated_blobs_are_learnable():
    ds = model.make_synthetic(2, 2, 400, 5.0, seed=0)
    spec = ModelSpec("logistic", 2, 2)
    theta = np.zeros(spec.num_params)
    for _ in range(200):
        theta -= 0.5 * model.grad(spec, theta, ds)
    assert model.accuracy(spec, theta, ds) >= 0.95
