import numpy as np
import pytest

from fedfed_sim import numerics
from fedfed_sim.datasets import synthesize_blobs
from fedfed_sim.errors import DimensionError, DomainError, FormatError, NumericError
from fedfed_sim.numerics import IDENTITY, SQUARED_ERROR, ArchSpec, GradSet, ParamSet


def _relu_pattern(params, batch):
    _, pre_activations = numerics._forward_layers(params, batch)
    return [z > 0 for z in pre_activations[:-1]]


def _check_param_grads(fn, params, batch, analytic, h=1e-6):
    """
    Central differences of fn against analytic, skipping components whose perturbation flips a rectifier
    """
    base = _relu_pattern(params, batch)
    checked = 0
    for i in range(params.arch.num_params):
        step = np.zeros(params.arch.num_params)
        step[i] = h
        plus = ParamSet(params.arch, params.flat + step)
        minus = ParamSet(params.arch, params.flat - step)
        flipped = any(
            not np.array_equal(a, b) or not np.array_equal(a, c)
            for a, b, c in zip(base, _relu_pattern(plus, batch), _relu_pattern(minus, batch))
        )
        if flipped:
            continue
        numeric = (fn(plus) - fn(minus)) / (2 * h)
        assert numeric == pytest.approx(analytic[i], rel=1e-4, abs=1e-7)
        checked += 1
    assert checked > params.arch.num_params // 2


def _random_problem(seed, sizes=(4, 5, 3), n=6):
    rng = np.random.default_rng(seed)
    arch = ArchSpec(sizes)
    params = numerics.init_params(arch, rng)
    batch = rng.uniform(0.0, 1.0, size=(n, sizes[0]))
    labels = rng.integers(0, sizes[-1], size=n)
    return params, batch, labels


def test_arch_spec_counts_parameters():
    arch = ArchSpec((3, 4, 2))
    assert arch.num_params == 3 * 4 + 4 + 4 * 2 + 2
    assert arch.input_dim == 3
    assert arch.output_dim == 2
    assert [name for name, _ in arch.segment_shapes()] == ["W0", "b0", "W1", "b1"]


def test_arch_spec_rejects_bad_shapes():
    with pytest.raises(DomainError):
        ArchSpec((3,))
    with pytest.raises(DomainError):
        ArchSpec((3, 0, 2))
    with pytest.raises(DomainError):
        ArchSpec((3, 2), activation="tanh")


def test_arch_spec_dict_round_trip():
    arch = ArchSpec((5, 7, 5), output_kind=IDENTITY)
    assert ArchSpec.from_dict(arch.to_dict()) == arch


def test_param_set_checks_length_and_congruence():
    arch = ArchSpec((2, 2))
    with pytest.raises(DimensionError):
        ParamSet(arch, np.zeros(5))
    with pytest.raises(DimensionError):
        ParamSet.zeros(arch) + ParamSet.zeros(ArchSpec((2, 3)))


def test_segmented_arithmetic_keeps_type():
    arch = ArchSpec((2, 2))
    a = ParamSet(arch, np.arange(6.0))
    b = ParamSet(arch, np.ones(6))
    total = a + b * 2.0
    assert isinstance(total, ParamSet)
    assert np.array_equal(total.flat, np.arange(6.0) + 2.0)
    assert np.array_equal(a.flat, np.arange(6.0))


def test_init_params_is_seeded_and_zeroes_biases():
    arch = ArchSpec((4, 8, 3))
    first = numerics.init_params(arch, np.random.default_rng(3))
    second = numerics.init_params(arch, np.random.default_rng(3))
    assert np.array_equal(first.flat, second.flat)
    for _, b in first.layers():
        assert np.all(b == 0.0)


def test_forward_softmax_rows_sum_to_one():
    params, batch, _ = _random_problem(0)
    out = numerics.forward(params, batch)
    assert out.shape == (6, 3)
    assert np.allclose(out.sum(axis=1), 1.0)


def test_forward_rejects_wrong_input_dim():
    params, _, _ = _random_problem(0)
    with pytest.raises(DimensionError):
        numerics.forward(params, np.zeros((2, 7)))


@pytest.mark.parametrize("seed", range(50))
def test_cross_entropy_gradient_matches_finite_differences(seed):
    params, batch, labels = _random_problem(seed)
    _, grads = numerics.loss_and_grad(params, batch, labels)

    def loss(p):
        return numerics.loss_and_grad(p, batch, labels)[0]

    _check_param_grads(loss, params, batch, grads.flat)


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradient_of_a_deeper_network(seed):
    params, batch, labels = _random_problem(seed, sizes=(8, 6, 5, 3), n=7)
    _, grads = numerics.loss_and_grad(params, batch, labels)

    def loss(p):
        return numerics.loss_and_grad(p, batch, labels)[0]

    _check_param_grads(loss, params, batch, grads.flat)


@pytest.mark.parametrize("seed", range(10))
def test_proximal_gradient_matches_finite_differences(seed):
    params, batch, labels = _random_problem(seed)
    anchor = numerics.init_params(params.arch, np.random.default_rng(seed + 1000))
    _, grads = numerics.loss_and_grad(params, batch, labels, proximal=(0.7, anchor))

    def loss(p):
        return numerics.loss_and_grad(p, batch, labels, proximal=(0.7, anchor))[0]

    _check_param_grads(loss, params, batch, grads.flat)


def test_zero_proximal_coefficient_is_plain_loss():
    params, batch, labels = _random_problem(4)
    anchor = numerics.init_params(params.arch, np.random.default_rng(99))
    loss, grads = numerics.loss_and_grad(params, batch, labels)
    prox_loss, prox_grads = numerics.loss_and_grad(params, batch, labels, proximal=(0.0, anchor))
    assert loss == prox_loss
    assert np.array_equal(grads.flat, prox_grads.flat)


def test_negative_proximal_coefficient_is_rejected():
    params, batch, labels = _random_problem(4)
    with pytest.raises(DomainError):
        numerics.loss_and_grad(params, batch, labels, proximal=(-0.1, params))


def test_labels_out_of_range_are_rejected():
    params, batch, _ = _random_problem(1)
    with pytest.raises(DomainError):
        numerics.loss_and_grad(params, batch, np.array([0, 1, 2, 3, 0, 1]))


def test_squared_error_needs_identity_head():
    params, batch, _ = _random_problem(1)
    with pytest.raises(DomainError):
        numerics.loss_and_grad(params, batch, np.zeros((6, 3)), loss_kind=SQUARED_ERROR)


@pytest.mark.parametrize("seed", range(5))
def test_squared_error_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = numerics.init_params(ArchSpec((3, 6, 3), output_kind=IDENTITY), rng)
    batch = rng.uniform(0.0, 1.0, size=(5, 3))
    targets = rng.uniform(0.0, 1.0, size=(5, 3))
    _, grads = numerics.loss_and_grad(params, batch, targets, loss_kind=SQUARED_ERROR)

    def loss(p):
        return numerics.loss_and_grad(p, batch, targets, loss_kind=SQUARED_ERROR)[0]

    _check_param_grads(loss, params, batch, grads.flat)


@pytest.mark.parametrize("sizes", [(4, 5, 3), (8, 6, 5, 3)])
@pytest.mark.parametrize("seed", range(5))
def test_input_grad_matches_finite_differences(seed, sizes):
    params, batch, labels = _random_problem(seed, sizes=sizes)
    analytic = numerics.input_grad(params, batch, labels)
    base = _relu_pattern(params, batch)
    h = 1e-6
    checked = 0
    for i, j in np.ndindex(*batch.shape):
        plus, minus = batch.copy(), batch.copy()
        plus[i, j] += h
        minus[i, j] -= h
        if any(
            not np.array_equal(a, b) or not np.array_equal(a, c)
            for a, b, c in zip(base, _relu_pattern(params, plus), _relu_pattern(params, minus))
        ):
            continue
        numeric = (
            numerics.loss_and_grad(params, plus, labels)[0] - numerics.loss_and_grad(params, minus, labels)[0]
        ) / (2 * h)
        assert numeric == pytest.approx(analytic[i, j], rel=1e-4, abs=1e-7)
        checked += 1
    assert checked > 0


@pytest.mark.parametrize("seed", range(5))
def test_output_vjp_matches_finite_differences(seed):
    params, batch, _ = _random_problem(seed)
    upstream = np.random.default_rng(seed + 7).normal(size=(6, 3))
    grads, _ = numerics.output_vjp(params, batch, upstream)

    def projected(p):
        return float(np.sum(upstream * numerics.forward(p, batch)))

    _check_param_grads(projected, params, batch, grads.flat)


def test_sgd_step_applies_momentum_and_weight_decay():
    arch = ArchSpec((1, 1))
    params = ParamSet(arch, np.array([1.0, 2.0]))
    grads = GradSet(arch, np.array([0.5, -1.0]))
    velocity = GradSet(arch, np.array([1.0, 1.0]))
    new_params, new_velocity = numerics.sgd_step(params, grads, 0.1, 0.9, 0.01, velocity)
    assert new_velocity.flat == pytest.approx([1.41, -0.08])
    assert new_params.flat == pytest.approx([0.859, 2.008])
    assert isinstance(new_params, ParamSet)
    assert isinstance(new_velocity, GradSet)


def test_sgd_step_validates_hyperparameters():
    arch = ArchSpec((1, 1))
    params = ParamSet.zeros(arch)
    zeros = GradSet.zeros(arch)
    with pytest.raises(DomainError):
        numerics.sgd_step(params, zeros, -0.1, 0.0, 0.0, zeros)
    with pytest.raises(DomainError):
        numerics.sgd_step(params, zeros, 0.1, 1.0, 0.0, zeros)
    with pytest.raises(DomainError):
        numerics.sgd_step(params, zeros, 0.1, 0.0, -1.0, zeros)


def test_sgd_step_rejects_non_finite_gradients():
    arch = ArchSpec((1, 1))
    params = ParamSet.zeros(arch)
    bad = GradSet(arch, np.array([np.nan, 0.0]))
    with pytest.raises(NumericError):
        numerics.sgd_step(params, bad, 0.1, 0.0, 0.0, GradSet.zeros(arch))


def test_weighted_param_sum_averages():
    arch = ArchSpec((1, 1))
    a = ParamSet(arch, np.array([1.0, 1.0]))
    b = ParamSet(arch, np.array([3.0, 3.0]))
    assert np.array_equal(numerics.weighted_param_sum([(a, 0.5), (b, 0.5)]).flat, [2.0, 2.0])


def test_weighted_param_sum_single_entry_is_exact():
    params, _, _ = _random_problem(2)
    assert np.array_equal(numerics.weighted_param_sum([(params, 1.0)]).flat, params.flat)


def test_weighted_param_sum_needs_entries():
    with pytest.raises(DomainError):
        numerics.weighted_param_sum([])


def test_train_classifier_separates_blobs():
    data = synthesize_blobs(3, 5, 50, 0.05, seed=1)
    params = numerics.train_classifier(
        data.features, data.labels, ArchSpec((5, 16, 3)), 50, 0.5, 16, np.random.default_rng(0)
    )
    assert numerics.accuracy(params, data.features, data.labels) > 0.9


def test_train_classifier_with_zero_epochs_returns_init():
    arch = ArchSpec((5, 4, 3))
    features, labels = np.zeros((4, 5)), np.zeros(4, dtype=int)
    params = numerics.train_classifier(features, labels, arch, 0, 0.1, 2, np.random.default_rng(5))
    assert np.array_equal(params.flat, numerics.init_params(arch, np.random.default_rng(5)).flat)


def test_save_and_load_params(tmp_path):
    params, _, _ = _random_problem(3)
    path = tmp_path / "model.params"
    numerics.save_params(params, path)
    loaded = numerics.load_params(path)
    assert loaded.arch == params.arch
    assert np.array_equal(loaded.flat, params.flat)


def test_load_params_rejects_truncated_file(tmp_path):
    params, _, _ = _random_problem(3)
    path = tmp_path / "model.params"
    numerics.save_params(params, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        numerics.load_params(path)


def test_load_params_rejects_garbage_header(tmp_path):
    path = tmp_path / "model.params"
    path.write_bytes(b"not json\n\x00\x00")
    with pytest.raises(FormatError):
        numerics.load_params(path)
