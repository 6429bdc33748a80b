import os
from unittest.mock import patch

import numpy as np
import pytest

from fedfed_sim import datasets, federation, numerics
from fedfed_sim.datasets import LabeledDataset
from fedfed_sim.errors import DimensionError, DomainError, ProtocolError
from fedfed_sim.federation import (
    AggStrategy,
    ClientState,
    ClientUpdate,
    FederationConfig,
    ServerState,
    SharedAccess,
    SharedView,
)
from fedfed_sim.numerics import ArchSpec, GradSet, ParamSet
from fedfed_sim.utils import rng_stream

ARCH = ArchSpec((4, 6, 3))


def _blobs(per_class=10, seed=0):
    return datasets.synthesize_blobs(3, 4, per_class, 0.1, seed)


def _equal_clients(num_clients=3, per_client=12, seed=0):
    data = _blobs(per_class=num_clients * per_client, seed=seed)
    order = np.random.default_rng(seed).permutation(len(data))
    return [data.subset(np.sort(order[k * per_client : (k + 1) * per_client])) for k in range(num_clients)], data


def _init(seed=1):
    return numerics.init_params(ARCH, np.random.default_rng(seed))


def _config(**overrides):
    settings = dict(rounds=3, local_epochs=1, clients_per_round=3, lr=0.1, batch_size=8, momentum=0.0, hidden=6, seed=5)
    settings.update(overrides)
    return FederationConfig(**settings)


def test_strategy_validation():
    with pytest.raises(DomainError):
        AggStrategy("fedsgd")
    with pytest.raises(DomainError):
        AggStrategy.fedprox(-0.1)
    with pytest.raises(DomainError):
        AggStrategy.scaffold("iii")
    with pytest.raises(DomainError):
        AggStrategy.fednova(1.0)


def test_sample_clients_all():
    assert federation.sample_clients(5, 5, np.random.default_rng(0)) == [0, 1, 2, 3, 4]


def test_sample_clients_is_deterministic_and_sorted():
    first = federation.sample_clients(10, 4, rng_stream(3, "fl-sample", 0))
    second = federation.sample_clients(10, 4, rng_stream(3, "fl-sample", 0))
    assert first == second
    assert first == sorted(first)
    assert len(set(first)) == 4


def test_sample_clients_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    for _ in range(10000):
        counts[federation.sample_clients(10, 5, rng)] += 1
    assert np.all(np.abs(counts / 10000 - 0.5) <= 0.02)


def test_sample_clients_rejects_too_many():
    with pytest.raises(DomainError):
        federation.sample_clients(3, 4, np.random.default_rng(0))


def test_combined_batch_loss_without_shared_batch_is_plain_loss():
    data = _blobs()
    phi = _init()
    plain_loss, plain_grads = numerics.loss_and_grad(phi, data.features, data.labels)
    loss, grads = federation.combined_batch_loss(phi, data.features, data.labels)
    empty_loss, _ = federation.combined_batch_loss(phi, data.features, data.labels, np.zeros((0, 4)), np.zeros(0))
    assert loss == plain_loss
    assert empty_loss == plain_loss
    assert np.array_equal(grads.flat, plain_grads.flat)


def test_combined_batch_loss_is_additive():
    data = _blobs()
    phi = _init()
    plain_loss, _ = federation.combined_batch_loss(phi, data.features, data.labels)
    doubled, _ = federation.combined_batch_loss(phi, data.features, data.labels, data.features, data.labels)
    assert doubled == 2 * plain_loss


def test_combined_batch_loss_zero_proximal_matches_fedavg():
    data = _blobs()
    phi = _init()
    anchor = _init(seed=9)
    loss, grads = federation.combined_batch_loss(phi, data.features, data.labels)
    prox_loss, prox_grads = federation.combined_batch_loss(phi, data.features, data.labels, proximal=(0.0, anchor))
    assert loss == prox_loss
    assert np.array_equal(grads.flat, prox_grads.flat)


def test_combined_batch_loss_rejects_foreign_labels():
    data = _blobs()
    with pytest.raises(DomainError):
        federation.combined_batch_loss(_init(), data.features, data.labels, data.features[:2], np.array([0, 5]))


def _local(strategy, epochs=1, seed=0, shared=None, server_c=None):
    clients, _ = _equal_clients()
    client = ClientState.create(0, clients[0], ARCH)
    return federation.local_train(
        client, _init(), shared, strategy, epochs, 0.1, 5, rng_stream(seed, "fl-local", 0, 0), server_c=server_c
    )


def test_scaffold_with_zero_variates_matches_fedavg_update():
    fedavg = _local(AggStrategy.fedavg())
    scaffold = _local(AggStrategy.scaffold())
    assert np.array_equal(scaffold.delta_phi.flat, (fedavg.phi - _init()).flat)


def test_scaffold_variant_ii_control_variate():
    update = _local(AggStrategy.scaffold(), epochs=2)
    expected = (_init().flat - (_init() + update.delta_phi).flat) / (2 * 0.1)
    assert update.c_k.flat == pytest.approx(expected, abs=1e-12)
    assert np.array_equal(update.delta_c.flat, update.c_k.flat)


def test_scaffold_variant_i_uses_the_global_gradient():
    update = _local(AggStrategy.scaffold("i"))
    assert update.c_k.arch == ARCH
    assert update.c_k.is_finite()
    assert update.delta_c.norm_sq() > 0


def test_scaffold_correction_changes_the_trajectory():
    shift = GradSet(ARCH, np.full(ARCH.num_params, 0.01))
    plain = _local(AggStrategy.scaffold())
    corrected = _local(AggStrategy.scaffold(), server_c=shift)
    assert not np.array_equal(plain.delta_phi.flat, corrected.delta_phi.flat)


def test_fednova_effective_steps():
    assert federation.fednova_steps(3, 0.0) == 3.0
    assert _local(AggStrategy.fednova(), epochs=3).a_k == 3.0
    varrho = 0.5
    expected = (3 - varrho * (1 - varrho**3) / (1 - varrho)) / (1 - varrho)
    assert federation.fednova_steps(3, varrho) == pytest.approx(expected)


@pytest.mark.parametrize(
    "strategy", [AggStrategy.fedavg(), AggStrategy.fedprox(0.1), AggStrategy.scaffold(), AggStrategy.fednova(0.5)]
)
def test_zero_local_epochs_is_a_zero_update(strategy):
    update = _local(strategy, epochs=0)
    if update.phi is not None:
        assert np.array_equal(update.phi.flat, _init().flat)
    else:
        assert np.all(update.delta_phi.flat == 0.0)


def test_local_train_draws_shared_batches():
    clients, data = _equal_clients()
    shared = SharedView(data.features, data.labels)
    with_shared = _local(AggStrategy.fedavg(), shared=shared)
    without = _local(AggStrategy.fedavg())
    assert not np.array_equal(with_shared.phi.flat, without.phi.flat)
    assert with_shared.train_loss > without.train_loss


def test_local_train_rejects_dimension_mismatch():
    client = ClientState.create(0, datasets.synthesize_blobs(3, 5, 4, 0.1, 0), ARCH)
    with pytest.raises(DimensionError):
        federation.local_train(client, _init(), None, AggStrategy.fedavg(), 1, 0.1, 4, np.random.default_rng(0))


def _update(client_id, n_k, **fields):
    return ClientUpdate(client_id=client_id, n_k=n_k, train_loss=0.0, lr=0.1, **fields)


def test_aggregate_single_participant_returns_its_model():
    phi = _init(3)
    server = ServerState.create(_init())
    new_server = federation.aggregate(server, [_update(0, 7, phi=phi)], AggStrategy.fedavg(), 10)
    assert np.array_equal(new_server.phi.flat, phi.flat)
    assert new_server.round == 1


def test_aggregate_equal_weights_average():
    arch = ArchSpec((1, 1))
    server = ServerState.create(ParamSet.zeros(arch))
    payloads = [
        _update(1, 5, phi=ParamSet(arch, np.full(2, 3.0))),
        _update(0, 5, phi=ParamSet(arch, np.full(2, 1.0))),
    ]
    assert np.array_equal(federation.aggregate(server, payloads, AggStrategy.fedavg(), 2).phi.flat, [2.0, 2.0])


def test_aggregate_weights_by_sample_count():
    arch = ArchSpec((1, 1))
    server = ServerState.create(ParamSet.zeros(arch))
    payloads = [
        _update(0, 1, phi=ParamSet(arch, np.full(2, 0.0))),
        _update(1, 3, phi=ParamSet(arch, np.full(2, 4.0))),
    ]
    assert federation.aggregate(server, payloads, AggStrategy.fedprox(0.1), 2).phi.flat == pytest.approx([3.0, 3.0])


def test_aggregate_scaffold_moves_the_server_variate():
    arch = ArchSpec((1, 1))
    server = ServerState.create(ParamSet(arch, np.ones(2)))
    payloads = [
        _update(0, 1, delta_phi=ParamSet(arch, np.full(2, 0.2)), delta_c=GradSet(arch, np.full(2, 1.0))),
        _update(1, 1, delta_phi=ParamSet(arch, np.full(2, 0.4)), delta_c=GradSet(arch, np.full(2, 3.0))),
    ]
    new_server = federation.aggregate(server, payloads, AggStrategy.scaffold(), 10)
    assert new_server.phi.flat == pytest.approx([1.3, 1.3])
    assert new_server.c.flat == pytest.approx([0.4, 0.4])


def test_aggregate_fednova_single_client_matches_fedavg():
    fedavg = _local(AggStrategy.fedavg())
    fednova = _local(AggStrategy.fednova())
    server = ServerState.create(_init())
    from_fedavg = federation.aggregate(server, [fedavg], AggStrategy.fedavg(), 3)
    from_fednova = federation.aggregate(server, [fednova], AggStrategy.fednova(), 3)
    assert np.max(np.abs(from_fedavg.phi.flat - from_fednova.phi.flat)) <= 1e-10


def test_aggregate_needs_payloads():
    with pytest.raises(ProtocolError):
        federation.aggregate(ServerState.create(_init()), [], AggStrategy.fedavg(), 3)


def test_zero_rounds_leave_the_model_untouched():
    clients, data = _equal_clients()
    init = _init()
    logs, server = federation.run_federation(clients, None, AggStrategy.fedavg(), _config(rounds=0), data, init=init)
    assert logs == []
    assert np.array_equal(server.phi.flat, init.flat)


def test_single_client_fedavg_is_centralized_sgd():
    data = _blobs()
    init = _init()
    cfg = _config(rounds=3, local_epochs=2, clients_per_round=1, momentum=0.5, weight_decay=1e-4)
    _, server = federation.run_federation([data], None, AggStrategy.fedavg(), cfg, data, init=init)

    phi = init
    for r in range(3):
        rng = rng_stream(cfg.seed, "fl-local", 0, r)
        velocity = GradSet.zeros(ARCH)
        for _ in range(2):
            order = rng.permutation(len(data))
            for start in range(0, len(data), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                _, grads = numerics.loss_and_grad(phi, data.features[idx], data.labels[idx])
                phi, velocity = numerics.sgd_step(phi, grads, cfg.lr, 0.5, 1e-4, velocity)
    assert np.array_equal(server.phi.flat, phi.flat)


def test_fedprox_with_zero_mu_is_fedavg_bitwise():
    clients, data = _equal_clients()
    cfg = _config(rounds=20, clients_per_round=2, momentum=0.9)
    fedavg_logs, fedavg = federation.run_federation(clients, None, AggStrategy.fedavg(), cfg, data, init=_init())
    prox_logs, prox = federation.run_federation(clients, None, AggStrategy.fedprox(0.0), cfg, data, init=_init())
    assert np.array_equal(fedavg.phi.flat, prox.phi.flat)
    assert [l.to_dict() for l in fedavg_logs] == [l.to_dict() for l in prox_logs]


def test_scaffold_first_round_matches_fedavg():
    clients, data = _equal_clients()
    cfg = _config(rounds=1)
    _, fedavg = federation.run_federation(clients, None, AggStrategy.fedavg(), cfg, data, init=_init())
    _, scaffold = federation.run_federation(clients, None, AggStrategy.scaffold(), cfg, data, init=_init())
    assert np.max(np.abs(fedavg.phi.flat - scaffold.phi.flat)) <= 1e-12


@pytest.mark.parametrize("rounds", [1, 3, 6])
def test_fednova_without_momentum_tracks_fedavg(rounds):
    clients, data = _equal_clients()
    cfg = _config(rounds=rounds, clients_per_round=2)
    _, fedavg = federation.run_federation(clients, None, AggStrategy.fedavg(), cfg, data, init=_init())
    _, fednova = federation.run_federation(clients, None, AggStrategy.fednova(), cfg, data, init=_init())
    assert np.max(np.abs(fedavg.phi.flat - fednova.phi.flat)) <= 1e-10


def test_round_logs_are_well_formed():
    clients, data = _equal_clients()
    shared = SharedView(data.features, data.labels)
    logs, _ = federation.run_federation(clients, shared, AggStrategy.fedavg(), _config(clients_per_round=2), data)
    assert [log.round for log in logs] == [1, 2, 3]
    for log in logs:
        assert len(log.clients) == 2
        assert 0.0 <= log.test_acc <= 1.0
        assert log.ms == 0
        assert set(log.to_dict()) == {"round", "clients", "train_loss", "test_acc", "ms"}


def test_parallel_clients_give_identical_logs():
    clients, data = _equal_clients()
    cfg = _config(rounds=4, clients_per_round=3)
    serial, _ = federation.run_federation(clients, None, AggStrategy.scaffold(), cfg, data)
    with patch.dict(os.environ, {"FEDFED_THREADS": "4"}):
        parallel, _ = federation.run_federation(clients, None, AggStrategy.scaffold(), cfg, data)
    assert [l.to_dict() for l in serial] == [l.to_dict() for l in parallel]


def test_run_federation_rejects_mismatched_shared_features():
    clients, data = _equal_clients()
    shared = SharedView(np.zeros((3, 7)), np.zeros(3, dtype=int))
    with pytest.raises(DimensionError):
        federation.run_federation(clients, shared, AggStrategy.fedavg(), _config(), data)


def test_shared_access_modes():
    features = np.arange(20, dtype=float).reshape(10, 2)
    shared = SharedView(features, np.zeros(10, dtype=int))
    full = SharedAccess().view(shared, 0, 0)
    assert np.array_equal(full.features, features)

    partial = SharedAccess("partial", fraction=0.3)
    assert len(partial.view(shared, 0, 0)) == 3
    assert np.array_equal(partial.view(shared, 0, 0).features, partial.view(shared, 7, 0).features)

    intermittent = SharedAccess("intermittent", fraction=0.5, every=2)
    assert np.array_equal(intermittent.view(shared, 0, 0).features, intermittent.view(shared, 1, 0).features)
    assert SharedAccess().view(None, 0, 0) is None


def test_shared_access_validation():
    with pytest.raises(DomainError):
        SharedAccess("sometimes")
    with pytest.raises(DomainError):
        SharedAccess("partial", fraction=0.0)
    with pytest.raises(DomainError):
        SharedAccess("intermittent", every=0)


def test_client_state_counts_samples():
    data = LabeledDataset(np.zeros((4, 4)), np.zeros(4, dtype=int), 3)
    state = ClientState.create(2, data, ARCH)
    assert state.n_k == 4
    assert state.c.norm_sq() == 0.0
