import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from fedfed_sim import numerics
from fedfed_sim.errors import DimensionError, DomainError, NumericError, ProtocolError
from fedfed_sim.numerics import ArchSpec, GradSet
from fedfed_sim.utils import map_in_order, rng_stream

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

FEDAVG = "fedavg"
FEDPROX = "fedprox"
SCAFFOLD = "scaffold"
FEDNOVA = "fednova"
STRATEGIES = (FEDAVG, FEDPROX, SCAFFOLD, FEDNOVA)

# SCAFFOLD control-variate refresh: (i) gradient at the global model, (ii) from the local model drift
SCAFFOLD_GRADIENT = "i"
SCAFFOLD_DRIFT = "ii"

SHARED_FULL = "full"
SHARED_PARTIAL = "partial"
SHARED_INTERMITTENT = "intermittent"


@dataclass(frozen=True)
class AggStrategy:
    kind: str = FEDAVG
    mu: float = 0.0
    variant: str = SCAFFOLD_DRIFT
    varrho: float = 0.0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise DomainError(f"Unknown aggregation strategy: {self.kind}. Expected one of {', '.join(STRATEGIES)}")
        if self.mu < 0:
            raise DomainError(f"FedProx mu must be >= 0, got {self.mu}")
        if self.variant not in (SCAFFOLD_GRADIENT, SCAFFOLD_DRIFT):
            raise DomainError(f"SCAFFOLD variant must be 'i' or 'ii', got {self.variant}")
        if not 0 <= self.varrho < 1:
            raise DomainError(f"FedNova varrho must lie in [0, 1), got {self.varrho}")

    @classmethod
    def fedavg(cls):
        return cls(FEDAVG)

    @classmethod
    def fedprox(cls, mu):
        return cls(FEDPROX, mu=mu)

    @classmethod
    def scaffold(cls, variant=SCAFFOLD_DRIFT):
        return cls(SCAFFOLD, variant=variant)

    @classmethod
    def fednova(cls, varrho=0.0):
        return cls(FEDNOVA, varrho=varrho)


@dataclass
class ClientState:
    id: int
    local_data: object
    phi: numerics.ParamSet
    c: GradSet
    velocity: GradSet

    @classmethod
    def create(cls, client_id, local_data, arch):
        return cls(
            id=client_id,
            local_data=local_data,
            phi=numerics.ParamSet.zeros(arch),
            c=GradSet.zeros(arch),
            velocity=GradSet.zeros(arch),
        )

    @property
    def n_k(self):
        return len(self.local_data)


@dataclass
class ServerState:
    phi: numerics.ParamSet
    c: GradSet
    round: int = 0

    @classmethod
    def create(cls, phi):
        return cls(phi=phi, c=GradSet.zeros(phi.arch))


@dataclass
class ClientUpdate:
    """
    What a client sends back after local training. Which fields are set depends on the strategy:
    fedavg/fedprox send phi, scaffold sends delta_phi and delta_c, fednova sends delta_phi and a_k
    """

    client_id: int
    n_k: int
    train_loss: float
    lr: float
    phi: numerics.ParamSet = None
    delta_phi: numerics.ParamSet = None
    delta_c: GradSet = None
    c_k: GradSet = None
    a_k: float = None


@dataclass(frozen=True)
class RoundLog:
    round: int
    clients: list
    train_loss: float
    test_acc: float
    ms: int = 0

    def to_dict(self):
        return {
            "round": self.round,
            "clients": list(self.clients),
            "train_loss": self.train_loss,
            "test_acc": self.test_acc,
            "ms": self.ms,
        }


@dataclass
class SharedView:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SharedAccess:
    """
    How clients see the shared dataset: the whole of it (full), one fixed random fraction (partial),
    or a fresh random fraction every `every` rounds (intermittent)
    """

    mode: str = SHARED_FULL
    fraction: float = 1.0
    every: int = 1

    def __post_init__(self):
        if self.mode not in (SHARED_FULL, SHARED_PARTIAL, SHARED_INTERMITTENT):
            raise DomainError(f"Unknown shared access mode: {self.mode}")
        if not 0 < self.fraction <= 1:
            raise DomainError(f"Shared fraction must lie in (0, 1], got {self.fraction}")
        if self.every < 1:
            raise DomainError(f"Shared refresh interval must be >= 1, got {self.every}")

    def view(self, shared, round_index, seed):
        if shared is None or len(shared) == 0:
            return None
        if self.mode == SHARED_FULL:
            return SharedView(shared.features, shared.labels)
        epoch = 0 if self.mode == SHARED_PARTIAL else round_index // self.every
        size = max(1, int(round(self.fraction * len(shared))))
        idx = np.sort(rng_stream(seed, "fl-shared", epoch).choice(len(shared), size=size, replace=False))
        return SharedView(shared.features[idx], shared.labels[idx])


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    local_epochs: int = 5
    clients_per_round: int = 5
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: int = 32
    shared_access: SharedAccess = field(default_factory=SharedAccess)
    log_timing: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise DomainError(f"rounds and local_epochs must be >= 0, got {self.rounds}, {self.local_epochs}")
        if self.clients_per_round < 1 or self.batch_size < 1:
            raise DomainError("clients_per_round and batch_size must be >= 1")


def sample_clients(num_clients, count, rng):
    """
    Uniform sample of `count` distinct client ids, sorted ascending
    """
    if not 1 <= count <= num_clients:
        raise DomainError(f"Cannot sample {count} clients out of {num_clients}")
    return sorted(int(k) for k in rng.choice(num_clients, size=count, replace=False))


def combined_batch_loss(phi, private_batch, private_labels, shared_batch=None, shared_labels=None, proximal=None):
    """
    Cross-entropy on the private batch plus cross-entropy on the shared batch.
    :param proximal: optional (mu, anchor) proximal term, counted once
    :return: (loss, GradSet)
    """
    loss, grads = numerics.loss_and_grad(phi, private_batch, private_labels, proximal=proximal)
    if shared_batch is not None and len(shared_batch) > 0:
        shared_loss, shared_grads = numerics.loss_and_grad(phi, shared_batch, shared_labels)
        loss = loss + shared_loss
        grads = grads + shared_grads
    return loss, grads


def fednova_steps(epochs, varrho):
    """
    Effective local step count a_k = [E - varrho(1 - varrho^E)/(1 - varrho)] / (1 - varrho); equals E at varrho = 0
    """
    if varrho == 0:
        return float(epochs)
    return (epochs - varrho * (1.0 - varrho**epochs) / (1.0 - varrho)) / (1.0 - varrho)


def local_train(
    client, global_phi, shared, strategy, epochs, lr, batch_size, rng, momentum=0.0, weight_decay=0.0, server_c=None
):
    """
    Local SGD for one client starting from the global model.
    Each step draws a private batch and, when shared data is given, a shared batch of the same size.
    :param ClientState client: the participant
    :param shared: object with `features` and `labels` arrays, or None
    :param AggStrategy strategy: decides the local objective and the payload
    :param numpy.random.Generator rng: the client's stream for this round
    :return: ClientUpdate
    """
    data = client.local_data
    if data.dim != global_phi.arch.input_dim:
        raise DimensionError(
            f"Client {client.id} features have dim {data.dim}, model expects {global_phi.arch.input_dim}"
        )
    if strategy.kind == FEDNOVA:
        momentum = strategy.varrho
    proximal = (strategy.mu, global_phi) if strategy.kind == FEDPROX else None
    if strategy.kind == SCAFFOLD:
        server_c = server_c if server_c is not None else GradSet.zeros(global_phi.arch)
        correction = server_c - client.c

    phi = global_phi
    velocity = GradSet.zeros(global_phi.arch)
    n = len(data)
    losses = []
    last_batch = None
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            shared_x, shared_y = None, None
            if shared is not None and len(shared) > 0:
                sidx = rng.integers(0, len(shared), size=len(idx))
                shared_x, shared_y = shared.features[sidx], shared.labels[sidx]
            loss, grads = combined_batch_loss(phi, data.features[idx], data.labels[idx], shared_x, shared_y, proximal)
            if strategy.kind == SCAFFOLD:
                grads = grads + correction
            phi, velocity = numerics.sgd_step(phi, grads, lr, momentum, weight_decay, velocity)
            losses.append(loss)
            last_batch = (data.features[idx], data.labels[idx], shared_x, shared_y)
    client.phi = phi
    client.velocity = velocity
    train_loss = float(np.mean(losses)) if losses else 0.0
    update = ClientUpdate(client_id=client.id, n_k=n, train_loss=train_loss, lr=lr)

    if strategy.kind in (FEDAVG, FEDPROX):
        update.phi = phi
    elif strategy.kind == SCAFFOLD:
        update.delta_phi = phi - global_phi
        if last_batch is None:
            c_new = client.c
        elif strategy.variant == SCAFFOLD_GRADIENT:
            _, c_new = combined_batch_loss(global_phi, *last_batch)
        elif lr > 0:
            c_new = client.c - server_c + GradSet(global_phi.arch, (global_phi.flat - phi.flat) / (epochs * lr))
        else:
            c_new = client.c
        update.delta_c = c_new - client.c
        update.c_k = c_new
    else:
        a_k = fednova_steps(epochs, strategy.varrho)
        update.a_k = a_k
        if a_k == 0 or lr == 0:
            update.delta_phi = numerics.ParamSet.zeros(global_phi.arch)
        else:
            update.delta_phi = (global_phi - phi) * (1.0 / (lr * a_k))
    return update


def aggregate(server, payloads, strategy, num_clients):
    """
    Reduces the client payloads of one round into the next server state, in ascending client-id order.
    :param int num_clients: K, the total client count, used by the SCAFFOLD control-variate step
    """
    if len(payloads) == 0:
        raise ProtocolError(f"Round {server.round + 1}: no client payloads to aggregate")
    payloads = sorted(payloads, key=lambda p: p.client_id)
    count = len(payloads)
    c = server.c
    if strategy.kind in (FEDAVG, FEDPROX):
        total = sum(p.n_k for p in payloads)
        if total == 0:
            raise ProtocolError(f"Round {server.round + 1}: participants hold no data")
        phi = numerics.weighted_param_sum([(p.phi, p.n_k / total) for p in payloads])
    elif strategy.kind == SCAFFOLD:
        mean_delta = numerics.weighted_param_sum([(p.delta_phi, 1.0 / count) for p in payloads])
        mean_dc = numerics.weighted_param_sum([(p.delta_c, 1.0 / count) for p in payloads])
        phi = server.phi + mean_delta
        c = c + mean_dc * (count / num_clients)
    else:
        mean_a = sum(p.a_k for p in payloads) / count
        mean_delta = numerics.weighted_param_sum([(p.delta_phi, 1.0 / count) for p in payloads])
        phi = server.phi - mean_delta * (payloads[0].lr * mean_a)
    if not phi.is_finite():
        raise NumericError(f"Round {server.round + 1}: aggregated model is not finite")
    return ServerState(phi=phi, c=c, round=server.round + 1)


def evaluate(phi, eval_set):
    if eval_set is None or len(eval_set) == 0:
        return 0.0
    return numerics.accuracy(phi, eval_set.features, eval_set.labels)


def model_arch(dim, num_classes, hidden):
    return ArchSpec((dim, hidden, num_classes))


def run_federation(clients, shared, strategy, cfg, eval_set, init=None):
    """
    Runs cfg.rounds rounds of sample -> broadcast -> local training -> aggregation -> evaluation.
    :param list clients: LabeledDataset per client
    :param shared: GlobalSharedDataset or None
    :param AggStrategy strategy: aggregation strategy
    :param FederationConfig cfg: federation settings
    :param eval_set: LabeledDataset for the per-round test accuracy
    :param init: optional initial global ParamSet
    :return: (list of RoundLog, final ServerState)
    """
    if len(clients) == 0:
        raise DomainError("Federation needs at least one client")
    dim, num_classes = clients[0].dim, clients[0].num_classes
    for k, data in enumerate(clients):
        if data.dim != dim or data.num_classes != num_classes:
            raise DimensionError(f"Client {k} data does not match dim {dim} / {num_classes} classes")
    if shared is not None and len(shared) > 0 and shared.features.shape[1] != dim:
        raise DimensionError(f"Shared features have dim {shared.features.shape[1]}, clients have {dim}")

    arch = init.arch if init is not None else model_arch(dim, num_classes, cfg.hidden)
    phi = init if init is not None else numerics.init_params(arch, rng_stream(cfg.seed, "fl-init"))
    server = ServerState.create(phi)
    states = [ClientState.create(k, data, arch) for k, data in enumerate(clients)]
    num_clients = len(clients)
    per_round = min(cfg.clients_per_round, num_clients)
    if per_round < cfg.clients_per_round:
        logger.warning(f"clients_per_round={cfg.clients_per_round} exceeds {num_clients} clients; sampling all of them")

    logs = []
    for r in range(cfg.rounds):
        started = time.perf_counter()
        selected = sample_clients(num_clients, per_round, rng_stream(cfg.seed, "fl-sample", r))
        view = cfg.shared_access.view(shared, r, cfg.seed)

        def train_one(k, server=server, view=view, r=r):
            try:
                return local_train(
                    states[k],
                    server.phi,
                    view,
                    strategy,
                    cfg.local_epochs,
                    cfg.lr,
                    cfg.batch_size,
                    rng_stream(cfg.seed, "fl-local", k, r),
                    momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay,
                    server_c=server.c,
                )
            except NumericError as e:
                raise NumericError(f"Round {r + 1}, client {k}: {e}") from None

        payloads = map_in_order(train_one, selected)
        for p in payloads:
            if p.c_k is not None:
                states[p.client_id].c = p.c_k
            logger.debug(f"Round {r + 1}: client {p.client_id} loss {p.train_loss:.4f}")
        server = aggregate(server, payloads, strategy, num_clients)
        test_acc = evaluate(server.phi, eval_set)
        ms = int(round((time.perf_counter() - started) * 1000)) if cfg.log_timing else 0
        log = RoundLog(
            round=r + 1,
            clients=selected,
            train_loss=float(np.mean([p.train_loss for p in payloads])),
            test_acc=test_acc,
            ms=ms,
        )
        logs.append(log)
        logger.info(f"Round {r + 1}/{cfg.rounds} [{strategy.kind}]: loss {log.train_loss:.4f}, test acc {test_acc:.4f}")
    return logs, server
