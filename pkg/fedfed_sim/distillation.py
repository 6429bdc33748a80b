import json
import logging
import sys
from dataclasses import dataclass

import numpy as np

from fedfed_sim import numerics
from fedfed_sim.attacks import psnr
from fedfed_sim.errors import DimensionError, DomainError, FormatError, NumericError
from fedfed_sim.federation import sample_clients
from fedfed_sim.numerics import IDENTITY, SOFTMAX, ArchSpec, GradSet
from fedfed_sim.privacy import GAUSSIAN, LAPLACE, NoiseMechanism, residual_norm_bounds, sample_noise
from fedfed_sim.utils import map_in_order, rng_stream

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

SHARE_FEATURES = "features"
SHARE_RAW = "raw"


@dataclass(frozen=True)
class DistillConfig:
    rounds: int = 15
    local_epochs: int = 5
    rho: float = 0.3
    sigma_s_sq: float = 0.15
    mechanism: str = GAUSSIAN
    share: str = SHARE_FEATURES
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    robust_weight: float = 50.0
    clients_per_round: int = 5
    generator_hidden: int = 64
    classifier_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise DomainError(f"rho must lie in (0, 1), got {self.rho}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise DomainError(f"rounds and local_epochs must be >= 1, got {self.rounds}, {self.local_epochs}")
        if self.sigma_s_sq < 0:
            raise DomainError(f"sigma_s_sq must be >= 0, got {self.sigma_s_sq}")
        if self.mechanism not in (GAUSSIAN, LAPLACE):
            raise DomainError(f"Unknown sharing mechanism: {self.mechanism}")
        if self.batch_size < 1 or self.clients_per_round < 1:
            raise DomainError("batch_size and clients_per_round must be >= 1")
        if self.lr < 0:
            raise DomainError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.robust_weight < 0:
            raise DomainError(f"robust_weight must be >= 0, got {self.robust_weight}")
        if self.share not in (SHARE_FEATURES, SHARE_RAW):
            raise DomainError(f"Unknown sharing mode: {self.share}")

    def generator_arch(self, dim):
        return ArchSpec((dim, self.generator_hidden, dim), output_kind=IDENTITY)

    def classifier_arch(self, dim, num_classes):
        return ArchSpec((dim, self.classifier_hidden, num_classes), output_kind=SOFTMAX)

    def sharing_mechanism(self):
        """
        Sharing noise with per-coordinate variance sigma_s_sq, or None when no noise is added
        """
        if self.sigma_s_sq == 0:
            return None
        return NoiseMechanism.with_variance(self.mechanism, self.sigma_s_sq)


@dataclass
class FeatureTriple:
    """
    x = x_r + x_s, with ||x_s|| <= rho * ||x||
    """

    x: np.ndarray
    x_s: np.ndarray
    x_r: np.ndarray


@dataclass(frozen=True)
class SharedRecord:
    x_p: np.ndarray
    label: int
    source_client: int


@dataclass
class GlobalSharedDataset:
    """
    Protected records, one row per local example of every client: x_s + noise, or x + noise when sharing raw
    """

    features: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray
    num_classes: int
    sigma_s_sq: float
    rho: float
    mechanism: str
    share: str = SHARE_FEATURES

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if not (len(self.features) == len(self.labels) == len(self.source_ids)):
            raise DimensionError("Shared features, labels and source ids must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("Shared features contain non-finite values")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def records(self):
        return [
            SharedRecord(self.features[i], int(self.labels[i]), int(self.source_ids[i])) for i in range(len(self))
        ]


def clip_norm(z, bound):
    """
    Projects z onto the l2 ball of radius bound
    """
    if bound < 0:
        raise DomainError(f"Clip bound must be >= 0, got {bound}")
    return _clip_rows(np.asarray(z, dtype=np.float64)[None, :], np.array([bound]))[0][0]


def _clip_rows(z, bounds):
    """
    Row-wise projection; returns (clipped rows, per-row scale factors)
    """
    norms = np.linalg.norm(z, axis=1)
    active = norms > bounds
    scale = np.ones(len(z))
    scale[active] = bounds[active] / norms[active]
    return z * scale[:, None], scale


def _check_generator(theta, dim):
    if theta.arch.input_dim != dim or theta.arch.output_dim != dim:
        raise DimensionError(f"Generator must map {dim} -> {dim}, got layers {theta.arch.layer_sizes}")


def split_batch(batch, theta, rho):
    """
    Vectorized split: returns (x_s, x_r) with x_s = clip(x - q(x; theta), rho * ||x||) and x_r = x - x_s
    :raises NumericError: when the generator output is not finite
    """
    batch = np.asarray(batch, dtype=np.float64)
    _check_generator(theta, batch.shape[1])
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    norms = np.linalg.norm(batch, axis=1)
    z = batch - numerics.forward(theta, batch)
    x_s, _ = _clip_rows(z, rho * norms)
    x_r = batch - x_s
    lower, upper = residual_norm_bounds(norms, rho)
    residual = np.linalg.norm(x_r, axis=1)
    if not np.all((residual >= lower * (1 - 1e-9)) & (residual <= upper * (1 + 1e-9))):
        raise NumericError("Generator output is not finite; cannot split features")
    return x_s, x_r


def split_features(x, theta, rho):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"split_features takes a single example, got shape {x.shape}")
    x_s, x_r = split_batch(x[None, :], theta, rho)
    return FeatureTriple(x=x, x_s=x_s[0], x_r=x_r[0])


def class_scatter(features, labels):
    """
    Between-class scatter sum_c (n_c / n) ||m_c - m||^2 of a batch, with its gradient (2 / n)(m_{y_i} - m) per row.
    Zero when every class present has the same mean.
    :return: (scatter, gradient with the shape of features)
    """
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n == 0:
        return 0.0, np.zeros_like(features)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    means = np.zeros((len(classes), features.shape[1]))
    np.add.at(means, inverse, features)
    means /= counts[:, None]
    deviation = means - features.mean(axis=0)
    scatter = float(np.sum(counts / n * np.sum(deviation**2, axis=1)))
    return scatter, (2.0 / n) * deviation[inverse]


def distillation_loss_and_grads(theta, w, batch, labels, rho, robust_weight=0.0):
    """
    Cross-entropy of classifier w on the clipped sensitive features, plus robust_weight times the between-class
    scatter of the robust features x_r, which pushes label information out of x_r and into x_s.
    Gradients cover both the generator theta and w. Where the clip is active its scale factor is held
    constant for the step.
    Returns (loss, theta grads, w grads)
    """
    batch = np.asarray(batch, dtype=np.float64)
    _check_generator(theta, batch.shape[1])
    z = batch - numerics.forward(theta, batch)
    x_s, scale = _clip_rows(z, rho * np.linalg.norm(batch, axis=1))
    loss, w_grads, d_xs = numerics.loss_and_input_grad(w, x_s, labels)
    if robust_weight > 0:
        scatter, d_xr = class_scatter(batch - x_s, labels)
        loss = loss + robust_weight * scatter
        d_xs = d_xs - robust_weight * d_xr
    d_z = d_xs * scale[:, None]
    theta_grads, _ = numerics.output_vjp(theta, batch, -d_z)
    return loss, theta_grads, w_grads


def distill_step(theta, w, batch, labels, rho, lr, robust_weight=0.0, momentum=0.0, velocity=None):
    """
    One SGD step of feature distillation.
    :param velocity: (theta velocity, w velocity) carried between steps, or None to start from rest
    Returns (theta', w', loss, velocity')
    """
    loss, theta_grads, w_grads = distillation_loss_and_grads(theta, w, batch, labels, rho, robust_weight)
    if not (np.isfinite(loss) and theta_grads.is_finite() and w_grads.is_finite()):
        raise NumericError(f"Feature distillation diverged (loss={loss}); reduce the learning rate")
    if velocity is None:
        velocity = (GradSet.zeros(theta.arch), GradSet.zeros(w.arch))
    theta, v_theta = numerics.sgd_step(theta, theta_grads, lr, momentum, 0.0, velocity[0])
    w, v_w = numerics.sgd_step(w, w_grads, lr, momentum, 0.0, velocity[1])
    return theta, w, loss, (v_theta, v_w)


def _local_distill(data, theta, w, cfg, rng):
    n = len(data)
    losses = []
    velocity = None
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            theta, w, loss, velocity = distill_step(
                theta,
                w,
                data.features[idx],
                data.labels[idx],
                cfg.rho,
                cfg.lr,
                robust_weight=cfg.robust_weight,
                momentum=cfg.momentum,
                velocity=velocity,
            )
            losses.append(loss)
    return theta, w, float(np.mean(losses)) if losses else 0.0


def run_feature_distillation(clients, cfg):
    """
    Federated feature distillation followed by one-shot sharing of protected features.
    :param list clients: LabeledDataset per client, all with the same dim and num_classes
    :param DistillConfig cfg: distillation settings
    :return: (trained generator ParamSet, GlobalSharedDataset)
    """
    if len(clients) == 0:
        raise DomainError("Feature distillation needs at least one client")
    dim, num_classes = clients[0].dim, clients[0].num_classes
    for k, data in enumerate(clients):
        if data.dim != dim or data.num_classes != num_classes:
            raise DimensionError(f"Client {k} data does not match dim {dim} / {num_classes} classes")

    theta = numerics.init_params(cfg.generator_arch(dim), rng_stream(cfg.seed, "distill-init-generator"))
    w = numerics.init_params(cfg.classifier_arch(dim, num_classes), rng_stream(cfg.seed, "distill-init-classifier"))
    num_clients = len(clients)
    per_round = cfg.clients_per_round
    if per_round > num_clients:
        logger.warning(f"clients_per_round={per_round} exceeds {num_clients} clients; sampling all of them")
        per_round = num_clients

    for t in range(cfg.rounds):
        selected = sample_clients(num_clients, per_round, rng_stream(cfg.seed, "distill-sample", t))
        active = [k for k in selected if len(clients[k]) > 0]
        if not active:
            continue

        def train_one(k, theta=theta, w=w, t=t):
            try:
                return _local_distill(clients[k], theta, w, cfg, rng_stream(cfg.seed, "distill-local", k, t))
            except NumericError as e:
                raise NumericError(f"Distillation round {t + 1}, client {k}: {e}") from None

        results = map_in_order(train_one, active)
        total = sum(len(clients[k]) for k in active)
        weights = [len(clients[k]) / total for k in active]
        theta = numerics.weighted_param_sum([(r[0], wt) for r, wt in zip(results, weights)])
        w = numerics.weighted_param_sum([(r[1], wt) for r, wt in zip(results, weights)])
        mean_loss = float(np.mean([r[2] for r in results]))
        logger.info(f"Distillation round {t + 1}/{cfg.rounds}: clients {active}, mean loss {mean_loss:.4f}")

    return theta, share_features(clients, theta, cfg)


def sensitive_part(features, theta, cfg):
    """
    The part of each row that leaves its client: x_s, or the whole of x when cfg.share is raw
    """
    features = np.asarray(features, dtype=np.float64)
    if cfg.share == SHARE_RAW:
        return features
    x_s, _ = split_batch(features, theta, cfg.rho)
    return x_s


def protect(features, theta, cfg, rng):
    """
    x_p = sensitive_part(x) + noise drawn from the configured sharing mechanism
    """
    part = sensitive_part(features, theta, cfg)
    mech = cfg.sharing_mechanism()
    if mech is None:
        return part
    return part + sample_noise(mech, part.shape, rng)


def share_features(clients, theta, cfg):
    """
    Every client emits one protected record per example; rows are ordered by client id.
    theta may be None when cfg.share is raw
    """
    features, labels, sources = [], [], []
    for k, data in enumerate(clients):
        if len(data) == 0:
            continue
        features.append(protect(data.features, theta, cfg, rng_stream(cfg.seed, "share", k)))
        labels.append(data.labels)
        sources.append(np.full(len(data), k))
    if not features:
        raise DomainError("No client holds any example to share")
    shared = GlobalSharedDataset(
        features=np.concatenate(features),
        labels=np.concatenate(labels),
        source_ids=np.concatenate(sources),
        num_classes=clients[0].num_classes,
        sigma_s_sq=cfg.sigma_s_sq,
        rho=cfg.rho,
        mechanism=cfg.mechanism,
        share=cfg.share,
    )
    logger.info(f"Collected {len(shared)} protected {cfg.share} records from {len(clients)} clients")
    return shared


def save_shared(shared, path):
    """
    Layout: JSON header line, then little-endian float64 features, int32 labels, int32 source ids
    """
    header = {
        "d": shared.dim,
        "C": shared.num_classes,
        "rho": shared.rho,
        "sigma_s_sq": shared.sigma_s_sq,
        "mechanism": shared.mechanism,
        "share": shared.share,
        "count": len(shared),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(shared.features.astype("<f8").tobytes())
        f.write(shared.labels.astype("<i4").tobytes())
        f.write(shared.source_ids.astype("<i4").tobytes())
    logger.info(f"Shared dataset written to {path}")


def load_shared(path):
    with open(path, "rb") as f:
        header_line = f.readline()
        body = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        dim, count = int(header["d"]), int(header["count"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Unreadable shared dataset header in {path}: {e}") from None
    feature_bytes = 8 * dim * count
    if len(body) != feature_bytes + 8 * count:
        raise FormatError(f"Shared dataset {path} holds {len(body)} bytes, expected {feature_bytes + 8 * count}")
    features = np.frombuffer(body[:feature_bytes], dtype="<f8").reshape(count, dim)
    labels = np.frombuffer(body[feature_bytes : feature_bytes + 4 * count], dtype="<i4")
    sources = np.frombuffer(body[feature_bytes + 4 * count :], dtype="<i4")
    return GlobalSharedDataset(
        features=features.astype(np.float64),
        labels=labels.astype(np.int64),
        source_ids=sources.astype(np.int64),
        num_classes=int(header["C"]),
        sigma_s_sq=float(header["sigma_s_sq"]),
        rho=float(header["rho"]),
        mechanism=header["mechanism"],
        share=header.get("share", SHARE_FEATURES),
    )


def psnr_report(data, theta, rho):
    """
    Mean PSNR of x against its robust part x_r and against its sensitive part x_s
    """
    x_s, x_r = split_batch(data.features, theta, rho)
    return {
        "psnr_x_xr": float(np.mean([psnr(x, r) for x, r in zip(data.features, x_r)])),
        "psnr_x_xs": float(np.mean([psnr(x, s) for x, s in zip(data.features, x_s)])),
    }


def utility_report(train, test, theta, rho, hidden=32, epochs=30, lr=0.1, batch_size=32, seed=0):
    """
    Test accuracy of fresh classifiers trained on x, on x_s and on x_r
    """
    views = {"x": (train.features, test.features)}
    train_s, train_r = split_batch(train.features, theta, rho)
    test_s, test_r = split_batch(test.features, theta, rho)
    views["x_s"] = (train_s, test_s)
    views["x_r"] = (train_r, test_r)
    arch = ArchSpec((train.dim, hidden, train.num_classes))
    report = {}
    for name, (train_x, test_x) in views.items():
        params = numerics.train_classifier(
            train_x, train.labels, arch, epochs, lr, batch_size, rng_stream(seed, "utility", len(report))
        )
        report[name] = numerics.accuracy(params, test_x, test.labels)
    return report
