import logging
import math
import sys
from dataclasses import dataclass

import numpy as np

from fedfed_sim import numerics
from fedfed_sim.errors import DimensionError, DomainError, ProtocolError
from fedfed_sim.numerics import ArchSpec
from fedfed_sim.utils import rng_stream

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

PSNR_CAP = 99.0


@dataclass(frozen=True)
class AttackConfig:
    top_k: int = 3
    shadow_hidden: int = 32
    shadow_epochs: int = 30
    attack_hidden: int = 16
    attack_epochs: int = 50
    lr: float = 0.1
    batch_size: int = 32
    inversion_steps: int = 200
    inversion_lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise DomainError(f"top_k must be >= 1, got {self.top_k}")
        if self.shadow_epochs < 0 or self.attack_epochs < 0 or self.inversion_steps < 0:
            raise DomainError("Epoch and step counts must be >= 0")
        if self.lr < 0 or self.inversion_lr < 0:
            raise DomainError("Learning rates must be >= 0")

    def shadow_arch(self, dim, num_classes):
        return ArchSpec((dim, self.shadow_hidden, num_classes))

    def attack_arch(self):
        return ArchSpec((self.top_k, self.attack_hidden, 2))


@dataclass(frozen=True)
class AttackReport:
    recall: float
    precision: float
    psnr: list = None

    def __post_init__(self):
        if not (0 <= self.recall <= 1 and 0 <= self.precision <= 1):
            raise DomainError(f"recall/precision out of [0, 1]: {self.recall}, {self.precision}")

    def to_dict(self):
        report = {"recall": self.recall, "precision": self.precision}
        if self.psnr is not None:
            report["psnr"] = list(self.psnr)
        return report


def psnr(a, b):
    """
    Peak signal-to-noise ratio in dB for unit-range signals; identical inputs report PSNR_CAP
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"PSNR inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        logger.debug(f"PSNR of identical signals capped at {PSNR_CAP}")
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def train_shadow(shared, arch, epochs, seed, lr=0.1, batch_size=32):
    """
    Classifier trained on the shared records, standing in for the target model
    :param shared: GlobalSharedDataset (or any object with features/labels arrays)
    """
    if len(shared) == 0:
        raise DomainError("Cannot train a shadow model on an empty shared dataset")
    return numerics.train_classifier(
        shared.features, shared.labels, arch, epochs, lr, batch_size, rng_stream(seed, "shadow")
    )


def _top_k_confidences(params, features, top_k):
    if top_k > params.arch.output_dim:
        raise DomainError(f"top_k={top_k} exceeds the {params.arch.output_dim} classes of the model")
    probs = numerics.forward(params, features)
    return -np.sort(-probs, axis=1)[:, :top_k]


def _attack_features(params, members, non_members, top_k):
    x = np.concatenate(
        [_top_k_confidences(params, members.features, top_k), _top_k_confidences(params, non_members.features, top_k)]
    )
    y = np.concatenate([np.ones(len(members), dtype=np.int64), np.zeros(len(non_members), dtype=np.int64)])
    return x, y


def _report(predicted_member, is_member):
    tp = int(np.sum(predicted_member & is_member))
    fn = int(np.sum(~predicted_member & is_member))
    fp = int(np.sum(predicted_member & ~is_member))
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    return AttackReport(recall=recall, precision=precision)


def _standardized(features):
    """
    Column-wise z-scores over the rows given; constant columns are only centered
    """
    std = features.std(axis=0)
    std[std < 1e-12] = 1.0
    return (features - features.mean(axis=0)) / std


def _balanced(features, labels, rng):
    """
    Keeps equally many rows of each label, dropping a seeded sample of the larger side
    """
    members, non_members = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    count = min(len(members), len(non_members))
    keep = np.sort(np.concatenate([rng.permutation(members)[:count], rng.permutation(non_members)[:count]]))
    return features[keep], labels[keep]


def _top_half(scores, rng):
    """
    Flags the half of the candidates with the highest scores, breaking ties at random
    """
    order = np.lexsort((rng.random(len(scores)), -scores))
    flagged = np.zeros(len(scores), dtype=bool)
    flagged[order[: len(scores) // 2]] = True
    return flagged


def membership_inference(
    target, members, non_members, cfg, shadow=None, shadow_members=None, shadow_non_members=None
):
    """
    Shadow-model membership inference. An attack classifier learns member/non-member from the shadow's sorted
    top-k confidences on equally many members and non-members. Confidences are standardized over each model's
    own candidates, so the attack transfers between a shadow and a target that differ in overall confidence.
    The evaluation pool is balanced, and the attacker flags the half of it that scores highest.
    Without a shadow, the target plays its own shadow on the evaluation data.
    :return: AttackReport with recall = TP / (TP + FN) over members
    """
    if len(members) != len(non_members):
        raise DomainError(f"Unbalanced evaluation: {len(members)} members vs {len(non_members)} non-members")
    if shadow is None:
        shadow, shadow_members, shadow_non_members = target, members, non_members
    if len(shadow_members) == 0 or len(shadow_non_members) == 0:
        raise ProtocolError("Attack training data holds a single class; need both members and non-members")

    train_x, train_y = _attack_features(shadow, shadow_members, shadow_non_members, cfg.top_k)
    train_x, train_y = _balanced(_standardized(train_x), train_y, rng_stream(cfg.seed, "mia-balance"))
    attack = numerics.train_classifier(
        train_x,
        train_y,
        cfg.attack_arch(),
        cfg.attack_epochs,
        cfg.lr,
        cfg.batch_size,
        rng_stream(cfg.seed, "mia-attack"),
    )
    eval_x, eval_y = _attack_features(target, members, non_members, cfg.top_k)
    scores = numerics.forward(attack, _standardized(eval_x))[:, 1]
    report = _report(_top_half(scores, rng_stream(cfg.seed, "mia-rank")), eval_y == 1)
    logger.info(f"Membership inference: recall {report.recall:.4f}, precision {report.precision:.4f}")
    return report


@dataclass
class _Rows:
    source: object
    index: np.ndarray

    @property
    def features(self):
        return self.source.features[self.index]

    @property
    def labels(self):
        return self.source.labels[self.index]

    def __len__(self):
        return len(self.index)


def run_membership_attack(shared, target, target_members, target_non_members, cfg):
    """
    Splits the shared records into shadow in/out halves, trains the shadow on the in half, and attacks the target
    """
    if len(shared) < 2:
        raise ProtocolError(f"Need at least 2 shared records to build shadow in/out sets, got {len(shared)}")
    order = rng_stream(cfg.seed, "mia-split").permutation(len(shared))
    half = len(shared) // 2
    shadow_in = _Rows(shared, order[:half])
    shadow_out = _Rows(shared, order[half : 2 * half])
    arch = cfg.shadow_arch(shared.features.shape[1], target.arch.output_dim)
    shadow = train_shadow(shadow_in, arch, cfg.shadow_epochs, cfg.seed, cfg.lr, cfg.batch_size)
    return membership_inference(
        target,
        target_members,
        target_non_members,
        cfg,
        shadow=shadow,
        shadow_members=shadow_in,
        shadow_non_members=shadow_out,
    )


def chance_baseline(count, seed):
    """
    Coin-flip attacker on `count` members and `count` non-members
    """
    rng = rng_stream(seed, "mia-chance")
    guesses = rng.random(2 * count) < 0.5
    truth = np.concatenate([np.ones(count, dtype=bool), np.zeros(count, dtype=bool)])
    return _report(guesses, truth)


def model_inversion(target, cls, dim, steps, lr, seed):
    """
    Gradient ascent on log p(cls | x) from a seeded uniform start, projected onto [0, 1]^dim after every step
    """
    if target.arch.input_dim != dim:
        raise DimensionError(f"Target expects {target.arch.input_dim} inputs, got dim {dim}")
    if not 0 <= cls < target.arch.output_dim:
        raise DomainError(f"Class {cls} outside [0, {target.arch.output_dim})")
    x = rng_stream(seed, "inversion", cls).uniform(0.0, 1.0, size=dim)
    label = np.array([cls])
    for _ in range(steps):
        x = np.clip(x - lr * numerics.input_grad(target, x[None, :], label)[0], 0.0, 1.0)
    return x


def class_centroids(data):
    """
    Mean feature vector per class; classes without samples get NaN rows
    """
    centroids = np.full((data.num_classes, data.dim), np.nan)
    for c in range(data.num_classes):
        rows = data.features[data.labels == c]
        if len(rows) > 0:
            centroids[c] = rows.mean(axis=0)
    return centroids


def inversion_psnr(target, centroids, steps, lr, seeds):
    """
    PSNR of each class inversion against its class centroid, averaged over seeds. Returns one value per class
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    values = []
    for c in range(len(centroids)):
        if np.any(np.isnan(centroids[c])):
            continue
        scores = [psnr(model_inversion(target, c, centroids.shape[1], steps, lr, s), centroids[c]) for s in seeds]
        values.append(float(np.mean(scores)))
    return values
