import json
import logging
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from fedfed_sim import attacks, datasets, distillation, numerics
from fedfed_sim.attacks import AttackConfig
from fedfed_sim.datasets import LabeledDataset, LabelsPerClient, Lda, PartitionSpec, Subset
from fedfed_sim.distillation import DistillConfig
from fedfed_sim.errors import ConfigError, DomainError, FedFedError, ProtocolError
from fedfed_sim.federation import AggStrategy, FederationConfig, RoundLog, SharedAccess, run_federation
from fedfed_sim.utils import map_in_order, read_json_document, rng_stream, write_json_document, write_jsonl

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

DEFAULT_CONFIG_FILE = "default_config.json"
FEDFED_ARM = "fedfed"
BASELINE_ARM = "baseline"
RAW_ARM = "raw"
ARMS = (FEDFED_ARM, BASELINE_ARM, RAW_ARM)


def get_default_config():
    here = os.path.dirname(__file__)
    with open(os.path.join(here, "data", DEFAULT_CONFIG_FILE)) as f:
        return json.load(f)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _open_unit(v):
    return 0 < v < 1


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _at_least_one(v):
    return v >= 1


_DOMAIN_CHECKS = {
    "dataset.source": (lambda v: v in ("blobs", "idx", "csv"), "must be one of blobs, idx, csv"),
    "dataset.num_classes": (_at_least_one, "must be >= 1"),
    "dataset.dim": (_at_least_one, "must be >= 1"),
    "dataset.per_class": (_at_least_one, "must be >= 1"),
    "dataset.spread": (_positive, "must be > 0"),
    "dataset.test_fraction": (_open_unit, "must lie in (0, 1)"),
    "partition.method": (lambda v: v in ("lda", "labels", "subset"), "must be one of lda, labels, subset"),
    "partition.num_clients": (_at_least_one, "must be >= 1"),
    "partition.alpha": (_positive, "must be > 0"),
    "partition.labels_per_client": (_at_least_one, "must be >= 1"),
    "partition.dominant_fraction": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "distill.rounds": (_at_least_one, "must be >= 1"),
    "distill.local_epochs": (_at_least_one, "must be >= 1"),
    "distill.rho": (_open_unit, "must lie in (0, 1)"),
    "distill.sigma_s_sq": (_non_negative, "must be >= 0"),
    "distill.mechanism": (lambda v: v in ("gaussian", "laplace"), "must be gaussian or laplace"),
    "distill.share": (lambda v: v in ("features", "raw"), "must be features or raw"),
    "distill.clients_per_round": (_at_least_one, "must be >= 1"),
    "distill.batch_size": (_at_least_one, "must be >= 1"),
    "distill.lr": (_non_negative, "must be >= 0"),
    "distill.momentum": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "distill.robust_weight": (_non_negative, "must be >= 0"),
    "distill.generator_hidden": (_at_least_one, "must be >= 1"),
    "distill.classifier_hidden": (_at_least_one, "must be >= 1"),
    "federation.strategy": (
        lambda v: v in ("fedavg", "fedprox", "scaffold", "fednova"),
        "must be one of fedavg, fedprox, scaffold, fednova",
    ),
    "federation.mu": (_non_negative, "must be >= 0"),
    "federation.scaffold_variant": (lambda v: v in ("i", "ii"), "must be i or ii"),
    "federation.varrho": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "federation.rounds": (_non_negative, "must be >= 0"),
    "federation.local_epochs": (_non_negative, "must be >= 0"),
    "federation.clients_per_round": (_at_least_one, "must be >= 1"),
    "federation.lr": (_non_negative, "must be >= 0"),
    "federation.batch_size": (_at_least_one, "must be >= 1"),
    "federation.momentum": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "federation.weight_decay": (_non_negative, "must be >= 0"),
    "federation.hidden": (_at_least_one, "must be >= 1"),
    "federation.shared_access": (
        lambda v: v in ("full", "partial", "intermittent"),
        "must be one of full, partial, intermittent",
    ),
    "federation.shared_fraction": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "federation.shared_every": (_at_least_one, "must be >= 1"),
    "attack.top_k": (_at_least_one, "must be >= 1"),
    "attack.shadow_hidden": (_at_least_one, "must be >= 1"),
    "attack.shadow_epochs": (_non_negative, "must be >= 0"),
    "attack.attack_hidden": (_at_least_one, "must be >= 1"),
    "attack.attack_epochs": (_non_negative, "must be >= 0"),
    "attack.lr": (_non_negative, "must be >= 0"),
    "attack.batch_size": (_at_least_one, "must be >= 1"),
    "attack.inversion_steps": (_non_negative, "must be >= 0"),
    "attack.inversion_lr": (_non_negative, "must be >= 0"),
    "experiment.seeds": (lambda v: len(v) > 0, "must list at least one seed"),
    "experiment.target_acc": (lambda v: v is None or 0 <= v <= 1, "must be null or lie in [0, 1]"),
    "experiment.gamma": (_non_negative, "must be >= 0"),
}


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = _is_int(value)
    elif isinstance(default, float):
        ok = _is_number(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(_is_int(s) for s in value)
    else:
        ok = value is None or _is_number(value)
    if not ok:
        raise ConfigError(f"unexpected value {value!r} of type {type(value).__name__}", key=key)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Validated flat configuration; `values` maps every dotted key to its effective value
    """

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seeds(self):
        return list(self.values["experiment.seeds"])

    @property
    def target_acc(self):
        return self.values["experiment.target_acc"]

    @property
    def gamma(self):
        return float(self.values["experiment.gamma"])

    @property
    def log_timing(self):
        return self.values["experiment.log_timing"]

    def with_overrides(self, **overrides):
        """
        Copy with dotted keys replaced, e.g. cfg.with_overrides(**{"distill.sigma_s_sq": 0.3})
        """
        values = dict(self.values)
        values.update(overrides)
        return build_config(values)

    def partition_spec(self, seed):
        method = self.values["partition.method"]
        if method == "lda":
            m = Lda(float(self.values["partition.alpha"]))
        elif method == "labels":
            m = LabelsPerClient(self.values["partition.labels_per_client"])
        else:
            m = Subset(float(self.values["partition.dominant_fraction"]))
        return PartitionSpec(method=m, num_clients=self.values["partition.num_clients"], seed=seed)

    def distill_config(self, seed):
        return DistillConfig(
            rounds=self.values["distill.rounds"],
            local_epochs=self.values["distill.local_epochs"],
            rho=float(self.values["distill.rho"]),
            sigma_s_sq=float(self.values["distill.sigma_s_sq"]),
            mechanism=self.values["distill.mechanism"],
            share=self.values["distill.share"],
            batch_size=self.values["distill.batch_size"],
            lr=float(self.values["distill.lr"]),
            momentum=float(self.values["distill.momentum"]),
            robust_weight=float(self.values["distill.robust_weight"]),
            clients_per_round=self.values["distill.clients_per_round"],
            generator_hidden=self.values["distill.generator_hidden"],
            classifier_hidden=self.values["distill.classifier_hidden"],
            seed=seed,
        )

    def strategy(self, kind=None):
        return AggStrategy(
            kind=kind or self.values["federation.strategy"],
            mu=float(self.values["federation.mu"]),
            variant=self.values["federation.scaffold_variant"],
            varrho=float(self.values["federation.varrho"]),
        )

    def federation_config(self, seed):
        return FederationConfig(
            rounds=self.values["federation.rounds"],
            local_epochs=self.values["federation.local_epochs"],
            clients_per_round=self.values["federation.clients_per_round"],
            lr=float(self.values["federation.lr"]),
            batch_size=self.values["federation.batch_size"],
            momentum=float(self.values["federation.momentum"]),
            weight_decay=float(self.values["federation.weight_decay"]),
            hidden=self.values["federation.hidden"],
            shared_access=SharedAccess(
                mode=self.values["federation.shared_access"],
                fraction=float(self.values["federation.shared_fraction"]),
                every=self.values["federation.shared_every"],
            ),
            log_timing=self.log_timing,
            seed=seed,
        )

    def attack_config(self, seed):
        return AttackConfig(
            top_k=self.values["attack.top_k"],
            shadow_hidden=self.values["attack.shadow_hidden"],
            shadow_epochs=self.values["attack.shadow_epochs"],
            attack_hidden=self.values["attack.attack_hidden"],
            attack_epochs=self.values["attack.attack_epochs"],
            lr=float(self.values["attack.lr"]),
            batch_size=self.values["attack.batch_size"],
            inversion_steps=self.values["attack.inversion_steps"],
            inversion_lr=float(self.values["attack.inversion_lr"]),
            seed=seed,
        )


def build_config(document):
    """
    Applies defaults to a flat dotted-key document and validates every entry
    :raises ConfigError: naming the offending key
    """
    if not isinstance(document, dict):
        raise ConfigError(f"configuration must be a JSON object, got {type(document).__name__}")
    values = get_default_config()
    for key, value in document.items():
        if key not in values:
            raise ConfigError("unknown configuration key", key=key)
        _check_type(key, value, values[key])
        check = _DOMAIN_CHECKS.get(key)
        if check is not None and not check[0](value):
            raise ConfigError(f"{value!r} {check[1]}", key=key)
        values[key] = value
    if values["dataset.source"] == "idx" and not (values["dataset.images_path"] and values["dataset.labels_path"]):
        raise ConfigError("idx source needs dataset.images_path and dataset.labels_path", key="dataset.source")
    if values["dataset.source"] == "csv" and not values["dataset.csv_path"]:
        raise ConfigError("csv source needs dataset.csv_path", key="dataset.source")
    return ExperimentConfig(values)


def load_config(path):
    """
    Reads a flat JSON configuration. An empty file yields every default
    """
    try:
        document = read_json_document(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return build_config(document)


def save_config(cfg, path):
    write_json_document(cfg.values, path)
    logger.info(f"Configuration written to {path}")


def load_dataset(cfg, seed):
    """
    The configured dataset; synthetic blobs are drawn from `seed`
    """
    source = cfg["dataset.source"]
    if source == "blobs":
        return datasets.synthesize_blobs(
            cfg["dataset.num_classes"], cfg["dataset.dim"], cfg["dataset.per_class"], cfg["dataset.spread"], seed
        )
    if source == "idx":
        return datasets.load_idx(cfg["dataset.images_path"], cfg["dataset.labels_path"], cfg["dataset.num_classes"])
    return datasets.load_csv(cfg["dataset.csv_path"], cfg["dataset.num_classes"])


@dataclass
class Prepared:
    train: LabeledDataset
    test: LabeledDataset
    clients: list
    partition: datasets.PartitionResult


def prepare(cfg, seed):
    """
    Dataset, IID test split and client partition for one seed. Both arms of an experiment share it
    """
    data = load_dataset(cfg, seed)
    train, test = datasets.train_test_split(data, cfg["dataset.test_fraction"], seed)
    result = datasets.partition(train, cfg.partition_spec(seed))
    return Prepared(train=train, test=test, clients=result.client_datasets(train), partition=result)


def partition_report(cfg, seed):
    prepared = prepare(cfg, seed)
    histograms = datasets.class_histogram(prepared.train, prepared.partition)
    clients = [
        {"id": k, "size": int(sum(h)), "histogram": h, "entropy": datasets.label_entropy(h)}
        for k, h in enumerate(histograms)
    ]
    return {
        "seed": seed,
        "clients": clients,
        "mean_entropy": float(np.mean([c["entropy"] for c in clients])),
        "test_size": len(prepared.test),
    }


@dataclass(frozen=True)
class MetricsReport:
    """
    best_acc is the mean over seeds of each seed's best round; curve_best is the peak of the seed-averaged curve,
    which rounds_to_target is read from
    """

    best_acc: float
    rounds_to_target: int = None
    speedup: float = None
    curve_best: float = None

    def to_dict(self):
        return {
            "best_acc": self.best_acc,
            "curve_best": self.curve_best,
            "rounds_to_target": self.rounds_to_target,
            "speedup": self.speedup,
            "speedup_display": format_speedup(self.speedup),
        }


def metrics(logs, target_acc, baseline_rounds=None):
    """
    best accuracy, first round reaching target_acc, and baseline_rounds / rounds_to_target when both exist
    :param list logs: RoundLog stream of one run
    """
    if len(logs) == 0:
        raise DomainError("metrics needs at least one round log")
    best_acc = max(log.test_acc for log in logs)
    rounds_to_target = next((log.round for log in logs if log.test_acc >= target_acc), None)
    speedup = None
    if rounds_to_target is not None and baseline_rounds is not None:
        speedup = baseline_rounds / rounds_to_target
    return MetricsReport(best_acc=best_acc, rounds_to_target=rounds_to_target, speedup=speedup, curve_best=best_acc)


def format_speedup(speedup):
    if speedup is None:
        return "None"
    return f"×{speedup:.1f}"


def comm_overhead_ratio(num_clients, distill_rounds, rounds, beta, gamma=14.0):
    """
    Extra communication of feature distillation and sharing relative to plain training:
    T_d/(T_r beta) + gamma/(2 T_r beta) + gamma/(2 K T_r beta), gamma = data size * K / model size
    """
    if num_clients <= 0 or rounds <= 0:
        raise DomainError(f"num_clients and rounds must be > 0, got {num_clients}, {rounds}")
    if not 0 < beta <= 1:
        raise DomainError(f"beta must lie in (0, 1], got {beta}")
    if distill_rounds < 0 or gamma < 0:
        raise DomainError(f"distill_rounds and gamma must be >= 0, got {distill_rounds}, {gamma}")
    base = rounds * beta
    return distill_rounds / base + gamma / (2.0 * base) + gamma / (2.0 * num_clients * base)


def comm_overhead_from_sizes(num_clients, distill_rounds, rounds, beta, model_size, data_size):
    """
    Same ratio from raw sizes: (2 m T_d + a (K + 1)) / (2 m T_r beta) for model size m and per-client data size a
    """
    if model_size <= 0:
        raise DomainError(f"model_size must be > 0, got {model_size}")
    if data_size < 0:
        raise DomainError(f"data_size must be >= 0, got {data_size}")
    if num_clients <= 0 or rounds <= 0 or not 0 < beta <= 1:
        raise DomainError("num_clients and rounds must be > 0 and beta must lie in (0, 1]")
    return (2.0 * model_size * distill_rounds + data_size * (num_clients + 1)) / (
        2.0 * model_size * rounds * beta
    )


def _raw_share(prepared, distill_cfg):
    return distillation.share_features(prepared.clients, None, replace(distill_cfg, share=distillation.SHARE_RAW))


def _run_seed(cfg, seed, strategy):
    prepared = prepare(cfg, seed)
    distill_cfg = cfg.distill_config(seed)
    _, shared = distillation.run_feature_distillation(prepared.clients, distill_cfg)
    fed_cfg = cfg.federation_config(seed)
    runs = {}
    for arm, arm_shared in ((FEDFED_ARM, shared), (BASELINE_ARM, None), (RAW_ARM, _raw_share(prepared, distill_cfg))):
        try:
            logs, _ = run_federation(prepared.clients, arm_shared, strategy, fed_cfg, prepared.test)
        except FedFedError as e:
            raise type(e)(f"Arm {arm}, seed {seed}: {e}") from None
        logger.info(f"Arm {arm}, seed {seed}: best accuracy {max((l.test_acc for l in logs), default=0.0):.4f}")
        runs[arm] = logs
    return runs


def _mean_curve(per_seed_logs):
    """
    Seed-averaged accuracy curve, returned as RoundLog-like rows for metrics()
    """
    rows = []
    for round_logs in zip(*per_seed_logs):
        rows.append(
            RoundLog(
                round=round_logs[0].round,
                clients=[],
                train_loss=float(np.mean([l.train_loss for l in round_logs])),
                test_acc=float(np.mean([l.test_acc for l in round_logs])),
            )
        )
    return rows


@dataclass
class ExperimentResult:
    reports: dict
    logs: dict

    def to_dict(self):
        return {arm: report.to_dict() for arm, report in self.reports.items()}


def run_experiment(cfg, strategy_kind=None):
    """
    Runs the FedFed arm (protected features shared), the baseline arm (no sharing) and the raw arm (protected raw
    records shared) for every configured seed, on identical partitions and client streams.
    The target accuracy defaults to the peak of the baseline's seed-averaged curve.
    :return: ExperimentResult with one MetricsReport per arm and logs keyed by (arm, seed)
    """
    strategy = cfg.strategy(strategy_kind)
    seeds = cfg.seeds
    per_seed = map_in_order(lambda s: _run_seed(cfg, s, strategy), seeds)
    logs = {}
    for seed, runs in zip(seeds, per_seed):
        for arm, arm_logs in runs.items():
            logs[(arm, seed)] = arm_logs
    if cfg["federation.rounds"] == 0:
        return ExperimentResult(reports={}, logs=logs)

    curves = {arm: _mean_curve([runs[arm] for runs in per_seed]) for arm in ARMS}
    target = cfg.target_acc if cfg.target_acc is not None else max(l.test_acc for l in curves[BASELINE_ARM])
    baseline_rounds = metrics(curves[BASELINE_ARM], target).rounds_to_target
    reports = {}
    for arm in ARMS:
        seed_best = float(np.mean([max(l.test_acc for l in runs[arm]) for runs in per_seed]))
        reports[arm] = replace(metrics(curves[arm], target, baseline_rounds), best_acc=seed_best)
    return ExperimentResult(reports=reports, logs=logs)


def write_experiment_logs(result, out_dir):
    """
    One JSON-lines file per (arm, seed): <out_dir>/<arm>-seed<seed>.jsonl
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for (arm, seed), logs in sorted(result.logs.items()):
        path = os.path.join(out_dir, f"{arm}-seed{seed}.jsonl")
        write_jsonl([log.to_dict() for log in logs], path)
        paths.append(path)
    logger.info(f"Round logs written to {out_dir}")
    return paths


def _train_target(features, labels, num_classes, cfg, seed, purpose):
    arch = numerics.ArchSpec((features.shape[1], cfg["federation.hidden"], num_classes))
    return numerics.train_classifier(
        features,
        labels,
        arch,
        cfg["attack.shadow_epochs"],
        cfg["attack.lr"],
        cfg["attack.batch_size"],
        rng_stream(seed, purpose),
    )


def _pooled_target(prepared, cfg, seed):
    return _train_target(
        prepared.train.features, prepared.train.labels, prepared.train.num_classes, cfg, seed, "attack-target"
    )


def membership_split(prepared, seed):
    """
    Balanced evaluation sets: as many training samples (members) as there are test samples (non-members)
    """
    count = min(len(prepared.train), len(prepared.test))
    members = prepared.train.subset(np.sort(rng_stream(seed, "mia-members").permutation(len(prepared.train))[:count]))
    non_members = prepared.test.subset(np.arange(count))
    return members, non_members


def shadow_split(prepared, seed):
    """
    The training rows membership_split leaves out, halved into the attacker's shadow in and out sets
    """
    count = min(len(prepared.train), len(prepared.test))
    rest = rng_stream(seed, "mia-members").permutation(len(prepared.train))[count:]
    half = len(rest) // 2
    if half == 0:
        raise ProtocolError(f"Need at least 2 training rows outside the member set, got {len(rest)}")
    return prepared.train.subset(np.sort(rest[:half])), prepared.train.subset(np.sort(rest[half : 2 * half]))


@dataclass
class _Records:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _release_attack(prepared, theta, distill_cfg, cfg, seed):
    """
    The target learns from members' protected records, the shadow from protected shadow-in records.
    Both are queried with the clean sensitive part of their candidates, so shadow and target see the same domain
    """
    members, non_members = membership_split(prepared, seed)
    shadow_in, shadow_out = shadow_split(prepared, seed)

    def released(rows, purpose):
        return distillation.protect(rows.features, theta, distill_cfg, rng_stream(seed, purpose))

    def clean(rows):
        return _Records(distillation.sensitive_part(rows.features, theta, distill_cfg), rows.labels)

    num_classes = prepared.train.num_classes
    target = _train_target(
        released(members, "mia-release-target"), members.labels, num_classes, cfg, seed, "attack-target"
    )
    shadow = _train_target(
        released(shadow_in, "mia-release-shadow"), shadow_in.labels, num_classes, cfg, seed, "shadow"
    )
    return attacks.membership_inference(
        target,
        clean(members),
        clean(non_members),
        cfg.attack_config(seed),
        shadow=shadow,
        shadow_members=clean(shadow_in),
        shadow_non_members=clean(shadow_out),
    )


def sigma_sweep(cfg, sigmas, seeds=None):
    """
    Membership-inference recall on released records for each sharing-noise variance. What is released follows
    distill.share: protected features after distillation, or protected raw records
    :return: list of {"sigma_s_sq", "share", "recall", "precision"} rows, means over seeds
    """
    seeds = seeds if seeds is not None else cfg.seeds
    share = cfg["distill.share"]
    rows = []
    for sigma in sigmas:
        swept = cfg.with_overrides(**{"distill.sigma_s_sq": float(sigma)})

        def run_one(seed, swept=swept):
            prepared = prepare(swept, seed)
            distill_cfg = swept.distill_config(seed)
            theta = None
            if share != distillation.SHARE_RAW:
                theta, _ = distillation.run_feature_distillation(prepared.clients, distill_cfg)
            return _release_attack(prepared, theta, distill_cfg, swept, seed)

        reports = map_in_order(run_one, seeds)
        rows.append(
            {
                "sigma_s_sq": float(sigma),
                "share": share,
                "recall": float(np.mean([r.recall for r in reports])),
                "precision": float(np.mean([r.precision for r in reports])),
            }
        )
        logger.info(f"sigma_s_sq={sigma} ({share}): mean recall {rows[-1]['recall']:.4f}")
    return rows


def inversion_report(cfg, seed):
    """
    Inversion PSNR against true class centroids for a target trained on raw features and one trained on the
    protected shared features
    """
    prepared = prepare(cfg, seed)
    _, shared = distillation.run_feature_distillation(prepared.clients, cfg.distill_config(seed))
    centroids = attacks.class_centroids(prepared.train)
    raw_target = _pooled_target(prepared, cfg, seed)
    arch = raw_target.arch
    protected_target = attacks.train_shadow(
        shared, arch, cfg["attack.shadow_epochs"], seed, cfg["attack.lr"], cfg["attack.batch_size"]
    )
    steps, lr = cfg["attack.inversion_steps"], cfg["attack.inversion_lr"]
    raw = attacks.inversion_psnr(raw_target, centroids, steps, lr, [seed])
    protected = attacks.inversion_psnr(protected_target, centroids, steps, lr, [seed])
    return {
        "seed": seed,
        "raw": {"per_class": raw, "mean": float(np.mean(raw))},
        "protected": {"per_class": protected, "mean": float(np.mean(protected))},
    }
