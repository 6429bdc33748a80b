import argparse
import json
import logging
import math
import sys

from fedfed_sim import attacks, distillation, harness, numerics, privacy
from fedfed_sim.errors import FedFedError, NumericError
from fedfed_sim.federation import STRATEGIES, run_federation
from fedfed_sim.utils import to_json_line, write_jsonl

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3


def _emit(document):
    print(json.dumps(document, indent=2, sort_keys=True))


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _config(args):
    if args.config:
        return harness.load_config(args.config)
    return harness.build_config({})


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.seeds[0]


def partition_report(args):
    cfg = _config(args)
    _emit(harness.partition_report(cfg, _seed(args, cfg)))


def distill(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    prepared = harness.prepare(cfg, seed)
    distill_cfg = cfg.distill_config(seed)
    theta, shared = distillation.run_feature_distillation(prepared.clients, distill_cfg)
    distillation.save_shared(shared, args.out)
    if args.generator:
        numerics.save_params(theta, args.generator)
    report = {"records": len(shared), "out": args.out}
    report.update(distillation.psnr_report(prepared.train, theta, distill_cfg.rho))
    _emit(report)


def train(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    prepared = harness.prepare(cfg, seed)
    shared = distillation.load_shared(args.shared) if args.shared else None
    logs, server = run_federation(
        prepared.clients, shared, cfg.strategy(args.strategy), cfg.federation_config(seed), prepared.test
    )
    rows = [log.to_dict() for log in logs]
    if args.logs:
        write_jsonl(rows, args.logs)
    else:
        for row in rows:
            print(to_json_line(row))
    if args.checkpoint:
        numerics.save_params(server.phi, args.checkpoint)
        logger.info(f"Global model written to {args.checkpoint}")


def attack_mia(args):
    cfg = _config(args)
    if args.sweep_sigma:
        if args.share:
            cfg = cfg.with_overrides(**{"distill.share": args.share})
        _emit({"sweep": harness.sigma_sweep(cfg, args.sweep_sigma)})
        return
    if not (args.target and args.shared):
        raise FedFedError("attack mia needs --target and --shared, or --sweep-sigma")
    seed = _seed(args, cfg)
    prepared = harness.prepare(cfg, seed)
    members, non_members = harness.membership_split(prepared, seed)
    report = attacks.run_membership_attack(
        distillation.load_shared(args.shared),
        numerics.load_params(args.target),
        members,
        non_members,
        cfg.attack_config(seed),
    )
    _emit(report.to_dict())


def attack_invert(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    if not args.target:
        _emit(harness.inversion_report(cfg, seed))
        return
    prepared = harness.prepare(cfg, seed)
    values = attacks.inversion_psnr(
        numerics.load_params(args.target),
        attacks.class_centroids(prepared.train),
        cfg["attack.inversion_steps"],
        cfg["attack.inversion_lr"],
        [seed],
    )
    _emit({"seed": seed, "per_class": values, "mean": sum(values) / len(values) if values else None})


def privacy_report(args):
    report = privacy.privacy_report(args.rho, args.rounds, args.delta, args.sigma_s, args.clients, args.hat_delta)
    if args.sweep:
        report["sweep"] = privacy.epsilon_sweep(args.sweep, args.rho, args.rounds, args.delta)
    _emit(report)


def overhead(args):
    if (args.model_size is None) != (args.data_size is None):
        raise FedFedError("--model-size and --data-size go together")
    if args.model_size is not None:
        ratio = harness.comm_overhead_from_sizes(
            args.clients, args.distill_rounds, args.rounds, args.beta, args.model_size, args.data_size
        )
    else:
        gamma = args.gamma if args.gamma is not None else _config(args).gamma
        ratio = harness.comm_overhead_ratio(args.clients, args.distill_rounds, args.rounds, args.beta, gamma)
    _emit({"ratio": ratio, "percent": round(100.0 * ratio, 2)})


def experiment(args):
    cfg = _config(args)
    result = harness.run_experiment(cfg, args.strategy)
    if args.out_dir:
        harness.write_experiment_logs(result, args.out_dir)
    _emit(result.to_dict())


def _add_config_args(parser):
    parser.add_argument("--config", help="Flat JSON configuration file. Defaults apply to missing keys")
    parser.add_argument("--seed", type=int, help="Seed to run. Defaults to the first of experiment.seeds")


def build_parser():
    parser = argparse.ArgumentParser(
        description="Federated learning simulator with shared, noise-protected performance-sensitive features"
    )
    subparsers = parser.add_subparsers(dest="subcommand")

    report_parser = subparsers.add_parser(
        "partition-report", help="Per-client label histograms and label entropy of the configured partition"
    )
    _add_config_args(report_parser)
    report_parser.set_defaults(func=partition_report)

    distill_parser = subparsers.add_parser(
        "distill", help="Runs feature distillation and writes the globally shared dataset"
    )
    _add_config_args(distill_parser)
    distill_parser.add_argument("--out", required=True, help="Path of the shared dataset file to write")
    distill_parser.add_argument("--generator", help="Optional path to checkpoint the trained generator")
    distill_parser.set_defaults(func=distill)

    train_parser = subparsers.add_parser("train", help="Runs federated training and emits JSON-lines round logs")
    _add_config_args(train_parser)
    train_parser.add_argument("--shared", help="Shared dataset written by `distill`. Omit to train without sharing")
    train_parser.add_argument(
        "--strategy", choices=STRATEGIES, help="Aggregation strategy. Defaults to federation.strategy"
    )
    train_parser.add_argument("--logs", help="Write round logs to this file instead of stdout")
    train_parser.add_argument("--checkpoint", help="Optional path to checkpoint the final global model")
    train_parser.set_defaults(func=train)

    attack_parser = subparsers.add_parser("attack", help="Privacy attacks against trained models")
    attack_subparsers = attack_parser.add_subparsers(dest="attack")
    mia_parser = attack_subparsers.add_parser("mia", help="Shadow-model membership inference")
    _add_config_args(mia_parser)
    mia_parser.add_argument("--target", help="Target model checkpoint")
    mia_parser.add_argument("--shared", help="Shared dataset the shadow model is trained on")
    mia_parser.add_argument(
        "--sweep-sigma",
        type=_parse_floats,
        help="Comma-separated sharing-noise variances, e.g. 0.05,0.15,0.3. Trains its own targets",
    )
    mia_parser.add_argument(
        "--share",
        choices=(distillation.SHARE_FEATURES, distillation.SHARE_RAW),
        help="What the sweep releases. Defaults to distill.share",
    )
    mia_parser.set_defaults(func=attack_mia)
    invert_parser = attack_subparsers.add_parser("invert", help="Model inversion scored by PSNR to class centroids")
    _add_config_args(invert_parser)
    invert_parser.add_argument(
        "--target", help="Target model checkpoint. Without it, raw and protected targets are trained and compared"
    )
    invert_parser.set_defaults(func=attack_invert)

    privacy_parser = subparsers.add_parser("privacy", help="Privacy accounting")
    privacy_subparsers = privacy_parser.add_subparsers(dest="privacy")
    privacy_report_parser = privacy_subparsers.add_parser("report", help="Per-client and composed budgets")
    privacy_report_parser.add_argument("--rho", type=float, default=0.3, help="Clipping ratio. Default 0.3")
    privacy_report_parser.add_argument("--rounds", type=int, default=15, help="Distillation rounds. Default 15")
    privacy_report_parser.add_argument("--delta", type=float, default=1e-5, help="Per-client delta. Default 1e-5")
    privacy_report_parser.add_argument(
        "--sigma-s", type=float, default=math.sqrt(0.15), help="Sharing-noise standard deviation. Default sqrt(0.15)"
    )
    privacy_report_parser.add_argument("--clients", type=int, default=10, help="Composed clients k. Default 10")
    privacy_report_parser.add_argument("--hat-delta", type=float, default=1e-5, help="Composition slack. Default 1e-5")
    privacy_report_parser.add_argument(
        "--sweep", type=_parse_floats, help="Comma-separated sharing-noise variances to report epsilon for"
    )
    privacy_report_parser.set_defaults(func=privacy_report)

    overhead_parser = subparsers.add_parser("overhead", help="Extra communication ratio of feature sharing")
    overhead_parser.add_argument("--clients", type=int, required=True, help="Number of clients K")
    overhead_parser.add_argument("--distill-rounds", type=int, default=15, help="Distillation rounds. Default 15")
    overhead_parser.add_argument("--rounds", type=int, default=1000, help="Training rounds. Default 1000")
    overhead_parser.add_argument("--beta", type=float, required=True, help="Client sampling rate in (0, 1]")
    overhead_parser.add_argument("--config", help="Flat JSON configuration file supplying experiment.gamma")
    overhead_parser.add_argument(
        "--gamma", type=float, help="Data-to-model size ratio. Defaults to experiment.gamma of the configuration"
    )
    overhead_parser.add_argument("--model-size", type=float, help="Model size m; use with --data-size instead of gamma")
    overhead_parser.add_argument("--data-size", type=float, help="Per-client data size a; use with --model-size")
    overhead_parser.set_defaults(func=overhead)

    experiment_parser = subparsers.add_parser(
        "experiment", help="Runs the feature-sharing, no-sharing and raw-sharing arms for every configured seed"
    )
    experiment_parser.add_argument("--config", help="Flat JSON configuration file. Defaults apply to missing keys")
    experiment_parser.add_argument("--strategy", choices=STRATEGIES, help="Overrides federation.strategy")
    experiment_parser.add_argument("--out-dir", help="Directory for per-arm, per-seed JSON-lines round logs")
    experiment_parser.set_defaults(func=experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra_args = parser.parse_known_args(argv)
    if args.subcommand is None or not hasattr(args, "func"):
        parser.print_help()
        return EXIT_OK
    try:
        args.func(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC_ERROR
    except (FedFedError, OSError) as e:
        logger.error(f"{args.subcommand} failed: {e}")
        return EXIT_INPUT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
