"""Command-line entry point: ``bnfair <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""
import argparse
import json
import logging
import os
import sys

from . import accounting
from .errors import ConfigError, StageError
from .finetune import TuningPolicy
from .nn import load_checkpoint

# the pipeline pulls in matplotlib; commands that need it import it on demand

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _config(args):
    from .pipeline import ExperimentConfig
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg, args.out or cfg.output_dir


def _policies(args, cfg):
    if args.policy:
        return [TuningPolicy.parse(args.policy)]
    return list(cfg.policies)


def _pretrained(out):
    path = os.path.join(out, "pretrain.ckpt")
    if not os.path.exists(path):
        raise StageError("finetune", None, f"{path} missing; run `bnfair pretrain` first")
    return load_checkpoint(path)[0]


def cmd_synth(args):
    from .pipeline import stage_data
    cfg, out = _config(args)
    train, test = stage_data(cfg, out)
    print(f"wrote {len(train)} train / {len(test)} test samples to {os.path.join(out, 'data')}")


def cmd_pretrain(args):
    from .pipeline import load_or_make_data, stage_pretrain
    cfg, out = _config(args)
    train, _ = load_or_make_data(cfg, out)
    _, trace = stage_pretrain(cfg, out, train)
    print("epoch losses: " + ", ".join(f"{l:.4f}" for l in trace["epoch_losses"]))


def cmd_finetune(args):
    from .pipeline import load_or_make_data, stage_finetune
    cfg, out = _config(args)
    train, _ = load_or_make_data(cfg, out)
    pretrained = _pretrained(out)
    for policy in _policies(args, cfg):
        run = stage_finetune(cfg, out, pretrained, train, policy)
        print(f"{policy.value}: final loss {run.epoch_losses[-1] if run.epoch_losses else float('nan'):.4f}, "
              f"backward flops {run.counters['backward_flops']:,d}, {run.wall_clock:.1f}s")


def cmd_search(args):
    from .pipeline import load_or_make_data, stage_search
    cfg, out = _config(args)
    train, _ = load_or_make_data(cfg, out)
    pretrained = _pretrained(out)
    for policy in _policies(args, cfg):
        result = stage_search(cfg, out, pretrained, train, policy)
        print(f"{policy.value}: best trial {result.best_index}, "
              f"validation median F1-worst {result.best_score:.4f}")


def cmd_evaluate(args):
    from .pipeline import load_or_make_data, stage_evaluate
    cfg, out = _config(args)
    train, test = load_or_make_data(cfg, out)
    for policy in _policies(args, cfg):
        path = os.path.join(out, "runs", f"{policy.value}.ckpt")
        if not os.path.exists(path):
            if args.policy:
                raise StageError(f"evaluate:{policy.value}", cfg.seeds["finetune"],
                                 f"{path} missing")
            continue
        report = stage_evaluate(cfg, out, load_checkpoint(path)[0], train, test, policy)
        print(f"{policy.value}: median F1-worst {report.median_worst:.4f}, "
              f"median F1-gap {report.median_gap:.4f}")


def cmd_report(args):
    from .pipeline import stage_report
    cfg, out = _config(args)
    _, summary = stage_report(cfg, out)
    with open(os.path.join(out, "table.csv")) as fh:
        sys.stdout.write(fh.read())
    check = summary["ordering_check"]
    if check and not check["holds"]:
        print("warning: median F1-worst ordering Frozen <= BNStats <= FullFT violated: "
              + ", ".join(f"{k}={v:.4f}" for k, v in check["values"].items()))


def cmd_count_params(args):
    if args.arch == "resnet50":
        catalog = accounting.resnet50_catalog(args.head_out)
    else:
        cfg, _ = _config(args)
        catalog = accounting.desk_catalog(cfg.backbone, args.head_out)
    rows = accounting.accounting_table(catalog)
    print(f"{catalog.name}")
    print(accounting.format_table(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"params_{args.arch}.json"), "w") as fh:
            json.dump([r.to_dict() for r in rows], fh, indent=1, sort_keys=True)
            fh.write("\n")


def cmd_run(args):
    from .pipeline import run_experiment
    cfg, out = _config(args)
    _, summary = run_experiment(cfg, out)
    with open(os.path.join(out, "table.csv")) as fh:
        sys.stdout.write(fh.read())
    check = summary["ordering_check"]
    if check and not check["holds"]:
        print("warning: median F1-worst ordering Frozen <= BNStats <= FullFT violated: "
              + ", ".join(f"{k}={v:.4f}" for k, v in check["values"].items()))


def cmd_schema(args):
    from .pipeline import CONFIG_SCHEMA
    print(json.dumps(CONFIG_SCHEMA, indent=1))


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic dataset files"),
    "pretrain": (cmd_pretrain, "contrastive pretraining of the backbone"),
    "finetune": (cmd_finetune, "fine-tune under one (--policy) or all configured policies"),
    "evaluate": (cmd_evaluate, "prediction logs and fairness reports for fine-tuned runs"),
    "report": (cmd_report, "table.csv, distribution and parameter figures"),
    "count-params": (cmd_count_params, "per-policy parameter accounting table"),
    "search": (cmd_search, "20-trial random search per policy"),
    "run": (cmd_run, "full pipeline"),
    "schema": (cmd_schema, "print the config JSON schema"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="bnfair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--policy", help="restrict to one tuning policy")
        if name == "count-params":
            p.add_argument("--arch", choices=("resnet50", "desk"), default="resnet50")
            p.add_argument("--head-out", type=int, default=40)
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.policy is not None:
            try:
                TuningPolicy.parse(args.policy)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
