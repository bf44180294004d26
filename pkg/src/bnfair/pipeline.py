"""Config-driven experiment pipeline: data -> pretrain -> fine-tune -> evaluate -> report.

Output directory layout::

    data/{train,test}_features.bin, data/{train,test}_attributes.csv
    pretrain.ckpt, pretrain_log.json
    runs/<Policy>.ckpt, runs/<Policy>.json
    search/<Policy>.json                (search enabled only)
    predictions/<Policy>_{train,test}.pred
    reports/<Policy>.json
    comparison.json, table.csv, distribution.svg, distribution_values.csv,
    distribution_summary.csv, params.svg, config.json

No file contains a timestamp or a wall-clock measurement.
"""
import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import accounting
from .core.rng import RngStream
from .data import Dataset, DatasetSpec, generate_dataset, load_external, save_dataset
from .errors import ConfigError, StageError  # noqa: F401  (re-exported)
from .finetune import (Hyperparameters, SearchSpace, TrainingDiverged, TuningPolicy, finetune,
                       prediction_log, random_search)
from .metrics import evaluate_fairness, read_prediction_log, write_prediction_log
from .nn import BackboneSpec, Model, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, PretrainDivergence, pretrain
from .report import (RegimeComparison, relative_improvement, render_distribution,
                     render_params_figure, render_table_csv, report_from_dict)

log = logging.getLogger(__name__)


_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bnfair experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_train": _POS_INT, "n_test": _POS_INT, "feature_dim": _POS_INT,
                "latent_dim": _POS_INT,
                "marginals": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                         "exclusiveMaximum": 1}, "minItems": 2},
                "names": {"type": "array", "items": {"type": "string"}, "minItems": 2},
                "coupling": _NUM, "noise_std": {"type": "number", "minimum": 0},
                "external": {
                    "type": "object", "additionalProperties": False,
                    "required": ["train_features", "train_attributes", "test_features",
                                 "test_attributes"],
                    "properties": {k: {"type": "string"} for k in (
                        "train_features", "train_attributes", "test_features",
                        "test_attributes")},
                },
            },
        },
        "backbone": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "input_dim": _POS_INT, "width": _POS_INT, "embedding_dim": _POS_INT,
                "bn_momentum": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "bn_eps": {"type": "number", "exclusiveMinimum": 0},
                "blocks": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "additionalProperties": False, "required": ["width"],
                    "properties": {"width": _POS_INT,
                                   "skip_kind": {"enum": ["Identity", "Projection"]}}}},
            },
        },
        "pretrain": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0}, "batch_size": _POS_INT,
                "tau": {"type": "number", "exclusiveMinimum": 0}, "proj_dim": _POS_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0}, "momentum": _NUM,
                "weight_decay": {"type": "number", "minimum": 0},
                "warmup_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "augment": {"type": "object", "additionalProperties": False, "properties": {
                    "noise_std": {"type": "number", "minimum": 0},
                    "mask_prob": {"type": "number", "minimum": 0, "maximum": 1},
                    "scale_low": _NUM, "scale_high": _NUM}},
            },
        },
        "finetune": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "optimizer": {"enum": ["sgd-momentum", "adaptive"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "schedule": {"enum": ["constant", "warmup-cosine", "one-cycle"]},
                "weight_decay": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "warmup_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "batch_size": _POS_INT, "momentum": _NUM,
            },
        },
        "policies": {"type": "array", "minItems": 1, "uniqueItems": True,
                     "items": {"enum": [p.value for p in TuningPolicy]}},
        "search": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"}, "trials": _POS_INT,
                "optimizers": {"type": "array", "items": {"enum": ["sgd-momentum", "adaptive"]},
                               "minItems": 1},
                "lr_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                             "minItems": 2, "maxItems": 2},
                "schedules": {"type": "array", "minItems": 1, "items": {
                    "enum": ["constant", "warmup-cosine", "one-cycle"]}},
                "weight_decays": {"type": "array", "minItems": 1,
                                  "items": {"type": "number", "minimum": 0}},
                "epochs_range": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                 "minItems": 2, "maxItems": 2},
                "warmup_range": {"type": "array", "items": {"type": "number", "minimum": 0,
                                                            "maximum": 1},
                                 "minItems": 2, "maxItems": 2},
            },
        },
        "seeds": {
            "type": "object", "additionalProperties": False,
            "properties": {k: _SEED for k in ("data", "init", "pretrain", "finetune", "search")},
        },
        "output_dir": {"type": "string"},
    },
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    external: dict = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: Hyperparameters = field(default_factory=Hyperparameters)
    policies: list = field(default_factory=lambda: list(TuningPolicy))
    search_enabled: bool = False
    search: SearchSpace = field(default_factory=SearchSpace)
    seeds: dict = field(default_factory=lambda: dict(data=0, init=0, pretrain=0, finetune=0,
                                                     search=0))
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, raw):
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from exc
        raw = copy.deepcopy(raw)
        cfg = cls()
        seeds = dict(cfg.seeds, **raw.get("seeds", {}))
        ds = raw.get("dataset", {})
        external = ds.pop("external", None)
        try:
            cfg.dataset = DatasetSpec(**ds, seed=seeds["data"])
            cfg.backbone = BackboneSpec(**raw.get("backbone", {}))
            cfg.pretrain = PretrainConfig(**raw.get("pretrain", {}))
            cfg.finetune = Hyperparameters(**raw.get("finetune", {}))
            search = dict(raw.get("search", {}))
            cfg.search_enabled = search.pop("enabled", False)
            cfg.search = SearchSpace(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in search.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config error: {exc}") from exc
        cfg.external = external
        if "policies" in raw:
            cfg.policies = [TuningPolicy.parse(p) for p in raw["policies"]]
        cfg.seeds = seeds
        cfg.output_dir = raw.get("output_dir", cfg.output_dir)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed):
        cfg = copy.deepcopy(self)
        cfg.seeds = {k: int(seed) for k in cfg.seeds}
        cfg.dataset.seed = int(seed)
        return cfg

    def to_dict(self):
        ds = self.dataset.to_dict()
        ds.pop("seed")
        if self.external:
            ds["external"] = dict(self.external)
        search = self.search.to_dict()
        search = {k: list(v) if isinstance(v, tuple) else v for k, v in search.items()}
        search["enabled"] = self.search_enabled
        return {"dataset": ds, "backbone": self.backbone.to_dict(),
                "pretrain": self.pretrain.to_dict(), "finetune": self.finetune.to_dict(),
                "policies": [p.value for p in self.policies], "search": search,
                "seeds": dict(self.seeds), "output_dir": self.output_dir}


def dump_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _stage(name, seed):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (StageError, ConfigError):
                raise
            except (OSError, ValueError, RuntimeError, AssertionError, KeyError) as exc:
                raise StageError(name, seed, exc) from exc
        return inner
    return wrap


# ---------------------------------------------------------------------------
# stages


def data_paths(out):
    d = os.path.join(out, "data")
    return {f"{split}_{kind}": os.path.join(d, f"{split}_{kind}.{ext}")
            for split in ("train", "test") for kind, ext in (("features", "bin"),
                                                             ("attributes", "csv"))}


def stage_data(cfg, out, write=True):
    """(train, test) for the config; synthetic sets are also written under data/."""
    def run():
        if cfg.external:
            ext = cfg.external
            return (load_external(ext["train_features"], ext["train_attributes"], "train"),
                    load_external(ext["test_features"], ext["test_attributes"], "test"))
        train, test = generate_dataset(cfg.dataset)
        if write:
            paths = data_paths(out)
            os.makedirs(os.path.dirname(paths["train_features"]), exist_ok=True)
            save_dataset(train, paths["train_features"], paths["train_attributes"])
            save_dataset(test, paths["test_features"], paths["test_attributes"])
        return train, test
    return _stage("synth", cfg.seeds["data"])(run)()


def load_or_make_data(cfg, out):
    paths = data_paths(out)
    if not cfg.external and all(os.path.exists(p) for p in paths.values()):
        return (load_external(paths["train_features"], paths["train_attributes"], "train"),
                load_external(paths["test_features"], paths["test_attributes"], "test"))
    return stage_data(cfg, out)


def stage_pretrain(cfg, out, train):
    def run():
        spec = cfg.backbone
        if spec.input_dim != train.features.shape[1]:
            raise ConfigError(f"backbone input_dim {spec.input_dim} != feature dim "
                              f"{train.features.shape[1]}")
        model = Model(spec, seed=cfg.seeds["init"])
        started = time.perf_counter()
        trace = pretrain(train.features, model, cfg.pretrain, RngStream(cfg.seeds["pretrain"]))
        log.info("pretrain: %.1fs", time.perf_counter() - started)
        save_checkpoint(model, os.path.join(out, "pretrain.ckpt"))
        dump_json(os.path.join(out, "pretrain_log.json"), trace)
        return model, trace
    try:
        return _stage("pretrain", cfg.seeds["pretrain"])(run)()
    except PretrainDivergence as exc:
        raise StageError("pretrain", cfg.seeds["pretrain"], exc) from exc


def stage_finetune(cfg, out, pretrained, train, policy):
    def run():
        result = random_search(cfg.search, policy, pretrained, train, cfg.seeds["search"],
                               defaults=cfg.finetune) if cfg.search_enabled else None
        run_ = result.best_run if result else finetune(pretrained, train, policy, cfg.finetune,
                                                       cfg.seeds["finetune"])
        if result:
            dump_json(os.path.join(out, "search", f"{policy.value}.json"), result.summary())
        save_checkpoint(run_.model, os.path.join(out, "runs", f"{policy.value}.ckpt"))
        dump_json(os.path.join(out, "runs", f"{policy.value}.json"), run_.summary())
        return run_
    try:
        return _stage(f"finetune:{policy.value}", cfg.seeds["finetune"])(run)()
    except TrainingDiverged as exc:
        raise StageError(f"finetune:{policy.value}", cfg.seeds["finetune"], exc) from exc


def stage_search(cfg, out, pretrained, train, policy):
    def run():
        result = random_search(cfg.search, policy, pretrained, train, cfg.seeds["search"],
                               defaults=cfg.finetune)
        dump_json(os.path.join(out, "search", f"{policy.value}.json"), result.summary())
        save_checkpoint(result.best_run.model, os.path.join(out, "search",
                                                            f"{policy.value}.ckpt"))
        return result
    return _stage(f"search:{policy.value}", cfg.seeds["search"])(run)()


def stage_evaluate(cfg, out, model, train, test, policy):
    def run():
        train_log, test_log = prediction_log(model, train), prediction_log(model, test)
        pred_dir = os.path.join(out, "predictions")
        os.makedirs(pred_dir, exist_ok=True)
        write_prediction_log(os.path.join(pred_dir, f"{policy.value}_train.pred"), train_log)
        write_prediction_log(os.path.join(pred_dir, f"{policy.value}_test.pred"), test_log)
        report, thresholds = evaluate_fairness(train_log, test_log)
        payload = report.to_dict()
        payload["thresholds"] = [float(t) for t in thresholds.thresholds]
        payload["policy"] = policy.value
        dump_json(os.path.join(out, "reports", f"{policy.value}.json"), payload)
        return report
    return _stage(f"evaluate:{policy.value}", cfg.seeds["finetune"])(run)()


def ordering_check(reports):
    """Soft check Frozen <= BNStats <= FullFT on median F1-worst."""
    need = (TuningPolicy.FROZEN, TuningPolicy.BN_STATS, TuningPolicy.FULL_FT)
    if not all(p in reports for p in need):
        return None
    vals = [reports[p].median_worst for p in need]
    ok = vals[0] <= vals[1] <= vals[2]
    if not ok:
        log.warning("median F1-worst ordering Frozen <= BNStats <= FullFT violated: "
                    "%.4f, %.4f, %.4f", *vals)
    return {"holds": ok, "values": dict(zip([p.value for p in need], vals))}


def stage_report(cfg, out, reports=None, counters=None):
    """Render table/figures from per-policy reports (read from disk if not given)."""
    def run():
        reps, ctrs = dict(reports or {}), dict(counters or {})
        if not reps:
            for p in TuningPolicy:
                path = os.path.join(out, "reports", f"{p.value}.json")
                if os.path.exists(path):
                    reps[p] = report_from_dict(load_json(path))
                run_path = os.path.join(out, "runs", f"{p.value}.json")
                if os.path.exists(run_path):
                    ctrs[p] = load_json(run_path)["counters"]
        if not reps:
            raise StageError("report", cfg.seeds["finetune"], "no reports found")
        k = len(next(iter(reps.values())).names)
        catalog = accounting.desk_catalog(cfg.backbone, k)
        acct = {p: accounting.updated_fraction(catalog, p) for p in reps}
        comparison = RegimeComparison(reps, acct, ctrs)
        with open(os.path.join(out, "table.csv"), "w") as fh:
            fh.write(render_table_csv(comparison))
        values_csv, summary_csv = render_distribution(comparison,
                                                      os.path.join(out, "distribution.svg"))
        with open(os.path.join(out, "distribution_values.csv"), "w") as fh:
            fh.write(values_csv)
        with open(os.path.join(out, "distribution_summary.csv"), "w") as fh:
            fh.write(summary_csv)
        render_params_figure(comparison, os.path.join(out, "params.svg"))
        improvements = {}
        base = reps.get(TuningPolicy.FROZEN)
        if base is not None:
            for p, rep in reps.items():
                if p != TuningPolicy.FROZEN:
                    improvements[f"Frozen->{p.value}"] = relative_improvement(base, rep)
        summary = {
            "policies": [p.value for p in comparison.ordered_policies()],
            "num_attributes": k,
            "num_cells": k * (k - 1),
            "median_worst": {p.value: reps[p].median_worst for p in comparison.ordered_policies()},
            "median_gap": {p.value: reps[p].median_gap for p in comparison.ordered_policies()},
            "mean_gap": {p.value: reps[p].mean_gap for p in comparison.ordered_policies()},
            "accounting": {p.value: acct[p].to_dict() for p in comparison.ordered_policies()},
            "counters": {p.value: ctrs[p] for p in comparison.ordered_policies() if p in ctrs},
            "relative_improvement": improvements,
            "ordering_check": ordering_check(reps),
        }
        dump_json(os.path.join(out, "comparison.json"), summary)
        return comparison, summary
    return _stage("report", cfg.seeds["finetune"])(run)()


def run_experiment(cfg, out=None):
    """Full pipeline; returns (RegimeComparison, summary dict)."""
    out = out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    dump_json(os.path.join(out, "config.json"), cfg.to_dict())
    train, test = stage_data(cfg, out)
    needs_pretrain = any(p != TuningPolicy.SUPERVISED_SCRATCH for p in cfg.policies)
    if needs_pretrain:
        pretrained, _ = stage_pretrain(cfg, out, train)
    else:
        pretrained = Model(cfg.backbone, seed=cfg.seeds["init"])
    reports, counters, timing = {}, {}, {}
    for policy in cfg.policies:
        run = stage_finetune(cfg, out, pretrained, train, policy)
        timing[policy] = run.wall_clock
        counters[policy] = run.counters
        reports[policy] = stage_evaluate(cfg, out, run.model, train, test, policy)
        log.info("%s: median worst %.4f, fine-tune %.1fs", policy.value,
                 reports[policy].median_worst, run.wall_clock)
    comparison, summary = stage_report(cfg, out, reports, counters)
    comparison.timing = timing
    return comparison, summary
