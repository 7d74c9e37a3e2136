"""Config-driven pipeline: phantom/prepare, masks, training, recovery, evaluation, report.

Every stage writes a sentinel under ``<output_dir>/.stages`` when it
completes, so a rerun on the same directory resumes after the last finished
stage. Training sentinels are per model.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .datasets import (ExampleFactory, PhantomSpec, Role, load_volume_dir, make_examples, normalize,
                       phantom_generate, save_volume, split_subjects)
from .errors import ConfigurationError, MCRError
from .kspace import zero_filled_recon
from .metrics import evaluate, write_metrics_csv, write_summary
from .model import VARIANTS, ModelCheckpoint
from .report import build_report
from .sampling import default_params, load_mask_dir, mask_bank, save_mask
from .training import TrainConfig, chained_recover, recover_batch, to_volumes, train

__all__ = ["CONFIG_SCHEMA", "STAGES", "StageError", "Experiment", "load_config", "validate_config",
           "run_experiment"]

log = logging.getLogger("mcr")

STAGES = ("data", "masks", "train", "recover", "eval", "report")

_TRAIN_KEYS = {
    "epochs": {"type": "integer", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "g_lr": {"type": "number", "minimum": 0},
    "d_lr": {"type": "number", "minimum": 0},
    "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "adam_eps": {"type": "number", "exclusiveMinimum": 0},
    "decay_start_epoch": {"type": "integer", "minimum": 0},
    "lambda_p": {"type": "number", "minimum": 0},
    "dc_lambda": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "inf"}]},
    "base_features": {"type": "integer", "minimum": 1},
    "n_resnet_blocks": {"type": "integer", "minimum": 1},
    "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "d_feature_ladder": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    "outputs": {"type": "object", "propertyNames": {"enum": list(VARIANTS)},
                "additionalProperties": {"type": "array", "items": {"type": "string"}, "minItems": 1}},
}

_SEED = {"type": "integer", "minimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mcr experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["output_dir", "data", "masks", "roles", "variant"],
    "properties": {
        "output_dir": {"type": "string", "minLength": 1},
        "seeds": {
            "type": "object", "additionalProperties": False,
            "properties": {k: _SEED for k in ("phantom", "split", "masks", "init", "data", "mask_assignment",
                                              "test_assignment")},
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "phantom": {"type": "object"},
                "volume_dir": {"type": "string"},
                "normalize": {"type": "boolean"},
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
            "oneOf": [{"required": ["phantom"]}, {"required": ["volume_dir"]}],
        },
        "masks": {
            "type": "object", "additionalProperties": False, "required": ["target_R"],
            "properties": {
                "target_R": {"type": "array", "items": {"type": "number", "minimum": 1}, "minItems": 1},
                "count": {"type": "integer", "minimum": 1},
                "k_r": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 0.5},
                "d": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "roles": {
            "type": "object", "propertyNames": {"enum": list(VARIANTS)}, "minProperties": 1,
            "additionalProperties": {
                "type": "object", "minProperties": 1,
                "additionalProperties": {"type": "string",
                                         "pattern": r"^(source_full|source_light:[0-9.]+|target_heavy)$"},
            },
        },
        "variant": {
            "oneOf": [{"enum": list(VARIANTS)},
                      {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1, "uniqueItems": True}],
        },
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_KEYS},
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "contrasts": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "include_zf": {"type": "boolean"},
            },
        },
    },
}

DEFAULT_SEEDS = {"phantom": 0, "split": 0, "masks": 0, "init": 0, "data": 0, "mask_assignment": 0,
                 "test_assignment": 0}


class StageError(MCRError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def load_config(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None


def validate_config(config):
    """Schema check plus cross-field rules; returns a normalized :class:`Experiment`."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config {where}: {exc.message}") from None
    return Experiment(config)


def _rtag(r):
    return f"R{r:g}"


@dataclass
class ModelPlan:
    """One training run: which variant, its roles and where the checkpoint lives."""

    name: str
    variant: str
    roles: dict
    outputs: list
    target_R: float = None
    chain: dict = field(default_factory=dict)
    train_config: TrainConfig = None


class Experiment:
    def __init__(self, config):
        self.config = config
        self.out = Path(config["output_dir"])
        self.seeds = {**DEFAULT_SEEDS, **config.get("seeds", {})}
        variants = config["variant"]
        self.variants = [variants] if isinstance(variants, str) else list(variants)
        self.target_R = [float(r) for r in config["masks"]["target_R"]]
        self.train_opts = dict(config.get("train", {}))
        self.output_overrides = self.train_opts.pop("outputs", {})
        self.eval_opts = config.get("eval", {})
        roles = config["roles"]
        missing = [v for v in self.variants if v not in roles]
        if missing:
            raise ConfigurationError(f"no roles given for variants {missing}")
        self.roles = {v: {c: Role.parse(r) for c, r in roles[v].items()} for v in self.variants}
        self.targets = sorted({c for v in self.variants for c, r in self.roles[v].items()
                               if r.kind == "target_heavy"})
        if "sGAN" in self.variants and not self.targets and "sGAN" not in self.output_overrides:
            raise ConfigurationError("sGAN needs a target contrast (a target_heavy role elsewhere or train.outputs)")
        self.eval_contrasts = list(self.eval_opts.get("contrasts", self.targets))
        source_rates = {r.R for v in self.variants for r in self.roles[v].values() if r.is_source}
        self.source_R = source_rates.pop() if len(source_rates) == 1 else 1.0
        self.extra_R = sorted({r.R for v in self.variants for r in self.roles[v].values()
                               if r.kind == "source_light" and r.R > 1})
        self.plans = self._plan()

    # ------------------------------------------------------------ planning

    def _train_config(self, variant, roles, outputs, seed_offset=0):
        opts = {k: v for k, v in self.train_opts.items()}
        seeds = {k: self.seeds[k] + seed_offset for k in ("init", "data", "mask_assignment")}
        return TrainConfig(variant, roles, outputs, seeds=seeds, **opts)

    def _plan(self):
        plans = []
        for variant in self.variants:
            roles = self.roles[variant]
            outputs = self.output_overrides.get(variant)
            if outputs is None and variant == "sGAN":
                outputs = [t for t in self.targets if t not in roles]
            chain = {c: r.R for c, r in roles.items() if r.kind == "source_light" and r.R > 1}
            # downstream models train on fully-sampled sources; light sources go through a stage-1 rGAN
            trained_roles = {c: ("source_full" if r.is_source else r) for c, r in roles.items()}
            if variant == "sGAN":
                plans.append(ModelPlan("sGAN", variant, trained_roles, outputs, None, chain))
                continue
            for R in self.target_R:
                with_r = {c: (Role("target_heavy", R) if isinstance(r, Role) and r.kind == "target_heavy" else r)
                          for c, r in trained_roles.items()}
                plans.append(ModelPlan(f"{variant}/{_rtag(R)}", variant, with_r, outputs, R, chain))
        for c, r in sorted({(c, r) for p in plans for c, r in p.chain.items()}):
            plans.append(ModelPlan(f"source-{c}/{_rtag(r)}", "rGAN", {c: Role("target_heavy", r)}, [c], r))
        for p in plans:
            # validates variant/role consistency before any work happens
            p.train_config = self._train_config(p.variant, p.roles, p.outputs)
        return plans

    # -------------------------------------------------------------- stages

    def _sentinel(self, name):
        return self.out / ".stages" / f"{name.replace('/', '_')}.done"

    def _done(self, name):
        return self._sentinel(name).exists()

    def _mark(self, name, info=None):
        path = self._sentinel(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(info or {}, indent=2) + "\n")

    def _record_config(self):
        text = json.dumps(self.config, sort_keys=True)
        digest = hashlib.sha256(text.encode()).hexdigest()
        stamp = self.out / "config.json"
        if stamp.exists():
            old = json.loads(stamp.read_text())
            if old.get("sha256") != digest:
                raise ConfigurationError(f"{self.out} holds a run with a different config; use a fresh output_dir")
            return
        self.out.mkdir(parents=True, exist_ok=True)
        stamp.write_text(json.dumps({"sha256": digest, "config": self.config}, indent=2) + "\n")

    def stage_data(self):
        data = self.config["data"]
        vol_dir = self.out / "data" / "volumes"
        if "phantom" in data:
            spec = PhantomSpec.from_json({"seed": self.seeds["phantom"], **data["phantom"]})
            volumes = phantom_generate(spec)
        else:
            volumes = load_volume_dir(data["volume_dir"])
            if not volumes:
                raise ConfigurationError(f"no volumes found in {data['volume_dir']}")
            if data.get("normalize", True):
                volumes = {s: {c: normalize(v) for c, v in cs.items()} for s, cs in volumes.items()}
        for cs in volumes.values():
            for v in cs.values():
                save_volume(v, vol_dir)
        train_ids, test_ids = split_subjects(sorted(volumes), data.get("train_fraction", 0.75), self.seeds["split"])
        (self.out / "data" / "split.json").write_text(json.dumps({"train": train_ids, "test": test_ids}, indent=2))

    def _volumes(self):
        volumes = load_volume_dir(self.out / "data" / "volumes")
        split = json.loads((self.out / "data" / "split.json").read_text())
        return {s: volumes[s] for s in split["train"]}, {s: volumes[s] for s in split["test"]}

    def _shape(self):
        train_vols, _ = self._volumes()
        return next(iter(next(iter(train_vols.values())).values())).shape[1:]

    def stage_masks(self):
        h, w = self._shape()
        opts = self.config["masks"]
        count = opts.get("count", 20)
        for i, R in enumerate(sorted(set(self.target_R) | set(self.extra_R))):
            params = default_params(R, opts.get("k_r"), opts.get("d"))
            base = int(np.random.SeedSequence([self.seeds["masks"], i]).generate_state(1)[0])
            for j, m in enumerate(mask_bank(h, w, params, count, base)):
                save_mask(m, self.out / "masks" / _rtag(R), f"mask_{j:03d}")

    def _banks(self):
        banks = {}
        for R in sorted(set(self.target_R) | set(self.extra_R)):
            if R > 1:
                banks[R] = load_mask_dir(self.out / "masks" / _rtag(R))
        return banks

    def _ckpt_dir(self, plan):
        return self.out / "checkpoints" / plan.name

    def stage_train(self):
        train_vols, _ = self._volumes()
        banks = self._banks()
        for plan in self.plans:
            key = f"train-{plan.name}"
            if self._done(key):
                log.info("train %s: already done", plan.name)
                continue
            cfg = plan.train_config
            log.info("train %s: %d epochs", plan.name, cfg.epochs)
            factory = ExampleFactory(train_vols, banks, cfg.roles, cfg.outputs, cfg.seeds["mask_assignment"])
            target = self._ckpt_dir(plan)
            ckpt, trace = train(cfg, factory, trace_path=target / "trace.csv",
                                progress=lambda e, t, n=plan.name: log.info(
                                    "train %s: epoch %d l1 %.4f", n, e, t.records[-1]["l1"]) if t.records else None)
            ckpt.save(target)
            trace.write_csv(target / "trace.csv")
            self._mark(key, {"epochs": cfg.epochs})

    def _test_examples(self, test_vols, banks, roles, outputs, R):
        rolled = {c: (Role("target_heavy", R) if r.kind == "target_heavy" else r) for c, r in roles.items()}
        return make_examples(test_vols, banks, rolled, self.seeds["test_assignment"], outputs)

    def stage_recover(self):
        _, test_vols = self._volumes()
        banks = self._banks()
        recon = self.out / "recon"
        for variant in self.variants:
            roles = self.roles[variant]
            for R in self.target_R:
                plan = next(p for p in self.plans if p.variant == variant and not p.name.startswith("source-")
                            and (p.target_R is None or p.target_R == R))
                ckpt = ModelCheckpoint.load(self._ckpt_dir(plan))
                examples = self._test_examples(test_vols, banks, roles, ckpt.output_labels, R)
                if plan.chain:
                    ((label, r),) = plan.chain.items()
                    src = ModelCheckpoint.load(self.out / "checkpoints" / f"source-{label}" / _rtag(r))
                    results = chained_recover(src, ckpt, examples)
                else:
                    results = recover_batch(ckpt, examples)
                src_R = max([r.R for r in roles.values() if r.is_source], default=self.source_R)
                for vol in to_volumes(results, examples, method=variant, target_R=R, source_R=src_R):
                    save_volume(vol, recon / variant / _rtag(R))
        if self.eval_opts.get("include_zf", True):
            for R in self.target_R:
                examples = self._test_examples(test_vols, banks, {c: Role("target_heavy", R) for c in self.targets},
                                               self.targets, R)
                results = [{c: np.clip(np.abs(zero_filled_recon(*ex.acquisition(c))), 0, 1) for c in self.targets}
                           for ex in examples]
                for vol in to_volumes(results, examples, method="ZF", target_R=R, source_R=self.source_R):
                    save_volume(vol, recon / "ZF" / _rtag(R))

    def stage_eval(self):
        _, test_vols = self._volumes()
        recovered = []
        for path in sorted((self.out / "recon").glob("*/R*")):
            recovered += [v for cs in load_volume_dir(path).values() for v in cs.values()]
        records, summary = evaluate(recovered, test_vols, self.eval_contrasts)
        write_metrics_csv(records, self.out / "metrics.csv")
        write_summary(summary, self.out / "summary.json")

    def stage_report(self):
        build_report(self.out / "metrics.csv", self.out / "report", self.eval_contrasts)

    def run(self, stop_after=None):
        self._record_config()
        for stage in STAGES:
            if self._done(stage):
                log.info("stage %s: already done", stage)
            else:
                log.info("stage %s", stage)
                try:
                    getattr(self, f"stage_{stage}")()
                except (MCRError, OSError, ValueError, RuntimeError) as exc:
                    raise StageError(stage, str(exc)) from exc
                self._mark(stage)
            if stage == stop_after:
                break
        return self.out


def run_experiment(config, stop_after=None):
    """Validate ``config`` (dict or path) and run every pending stage; returns the output directory."""
    if not isinstance(config, dict):
        config = load_config(config)
    return validate_config(config).run(stop_after)
