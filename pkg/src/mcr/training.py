"""Adversarial training loop, inference-time recovery and the chained workflow."""

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import ContrastVolume, ExampleFactory, RecoveryExample, from_network, parse_roles, to_network
from .errors import ConfigurationError, NumericalError, ParameterError
from .kspace import data_consistency
from .losses import LossWeights, d_loss, g_adv_loss, generator_total_loss, l1_loss
from .model import (VARIANTS, DiscriminatorConfig, GeneratorConfig, ModelCheckpoint, build_discriminator,
                    build_generator)

__all__ = [
    "TrainConfig",
    "TrainingTrace",
    "lr_schedule",
    "make_optimizer",
    "train",
    "recover",
    "recover_batch",
    "chained_recover",
    "to_volumes",
]

TRACE_COLUMNS = ("epoch", "iter", "d_loss", "g_adv", "l1", "g_total", "g_lr", "d_lr")
INFERENCE_CHUNK = 8


@dataclass
class TrainConfig:
    variant: str
    roles: dict
    outputs: list = None
    epochs: int = 200
    batch_size: int = 1
    g_lr: float = 2e-4
    d_lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_start_epoch: int = 100
    lambda_p: float = 100.0
    dc_lambda: float = math.inf
    base_features: int = 64
    n_resnet_blocks: int = 9
    dropout_rate: float = 0.5
    d_feature_ladder: list = field(default_factory=lambda: [64, 128, 256, 512])
    seeds: dict = field(default_factory=lambda: {"init": 0, "data": 0, "mask_assignment": 0})

    def __post_init__(self):
        self.roles = parse_roles(self.roles)
        self.dc_lambda = float(self.dc_lambda)
        self.seeds = {"init": 0, "data": 0, "mask_assignment": 0, **dict(self.seeds)}
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and not 0 <= self.decay_start_epoch < self.epochs:
            raise ParameterError(f"decay_start_epoch ({self.decay_start_epoch}) must be below epochs ({self.epochs})")
        if min(self.g_lr, self.d_lr) < 0 or not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ParameterError("learning rates must be >= 0 and Adam betas in [0, 1)")
        if self.dc_lambda < 0 or math.isnan(self.dc_lambda):
            raise ParameterError(f"dc_lambda must be >= 0, got {self.dc_lambda}")
        LossWeights(self.lambda_p)
        sources = [c for c, r in self.roles.items() if r.is_source]
        targets = [c for c, r in self.roles.items() if not r.is_source]
        if self.variant == "rGAN" and sources:
            raise ConfigurationError(f"rGAN takes no source contrasts, got {sources}")
        if self.variant == "sGAN" and targets:
            raise ConfigurationError(f"sGAN takes no target inputs, got {targets} as target_heavy")
        if self.variant == "rsGAN" and not (sources and targets):
            raise ConfigurationError("rsGAN needs at least one source and one target contrast")
        if self.outputs is None:
            if self.variant == "sGAN":
                raise ConfigurationError("sGAN needs explicit output (target) contrasts")
            self.outputs = list(self.roles)
        self.outputs = list(self.outputs)
        if not self.outputs:
            raise ConfigurationError("no output contrasts")
        if self.variant == "sGAN" and set(self.outputs) & set(sources):
            raise ConfigurationError("sGAN outputs must be contrasts that are not inputs")

    @property
    def input_labels(self):
        return list(self.roles)

    def generator_config(self):
        return GeneratorConfig(2 * len(self.roles), len(self.outputs), self.base_features,
                               self.n_resnet_blocks, self.dropout_rate)

    def discriminator_config(self):
        return DiscriminatorConfig(len(self.outputs), list(self.d_feature_ladder))

    def to_dict(self):
        d = asdict(self)
        d["roles"] = {k: str(v) for k, v in self.roles.items()}
        d["dc_lambda"] = "inf" if math.isinf(self.dc_lambda) else self.dc_lambda
        return d


@dataclass
class TrainingTrace:
    """Per-iteration losses and learning rates; timestamps are kept apart so traces compare exactly."""

    records: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def __eq__(self, other):
        return isinstance(other, TrainingTrace) and self.records == other.records \
            and self.validation == other.validation

    def append(self, **row):
        self.records.append({k: row[k] for k in TRACE_COLUMNS})
        self.timestamps.append(time.time())

    def column(self, name):
        return [r[name] for r in self.records]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS + ("wall_time",))
            for r, t in zip(self.records, self.timestamps):
                writer.writerow([r[k] if isinstance(r[k], int) else repr(float(r[k])) for k in TRACE_COLUMNS]
                                + [f"{t:.6f}"])


def lr_schedule(epoch, base_lr, decay_start, total_epochs):
    """Constant ``base_lr`` until ``decay_start``, then linear decay reaching zero at ``total_epochs``."""
    if decay_start >= total_epochs:
        raise ParameterError(f"decay start {decay_start} must precede total epochs {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch < decay_start:
        return base_lr
    return base_lr * (total_epochs - epoch) / (total_epochs - decay_start)


def make_optimizer(params, lr, config):
    return torch.optim.Adam(params, lr=lr, betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)


def _check_examples(config, examples):
    if not examples:
        raise ConfigurationError("no training examples")
    ex = examples[0]
    kinds = [r.kind for r in config.roles.values()]
    if ex.input_labels != config.input_labels or list(ex.roles) != kinds:
        raise ConfigurationError(f"examples carry inputs {ex.input_labels} with roles {ex.roles}; "
                                 f"{config.variant} expects {config.input_labels} with roles {kinds}")
    if ex.output_labels != config.outputs:
        raise ConfigurationError(f"examples carry outputs {ex.output_labels}, config expects {config.outputs}")


def _stack(examples, attr):
    return torch.from_numpy(np.stack([getattr(ex, attr) for ex in examples]).astype(np.float32))


def _validation_l1(generator, examples):
    generator.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(examples), INFERENCE_CHUNK):
            chunk = examples[i:i + INFERENCE_CHUNK]
            out = generator(_stack(chunk, "input_channels"))
            total += float(torch.abs(out - _stack(chunk, "targets")).mean()) * len(chunk)
    return total / len(examples)


def train(config, train_data, validation=None, trace_path=None, progress=None):
    """Optimize generator and discriminator for ``config.epochs`` epochs.

    Parameters
    ----------
    config : TrainConfig
    train_data : list of RecoveryExample or ExampleFactory
        A factory is asked for a fresh mask assignment every epoch.
    validation : list of RecoveryExample, optional
        Scored (mean L1, eval mode) after every epoch into ``trace.validation``.
    trace_path : path, optional
        Where the trace CSV goes if a non-finite loss aborts training.
    progress : callable, optional
        Called as ``progress(epoch, trace)`` after each epoch.

    Returns
    -------
    ModelCheckpoint, TrainingTrace
    """
    seeds = config.seeds
    gen = build_generator(config.generator_config(), seeds["init"])
    disc = build_discriminator(config.discriminator_config(), seeds["init"] + 1)
    g_opt = make_optimizer(gen.parameters(), config.g_lr, config)
    d_opt = make_optimizer(disc.parameters(), config.d_lr, config)
    weights = LossWeights(config.lambda_p)
    order_rng = np.random.default_rng(seeds["data"])
    trace = TrainingTrace()
    if isinstance(train_data, ExampleFactory):
        factory = train_data
    else:
        fixed = list(train_data)
        if config.epochs > 0 or fixed:
            _check_examples(config, fixed)
        factory = None

    with torch.random.fork_rng(devices=[]):
        # dropout draws from the global generator
        torch.manual_seed(int(np.random.SeedSequence([seeds["init"], seeds["data"]]).generate_state(1)[0]))
        step = 0
        for epoch in range(config.epochs):
            examples = factory.for_epoch(epoch) if factory is not None else fixed
            if factory is not None:
                _check_examples(config, examples)
            g_lr = lr_schedule(epoch, config.g_lr, config.decay_start_epoch, config.epochs)
            d_lr = lr_schedule(epoch, config.d_lr, config.decay_start_epoch, config.epochs)
            for group in g_opt.param_groups:
                group["lr"] = g_lr
            for group in d_opt.param_groups:
                group["lr"] = d_lr
            gen.train()
            disc.train()
            order = order_rng.permutation(len(examples))
            for start in range(0, len(order), config.batch_size):
                batch = [examples[i] for i in order[start:start + config.batch_size]]
                x = _stack(batch, "input_channels")
                real = _stack(batch, "targets")
                fake = gen(x)

                d_opt.zero_grad()
                loss_d = d_loss(disc(real), disc(fake.detach()))
                loss_d.backward()
                d_opt.step()

                g_opt.zero_grad()
                adv = g_adv_loss(disc(fake))
                l1 = l1_loss(fake, real)
                total = generator_total_loss(l1, adv, weights)
                total.backward()
                g_opt.step()

                row = dict(epoch=epoch, iter=step, d_loss=loss_d.item(), g_adv=adv.item(), l1=l1.item(),
                           g_total=total.item(), g_lr=g_lr, d_lr=d_lr)
                trace.append(**row)
                step += 1
                if not all(math.isfinite(row[k]) for k in ("d_loss", "g_adv", "l1", "g_total")):
                    if trace_path is not None:
                        trace.write_csv(trace_path)
                    raise NumericalError(f"non-finite loss at epoch {epoch}, iteration {step - 1}: {row}")
            if validation:
                trace.validation.append((epoch, _validation_l1(gen, validation)))
            if progress is not None:
                progress(epoch, trace)

    gen.eval()
    ckpt = ModelCheckpoint(gen, disc, config.variant, config.roles, config.input_labels, config.outputs,
                           epoch=config.epochs, seeds=dict(seeds), train_config=config.to_dict(),
                           optimizer_state={"generator": g_opt.state_dict(), "discriminator": d_opt.state_dict()})
    return ckpt, trace


# -------------------------------------------------------------------- recovery


def _dc_lambda(checkpoint, dc_lambda):
    if dc_lambda is None:
        dc_lambda = checkpoint.train_config.get("dc_lambda", math.inf)
    return float(dc_lambda)


def _check_compatible(checkpoint, example):
    if example.input_labels != list(checkpoint.input_labels):
        raise ConfigurationError(f"checkpoint expects inputs {checkpoint.input_labels}, "
                                 f"example has {example.input_labels}")
    trained = [r.is_source for r in checkpoint.roles.values()]
    given = [k.startswith("source") for k in example.roles]
    if trained != given:
        raise ConfigurationError(f"{checkpoint.variant} checkpoint roles {list(checkpoint.roles.values())} "
                                 f"do not match example roles {example.roles}")


def _forward(checkpoint, inputs):
    gen = checkpoint.generator
    gen.eval()
    dtype = next(gen.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(inputs), INFERENCE_CHUNK):
            x = torch.as_tensor(np.stack(inputs[i:i + INFERENCE_CHUNK]), dtype=dtype)
            outs.append(gen(x).double().numpy())
    return np.concatenate(outs)


def recover_batch(checkpoint, examples, dc_lambda=None, acquired=None):
    """Recover every example; returns a list of ``{contrast: image in [0, 1]}``.

    Outputs of rGAN/rsGAN whose input role is ``target_heavy`` or
    ``source_light`` are projected onto their acquired k-space samples.
    sGAN outputs are returned as generated. ``acquired`` optionally supplies
    ``(kspace, mask)`` per contrast for each example, overriding the
    example's own acquisitions.
    """
    lam = _dc_lambda(checkpoint, dc_lambda)
    for ex in examples:
        _check_compatible(checkpoint, ex)
    raw = _forward(checkpoint, [ex.input_channels for ex in examples])
    results = []
    for k, ex in enumerate(examples):
        images = {}
        extra = acquired[k] if acquired is not None else {}
        for j, label in enumerate(checkpoint.output_labels):
            img = from_network(raw[k, j])
            role = ex.role(label)
            if checkpoint.variant != "sGAN" and role in ("target_heavy", "source_light"):
                acq = extra.get(label) or ex.acquisition(label)
                if acq is None:
                    raise ConfigurationError(f"no acquired data for {label} ({role}) in "
                                             f"{ex.subject_id} slice {ex.slice_index}")
                kspace, mask = acq
                img = data_consistency(img, kspace, mask, lam)
            images[label] = img
        results.append(images)
    return results


def recover(checkpoint, example, dc_lambda=None, acquired=None):
    """Recover one example; see :func:`recover_batch`."""
    return recover_batch(checkpoint, [example], dc_lambda, None if acquired is None else [acquired])[0]


def _replace_source(example, label, image):
    j = example.input_labels.index(label)
    channels = example.input_channels.copy()
    channels[2 * j] = to_network(image)
    channels[2 * j + 1] = 0.0
    return RecoveryExample(channels, example.targets, example.acquired, example.roles, example.input_labels,
                           example.output_labels, example.subject_id, example.slice_index)


def _source_view(example, label):
    j = example.input_labels.index(label)
    return RecoveryExample(example.input_channels[2 * j:2 * j + 2], example.targets, [example.acquired[j]],
                           ["target_heavy"], [label], example.output_labels, example.subject_id,
                           example.slice_index)


def chained_recover(source_checkpoint, checkpoint, examples, dc_lambda=None):
    """Two-stage recovery for lightly undersampled sources.

    The rGAN ``source_checkpoint`` first reconstructs the source contrast
    from its own acquisition (with data consistency); its output then
    replaces the source channels fed to ``checkpoint`` (an rsGAN or sGAN
    trained on fully-sampled sources). The source contrast in the result is
    the stage-1 reconstruction.
    """
    if source_checkpoint.variant != "rGAN" or len(source_checkpoint.output_labels) != 1:
        raise ConfigurationError("stage 1 must be a single-contrast rGAN checkpoint")
    (label,) = source_checkpoint.output_labels
    if list(source_checkpoint.input_labels) != [label]:
        raise ConfigurationError("stage-1 rGAN must map a contrast onto itself")
    if label not in checkpoint.input_labels or not checkpoint.roles[label].is_source:
        raise ConfigurationError(f"stage-1 contrast {label} is not a source of the {checkpoint.variant} "
                                 f"checkpoint (inputs {checkpoint.input_labels})")
    stage1 = recover_batch(source_checkpoint, [_source_view(ex, label) for ex in examples], dc_lambda)
    fed = [_replace_source(ex, label, s[label]) for ex, s in zip(examples, stage1)]
    stage2 = recover_batch(checkpoint, fed, dc_lambda)
    return [{**t, label: s[label]} for s, t in zip(stage1, stage2)]


def to_volumes(results, examples, **provenance):
    """Group per-slice results into ``ContrastVolume`` objects ordered by subject and slice."""
    grouped = {}
    for res, ex in zip(results, examples):
        for label, img in res.items():
            grouped.setdefault((ex.subject_id, label), []).append((ex.slice_index, img))
    vols = []
    for (sid, label), items in grouped.items():
        items.sort(key=lambda t: t[0])
        vols.append(ContrastVolume(np.stack([img for _, img in items]), label, sid,
                                   provenance=dict(provenance)))
    return vols
