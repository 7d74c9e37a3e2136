"""ResNet generator, patch discriminator and checkpoint I/O."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .datasets import parse_roles
from .errors import ConfigurationError, DimensionError, NumericalError, ParameterError

__all__ = [
    "VARIANTS",
    "GeneratorConfig",
    "DiscriminatorConfig",
    "ResnetGenerator",
    "PatchDiscriminator",
    "init_weights",
    "build_generator",
    "build_discriminator",
    "generator_forward",
    "discriminator_forward",
    "gradients",
    "ModelCheckpoint",
]

VARIANTS = ("rGAN", "sGAN", "rsGAN")
MANIFEST_VERSION = 1


@dataclass
class GeneratorConfig:
    in_channels: int
    out_channels: int
    base_features: int = 64
    n_resnet_blocks: int = 9
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.in_channels < 2 or self.out_channels < 1 or self.n_resnet_blocks < 1 or self.base_features < 1:
            raise ParameterError(f"invalid generator config {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class DiscriminatorConfig:
    in_channels: int
    feature_ladder: list = field(default_factory=lambda: [64, 128, 256, 512])
    kernel: int = 4

    def __post_init__(self):
        self.feature_ladder = list(self.feature_ladder)
        if self.in_channels < 1 or not self.feature_ladder:
            raise ParameterError(f"invalid discriminator config {self}")
        if any(b <= a for a, b in zip(self.feature_ladder, self.feature_ladder[1:])):
            raise ParameterError(f"feature ladder must be strictly increasing, got {self.feature_ladder}")

    def output_size(self, n):
        """Score-map side length for an input side of ``n`` pixels."""
        k = self.kernel
        for i in range(len(self.feature_ladder)):
            stride = 2 if i < len(self.feature_ladder) - 1 else 1
            n = (n + 2 - k) // stride + 1
        return n + 2 - k + 1

    def receptive_field(self):
        """Input extent seen by one score: 70 px for the default ladder."""
        strides = [2] * (len(self.feature_ladder) - 1) + [1, 1]
        field_, jump = 1, 1
        for s in strides:
            field_ += (self.kernel - 1) * jump
            jump *= s
        return field_

    def min_input_size(self):
        """Smallest square input yielding at least one score."""
        n = 1
        while self.output_size(n) < 1:
            n += 1
        return n


def _norm(channels):
    # affine scale/shift learned per channel; statistics always per instance
    return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, channels, dropout_rate):
        super().__init__()
        layers = [nn.Conv2d(channels, channels, 3, padding=1), _norm(channels), nn.ReLU(True)]
        if dropout_rate > 0:
            layers.append(nn.Dropout(dropout_rate))
        layers += [nn.Conv2d(channels, channels, 3, padding=1), _norm(channels)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """c7s1-F, d2F, d4F, residual blocks at 4F, u2F, uF, c7s1-out with tanh."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        f = config.base_features
        layers = [
            nn.ReflectionPad2d(3), nn.Conv2d(config.in_channels, f, 7), _norm(f), nn.ReLU(True),
            nn.Conv2d(f, 2 * f, 3, stride=2, padding=1), _norm(2 * f), nn.ReLU(True),
            nn.Conv2d(2 * f, 4 * f, 3, stride=2, padding=1), _norm(4 * f), nn.ReLU(True),
        ]
        layers += [ResidualBlock(4 * f, config.dropout_rate) for _ in range(config.n_resnet_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * f, 2 * f, 3, stride=2, padding=1, output_padding=1), _norm(2 * f), nn.ReLU(True),
            nn.ConvTranspose2d(2 * f, f, 3, stride=2, padding=1, output_padding=1), _norm(f), nn.ReLU(True),
            nn.ReflectionPad2d(3), nn.Conv2d(f, config.out_channels, 7), nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    @property
    def final_conv(self):
        return self.net[-2]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected [B, {self.config.in_channels}, H, W], got {tuple(x.shape)}")
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise DimensionError(f"spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """Strided 4x4 convolutions down the feature ladder, ending in a one-channel score map."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        k, ladder = config.kernel, config.feature_ladder
        layers, prev = [], config.in_channels
        for i, feats in enumerate(ladder):
            stride = 2 if i < len(ladder) - 1 else 1
            layers.append(nn.Conv2d(prev, feats, k, stride=stride, padding=1))
            if i > 0:
                layers.append(_norm(feats))
            layers.append(nn.LeakyReLU(0.2, True))
            prev = feats
        layers.append(nn.Conv2d(prev, 1, k, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected [B, {self.config.in_channels}, H, W], got {tuple(x.shape)}")
        need = self.config.min_input_size()
        if min(x.shape[-2:]) < need:
            raise DimensionError(f"input {tuple(x.shape[-2:])} below the {need}px minimum for this ladder")
        return self.net(x)


def init_weights(model, seed, std=0.02):
    """Conv weights ~ N(0, std^2), zero biases, unit/zero norm affine terms."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                                    .mul_(std).to(module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.InstanceNorm2d) and module.affine:
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def build_generator(config, seed):
    return init_weights(ResnetGenerator(config), seed)


def build_discriminator(config, seed):
    return init_weights(PatchDiscriminator(config), seed)


def _as_batch(x, like):
    t = torch.as_tensor(x, dtype=next(like.parameters()).dtype)
    return t.unsqueeze(0) if t.ndim == 3 else t


def generator_forward(generator, inputs, training=False):
    """Evaluate on a ``[2*n_in, H, W]`` (or batched) input; eval mode unless ``training``."""
    generator.train(training)
    with torch.set_grad_enabled(training):
        out = generator(_as_batch(inputs, generator))
    return out[0] if torch.as_tensor(inputs).ndim == 3 else out


def discriminator_forward(discriminator, images):
    out = discriminator(_as_batch(images, discriminator))
    return out[0, 0] if torch.as_tensor(images).ndim == 3 else out


def gradients(model, loss_closure):
    """Reverse-mode gradients of ``loss_closure()`` w.r.t. every parameter of ``model``.

    Returns ``{parameter name: gradient tensor}``. A non-finite loss raises
    :class:`NumericalError` naming the first layer that produced non-finite
    activations during the evaluation.
    """
    offenders = []

    def hook(name):
        def check(module, inputs, output):
            if not offenders and isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                offenders.append(name)
        return check

    handles = [m.register_forward_hook(hook(n)) for n, m in model.named_modules() if not list(m.children())]
    try:
        loss = loss_closure()
    finally:
        for h in handles:
            h.remove()
    loss = torch.as_tensor(loss)
    if loss.numel() != 1:
        raise DimensionError("loss closure must return a scalar")
    if not torch.isfinite(loss):
        where = offenders[0] if offenders else "loss"
        raise NumericalError(f"non-finite loss; first non-finite activation in layer {where!r}")
    names, params = zip(*[(n, p) for n, p in model.named_parameters()])
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}


@dataclass
class ModelCheckpoint:
    """Generator, discriminator and the manifest describing how they were trained.

    On disk: ``generator.pt`` and ``discriminator.pt`` (torch state dicts),
    ``optimizer.pt`` when optimizer state is present, and ``manifest.json``::

        {"schema_version": 1, "variant": "rsGAN",
         "roles": {"T1": "source_full", "T2": "target_heavy:50"},
         "input_labels": [...], "output_labels": [...],
         "generator": {GeneratorConfig fields}, "discriminator": {DiscriminatorConfig fields},
         "epoch": 40, "seeds": {"init": 0, "data": 0, "mask_assignment": 0},
         "train_config": {...}, "files": {"generator": "generator.pt", ...}}
    """

    generator: ResnetGenerator
    discriminator: PatchDiscriminator
    variant: str
    roles: dict
    input_labels: list
    output_labels: list
    epoch: int = 0
    seeds: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    optimizer_state: dict = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.generator.config.in_channels != 2 * len(self.input_labels):
            raise ConfigurationError("generator input channels do not match the input contrasts")
        if self.generator.config.out_channels != len(self.output_labels):
            raise ConfigurationError("generator output channels do not match the output contrasts")

    def manifest(self):
        files = {"generator": "generator.pt", "discriminator": "discriminator.pt"}
        if self.optimizer_state is not None:
            files["optimizer"] = "optimizer.pt"
        return {
            "schema_version": MANIFEST_VERSION,
            "variant": self.variant,
            "roles": {k: str(v) for k, v in self.roles.items()},
            "input_labels": list(self.input_labels),
            "output_labels": list(self.output_labels),
            "generator": asdict(self.generator.config),
            "discriminator": asdict(self.discriminator.config),
            "epoch": self.epoch,
            "seeds": dict(self.seeds),
            "train_config": _plain(self.train_config),
            "files": files,
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.generator.state_dict(), directory / "generator.pt")
        torch.save(self.discriminator.state_dict(), directory / "discriminator.pt")
        if self.optimizer_state is not None:
            torch.save(self.optimizer_state, directory / "optimizer.pt")
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise ConfigurationError(f"{directory} is not a checkpoint (no manifest.json)")
        meta = json.loads(manifest_path.read_text())
        gen = ResnetGenerator(GeneratorConfig(**meta["generator"]))
        disc = PatchDiscriminator(DiscriminatorConfig(**meta["discriminator"]))
        gen.load_state_dict(torch.load(directory / "generator.pt", weights_only=True))
        disc.load_state_dict(torch.load(directory / "discriminator.pt", weights_only=True))
        opt = None
        if "optimizer" in meta.get("files", {}):
            opt = torch.load(directory / meta["files"]["optimizer"], weights_only=True)
        return cls(gen, disc, meta["variant"], parse_roles(meta["roles"]), meta["input_labels"],
                   meta["output_labels"], meta.get("epoch", 0), meta.get("seeds", {}),
                   meta.get("train_config", {}), opt)


def _plain(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return str(obj)
