"""Volume ingestion, normalization, synthetic phantoms and recovery-example assembly."""

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (ConfigurationError, DegenerateInputError, DimensionError, IngestionError,
                     PairingError, ParameterError)
from .kspace import apply_mask, forward_fft, zero_filled_recon
from .sampling import SamplingMask, full_mask

__all__ = [
    "ROLE_KINDS",
    "Role",
    "parse_roles",
    "ContrastVolume",
    "RecoveryExample",
    "PhantomSpec",
    "ExampleFactory",
    "load_volume",
    "save_volume",
    "load_volume_dir",
    "normalize",
    "to_network",
    "from_network",
    "make_examples",
    "phantom_generate",
    "split_subjects",
    "save_examples",
    "load_examples",
]

ROLE_KINDS = ("source_full", "source_light", "target_heavy")


@dataclass(frozen=True)
class Role:
    """Acquisition role of one contrast and its acceleration factor."""

    kind: str
    R: float = 1.0

    def __post_init__(self):
        if self.kind not in ROLE_KINDS:
            raise ConfigurationError(f"unknown role {self.kind!r}; expected one of {ROLE_KINDS}")
        if not self.R >= 1:
            raise ConfigurationError(f"role {self.kind} needs R >= 1, got {self.R}")
        if self.kind == "source_full" and self.R != 1:
            raise ConfigurationError("source_full contrasts are fully sampled (R = 1)")

    @property
    def is_source(self):
        return self.kind.startswith("source")

    @classmethod
    def parse(cls, text):
        kind, _, r = str(text).partition(":")
        return cls(kind.strip(), float(r) if r else 1.0)

    def __str__(self):
        return self.kind if self.kind == "source_full" else f"{self.kind}:{self.R:g}"


def parse_roles(spec):
    """Parse ``"T1=source_full,T2=target_heavy:50"`` or a mapping into ``{label: Role}``."""
    if isinstance(spec, str):
        items = []
        for chunk in filter(None, (c.strip() for c in spec.split(","))):
            label, sep, role = chunk.partition("=")
            if not sep:
                raise ConfigurationError(f"role entry {chunk!r} is not of the form LABEL=ROLE")
            items.append((label.strip(), role))
    else:
        items = list(spec.items())
    roles = {}
    for label, role in items:
        if label in roles:
            raise ConfigurationError(f"contrast {label} assigned more than one role")
        roles[label] = role if isinstance(role, Role) else Role.parse(role)
    if not roles:
        raise ConfigurationError("no contrast roles given")
    return roles


@dataclass
class ContrastVolume:
    slices: np.ndarray
    contrast_label: str
    subject_id: str
    voxel_mm: tuple = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise DimensionError(f"volume must be [S, H, W] with S >= 1, got {self.slices.shape}")
        self.voxel_mm = tuple(float(v) for v in self.voxel_mm)

    @property
    def shape(self):
        return self.slices.shape


@dataclass
class RecoveryExample:
    """One slice prepared for a recovery network.

    ``input_channels`` holds real/imaginary zero-filled reconstructions of the
    input contrasts mapped to [-1, 1]; ``targets`` the fully-sampled images of
    the output contrasts in the same domain.
    """

    input_channels: np.ndarray
    targets: np.ndarray
    acquired: list
    roles: list
    input_labels: list
    output_labels: list
    subject_id: str
    slice_index: int

    @property
    def n_in(self):
        return len(self.input_labels)

    def acquisition(self, label):
        """``(kspace, mask)`` for input contrast ``label``, or ``None``."""
        if label in self.input_labels:
            return self.acquired[self.input_labels.index(label)]
        return None

    def role(self, label):
        if label in self.input_labels:
            return self.roles[self.input_labels.index(label)]
        return None

    def reference(self, label):
        """Fully-sampled reference in [0, 1] for an output contrast."""
        return from_network(self.targets[self.output_labels.index(label)])


def to_network(x):
    """Map [0, 1] values (real or complex) into the [-1, 1] network domain."""
    return 2 * x - 1


def from_network(x):
    return (x + 1) / 2


# ---------------------------------------------------------------- volume files


def _sidecar(path):
    path = Path(path)
    return path.with_suffix(".json")


def load_volume(path):
    """Read a little-endian float32 ``<name>.f32`` volume with its JSON sidecar."""
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise IngestionError(f"{path}: missing sidecar {side.name}")
    try:
        meta = json.loads(side.read_text())
        dims = [int(v) for v in meta["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestionError(f"{side}: malformed sidecar ({exc})") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise IngestionError(f"{side}: dims must be [S, H, W], got {dims}")
    expected = 4 * dims[0] * dims[1] * dims[2]
    size = path.stat().st_size
    if size != expected:
        raise IngestionError(f"{path}: size mismatch, {size} bytes on disk but dims {dims} need {expected} "
                             f"(first bad byte offset {min(size, expected)})")
    data = np.fromfile(path, dtype="<f4").reshape(dims)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise IngestionError(f"{path}: non-finite value at byte offset {4 * int(bad[0])}")
    extra = {k: v for k, v in meta.items() if k not in ("dims", "contrast", "subject", "voxel_mm")}
    return ContrastVolume(data.astype(np.float32), str(meta.get("contrast", path.stem)),
                          str(meta.get("subject", "")), tuple(meta.get("voxel_mm", (1.0, 1.0, 1.0))), extra)


def save_volume(volume, directory, name=None, **extra):
    """Write ``volume`` as ``<name>.f32`` plus sidecar; returns the data path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or f"{volume.subject_id}_{volume.contrast_label}"
    path = directory / f"{name}.f32"
    volume.slices.astype("<f4").tofile(path)
    meta = {
        "dims": list(volume.slices.shape),
        "contrast": volume.contrast_label,
        "subject": volume.subject_id,
        "voxel_mm": list(volume.voxel_mm),
    }
    meta.update(volume.provenance)
    meta.update(extra)
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_volume_dir(directory):
    """Load every volume under ``directory`` grouped as ``{subject: {contrast: volume}}``."""
    subjects = {}
    for path in sorted(Path(directory).glob("*.f32")):
        vol = load_volume(path)
        subjects.setdefault(vol.subject_id, {})[vol.contrast_label] = vol
    return subjects


def normalize(volume):
    """Per-volume min-max scaling to [0, 1]; the original range goes into provenance."""
    data = volume.slices.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DegenerateInputError(f"{volume.subject_id}/{volume.contrast_label}: non-finite values")
    lo, hi = float(data.min()), float(data.max())
    if not hi > lo:
        raise DegenerateInputError(f"{volume.subject_id}/{volume.contrast_label}: constant volume")
    scaled = (data - lo) / (hi - lo)
    prov = dict(volume.provenance, norm_min=lo, norm_max=hi)
    return ContrastVolume(scaled.astype(np.float32), volume.contrast_label, volume.subject_id,
                          volume.voxel_mm, prov)


# -------------------------------------------------------------------- phantoms


@dataclass
class PhantomSpec:
    """Recipe for a synthetic multi-contrast dataset with shared geometry.

    ``intensity_tables`` maps each contrast to the intensity of every tissue
    class; class 0 is the air background and class 1 the head envelope.
    ``intensity_jitter`` perturbs every shape instance independently per
    contrast so that one contrast does not determine the other exactly.
    """

    n_subjects: int = 4
    slices_per_subject: int = 4
    height: int = 64
    width: int = 64
    n_shapes: int = 12
    intensity_tables: dict = field(default_factory=lambda: {
        "T1": [0.0, 0.55, 0.85, 0.30, 0.70, 0.45, 0.95],
        "T2": [0.0, 0.35, 0.20, 0.80, 0.55, 0.95, 0.65],
    })
    lesion_probability: float = 0.0
    lesion_contrast_visibility: tuple = ("T2",)
    lesion_intensity: dict = field(default_factory=lambda: {"T1": 0.15, "T2": 1.0})
    intensity_jitter: float = 0.0
    blur_sigma: float = 1.0
    voxel_mm: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise DimensionError(f"phantoms need H, W >= 32, got {(self.height, self.width)}")
        if self.n_subjects < 1 or self.slices_per_subject < 1 or self.n_shapes < 0:
            raise ParameterError("n_subjects and slices_per_subject must be >= 1, n_shapes >= 0")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ParameterError("lesion_probability must lie in [0, 1]")
        sizes = {len(t) for t in self.intensity_tables.values()}
        if len(sizes) != 1 or sizes.pop() < 3:
            raise ParameterError("intensity tables must share one length of at least 3 classes")
        for label, table in self.intensity_tables.items():
            if min(table) < 0 or max(table) > 1:
                raise ParameterError(f"intensity table for {label} leaves [0, 1]")
        unknown = set(self.lesion_contrast_visibility) - set(self.intensity_tables)
        if unknown:
            raise ParameterError(f"lesion visibility names unknown contrasts {sorted(unknown)}")
        self.lesion_contrast_visibility = tuple(self.lesion_contrast_visibility)
        self.voxel_mm = tuple(float(v) for v in self.voxel_mm)

    @property
    def contrasts(self):
        return list(self.intensity_tables)

    @classmethod
    def from_json(cls, text_or_dict):
        data = json.loads(text_or_dict) if isinstance(text_or_dict, str) else dict(text_or_dict)
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ParameterError(f"unknown phantom spec keys {sorted(unknown)}")
        return cls(**data)

    def to_json(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _rectangle(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= ax) & (np.abs(v) <= ay)


def _phantom_slice(spec, rng):
    """Paint one slice; returns per-contrast images, the class map and the lesion mask."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    n_classes = len(next(iter(spec.intensity_tables.values())))
    labels = spec.contrasts

    canvas = {c: np.zeros((h, w)) for c in labels}
    classes = np.zeros((h, w), dtype=np.int16)

    cy = h / 2 + rng.uniform(-0.03, 0.03) * scale
    cx = w / 2 + rng.uniform(-0.03, 0.03) * scale
    head_ay = rng.uniform(0.38, 0.45) * scale
    head_ax = rng.uniform(0.32, 0.40) * scale
    head = _ellipse(yy, xx, cy, cx, head_ay, head_ax, rng.uniform(-0.2, 0.2))
    classes[head] = 1

    def paint(region, cls):
        classes[region] = cls
        for c in labels:
            value = spec.intensity_tables[c][cls]
            if spec.intensity_jitter > 0:
                value = value + rng.normal(0.0, spec.intensity_jitter)
            canvas[c][region] = np.clip(value, 0.0, 1.0)

    paint(head, 1)
    for _ in range(spec.n_shapes):
        cls = int(rng.integers(2, n_classes))
        # mix coarse and fine structures so high spatial frequencies matter
        size = scale * (rng.uniform(0.02, 0.06) if rng.random() < 0.5 else rng.uniform(0.06, 0.16))
        r = np.sqrt(rng.random()) * 0.7
        phi = rng.uniform(0, 2 * np.pi)
        sy = cy + r * head_ay * np.sin(phi)
        sx = cx + r * head_ax * np.cos(phi)
        ay, ax = size * rng.uniform(0.5, 1.5), size * rng.uniform(0.5, 1.5)
        shape = _ellipse if rng.random() < 0.6 else _rectangle
        paint(shape(yy, xx, sy, sx, ay, ax, rng.uniform(0, np.pi)) & head, cls)

    lesion = np.zeros((h, w), dtype=bool)
    if spec.lesion_probability > 0 and rng.random() < spec.lesion_probability:
        r = np.sqrt(rng.random()) * 0.55
        phi = rng.uniform(0, 2 * np.pi)
        ly = cy + r * head_ay * np.sin(phi)
        lx = cx + r * head_ax * np.cos(phi)
        size = scale * rng.uniform(0.05, 0.10)
        lesion = _ellipse(yy, xx, ly, lx, size * rng.uniform(0.7, 1.3), size * rng.uniform(0.7, 1.3),
                          rng.uniform(0, np.pi)) & head
        for c in spec.lesion_contrast_visibility:
            canvas[c][lesion] = spec.lesion_intensity.get(c, 1.0)

    images = {}
    for c in labels:
        img = gaussian_filter(canvas[c], spec.blur_sigma) if spec.blur_sigma > 0 else canvas[c]
        images[c] = np.clip(img, 0.0, 1.0)
    return images, classes, lesion


def phantom_generate(spec, return_labels=False):
    """Synthesize ``{subject_id: {contrast: ContrastVolume}}`` from ``spec``.

    With ``return_labels`` the per-subject class maps and lesion masks are also
    returned as ``(volumes, {subject: (classes[S,H,W], lesions[S,H,W])})``.
    """
    root = np.random.SeedSequence(spec.seed)
    subjects, label_maps = {}, {}
    for s, child in enumerate(root.spawn(spec.n_subjects)):
        rng = np.random.default_rng(child)
        sid = f"sub{s:03d}"
        stacks = {c: [] for c in spec.contrasts}
        cls_stack, les_stack = [], []
        for _ in range(spec.slices_per_subject):
            images, classes, lesion = _phantom_slice(spec, rng)
            for c in spec.contrasts:
                stacks[c].append(images[c])
            cls_stack.append(classes)
            les_stack.append(lesion)
        subjects[sid] = {
            c: ContrastVolume(np.stack(stacks[c]).astype(np.float32), c, sid, spec.voxel_mm)
            for c in spec.contrasts
        }
        label_maps[sid] = (np.stack(cls_stack), np.stack(les_stack))
    if return_labels:
        return subjects, label_maps
    return subjects


def split_subjects(subjects, train_fraction, seed):
    """Subject-level split into ``(train, test)`` lists, order preserved."""
    subjects = list(subjects)
    if len(subjects) < 2:
        raise ParameterError("need at least two subjects to split")
    if len(set(subjects)) != len(subjects):
        raise ParameterError("subject identifiers must be unique")
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(train_fraction * len(subjects)))
    n_train = min(max(n_train, 1), len(subjects) - 1)
    order = np.random.default_rng(seed).permutation(len(subjects))
    chosen = set(order[:n_train].tolist())
    train = [s for i, s in enumerate(subjects) if i in chosen]
    test = [s for i, s in enumerate(subjects) if i not in chosen]
    return train, test


# ------------------------------------------------------------ example assembly


def _check_subject(vols, labels):
    missing = [c for c in labels if c not in vols]
    if missing:
        raise PairingError(f"missing contrasts {missing}")
    shapes = {vols[c].shape for c in labels}
    if len(shapes) != 1:
        raise PairingError(f"contrasts of one subject differ in shape: {sorted(shapes)}")
    return shapes.pop()


def make_examples(volumes, banks, roles, mask_assignment_seed, outputs=None):
    """Retrospectively undersample registered volumes into recovery examples.

    Parameters
    ----------
    volumes : dict
        ``{subject_id: {contrast: ContrastVolume}}`` with values in [0, 1].
    banks : dict
        ``{R: [SamplingMask, ...]}``; each undersampled contrast draws its mask
        uniformly from the bank of its role's acceleration. Fully-sampled
        sources use the all-ones mask.
    roles : dict
        ``{contrast: Role}`` for every input contrast, in channel order.
    mask_assignment_seed : int
    outputs : list of str, optional
        Output contrasts; defaults to every contrast with a role.
    """
    roles = parse_roles(roles)
    outputs = list(outputs) if outputs is not None else list(roles)
    # one stream per contrast: a contrast's masks do not depend on which others are present
    rngs = {label: np.random.default_rng([int(mask_assignment_seed), zlib.crc32(label.encode())])
            for label in roles}
    banks = {float(r): list(b) for r, b in banks.items()}
    examples = []
    for sid in volumes:
        vols = volumes[sid]
        s, h, w = _check_subject(vols, list(dict.fromkeys(list(roles) + outputs)))
        ones = full_mask(h, w)
        for idx in range(s):
            channels, acquired = [], []
            for label, role in roles.items():
                if role.kind == "source_full" or role.R == 1:
                    mask = ones
                else:
                    bank = banks.get(float(role.R))
                    if not bank:
                        raise ConfigurationError(f"no mask bank for R={role.R:g} ({label} {role.kind})")
                    mask = bank[int(rngs[label].integers(len(bank)))]
                    if mask.shape != (h, w):
                        raise PairingError(f"mask shape {mask.shape} != image shape {(h, w)}")
                kspace = apply_mask(forward_fft(vols[label].slices[idx].astype(np.float64)), mask)
                zf = to_network(zero_filled_recon(kspace, mask))
                channels += [zf.real, zf.imag]
                acquired.append((kspace.astype(np.complex64), mask))
            targets = np.stack([to_network(vols[c].slices[idx]) for c in outputs])
            examples.append(RecoveryExample(
                input_channels=np.stack(channels).astype(np.float32),
                targets=targets.astype(np.float32),
                acquired=acquired,
                roles=[roles[c].kind for c in roles],
                input_labels=list(roles),
                output_labels=outputs,
                subject_id=sid,
                slice_index=idx,
            ))
    return examples


@dataclass
class ExampleFactory:
    """Rebuilds examples with a fresh mask assignment for every epoch."""

    volumes: dict
    banks: dict
    roles: dict
    outputs: list = None
    seed: int = 0

    def for_epoch(self, epoch):
        seed = int(np.random.SeedSequence([self.seed, epoch]).generate_state(1)[0])
        return make_examples(self.volumes, self.banks, self.roles, seed, self.outputs)


# ------------------------------------------------------------ example storage


def save_examples(examples, directory, **manifest):
    """Store examples as one ``.npz`` per subject plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_subject = {}
    for ex in examples:
        by_subject.setdefault(ex.subject_id, []).append(ex)
    first = examples[0]
    for sid, group in by_subject.items():
        masks = [[m for _, m in ex.acquired] for ex in group]
        np.savez_compressed(
            directory / f"{sid}.npz",
            input_channels=np.stack([ex.input_channels for ex in group]),
            targets=np.stack([ex.targets for ex in group]),
            kspace=np.stack([np.stack([k for k, _ in ex.acquired]) for ex in group]),
            masks=np.stack([np.stack([m.bits for m in row]) for row in masks]),
            mask_meta=np.array([[[m.target_R, m.achieved_R, m.k_r, m.d] for m in row] for row in masks],
                               dtype=np.float64),
            mask_seed=np.array([[m.seed for m in row] for row in masks], dtype=np.uint64),
            slice_index=np.array([ex.slice_index for ex in group]),
        )
    meta = {
        "subjects": list(by_subject),
        "input_labels": first.input_labels,
        "roles": first.roles,
        "output_labels": first.output_labels,
    }
    meta.update(manifest)
    (directory / "manifest.json").write_text(json.dumps(meta, indent=2))


def load_examples(directory):
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    examples = []
    for sid in meta["subjects"]:
        with np.load(directory / f"{sid}.npz") as z:
            for i, idx in enumerate(z["slice_index"]):
                acquired = []
                for j in range(len(meta["input_labels"])):
                    tr, ar, kr, d = z["mask_meta"][i, j]
                    mask = SamplingMask(z["masks"][i, j], float(tr), float(ar), float(kr), int(d),
                                        int(z["mask_seed"][i, j]))
                    acquired.append((z["kspace"][i, j], mask))
                examples.append(RecoveryExample(
                    z["input_channels"][i], z["targets"][i], acquired, list(meta["roles"]),
                    list(meta["input_labels"]), list(meta["output_labels"]), sid, int(idx)))
    return examples, meta
