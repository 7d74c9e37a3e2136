"""Variable-density Poisson-disc undersampling masks."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import CalibrationError, DimensionError, ParameterError

__all__ = [
    "DENSITY_FLOOR",
    "DensityParams",
    "SamplingMask",
    "default_params",
    "normalized_radius",
    "density_profile",
    "exclusion_radius",
    "generate_mask",
    "mask_bank",
    "full_mask",
    "save_mask",
    "load_mask",
    "load_mask_dir",
]

DENSITY_FLOOR = 1e-3
# exclusion radius (pixels) at unit density; below 1 so that density 1 fills the grid
RADIUS_AT_UNIT_DENSITY = 0.9
MAX_BISECTION_STEPS = 30
R_TOLERANCE = 0.05

# (upper R, k_r, d) rows of the default density table
_DEFAULT_TABLE = (
    (10.0, 0.14, 5),
    (20.0, 0.10, 9),
    (30.0, 0.10, 10),
    (40.0, 0.10, 15),
    (50.0, 0.06, 20),
)


@dataclass(frozen=True)
class DensityParams:
    """Calibration radius ``k_r``, polynomial degree ``d`` and target acceleration."""

    k_r: float
    d: int
    target_R: float

    def __post_init__(self):
        if not 0.0 < self.k_r <= 0.5:
            raise ParameterError(f"k_r must lie in (0, 0.5], got {self.k_r}")
        if int(self.d) != self.d or self.d < 1:
            raise ParameterError(f"degree d must be a positive integer, got {self.d}")
        if not self.target_R >= 1.0:
            raise ParameterError(f"target_R must be >= 1, got {self.target_R}")


def default_params(target_R, k_r=None, d=None):
    """Density parameters for ``target_R`` from the built-in (R -> k_r, d) table.

    Accelerations between table rows take the next higher row; values above
    50 use the R=50 row. Explicit ``k_r``/``d`` override the table.
    """
    if not target_R >= 1.0:
        raise ParameterError(f"target_R must be >= 1, got {target_R}")
    for upper, kr, deg in _DEFAULT_TABLE:
        if target_R <= upper:
            break
    return DensityParams(k_r=kr if k_r is None else k_r, d=deg if d is None else d,
                         target_R=float(target_R))


@dataclass
class SamplingMask:
    bits: np.ndarray
    target_R: float
    achieved_R: float
    k_r: float
    d: int
    seed: int
    scale: float = field(default=float("nan"), compare=False)

    @property
    def shape(self):
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (np.array_equal(self.bits, other.bits) and self.target_R == other.target_R
                and self.k_r == other.k_r and self.d == other.d and self.seed == other.seed)

    def metadata(self):
        return {
            "dims": list(self.bits.shape),
            "target_R": self.target_R,
            "achieved_R": self.achieved_R,
            "k_r": self.k_r,
            "d": self.d,
            "seed": self.seed,
        }


def full_mask(height, width):
    """All-ones mask (R = 1)."""
    return SamplingMask(np.ones((height, width), dtype=bool), 1.0, 1.0, 0.0, 1, 0, 1.0)


def normalized_radius(height, width):
    """Distance from the grid center over the center-to-nearest-edge distance, clipped to 1."""
    yy = np.arange(height) - height // 2
    xx = np.arange(width) - width // 2
    r = np.hypot(yy[:, None], xx[None, :]) / (min(height, width) / 2.0)
    return np.minimum(r, 1.0)


def density_profile(r, params, scale=1.0):
    """Sampling density at normalized radius ``r``.

    One inside the calibration disc, ``(1 - (r - k_r)/(1 - k_r))**d * scale``
    plus a small floor outside it, capped at one.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(r > 1) or np.any(np.isnan(r)):
        raise ParameterError("normalized radius must lie in [0, 1]")
    t = np.clip((r - params.k_r) / (1.0 - params.k_r), 0.0, 1.0)
    outer = (1.0 - t) ** params.d * scale + DENSITY_FLOOR
    out = np.where(r <= params.k_r, 1.0, np.minimum(outer, 1.0))
    return float(out) if out.ndim == 0 else out


def exclusion_radius(density):
    return RADIUS_AT_UNIT_DENSITY / np.sqrt(density)


@numba.njit(cache=True)
def _poisson_disc(radius, calib, seed, attempts):
    height, width = radius.shape
    np.random.seed(seed)
    taken = calib.copy()
    active_y = np.empty(height * width, dtype=np.int64)
    active_x = np.empty(height * width, dtype=np.int64)
    n_active = 0
    # grow outwards from the boundary of the calibration disc
    for y in range(height):
        for x in range(width):
            if calib[y, x]:
                active_y[n_active] = y
                active_x[n_active] = x
                n_active += 1
    if n_active == 0:
        y0 = height // 2
        x0 = width // 2
        taken[y0, x0] = True
        active_y[0] = y0
        active_x[0] = x0
        n_active = 1

    while n_active > 0:
        idx = np.random.randint(n_active)
        py = active_y[idx]
        px = active_x[idx]
        rho = radius[py, px]
        found = False
        for _ in range(attempts):
            dist = rho * (1.0 + np.random.random())
            angle = 2.0 * np.pi * np.random.random()
            cy = int(np.floor(py + dist * np.sin(angle) + 0.5))
            cx = int(np.floor(px + dist * np.cos(angle) + 0.5))
            if cy < 0 or cy >= height or cx < 0 or cx >= width or taken[cy, cx]:
                continue
            rc = radius[cy, cx]
            reach = int(np.ceil(rc))
            ok = True
            for qy in range(max(0, cy - reach), min(height, cy + reach + 1)):
                dy = qy - cy
                for qx in range(max(0, cx - reach), min(width, cx + reach + 1)):
                    if taken[qy, qx]:
                        dx = qx - cx
                        if dy * dy + dx * dx < rc * rc:
                            ok = False
                            break
                if not ok:
                    break
            if ok:
                taken[cy, cx] = True
                active_y[n_active] = cy
                active_x[n_active] = cx
                n_active += 1
                found = True
                break
        if not found:
            n_active -= 1
            active_y[idx] = active_y[n_active]
            active_x[idx] = active_x[n_active]
    return taken


def _draw(height, width, params, scale, seed, attempts=30):
    r = normalized_radius(height, width)
    calib = r <= params.k_r
    density = density_profile(r, params, scale)
    bits = _poisson_disc(exclusion_radius(density), calib, np.uint32(seed % 2**32), attempts)
    bits[height // 2, width // 2] = True
    return bits


def generate_mask(height, width, params, seed):
    """Draw a variable-density Poisson-disc mask hitting ``params.target_R`` within 5%.

    The density scale is bisected in log space; each trial redraws the pattern
    from the same seed so the result depends only on the arguments.
    """
    if height % 2 or width % 2 or height < 2 or width < 2:
        raise DimensionError(f"mask dimensions must be even, got {(height, width)}")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ParameterError("seed must be an unsigned 64-bit integer")
    if params.target_R == 1.0:
        return SamplingMask(np.ones((height, width), dtype=bool), 1.0, 1.0,
                            params.k_r, int(params.d), seed, float("inf"))

    # numba RNG takes 32-bit seeds; fold the high word in
    rng_seed = (seed ^ (seed >> 32)) & 0xFFFFFFFF
    total = height * width
    target = params.target_R
    lo, hi = math.log(1e-6), math.log(1e6)
    best = None
    for _ in range(MAX_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        bits = _draw(height, width, params, math.exp(mid), rng_seed)
        achieved = total / bits.sum()
        if best is None or abs(achieved - target) < abs(best[1] - target):
            best = (bits, achieved, math.exp(mid))
        if abs(achieved - target) <= R_TOLERANCE * target:
            break
        if achieved > target:
            lo = mid
        else:
            hi = mid
    bits, achieved, scale = best
    if abs(achieved - target) > R_TOLERANCE * target:
        raise CalibrationError(
            f"could not reach R={target:g} on {height}x{width} with k_r={params.k_r}, d={params.d}; "
            f"best achieved R={achieved:.3f}",
            best_R=achieved,
        )
    return SamplingMask(bits, float(target), float(achieved), float(params.k_r), int(params.d), seed, scale)


def mask_bank(height, width, params, count, base_seed):
    """``count`` masks with consecutive seeds starting at ``base_seed``."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    bank = []
    for i in range(count):
        try:
            bank.append(generate_mask(height, width, params, base_seed + i))
        except CalibrationError as exc:
            raise CalibrationError(f"mask {i} (seed {base_seed + i}): {exc}", best_R=exc.best_R) from exc
    return bank


def save_mask(mask, directory, name):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mask.bits.astype(np.uint8).tofile(directory / f"{name}.mask.bin")
    (directory / f"{name}.mask.json").write_text(json.dumps(mask.metadata(), indent=2))


def load_mask(path):
    """Load ``<name>.mask.bin`` (or its ``.mask.json`` sidecar path)."""
    path = Path(path)
    stem = path.name.split(".mask.")[0]
    meta = json.loads((path.parent / f"{stem}.mask.json").read_text())
    h, w = meta["dims"]
    raw = np.fromfile(path.parent / f"{stem}.mask.bin", dtype=np.uint8)
    if raw.size != h * w:
        raise DimensionError(f"{stem}.mask.bin holds {raw.size} bytes, expected {h * w}")
    if np.any(raw > 1):
        raise ParameterError(f"{stem}.mask.bin contains values other than 0/1")
    return SamplingMask(raw.reshape(h, w).astype(bool), float(meta["target_R"]),
                        float(meta["achieved_R"]), float(meta["k_r"]), int(meta["d"]), int(meta["seed"]))


def load_mask_dir(directory, target_R=None):
    """All masks in ``directory`` sorted by name, optionally filtered by target R."""
    masks = [load_mask(p) for p in sorted(Path(directory).glob("*.mask.bin"))]
    if target_R is not None:
        masks = [m for m in masks if m.target_R == float(target_R)]
    return masks
