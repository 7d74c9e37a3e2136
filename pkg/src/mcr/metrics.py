"""Image-quality metrics, the Wilcoxon signed-rank test, and the evaluation harness."""

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import norm, rankdata

from .errors import DimensionError, DomainError, IngestionError, PairingError

__all__ = [
    "SSIM_WINDOW",
    "SSIM_SIGMA",
    "SSIM_K1",
    "SSIM_K2",
    "METHODS",
    "MetricRecord",
    "WilcoxonResult",
    "psnr",
    "ssim",
    "gaussian_window",
    "wilcoxon_signed_rank",
    "evaluate",
    "summarize",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_summary",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_MAX_N = 25
METHODS = ("ZF", "rGAN", "sGAN", "rsGAN")
CSV_COLUMNS = ("subject", "slice", "contrast", "method", "target_R", "source_R", "psnr_db", "ssim")


def _pair(reference, test):
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    for name, x in (("reference", a), ("test", b)):
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise DomainError(f"{name} image values must lie in [0, 1]")
    return a, b


def psnr(reference, test):
    """Peak signal-to-noise ratio in dB for unit-peak images; ``inf`` when identical."""
    a, b = _pair(reference, test)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(-10.0 * np.log10(mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, taps):
    half = len(taps) // 2
    out = correlate1d(correlate1d(x, taps, axis=0, mode="constant"), taps, axis=1, mode="constant")
    return out[half:x.shape[0] - half, half:x.shape[1] - half]


def ssim(reference, test):
    """Mean structural similarity over all fully-contained 11x11 Gaussian windows."""
    a, b = _pair(reference, test)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs 2D images of at least {SSIM_WINDOW} pixels per side")
    taps = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


class WilcoxonResult(NamedTuple):
    statistic: float
    pvalue: float
    n: int
    method: str
    degenerate: bool = False


def _exact_null_counts(doubled_ranks):
    """Number of sign patterns reaching each (doubled) positive-rank sum."""
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(differences):
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped and tied magnitudes share mid-ranks. The
    statistic is ``min(W+, W-)``. For at most 25 non-zero differences the
    p-value comes from the exact permutation distribution (computed on the
    actual mid-ranks); larger samples use the normal approximation with
    continuity and tie corrections.
    """
    d = np.asarray(differences, dtype=np.float64).ravel()
    if d.size < 1:
        raise DimensionError("need at least one paired difference")
    if np.any(np.isnan(d)):
        raise DomainError("differences contain NaN")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", True)

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_null_counts(doubled)
        tail = counts[: int(round(2 * w)) + 1].sum() / 2.0 ** n
        return WilcoxonResult(w, float(min(1.0, 2.0 * tail)), n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes ** 3 - tie_sizes) / 48.0
    z = (w - mean + 0.5) / math.sqrt(var)
    return WilcoxonResult(w, float(min(1.0, 2.0 * norm.cdf(z))), n, "normal")


# ----------------------------------------------------------------- evaluation


@dataclass
class MetricRecord:
    subject_id: str
    slice_index: int
    contrast_label: str
    method: str
    target_R: float
    source_R: float
    psnr_db: float
    ssim: float

    def row(self):
        return [self.subject_id, str(self.slice_index), self.contrast_label, self.method,
                _fmt(self.target_R), _fmt(self.source_R), _fmt(self.psnr_db), _fmt(self.ssim)]


def _fmt(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x)) if isinstance(x, float) else str(x)


def evaluate(recovered, references, contrasts=None):
    """Score recovered volumes against references, slice by slice.

    Parameters
    ----------
    recovered : iterable of ContrastVolume
        Each carries ``method``, ``target_R`` and ``source_R`` in its
        provenance. Values are clipped to [0, 1] before scoring.
    references : dict
        ``{subject_id: {contrast: ContrastVolume}}`` normalized to [0, 1].
    contrasts : iterable of str, optional
        Restrict scoring to these contrasts (normally the targets).

    Returns
    -------
    records : list of MetricRecord
    summary : dict
        See :func:`summarize`.
    """
    keep = set(contrasts) if contrasts is not None else None
    records = []
    for vol in recovered:
        if keep is not None and vol.contrast_label not in keep:
            continue
        try:
            ref = references[vol.subject_id][vol.contrast_label]
        except KeyError:
            raise PairingError(f"no reference for {vol.subject_id}/{vol.contrast_label}") from None
        if ref.shape != vol.shape:
            raise PairingError(f"{vol.subject_id}/{vol.contrast_label}: recovered {vol.shape} "
                               f"vs reference {ref.shape}")
        prov = vol.provenance
        for s in range(vol.shape[0]):
            test = np.clip(vol.slices[s].astype(np.float64), 0.0, 1.0)
            truth = np.clip(ref.slices[s].astype(np.float64), 0.0, 1.0)
            records.append(MetricRecord(vol.subject_id, s, vol.contrast_label, str(prov["method"]),
                                        float(prov.get("target_R", 1.0)), float(prov.get("source_R", 1.0)),
                                        psnr(truth, test), ssim(truth, test)))
    if not records:
        raise PairingError("no recovered volumes matched the requested contrasts")
    records.sort(key=lambda r: (r.contrast_label, r.target_R, r.source_R, _method_order(r.method),
                                r.subject_id, r.slice_index))
    return records, summarize(records)


def _method_order(method):
    return METHODS.index(method) if method in METHODS else len(METHODS)


def _std(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    if not np.all(np.isfinite(values)):
        return math.nan
    return float(np.std(values, ddof=1))


def _paired_difference(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    # equal values (including both infinite) give an exact zero
    return np.subtract(a, b, out=np.zeros_like(a), where=a != b)


def summarize(records):
    """Aggregate per-slice records.

    Slices are averaged per subject first; ``*_mean``/``*_std`` are the mean
    and sample standard deviation of those subject means. Pairwise Wilcoxon
    tests compare subject means between every two methods sharing a
    (contrast, target_R, source_R) setting.
    """
    per_subject = {}
    for r in records:
        key = (r.method, r.contrast_label, r.target_R, r.source_R)
        per_subject.setdefault(key, {}).setdefault(r.subject_id, []).append((r.psnr_db, r.ssim))

    groups = []
    means = {}
    for key in sorted(per_subject, key=lambda k: (k[1], k[2], k[3], _method_order(k[0]))):
        method, contrast, tr, sr = key
        subjects = sorted(per_subject[key])
        p = [float(np.mean([v[0] for v in per_subject[key][s]])) for s in subjects]
        q = [float(np.mean([v[1] for v in per_subject[key][s]])) for s in subjects]
        means[key] = dict(zip(subjects, zip(p, q)))
        groups.append({
            "method": method, "contrast": contrast, "target_R": tr, "source_R": sr,
            "psnr_mean": float(np.mean(p)), "psnr_std": _std(p),
            "ssim_mean": float(np.mean(q)), "ssim_std": _std(q),
            "n_subjects": len(subjects),
        })

    pairwise = []
    settings = sorted({k[1:] for k in means})
    for contrast, tr, sr in settings:
        methods = sorted({k[0] for k in means if k[1:] == (contrast, tr, sr)}, key=_method_order)
        for ma, mb in itertools.combinations(methods, 2):
            a, b = means[(ma, contrast, tr, sr)], means[(mb, contrast, tr, sr)]
            common = sorted(set(a) & set(b))
            if not common:
                continue
            for metric, idx in (("psnr", 0), ("ssim", 1)):
                diff = _paired_difference([a[s][idx] for s in common], [b[s][idx] for s in common])
                res = wilcoxon_signed_rank(diff)
                pairwise.append({"method_a": ma, "method_b": mb, "contrast": contrast, "target_R": tr,
                                 "source_R": sr, "metric": metric, "W": res.statistic, "p": res.pvalue,
                                 "n": res.n, "test": res.method, "degenerate": res.degenerate})
    return {
        "groups": groups,
        "pairwise": pairwise,
        "metadata": {
            "psnr_peak": 1.0,
            "ssim": {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "K1": SSIM_K1, "K2": SSIM_K2, "L": 1.0},
            "wilcoxon_unit": "subject mean",
        },
    }


def write_metrics_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.row())


def _parse_float(text):
    return float(text)  # accepts "inf"


def read_metrics_csv(path):
    """Parse ``metrics.csv``; malformed content raises with the offending line number."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise IngestionError(f"{path}:1: expected header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise IngestionError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                records.append(MetricRecord(row[0], int(row[1]), row[2], row[3], _parse_float(row[4]),
                                            _parse_float(row[5]), _parse_float(row[6]), _parse_float(row[7])))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise IngestionError(f"{path}: no metric rows")
    return records


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_summary(summary, path):
    """Write ``summary.json``; non-finite numbers become the strings ``"inf"``/``"nan"``."""
    Path(path).write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=False) + "\n")


def records_as_dicts(records):
    return [asdict(r) for r in records]
