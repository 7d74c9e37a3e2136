"""``mcr`` command line: masks, data, training, recovery, evaluation, reports and full experiments.

Exit codes: 0 success, 2 validation error, 3 mask calibration failure,
4 stage (runtime) failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import CalibrationError, ConfigurationError, MCRError, NumericalError

EXIT_OK, EXIT_VALIDATION, EXIT_CALIBRATION, EXIT_STAGE = 0, 2, 3, 4

log = logging.getLogger("mcr")


def _acceleration(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value >= 1:
        raise argparse.ArgumentTypeError(f"acceleration must be >= 1, got {text}")
    return value


def _nonneg_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _positive_int(text):
    value = _nonneg_int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _dc_weight(text):
    if text.strip().lower() in ("inf", "infinity"):
        return float("inf")
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"data-consistency weight must be >= 0, got {text}")
    return value


def _emit(rows, header):
    """Tab-delimited table on stdout."""
    print("\t".join(header))
    for row in rows:
        print("\t".join(str(v) for v in row))


# -------------------------------------------------------------------- commands


def cmd_mask_gen(args):
    from .sampling import default_params, mask_bank, save_mask

    params = default_params(args.R, args.k_r, args.d)
    masks = mask_bank(args.height, args.width, params, args.count, args.seed)
    for i, m in enumerate(masks):
        save_mask(m, args.out, f"{args.prefix}{i:03d}")
    _emit([(m.seed, f"{m.target_R:g}", f"{m.achieved_R:.4f}", m.k_r, m.d) for m in masks],
          ("seed", "target_R", "achieved_R", "k_r", "d"))
    return EXIT_OK


def cmd_data_phantom(args):
    from .datasets import PhantomSpec, phantom_generate, save_volume

    fields = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("n_subjects", "slices_per_subject", "height", "width", "lesion_probability", "intensity_jitter",
                "seed"):
        value = getattr(args, key)
        if value is not None:
            fields[key] = value
    spec = PhantomSpec.from_json(fields)
    volumes = phantom_generate(spec)
    for sid, cs in volumes.items():
        for vol in cs.values():
            save_volume(vol, args.out)
    (Path(args.out) / "phantom.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n")
    _emit([(sid, c, "x".join(map(str, v.shape))) for sid, cs in volumes.items() for c, v in cs.items()],
          ("subject", "contrast", "shape"))
    return EXIT_OK


def _banks_from(mask_dirs):
    from .sampling import load_mask_dir

    banks = {}
    for d in mask_dirs or []:
        for m in load_mask_dir(d):
            banks.setdefault(m.target_R, []).append(m)
    return banks


def cmd_data_prepare(args):
    from .datasets import load_volume_dir, make_examples, normalize, parse_roles, save_examples

    volumes = load_volume_dir(args.volumes)
    if not volumes:
        raise ConfigurationError(f"no volumes in {args.volumes}")
    if args.subjects:
        keep = set(args.subjects.split(","))
        volumes = {s: v for s, v in volumes.items() if s in keep}
    if args.normalize:
        volumes = {s: {c: normalize(v) for c, v in cs.items()} for s, cs in volumes.items()}
    roles = parse_roles(args.roles)
    outputs = args.outputs.split(",") if args.outputs else None
    examples = make_examples(volumes, _banks_from(args.masks), roles, args.seed, outputs)
    save_examples(examples, args.out, volume_dir=str(Path(args.volumes).resolve()),
                  mask_dirs=[str(Path(d).resolve()) for d in args.masks or []], mask_assignment_seed=args.seed,
                  role_spec={k: str(v) for k, v in roles.items()}, normalized=bool(args.normalize),
                  subject_filter=sorted(volumes))
    _emit([(ex.subject_id, ex.slice_index) for ex in examples], ("subject", "slice"))
    return EXIT_OK


def _training_source(data_dir, config):
    """Static examples, or a per-epoch factory when the prepared set records its volumes and masks."""
    from .datasets import ExampleFactory, load_examples, load_volume_dir, normalize

    examples, meta = load_examples(data_dir)
    if "volume_dir" in meta and Path(meta["volume_dir"]).exists():
        volumes = load_volume_dir(meta["volume_dir"])
        volumes = {s: volumes[s] for s in meta.get("subject_filter", volumes)}
        if meta.get("normalized"):
            volumes = {s: {c: normalize(v) for c, v in cs.items()} for s, cs in volumes.items()}
        return ExampleFactory(volumes, _banks_from(meta.get("mask_dirs")), config.roles, config.outputs,
                              config.seeds["mask_assignment"])
    return examples


def cmd_train(args):
    from .datasets import load_examples
    from .training import TrainConfig, train

    raw = json.loads(Path(args.config).read_text())
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    config = TrainConfig(**raw)
    source = _training_source(args.data, config) if not args.static else load_examples(args.data)[0]
    validation = load_examples(args.validation)[0] if args.validation else None
    out = Path(args.out)
    ckpt, trace = train(config, source, validation, trace_path=out / "trace.csv",
                        progress=lambda e, t: log.info("epoch %d: l1 %.5f", e, t.records[-1]["l1"])
                        if t.records else None)
    ckpt.save(out)
    trace.write_csv(out / "trace.csv")
    last = trace.records[-1] if trace.records else None
    _emit([(ckpt.variant, ckpt.epoch, "" if last is None else repr(last["l1"]))], ("variant", "epochs", "final_l1"))
    return EXIT_OK


def _rates(example):
    targets = [m.target_R for (_, m), k in zip(example.acquired, example.roles) if k == "target_heavy"]
    sources = [m.target_R for (_, m), k in zip(example.acquired, example.roles) if k.startswith("source")]
    return max(targets, default=1.0), max(sources, default=1.0)


def cmd_recover(args):
    from .datasets import load_examples, save_volume
    from .model import ModelCheckpoint
    from .training import chained_recover, recover_batch, to_volumes

    ckpt = ModelCheckpoint.load(args.ckpt)
    examples, _ = load_examples(args.data)
    if args.chain:
        results = chained_recover(ModelCheckpoint.load(args.chain), ckpt, examples, args.dc_lambda)
    else:
        results = recover_batch(ckpt, examples, args.dc_lambda)
    target_R, source_R = _rates(examples[0])
    vols = to_volumes(results, examples, method=args.method or ckpt.variant, target_R=target_R, source_R=source_R)
    for vol in vols:
        save_volume(vol, args.out)
    _emit([(v.subject_id, v.contrast_label, v.shape[0]) for v in vols], ("subject", "contrast", "slices"))
    return EXIT_OK


def _summary_rows(summary):
    return [(g["contrast"], g["method"], f"{g['target_R']:g}", f"{g['source_R']:g}", f"{g['psnr_mean']:.4f}",
             f"{g['psnr_std']:.4f}", f"{g['ssim_mean']:.6f}", f"{g['ssim_std']:.6f}", g["n_subjects"])
            for g in summary["groups"]]


_SUMMARY_HEADER = ("contrast", "method", "target_R", "source_R", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
                   "n_subjects")


def cmd_eval(args):
    from .datasets import load_volume_dir
    from .metrics import evaluate, write_metrics_csv, write_summary

    references = load_volume_dir(args.reference)
    recovered = []
    for d in args.recon:
        recovered += [v for cs in load_volume_dir(d).values() for v in cs.values()]
    contrasts = args.contrasts.split(",") if args.contrasts else None
    records, summary = evaluate(recovered, references, contrasts)
    out = Path(args.out)
    write_metrics_csv(records, out / "metrics.csv")
    write_summary(summary, out / "summary.json")
    _emit(_summary_rows(summary), _SUMMARY_HEADER)
    return EXIT_OK


def cmd_report(args):
    from .metrics import read_metrics_csv, summarize
    from .report import build_report

    written = build_report(args.metrics, args.out)
    _emit(_summary_rows(summarize(read_metrics_csv(args.metrics))), _SUMMARY_HEADER)
    for path in written:
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_experiment(args):
    from .experiment import STAGES, load_config, validate_config

    config = load_config(args.config)
    if args.output_dir:
        config["output_dir"] = args.output_dir
    if args.stop_after and args.stop_after not in STAGES:
        raise ConfigurationError(f"--stop-after must be one of {STAGES}")
    out = validate_config(config).run(args.stop_after)
    summary = out / "summary.json"
    if summary.exists():
        data = json.loads(summary.read_text())
        _emit(_summary_rows(data), _SUMMARY_HEADER)
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="mcr", description="Multi-contrast MRI recovery with conditional GANs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    mask = sub.add_parser("mask", help="undersampling masks").add_subparsers(dest="action", required=True,
                                                                              metavar="ACTION")
    g = mask.add_parser("gen", help="generate a bank of variable-density Poisson-disc masks",
                        description="Generate COUNT masks with consecutive seeds; writes <prefix>NNN.mask.bin/.json.")
    g.add_argument("--height", type=_positive_int, required=True, help="k-space rows (even)")
    g.add_argument("--width", type=_positive_int, required=True, help="k-space columns (even)")
    g.add_argument("--R", type=_acceleration, required=True, help="target acceleration factor (>= 1)")
    g.add_argument("--count", type=_positive_int, default=1, help="number of masks (default 1)")
    g.add_argument("--seed", type=_nonneg_int, default=0, help="seed of the first mask (default 0)")
    g.add_argument("--k-r", dest="k_r", type=float, default=None, help="calibration radius override")
    g.add_argument("--d", type=_positive_int, default=None, help="density polynomial degree override")
    g.add_argument("--prefix", default="mask_", help="file name prefix (default mask_)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_mask_gen)

    data = sub.add_parser("data", help="volumes and recovery examples").add_subparsers(dest="action", required=True,
                                                                                       metavar="ACTION")
    ph = data.add_parser("phantom", help="synthesize multi-contrast phantom volumes",
                         description="Write phantom volumes as .f32 + JSON sidecars.")
    ph.add_argument("--spec", help="JSON file of phantom fields; flags below override it")
    ph.add_argument("--subjects", dest="n_subjects", type=_positive_int, help="number of subjects")
    ph.add_argument("--slices", dest="slices_per_subject", type=_positive_int, help="slices per subject")
    ph.add_argument("--height", type=_positive_int, help="image rows")
    ph.add_argument("--width", type=_positive_int, help="image columns")
    ph.add_argument("--lesion-probability", dest="lesion_probability", type=float, help="per-slice lesion chance")
    ph.add_argument("--intensity-jitter", dest="intensity_jitter", type=float, help="per-shape intensity jitter")
    ph.add_argument("--seed", type=_nonneg_int, help="phantom seed")
    ph.add_argument("--out", required=True, help="output directory")
    ph.set_defaults(func=cmd_data_phantom)

    pr = data.add_parser("prepare", help="undersample volumes into recovery examples",
                         description="Assemble network inputs and acquisitions for a set of contrast roles.")
    pr.add_argument("--volumes", required=True, help="directory of .f32 volumes")
    pr.add_argument("--roles", required=True, help='e.g. "T1=source_full,T2=target_heavy:50"')
    pr.add_argument("--masks", action="append", help="mask directory (repeatable), grouped by target R")
    pr.add_argument("--outputs", help="comma-separated output contrasts (default: every role)")
    pr.add_argument("--subjects", help="comma-separated subject ids to keep")
    pr.add_argument("--normalize", action="store_true", help="min-max normalize each volume first")
    pr.add_argument("--seed", type=_nonneg_int, default=0, help="mask assignment seed (default 0)")
    pr.add_argument("--out", required=True, help="output directory")
    pr.set_defaults(func=cmd_data_prepare)

    t = sub.add_parser("train", help="train one network variant",
                       description="Train from a prepared example directory; writes a checkpoint and trace.csv.")
    t.add_argument("--config", required=True, help="JSON of training fields (variant, roles, epochs, ...)")
    t.add_argument("--data", required=True, help="prepared example directory")
    t.add_argument("--validation", help="prepared example directory scored after each epoch")
    t.add_argument("--epochs", type=_nonneg_int, help="override the configured epoch count")
    t.add_argument("--static", action="store_true", help="reuse the stored mask assignment every epoch")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("recover", help="recover images from a checkpoint",
                       description="Run the generator (plus data consistency) on prepared examples.")
    r.add_argument("--ckpt", required=True, help="checkpoint directory")
    r.add_argument("--data", required=True, help="prepared example directory")
    r.add_argument("--chain", metavar="SRC_CKPT", help="stage-1 rGAN checkpoint for a lightly undersampled source")
    r.add_argument("--dc-lambda", dest="dc_lambda", type=_dc_weight, default=None,
                   help="data-consistency weight, 'inf' for replacement (default: from checkpoint)")
    r.add_argument("--method", help="method label stored with the volumes (default: the variant)")
    r.add_argument("--out", required=True, help="output directory for .f32 volumes")
    r.set_defaults(func=cmd_recover)

    e = sub.add_parser("eval", help="score recovered volumes",
                       description="Write metrics.csv and summary.json; print the summary.")
    e.add_argument("--recon", action="append", required=True, help="directory of recovered volumes (repeatable)")
    e.add_argument("--reference", required=True, help="directory of reference volumes in [0, 1]")
    e.add_argument("--contrasts", help="comma-separated contrasts to score (default: all)")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="pivot tables and SVG plots from metrics.csv",
                        description="Write summary.json, per-metric pivot CSVs and SVG line plots.")
    rp.add_argument("--metrics", required=True, help="metrics.csv")
    rp.add_argument("--out", required=True, help="report directory")
    rp.set_defaults(func=cmd_report)

    x = sub.add_parser("experiment", help="run a full configured experiment",
                       description="Phantom/prepare, masks, train, recover, eval and report, resuming "
                                   "after completed stages.")
    x.add_argument("--config", required=True, help="experiment JSON")
    x.add_argument("--output-dir", dest="output_dir", help="override output_dir from the config")
    x.add_argument("--stop-after", dest="stop_after", help="stop after this stage")
    x.set_defaults(func=cmd_experiment)
    return p


def _set_threads():
    threads = os.environ.get("MCR_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        _set_threads()
        return args.func(args)
    except CalibrationError as exc:
        print(f"mcr: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except NumericalError as exc:
        print(f"mcr: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except MCRError as exc:
        from .experiment import StageError

        print(f"mcr: {exc}", file=sys.stderr)
        return EXIT_STAGE if isinstance(exc, StageError) else EXIT_VALIDATION
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"mcr: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
