"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 partial matrix failure, 4 data error.
"""
import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

from .config import TrainConfig, format_config, parse_config
from .errors import (DataError, DimensionMismatch, EmptyResult, InsufficientClassCount, ModeMismatch,
                     NoPositives, ParseError, SingleClass, UnknownMpp)

log = logging.getLogger("cfpath")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_DATA = 0, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


def cmd_synth(args):
    from .data.synthetic import SyntheticDatasetSpec, fisher_separation, generate_synthetic

    spec = parse_config(args.spec, SyntheticDatasetSpec) if args.spec else SyntheticDatasetSpec()
    manifests = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifests)} slides to {args.out} "
          f"(Fisher separation {fisher_separation(spec):.1f})")


def _source_mpp(path, table, default):
    if path.stem in table:
        return table[path.stem]
    sidecar = path.with_suffix(".mpp")
    if sidecar.exists():
        return float(sidecar.read_text().strip())
    if default is None:
        raise UnknownMpp(f"no microns-per-pixel known for {path.name} "
                         "(add slides.tsv, a .mpp sidecar or --source-mpp)")
    return default


def cmd_preprocess(args):
    from .data.tessellate import preprocess_slide

    src, out = Path(args.input), Path(args.out)
    table, meta = {}, {}
    if (src / "slides.tsv").exists():
        with open(src / "slides.tsv", newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh, delimiter="\t"):
                sid = Path(r["file"]).stem if r.get("file") else r["slide_id"]
                table[sid] = float(r["mpp"])
                meta[sid] = r
    images = sorted(p for p in src.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DataError(f"no slide images under {src}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in images:
        mpp = _source_mpp(path, table, args.source_mpp)
        m = preprocess_slide(path, out, mpp, target_mpp=args.mpp, patch_size=args.patch)
        r = meta.get(path.stem, {})
        rows.append((m.slide_id, r.get("patient_id", m.slide_id), r.get("cohort", "internal"),
                     str(mpp), str(path.resolve())))
        print(f"{m.slide_id}: {sum(m.accepted)}/{len(m.accepted)} patches accepted")
    with open(out / "slides.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("slide_id", "patient_id", "cohort", "mpp", "file"))
        w.writerows(rows)
    if (src / "labels.tsv").exists() and src.resolve() != out.resolve():
        shutil.copyfile(src / "labels.tsv", out / "labels.tsv")


def load_train_config(args):
    cfg = parse_config(args.config) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "fraction", None) is not None:
        changes["data_fraction"] = args.fraction
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except ValueError as exc:
            raise ParseError(str(exc), path=args.config) from None
    return cfg


def cmd_pretrain(args):
    from .trainer import run_pretraining

    cfg = load_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(cfg), encoding="utf-8")
    ckpt, curve = run_pretraining(cfg, args.data, out, resume=args.resume)
    print(f"checkpoint: {ckpt}\nloss curve: {curve}")


def cmd_extract(args):
    from .features import extract_cohort_features

    store = extract_cohort_features(args.checkpoint, args.mode, args.data, args.out)
    print(f"feature store: {store}")


def _mil_config(args):
    from .mil import MilModelConfig

    cfg = parse_config(args.mil_config, MilModelConfig) if args.mil_config else MilModelConfig()
    if getattr(args, "folds", None):
        from dataclasses import replace
        cfg = replace(cfg, folds=args.folds)
    return cfg


def cmd_train_mil(args):
    from .data.dataset import Dataset
    from .features import FeatureStore
    from .mil import load_bags, make_folds, train_mil
    from .matrix import _write_folds

    cfg = _mil_config(args)
    ds = Dataset(args.data)
    store = FeatureStore(args.features)
    store.check_consistent()
    bags = load_bags(store, ds, args.target, "internal")
    folds = make_folds(bags, cfg.folds, cfg.seed)
    out = Path(args.out)
    _write_folds(out / "folds.csv", folds)
    _, metrics = train_mil(bags, folds, cfg, out_dir=out, shuffle_labels=args.shuffle_labels)
    for i, m in enumerate(metrics):
        print(f"fold {i}: val AUROC {m['auroc']:.3f} AUPRC {m['auprc']:.3f}")


def cmd_deploy(args):
    from .data.dataset import Dataset
    from .features import FeatureStore
    from .mil import deploy_external, load_bags, load_models

    store = FeatureStore(args.cohort)
    bags = load_bags(store, Dataset(args.data), args.target, "external")
    res = deploy_external(load_models(args.models), bags, out_dir=args.out)
    print(f"external mean AUROC {res['mean']['auroc']:.4f} AUPRC {res['mean']['auprc']:.4f}")


def cmd_report(args):
    from .matrix import write_report

    for metric in args.metric:
        print(f"{metric.upper()}\n" + write_report(args.runs, metric, args.out))


def cmd_matrix(args):
    from .matrix import parse_matrix, run_matrix, runs_root

    matrix = parse_matrix(args.matrix)
    cfg = load_train_config(args)
    root = Path(args.runs) if args.runs else runs_root()
    run_dir, results = run_matrix(matrix, cfg, args.data, root, _mil_config(args))
    failed = [r for r in results if r.status != "ok"]
    print(f"matrix run: {run_dir} ({len(results) - len(failed)}/{len(results)} cells ok)")
    print((run_dir / "report_auprc.txt").read_text(encoding="utf-8"))
    return EXIT_PARTIAL if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cfpath", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic texture-slide dataset")
    s.add_argument("--spec", help="synthetic dataset spec (key = value)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resize, tessellate and reject background")
    s.add_argument("--input", required=True)
    s.add_argument("--mpp", type=float, default=0.5, help="target microns per pixel")
    s.add_argument("--patch", type=int, default=224)
    s.add_argument("--source-mpp", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("pretrain", help="momentum-contrast pretraining")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fraction", type=float)
    s.add_argument("--strategy", choices=["baseline", "srcl", "nsam", "dynamic"])
    s.add_argument("--resume")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("extract-features", help="frozen-encoder feature extraction")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", default="S4", choices=["S1", "S2", "S3", "S4", "AllStages", "Last2"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-mil", help="k-fold MIL training on the internal cohort")
    s.add_argument("--features", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--mil-config")
    s.add_argument("--shuffle-labels", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_mil)

    s = sub.add_parser("deploy", help="score the external cohort with the fold models")
    s.add_argument("--models", required=True)
    s.add_argument("--cohort", required=True, help="feature store of the external cohort")
    s.add_argument("--data", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deploy)

    s = sub.add_parser("report", help="render the metric table of a matrix run")
    s.add_argument("--runs", required=True, help="matrix run directory")
    s.add_argument("--metric", nargs="+", default=["auprc", "auroc"], choices=["auprc", "auroc"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("matrix", help="run the full ablation matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--config")
    s.add_argument("--mil-config")
    s.add_argument("--data", required=True)
    s.add_argument("--runs", help="run root (default $CF_RUNS_DIR or ./runs)")
    s.set_defaults(func=cmd_matrix)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except ParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, UnknownMpp, EmptyResult, ModeMismatch, DimensionMismatch, InsufficientClassCount,
            SingleClass, NoPositives, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
