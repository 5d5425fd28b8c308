"""Experiment matrix: pretrain -> extract -> MIL cross-validation -> deploy -> report.

Axes follow the three ablations: SSL data fraction and sampling strategy
(pretraining), extraction stage mode, and downstream target. Pretraining
checkpoints are cached by a content hash of (config, dataset, seed) and
guarded by a file lock, so identical cells never retrain.

Run layout::

    <runs>/cache/<key>/            pretraining outputs per cache key
    <runs>/<matrix-hash>/matrix.json
    <runs>/<matrix-hash>/<cell>/   config.cfg, features/, <target>/mil, <target>/deploy
    <runs>/<matrix-hash>/report_{auprc,auroc}.{csv,txt}
"""
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from filelock import FileLock

from .config import format_config, read_kv
from .data.dataset import Dataset
from .encoder import ExtractMode
from .errors import ParseError
from .features import FeatureStore, extract_cohort_features
from .checkpoint import file_hash
from .mil import MilModelConfig, deploy_external, load_bags, make_folds, recompute_from_artifacts, train_mil
from .sampling import Strategy
from .trainer import run_pretraining

log = logging.getLogger(__name__)

RUNS_ENV = "CF_RUNS_DIR"


def runs_root(default="runs"):
    return Path(os.environ.get(RUNS_ENV, default))


@dataclass(frozen=True)
class ExperimentMatrix:
    fractions: tuple = (1.0,)
    strategies: tuple = ("baseline",)
    extract_modes: tuple = ("S4",)
    targets: tuple = ("mutation",)
    seed: int = 0

    def __post_init__(self):
        for name in ("fractions", "strategies", "extract_modes", "targets"):
            if not getattr(self, name):
                raise ValueError(f"matrix axis {name} is empty")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ValueError(f"fraction {f} outside (0, 1]")
        object.__setattr__(self, "strategies", tuple(Strategy.parse(s).value for s in self.strategies))
        object.__setattr__(self, "extract_modes", tuple(ExtractMode.parse(m).value for m in self.extract_modes))

    @property
    def size(self):
        return len(self.fractions) * len(self.strategies) * len(self.extract_modes) * len(self.targets)

    def pretrain_cells(self):
        return [(f, s) for f in self.fractions for s in self.strategies]


def parse_matrix(path):
    values, lines = read_kv(path, _MatrixFields)
    try:
        return ExperimentMatrix(**values)
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


@dataclass(frozen=True)
class _MatrixFields:
    fractions: tuple = (1.0,)
    strategies: tuple = ("baseline",)
    extract_modes: tuple = ("S4",)
    targets: tuple = ("mutation",)
    seed: int = 0


def _digest(obj, n=16):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:n]


def cache_key(config, dataset_hash):
    return _digest({"config": config.as_dict(), "dataset": dataset_hash})


def pretrain_cached(config, dataset, root, dataset_hash):
    """Return (checkpoint path, cache_hit)."""
    key = cache_key(config, dataset_hash)
    cdir = Path(root) / "cache" / key
    cdir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(cdir) + ".lock"):
        ckpt = cdir / "checkpoint_final.ckpt"
        if ckpt.exists():
            return ckpt, True
        (cdir / "config.cfg").write_text(format_config(config), encoding="utf-8")
        run_pretraining(config, dataset, cdir)
        return ckpt, False


def cell_name(fraction, strategy, mode):
    return f"frac{fraction:g}_{strategy}_{mode}"


@dataclass
class CellResult:
    cell: str
    fraction: float
    strategy: str
    mode: str
    target: str
    status: str = "ok"
    cache_hit: bool = False
    metrics: dict = field(default_factory=dict)
    error: str = ""


def run_cell_downstream(store, dataset, target, cell_dir, mil_config):
    """MIL cross-validation + external deployment for one target; returns mean metrics."""
    tdir = Path(cell_dir) / target
    deploy_dir = tdir / "deploy"
    if (deploy_dir / "metrics.csv").exists() and (tdir / "mil" / "val_scores.csv").exists():
        return recompute_from_artifacts(deploy_dir)
    bags = load_bags(store, dataset, target, "internal")
    external = load_bags(store, dataset, target, "external")
    folds = make_folds(bags, mil_config.folds, mil_config.seed)
    _write_folds(tdir / "folds.csv", folds)
    models, _ = train_mil(bags, folds, mil_config, out_dir=tdir / "mil")
    return deploy_external(models, external, out_dir=deploy_dir)["mean"]


def _write_folds(path, folds):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "patient_id", "role"])
        for f in folds:
            w.writerows((f.fold_index, p, "train") for p in f.train_patients)
            w.writerows((f.fold_index, p, "val") for p in f.val_patients)


def run_matrix(matrix, base_config, dataset, root=None, mil_config=None):
    """Run every cell; failed cells are recorded and the rest proceed.

    Returns (matrix run directory, list of CellResult).
    """
    dataset = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    mil_config = mil_config or MilModelConfig(seed=matrix.seed)
    root = Path(root) if root is not None else runs_root()
    dhash = dataset.content_hash()
    mhash = _digest({"matrix": asdict(matrix), "config": base_config.as_dict(),
                     "mil": mil_config.as_dict(), "dataset": dhash}, n=12)
    run_dir = root / mhash
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "matrix.json").write_text(json.dumps(
        {"matrix": asdict(matrix), "config": base_config.as_dict(), "mil": mil_config.as_dict(),
         "dataset_hash": dhash}, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")

    results = []
    for fraction, strategy in matrix.pretrain_cells():
        try:
            cfg = base_config.replace(data_fraction=fraction, strategy=strategy, seed=matrix.seed)
            ckpt, hit = pretrain_cached(cfg, dataset, root, dhash)
        except Exception as exc:  # noqa: BLE001 - partial-failure policy
            log.error("pretraining %s/%s failed: %s", fraction, strategy, exc)
            for mode in matrix.extract_modes:
                for target in matrix.targets:
                    results.append(CellResult(cell_name(fraction, strategy, mode), fraction, strategy,
                                              mode, target, "failed", error=_short(exc)))
            continue
        for mode in matrix.extract_modes:
            cell = cell_name(fraction, strategy, mode)
            cdir = run_dir / cell
            cdir.mkdir(parents=True, exist_ok=True)
            (cdir / "config.cfg").write_text(format_config(cfg), encoding="utf-8")
            (cdir / "checkpoint.txt").write_text(f"{ckpt}\n", encoding="utf-8")
            try:
                store = _store_for(ckpt, mode, dataset, cdir / "features")
            except Exception as exc:  # noqa: BLE001
                results += [CellResult(cell, fraction, strategy, mode, t, "failed", hit, error=_short(exc))
                            for t in matrix.targets]
                continue
            for target in matrix.targets:
                res = CellResult(cell, fraction, strategy, mode, target, cache_hit=hit)
                try:
                    res.metrics = run_cell_downstream(store, dataset, target, cdir, mil_config)
                except Exception as exc:  # noqa: BLE001
                    res.status, res.error = "failed", _short(exc)
                    log.error("cell %s/%s failed: %s", cell, target, exc)
                results.append(res)
    write_status(run_dir, results)
    for metric in ("auprc", "auroc"):
        write_report(run_dir, metric)
    return run_dir, results


def _short(exc):
    return f"{type(exc).__name__}: {exc}".splitlines()[0]


def _store_for(ckpt, mode, dataset, store_dir):
    meta = Path(store_dir) / "store.json"
    if meta.exists():
        store = FeatureStore(store_dir)
        if store.meta.get("checkpoint_hash") == file_hash(ckpt) and store.mode == mode:
            return store
    return FeatureStore(extract_cohort_features(ckpt, mode, dataset, store_dir))


def write_status(run_dir, results):
    with open(Path(run_dir) / "status.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "target", "status", "cache_hit", "error"])
        for r in results:
            w.writerow([r.cell, r.target, r.status, int(r.cache_hit), r.error])


def collect(run_dir, metric):
    """{cell: {target: mean metric}} recomputed from persisted score matrices."""
    table = {}
    for cdir in sorted(p for p in Path(run_dir).iterdir() if p.is_dir()):
        for deploy in sorted(cdir.glob("*/deploy")):
            if (deploy / "scores.csv").exists():
                table.setdefault(cdir.name, {})[deploy.parent.name] = \
                    recompute_from_artifacts(deploy)[metric]
    return table


def write_report(run_dir, metric="auprc", out_dir=None):
    """Rows = encoder variants, columns = targets + AVG; CSV plus aligned text."""
    table = collect(run_dir, metric)
    targets = sorted({t for row in table.values() for t in row})
    out = Path(out_dir or run_dir)
    rows = []
    for cell in sorted(table):
        vals = [table[cell].get(t) for t in targets]
        present = [v for v in vals if v is not None]
        avg = sum(present) / len(present) if present else None
        rows.append([cell, *vals, avg])
    header = ["MODEL", *[t.upper() for t in targets], "AVG"]
    with open(out / f"report_{metric}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], *("" if v is None else repr(v) for v in r[1:])])
    text = format_table(header, rows)
    (out / f"report_{metric}.txt").write_text(text, encoding="utf-8")
    return text


def format_table(header, rows):
    cells = [header] + [[r[0], *("-" if v is None else f"{v:.3f}" for v in r[1:])] for r in rows]
    widths = [max(len(str(c[i])) for c in cells) for i in range(len(header))]
    lines = []
    for n, c in enumerate(cells):
        lines.append(" | ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w)
                                for i, (v, w) in enumerate(zip(c, widths))))
        if n == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
