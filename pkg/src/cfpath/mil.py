"""Weakly supervised bag classification on frozen patch features.

A small transformer aggregator (learnable class token, no positional
encoding) is trained per cross-validation fold on the internal cohort and
the fold models are deployed on the external cohort.
"""
import csv
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, DimensionMismatch, EmptyResult, InsufficientClassCount
from .features import FeatureStore
from .metrics import auprc, auroc

log = logging.getLogger(__name__)


@dataclass
class Bag:
    slide_id: str
    patient_id: str
    features: np.ndarray
    label: int
    cohort: str = "internal"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError(f"bag {self.slide_id} needs an (n >= 1, D) feature matrix")


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_patients: tuple
    val_patients: tuple


@dataclass(frozen=True)
class MilModelConfig:
    layers: int = 2
    heads: int = 8
    token_dim: int = 128
    mlp_ratio: float = 2.0
    dropout: float = 0.0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 20
    patience: int = 5
    bag_cap: int = 512
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class MILTransformer(nn.Module):
    def __init__(self, in_dim, num_classes, config=None):
        super().__init__()
        cfg = config or MilModelConfig()
        self.in_dim = in_dim
        self.embed = nn.Sequential(nn.Linear(in_dim, cfg.token_dim), nn.ReLU())
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.token_dim))
        layer = nn.TransformerEncoderLayer(
            cfg.token_dim, cfg.heads, dim_feedforward=int(cfg.token_dim * cfg.mlp_ratio),
            dropout=cfg.dropout, activation="gelu", batch_first=True, norm_first=True)
        self.transformer = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.head = nn.Sequential(nn.LayerNorm(cfg.token_dim), nn.Linear(cfg.token_dim, num_classes))
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, bags):
        """(B, n, D) patch features -> (B, classes) logits."""
        x = self.embed(bags)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        return self.head(self.transformer(x)[:, 0])


def load_bags(store, dataset, target, cohort):
    """Bags for every slide of ``cohort`` that has features and a ``target`` label."""
    store = store if isinstance(store, FeatureStore) else FeatureStore(store)
    labels = dataset.labels.get(target)
    if labels is None:
        raise DataError(f"unknown target {target!r} (have {sorted(dataset.labels)})")
    have = set(store.slide_ids())
    bags = []
    for sid in dataset.slide_ids(cohort):
        if sid in have and sid in labels:
            rec = dataset.slides[sid]
            bags.append(Bag(sid, rec.patient_id, store.load(sid), labels[sid], cohort))
    return bags


def patient_labels(bags):
    out = {}
    for b in bags:
        if out.setdefault(b.patient_id, b.label) != b.label:
            raise ValueError(f"patient {b.patient_id} has slides with different labels")
    return out


def make_folds(bags, k=5, seed=0):
    """Patient-level, label-stratified k-fold partition.

    Patients are shuffled within each label and dealt round-robin, with
    the deal continuing across labels so fold sizes differ by at most one.
    """
    labels = patient_labels(bags)
    if len(labels) < k:
        raise InsufficientClassCount(f"{len(labels)} patients cannot fill {k} folds")
    by_class = {}
    for pid in sorted(labels):
        by_class.setdefault(labels[pid], []).append(pid)
    for cls, pids in by_class.items():
        if len(pids) < k:
            raise InsufficientClassCount(f"class {cls} has {len(pids)} patients, need >= {k}")
    rng = np.random.default_rng(seed)
    assign = [[] for _ in range(k)]
    slot = 0
    for cls in sorted(by_class):
        pids = by_class[cls]
        for i in rng.permutation(len(pids)):
            assign[slot % k].append(pids[i])
            slot += 1
    everyone = set(labels)
    return [FoldSplit(f, tuple(sorted(everyone - set(v))), tuple(sorted(v))) for f, v in enumerate(assign)]


def _class_weights(bags, num_classes):
    counts = np.bincount([b.label for b in bags], minlength=num_classes).astype(np.float64)
    weights = np.where(counts > 0, counts.sum() / (num_classes * np.maximum(counts, 1)), 0.0)
    return torch.as_tensor(weights, dtype=torch.float32)


def _cap(features, cap, rng):
    if len(features) <= cap:
        return features
    return features[np.sort(rng.choice(len(features), cap, replace=False))]


@torch.no_grad()
def predict(model, bags):
    """Softmax class scores, (len(bags), classes)."""
    model.eval()
    out = [F.softmax(model(torch.from_numpy(b.features)[None]), dim=1)[0].numpy() for b in bags]
    return np.asarray(out, dtype=np.float64)


def _val_loss(model, bags, weights):
    if not bags:
        return float("nan")
    model.eval()
    with torch.no_grad():
        logits = torch.cat([model(torch.from_numpy(b.features)[None]) for b in bags])
        target = torch.as_tensor([b.label for b in bags])
        return float(F.cross_entropy(logits, target, weight=weights))


def train_fold(train_bags, val_bags, num_classes, config, fold_seed):
    """Train one aggregator with early stopping on validation loss; keep the best weights."""
    torch.manual_seed(fold_seed)
    rng = np.random.default_rng(fold_seed)
    dim = train_bags[0].features.shape[1]
    model = MILTransformer(dim, num_classes, config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    weights = _class_weights(train_bags, num_classes)
    best, best_state, stale = float("inf"), None, 0
    for _ in range(config.epochs):
        model.train()
        for i in rng.permutation(len(train_bags)):
            bag = train_bags[i]
            x = torch.from_numpy(_cap(bag.features, config.bag_cap, rng))[None]
            loss = F.cross_entropy(model(x), torch.as_tensor([bag.label]), weight=weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        vl = _val_loss(model, val_bags, weights)
        if np.isnan(vl) or vl < best:
            best, stale = vl, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


def positive_scores(scores):
    return scores[:, 1] if scores.shape[1] == 2 else scores


def score_metrics(scores, labels):
    """{'auroc', 'auprc'}; multi-class targets use the one-vs-rest macro mean."""
    labels = np.asarray(labels)
    if scores.shape[1] == 2:
        s = scores[:, 1]
        return {"auroc": auroc(s, labels == 1), "auprc": auprc(s, labels == 1)}
    per = [(auroc(scores[:, c], labels == c), auprc(scores[:, c], labels == c))
           for c in range(scores.shape[1]) if 0 < (labels == c).sum() < len(labels)]
    return {"auroc": float(np.mean([p[0] for p in per])), "auprc": float(np.mean([p[1] for p in per]))}


def train_mil(bags, folds, config=None, out_dir=None, num_classes=None, shuffle_labels=False):
    """Train one model per fold; return (models, per-fold validation metrics).

    With ``shuffle_labels`` the patient labels are permuted first (a
    chance-level control). Models and validation scores are persisted
    when ``out_dir`` is given.
    """
    config = config or MilModelConfig()
    if not bags:
        raise EmptyResult("no bags to train on")
    dims = {b.features.shape[1] for b in bags}
    if len(dims) != 1:
        raise DimensionMismatch(f"bags have mixed feature widths {sorted(dims)}")
    num_classes = num_classes or max(2, max(b.label for b in bags) + 1)
    if shuffle_labels:
        plabels = patient_labels(bags)
        pids = sorted(plabels)
        perm = np.random.default_rng([config.seed, 31337]).permutation(len(pids))
        remap = {pid: plabels[pids[j]] for pid, j in zip(pids, perm)}
        bags = [Bag(b.slide_id, b.patient_id, b.features, remap[b.patient_id], b.cohort) for b in bags]
    models, val_rows, fold_metrics = [], [], []
    for fold in folds:
        train_set = set(fold.train_patients)
        val_set = set(fold.val_patients)
        train_bags = [b for b in bags if b.patient_id in train_set]
        val_bags = [b for b in bags if b.patient_id in val_set]
        model = train_fold(train_bags, val_bags, num_classes, config, config.seed * 100 + fold.fold_index)
        models.append(model)
        if val_bags:
            scores = predict(model, val_bags)
            labels = [b.label for b in val_bags]
            try:
                fold_metrics.append(score_metrics(scores, labels))
            except ValueError:
                fold_metrics.append({"auroc": float("nan"), "auprc": float("nan")})
            val_rows += [(b.slide_id, fold.fold_index, b.label, *s) for b, s in zip(val_bags, scores)]
        else:
            fold_metrics.append({"auroc": float("nan"), "auprc": float("nan")})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for fold, model in zip(folds, models):
            save_mil_model(out / f"fold_{fold.fold_index}.ckpt", model, config, num_classes)
        _write_scores(out / "val_scores.csv", val_rows, num_classes, with_label=True)
    return models, fold_metrics


def save_mil_model(path, model, config, num_classes):
    save_checkpoint(path, model.state_dict(), config.as_dict(),
                    {"in_dim": model.in_dim, "num_classes": num_classes})


def load_mil_model(path):
    tensors, cfg, meta = load_checkpoint(path)
    config = MilModelConfig(**cfg)
    model = MILTransformer(meta["in_dim"], meta["num_classes"], config)
    model.load_state_dict(tensors)
    model.eval()
    return model


def load_models(models_dir):
    paths = sorted(Path(models_dir).glob("fold_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise EmptyResult(f"no fold models in {models_dir}")
    return [load_mil_model(p) for p in paths]


def _write_scores(path, rows, num_classes, with_label=False):
    header = ["slide_id", "fold"] + (["label"] if with_label else [])
    header += [f"score_class_{k}" for k in range(num_classes)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([*r[:len(header) - num_classes], *(repr(float(v)) for v in r[len(header) - num_classes:])])


def read_score_matrix(path):
    """Return {fold: (slide_ids, scores array)} from a score CSV."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in reader.fieldnames if c.startswith("score_class_")]
        for r in reader:
            ids, rows = out.setdefault(int(r["fold"]), ([], []))
            ids.append(r["slide_id"])
            rows.append([float(r[c]) for c in cols])
    return {f: (ids, np.asarray(rows)) for f, (ids, rows) in out.items()}


def deploy_external(models, bags, out_dir=None):
    """Score external bags with every fold model.

    Returns {'per_model': [metrics...], 'mean': {metric: mean over models},
    'scores': (n_models, n_bags, classes)}. The reported number is the
    mean of the per-model metrics.
    """
    if not bags:
        raise EmptyResult("external cohort is empty")
    width = bags[0].features.shape[1]
    for m in models:
        if m.in_dim != width or any(b.features.shape[1] != width for b in bags):
            raise DimensionMismatch(f"model expects width {m.in_dim}, bags have {width}")
    labels = [b.label for b in bags]
    scores = np.stack([predict(m, bags) for m in models])
    per_model = [score_metrics(s, labels) for s in scores]
    mean = {k: float(np.mean([pm[k] for pm in per_model])) for k in per_model[0]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [(b.slide_id, f, *scores[f, i]) for f in range(len(models)) for i, b in enumerate(bags)]
        _write_scores(out / "scores.csv", rows, scores.shape[2])
        with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slide_id", "label"])
            w.writerows((b.slide_id, b.label) for b in bags)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "auroc", "auprc"])
            for f, pm in enumerate(per_model):
                w.writerow([f, repr(pm["auroc"]), repr(pm["auprc"])])
            w.writerow(["mean", repr(mean["auroc"]), repr(mean["auprc"])])
    return {"per_model": per_model, "mean": mean, "scores": scores}


def recompute_from_artifacts(deploy_dir):
    """Mean metrics recomputed from a persisted ``scores.csv`` + ``labels.csv``."""
    deploy_dir = Path(deploy_dir)
    with open(deploy_dir / "labels.csv", newline="", encoding="utf-8") as fh:
        labels = {r["slide_id"]: int(r["label"]) for r in csv.DictReader(fh)}
    per = []
    for fold, (ids, scores) in sorted(read_score_matrix(deploy_dir / "scores.csv").items()):
        per.append(score_metrics(scores, [labels[i] for i in ids]))
    return {k: float(np.mean([p[k] for p in per])) for k in per[0]}
