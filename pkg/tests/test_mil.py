import json

import numpy as np
import pytest
import torch

from cfpath.checkpoint import file_hash
from cfpath.errors import DimensionMismatch, EmptyResult, InsufficientClassCount, ModeMismatch
from cfpath.features import FeatureStore, extract_cohort_features, read_features, write_features
from cfpath.mil import (Bag, MILTransformer, MilModelConfig, deploy_external, load_bags, load_models,
                        make_folds, predict, recompute_from_artifacts, train_fold, train_mil)
from cfpath.metrics import auroc

FAST = MilModelConfig(token_dim=32, epochs=3, patience=2)


def bags_for(labels, dim=8, n=6, seed=0, per_patient=1):
    rng = np.random.default_rng(seed)
    out = []
    for i, y in enumerate(labels):
        f = rng.normal(size=(n, dim)).astype(np.float32) + 1.5 * y
        out.append(Bag(f"S{i:03d}", f"P{i // per_patient:03d}", f, int(y)))
    return out


def check_partition(folds, bags):
    patients = {b.patient_id for b in bags}
    vals = [set(f.val_patients) for f in folds]
    assert set().union(*vals) == patients
    assert sum(len(v) for v in vals) == len(patients)
    for f in folds:
        assert not set(f.train_patients) & set(f.val_patients)
        assert set(f.train_patients) | set(f.val_patients) == patients


def test_folds_ten_patients():
    bags = bags_for([0] * 5 + [1] * 5)
    folds = make_folds(bags, 5, seed=1)
    check_partition(folds, bags)
    label = {b.patient_id: b.label for b in bags}
    for f in folds:
        assert sorted(label[p] for p in f.val_patients) == [0, 1]


@pytest.mark.parametrize("seed", range(5))
def test_folds_23_patients(seed):
    bags = bags_for([0] * 14 + [1] * 9)
    folds = make_folds(bags, 5, seed=seed)
    check_partition(folds, bags)
    sizes = [len(f.val_patients) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_folds_group_patients():
    bags = bags_for([0] * 12 + [1] * 12, per_patient=2)
    folds = make_folds(bags, 5, seed=0)
    check_partition(folds, bags)
    for f in folds:
        train_slides = {b.slide_id for b in bags if b.patient_id in f.train_patients}
        val_slides = {b.slide_id for b in bags if b.patient_id in f.val_patients}
        assert not train_slides & val_slides


def test_folds_insufficient():
    with pytest.raises(InsufficientClassCount):
        make_folds(bags_for([0] * 8 + [1] * 3), 5)
    with pytest.raises(InsufficientClassCount):
        make_folds(bags_for([0, 1, 0]), 5)


def test_permutation_invariance():
    torch.manual_seed(0)
    model = MILTransformer(16, 2, MilModelConfig()).eval()
    x = torch.randn(1, 40, 16)
    perm = torch.randperm(40)
    with torch.no_grad():
        a = torch.softmax(model(x), 1)
        b = torch.softmax(model(x[:, perm]), 1)
    assert (a - b).abs().max() < 1e-5


def test_single_bag_fold_trains():
    bags = bags_for([1])
    model = train_fold(bags, [], 2, FAST, 0)
    assert predict(model, bags).shape == (1, 2)


def test_train_mil_learns_separable(tmp_path):
    bags = bags_for([0] * 10 + [1] * 10, seed=2)
    folds = make_folds(bags, 5)
    models, metrics = train_mil(bags, folds, MilModelConfig(token_dim=32, epochs=8), tmp_path)
    assert len(models) == 5 and len(metrics) == 5
    assert sorted(p.name for p in tmp_path.glob("fold_*.ckpt")) == [f"fold_{k}.ckpt" for k in range(5)]
    test = bags_for([0] * 10 + [1] * 10, seed=9)
    result = deploy_external(load_models(tmp_path), test)
    assert result["mean"]["auroc"] > 0.9


def test_deploy_identical_models(tmp_path):
    bags = bags_for([0] * 6 + [1] * 6)
    torch.manual_seed(1)
    model = MILTransformer(8, 2, FAST).eval()
    single = deploy_external([model], bags)["mean"]
    five = deploy_external([model] * 5, bags, tmp_path)
    assert five["mean"] == pytest.approx(single, abs=1e-12)
    assert all(pm == five["per_model"][0] for pm in five["per_model"])
    header = (tmp_path / "scores.csv").read_text().splitlines()[0]
    assert header == "slide_id,fold,score_class_0,score_class_1"


def test_deploy_errors():
    torch.manual_seed(1)
    model = MILTransformer(8, 2, FAST)
    with pytest.raises(EmptyResult):
        deploy_external([model], [])
    with pytest.raises(DimensionMismatch):
        deploy_external([model], bags_for([0, 1], dim=9))


def test_mean_of_metrics_recomputed(tmp_path):
    bags = bags_for([0] * 8 + [1] * 8, seed=4)
    models = []
    for s in range(5):
        torch.manual_seed(s)
        models.append(MILTransformer(8, 2, FAST).eval())
    test = bags_for([0] * 7 + [1] * 5, seed=5)
    result = deploy_external(models, test, tmp_path)
    labels = [b.label for b in test]
    by_hand = np.mean([auroc(result["scores"][f][:, 1], labels) for f in range(5)])
    assert result["mean"]["auroc"] == pytest.approx(by_hand, abs=1e-12)
    again = recompute_from_artifacts(tmp_path)
    for k in ("auroc", "auprc"):
        assert again[k] == pytest.approx(result["mean"][k], abs=1e-9)


def test_feature_file_roundtrip(tmp_path):
    f = np.random.default_rng(0).normal(size=(5, 12)).astype(np.float32)
    write_features(tmp_path / "a.feat", "slide-a", "S4", f, "ab" * 32)
    back = read_features(tmp_path / "a.feat")
    assert back.slide_id == "slide-a" and back.mode == "S4" and back.checkpoint_hash == "ab" * 32
    assert np.array_equal(back.features, f)
    assert (tmp_path / "a.feat").read_bytes()[:8] == b"CFPFEAT\0"


def test_extract_features_contracts(tiny_dataset, tiny_checkpoint, tmp_path):
    before = file_hash(tiny_checkpoint)
    s4 = FeatureStore(extract_cohort_features(tiny_checkpoint, "S4", tiny_dataset, tmp_path / "s4"))
    again = extract_cohort_features(tiny_checkpoint, "S4", tiny_dataset, tmp_path / "s4b")
    last2 = FeatureStore(extract_cohort_features(tiny_checkpoint, "Last2", tiny_dataset, tmp_path / "l2"))
    assert last2.dim == 2 * s4.dim
    for sid in s4.slide_ids():
        assert (tmp_path / "s4" / f"{sid}.feat").read_bytes() == (again / f"{sid}.feat").read_bytes()
    assert len(s4.slide_ids()) == 22
    s4.check_consistent()
    bags = load_bags(s4, tiny_dataset, "mutation", "internal")
    assert len(bags) == 12 and bags[0].features.shape == (30, s4.dim)
    train_mil(bags, make_folds(bags, 3), MilModelConfig(token_dim=16, epochs=1, folds=3))
    assert file_hash(tiny_checkpoint) == before


def test_extract_skips_empty_slides(tiny_dataset, tiny_checkpoint, tmp_path):
    import shutil
    from cfpath.data.dataset import Dataset
    from cfpath.data.tessellate import read_manifest, write_manifest
    root = tmp_path / "ds"
    shutil.copytree(tiny_dataset.root, root)
    sid = "INT-003"
    m = read_manifest(root / "manifests" / f"{sid}.tsv")
    m.accepted = [False] * len(m.accepted)
    write_manifest(m, root / "manifests" / f"{sid}.tsv")
    out = extract_cohort_features(tiny_checkpoint, "S4", Dataset(root), tmp_path / "f", cohorts=("internal",))
    meta = json.loads((out / "store.json").read_text())
    assert meta["skipped"] == [sid] and sid not in meta["slides"]
    assert not (out / f"{sid}.feat").exists()


def test_store_mode_mismatch(tiny_dataset, tiny_checkpoint, tmp_path):
    store = extract_cohort_features(tiny_checkpoint, "S4", tiny_dataset, tmp_path, cohorts=("external",))
    write_features(store / "EXT-000.feat", "EXT-000", "Last2", np.zeros((3, 192), np.float32), "00" * 32)
    with pytest.raises(ModeMismatch):
        FeatureStore(store).check_consistent()
