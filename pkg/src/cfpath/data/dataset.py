"""On-disk dataset access: slide table, labels, manifests and patch pixels.

Layout::

    DIR/slides.tsv            slide_id, patient_id, cohort, mpp, file
    DIR/labels.tsv            slide_id, patient_id, cohort, target, label
    DIR/slides/<id>.png       full slide images
    DIR/manifests/<id>.tsv    tessellation manifest per slide
    DIR/patches/<id>/X_Y.png  accepted patches
"""
import csv
import hashlib
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ..errors import DataError, EmptyResult
from .tessellate import read_image, read_manifest

ALLOWED_FRACTIONS = (1.0, 0.5, 0.25, 0.1)


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    cohort: str
    mpp: float
    file: str


def _read_tsv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh, delimiter="\t"))
    except FileNotFoundError as exc:
        raise DataError(f"missing {path}") from exc


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "slides.tsv").exists():
            raise DataError(f"{self.root} has no slides.tsv")

    @cached_property
    def slides(self):
        rows = _read_tsv(self.root / "slides.tsv")
        return {r["slide_id"]: SlideRecord(r["slide_id"], r["patient_id"], r["cohort"],
                                           float(r["mpp"]), r["file"]) for r in rows}

    @cached_property
    def labels(self):
        """target -> {slide_id: label}"""
        out = {}
        path = self.root / "labels.tsv"
        if not path.exists():
            return out
        for r in _read_tsv(path):
            out.setdefault(r["target"], {})[r["slide_id"]] = int(r["label"])
        return out

    def slide_ids(self, cohort=None):
        return sorted(s for s, rec in self.slides.items() if cohort is None or rec.cohort == cohort)

    def manifest(self, slide_id):
        rec = self.slides[slide_id]
        return read_manifest(self.root / "manifests" / f"{slide_id}.tsv", rec.mpp,
                             str(self.root / rec.file))

    def manifests(self, cohort=None):
        return [self.manifest(s) for s in self.slide_ids(cohort)]

    def patch_paths(self, manifest):
        base = self.root / "patches" / manifest.slide_id
        return [base / manifest.patch_name(p) for p in manifest.accepted_patches]

    def load_patches(self, manifest):
        """uint8 (n, H, W, 3) of the accepted patches, manifest order."""
        paths = self.patch_paths(manifest)
        if not paths:
            return np.zeros((0, 0, 0, 3), dtype=np.uint8)
        return np.stack([read_image(p) for p in paths])

    def content_hash(self):
        """sha256 over label tables, manifests and patch bytes."""
        h = hashlib.sha256()
        for name in ("slides.tsv", "labels.tsv"):
            p = self.root / name
            if p.exists():
                h.update(name.encode())
                h.update(p.read_bytes())
        for slide_id in self.slide_ids():
            mpath = self.root / "manifests" / f"{slide_id}.tsv"
            if not mpath.exists():
                continue
            h.update(mpath.read_bytes())
            for p in self.patch_paths(self.manifest(slide_id)):
                h.update(p.read_bytes())
        return h.hexdigest()


def subsample_fraction(manifests, fraction, seed):
    """Slide-level sample of ceil(fraction * n) manifests.

    One seeded permutation is truncated per fraction, so smaller fractions
    are always subsets of larger ones. Order follows the input.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    manifests = list(manifests)
    if not manifests:
        raise EmptyResult("no slides to subsample")
    if fraction == 1.0:
        return manifests
    ids = sorted(m.slide_id for m in manifests)
    order = np.random.default_rng(seed).permutation(len(ids))
    keep = {ids[i] for i in order[:math.ceil(fraction * len(ids))]}
    out = [m for m in manifests if m.slide_id in keep]
    if not out:
        raise EmptyResult(f"fraction {fraction} selects no slides")
    return out
