"""Class-conditional texture "slides" standing in for H&E whole-slide images.

Each slide is a grid of texture tiles plus blank background tiles. Slide
labels control which texture classes appear:

* ``mutation``: a label-``c`` slide (``c > 0``) draws ``signal_fraction`` of
  its tissue tiles from texture class ``c``, the rest from class 0.
* ``tumor``: positive slides carry ``tumor_fraction`` spotted tumor tiles.

An internal cohort (cross-validation) and an external cohort (deployment,
with a small stain shift) are written side by side.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import DataError
from .tessellate import preprocess_slide, write_image

log = logging.getLogger(__name__)

# (light, dark) RGB pairs per texture class; index -1 is the tumor texture
PALETTES = [
    ((0.93, 0.66, 0.78), (0.78, 0.42, 0.62)),
    ((0.62, 0.42, 0.76), (0.36, 0.20, 0.56)),
    ((0.80, 0.60, 0.50), (0.55, 0.30, 0.25)),
    ((0.70, 0.75, 0.85), (0.35, 0.40, 0.60)),
]
TUMOR_PALETTE = ((0.90, 0.70, 0.80), (0.28, 0.12, 0.42))
FREQ_BANDS = [(2.0, 4.0), (6.0, 10.0), (4.0, 6.0), (10.0, 14.0)]
# per class: (count range, radius range in px, elongation)
NUCLEI = [((7, 12), (2.0, 3.0), 2.5), ((12, 18), (2.5, 4.0), 1.0),
          ((6, 10), (3.0, 4.5), 1.5), ((18, 26), (1.5, 2.5), 1.0)]
NUCLEUS_COLOR = (0.30, 0.16, 0.45)
BACKGROUND = 242.0


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_slides: int = 40
    external_slides: int = 20
    classes: int = 2
    patches_per_slide: int = 200
    patch_size: int = 64
    background_fraction: float = 0.2
    signal_fraction: float = 0.5
    balance: float = 0.5
    tumor_rate: float = 0.4
    tumor_fraction: float = 0.15
    noise: float = 0.02
    external_shift: float = 0.03
    slides_per_patient: int = 1
    mpp: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= len(PALETTES):
            raise ValueError(f"classes must be in 2..{len(PALETTES)}")
        if self.num_slides < 1 or self.patches_per_slide < 1:
            raise ValueError("need at least one slide and one patch per slide")
        if not 0 <= self.background_fraction < 1:
            raise ValueError("background_fraction must be in [0, 1)")


def _nuclei(rng, size, count, radius, elong=1.0):
    """Soft-edged mask in [0, 1] of ``count`` elliptical nuclei."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size))
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(*radius)
        a = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(a) + dy * np.sin(a)) / (r * elong)
        v = (-dx * np.sin(a) + dy * np.cos(a)) / r
        mask = np.maximum(mask, np.clip(3.0 * (1.0 - np.hypot(u, v)), 0, 1))
    return mask


def texture(rng, cls, size, noise):
    """One tissue tile of texture class ``cls``: float (size, size, 3) in [0, 1].

    Oriented sinusoid fibres in the class frequency band, with nuclei whose
    density and shape also depend on the class.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    lo, hi = FREQ_BANDS[cls]
    field = np.zeros((size, size))
    for _ in range(3):
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(lo, hi)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    t = (field / 3.0 + 1.0) / 2.0
    light, dark = (np.asarray(c) for c in PALETTES[cls])
    img = light * (1 - t[..., None]) + dark * t[..., None]
    count, radius, elong = NUCLEI[cls]
    nuc = _nuclei(rng, size, int(rng.integers(*count)), radius, elong)[..., None]
    img = img * (1 - nuc) + np.asarray(NUCLEUS_COLOR) * nuc
    return np.clip(img + rng.normal(0, noise, img.shape), 0, 1)


def tumor_texture(rng, size, noise):
    """Pale background packed with large dark round nuclei."""
    light, dark = (np.asarray(c) for c in TUMOR_PALETTE)
    nuc = _nuclei(rng, size, int(rng.integers(14, 22)), (size / 16, size / 9))[..., None]
    img = light * (1 - nuc) + dark * nuc
    return np.clip(img + rng.normal(0, noise, img.shape), 0, 1)


def background(rng, size):
    return np.clip(BACKGROUND + rng.normal(0, 1.5, (size, size, 3)), 0, 255) / 255.0


def _assign(rng, n, k, balance):
    if k == 2:
        pos = int(round(balance * n))
        labels = np.array([1] * pos + [0] * (n - pos))
    else:
        labels = np.arange(n) % k
    return rng.permutation(labels)


def slide_plan(spec, cohort, n):
    """Labels per slide for one cohort: dict target -> int array."""
    rng = np.random.default_rng([spec.seed, 0 if cohort == "internal" else 1, 999])
    mutation = _assign(rng, n, spec.classes, spec.balance)
    tumor = _assign(rng, n, 2, spec.tumor_rate)
    return {"mutation": mutation, "tumor": tumor}


def render_slide(spec, rng, mutation, tumor, shift=0.0):
    """Return (image uint8, tile classes) where class -1 = background, 99 = tumor."""
    size = spec.patch_size
    tissue = spec.patches_per_slide
    total = int(math.ceil(tissue / (1 - spec.background_fraction)))
    side = int(math.ceil(math.sqrt(total)))
    cells = side * side
    kinds = np.full(cells, -1)
    tissue_cells = rng.choice(cells, size=tissue, replace=False)
    tissue_kinds = np.zeros(tissue, dtype=int)
    if mutation > 0:
        n_sig = int(round(spec.signal_fraction * tissue))
        tissue_kinds[:n_sig] = mutation
    if tumor:
        n_tum = max(1, int(round(spec.tumor_fraction * tissue)))
        tissue_kinds[tissue - n_tum:] = 99
    kinds[tissue_cells] = rng.permutation(tissue_kinds)
    image = np.empty((side * size, side * size, 3))
    stain = 1.0 + shift * rng.standard_normal(3)
    for idx, kind in enumerate(kinds):
        r, c = divmod(idx, side)
        if kind == -1:
            tile = background(rng, size)
        elif kind == 99:
            tile = np.clip(tumor_texture(rng, size, spec.noise) * stain, 0, 1)
        else:
            tile = np.clip(texture(rng, kind, size, spec.noise) * stain, 0, 1)
        image[r * size:(r + 1) * size, c * size:(c + 1) * size] = tile
    return np.rint(image * 255).astype(np.uint8), kinds


def fisher_separation(spec, per_class=200):
    """Fisher ratio of per-tile mean red intensity between texture classes 0 and 1."""
    rng = np.random.default_rng([spec.seed, 7])
    stats = [[texture(rng, c, spec.patch_size, spec.noise)[..., 0].mean() for _ in range(per_class)]
             for c in (0, 1)]
    a, b = np.asarray(stats[0]), np.asarray(stats[1])
    return float((a.mean() - b.mean()) ** 2 / (a.var() + b.var()))


SLIDES_HEADER = ("slide_id", "patient_id", "cohort", "mpp", "file")
LABELS_HEADER = ("slide_id", "patient_id", "cohort", "target", "label")


def generate_synthetic(spec, out_dir, patch_size=None):
    """Write slides, tessellated patches, manifests and label tables under ``out_dir``.

    Returns the list of manifests (internal cohort first).
    """
    out = Path(out_dir)
    try:
        (out / "slides").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    slide_rows, label_rows, manifests = [], [], []
    for cohort, n in (("internal", spec.num_slides), ("external", spec.external_slides)):
        if n == 0:
            continue
        labels = slide_plan(spec, cohort, n)
        prefix = "INT" if cohort == "internal" else "EXT"
        shift = spec.external_shift if cohort == "external" else 0.0
        for i in range(n):
            slide_id = f"{prefix}-{i:03d}"
            patient_id = f"{prefix}-P{i // spec.slides_per_patient:03d}"
            rng = np.random.default_rng([spec.seed, 0 if cohort == "internal" else 1, i])
            image, _ = render_slide(spec, rng, int(labels["mutation"][i]), int(labels["tumor"][i]), shift)
            rel = f"slides/{slide_id}.png"
            write_image(out / rel, image)
            slide_rows.append((slide_id, patient_id, cohort, f"{spec.mpp}", rel))
            for target, values in labels.items():
                label_rows.append((slide_id, patient_id, cohort, target, str(int(values[i]))))
            manifests.append(preprocess_slide(out / rel, out, spec.mpp, target_mpp=spec.mpp,
                                              patch_size=patch_size or spec.patch_size,
                                              slide_id=slide_id))
    _write_tsv(out / "slides.tsv", SLIDES_HEADER, slide_rows)
    _write_tsv(out / "labels.tsv", LABELS_HEADER, label_rows)
    (out / "synth_spec.txt").write_text(
        "".join(f"{f.name} = {getattr(spec, f.name)}\n" for f in fields(spec)), encoding="utf-8")
    log.info("wrote %d slides to %s", len(manifests), out)
    return manifests


def _write_tsv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def spec_dict(spec):
    return asdict(spec)
