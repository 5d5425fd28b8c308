"""Slide resizing, grid tessellation and Canny-based background rejection."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from ..errors import DataError, UnknownMpp

log = logging.getLogger(__name__)

CANNY_SIGMA = 1.4
CANNY_LOW = 40
CANNY_HIGH = 100
MIN_EDGE_FRACTION = 0.02

MANIFEST_HEADER = ("slide_id", "x", "y", "w", "h", "accepted")


@dataclass
class SlideManifest:
    slide_id: str
    source_path: str = ""
    mpp_source: float = 0.5
    patches: list = field(default_factory=list)  # (x, y, w, h) in source pixels
    accepted: list = field(default_factory=list)

    @property
    def accepted_patches(self):
        return [p for p, ok in zip(self.patches, self.accepted) if ok]

    def patch_name(self, patch):
        x, y, _, _ = patch
        return f"{x}_{y}.png"


def edge_fraction(patch):
    """Fraction of Canny edge pixels on the blurred 8-bit grayscale patch."""
    patch = np.asarray(patch)
    if patch.dtype != np.uint8:
        patch = np.clip(np.rint(patch * 255.0), 0, 255).astype(np.uint8)
    gray = cv2.cvtColor(patch, cv2.COLOR_RGB2GRAY) if patch.ndim == 3 else patch
    blurred = cv2.GaussianBlur(gray, (0, 0), CANNY_SIGMA)
    edges = cv2.Canny(blurred, CANNY_LOW, CANNY_HIGH)
    return float(np.count_nonzero(edges)) / edges.size


def reject_background(patch, min_edge_fraction=MIN_EDGE_FRACTION):
    """True when the patch has enough edges to count as tissue."""
    return edge_fraction(patch) >= min_edge_fraction


def rescale(image, mpp_source, target_mpp):
    if mpp_source is None or not mpp_source > 0:
        raise UnknownMpp("source microns-per-pixel is unknown")
    factor = mpp_source / target_mpp
    if abs(factor - 1.0) < 1e-9:
        return image, 1.0
    h, w = image.shape[:2]
    size = (max(1, int(round(w * factor))), max(1, int(round(h * factor))))
    interp = cv2.INTER_AREA if factor < 1 else cv2.INTER_CUBIC
    return cv2.resize(image, size, interpolation=interp), factor


def tessellate(image, mpp_source, target_mpp=0.5, patch_size=224, slide_id="slide",
               source_path="", reject=True):
    """Cut a slide into a non-overlapping grid of patches at ``target_mpp``.

    Returns ``(manifest, patches)`` where ``patches`` holds the resized
    patch pixels in manifest order. Partial edge tiles are dropped.
    """
    image = np.asarray(image)
    scaled, factor = rescale(image, mpp_source, target_mpp)
    rows, cols = scaled.shape[0] // patch_size, scaled.shape[1] // patch_size
    manifest = SlideManifest(slide_id, str(source_path), float(mpp_source))
    pixels = []
    src = patch_size / factor
    for r in range(rows):
        for c in range(cols):
            tile = scaled[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
            # cumulative rounding keeps source boxes adjacent and inside the image
            x0, x1 = (min(int(round(k * src)), image.shape[1]) for k in (c, c + 1))
            y0, y1 = (min(int(round(k * src)), image.shape[0]) for k in (r, r + 1))
            manifest.patches.append((x0, y0, x1 - x0, y1 - y0))
            manifest.accepted.append(bool(reject_background(tile)) if reject else True)
            pixels.append(tile)
    return manifest, pixels


def write_manifest(manifest, path):
    path = Path(path)
    lines = ["\t".join(MANIFEST_HEADER)]
    for (x, y, w, h), ok in zip(manifest.patches, manifest.accepted):
        lines.append(f"{manifest.slide_id}\t{x}\t{y}\t{w}\t{h}\t{int(ok)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, mpp_source=0.5, source_path=""):
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise DataError(f"{path}: bad manifest header")
    slide_id = path.stem
    manifest = SlideManifest(slide_id, source_path, mpp_source)
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 6:
            raise DataError(f"{path}:{n}: expected 6 fields")
        manifest.slide_id = parts[0]
        manifest.patches.append(tuple(int(v) for v in parts[1:5]))
        manifest.accepted.append(parts[5] == "1")
    return manifest


def read_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, rgb):
    # PNG compression level fixed so files are byte-reproducible
    ok = cv2.imwrite(str(path), cv2.cvtColor(np.asarray(rgb), cv2.COLOR_RGB2BGR),
                     [cv2.IMWRITE_PNG_COMPRESSION, 3])
    if not ok:
        raise DataError(f"cannot write image {path}")


def preprocess_slide(image_path, out_dir, mpp_source, target_mpp=0.5, patch_size=224, slide_id=None):
    """Tessellate one slide image; write accepted patches and its manifest."""
    image_path = Path(image_path)
    slide_id = slide_id or image_path.stem
    manifest, pixels = tessellate(read_image(image_path), mpp_source, target_mpp, patch_size,
                                  slide_id=slide_id, source_path=image_path)
    patch_dir = Path(out_dir) / "patches" / slide_id
    patch_dir.mkdir(parents=True, exist_ok=True)
    for patch, ok, tile in zip(manifest.patches, manifest.accepted, pixels):
        if ok:
            write_image(patch_dir / manifest.patch_name(patch), tile)
    manifest_dir = Path(out_dir) / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, manifest_dir / f"{slide_id}.tsv")
    log.debug("%s: %d/%d patches accepted", slide_id, sum(manifest.accepted), len(manifest.accepted))
    return manifest
