"""Frozen-encoder feature extraction and the per-slide feature file format.

Feature file (little-endian)::

    8 bytes  magic b"CFPFEAT\\0"
    u32      version (1)
    u16 + s  slide_id (UTF-8, length-prefixed)
    u16 + s  extract mode (UTF-8, length-prefixed)
    u32      D (feature width)
    u32      n (patch count)
    32 bytes sha256 of the encoder checkpoint file
    n*D f32  row-major features, one row per accepted patch in manifest order

A store directory holds one ``<slide_id>.feat`` per slide plus
``store.json`` (mode, D, checkpoint hash, slide list, skipped slides).
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import file_hash
from .data.augment import normalize, resize, to_tensor
from .data.dataset import Dataset
from .encoder import ExtractMode, mode_width
from .errors import DataError, ModeMismatch

log = logging.getLogger(__name__)

MAGIC = b"CFPFEAT\0"
VERSION = 1


@dataclass
class FeatureFile:
    slide_id: str
    mode: str
    features: np.ndarray
    checkpoint_hash: str


def write_features(path, slide_id, mode, features, checkpoint_hash):
    feats = np.ascontiguousarray(features, dtype="<f4")
    sid, md = slide_id.encode("utf-8"), mode.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<H", len(sid)) + sid)
        fh.write(struct.pack("<H", len(md)) + md)
        fh.write(struct.pack("<II", feats.shape[1], feats.shape[0]))
        fh.write(bytes.fromhex(checkpoint_hash))
        fh.write(feats.tobytes())


def read_features(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a feature file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    pos = 12
    (n_sid,) = struct.unpack_from("<H", data, pos)
    slide_id = data[pos + 2:pos + 2 + n_sid].decode("utf-8")
    pos += 2 + n_sid
    (n_md,) = struct.unpack_from("<H", data, pos)
    mode = data[pos + 2:pos + 2 + n_md].decode("utf-8")
    pos += 2 + n_md
    d, n = struct.unpack_from("<II", data, pos)
    pos += 8
    digest = data[pos:pos + 32].hex()
    pos += 32
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float32)
    return FeatureFile(slide_id, mode, feats, digest)


@torch.no_grad()
def encode_patches(encoder, patches, mode, batch_size=256):
    """uint8 (n, H, W, 3) -> float32 (n, D) using the frozen encoder."""
    encoder.eval()
    size = encoder.config.input_size
    out = []
    for i in range(0, len(patches), batch_size):
        x = normalize(resize(to_tensor(patches[i:i + batch_size]), size))
        out.append(encoder.extract_features(x, mode).float().numpy())
    return np.concatenate(out) if out else np.zeros((0, mode_width(encoder.config, mode)), np.float32)


def extract_cohort_features(checkpoint, mode, dataset, out_dir, cohorts=("internal", "external")):
    """Write one feature file per slide with at least one accepted patch."""
    from .trainer import load_pair

    mode = ExtractMode.parse(mode)
    dataset = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = file_hash(checkpoint)
    _, pair, _, _ = load_pair(checkpoint)
    encoder = pair.encoder
    width = mode_width(encoder.config, mode)
    slides, skipped = [], []
    for cohort in cohorts:
        for manifest in dataset.manifests(cohort):
            patches = dataset.load_patches(manifest)
            if len(patches) == 0:
                log.warning("%s has no accepted patches; skipped", manifest.slide_id)
                skipped.append(manifest.slide_id)
                continue
            feats = encode_patches(encoder, patches, mode)
            write_features(out / f"{manifest.slide_id}.feat", manifest.slide_id, mode.value, feats, digest)
            slides.append(manifest.slide_id)
    meta = {"mode": mode.value, "D": width, "checkpoint_hash": digest, "slides": slides,
            "skipped": skipped}
    (out / "store.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


class FeatureStore:
    def __init__(self, root):
        self.root = Path(root)
        try:
            self.meta = json.loads((self.root / "store.json").read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"{self.root} is not a feature store") from exc

    @property
    def dim(self):
        return self.meta["D"]

    @property
    def mode(self):
        return self.meta["mode"]

    def slide_ids(self):
        return list(self.meta["slides"])

    def load(self, slide_id):
        ff = read_features(self.root / f"{slide_id}.feat")
        if ff.features.shape[1] != self.dim or ff.mode != self.mode:
            raise ModeMismatch(f"{slide_id}: width {ff.features.shape[1]} / mode {ff.mode} "
                               f"disagree with store ({self.dim}, {self.mode})")
        return ff.features

    def check_consistent(self):
        for sid in self.slide_ids():
            self.load(sid)
