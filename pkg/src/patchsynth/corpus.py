"""Corpus ingestion and storage.

A stored corpus split is a pair of IDX files (images already padded, so
rows and columns are the padded size) plus a JSON manifest whose checksum
is verified on every load.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError
from .formats import read_idx_images, read_idx_labels, write_idx_images, write_idx_labels

CACHE_ENV = "PATCHSYNTH_CACHE"


def cache_dir() -> Path:
    """Default location for corpora and dictionary archives (``$PATCHSYNTH_CACHE``)."""
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "patchsynth"))


@dataclass
class CorpusManifest:
    source_format: str
    split: str
    count: int
    class_counts: dict[str, int]
    checksum: str
    preprocessing: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _sha256(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def pad_center(images, size=(32, 32)) -> np.ndarray:
    images = np.asarray(images)
    n, h, w = images.shape
    ph, pw = size
    if ph < h or pw < w:
        raise ConfigurationError(f"cannot pad {h}x{w} images to {ph}x{pw}")
    out = np.zeros((n, ph, pw), dtype=images.dtype)
    top, left = (ph - h) // 2, (pw - w) // 2
    out[:, top : top + h, left : left + w] = images
    return out


def ingest_mnist(images_path, labels_path, split: str, out_dir=None, pad_to=(32, 32)) -> CorpusManifest:
    """Read IDX files, pad centred to ``pad_to`` and store them under ``out_dir``."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    if labels.size and labels.max() > 9:
        raise IngestionError(f"label {int(labels.max())} outside 0..9", offset=8 + int(np.argmax(labels > 9)))
    out = Path(out_dir) if out_dir is not None else cache_dir() / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    img_file = out / f"{split}-images.idx"
    lab_file = out / f"{split}-labels.idx"
    write_idx_images(img_file, pad_center(images, pad_to))
    write_idx_labels(lab_file, labels)
    counts = np.bincount(labels, minlength=10)
    manifest = CorpusManifest(
        source_format="mnist-idx",
        split=split,
        count=int(images.shape[0]),
        class_counts={str(c): int(v) for c, v in enumerate(counts)},
        checksum=_sha256(img_file, lab_file),
        preprocessing={"pad_to": list(pad_to), "normalize": "v/255", "source_size": list(images.shape[1:])},
        files={"images": img_file.name, "labels": lab_file.name},
    )
    with open(out / f"{split}-manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(corpus_dir, split: str) -> CorpusManifest:
    path = Path(corpus_dir) / f"{split}-manifest.json"
    if not path.exists():
        raise ConfigurationError(f"no {split} corpus in {corpus_dir} (missing {path.name})")
    with open(path) as f:
        return CorpusManifest(**json.load(f))


def load_corpus(corpus_dir, split: str, label: int | None = None, verify: bool = True):
    """Return ``(images, labels, manifest)`` with images as float64 in [0, 1]."""
    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir, split)
    img_file = corpus_dir / manifest.files["images"]
    lab_file = corpus_dir / manifest.files["labels"]
    if verify and _sha256(img_file, lab_file) != manifest.checksum:
        raise IngestionError(f"{split} corpus in {corpus_dir} does not match its manifest checksum")
    images = read_idx_images(img_file)
    labels = read_idx_labels(lab_file)
    if label is not None:
        keep = labels == label
        images, labels = images[keep], labels[keep]
    return images.astype(np.float64) / 255.0, labels, manifest
