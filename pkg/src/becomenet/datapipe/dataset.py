"""Samples, in-memory datasets and the CSV manifest format."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SIDES = ("full", "left", "right")
MANIFEST_TAG = "#becomenet-manifest"
MANIFEST_VERSION = 1
BASE_COLUMNS = ["image_path", "landmark_path", "subject_id", "expr_label"]


class ManifestError(ValueError):
    """A manifest file is malformed or refers to unusable data."""


@dataclass
class Sample:
    image: np.ndarray  # [H, W] grayscale in [0, 1]
    landmarks: np.ndarray  # [l, 2] normalized to [0, 1]
    au_labels: np.ndarray | None = None  # [c] of 0/1
    expr_label: int | None = None
    subject_id: str = ""
    side: str = "full"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2-D grayscale, got shape {self.image.shape}")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 2:
            raise ValueError(f"landmarks must be [l, 2], got {self.landmarks.shape}")
        if self.landmarks.size and (self.landmarks.min() < 0 or self.landmarks.max() > 1):
            raise ValueError("landmarks must be normalized to [0, 1]")
        if self.au_labels is not None:
            self.au_labels = np.asarray(self.au_labels, dtype=np.int64)
            if not np.all((self.au_labels == 0) | (self.au_labels == 1)):
                raise ValueError("AU labels must be 0/1")
        if self.expr_label is not None:
            self.expr_label = int(self.expr_label)
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        self.subject_id = str(self.subject_id)
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")


class Dataset:
    """Column-wise sample store; missing AU labels are -1, missing expression is -1."""

    def __init__(self, images: np.ndarray, landmarks: np.ndarray, au_labels: np.ndarray,
                 expr_labels: np.ndarray, subject_ids: Sequence[str], sides: Sequence[str] | None = None,
                 au_names: Sequence[str] | None = None, k: int | None = None):
        self.images = np.asarray(images, dtype=np.float64)
        self.landmarks = np.asarray(landmarks, dtype=np.float64)
        n = len(self.images)
        au = np.asarray(au_labels, dtype=np.int64)
        self.au_labels = au.reshape(n, -1) if au.size or n == 0 else np.full((n, 0), -1)
        self.expr_labels = np.asarray(expr_labels, dtype=np.int64).reshape(n)
        self.subject_ids = np.asarray([str(s) for s in subject_ids], dtype=object)
        self.sides = list(sides) if sides is not None else ["full"] * n
        c = self.au_labels.shape[1]
        self.au_names = list(au_names) if au_names is not None else [f"au_{i}" for i in range(c)]
        if len(self.au_names) != c:
            raise ValueError(f"{len(self.au_names)} AU names for {c} label columns")
        valid = self.expr_labels[self.expr_labels >= 0]
        self.k = int(k) if k is not None else (int(valid.max()) + 1 if valid.size else 0)
        if len(self.landmarks) != n or len(self.subject_ids) != n or len(self.sides) != n:
            raise ValueError("dataset columns have inconsistent lengths")
        if valid.size and valid.max() >= self.k:
            raise ValueError(f"expression label {valid.max()} out of range for k={self.k}")

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], au_names=None, k=None) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("cannot build a dataset from no samples")
        c = max((len(s.au_labels) for s in samples if s.au_labels is not None), default=0)
        au = np.full((len(samples), c), -1, dtype=np.int64)
        for i, s in enumerate(samples):
            if s.au_labels is not None:
                if len(s.au_labels) != c:
                    raise ValueError(f"sample {i} has {len(s.au_labels)} AU labels, expected {c}")
                au[i] = s.au_labels
        expr = np.array([-1 if s.expr_label is None else s.expr_label for s in samples])
        return cls(np.stack([s.image for s in samples]), np.stack([s.landmarks for s in samples]),
                   au, expr, [s.subject_id for s in samples], [s.side for s in samples], au_names, k)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        au = self.au_labels[i]
        return Sample(self.images[i], self.landmarks[i], None if np.any(au < 0) or au.size == 0 else au.copy(),
                      None if self.expr_labels[i] < 0 else int(self.expr_labels[i]),
                      self.subject_ids[i], self.sides[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def c(self) -> int:
        return self.au_labels.shape[1]

    @property
    def subjects(self) -> list[str]:
        return sorted(set(self.subject_ids.tolist()))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], self.landmarks[idx], self.au_labels[idx], self.expr_labels[idx],
                       self.subject_ids[idx].tolist(), [self.sides[i] for i in idx], self.au_names, self.k)

    def for_subjects(self, subjects: Iterable[str]) -> "Dataset":
        keep = set(subjects)
        return self.subset([i for i, s in enumerate(self.subject_ids) if s in keep])

    def with_au(self) -> "Dataset":
        return self.subset(np.nonzero(np.all(self.au_labels >= 0, axis=1) & (self.c > 0))[0])

    def with_expr(self) -> "Dataset":
        return self.subset(np.nonzero(self.expr_labels >= 0)[0])

    def expr_onehot(self) -> np.ndarray:
        out = np.zeros((len(self), self.k))
        ok = self.expr_labels >= 0
        out[np.nonzero(ok)[0], self.expr_labels[ok]] = 1.0
        return out

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.images, self.landmarks, self.au_labels, self.expr_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\0".join(self.subject_ids.tolist()).encode())
        return h.hexdigest()


# ---------------------------------------------------------------- manifest I/O

def _write_png(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _write_landmarks(path: Path, pts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for x, y in pts:
            w.writerow([repr(float(x)), repr(float(y))])


def _read_landmarks(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        pts = np.array([[float(r[0]), float(r[1])] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ManifestError(f"{path}: landmark rows must be 'x,y'") from exc
    return pts


def save_manifest(dataset: Dataset, path, image_dir: str = "images", landmark_dir: str = "landmarks") -> Path:
    """Write PNG images, landmark CSVs and the manifest CSV next to each other."""
    path = Path(path)
    root = path.parent
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    (root / landmark_dir).mkdir(parents=True, exist_ok=True)
    c = dataset.c
    meta = [MANIFEST_TAG, f"version={MANIFEST_VERSION}", f"c={c}", f"k={dataset.k}",
            "au_names=" + "|".join(dataset.au_names)]
    header = BASE_COLUMNS + [f"au_{j}" for j in range(c)] + ["side"]
    width = max(4, len(str(len(dataset))))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(meta)
        w.writerow(header)
        for i in range(len(dataset)):
            stem = f"{i:0{width}d}"
            img_rel = f"{image_dir}/{stem}.png"
            lmk_rel = f"{landmark_dir}/{stem}.csv"
            _write_png(root / img_rel, dataset.images[i])
            _write_landmarks(root / lmk_rel, dataset.landmarks[i])
            expr = dataset.expr_labels[i]
            au = ["" if v < 0 else str(int(v)) for v in dataset.au_labels[i]]
            w.writerow([img_rel, lmk_rel, dataset.subject_ids[i], "" if expr < 0 else str(int(expr))]
                       + au + [dataset.sides[i]])
    return path


def _parse_meta(row: list[str], path) -> dict:
    if not row or row[0] != MANIFEST_TAG:
        raise ManifestError(f"{path}: line 1 must be the '{MANIFEST_TAG}' metadata row")
    meta = {}
    for item in row[1:]:
        key, _, val = item.partition("=")
        meta[key] = val
    try:
        meta["c"] = int(meta["c"])
        meta["k"] = int(meta["k"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: metadata row must declare integer c and k") from exc
    names = meta.get("au_names", "")
    meta["au_names"] = names.split("|") if names else [f"au_{j}" for j in range(meta["c"])]
    if len(meta["au_names"]) != meta["c"]:
        raise ManifestError(f"{path}: {len(meta['au_names'])} AU names declared for c={meta['c']}")
    return meta


def load_manifest(path) -> Dataset:
    """Read a manifest and every file it references.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    meta = _parse_meta(rows[0], path)
    c, k = meta["c"], meta["k"]
    if len(rows) < 2:
        raise ManifestError(f"{path}: missing column header row")
    header = rows[1]
    if header[:4] != BASE_COLUMNS:
        raise ManifestError(f"{path}: header must start with {','.join(BASE_COLUMNS)}")
    au_cols = [h for h in header[4:] if h.startswith("au_")]
    if len(au_cols) != c:
        raise ManifestError(f"{path}: header has {len(au_cols)} AU columns but c={c}")
    has_side = "side" in header
    records = rows[2:]
    if not records:
        raise ManifestError(f"{path}: manifest has no sample rows")

    root = path.parent
    images, landmarks, aus, exprs, subjects, sides = [], [], [], [], [], []
    for lineno, row in enumerate(records, start=3):
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, row))
        if not rec["subject_id"]:
            raise ManifestError(f"{path}:{lineno}: empty subject_id")
        try:
            au = [-1 if rec[f"au_{j}"] == "" else int(rec[f"au_{j}"]) for j in range(c)]
            expr = -1 if rec["expr_label"] == "" else int(rec["expr_label"])
        except (ValueError, KeyError) as exc:
            raise ManifestError(f"{path}:{lineno}: label fields must be integers or empty") from exc
        if any(v not in (-1, 0, 1) for v in au):
            raise ManifestError(f"{path}:{lineno}: AU labels must be 0, 1 or empty")
        if not -1 <= expr < k:
            raise ManifestError(f"{path}:{lineno}: expression label {expr} outside 0..{k - 1}")
        img_path = root / rec["image_path"]
        lmk_path = root / rec["landmark_path"]
        for p in (img_path, lmk_path):
            if not p.is_file():
                raise ManifestError(f"{path}:{lineno}: missing file {os.fspath(p)}")
        images.append(_read_png(img_path))
        landmarks.append(_read_landmarks(lmk_path))
        aus.append(au)
        exprs.append(expr)
        subjects.append(rec["subject_id"])
        side = rec.get("side", "full") if has_side else "full"
        if side not in SIDES:
            raise ManifestError(f"{path}:{lineno}: unknown side {side!r}")
        sides.append(side)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ManifestError(f"{path}: images have differing sizes {sorted(shapes)}")
    counts = {lm.shape for lm in landmarks}
    if len(counts) != 1:
        raise ManifestError(f"{path}: landmark files have differing point counts")
    return Dataset(np.stack(images), np.stack(landmarks), np.array(aus).reshape(len(aus), c),
                   np.array(exprs), subjects, sides, meta["au_names"], k)
