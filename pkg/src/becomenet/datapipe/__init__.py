"""Samples, preprocessing geometry, manifests, synthetic data and fold splits."""

from .dataset import Dataset, ManifestError, Sample, load_manifest, save_manifest
from .folds import FoldSplit, kfold_subject_split
from .geometry import align_face, mirror_sample, normalize_landmarks, similarity_from_eyes, split_half
from .landmarks import HALF_LEFT_INDICES, HALF_RIGHT_INDICES, MIDLINE, template
from .synthetic import (
    AU_NAMES,
    BUILTIN_AUS,
    BUILTIN_EXPRESSIONS,
    UNILATERAL_LABEL_MAP,
    generate_synthetic,
    render_face,
    symmetric_sample,
)

__all__ = [
    "AU_NAMES", "BUILTIN_AUS", "BUILTIN_EXPRESSIONS", "Dataset", "FoldSplit", "HALF_LEFT_INDICES",
    "HALF_RIGHT_INDICES", "MIDLINE", "ManifestError", "Sample", "UNILATERAL_LABEL_MAP", "align_face",
    "generate_synthetic", "kfold_subject_split", "load_manifest", "mirror_sample", "normalize_landmarks",
    "render_face", "save_manifest", "similarity_from_eyes", "split_half", "symmetric_sample", "template",
]
