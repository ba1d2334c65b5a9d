"""Subject-independent fold assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for fold in self.folds:
            overlap = seen.intersection(fold)
            if overlap:
                raise ValueError(f"subjects in more than one fold: {sorted(overlap)}")
            seen.update(fold)

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def subjects(self) -> list[str]:
        return sorted(s for f in self.folds for s in f)

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[i])
        train = [s for j, f in enumerate(self.folds) if j != i for s in f]
        return train, test

    def to_dict(self) -> dict:
        return {"folds": [list(f) for f in self.folds]}


def kfold_subject_split(subjects, k: int = 3, seed: int | np.random.Generator = 0) -> FoldSplit:
    """Shuffle the distinct subjects, then deal them round-robin into ``k`` folds.

    ``subjects`` is a dataset (anything with ``.subjects``) or an iterable of ids.
    """
    ids: Iterable[str] = subjects.subjects if hasattr(subjects, "subjects") else subjects
    uniq = sorted(set(str(s) for s in ids))
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(uniq) < k:
        raise ValueError(f"{len(uniq)} subjects cannot fill {k} folds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    return FoldSplit(tuple(tuple(order[j::k]) for j in range(k)))
