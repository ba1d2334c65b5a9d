"""Keyframe clips that ramp AU channels linearly from neutral to a peak expression."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

__all__ = [
    "AU_COLUMNS",
    "INTENSITY_WEIGHTS",
    "N_FRAMES",
    "FRAME_INTERVAL_MS",
    "ExpressionSpec",
    "AnimationClip",
    "builtin_expressions",
    "expression",
    "intensity_to_weight",
    "make_clip",
    "export_clip",
    "load_clip",
    "apply_channel_map",
]

AU_COLUMNS = (1, 2, 4, 5, 6, 7, 10, 11, 12, 15, 17, 20, 23, 25, 26, 27)
INTENSITY_WEIGHTS = MappingProxyType({"A": 0.2, "B": 0.4, "C": 0.6, "D": 0.8, "E": 1.0})
N_FRAMES = 25
FRAME_INTERVAL_MS = 50


@dataclass(frozen=True)
class ExpressionSpec:
    name: str
    au_intensities: Mapping[int, str]

    def __post_init__(self):
        for au, letter in self.au_intensities.items():
            if au not in AU_COLUMNS:
                raise ValueError(f"{self.name}: AU {au} is not one of the animated AUs {AU_COLUMNS}")
            intensity_to_weight(letter)
        object.__setattr__(self, "au_intensities", MappingProxyType(dict(sorted(self.au_intensities.items()))))


_TABLE = {
    "anger": {4: "E", 5: "E", 7: "C", 10: "D", 23: "D", 25: "B", 26: "C"},
    "disgust": {10: "E", 17: "D"},
    "fear": {1: "E", 2: "C", 4: "D", 5: "E", 20: "C", 25: "C", 27: "B"},
    "happy": {6: "C", 12: "E"},
    "sad": {1: "E", 4: "D", 11: "B", 15: "E"},
    "surprise": {1: "D", 2: "D", 5: "B", 25: "C", 27: "C"},
}


def builtin_expressions() -> list[ExpressionSpec]:
    return [ExpressionSpec(name, au) for name, au in _TABLE.items()]


def expression(name: str) -> ExpressionSpec:
    if name not in _TABLE:
        raise KeyError(f"unknown expression {name!r}; choose from {sorted(_TABLE)}")
    return ExpressionSpec(name, _TABLE[name])


def intensity_to_weight(letter: str) -> float:
    """FACS intensity letter A..E to a blend weight on a uniform 0.2 ladder."""
    try:
        return INTENSITY_WEIGHTS[letter]
    except (KeyError, TypeError):
        raise ValueError(f"intensity must be one of A-E, got {letter!r}") from None


@dataclass(frozen=True)
class AnimationClip:
    name: str
    channels: tuple[str, ...]
    frames: np.ndarray  # [n_frames, n_channels]
    frame_interval_ms: int = FRAME_INTERVAL_MS

    @property
    def duration_ms(self) -> int:
        return (len(self.frames) - 1) * self.frame_interval_ms

    def to_dict(self) -> dict:
        return {"name": self.name, "frame_interval_ms": self.frame_interval_ms,
                "channels": list(self.channels), "frames": self.frames.tolist()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnimationClip):
            return NotImplemented
        return (self.name == other.name and self.channels == other.channels
                and self.frame_interval_ms == other.frame_interval_ms and np.array_equal(self.frames, other.frames))


def make_clip(spec: ExpressionSpec, n_frames: int = N_FRAMES) -> AnimationClip:
    """Linear ramp: frame ``i`` holds ``i / (n_frames - 1)`` of each peak weight."""
    channels = tuple(f"AU{au}" for au in AU_COLUMNS)
    peak = np.array([intensity_to_weight(spec.au_intensities[au]) if au in spec.au_intensities else 0.0
                     for au in AU_COLUMNS])
    ramp = np.arange(n_frames) / (n_frames - 1)
    return AnimationClip(spec.name, channels, ramp[:, None] * peak[None, :])


def export_clip(clip: AnimationClip, path) -> None:
    Path(path).write_text(json.dumps(clip.to_dict(), indent=2) + "\n")


def load_clip(path) -> AnimationClip:
    d = json.loads(Path(path).read_text())
    frames = np.asarray(d["frames"], dtype=np.float64)
    channels = tuple(d["channels"])
    if frames.ndim != 2 or frames.shape[1] != len(channels):
        raise ValueError(f"{path}: frames do not match {len(channels)} channels")
    return AnimationClip(d["name"], channels, frames, int(d["frame_interval_ms"]))


def apply_channel_map(clip: AnimationClip, mapping: Mapping[str, str]) -> AnimationClip:
    """Rename AU channels to consumer blendshape names; unmapped channels keep their names."""
    names = tuple(mapping.get(c, c) for c in clip.channels)
    if len(set(names)) != len(names):
        raise ValueError("channel mapping sends two channels to the same name")
    return AnimationClip(clip.name, names, clip.frames.copy(), clip.frame_interval_ms)
