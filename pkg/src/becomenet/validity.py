"""Construct-validity statistics: %Face from gaze, one-sample t-tests, report tables."""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .specialfn import student_t_pvalue

__all__ = [
    "GazeSample",
    "AoiRect",
    "TrackingLossError",
    "TTest",
    "ValidityResult",
    "UNDEFINED_MARK",
    "pct_face",
    "one_sample_t",
    "recognition_validity",
    "mimicry_validity",
    "build_report",
    "read_gaze_csv",
    "read_detections_csv",
]

UNDEFINED_MARK = "--*"
VALID_MARK = "✓"


class TrackingLossError(ValueError):
    """No on-screen gaze samples: the participant cannot be scored."""


@dataclass(frozen=True)
class GazeSample:
    timestamp_ms: float
    x: float
    y: float
    on_screen: bool = True

    @property
    def usable(self) -> bool:
        return bool(self.on_screen) and 0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0


@dataclass(frozen=True)
class AoiRect:
    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("AOI must have positive area")
        eps = 1e-12
        if self.left < -eps or self.top < -eps or self.left + self.width > 1 + eps or self.top + self.height > 1 + eps:
            raise ValueError("AOI must lie inside the unit square")

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x: float, y: float) -> bool:
        return self.left <= x <= self.left + self.width and self.top <= y <= self.top + self.height


def pct_face(gaze: Sequence[GazeSample], aoi: AoiRect) -> float:
    """Fraction of on-screen samples inside ``aoi``; every sample weighs the same."""
    last = -math.inf
    for g in gaze:
        if g.timestamp_ms < last:
            raise ValueError(f"gaze timestamps decrease at t={g.timestamp_ms}")
        last = g.timestamp_ms
    usable = [g for g in gaze if g.usable]
    if not usable:
        raise TrackingLossError("no on-screen gaze samples (tracking loss)")
    return sum(aoi.contains(g.x, g.y) for g in usable) / len(usable)


@dataclass(frozen=True)
class TTest:
    n: int
    df: int
    t: float | None  # None: zero sample variance
    p: float | None
    sided: str
    mu0: float

    @property
    def defined(self) -> bool:
        return self.t is not None


def one_sample_t(values: Iterable[float], mu0: float = 0.0, sided: str = "two") -> TTest:
    """Student one-sample t-test of the mean against ``mu0``.

    ``sided`` is ``"two"``, ``"greater"`` or ``"less"``. A sample with zero
    variance has no t-statistic; the result then carries ``t = p = None``.
    """
    x = np.asarray(list(values), dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"one-sample t-test needs n >= 2, got {x.size}")
    if sided not in ("two", "greater", "less"):
        raise ValueError(f"sided must be 'two', 'greater' or 'less', got {sided!r}")
    n = x.size
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        return TTest(n, n - 1, None, None, sided, float(mu0))
    t = (float(np.mean(x)) - mu0) / (sd / math.sqrt(n))
    return TTest(n, n - 1, t, student_t_pvalue(t, n - 1, sided), sided, float(mu0))


@dataclass(frozen=True)
class ValidityResult:
    construct: str
    n: int
    df: int
    t: float | None
    p: float | None
    sided: str
    alpha: float
    valid: bool
    mu0: float = 0.0

    @property
    def defined(self) -> bool:
        return self.t is not None

    @classmethod
    def from_test(cls, construct: str, test: TTest, alpha: float) -> "ValidityResult":
        valid = test.defined and test.p < alpha
        return cls(construct, test.n, test.df, test.t, test.p, test.sided, alpha, bool(valid), test.mu0)

    def to_dict(self) -> dict:
        return dict(construct=self.construct, n=self.n, df=self.df, t=self.t, p=self.p, sided=self.sided,
                    alpha=self.alpha, valid=self.valid, mu0=self.mu0)


def recognition_validity(per_participant_pct: Sequence[float], face_fraction: float = 0.15, alpha: float = 0.05,
                         construct: str = "recognition") -> ValidityResult:
    """Do participants look at the face more than its share of the scene? (one-sided)"""
    return ValidityResult.from_test(construct, one_sample_t(per_participant_pct, face_fraction, "greater"), alpha)


def mimicry_validity(detections: Sequence[int], alpha: float = 0.05, construct: str = "mimicry") -> ValidityResult:
    """Is the AU activated at all? Two-sided test of binary detections against 0."""
    d = np.asarray(detections)
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("detections must be 0/1 per participant")
    return ValidityResult.from_test(construct, one_sample_t(d, 0.0, "two"), alpha)


def _fmt_t(r: ValidityResult) -> str:
    return UNDEFINED_MARK if r.t is None else f"{r.t:.3f}"


def _fmt_p(r: ValidityResult) -> str:
    if r.p is None:
        return UNDEFINED_MARK
    return "<0.001" if r.p < 0.001 else f"{r.p:.3f}"


REPORT_COLUMNS = ("construct", "df", "t", "p", "sided", "valid")


def build_report(results: Sequence[ValidityResult]) -> tuple[str, str]:
    """Render results as ``(csv_text, markdown_text)``."""
    rows = [(r.construct, str(r.df), _fmt_t(r), _fmt_p(r), r.sided, VALID_MARK if r.valid else "")
            for r in results]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(rows)

    md = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    md += ["| " + " | ".join(row) + " |" for row in rows]
    if any(not r.defined for r in results):
        md += ["", "\\* zero variance across participants: no t-statistic."]
    return buf.getvalue(), "\n".join(md) + "\n"


def _truthy(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def read_gaze_csv(path) -> "OrderedDict[tuple[str, str], list[GazeSample]]":
    """Gaze rows grouped by ``(construct, participant_id)``.

    Required columns: timestamp_ms, x, y, on_screen. Optional columns
    ``participant_id`` and ``construct`` default to the file stem and "face".
    """
    path = Path(path)
    groups: OrderedDict[tuple[str, str], list[GazeSample]] = OrderedDict()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"timestamp_ms", "x", "y", "on_screen"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing gaze columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                on = _truthy(row["on_screen"])
                x = float(row["x"]) if row["x"].strip() else float("nan")
                y = float(row["y"]) if row["y"].strip() else float("nan")
                sample = GazeSample(float(row["timestamp_ms"]), x, y, on and math.isfinite(x) and math.isfinite(y))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            key = (row.get("construct") or "face", row.get("participant_id") or path.stem)
            groups.setdefault(key, []).append(sample)
    return groups


def read_detections_csv(path) -> "OrderedDict[str, list[int]]":
    """Detections grouped by construct, in file order. Columns: participant_id, construct, detected."""
    path = Path(path)
    out: OrderedDict[str, list[int]] = OrderedDict()
    seen: set[tuple[str, str]] = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"participant_id", "construct", "detected"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing detection columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            key = (row["construct"], row["participant_id"])
            if key in seen:
                raise ValueError(f"{path}:{lineno}: duplicate row for participant {key[1]} / {key[0]}")
            seen.add(key)
            try:
                d = int(row["detected"])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: detected must be 0 or 1, got {row['detected']!r}") from None
            if d not in (0, 1):
                raise ValueError(f"{path}:{lineno}: detected must be 0 or 1, got {d}")
            out.setdefault(row["construct"], []).append(d)
    return out
