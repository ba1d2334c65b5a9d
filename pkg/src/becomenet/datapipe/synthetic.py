"""Parametric line-sketch faces with known synthetic action units.

Each subject gets its own base geometry (face width, feature placement and
a little asymmetry) and its own rendering tones. Each synthetic AU moves a
fixed group of landmarks; the strokes are drawn through the landmarks, so
the image moves with them. Expressions are fixed AU combinations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .landmarks import CLOSED_GROUPS, GROUPS, LEFT_SIDE, MIDLINE, MIRROR, N_POINTS, template_offsets


@dataclass(frozen=True)
class SyntheticAU:
    name: str
    # point index -> (dx, dy) at full intensity, normalized units
    moves: dict


def _brow_raise(side: str) -> SyntheticAU:
    idx = GROUPS[f"brow_{side}"]
    moves = {i: (0.0, -0.05) for i in idx}
    upper = (37, 38) if side == "left" else (43, 44)
    moves.update({i: (0.0, -0.012) for i in upper})
    return SyntheticAU(f"brow_raise_{side}", moves)


def _brow_lower(side: str) -> SyntheticAU:
    idx = GROUPS[f"brow_{side}"]
    inward = 0.015 if side == "left" else -0.015
    moves = {i: (0.0, 0.05) for i in idx}
    inner = (20, 21) if side == "left" else (22, 23)
    moves.update({i: (inward, 0.06) for i in inner})
    return SyntheticAU(f"brow_lower_{side}", moves)


def _corner(side: str) -> SyntheticAU:
    s = -1.0 if side == "left" else 1.0
    if side == "left":
        corner, near = (48, 60), (49, 59, 61, 67)
    else:
        corner, near = (54, 64), (53, 55, 63, 65)
    moves = {i: (0.025 * s, -0.04) for i in corner}
    moves.update({i: (0.008 * s, -0.015) for i in near})
    return SyntheticAU(f"mouth_corner_{side}", moves)


def _mouth_open() -> SyntheticAU:
    moves = {i: (0.0, 0.06) for i in (55, 56, 57, 58, 59, 65, 66, 67)}
    for i, dy in zip(range(4, 13), (0.01, 0.025, 0.04, 0.05, 0.055, 0.05, 0.04, 0.025, 0.01)):
        moves[i] = (0.0, dy)
    return SyntheticAU("mouth_open", moves)


def _lid_tighten() -> SyntheticAU:
    moves = {i: (0.0, 0.022) for i in (37, 38, 43, 44)}
    moves.update({i: (0.0, -0.018) for i in (40, 41, 46, 47)})
    return SyntheticAU("lid_tighten", moves)


BUILTIN_AUS: tuple[SyntheticAU, ...] = (
    _brow_raise("left"), _brow_raise("right"),
    _brow_lower("left"), _brow_lower("right"),
    _mouth_open(),
    _corner("left"), _corner("right"),
    _lid_tighten(),
)
AU_NAMES = tuple(a.name for a in BUILTIN_AUS)

# expression name -> AU indices into BUILTIN_AUS
BUILTIN_EXPRESSIONS: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("neutral", ()),
    ("happy", (5, 6)),
    ("surprise", (0, 1, 4)),
    ("anger", (2, 3, 7)),
    ("fear", (0, 1, 4, 7)),
    ("contempt", (6,)),
)

# conflicting pairs never co-occur: raise vs lower on the same side
_CONFLICTS = {0: 2, 2: 0, 1: 3, 3: 1}

# image-side AU columns for half-face samples of the 8-AU set
UNILATERAL_LABEL_MAP = {"left": [0, 2, 4, 5, 7], "right": [1, 3, 4, 6, 7]}
UNILATERAL_AU_NAMES = ("brow_raise", "brow_lower", "mouth_open", "mouth_corner", "lid_tighten")


@dataclass(frozen=True)
class SubjectStyle:
    geometry: np.ndarray  # [68, 2] base landmarks
    background: float
    ink: float
    stroke_px: float


def subject_geometry(rng: np.random.Generator, symmetric: bool = False) -> np.ndarray:
    """Base landmarks for one subject: the template with per-subject offsets."""
    pts = template_offsets()
    face_w = rng.normal(1.0, 0.05)
    pts[:, 0] *= face_w
    groups_dy = {
        "brow": rng.normal(0.0, 0.012),
        "eye": rng.normal(0.0, 0.008),
        "nose": rng.normal(0.0, 0.01),
        "mouth": rng.normal(0.0, 0.012),
    }
    eye_spread = rng.normal(1.0, 0.05)
    mouth_w = rng.normal(1.0, 0.07)
    jaw_drop = rng.normal(0.0, 0.015)
    for i in range(17, 27):
        pts[i, 1] += groups_dy["brow"]
    for i in range(36, 48):
        pts[i, 1] += groups_dy["eye"]
        pts[i, 0] *= eye_spread
    for i in range(27, 36):
        pts[i, 1] += groups_dy["nose"]
    for i in range(48, 68):
        pts[i, 1] += groups_dy["mouth"]
        pts[i, 0] *= mouth_w
    for i in range(4, 13):
        pts[i, 1] += jaw_drop
    if not symmetric:
        jitter = rng.normal(0.0, 0.004, size=pts.shape)
        pts += jitter
    else:
        # draw to keep the stream aligned with the asymmetric case
        rng.normal(0.0, 0.004, size=pts.shape)
    pts[:, 0] += 0.5
    return np.clip(pts, 0.0, 1.0)


def _segments(points: np.ndarray) -> np.ndarray:
    segs = []
    for name, idx in GROUPS.items():
        idx = list(idx)
        if name in CLOSED_GROUPS:
            idx = idx + [idx[0]]
        for a, b in zip(idx[:-1], idx[1:]):
            pa, pb = points[a], points[b]
            # mirror-consistent endpoint order so mirrored strokes round identically
            if (pb[1], abs(pb[0]), pb[0]) < (pa[1], abs(pa[0]), pa[0]):
                pa, pb = pb, pa
            segs.append((pa, pb))
    return np.array(segs)  # [S, 2, 2]


def render_face(landmarks: np.ndarray, size: tuple[int, int], background: float = 0.2,
                ink: float = 0.9, stroke_px: float = 0.8) -> np.ndarray:
    """Draw the landmark polylines with Gaussian-profile strokes.

    Distances are computed about the vertical center line so a mirror
    symmetric landmark set renders to a mirror symmetric image.
    """
    h, w = size
    pts = np.asarray(landmarks, dtype=np.float64).copy()
    pts[:, 0] = (pts[:, 0] - 0.5) * w
    pts[:, 1] = pts[:, 1] * h
    segs = _segments(pts)
    a, b = segs[:, 0], segs[:, 1]
    d = b - a
    len2 = np.maximum(np.sum(d * d, axis=1), 1e-12)

    xs = np.arange(w) + 0.5 - w / 2.0
    ys = np.arange(h) + 0.5
    px, py = np.meshgrid(xs, ys)
    px = px.ravel()[:, None]
    py = py.ravel()[:, None]
    t = np.clip(((px - a[:, 0]) * d[:, 0] + (py - a[:, 1]) * d[:, 1]) / len2, 0.0, 1.0)
    cx = a[:, 0] + t * d[:, 0] - px
    cy = a[:, 1] + t * d[:, 1] - py
    dist2 = np.min(cx * cx + cy * cy, axis=1)
    stroke = np.exp(-dist2 / (2.0 * stroke_px * stroke_px)).reshape(h, w)
    return background + (ink - background) * stroke


def apply_aus(base: np.ndarray, intensities: np.ndarray, aus: tuple[SyntheticAU, ...] = BUILTIN_AUS) -> np.ndarray:
    pts = np.asarray(base, dtype=np.float64).copy()
    for au, s in zip(aus, intensities):
        if s == 0:
            continue
        for i, (dx, dy) in au.moves.items():
            pts[i, 0] += s * dx
            pts[i, 1] += s * dy
    return np.clip(pts, 0.0, 1.0)


def generate_synthetic(seed: int, n_subjects: int = 12, samples_per_subject: int = 40, c: int = 8,
                       k: int = 4, image_size=64, noise_std: float = 0.03, extra_au_prob: float = 0.2,
                       intensity_range: tuple[float, float] = (0.6, 1.0)) -> Dataset:
    """Deterministic synthetic AU/expression dataset.

    Every sample carries both AU labels and an expression label. Images are
    quantized to 8 bits so a manifest round trip is lossless.
    """
    if not 1 <= c <= len(BUILTIN_AUS):
        raise ValueError(f"c must be in 1..{len(BUILTIN_AUS)} built-in synthetic AUs, got {c}")
    if not 1 <= k <= len(BUILTIN_EXPRESSIONS):
        raise ValueError(f"k must be in 1..{len(BUILTIN_EXPRESSIONS)} built-in expressions, got {k}")
    if n_subjects < 1 or samples_per_subject < 1:
        raise ValueError("need at least one subject and one sample per subject")
    size = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    root = np.random.SeedSequence(seed)
    subj_seq, sample_seq = root.spawn(2)
    subj_rngs = [np.random.default_rng(s) for s in subj_seq.spawn(n_subjects)]
    sample_rngs = [np.random.default_rng(s) for s in sample_seq.spawn(n_subjects)]

    width = max(2, len(str(n_subjects)))
    n = n_subjects * samples_per_subject
    images = np.empty((n,) + size)
    landmarks = np.empty((n, N_POINTS, 2))
    au_labels = np.zeros((n, c), dtype=np.int64)
    expr_labels = np.empty(n, dtype=np.int64)
    subjects = []
    row = 0
    for s in range(n_subjects):
        srng = subj_rngs[s]
        style = SubjectStyle(subject_geometry(srng), background=srng.uniform(0.05, 0.35),
                             ink=srng.uniform(0.75, 1.0), stroke_px=srng.uniform(0.6, 1.0) * size[1] / 64.0)
        rng = sample_rngs[s]
        for _ in range(samples_per_subject):
            e = int(rng.integers(k))
            active = {a for a in BUILTIN_EXPRESSIONS[e][1] if a < c}
            for a in range(c):
                if a not in active and rng.random() < extra_au_prob:
                    if _CONFLICTS.get(a) not in active:
                        active.add(a)
            inten = np.zeros(len(BUILTIN_AUS))
            for a in sorted(active):
                inten[a] = rng.uniform(*intensity_range)
            pts = apply_aus(style.geometry, inten)
            img = render_face(pts, size, style.background, style.ink, style.stroke_px)
            img = img + rng.normal(0.0, noise_std, size=size)
            images[row] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            landmarks[row] = pts
            au_labels[row, sorted(active)] = 1
            expr_labels[row] = e
            subjects.append(f"S{s:0{width}d}")
            row += 1
    return Dataset(images, landmarks, au_labels, expr_labels, subjects, None, list(AU_NAMES[:c]), k)


def symmetric_sample(size=(64, 64), seed: int = 0, intensities=None):
    """A noise-free, exactly mirror-symmetric face (for half/full consistency checks)."""
    from .dataset import Sample

    rng = np.random.default_rng(seed)
    base = subject_geometry(rng, symmetric=True)
    inten = np.zeros(len(BUILTIN_AUS)) if intensities is None else np.asarray(intensities, dtype=float)
    pts = apply_aus(base, inten)
    # dyadic snap keeps every mirror/split coordinate operation exact
    pts = np.round(pts * 2.0**20) / 2.0**20
    for i in LEFT_SIDE:
        pts[MIRROR[i]] = (1.0 - pts[i, 0], pts[i, 1])
    pts[list(MIDLINE), 0] = 0.5
    image = render_face(pts, size)
    return Sample(image, pts, None, None, "SYM", "full")
