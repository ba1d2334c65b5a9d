"""Face alignment, landmark normalization and half-face derivation.

Continuous pixel coordinates put the center of pixel ``(row i, col j)`` at
``(x, y) = (j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import numpy as np

from .dataset import Sample
from .landmarks import HALF_LEFT_INDICES, HALF_RIGHT_INDICES, N_POINTS

# canonical eye placement as fractions of the output size
LEFT_EYE_POS = (0.30, 0.35)
RIGHT_EYE_POS = (0.70, 0.35)


def eye_targets(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    return (np.array([LEFT_EYE_POS[0] * w, LEFT_EYE_POS[1] * h]),
            np.array([RIGHT_EYE_POS[0] * w, RIGHT_EYE_POS[1] * h]))


def similarity_from_eyes(left_eye, right_eye, size: tuple[int, int] = (256, 256)) -> np.ndarray:
    """2x3 matrix mapping source pixel coords to aligned output coords."""
    src_l = np.asarray(left_eye, dtype=np.float64)
    src_r = np.asarray(right_eye, dtype=np.float64)
    d_src = src_r - src_l
    if np.hypot(*d_src) < 1e-9:
        raise ValueError("eye points coincide; alignment is undefined")
    dst_l, dst_r = eye_targets(size)
    d_dst = dst_r - dst_l
    # complex-number form: z -> a z + t with a = d_dst / d_src
    a = complex(*d_dst) / complex(*d_src)
    rot = np.array([[a.real, -a.imag], [a.imag, a.real]])
    t = dst_l - rot @ src_l
    return np.column_stack([rot, t])


def apply_transform(matrix: np.ndarray, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return pts @ matrix[:, :2].T + matrix[:, 2]


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample at continuous coordinates; anything outside the frame reads as 0."""
    h, w = image.shape
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = image
    # shift to index space of the padded array, pixel centers at integers
    fx = np.clip(xs - 0.5 + 1.0, 0.0, w + 1.0)
    fy = np.clip(ys - 0.5 + 1.0, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(fx).astype(int), w)
    y0 = np.minimum(np.floor(fy).astype(int), h)
    ax = fx - x0
    ay = fy - y0
    top = padded[y0, x0] * (1 - ax) + padded[y0, x0 + 1] * ax
    bot = padded[y0 + 1, x0] * (1 - ax) + padded[y0 + 1, x0 + 1] * ax
    return top * (1 - ay) + bot * ay


def _to_unit_range(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3:
        # RGB(A) -> luminance
        img = img[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
        return np.clip(img / (255.0 if np.asarray(image).dtype.kind in "ui" else 1.0), 0.0, 1.0)
    if img.dtype.kind in "ui":
        return img.astype(np.float64) / np.iinfo(img.dtype).max
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def align_face(raw_image, left_eye, right_eye, size: tuple[int, int] = (256, 256)) -> np.ndarray:
    """Rotate, scale and translate so the eyes land level at the canonical spots.

    Integer images are scaled by their dtype maximum; float images are taken
    to be in [0, 1] already and clipped.
    """
    img = _to_unit_range(raw_image)
    m = similarity_from_eyes(left_eye, right_eye, size)
    inv = np.linalg.inv(np.vstack([m, [0.0, 0.0, 1.0]]))[:2]
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    src = apply_transform(inv, np.column_stack([xs.ravel(), ys.ravel()]))
    out = bilinear_sample(img, src[:, 0], src[:, 1]).reshape(h, w)
    return np.clip(out, 0.0, 1.0)


def normalize_landmarks(points, width: float, height: float) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    pts = np.asarray(points, dtype=np.float64).copy()
    pts[:, 0] /= width
    pts[:, 1] /= height
    return np.clip(pts, 0.0, 1.0)


def split_half(sample: Sample, label_map: dict[str, list[int]] | None = None) -> tuple[Sample, Sample]:
    """Split a full-face sample into left and (mirrored) right halves.

    Both halves come out in the same orientation, with 29 same-side points
    followed by the 10 midline points, x renormalized to the half frame.
    ``label_map`` selects which AU columns each side keeps; without it both
    halves keep the full label vector.
    """
    if sample.side != "full":
        raise ValueError(f"split_half needs a full-face sample, got side={sample.side!r}")
    if sample.landmarks.shape[0] != N_POINTS:
        raise ValueError(f"split_half needs {N_POINTS} landmarks, got {sample.landmarks.shape[0]}")
    h, w = sample.image.shape
    if w % 2:
        raise ValueError(f"image width must be even to split, got {w}")
    half = w // 2
    lm = sample.landmarks

    left_img = sample.image[:, :half].copy()
    right_img = sample.image[:, half:][:, ::-1].copy()

    left_pts = lm[list(HALF_LEFT_INDICES)].copy()
    left_pts[:, 0] = left_pts[:, 0] * 2.0
    right_pts = lm[list(HALF_RIGHT_INDICES)].copy()
    right_pts[:, 0] = (1.0 - right_pts[:, 0]) * 2.0

    def labels_for(side: str):
        if sample.au_labels is None:
            return None
        if label_map is None:
            return sample.au_labels.copy()
        return sample.au_labels[list(label_map[side])].copy()

    common = dict(expr_label=sample.expr_label, subject_id=sample.subject_id)
    left = Sample(left_img, np.clip(left_pts, 0.0, 1.0), labels_for("left"), side="left", **common)
    right = Sample(right_img, np.clip(right_pts, 0.0, 1.0), labels_for("right"), side="right", **common)
    return left, right


def mirror_sample(sample: Sample) -> Sample:
    """Horizontal flip of a full-face sample (labels untouched)."""
    from .landmarks import mirror_points

    return Sample(sample.image[:, ::-1].copy(), mirror_points(sample.landmarks),
                  None if sample.au_labels is None else sample.au_labels.copy(),
                  sample.expr_label, sample.subject_id, sample.side)
