"""The 68-point facial annotation scheme: a symmetric template and its index sets.

Sides are image sides: "left" means the half with smaller x, which shows
the subject's right eye (points 36-41).
"""

from __future__ import annotations

import numpy as np

N_POINTS = 68

# bilateral partner of every point; midline points map to themselves
MIRROR = np.array(
    [16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,  # jaw
     26, 25, 24, 23, 22, 21, 20, 19, 18, 17,  # brows
     27, 28, 29, 30,  # nose bridge
     35, 34, 33, 32, 31,  # nose base
     45, 44, 43, 42, 47, 46,  # left-image eye
     39, 38, 37, 36, 41, 40,  # right-image eye
     54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55,  # outer lip
     64, 63, 62, 61, 60, 67, 66, 65],  # inner lip
    dtype=int)

MIDLINE = (8, 27, 28, 29, 30, 33, 51, 57, 62, 66)
LEFT_SIDE = (0, 1, 2, 3, 4, 5, 6, 7, 17, 18, 19, 20, 21, 31, 32,
             36, 37, 38, 39, 40, 41, 48, 49, 50, 58, 59, 60, 61, 67)
RIGHT_SIDE = tuple(int(MIRROR[i]) for i in LEFT_SIDE)

# half-face point order: same-side points then the midline
HALF_LEFT_INDICES = LEFT_SIDE + MIDLINE
HALF_RIGHT_INDICES = RIGHT_SIDE + MIDLINE
N_HALF_POINTS = len(HALF_LEFT_INDICES)

GROUPS = {
    "jaw": tuple(range(0, 17)),
    "brow_left": tuple(range(17, 22)),
    "brow_right": tuple(range(22, 27)),
    "nose_bridge": tuple(range(27, 31)),
    "nose_base": tuple(range(31, 36)),
    "eye_left": tuple(range(36, 42)),
    "eye_right": tuple(range(42, 48)),
    "lip_outer": tuple(range(48, 60)),
    "lip_inner": tuple(range(60, 68)),
}
CLOSED_GROUPS = {"eye_left", "eye_right", "lip_outer", "lip_inner"}

# left-image-side points and midline, as offsets from the vertical center line
_HALF_TEMPLATE = {
    **{i: (-0.38 * np.cos(np.pi * i / 16), 0.40 + 0.50 * np.sin(np.pi * i / 16)) for i in range(9)},
    17: (-0.32, 0.26), 18: (-0.26, 0.225), 19: (-0.19, 0.215), 20: (-0.12, 0.225), 21: (-0.06, 0.25),
    27: (0.0, 0.36), 28: (0.0, 0.42), 29: (0.0, 0.48), 30: (0.0, 0.54),
    31: (-0.06, 0.60), 32: (-0.03, 0.615), 33: (0.0, 0.62),
    36: (-0.28, 0.35), 37: (-0.23, 0.325), 38: (-0.17, 0.325), 39: (-0.12, 0.35),
    40: (-0.17, 0.375), 41: (-0.23, 0.375),
    48: (-0.14, 0.75), 49: (-0.09, 0.72), 50: (-0.04, 0.71), 51: (0.0, 0.715),
    57: (0.0, 0.815), 58: (-0.04, 0.81), 59: (-0.09, 0.79),
    60: (-0.11, 0.75), 61: (-0.05, 0.74), 62: (0.0, 0.74), 66: (0.0, 0.76), 67: (-0.05, 0.76),
}
_HALF_TEMPLATE[8] = (0.0, 0.90)


def template_offsets() -> np.ndarray:
    """Template as ``[68, 2]`` with x measured from the center line (exactly mirror-symmetric)."""
    pts = np.zeros((N_POINTS, 2))
    for i, (u, y) in _HALF_TEMPLATE.items():
        pts[i] = (u, y)
        pts[MIRROR[i]] = (-u, y)
    return pts


def template() -> np.ndarray:
    """Canonical symmetric face in normalized ``[0, 1]`` image coordinates."""
    pts = template_offsets()
    pts[:, 0] += 0.5
    return pts


def mirror_points(points: np.ndarray) -> np.ndarray:
    """Reflect normalized landmarks horizontally and relabel bilateral partners."""
    pts = np.asarray(points, dtype=np.float64)
    out = pts[MIRROR].copy()
    out[:, 0] = 1.0 - out[:, 0]
    return out
