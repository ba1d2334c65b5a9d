"""Sine-squared angle graph over batch columns and the correlation loss built on it.

A batch of ``b`` samples turns every feature, every label and the subject
identity into a vector in R^b (a "node"). Under independence the sine
squared of the angle between two such vectors follows
``beta((b-1)/2, 1/2)``, so a small value flags a significant correlation.
The node order is always ``[features..., labels..., identity]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcomp import Tensor, as_tensor, elementwise_mul, record, sum as tsum
from .specialfn import BetaParams, inv_reg_inc_beta

__all__ = [
    "FEATURE",
    "LABEL",
    "IDENTITY",
    "NORM_EPS",
    "NodeMatrix",
    "ScreeningConfig",
    "ScreenedGraph",
    "beta_threshold",
    "sin_sq_angle",
    "pairwise_sin_sq",
    "build_sign_matrix",
    "build_adjacency",
    "bgc_loss",
    "bgc_from_batch",
    "screen_edges",
    "identity_table",
]

FEATURE, LABEL, IDENTITY = "feature", "label", "identity"
NORM_EPS = 1e-12
LAMBDA_CLAMP = 1e-12


@lru_cache(maxsize=256)
def beta_threshold(w: int, b: int, alpha: float = 0.05) -> tuple[float, float]:
    """Bonferroni level ``eta = alpha / (w(w-1)/2)`` and its beta quantile ``Q_eta``."""
    if b < 3:
        raise ValueError(f"batch size must be >= 3 for the beta null, got {b}")
    if w < 2:
        raise ValueError(f"need at least two nodes, got {w}")
    n_tests = 0.5 * w * (w - 1)
    eta = alpha / n_tests
    return eta, inv_reg_inc_beta(eta, BetaParams((b - 1) / 2.0, 0.5))


@dataclass(frozen=True)
class ScreeningConfig:
    """Threshold settings for one graph shape. Build with :meth:`for_graph`."""

    alpha: float
    m: float
    w: int
    b: int
    eta: float
    q_eta: float

    @classmethod
    def for_graph(cls, w: int, b: int, alpha: float = 0.05, m: float = 100.0) -> "ScreeningConfig":
        eta, q = beta_threshold(int(w), int(b), float(alpha))
        return cls(alpha=float(alpha), m=float(m), w=int(w), b=int(b), eta=eta, q_eta=q)


@dataclass
class NodeMatrix:
    """Batch columns for features (differentiable), labels and identity (constant)."""

    features: Tensor  # [b, p]
    labels: np.ndarray  # [b, n_lab]
    identity: np.ndarray  # [b]

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        self.identity = np.asarray(self.identity, dtype=np.float64).reshape(-1)
        b = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape[0] != b or self.identity.shape[0] != b:
            raise ValueError("features, labels and identity must share the batch dimension")

    @property
    def b(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def n_lab(self) -> int:
        return self.labels.shape[1]

    @property
    def w(self) -> int:
        return self.p + self.n_lab + 1

    @property
    def roles(self) -> list[str]:
        return [FEATURE] * self.p + [LABEL] * self.n_lab + [IDENTITY]

    @property
    def constants(self) -> np.ndarray:
        return np.column_stack([self.labels, self.identity])

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.features.data, self.constants])


def _cosines(x: np.ndarray):
    norms = np.linalg.norm(x, axis=0)
    dead = norms < NORM_EPS
    u = x / np.where(dead, 1.0, norms)
    u[:, dead] = 0.0
    return u, norms, dead


def _lambda_from_cos(cos: np.ndarray, dead: np.ndarray):
    lam = 1.0 - cos * cos
    clipped = (lam < 0.0) | (lam > 1.0)
    lam = np.clip(lam, 0.0, 1.0)
    lam[dead, :] = 1.0
    lam[:, dead] = 1.0
    np.fill_diagonal(lam, 0.0)
    return lam, clipped


def pairwise_sin_sq(features: Tensor, constants: np.ndarray | None = None) -> Tensor:
    """All pairwise sin² angles between the columns of ``[features | constants]``.

    Gradients flow into ``features`` only. Columns with norm below
    ``NORM_EPS`` get sin² = 1 against everything and no gradient; the
    diagonal is 0.
    """
    features = as_tensor(features)
    f = features.data
    if f.ndim != 2:
        raise ValueError(f"features must be [b, p], got {f.shape}")
    p = f.shape[1]
    x = f if constants is None else np.column_stack([f, np.asarray(constants, dtype=np.float64)])
    u, norms, dead = _cosines(x)
    cos = u.T @ u
    lam, clipped = _lambda_from_cos(cos, dead)

    def backward(g):
        gcos = -2.0 * cos * g
        gcos[clipped] = 0.0
        gcos[dead, :] = 0.0
        gcos[:, dead] = 0.0
        np.fill_diagonal(gcos, 0.0)
        sym = gcos + gcos.T
        gu = u @ sym[:, :p]
        uf = u[:, :p]
        gf = (gu - uf * np.sum(uf * gu, axis=0)) / np.where(dead[:p], 1.0, norms[:p])
        gf[:, dead[:p]] = 0.0
        return (gf,)

    return record(lam, (features,), backward)


def sin_sq_angle(u, v) -> Tensor:
    """sin² of the angle between two vectors, differentiable in both.

    Returns 1 (with zero gradient) if either vector is numerically zero.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"sin_sq_angle needs equal-length vectors, got {u.shape}, {v.shape}")
    ud, vd = u.data, v.data
    nu, nv = np.linalg.norm(ud), np.linalg.norm(vd)
    if nu < NORM_EPS or nv < NORM_EPS:
        return record(np.array(1.0), (u, v), lambda g: (np.zeros_like(ud), np.zeros_like(vd)))
    c = float(ud @ vd) / (nu * nv)
    raw = 1.0 - c * c
    lam = min(1.0, max(0.0, raw))

    def backward(g):
        if raw != lam:
            return np.zeros_like(ud), np.zeros_like(vd)
        # d(c)/du = v/(|u||v|) - c u/|u|^2
        dcu = vd / (nu * nv) - c * ud / (nu * nu)
        dcv = ud / (nu * nv) - c * vd / (nv * nv)
        return -2.0 * c * g * dcu, -2.0 * c * g * dcv

    return record(np.array(lam), (u, v), backward)


def build_sign_matrix(p: int, n_lab: int) -> np.ndarray:
    """Reward matrix: -1 feature/label, +1 feature/feature and feature/identity, else 0."""
    if p < 1 or n_lab < 1:
        raise ValueError(f"need p >= 1 and n_lab >= 1, got p={p}, n_lab={n_lab}")
    w = p + n_lab + 1
    s = np.zeros((w, w))
    s[:p, :p] = 1.0
    s[:p, p:p + n_lab] = -1.0
    s[p:p + n_lab, :p] = -1.0
    s[:p, -1] = 1.0
    s[-1, :p] = 1.0
    np.fill_diagonal(s, 0.0)
    return s


def _smooth_screen(lam: Tensor, q_eta: float, m: float) -> Tensor:
    """``1 - 1/(1 + exp(-m(lam - Q)))`` with a unit diagonal."""
    ld = np.clip(lam.data, LAMBDA_CLAMP, 1.0 - LAMBDA_CLAMP)
    inside = (lam.data >= LAMBDA_CLAMP) & (lam.data <= 1.0 - LAMBDA_CLAMP)
    z = m * (ld - q_eta)
    # 1 - sigmoid(z) == sigmoid(-z), evaluated stably
    a = np.where(z >= 0, np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))), 1.0 / (1.0 + np.exp(-np.abs(z))))
    np.fill_diagonal(a, 1.0)

    def backward(g):
        ga = -m * a * (1.0 - a) * g * inside
        np.fill_diagonal(ga, 0.0)
        return (ga,)

    return record(a, (lam,), backward)


def build_adjacency(nodes: NodeMatrix, cfg: ScreeningConfig | None = None) -> Tensor:
    """Smoothly screened adjacency matrix of ``nodes``; differentiable in the features."""
    if nodes.b < 3:
        raise ValueError(f"batch size must be >= 3 for the beta null, got {nodes.b}")
    if cfg is None:
        cfg = ScreeningConfig.for_graph(nodes.w, nodes.b)
    elif cfg.w != nodes.w or cfg.b != nodes.b:
        raise ValueError(f"screening config is for w={cfg.w}, b={cfg.b}; nodes have w={nodes.w}, b={nodes.b}")
    lam = pairwise_sin_sq(nodes.features, nodes.constants)
    return _smooth_screen(lam, cfg.q_eta, cfg.m)


def bgc_loss(adjacency: Tensor, sign: np.ndarray) -> Tensor:
    """Mean of ``S * A`` over all ``w²`` entries."""
    sign = np.asarray(sign, dtype=np.float64)
    if adjacency.shape != sign.shape or adjacency.ndim != 2:
        raise ValueError(f"adjacency {adjacency.shape} and sign matrix {sign.shape} must match")
    w = sign.shape[0]
    return elementwise_mul(tsum(elementwise_mul(adjacency, sign)), 1.0 / (w * w))


def bgc_from_batch(features: Tensor, labels: np.ndarray, identity: np.ndarray,
                   alpha: float = 0.05, m: float = 100.0) -> Tensor:
    """Correlation loss for one task batch."""
    nodes = NodeMatrix(features, labels, identity)
    cfg = ScreeningConfig.for_graph(nodes.w, nodes.b, alpha, m)
    sign = _cached_sign(nodes.p, nodes.n_lab)
    return bgc_loss(build_adjacency(nodes, cfg), sign)


@lru_cache(maxsize=16)
def _cached_sign(p: int, n_lab: int) -> np.ndarray:
    s = build_sign_matrix(p, n_lab)
    s.setflags(write=False)
    return s


@dataclass
class ScreenedGraph:
    """Hard-thresholded edge set with the statistics that produced it."""

    adjacency: np.ndarray  # bool [w, w]
    lam: np.ndarray  # [w, w]
    q_eta: float
    eta: float
    alpha: float
    names: list[str] = field(default_factory=list)
    roles: list[str] = field(default_factory=list)

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(i.tolist(), j.tolist()))

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "eta": self.eta,
            "q_eta": self.q_eta,
            "nodes": [{"name": n, "role": r} for n, r in zip(self.names, self.roles)],
            "edges": [{"source": self.names[i], "target": self.names[j], "lambda": float(self.lam[i, j])}
                      for i, j in self.edges],
        }

    def to_dot(self) -> str:
        shapes = {FEATURE: "ellipse", LABEL: "box", IDENTITY: "diamond"}
        lines = ["graph screened {"]
        for n, r in zip(self.names, self.roles):
            lines.append(f'  "{n}" [role="{r}", shape={shapes.get(r, "ellipse")}];')
        for i, j in self.edges:
            lam = self.lam[i, j]
            lines.append(f'  "{self.names[i]}" -- "{self.names[j]}" [lambda={lam:.6g}, label="{lam:.3g}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def save(self, json_path, dot_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2) + "\n")
        if dot_path is not None:
            Path(dot_path).write_text(self.to_dot())


def screen_edges(nodes, alpha: float = 0.05, names: Sequence[str] | None = None,
                 roles: Sequence[str] | None = None) -> ScreenedGraph:
    """Hard Bonferroni screening: an edge wherever sin² < Q_eta.

    ``nodes`` is a :class:`NodeMatrix` or a plain ``[b, w]`` array of columns.
    """
    if isinstance(nodes, NodeMatrix):
        x = nodes.as_array()
        roles = list(roles or nodes.roles)
    else:
        x = np.asarray(nodes, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"node columns must be a [b, w] array, got {x.shape}")
        roles = list(roles or [FEATURE] * x.shape[1])
    b, w = x.shape
    if b < 3:
        raise ValueError(f"batch size must be >= 3 for the beta null, got {b}")
    names = list(names or _default_names(roles))
    if w < 2:
        return ScreenedGraph(np.zeros((w, w), dtype=bool), np.zeros((w, w)), float("nan"),
                             float("nan"), alpha, names, roles)
    eta, q = beta_threshold(w, b, alpha)
    u, _, dead = _cosines(x)
    lam, _ = _lambda_from_cos(u.T @ u, dead)
    adj = lam < q
    np.fill_diagonal(adj, False)
    return ScreenedGraph(adj, lam, q, eta, alpha, names, roles)


def _default_names(roles: Sequence[str]) -> list[str]:
    counts: dict[str, int] = {}
    names = []
    for r in roles:
        i = counts.get(r, 0)
        counts[r] = i + 1
        names.append("g" if r == IDENTITY else f"{r[0]}{i}")
    return names


def identity_table(subject_ids: Sequence[str], rng: np.random.Generator) -> dict[str, float]:
    """One pseudorandom scalar per subject, drawn in sorted-id order.

    Values are uniform on (0, 1]: positive like raw subject numbers, but
    without their ordering.
    """
    uniq = sorted(set(subject_ids))
    vals = 1.0 - rng.random(len(uniq))
    return dict(zip(uniq, vals.tolist()))
