"""Two-branch backbone with AU (sigmoid) and expression (softmax) heads.

Image branch: three conv3x3 -> ReLU -> maxpool2 blocks, then a dense layer
with ReLU and dropout. Landmark branch: a kernel-size-1 convolution to 16
maps with ReLU, flattened into a dense layer with ReLU and dropout. The two
branch outputs are concatenated into the shared feature vector Z. One
parameter set serves both task heads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcomp as dc
from .diffcomp import Tensor

__all__ = [
    "NetworkConfig",
    "BeCoMENetParams",
    "build",
    "forward_features",
    "forward_au",
    "forward_expr",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"BCMNETCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    image_h: int = 256
    image_w: int = 256
    l: int = 68  # noqa: E741 - landmark count
    c: int = 16
    k: int = 7
    dropout_p: float = 0.5
    conv_channels: tuple[int, ...] = (16, 32, 64)
    fc_units: int = 512
    lmk_channels: int = 16

    def __post_init__(self):
        dims = dict(image_h=self.image_h, image_w=self.image_w, l=self.l, c=self.c, k=self.k,
                    fc_units=self.fc_units, lmk_channels=self.lmk_channels)
        for name, v in dims.items():
            if int(v) <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if any(ch <= 0 for ch in self.conv_channels) or not self.conv_channels:
            raise ValueError("conv_channels must be non-empty and positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        h, w = self.image_h, self.image_w
        for _ in self.conv_channels:
            if h < 2 or w < 2:
                raise ValueError("image too small for the pooling stack")
            h, w = h // 2, w // 2
        object.__setattr__(self, "conv_channels", tuple(int(ch) for ch in self.conv_channels))

    @classmethod
    def variant(cls, name: str, c: int, k: int, scale: int = 1, **kw) -> "NetworkConfig":
        """Full-face ``F`` (256x256, 68 points) or half-face ``H`` (256x128, 39 points).

        ``scale`` divides the image size, e.g. ``scale=4`` gives 64x64 for F.
        """
        name = name.upper()
        if name == "F":
            return cls(image_h=256 // scale, image_w=256 // scale, l=68, c=c, k=k, **kw)
        if name == "H":
            return cls(image_h=256 // scale, image_w=128 // scale, l=39, c=c, k=k, **kw)
        raise ValueError(f"unknown variant {name!r}; expected 'F' or 'H'")

    @property
    def p(self) -> int:
        return 2 * self.fc_units

    @property
    def image_flat(self) -> int:
        h, w = self.image_h, self.image_w
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        return self.conv_channels[-1] * h * w

    @property
    def landmark_flat(self) -> int:
        return self.l * self.lmk_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (16, 32, 64)))
        return cls(**d)


@dataclass
class BeCoMENetParams:
    config: NetworkConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "BeCoMENetParams":
        return BeCoMENetParams(self.config, {n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                                             for n, t in self.tensors.items()})

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


def _shapes(cfg: NetworkConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in); biases have fan_in 0."""
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels):
        shapes[f"img_conv{i}_w"] = ((c_out, c_in, 3, 3), c_in * 9)
        shapes[f"img_conv{i}_b"] = ((c_out,), 0)
        c_in = c_out
    shapes["img_fc_w"] = ((cfg.fc_units, cfg.image_flat), cfg.image_flat)
    shapes["img_fc_b"] = ((cfg.fc_units,), 0)
    shapes["lmk_conv_w"] = ((cfg.lmk_channels, 2), 2)
    shapes["lmk_conv_b"] = ((cfg.lmk_channels,), 0)
    shapes["lmk_fc_w"] = ((cfg.fc_units, cfg.landmark_flat), cfg.landmark_flat)
    shapes["lmk_fc_b"] = ((cfg.fc_units,), 0)
    shapes["au_w"] = ((cfg.c, cfg.p), cfg.p)
    shapes["au_b"] = ((cfg.c,), 0)
    shapes["expr_w"] = ((cfg.k, cfg.p), cfg.p)
    shapes["expr_b"] = ((cfg.k,), 0)
    return shapes


def build(config: NetworkConfig, seed: int | np.random.Generator = 0) -> BeCoMENetParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, (shape, fan_in) in _shapes(config).items():
        if fan_in == 0:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return BeCoMENetParams(config, tensors)


def _as_batch(images, landmarks, cfg: NetworkConfig):
    img = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    lmk = landmarks.data if isinstance(landmarks, Tensor) else np.asarray(landmarks, dtype=np.float64)
    single = lmk.ndim == 2
    if single:
        img, lmk = img[None], lmk[None]
    if img.ndim == 3:
        img = img[:, None]
    if img.shape[1:] != (1, cfg.image_h, cfg.image_w):
        raise ValueError(f"image shape {img.shape[-2:]} does not match config {(cfg.image_h, cfg.image_w)}")
    if lmk.shape[1:] != (cfg.l, 2):
        raise ValueError(f"landmarks shape {lmk.shape[1:]} does not match config {(cfg.l, 2)}")
    if img.shape[0] != lmk.shape[0]:
        raise ValueError("images and landmarks have different batch sizes")
    return Tensor(img), Tensor(lmk), single


def forward_features(params: BeCoMENetParams, images, landmarks, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Shared feature vector Z, ``[p]`` for one sample or ``[N, p]`` for a batch."""
    cfg = params.config
    img, lmk, single = _as_batch(images, landmarks, cfg)
    n = img.shape[0]
    h = img
    for i in range(len(cfg.conv_channels)):
        h = dc.maxpool2(dc.relu(dc.conv2d(h, params[f"img_conv{i}_w"], params[f"img_conv{i}_b"])))
    h = dc.reshape(h, (n, -1))
    h = dc.relu(dc.dense(h, params["img_fc_w"], params["img_fc_b"]))
    h = dc.dropout(h, cfg.dropout_p, training, rng)

    g = dc.relu(dc.pointwise_conv1d(lmk, params["lmk_conv_w"], params["lmk_conv_b"]))
    g = dc.reshape(g, (n, -1))
    g = dc.relu(dc.dense(g, params["lmk_fc_w"], params["lmk_fc_b"]))
    g = dc.dropout(g, cfg.dropout_p, training, rng)

    z = dc.concat([h, g], axis=-1)
    return dc.reshape(z, (cfg.p,)) if single else z


def forward_au(params: BeCoMENetParams, z: Tensor) -> Tensor:
    """Per-AU presence probabilities."""
    return dc.sigmoid(dc.dense(z, params["au_w"], params["au_b"]))


def forward_expr(params: BeCoMENetParams, z: Tensor) -> Tensor:
    """Expression class probabilities."""
    return dc.softmax(dc.dense(z, params["expr_w"], params["expr_b"]))


# Checkpoint layout: magic | u32 version | u64 header length | JSON header | payloads.
# Payloads are little-endian float64 in header order.

def save_checkpoint(params: BeCoMENetParams, path, extra: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, t in params.tensors.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size * 8
    header = {"format_version": CHECKPOINT_VERSION, "config": params.config.to_dict(),
              "tensors": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, expect: NetworkConfig | None = None) -> BeCoMENetParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    config = NetworkConfig.from_dict(header["config"])
    if expect is not None and expect != config:
        raise ValueError(f"{path}: checkpoint config {config} does not match expected {expect}")
    base = 20 + hlen
    expected = _shapes(config)
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if e["name"] not in expected or expected[e["name"]][0] != shape:
            raise ValueError(f"{path}: tensor {e['name']} shape {shape} inconsistent with config")
        count = int(np.prod(shape))
        start = base + e["offset"]
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[e["name"]] = Tensor(data.astype(np.float64), requires_grad=True, name=e["name"])
    if set(tensors) != set(expected):
        raise ValueError(f"{path}: missing tensors {sorted(set(expected) - set(tensors))}")
    return BeCoMENetParams(config, {n: tensors[n] for n in expected})


def read_checkpoint_extra(path) -> dict:
    raw = Path(path).read_bytes()
    _, hlen = struct.unpack("<IQ", raw[8:20])
    return json.loads(raw[20:20 + hlen]).get("extra", {})
