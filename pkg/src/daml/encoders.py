"""Heterogeneous encoder pair: a small IBN-style CNN teacher and a patch-attention student."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import InvalidConfig, ShapeMismatch

CONVOLUTIONAL = "convolutional"
PATCH_ATTENTION = "patch_attention"

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5


@dataclass
class EncoderConfig:
    kind: str
    feature_dim: int
    depth: int = 4
    width: int = 16
    patch_size: int = 8
    kernel_size: int = 3
    heads: int = 4
    image_size: tuple = (256, 128)
    strides: tuple = field(default=None)

    def __post_init__(self):
        if self.kind not in (CONVOLUTIONAL, PATCH_ATTENTION):
            raise InvalidConfig(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim <= 0 or self.width <= 0 or self.depth < 0:
            raise InvalidConfig("feature_dim and width must be positive, depth non-negative")
        self.image_size = tuple(self.image_size)
        if self.kind == PATCH_ATTENTION:
            h, w = self.image_size
            if h % self.patch_size or w % self.patch_size:
                raise InvalidConfig(f"image size {self.image_size} not divisible by patch {self.patch_size}")
            if self.width % self.heads:
                raise InvalidConfig("attention width must be divisible by heads")
        if self.strides is None:
            self.strides = tuple(1 if i == 0 else 2 for i in range(self.depth))
        self.strides = tuple(self.strides)
        if len(self.strides) != self.depth:
            raise InvalidConfig("one stride per convolutional stage is required")

    def to_dict(self):
        return asdict(self)


def teacher_config(image_size=(256, 128), feature_dim=64, **kw):
    return EncoderConfig(CONVOLUTIONAL, feature_dim, image_size=image_size,
                         **{"depth": 4, "width": 16, **kw})


def student_config(image_size=(256, 128), feature_dim=48, **kw):
    return EncoderConfig(PATCH_ATTENTION, feature_dim, image_size=image_size,
                         **{"depth": 4, "width": 48, "patch_size": 8, **kw})


def check_heterogeneous(teacher: EncoderConfig, student: EncoderConfig):
    if teacher.feature_dim == student.feature_dim:
        raise InvalidConfig(
            f"teacher and student feature dims must differ (both {teacher.feature_dim})")


class IBN(nn.Module):
    """Instance norm on the first half of the channels, batch norm on the rest."""

    def __init__(self, channels):
        super().__init__()
        self.half = channels // 2
        self.IN = nn.InstanceNorm2d(self.half, affine=True)
        self.BN = nn.BatchNorm2d(channels - self.half)

    def forward(self, x):
        a, b = torch.split(x, [self.half, x.size(1) - self.half], dim=1)
        return torch.cat([self.IN(a.contiguous()), self.BN(b.contiguous())], dim=1)


class ConvEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        layers = []
        in_ch = 3
        for i in range(cfg.depth):
            out_ch = cfg.width * 2 ** min(i, 2)
            norm = IBN(out_ch) if i < 2 else nn.BatchNorm2d(out_ch)
            layers += [nn.Conv2d(in_ch, out_ch, cfg.kernel_size, stride=cfg.strides[i],
                                 padding=cfg.kernel_size // 2, bias=False),
                       norm, nn.ReLU(inplace=True)]
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed = nn.Linear(in_ch, cfg.feature_dim)
        self.neck = nn.BatchNorm1d(cfg.feature_dim)

    def forward(self, x):
        return self.neck(self.embed(self.pool(self.body(x)).flatten(1)))


class Block(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PatchAttentionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        h, w = cfg.image_size
        n_patches = (h // cfg.patch_size) * (w // cfg.patch_size)
        self.patch = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos = nn.Parameter(0.02 * torch.randn(1, n_patches + 1, cfg.width))
        self.blocks = nn.Sequential(*[Block(cfg.width, cfg.heads) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.width)
        self.embed = nn.Linear(cfg.width, cfg.feature_dim)
        self.neck = nn.BatchNorm1d(cfg.feature_dim)

    def forward(self, x):
        tokens = self.patch(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.size(0), -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos
        tokens = self.norm(self.blocks(tokens))
        return self.neck(self.embed(tokens[:, 0]))


class Encoder(nn.Module):
    """Backbone plus the feature-extraction contract shared by both kinds."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.config = cfg
        backbone = ConvEncoder if cfg.kind == CONVOLUTIONAL else PatchAttentionEncoder
        self.backbone = backbone(cfg)

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def check_input(self, x):
        h, w = self.config.image_size
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (h, w):
            raise ShapeMismatch(f"expected (N, 3, {h}, {w}) input, got {tuple(x.shape)}")

    def forward(self, x):
        self.check_input(x)
        return self.backbone(x)


def build_encoder(cfg: EncoderConfig, seed=None) -> Encoder:
    if seed is None:
        return Encoder(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Encoder(cfg)


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 (N, H, W, 3) -> normalized float (N, 3, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    x = x.permute(0, 3, 1, 2) / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


@torch.no_grad()
def extract_features(encoder: Encoder, images, batch_size=256) -> np.ndarray:
    """Eval-mode features as a float64 (N, feature_dim) array.

    ``images`` may be a uint8 (N, H, W, 3) array or an already normalized tensor.
    """
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    if isinstance(images, np.ndarray):
        h, w = encoder.config.image_size
        if images.ndim != 4 or images.shape[1:] != (h, w, 3):
            raise ShapeMismatch(f"expected (N, {h}, {w}, 3) images, got {images.shape}")
        x = to_tensor(images, dtype)
    else:
        x = images.to(dtype)
    try:
        out = [encoder(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    finally:
        encoder.train(was_training)
    if not out:
        return np.zeros((0, encoder.feature_dim))
    return torch.cat(out).double().numpy()


def receptive_field_check(cfg: EncoderConfig) -> dict:
    """Per-layer receptive field of a conv stack, or 'global' for attention."""
    if cfg.kind == PATCH_ATTENTION:
        return {"kind": cfg.kind, "layers": [{"layer": i + 1, "receptive_field": "global"}
                                            for i in range(cfg.depth)],
                "final": "global" if cfg.depth >= 1 else (cfg.patch_size, cfg.patch_size)}
    rf, jump = 1, 1
    layers = []
    for i in range(cfg.depth):
        rf += (cfg.kernel_size - 1) * jump
        jump *= cfg.strides[i]
        layers.append({"layer": i + 1, "receptive_field": (rf, rf)})
    return {"kind": cfg.kind, "layers": layers, "final": (rf, rf)}


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.pt holds tensors, <prefix>.json the readable sidecar

def save_checkpoint(prefix, tensors: dict, sidecar: dict):
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    torch.save(tensors, prefix + ".pt")
    with open(prefix + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True, default=_jsonable)


def load_checkpoint(prefix):
    if prefix.endswith(".pt") or prefix.endswith(".json"):
        prefix = prefix.rsplit(".", 1)[0]
    tensors = torch.load(prefix + ".pt", weights_only=False)
    with open(prefix + ".json") as fh:
        sidecar = json.load(fh)
    return tensors, sidecar


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
