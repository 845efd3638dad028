"""Desk-scale encoder architectures and the shared classifier-head design.

Two encoder families with deliberately contrasting inductive biases:

* ``AttnEncoder`` - patch embedding + learned positions + pre-norm
  transformer blocks (multi-head self-attention, 2-layer feed-forward),
  mean-pooled over tokens.  The global-context branch.
* ``ConvEncoder`` - stacked (3x3 conv -> relu -> 2x2 average pool) stages
  with a global-average-pool + linear head.  The local-context branch.

Both map images to the same d-dimensional feature space, so classifier
heads are interchangeable across encoders - the find/conquer stages rely
on feeding one encoder's features through both heads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class ConfigError(ValueError):
    """Invalid geometry or configuration value."""


ARCHS = ("attn", "conv")


@dataclass(frozen=True)
class Geometry:
    """Shapes shared by the branches and the dataset they train on."""

    image_side: int = 16
    channels: int = 1
    classes: int = 5
    feat_dim: int = 32
    patch: int = 4
    blocks: int = 2
    heads: int = 2
    ffn_mult: int = 2
    conv_channels: tuple[int, ...] = (8, 16)
    head_hidden: int = 32

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.image_side % self.patch:
            raise ConfigError(f"patch size {self.patch} does not divide image side {self.image_side}")
        if self.feat_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide feature dim {self.feat_dim}")
        side = self.image_side
        for _ in self.conv_channels:
            if side % 2:
                raise ConfigError(f"conv stages need even extents, hit {side}")
            side //= 2
        if side < 1:
            raise ConfigError("conv stages exhaust the spatial extent")

    @property
    def tokens(self) -> int:
        return (self.image_side // self.patch) ** 2


def _uniform_fanin(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AttnEncoder:
    """Token-attention encoder: global receptive field from the first block."""

    def __init__(self, geom: Geometry, rng: np.random.Generator, prefix: str):
        self.geom = geom
        self.params: list[Parameter] = []
        d, p, c = geom.feat_dim, geom.patch, geom.channels
        ppc = p * p * c
        f = geom.ffn_mult * d

        def par(name, data):
            param = Parameter(f"{prefix}.{name}", data)
            self.params.append(param)
            return param

        self.patch_w = par("patch.w", _uniform_fanin(rng, (ppc, d), ppc))
        self.patch_b = par("patch.b", np.zeros(d))
        self.pos = par("pos", 0.02 * rng.standard_normal((geom.tokens, d)))
        self.block_params = []
        for i in range(geom.blocks):
            blk = {
                "ln1_g": par(f"block{i}.ln1.g", np.ones(d)),
                "ln1_b": par(f"block{i}.ln1.b", np.zeros(d)),
                "wq": par(f"block{i}.attn.wq", _uniform_fanin(rng, (d, d), d)),
                "bq": par(f"block{i}.attn.bq", np.zeros(d)),
                "wk": par(f"block{i}.attn.wk", _uniform_fanin(rng, (d, d), d)),
                "bk": par(f"block{i}.attn.bk", np.zeros(d)),
                "wv": par(f"block{i}.attn.wv", _uniform_fanin(rng, (d, d), d)),
                "bv": par(f"block{i}.attn.bv", np.zeros(d)),
                "wo": par(f"block{i}.attn.wo", _uniform_fanin(rng, (d, d), d)),
                "bo": par(f"block{i}.attn.bo", np.zeros(d)),
                "ln2_g": par(f"block{i}.ln2.g", np.ones(d)),
                "ln2_b": par(f"block{i}.ln2.b", np.zeros(d)),
                "w1": par(f"block{i}.ffn.w1", _uniform_fanin(rng, (d, f), d)),
                "b1": par(f"block{i}.ffn.b1", np.zeros(f)),
                "w2": par(f"block{i}.ffn.w2", _uniform_fanin(rng, (f, d), f)),
                "b2": par(f"block{i}.ffn.b2", np.zeros(d)),
            }
            self.block_params.append(blk)

    def _attention(self, x: Tensor, blk: dict) -> Tensor:
        geom = self.geom
        n, t, d = x.shape
        heads = geom.heads
        hd = d // heads

        def split(w, b):
            y = ad.add(ad.matmul(x, w.tensor), b.tensor)
            y = ad.reshape(y, (n, t, heads, hd))
            return ad.transpose(y, (0, 2, 1, 3))            # [n, heads, t, hd]

        q = split(blk["wq"], blk["bq"])
        k = split(blk["wk"], blk["bk"])
        v = split(blk["wv"], blk["bv"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
        attn = ad.softmax(scores)
        mixed = ad.matmul(attn, v)                          # [n, heads, t, hd]
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, t, d))
        return ad.add(ad.matmul(mixed, blk["wo"].tensor), blk["bo"].tensor)

    def forward(self, x: Tensor) -> Tensor:
        geom = self.geom
        n = x.shape[0]
        if x.shape[1:] != (geom.channels, geom.image_side, geom.image_side):
            raise ad.ShapeError(f"encoder configured for "
                                f"{(geom.channels, geom.image_side, geom.image_side)}, got {x.shape}")
        tok = ad.patches(x, geom.patch)
        tok = ad.add(ad.add(ad.matmul(tok, self.patch_w.tensor), self.patch_b.tensor),
                     self.pos.tensor)
        for blk in self.block_params:
            normed = ad.layernorm(tok, blk["ln1_g"].tensor, blk["ln1_b"].tensor)
            tok = ad.add(tok, self._attention(normed, blk))
            normed = ad.layernorm(tok, blk["ln2_g"].tensor, blk["ln2_b"].tensor)
            h = ad.gelu(ad.add(ad.matmul(normed, blk["w1"].tensor), blk["b1"].tensor))
            h = ad.add(ad.matmul(h, blk["w2"].tensor), blk["b2"].tensor)
            tok = ad.add(tok, h)
        return ad.mean(tok, axis=1)


class ConvEncoder:
    """Convolutional encoder: local filters, spatial downsampling, global pool."""

    def __init__(self, geom: Geometry, rng: np.random.Generator, prefix: str):
        self.geom = geom
        self.params: list[Parameter] = []
        self.stage_params = []

        def par(name, data):
            param = Parameter(f"{prefix}.{name}", data)
            self.params.append(param)
            return param

        c_in = geom.channels
        for i, c_out in enumerate(geom.conv_channels):
            w = par(f"stage{i}.w", _uniform_fanin(rng, (c_out, c_in, 3, 3), c_in * 9))
            b = par(f"stage{i}.b", np.zeros(c_out))
            self.stage_params.append((w, b))
            c_in = c_out
        self.proj_w = par("proj.w", _uniform_fanin(rng, (c_in, geom.feat_dim), c_in))
        self.proj_b = par("proj.b", np.zeros(geom.feat_dim))

    def forward(self, x: Tensor) -> Tensor:
        geom = self.geom
        if x.shape[1:] != (geom.channels, geom.image_side, geom.image_side):
            raise ad.ShapeError(f"encoder configured for "
                                f"{(geom.channels, geom.image_side, geom.image_side)}, got {x.shape}")
        h = x
        for w, b in self.stage_params:
            h = ad.avg_pool2(ad.relu(ad.conv2d(h, w.tensor, b.tensor, stride=1, pad=1)))
        pooled = ad.mean(h, axis=(2, 3))                    # [n, channels]
        return ad.add(ad.matmul(pooled, self.proj_w.tensor), self.proj_b.tensor)


class ClassifierHead:
    """Two fully-connected layers; callers apply softmax to the logits."""

    def __init__(self, geom: Geometry, rng: np.random.Generator, prefix: str):
        self.geom = geom
        d, h, k = geom.feat_dim, geom.head_hidden, geom.classes
        self.fc1_w = Parameter(f"{prefix}.fc1.w", _uniform_fanin(rng, (d, h), d))
        self.fc1_b = Parameter(f"{prefix}.fc1.b", np.zeros(h))
        self.fc2_w = Parameter(f"{prefix}.fc2.w", _uniform_fanin(rng, (h, k), h))
        self.fc2_b = Parameter(f"{prefix}.fc2.b", np.zeros(k))
        self.params = [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def forward(self, feat: Tensor) -> Tensor:
        if feat.shape[-1] != self.geom.feat_dim:
            raise ad.ShapeError(f"head expects feature dim {self.geom.feat_dim}, got {feat.shape}")
        h = ad.relu(ad.add(ad.matmul(feat, self.fc1_w.tensor), self.fc1_b.tensor))
        return ad.add(ad.matmul(h, self.fc2_w.tensor), self.fc2_b.tensor)


@dataclass
class Branch:
    """One encoder plus one classifier head with named parameter groups."""

    arch: str
    geometry: Geometry
    encoder: AttnEncoder | ConvEncoder
    head: ClassifierHead

    @property
    def encoder_params(self) -> list[Parameter]:
        return list(self.encoder.params)

    @property
    def head_params(self) -> list[Parameter]:
        return list(self.head.params)

    @property
    def params(self) -> list[Parameter]:
        return self.encoder_params + self.head_params

    @property
    def param_groups(self) -> dict[str, list[Parameter]]:
        return {"encoder": self.encoder_params, "head": self.head_params}

    def features(self, x: Tensor) -> Tensor:
        return self.encoder.forward(x)

    def logits(self, x: Tensor) -> Tensor:
        return self.head.forward(self.features(x))


def forward_features(branch: Branch, x: Tensor) -> Tensor:
    return branch.features(x)


def forward_logits(head: ClassifierHead, feat: Tensor) -> Tensor:
    return head.forward(feat)


def make_branch(arch: str, geometry: Geometry, seed: int,
                enc_prefix: str = "e1", head_prefix: str = "f1") -> Branch:
    """Freshly initialized branch, reproducible from the seed."""
    if arch not in ARCHS:
        raise ConfigError(f"unknown encoder architecture {arch!r}, expected one of {ARCHS}")
    geometry.validate()
    rng = np.random.default_rng(seed)
    if arch == "attn":
        encoder = AttnEncoder(geometry, rng, enc_prefix)
    else:
        encoder = ConvEncoder(geometry, rng, enc_prefix)
    head = ClassifierHead(geometry, rng, head_prefix)
    return Branch(arch=arch, geometry=geometry, encoder=encoder, head=head)


def count_params(params: list[Parameter]) -> int:
    return sum(p.size() for p in params)


# ---------------------------------------------------------------------------
# checkpoint container: header JSON + flat name -> (shape, little-endian f64)

_CKPT_MAGIC = b"ECBCKPT1"


def save_checkpoint(path, params: list[Parameter], header: dict) -> None:
    seen = set()
    for p in params:
        if p.name in seen:
            raise ConfigError(f"duplicate parameter name {p.name!r} in checkpoint")
        seen.add(p.name)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.tensor.data, dtype="<f8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            tensors[name] = arr.astype(np.float64)
    return header, tensors


def restore_params(params: list[Parameter], tensors: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in tensors:
            raise ConfigError(f"checkpoint is missing parameter {p.name!r}")
        arr = tensors[p.name]
        if arr.shape != p.tensor.data.shape:
            raise ConfigError(f"checkpoint shape {arr.shape} does not match "
                              f"{p.name!r} shape {p.tensor.data.shape}")
        p.tensor.data[...] = arr


def geometry_to_header(geom: Geometry) -> dict:
    head = asdict(geom)
    head["conv_channels"] = list(geom.conv_channels)
    return head


def geometry_from_header(head: dict) -> Geometry:
    fields = dict(head)
    fields["conv_channels"] = tuple(fields["conv_channels"])
    return Geometry(**fields)
