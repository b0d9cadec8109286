"""Desk-scale segmentation networks.

``mit``: a four-stage Mix-Transformer encoder (overlapping patch embeddings,
efficient self-attention with spatial reduction, Mix-FFN) and an all-MLP
decoder fusing every scale.  ``conv``: a strided convolutional encoder with a
decoder that takes a single early skip connection.

Every parameter is tagged at construction time; merge selectors rely only on
those tags.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .params import ParamTree, Tags
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MiniMiTConfig:
    num_classes: int = 5
    in_channels: int = 3
    dims: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    patch_kernels: tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    mlp_ratio: int = 4
    # attention scaling per stage; None means 1/sqrt(head_dim)
    attn_scales: tuple[float, ...] | None = None
    decoder_dim: int = 64
    # single linear patch embedding, no norms, no transformer blocks
    linear_encoder: bool = False

    def __post_init__(self):
        n = len(self.dims)
        per_stage = (self.depths, self.heads, self.sr_ratios, self.patch_kernels, self.patch_strides)
        if n < 1 or any(len(v) != n for v in per_stage):
            raise ConfigError("per-stage settings must all have one entry per stage")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        for i, (d, h) in enumerate(zip(self.dims, self.heads)):
            if d <= 0 or h <= 0 or d % h:
                raise ConfigError(f"stage {i}: dim {d} not divisible by heads {h}")
        if self.patch_strides[0] < 1 or any(s < 2 for s in self.patch_strides[1:]):
            raise ConfigError("stage strides must shrink the feature map")
        if any(r < 1 for r in self.sr_ratios):
            raise ConfigError("spatial-reduction ratios must be >= 1")
        if any(s <= 0 for s in self.scales):
            raise ConfigError("attention scaling must be positive")
        if self.linear_encoder and (n != 1 or any(self.depths)):
            raise ConfigError("linear_encoder needs exactly one stage and depth 0")

    @property
    def scales(self) -> tuple[float, ...]:
        if self.attn_scales is not None:
            if len(self.attn_scales) != len(self.dims):
                raise ConfigError("attn_scales needs one value per stage")
            return tuple(self.attn_scales)
        return tuple(1.0 / math.sqrt(d // h) for d, h in zip(self.dims, self.heads))

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.patch_strides))

    @classmethod
    def linear(cls, num_classes: int = 5, dim: int = 16, decoder_dim: int = 32) -> MiniMiTConfig:
        return cls(num_classes=num_classes, dims=(dim,), depths=(0,), heads=(1,), sr_ratios=(1,),
                   patch_kernels=(7,), patch_strides=(4,), decoder_dim=decoder_dim, linear_encoder=True)


@dataclass(frozen=True)
class ConvConfig:
    num_classes: int = 5
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 48, 64)
    skip_stage: int = 1
    skip_dim: int = 16
    decoder_dim: int = 48

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ConfigError("conv encoder has exactly four blocks")
        if not 0 <= self.skip_stage < 3:
            raise ConfigError("skip must come from an early block")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.channels)


@dataclass
class SegModel:
    config: MiniMiTConfig | ConvConfig
    params: ParamTree
    kind: str = "mit"
    seeds: dict = field(default_factory=dict)

    def with_params(self, params: ParamTree) -> SegModel:
        return SegModel(self.config, params, self.kind, dict(self.seeds))

    def config_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.config)}

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Posteriors (B x S x H x W) for normalised images (B x 3 x H x W)."""
        with T.no_grad():
            return forward(self, Tensor(x)).data


def config_from_dict(d: dict) -> tuple[str, MiniMiTConfig | ConvConfig]:
    d = dict(d)
    kind = d.pop("kind", "mit")
    cls = MiniMiTConfig if kind == "mit" else ConvConfig
    fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return kind, cls(**fields)


# --------------------------------------------------------------------- counting

_counts: Counter | None = None


@contextlib.contextmanager
def count_forwards() -> Iterator[Counter]:
    """Count encoder/decoder invocations inside the block."""
    global _counts
    previous, _counts = _counts, Counter()
    try:
        yield _counts
    finally:
        if previous is not None:
            previous.update(_counts)
        _counts = previous


def _tick(what: str) -> None:
    if _counts is not None:
        _counts[what] += 1


# ----------------------------------------------------------------------- init


def _rng(seed: int, path: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(path.encode())])


class _Builder:
    def __init__(self):
        self.entries: dict[str, tuple[Tensor, Tags]] = {}

    def add(self, path: str, arr: np.ndarray, tags: Tags) -> None:
        self.entries[path] = (Tensor(arr.astype(np.float32)), tags)

    def tree(self) -> ParamTree:
        return ParamTree(self.entries)


def _enc_linear(b: _Builder, seed: int, path: str, fan_in: int, fan_out: int, block: str) -> None:
    w = np.clip(_rng(seed, path).normal(0.0, 0.02, (fan_in, fan_out)), -0.04, 0.04)
    b.add(path + ".weight", w, Tags("encoder", block, "fc"))
    b.add(path + ".bias", np.zeros(fan_out), Tags("encoder", block, "fc"))


def _enc_conv(b: _Builder, seed: int, path: str, shape: tuple[int, int, int, int], block: str,
              groups: int = 1) -> None:
    o, _, kh, kw = shape
    std = math.sqrt(2.0 / (kh * kw * o / groups))
    b.add(path + ".weight", _rng(seed, path).normal(0.0, std, shape), Tags("encoder", block, "conv"))
    b.add(path + ".bias", np.zeros(o), Tags("encoder", block, "conv"))


def _norm(b: _Builder, part: str, path: str, dim: int, block: str) -> None:
    b.add(path + ".weight", np.ones(dim), Tags(part, block, "norm"))
    b.add(path + ".bias", np.zeros(dim), Tags(part, block, "norm"))


def _kaiming(b: _Builder, seed: int, path: str, shape: tuple[int, ...], part: str, block: str,
             layer: str) -> None:
    fan_in = shape[0] if layer == "fc" else int(np.prod(shape[1:]))
    w = _rng(seed, path).normal(0.0, math.sqrt(2.0 / fan_in), shape)
    b.add(path + ".weight", w, Tags(part, block, layer))
    b.add(path + ".bias", np.zeros(shape[1] if layer == "fc" else shape[0]), Tags(part, block, layer))


def build_mini_mit(config: MiniMiTConfig, encoder_seed: int, decoder_seed: int) -> SegModel:
    """Encoder drawn from ``encoder_seed``; decoder Kaiming-initialised from ``decoder_seed``."""
    b = _Builder()
    c_in = config.in_channels
    for s, dim in enumerate(config.dims):
        pre = f"encoder.s{s}"
        k = config.patch_kernels[s]
        _enc_conv(b, encoder_seed, f"{pre}.patch_embed.proj", (dim, c_in, k, k), "patch_embed")
        if not config.linear_encoder:
            _norm(b, "encoder", f"{pre}.patch_embed.norm", dim, "patch_embed")
        hidden = dim * config.mlp_ratio
        for j in range(config.depths[s]):
            bp = f"{pre}.b{j}"
            _norm(b, "encoder", f"{bp}.norm1", dim, "attention")
            for name in ("q", "k", "v", "proj"):
                _enc_linear(b, encoder_seed, f"{bp}.attn.{name}", dim, dim, "attention")
            r = config.sr_ratios[s]
            if r > 1:
                _enc_conv(b, encoder_seed, f"{bp}.attn.sr", (dim, dim, r, r), "attention")
                _norm(b, "encoder", f"{bp}.attn.sr_norm", dim, "attention")
            _norm(b, "encoder", f"{bp}.norm2", dim, "mixffn")
            _enc_linear(b, encoder_seed, f"{bp}.ffn.fc1", dim, hidden, "mixffn")
            _enc_conv(b, encoder_seed, f"{bp}.ffn.dwconv", (hidden, 1, 3, 3), "mixffn", groups=hidden)
            _enc_linear(b, encoder_seed, f"{bp}.ffn.fc2", hidden, dim, "mixffn")
        if not config.linear_encoder:
            _norm(b, "encoder", f"{pre}.norm", dim, "other")
        c_in = dim
    _mit_decoder(b, config, decoder_seed)
    return SegModel(config, b.tree(), "mit", {"encoder": encoder_seed, "decoder": decoder_seed})


def _mit_decoder(b: _Builder, config: MiniMiTConfig, seed: int) -> None:
    e = config.decoder_dim
    for s, dim in enumerate(config.dims):
        _kaiming(b, seed, f"decoder.head.linear_c{s}", (dim, e), "decoder", "head", "fc")
    _kaiming(b, seed, "decoder.head.fuse", (e, e * len(config.dims), 1, 1), "decoder", "head", "conv")
    _kaiming(b, seed, "decoder.head.cls", (config.num_classes, e, 1, 1), "decoder", "head", "conv")


def build_conv_model(config: ConvConfig, encoder_seed: int, decoder_seed: int) -> SegModel:
    b = _Builder()
    c_in = config.in_channels
    for i, c in enumerate(config.channels):
        _enc_conv(b, encoder_seed, f"encoder.c{i}.conv1", (c, c_in, 3, 3), "conv_block")
        _enc_conv(b, encoder_seed, f"encoder.c{i}.conv2", (c, c, 3, 3), "conv_block")
        c_in = c
    e = config.decoder_dim
    _kaiming(b, decoder_seed, "decoder.head.context", (e, config.channels[-1], 1, 1), "decoder", "head", "conv")
    _kaiming(b, decoder_seed, "decoder.head.skip", (config.skip_dim, config.channels[config.skip_stage], 1, 1),
             "decoder", "head", "conv")
    _kaiming(b, decoder_seed, "decoder.head.fuse", (e, e + config.skip_dim, 3, 3), "decoder", "head", "conv")
    _kaiming(b, decoder_seed, "decoder.head.cls", (config.num_classes, e, 1, 1), "decoder", "head", "conv")
    return SegModel(config, b.tree(), "conv", {"encoder": encoder_seed, "decoder": decoder_seed})


def build_model(kind: str, config, encoder_seed: int, decoder_seed: int) -> SegModel:
    if kind == "mit":
        return build_mini_mit(config, encoder_seed, decoder_seed)
    if kind == "conv":
        return build_conv_model(config, encoder_seed, decoder_seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def reinit_decoder(model: SegModel, decoder_seed: int) -> SegModel:
    """Keep the encoder, draw a fresh decoder (used when forking base models)."""
    fresh = build_model(model.kind, model.config, model.seeds.get("encoder", 0), decoder_seed)
    dec = {p: fresh.params.array(p) for p in fresh.params if fresh.params.tags(p).part == "decoder"}
    seeds = dict(model.seeds, decoder=decoder_seed)
    return SegModel(model.config, model.params.replace(dec), model.kind, seeds)


# -------------------------------------------------------------------- forward


def _lin(params: ParamTree, path: str, x: Tensor) -> Tensor:
    return T.linear(x, params[path + ".weight"], params[path + ".bias"])


def _ln(params: ParamTree, path: str, x: Tensor) -> Tensor:
    return T.layernorm(x, params[path + ".weight"], params[path + ".bias"])


def _conv(params: ParamTree, path: str, x: Tensor, stride=1, padding=0, groups=1) -> Tensor:
    return T.conv2d(x, params[path + ".weight"], params[path + ".bias"], stride, padding, groups)


def to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def to_map(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c, h, w))


def efficient_attention(params: ParamTree, path: str, x: Tensor, hw: tuple[int, int], heads: int,
                        sr_ratio: int, scale: float) -> Tensor:
    """Multi-head self-attention whose keys/values come from a spatially reduced map."""
    b, n, c = x.shape
    d = c // heads
    q = T.transpose(T.reshape(_lin(params, path + ".q", x), (b, n, heads, d)), (0, 2, 1, 3))
    kv_in = x
    if sr_ratio > 1:
        reduced = _conv(params, path + ".sr", to_map(x, *hw), stride=sr_ratio)
        kv_in = _ln(params, path + ".sr_norm", to_tokens(reduced))
    nk = kv_in.shape[1]
    k = T.transpose(T.reshape(_lin(params, path + ".k", kv_in), (b, nk, heads, d)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(_lin(params, path + ".v", kv_in), (b, nk, heads, d)), (0, 2, 1, 3))
    attn = T.softmax(T.scale(T.matmul(q, k), scale), axis=-1)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, c))
    return _lin(params, path + ".proj", out)


def mix_ffn(params: ParamTree, path: str, x: Tensor, hw: tuple[int, int]) -> Tensor:
    hidden = _lin(params, path + ".fc1", x)
    ch = hidden.shape[-1]
    hidden = _conv(params, path + ".dwconv", to_map(hidden, *hw), padding=1, groups=ch)
    return _lin(params, path + ".fc2", T.gelu(to_tokens(hidden)))


def _mit_encoder(model: SegModel, x: Tensor) -> list[Tensor]:
    cfg: MiniMiTConfig = model.config
    p = model.params
    feats = []
    for s in range(len(cfg.dims)):
        pre = f"encoder.s{s}"
        k, st = cfg.patch_kernels[s], cfg.patch_strides[s]
        x = _conv(p, f"{pre}.patch_embed.proj", x, stride=st, padding=k // 2)
        if cfg.linear_encoder:
            feats.append(x)
            continue
        _, _, h, w = x.shape
        tok = _ln(p, f"{pre}.patch_embed.norm", to_tokens(x))
        for j in range(cfg.depths[s]):
            bp = f"{pre}.b{j}"
            tok = T.add(tok, efficient_attention(p, f"{bp}.attn", _ln(p, f"{bp}.norm1", tok), (h, w),
                                                 cfg.heads[s], cfg.sr_ratios[s], cfg.scales[s]))
            tok = T.add(tok, mix_ffn(p, f"{bp}.ffn", _ln(p, f"{bp}.norm2", tok), (h, w)))
        x = to_map(_ln(p, f"{pre}.norm", tok), h, w)
        feats.append(x)
    return feats


def _conv_encoder(model: SegModel, x: Tensor) -> list[Tensor]:
    p = model.params
    feats = []
    for i in range(len(model.config.channels)):
        x = T.relu(_conv(p, f"encoder.c{i}.conv1", x, stride=2, padding=1))
        x = T.relu(_conv(p, f"encoder.c{i}.conv2", x, padding=1))
        feats.append(x)
    return feats


def forward_encoder(model: SegModel, x: Tensor) -> list[Tensor]:
    """Multi-scale feature maps, finest first."""
    stride = model.config.total_stride
    if x.ndim != 4 or x.shape[2] % stride or x.shape[3] % stride:
        raise T.DimensionError(f"input {x.shape} spatial dims must be divisible by {stride}")
    _tick("encoder")
    return _mit_encoder(model, x) if model.kind == "mit" else _conv_encoder(model, x)


def decode_logits(model: SegModel, feats: list[Tensor], out_size: tuple[int, int] | None = None) -> Tensor:
    _tick("decoder")
    p = model.params
    h0, w0 = feats[0].shape[2:]
    if model.kind == "mit":
        grid = (h0, w0)
        if out_size is None:
            out_size = (h0 * model.config.patch_strides[0], w0 * model.config.patch_strides[0])
        projected = []
        for s, f in enumerate(feats):
            _, _, h, w = f.shape
            proj = to_map(_lin(p, f"decoder.head.linear_c{s}", to_tokens(f)), h, w)
            projected.append(T.resize_bilinear(proj, grid))
        fused = T.relu(_conv(p, "decoder.head.fuse", T.concat(projected[::-1], axis=1)))
    else:
        cfg: ConvConfig = model.config
        skip = feats[cfg.skip_stage]
        grid = skip.shape[2:]
        if out_size is None:
            out_size = (h0 * 2, w0 * 2)
        ctx = T.relu(_conv(p, "decoder.head.context", feats[-1]))
        ctx = T.resize_bilinear(ctx, grid)
        sk = T.relu(_conv(p, "decoder.head.skip", skip))
        fused = T.relu(_conv(p, "decoder.head.fuse", T.concat([ctx, sk], axis=1), padding=1))
    logits = _conv(p, "decoder.head.cls", fused)
    return T.resize_bilinear(logits, out_size)


def forward_decoder(model: SegModel, feats: list[Tensor], out_size: tuple[int, int] | None = None) -> Tensor:
    """Per-pixel class posteriors (B x S x H x W)."""
    return T.softmax(decode_logits(model, feats, out_size), axis=1)


def forward_logits(model: SegModel, x: Tensor) -> Tensor:
    return decode_logits(model, forward_encoder(model, x), x.shape[2:])


def forward(model: SegModel, x: Tensor) -> Tensor:
    return forward_decoder(model, forward_encoder(model, x), x.shape[2:])


def argmax_map(posteriors: np.ndarray) -> np.ndarray:
    return np.argmax(posteriors, axis=1)


def expected_param_count(kind: str, config) -> int:
    """Parameter count derived from the config alone (no tree construction)."""
    total = 0
    if kind == "mit":
        c_in = config.in_channels
        for s, d in enumerate(config.dims):
            k = config.patch_kernels[s]
            total += d * c_in * k * k + d
            if not config.linear_encoder:
                total += 2 * d + 2 * d
            hidden = d * config.mlp_ratio
            r = config.sr_ratios[s]
            per_block = 2 * d + 4 * (d * d + d) + 2 * d
            if r > 1:
                per_block += d * d * r * r + d + 2 * d
            per_block += d * hidden + hidden + hidden * 9 + hidden + hidden * d + d
            total += config.depths[s] * per_block
            c_in = d
        e = config.decoder_dim
        total += sum(d * e + e for d in config.dims)
        total += e * len(config.dims) * e + e + config.num_classes * e + config.num_classes
    else:
        c_in = config.in_channels
        for c in config.channels:
            total += c * c_in * 9 + c + c * c * 9 + c
            c_in = c
        e, sd = config.decoder_dim, config.skip_dim
        total += e * config.channels[-1] + e + sd * config.channels[config.skip_stage] + sd
        total += e * (e + sd) * 9 + e + config.num_classes * e + config.num_classes
    return total
