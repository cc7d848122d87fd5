"""Denoising networks: the U-shaped image-space DiffiT and the isotropic
latent-space DiffiT."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .blocks import AdaLNBlock, DiffiTBlock, DiffiTResBlock
from .nn import Conv3x3, GroupNorm, LayerNorm, Linear, Module, constant, meta_init
from .tensor import (
    Rng,
    Tensor,
    add,
    concat,
    conv2d_3x3,
    reshape,
    swish,
    take,
    transpose,
    upsample_nearest2x,
)
from .tensor.core import ContractError, ShapeError
from .tmsa import TimeEmbedding


class ConfigError(ContractError):
    """A network configuration violates one of its invariants."""


def _tuple(v):
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class ImageSpaceConfig:
    resolution: int = 16
    in_channels: int = 1
    widths: tuple = (32, 64)
    blocks: tuple = (1, 1)
    windows: tuple = (4, 4)
    d_t: int = 32
    heads: int = 2
    mlp_ratio: int = 4
    groups: int = 32
    time_embedding: str = "positional"
    time_mode: str = "mixed"
    bias_mode: str = "relative_2d"
    time_injection: str = "tmsa"
    block_kind: str = "diffit"
    scale: str = "head"
    out_proj: bool = True

    family = "image"

    def __post_init__(self):
        for name in ("widths", "blocks", "windows"):
            object.__setattr__(self, name, _tuple(getattr(self, name)))
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.widths)

    def stage_resolution(self, i: int) -> int:
        return self.resolution // 2**i

    def validate(self) -> None:
        s = self.stages
        if s < 1 or len(self.blocks) != s or len(self.windows) != s:
            raise ConfigError("widths, blocks and windows must have one entry per stage")
        if self.resolution % 2 ** (s - 1):
            raise ConfigError(f"resolution {self.resolution} not divisible by 2^(stages-1)={2 ** (s - 1)}")
        for i, (c, w) in enumerate(zip(self.widths, self.windows)):
            r = self.stage_resolution(i)
            if w and r % w:
                raise ConfigError(f"stage {i}: window {w} does not divide grid {r}")
            if c % self.heads:
                raise ConfigError(f"stage {i}: width {c} not divisible by heads {self.heads}")
        if self.d_t % 2:
            raise ConfigError(f"d_t={self.d_t} must be even")
        if min(self.blocks) < 0 or min(self.widths) <= 0:
            raise ConfigError("block counts must be >= 0 and widths > 0")


@dataclass(frozen=True)
class LatentConfig:
    resolution: int = 8
    channels: int = 4
    patch: int = 2
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    d_t: Optional[int] = None
    num_classes: int = 0
    label_drop: float = 0.1
    time_embedding: str = "positional"
    time_mode: str = "mixed"
    bias_mode: str = "relative_2d"
    time_injection: str = "tmsa"
    block_kind: str = "diffit"
    scale: str = "head"
    out_proj: bool = True

    family = "latent"

    def __post_init__(self):
        if self.d_t is None:
            object.__setattr__(self, "d_t", self.hidden)
        self.validate()

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    def validate(self) -> None:
        if self.patch <= 0 or self.resolution % self.patch:
            raise ConfigError(f"latent resolution {self.resolution} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.d_t % 2:
            raise ConfigError(f"d_t={self.d_t} must be even")
        if self.num_classes < 0 or not 0.0 <= self.label_drop < 1.0:
            raise ConfigError("num_classes must be >= 0 and label_drop in [0, 1)")
        if self.block_kind not in ("diffit", "adaln"):
            raise ConfigError(f"unknown block kind {self.block_kind!r}")


NetworkConfig = Union[ImageSpaceConfig, LatentConfig]


def config_to_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["family"] = cfg.family
    return d


def config_from_dict(d: dict) -> NetworkConfig:
    d = dict(d)
    family = d.pop("family", None)
    cls = {"image": ImageSpaceConfig, "latent": LatentConfig}.get(family)
    if cls is None:
        raise ConfigError(f"unknown network family {family!r}")
    known = set(cls.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {family} config keys: {sorted(unknown)}")
    return cls(**d)


# ---------------------------------------------------------------------------
# common


class DenoisingNetwork(Module):
    config: NetworkConfig

    @property
    def num_classes(self) -> int:
        return getattr(self.config, "num_classes", 0)

    def tmsa_layers(self) -> list:
        """Attention modules in forward order (for attention dumps)."""
        from .tmsa import TMSA

        return [m for m in self.modules() if isinstance(m, TMSA)]

    def _time_token(self, t, b: int, label) -> Tensor:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,)) if np.ndim(t) == 0 or np.size(t) == 1 \
            else np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape != (b,):
            raise ShapeError(f"time values {t.shape} do not match batch {b}")
        extra = None
        if label is not None:
            if not self.num_classes:
                raise ContractError("labels given to an unconditional network")
            label = np.broadcast_to(np.asarray(label, dtype=np.int64).reshape(-1), (b,))
            if label.min() < 0 or label.max() > self.num_classes:
                raise ContractError(f"labels must lie in [0, {self.num_classes}] ({self.num_classes} = null)")
            extra = take(self.label_embed, label)
        elif self.num_classes:
            extra = take(self.label_embed, np.full(b, self.num_classes))
        return self.time(t, extra)


# ---------------------------------------------------------------------------
# image space


class Stage(Module):
    def __init__(self, cells: list):
        self.cells = cells

    def forward(self, x: Tensor, x_t: Tensor) -> Tensor:
        for cell in self.cells:
            x = cell(x, x_t)
        return x


class ImageDiffiT(DenoisingNetwork):
    """U-shaped encoder/decoder of DiffiT ResBlocks with skip connections.

    Downsampling is a stride-2 3x3 conv; upsampling is nearest x2 followed by a
    3x3 conv. Each skip is fused residually, ``skip + Linear([up, skip])``, so
    zeroing every residual branch leaves ``head(tokenizer(x))``.
    """

    def __init__(self, config: ImageSpaceConfig, rng: Rng):
        c = config
        self.config = c
        self.time = TimeEmbedding(c.d_t, rng, c.time_embedding)
        self.tokenizer = Conv3x3(c.in_channels, c.widths[0], rng)
        self.encoder = [Stage([self._cell(i, rng) for _ in range(c.blocks[i])]) for i in range(c.stages)]
        self.down = [Conv3x3(c.widths[i], c.widths[i + 1], rng, stride=2) for i in range(c.stages - 1)]
        self.up = [Conv3x3(c.widths[i + 1], c.widths[i], rng) for i in range(c.stages - 1)]
        self.fuse = [Linear(2 * c.widths[i], c.widths[i], rng) for i in range(c.stages - 1)]
        self.decoder = [Stage([self._cell(i, rng) for _ in range(c.blocks[i])]) for i in range(c.stages - 1)]
        self.head_norm = GroupNorm(c.widths[0], c.groups)
        self.head = Conv3x3(c.widths[0], c.in_channels, rng)

    def _cell(self, i: int, rng: Rng) -> DiffiTResBlock:
        c = self.config
        r = c.stage_resolution(i)
        kw = dict(window=c.windows[i], grid=(r, r), mlp_ratio=c.mlp_ratio, bias_mode=c.bias_mode, scale=c.scale)
        if c.block_kind == "diffit":
            kw.update(time_mode=c.time_mode, time_injection=c.time_injection, out_proj=c.out_proj)
        return DiffiTResBlock(c.widths[i], c.d_t, c.heads, rng, groups=c.groups, block_kind=c.block_kind, **kw)

    def forward(self, z: Tensor, t, label=None) -> Tensor:
        c = self.config
        if z.ndim != 4 or z.shape[1:] != (c.resolution, c.resolution, c.in_channels):
            raise ShapeError(f"image net expects (b, {c.resolution}, {c.resolution}, {c.in_channels}), got {z.shape}")
        x_t = self._time_token(t, z.shape[0], label)
        h = self.tokenizer(z)
        skips = []
        for i, stage in enumerate(self.encoder):
            h = stage(h, x_t)
            if i < c.stages - 1:
                skips.append(h)
                h = self.down[i](h)
        for i in reversed(range(c.stages - 1)):
            h = self.up[i](upsample_nearest2x(h))
            skip = skips[i]
            h = add(skip, self.fuse[i](concat([h, skip], axis=-1)))
            h = self.decoder[i](h, x_t)
        return self.head(swish(self.head_norm(h)))


# ---------------------------------------------------------------------------
# latent space


def patchify(z: Tensor, p: int) -> Tensor:
    """(b, H, W, c) -> (b, H/p, W/p, p*p*c)."""
    b, h, w, c = z.shape
    x = reshape(z, (b, h // p, p, w // p, p, c))
    return reshape(transpose(x, (0, 1, 3, 2, 4, 5)), (b, h // p, w // p, p * p * c))


def unpatchify(x: Tensor, p: int, c: int) -> Tensor:
    b, gh, gw, _ = x.shape
    x = reshape(x, (b, gh, gw, p, p, c))
    return reshape(transpose(x, (0, 1, 3, 2, 4, 5)), (b, gh * p, gw * p, c))


class LatentDiffiT(DenoisingNetwork):
    """Patchify -> learned positional embedding -> ``depth`` global blocks ->
    LayerNorm + linear decode -> unpatchify. Class labels (with a null label
    at index ``num_classes``) are embedded and added to the time embedding
    before the time MLP."""

    def __init__(self, config: LatentConfig, rng: Rng):
        c = config
        self.config = c
        g = c.grid
        self.time = TimeEmbedding(c.d_t, rng, c.time_embedding)
        self.label_embed = None
        if c.num_classes:
            self.label_embed = Tensor(_normal((c.num_classes + 1, c.d_t), 0.02, rng), requires_grad=True)
        self.patch_embed = Linear(c.patch * c.patch * c.channels, c.hidden, rng)
        self.pos_embed = Tensor(_normal((g, g, c.hidden), 0.02, rng), requires_grad=True)
        if c.block_kind == "diffit":
            self.blocks = [DiffiTBlock(c.hidden, c.d_t, c.heads, rng, window=0, grid=(g, g), mlp_ratio=c.mlp_ratio,
                                       time_mode=c.time_mode, bias_mode=c.bias_mode,
                                       time_injection=c.time_injection, scale=c.scale, out_proj=c.out_proj)
                           for _ in range(c.depth)]
        else:
            self.blocks = [AdaLNBlock(c.hidden, c.d_t, c.heads, rng, window=0, grid=(g, g),
                                      mlp_ratio=c.mlp_ratio, bias_mode=c.bias_mode, scale=c.scale)
                           for _ in range(c.depth)]
        self.final_norm = LayerNorm(c.hidden)
        self.decode = Linear(c.hidden, c.patch * c.patch * c.channels, rng)

    def forward(self, z: Tensor, t, label=None) -> Tensor:
        c = self.config
        if z.ndim != 4 or z.shape[1:] != (c.resolution, c.resolution, c.channels):
            raise ShapeError(f"latent net expects (b, {c.resolution}, {c.resolution}, {c.channels}), got {z.shape}")
        x_t = self._time_token(t, z.shape[0], label)
        h = add(self.patch_embed(patchify(z, c.patch)), self.pos_embed)
        for blk in self.blocks:
            h = blk(h, x_t)
        return unpatchify(self.decode(self.final_norm(h)), c.patch, c.channels)


def _normal(shape, std, rng: Rng):
    from .nn import _alloc

    return _alloc(shape, lambda: rng.normal(shape) * std)


# ---------------------------------------------------------------------------
# builders


def build_image_unet(config: ImageSpaceConfig, rng: Rng) -> ImageDiffiT:
    config.validate()
    return ImageDiffiT(config, rng)


def build_latent_diffit(config: LatentConfig, rng: Rng) -> LatentDiffiT:
    config.validate()
    return LatentDiffiT(config, rng)


def build_network(config: NetworkConfig, rng: Rng | None = None, meta: bool = False) -> DenoisingNetwork:
    """Construct either family; ``meta=True`` builds shape-only parameters."""
    rng = rng or Rng(0)
    builder = build_image_unet if config.family == "image" else build_latent_diffit
    if meta:
        with meta_init():
            return builder(config, rng)
    return builder(config, rng)


def denoise_forward(network: DenoisingNetwork, z_t, t, label=None) -> Tensor:
    """epsilon prediction with the shape of ``z_t`` (b, H, W, C)."""
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=network.parameters()[0].dtype))
    return network(z, t, label)


# ---------------------------------------------------------------------------
# presets


def cifar_config(**kw) -> ImageSpaceConfig:
    """32x32 three-stage layout, four ResBlocks and window 4 per stage."""
    base = dict(resolution=32, in_channels=3, widths=(128, 256, 256), blocks=(4, 4, 4), windows=(4, 4, 4),
                d_t=128, heads=4)
    base.update(kw)
    return ImageSpaceConfig(**base)


def ffhq_config(**kw) -> ImageSpaceConfig:
    """64x64 four-stage layout, four ResBlocks and window 8 per stage."""
    base = dict(resolution=64, in_channels=3, widths=(128, 256, 256, 256), blocks=(4, 4, 4, 4),
                windows=(8, 8, 8, 8), d_t=128, heads=4)
    base.update(kw)
    return ImageSpaceConfig(**base)


def latent_xl_config(**kw) -> LatentConfig:
    """Full-scale latent model: 32x32x4 latent, patch 2, depth 30, width 1152,
    16 heads, MLP ratio 4, 1000 classes. No attention output projection; the
    561M parameter and 114 GFLOP reference totals only fit without one."""
    base = dict(resolution=32, channels=4, patch=2, depth=30, hidden=1152, heads=16, mlp_ratio=4,
                num_classes=1000, out_proj=False)
    base.update(kw)
    return LatentConfig(**base)


def dit_xl_config(**kw) -> LatentConfig:
    """adaLN baseline at DiT-XL/2 size (depth 28, width 1152, 16 heads)."""
    base = dict(resolution=32, channels=4, patch=2, depth=28, hidden=1152, heads=16, mlp_ratio=4,
                num_classes=1000, block_kind="adaln", bias_mode="none")
    base.update(kw)
    return LatentConfig(**base)


def toy_image_config(**kw) -> ImageSpaceConfig:
    base = dict(resolution=16, in_channels=1, widths=(32, 64), blocks=(1, 1), windows=(4, 4), d_t=32, heads=2)
    base.update(kw)
    return ImageSpaceConfig(**base)


def toy_latent_config(**kw) -> LatentConfig:
    base = dict(resolution=8, channels=4, patch=2, depth=4, hidden=64, heads=4)
    base.update(kw)
    return LatentConfig(**base)


PRESETS = {
    "cifar": cifar_config,
    "ffhq": ffhq_config,
    "latent_xl": latent_xl_config,
    "dit_xl": dit_xl_config,
    "toy_image": toy_image_config,
    "toy_latent": toy_latent_config,
}
