"""Network descriptors, builders and forward passes.

Three families:

- mapping networks G1/G2: 2D U-Net with bilinear upsampling and a sigmoid head;
- pair discriminator T: six convolutions over a 2-channel (x1, x2) stack;
- dual-modelling networks S1/S2: a shared U-Net feature extractor feeding a
  local convolutional branch and a global self-attention branch over patches.

Batch normalisation always normalises with the statistics of the current
batch, in training and at test time. :func:`frozen_batch_norm` switches it to
a batch-independent affine-only mode, used where per-sample independence is
needed.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from ahdc_lab.models import BRANCH_STRUCTURES, NetsConfig
from ahdc_lab.seeding import torch_generator

PARAMETER_GROUPS = ("feature", "local", "global", "whole")


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MappingNetDescriptor:
    """U-Net shape: ``levels`` poolings, channels doubling from ``base_channels`` up to ``max_channels``."""

    levels: int = 4
    base_channels: int = 16
    max_channels: int = 128
    use_skip_connections: bool = True
    in_channels: int = 1
    out_channels: int = 1
    upsampling: str = "bilinear"
    output_activation: str = "sigmoid"

    def __post_init__(self) -> None:
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError(f"Invalid channel schedule base={self.base_channels} max={self.max_channels}")
        if self.upsampling != "bilinear":
            raise ValueError(f"Only bilinear upsampling is supported, got {self.upsampling!r}")
        if self.output_activation not in ("sigmoid", "none"):
            raise ValueError(f"output_activation must be 'sigmoid' or 'none', got {self.output_activation!r}")

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**level, self.max_channels) for level in range(self.levels + 1)]

    def check_input(self, height: int, width: int) -> None:
        factor = 2**self.levels
        if height % factor or width % factor:
            raise ValueError(f"Input {height}x{width} is not divisible by 2^levels = {factor}")


@dataclass(frozen=True)
class DiscriminatorDescriptor:
    """Fixed six-layer ladder; any deviation is rejected."""

    filter_ladder: tuple[int, ...] = (32, 64, 128, 256, 256, 1)
    strides: tuple[int, ...] = (2, 2, 2, 2, 2, 1)
    kernel_sizes: tuple[int, ...] = (3, 3, 3, 3, 3, 1)
    in_channels: int = 2

    def __post_init__(self) -> None:
        expected = DiscriminatorDescriptor.__dataclass_fields__
        for name in ("filter_ladder", "strides", "kernel_sizes", "in_channels"):
            value = getattr(self, name)
            value = tuple(value) if isinstance(value, list) else value
            object.__setattr__(self, name, value)
            if value != expected[name].default:
                raise ValueError(f"Discriminator {name} must be {expected[name].default}, got {value}")


@dataclass(frozen=True)
class DualNetDescriptor:
    """Shared feature extractor + two prediction branches."""

    feature: MappingNetDescriptor = field(
        default_factory=lambda: MappingNetDescriptor(out_channels=16, output_activation="none")
    )
    patch_size: int = 8
    attention_blocks: int = 2
    heads: int = 4
    positional_encoding: bool = True
    use_global_branch: bool = True
    branch_structure: str = "local-global"
    local_blocks: int = 3

    def __post_init__(self) -> None:
        if isinstance(self.feature, dict):
            object.__setattr__(self, "feature", MappingNetDescriptor(**self.feature))
        if self.feature.output_activation != "none":
            raise ValueError("The feature extractor must not apply an output activation")
        if self.branch_structure not in BRANCH_STRUCTURES:
            raise ValueError(f"branch_structure must be one of {BRANCH_STRUCTURES}, got {self.branch_structure!r}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be positive, got {self.patch_size}")
        if self.model_dim % self.heads:
            raise ValueError(f"Model dim {self.model_dim} is not divisible by {self.heads} heads")

    @property
    def feature_channels(self) -> int:
        return self.feature.out_channels

    @property
    def model_dim(self) -> int:
        return self.patch_size * self.patch_size * self.feature_channels

    @property
    def branch_kinds(self) -> tuple[str, str | None]:
        first, second = self.branch_structure.split("-")
        return first, (second if self.use_global_branch else None)

    def check_input(self, height: int, width: int) -> None:
        self.feature.check_input(height, width)
        if height % self.patch_size or width % self.patch_size:
            raise ValueError(f"Feature map {height}x{width} is not divisible by patch size {self.patch_size}")


Descriptor = MappingNetDescriptor | DiscriminatorDescriptor | DualNetDescriptor

_DESCRIPTOR_KINDS: dict[str, type] = {
    "mapping": MappingNetDescriptor,
    "discriminator": DiscriminatorDescriptor,
    "dual": DualNetDescriptor,
}


def descriptor_to_dict(d: Descriptor) -> dict:
    kind = next(k for k, cls in _DESCRIPTOR_KINDS.items() if isinstance(d, cls))
    return {"kind": kind, **asdict(d)}


def descriptor_from_dict(data: dict) -> Descriptor:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in _DESCRIPTOR_KINDS:
        raise ValueError(f"Unknown descriptor kind {kind!r}")
    return _DESCRIPTOR_KINDS[kind](**data)


def mapping_descriptor(cfg: NetsConfig) -> MappingNetDescriptor:
    return MappingNetDescriptor(
        levels=cfg.levels,
        base_channels=cfg.base_channels,
        max_channels=cfg.max_channels,
        use_skip_connections=cfg.use_skip_connections,
    )


def dual_descriptor(cfg: NetsConfig, use_global_branch: bool = True) -> DualNetDescriptor:
    return DualNetDescriptor(
        feature=MappingNetDescriptor(
            levels=cfg.feature_levels,
            base_channels=cfg.feature_base_channels,
            max_channels=cfg.max_channels,
            out_channels=cfg.feature_channels,
            output_activation="none",
        ),
        patch_size=cfg.patch_size,
        attention_blocks=cfg.attention_blocks,
        heads=cfg.heads,
        positional_encoding=cfg.positional_encoding,
        use_global_branch=use_global_branch,
        branch_structure=cfg.branch_structure,
    )


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class BatchNorm(nn.BatchNorm2d):
    """Batch norm over current-batch statistics; ``frozen_stats`` makes it affine-only."""

    def __init__(self, num_features: int):
        super().__init__(num_features, track_running_stats=False)
        self.frozen_stats = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.frozen_stats:
            return super().forward(x)
        zeros = x.new_zeros(self.num_features)
        ones = x.new_ones(self.num_features)
        return F.batch_norm(x, zeros, ones, self.weight, self.bias, False, 0.0, self.eps)


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
            BatchNorm(out_channels),
            nn.ReLU(),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(ConvBlock(in_channels, out_channels), ConvBlock(out_channels, out_channels))


class UNet(nn.Module):
    """Encoder/decoder with max-pool downsampling, bilinear upsampling and optional skips."""

    def __init__(self, d: MappingNetDescriptor):
        super().__init__()
        self.descriptor = d
        ch = d.channels()
        self.inc = DoubleConv(d.in_channels, ch[0])
        self.down = nn.ModuleList(
            nn.Sequential(nn.MaxPool2d(2), DoubleConv(ch[level - 1], ch[level])) for level in range(1, d.levels + 1)
        )
        self.upsample = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        skip = d.use_skip_connections
        self.up = nn.ModuleList(
            DoubleConv(ch[level] + (ch[level - 1] if skip else 0), ch[level - 1]) for level in range(d.levels, 0, -1)
        )
        self.head = nn.Conv2d(ch[0], d.out_channels, kernel_size=1)

    def blocks(self) -> list[tuple[str, nn.Module]]:
        """The convolutional stages in forward order."""
        named = [("inc", self.inc)]
        named += [(f"down{i + 1}", m) for i, m in enumerate(self.down)]
        named += [(f"up{i + 1}", m) for i, m in enumerate(self.up)]
        return named

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.descriptor.check_input(x.shape[-2], x.shape[-1])
        h = self.inc(x)
        skips = [h]
        for down in self.down:
            h = down(h)
            skips.append(h)
        skips.pop()
        for up in self.up:
            h = self.upsample(h)
            skip = skips.pop()
            if self.descriptor.use_skip_connections:
                h = torch.cat([h, skip], dim=1)
            h = up(h)
        out = self.head(h)
        return torch.sigmoid(out) if self.descriptor.output_activation == "sigmoid" else out


class PairDiscriminator(nn.Module):
    def __init__(self, d: DiscriminatorDescriptor):
        super().__init__()
        layers: list[nn.Module] = []
        in_channels = d.in_channels
        for filters, stride, kernel in zip(d.filter_ladder[:-1], d.strides[:-1], d.kernel_sizes[:-1], strict=True):
            layers += [
                nn.Conv2d(in_channels, filters, kernel_size=kernel, stride=stride, padding=kernel // 2),
                BatchNorm(filters),
                nn.ReLU(),
            ]
            in_channels = filters
        layers.append(nn.Conv2d(in_channels, d.filter_ladder[-1], kernel_size=d.kernel_sizes[-1], stride=d.strides[-1]))
        self.layers = nn.Sequential(*layers)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.layers(pair))


# ---------------------------------------------------------------------------
# Global modelling
# ---------------------------------------------------------------------------


def sinusoidal_position_encoding(n_positions: int, d_model: int) -> torch.Tensor:
    """``PE[pos, 2i] = sin(pos / 10000^(2i/d))``, ``PE[pos, 2i+1] = cos(...)``, float64.

    Raises:
        ValueError: If *d_model* is odd.
    """
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    div = torch.pow(10000.0, torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(n_positions, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position / div)
    pe[:, 1::2] = torch.cos(position / div)
    return pe


def patchify(f: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, F, H, W)`` → ``(B, (H/P)(W/P), P*P*F)``, patches in row-major order."""
    height, width = f.shape[-2:]
    if height % patch_size or width % patch_size:
        raise ValueError(f"Feature map {height}x{width} is not divisible by patch size {patch_size}")
    return rearrange(f, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(tokens: torch.Tensor, patch_size: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify` for a ``grid_h`` x ``grid_w`` patch grid."""
    if tokens.shape[1] != grid_h * grid_w:
        raise ValueError(f"Expected {grid_h * grid_w} patches, got {tokens.shape[1]}")
    return rearrange(
        tokens, "b (h w) (p1 p2 c) -> b c (h p1) (w p2)", h=grid_h, w=grid_w, p1=patch_size, p2=patch_size
    )


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in self.to_qkv(x).chunk(3, dim=-1))
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block with a 2x-wide feed-forward."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class GlobalBranch(nn.Module):
    def __init__(self, d: DualNetDescriptor):
        super().__init__()
        self.patch_size = d.patch_size
        self.positional_encoding = d.positional_encoding
        self.blocks = nn.ModuleList(AttentionBlock(d.model_dim, d.heads) for _ in range(d.attention_blocks))
        self.head = nn.Conv2d(d.feature_channels, 1, kernel_size=1)

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the attention stack over a ``(B, N, D)`` patch sequence."""
        if self.positional_encoding:
            pe = sinusoidal_position_encoding(tokens.shape[1], tokens.shape[2])
            tokens = tokens + pe.to(dtype=tokens.dtype, device=tokens.device)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        height, width = features.shape[-2:]
        tokens = self.attend(patchify(features, self.patch_size))
        maps = unpatchify(tokens, self.patch_size, height // self.patch_size, width // self.patch_size)
        return torch.sigmoid(self.head(maps))


class LocalBranch(nn.Sequential):
    def __init__(self, d: DualNetDescriptor):
        blocks = [ConvBlock(d.feature_channels, d.feature_channels) for _ in range(d.local_blocks)]
        super().__init__(*blocks, nn.Conv2d(d.feature_channels, 1, kernel_size=1), nn.Sigmoid())


def _make_branch(kind: str, d: DualNetDescriptor) -> nn.Module:
    return LocalBranch(d) if kind == "local" else GlobalBranch(d)


class DualOutput(NamedTuple):
    """Per-pixel probabilities of the two branches; ``global_`` is None when that branch is disabled."""

    local: torch.Tensor
    global_: torch.Tensor | None


class DualModellingNet(nn.Module):
    def __init__(self, d: DualNetDescriptor):
        super().__init__()
        self.descriptor = d
        first, second = d.branch_kinds
        self.feature = UNet(d.feature)
        self.branch_a = _make_branch(first, d)
        self.branch_b = _make_branch(second, d) if second is not None else None

    def forward(self, x: torch.Tensor) -> DualOutput:
        self.descriptor.check_input(x.shape[-2], x.shape[-1])
        features = self.feature(x)
        second = self.branch_b(features) if self.branch_b is not None else None
        return DualOutput(self.branch_a(features), second)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """A network, its descriptor and a group tag for every parameter."""

    descriptor: Descriptor
    module: nn.Module
    groups: dict[str, str]

    def __post_init__(self) -> None:
        names = {name for name, _ in self.module.named_parameters()}
        if names != set(self.groups):
            raise ValueError("Every parameter must belong to exactly one group")
        unknown = set(self.groups.values()) - set(PARAMETER_GROUPS)
        if unknown:
            raise ValueError(f"Unknown parameter groups: {sorted(unknown)}")

    def parameters_in(self, *groups: str) -> list[nn.Parameter]:
        return [p for name, p in self.module.named_parameters() if self.groups[name] in groups]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def feature_filters(self) -> list[torch.Tensor]:
        """Convolution weights of the feature extractor, in forward order."""
        return [
            p for name, p in self.module.named_parameters() if self.groups[name] == "feature" and p.dim() == 4
        ]


def _init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in-scaled uniform weights, zero biases, unit/zero norm affine."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d | nn.Linear):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d | nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def _dual_group(name: str, d: DualNetDescriptor) -> str:
    if name.startswith("feature."):
        return "feature"
    first, second = d.branch_kinds
    return first if name.startswith("branch_a.") else second


def build_mapping_net(d: MappingNetDescriptor, seed: int, component: str) -> ModelBundle:
    module = UNet(d)
    _init_parameters(module, torch_generator(seed, f"init:{component}"))
    return ModelBundle(d, module, {name: "whole" for name, _ in module.named_parameters()})


def build_discriminator(d: DiscriminatorDescriptor, seed: int, component: str = "t") -> ModelBundle:
    module = PairDiscriminator(d)
    _init_parameters(module, torch_generator(seed, f"init:{component}"))
    return ModelBundle(d, module, {name: "whole" for name, _ in module.named_parameters()})


def build_dual_net(d: DualNetDescriptor, seed: int, component: str) -> ModelBundle:
    module = DualModellingNet(d)
    _init_parameters(module, torch_generator(seed, f"init:{component}"))
    return ModelBundle(d, module, {name: _dual_group(name, d) for name, _ in module.named_parameters()})


def build_bundle(d: Descriptor, seed: int, component: str) -> ModelBundle:
    if isinstance(d, MappingNetDescriptor):
        return build_mapping_net(d, seed, component)
    if isinstance(d, DiscriminatorDescriptor):
        return build_discriminator(d, seed, component)
    return build_dual_net(d, seed, component)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_batch(x: torch.Tensor, channels: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"Expected a (N, C, H, W) batch, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"Expected {channels} input channel(s), got {x.shape[1]}")


def forward_mapping(g: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    """Map a batch into the other domain; same spatial shape, values in (0, 1)."""
    if isinstance(g.descriptor, MappingNetDescriptor):
        _check_batch(x, g.descriptor.in_channels)
        g.descriptor.check_input(x.shape[-2], x.shape[-1])
    return g.module(x)


def forward_discriminator(t: ModelBundle, pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Score a 2-channel pair batch.

    Returns:
        ``(score_map, scores)``: the ``(N, 1, h, w)`` probability map and its
        per-sample mean.
    """
    _check_batch(pair, 2)
    score_map = t.module(pair)
    return score_map, score_map.mean(dim=(1, 2, 3))


def forward_dual(s: ModelBundle, x: torch.Tensor) -> DualOutput:
    """Run a dual-modelling network; both branches consume the same feature maps."""
    _check_batch(x, s.descriptor.feature.in_channels)
    return s.module(x)


def set_frozen_stats(module: nn.Module, frozen: bool) -> None:
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.frozen_stats = frozen


@contextlib.contextmanager
def frozen_batch_norm(*bundles: ModelBundle) -> Iterator[None]:
    """Temporarily make every batch norm in *bundles* batch-independent."""
    for b in bundles:
        set_frozen_stats(b.module, True)
    try:
        yield
    finally:
        for b in bundles:
            set_frozen_stats(b.module, False)
