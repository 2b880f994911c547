"""The two heterogeneous students: a small conv segmenter and a small patch-attention segmenter.

Both emit the same bundle per batch: high-level features from the last
backbone stage, pixel-wise logits upsampled to the input resolution, and
argmax pseudo labels.  Feature grids of the two students share stride 4 so
the prototype-consistency loss can compare them pixel for pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Invalid model/run configuration or input incompatible with it."""


@dataclass
class StudentOutput:
    """Per-student forward bundle.

    features: [B, D, h, w] last-stage feature map (stride 4 by default).
    logits:   [B, K, H, W] class scores at input resolution.
    pseudo_labels: [B, H, W] integer argmax of the logits (no gradient).
    """

    features: torch.Tensor
    logits: torch.Tensor
    pseudo_labels: torch.Tensor


@dataclass
class StudentConfig:
    kind: str = "conv"  # {conv, attention}
    num_classes: int = 4
    in_channels: int = 3
    # conv student
    conv_widths: tuple[int, ...] = (32, 64, 64, 64)
    # attention student
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 2
    pos_embed: str = "learned"  # {learned, none}
    max_tokens: int = field(default=256)  # positional table size: (H/p)*(W/p) at the design resolution

    def validate(self) -> None:
        if self.kind not in ("conv", "attention"):
            raise ConfigError(f"unknown student kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kind == "attention":
            if self.embed_dim % self.num_heads != 0:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
                )
            if self.pos_embed not in ("learned", "none"):
                raise ConfigError(f"unknown pos_embed mode {self.pos_embed!r}")


def pseudo_labels(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over the class dimension, ties to the lowest index.

    The result is an integer tensor, so no gradient ever flows through it.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("pseudo_labels requires finite logits")
    return logits.argmax(dim=1)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split [B, C, H, W] into non-overlapping patch tokens [B, N, patch_size**2 * C].

    Pure reshape/permute, so ``unpatchify(patchify(x)) == x`` bit-exactly.
    """
    b, c, h, w = images.shape
    p = patch_size
    if p <= 0 or h % p != 0 or w % p != 0:
        raise ConfigError(f"spatial size {h}x{w} not divisible by patch size {p}")
    tokens = images.reshape(b, c, h // p, p, w // p, p)
    tokens = tokens.permute(0, 2, 4, 1, 3, 5)  # [B, H/p, W/p, C, p, p]
    return tokens.reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    b, n, d = tokens.shape
    p = patch_size
    gh, gw = height // p, width // p
    if gh * gw != n:
        raise ConfigError(f"{n} tokens do not tile {height}x{width} with patch {p}")
    c = d // (p * p)
    x = tokens.reshape(b, gh, gw, c, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, height, width)


def _check_batch(images: torch.Tensor, config: StudentConfig) -> None:
    if images.ndim != 4 or images.shape[1] != config.in_channels:
        raise ConfigError(
            f"expected input [B, {config.in_channels}, H, W], got {tuple(images.shape)}"
        )


class ConvStudent(nn.Module):
    """Four conv stages (two strided, two dilated), 1x1 head, bilinear upsample.

    Stage widths come from ``config.conv_widths``; the first two stages use
    stride 2 so the feature grid sits at stride 4, the later stages keep
    resolution with dilation 2.
    """

    def __init__(self, config: StudentConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.conv_widths
        stages = []
        in_ch = config.in_channels
        for i, out_ch in enumerate(widths):
            stride = 2 if i < 2 else 1
            dilation = 1 if i < 2 else 2
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation),
                    nn.GroupNorm(min(8, out_ch), out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(in_ch, config.num_classes, 1)

    @property
    def feature_dim(self) -> int:
        return self.config.conv_widths[-1]

    def forward(self, images: torch.Tensor) -> StudentOutput:
        _check_batch(images, self.config)
        x = images
        for stage in self.stages:
            x = stage(x)
        logits = self.head(x)
        if logits.shape[-2:] != images.shape[-2:]:
            logits = F.interpolate(logits, size=images.shape[-2:], mode="bilinear", align_corners=False)
        return StudentOutput(features=x, logits=logits, pseudo_labels=pseudo_labels(logits))


class _AttentionBlock(nn.Module):
    """Pre-norm block: LayerNorm -> MHSA -> residual, LayerNorm -> MLP -> residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        head_dim = d // self.num_heads
        qkv = self.qkv(self.norm1(x)).reshape(b, n, 3, self.num_heads, head_dim).permute(2, 0, 3, 1, 4)
        attended = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        x = x + self.proj(attended.transpose(1, 2).reshape(b, n, d))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class AttentionStudent(nn.Module):
    """Patch-token transformer with a linear segmentation head.

    Tokens are linear embeddings of non-overlapping patches plus (optional)
    learned positional embeddings.  After the pre-norm blocks and a final
    LayerNorm, the token grid is reshaped back into a [B, D, H/p, W/p]
    feature map; the head projects tokens to class scores, which are
    bilinearly upsampled to the input resolution.
    """

    def __init__(self, config: StudentConfig):
        super().__init__()
        config.validate()
        self.config = config
        p = config.patch_size
        self.embed = nn.Linear(p * p * config.in_channels, config.embed_dim)
        if config.pos_embed == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(1, config.max_tokens, config.embed_dim))
        else:
            self.pos_embed = None
        self.blocks = nn.ModuleList(
            _AttentionBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_blocks)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.num_classes)

    @property
    def feature_dim(self) -> int:
        return self.config.embed_dim

    def forward_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Token features [B, N, D] after the backbone (before the head)."""
        _check_batch(images, self.config)
        tokens = self.embed(patchify(images, self.config.patch_size))
        if self.pos_embed is not None:
            n = tokens.shape[1]
            if n > self.pos_embed.shape[1]:
                raise ConfigError(
                    f"{n} tokens exceed the positional table size {self.pos_embed.shape[1]}"
                )
            tokens = tokens + self.pos_embed[:, :n]
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, images: torch.Tensor) -> StudentOutput:
        b, _, h, w = images.shape
        p = self.config.patch_size
        tokens = self.forward_tokens(images)
        grid_h, grid_w = h // p, w // p
        features = tokens.reshape(b, grid_h, grid_w, -1).permute(0, 3, 1, 2).contiguous()
        logits = self.head(tokens).reshape(b, grid_h, grid_w, -1).permute(0, 3, 1, 2)
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return StudentOutput(features=features, logits=logits, pseudo_labels=pseudo_labels(logits))


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    # rejection sampling keeps values within 2 std, deterministic under the generator
    tensor.normal_(0.0, std, generator=generator)
    limit = 2.0 * std
    for _ in range(16):
        outside = tensor.abs() > limit
        if not outside.any():
            return
        resampled = torch.empty_like(tensor).normal_(0.0, std, generator=generator)
        tensor[outside] = resampled[outside]
    tensor.clamp_(-limit, limit)


def init_student(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic from-scratch init.

    Conv kernels get fan-in-scaled normals, attention/linear weights get
    truncated normals (std 0.02), all biases and positional tables zero.
    """
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Linear):
                _trunc_normal_(module.weight, 0.02, generator)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
                module.weight.fill_(1.0)
                module.bias.zero_()
        if isinstance(model, AttentionStudent) and model.pos_embed is not None:
            _trunc_normal_(model.pos_embed, 0.02, generator)
    return model


def build_student(config: StudentConfig, seed: int | None = None) -> nn.Module:
    config.validate()
    model = ConvStudent(config) if config.kind == "conv" else AttentionStudent(config)
    if seed is not None:
        init_student(model, seed)
    return model
