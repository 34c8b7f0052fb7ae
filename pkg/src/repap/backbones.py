"""Denoiser backbones with tapped intermediate features.

Both networks return (x0_hat, taps) where taps is an ordered list of
FeatureTap entries; tap tensors are live views into the computation graph
(gradients flow from tap-side losses into the trunk), and every tap is
spatial [B, C, H', W'] (DiT tokens are reshaped onto the patch grid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class BackboneConfigError(ValueError):
    """Raised when a config cannot produce a consistent network."""


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    base: int = 32
    mults: tuple[int, ...] = (1, 2, 4, 8)
    attn_resolutions: tuple[int, ...] = (8, 16)
    res_blocks: int = 2
    dropout: float = 0.0
    sample_size: int = 64
    groups: int = 8

    kind: str = field(default="unet", init=False)

    @property
    def temb_dim(self) -> int:
        return 4 * self.base


@dataclass(frozen=True)
class DiTConfig:
    in_channels: int
    out_channels: int
    hidden: int = 256
    depth: int = 8
    heads: int = 8
    patch: int = 4
    mlp_ratio: int = 4
    sample_size: int = 64
    tap_blocks: tuple[int, ...] = (2, 4, 6)

    kind: str = field(default="dit", init=False)


BackboneConfig = UNetConfig | DiTConfig


@dataclass
class FeatureTap:
    """Named live handle on an intermediate feature tensor."""

    position: str
    tensor: torch.Tensor


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style timestep embedding, [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.float32)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class ResBlock(nn.Module):
    """GroupNorm/SiLU conv block with FiLM timestep modulation."""

    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(temb_dim, 2 * cout)
        self.norm2 = _norm(cout, groups)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head spatial self-attention (content-only, no positions)."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, hh * ww).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        h = (v @ attn.transpose(1, 2)).reshape(b, c, hh, ww)
        return x + self.out(h)


class _Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Tapped U-Net denoiser.

    Stage layout for mults of length L on input size S: stage i runs at
    resolution S / 2^i; attention attaches where that resolution is listed
    in attn_resolutions. Skips are additive between matching stages. Taps:
    encoder_i after each encoder stage, bottleneck, decoder_i after each
    decoder stage.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        if cfg.sample_size % (2 ** (len(cfg.mults) - 1)) != 0:
            raise BackboneConfigError(
                f"sample size {cfg.sample_size} not divisible by "
                f"2^{len(cfg.mults) - 1}"
            )
        self.cfg = cfg
        chans = [cfg.base * m for m in cfg.mults]
        self.stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.temb = nn.Sequential(
            nn.Linear(cfg.base, cfg.temb_dim), nn.SiLU(),
            nn.Linear(cfg.temb_dim, cfg.temb_dim),
        )
        self.enc_stages = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = chans[0]
        for i, cout in enumerate(chans):
            res = cfg.sample_size // (2**i)
            blocks = nn.ModuleList()
            for j in range(cfg.res_blocks):
                blocks.append(ResBlock(ch if j == 0 else cout, cout,
                                       cfg.temb_dim, cfg.groups, cfg.dropout))
            self.enc_stages.append(blocks)
            self.enc_attn.append(
                SelfAttention2d(cout, cfg.groups)
                if res in cfg.attn_resolutions else nn.Identity()
            )
            if i < len(chans) - 1:
                self.downs.append(nn.AvgPool2d(2))
            ch = cout
        self.mid_block = ResBlock(ch, ch, cfg.temb_dim, cfg.groups, cfg.dropout)
        mid_res = cfg.sample_size // (2 ** (len(chans) - 1))
        self.mid_attn = (
            SelfAttention2d(ch, cfg.groups)
            if mid_res in cfg.attn_resolutions else nn.Identity()
        )
        self.ups = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        for i in reversed(range(len(chans))):
            cout = chans[i]
            res = cfg.sample_size // (2**i)
            if i < len(chans) - 1:
                self.ups.append(_Upsample(ch, cout))
            blocks = nn.ModuleList()
            for j in range(cfg.res_blocks):
                blocks.append(ResBlock(cout, cout, cfg.temb_dim,
                                       cfg.groups, cfg.dropout))
            self.dec_stages.append(blocks)
            self.dec_attn.append(
                SelfAttention2d(cout, cfg.groups)
                if res in cfg.attn_resolutions else nn.Identity()
            )
            ch = cout
        self.head_norm = _norm(chans[0], cfg.groups)
        self.head = nn.Conv2d(chans[0], cfg.out_channels, 3, padding=1)

    def forward(
        self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, list[FeatureTap]]:
        if cond is not None:
            x = torch.cat([x, cond], dim=1)
        if x.shape[1] != self.cfg.in_channels:
            raise BackboneConfigError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        t = torch.as_tensor(t, dtype=torch.float32, device=x.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        temb = self.temb(sinusoidal_embedding(t, self.cfg.base))
        taps: list[FeatureTap] = []
        h = self.stem(x)
        skips = []
        n = len(self.enc_stages)
        for i in range(n):
            for block in self.enc_stages[i]:
                h = block(h, temb)
            h = self.enc_attn[i](h)
            taps.append(FeatureTap(f"encoder_{i}", h))
            skips.append(h)
            if i < n - 1:
                h = self.downs[i](h)
        h = self.mid_block(h, temb)
        h = self.mid_attn(h)
        taps.append(FeatureTap("bottleneck", h))
        for d, i in enumerate(reversed(range(n))):
            if i < n - 1:
                h = self.ups[d - 1](h)
            h = h + skips[i]
            for block in self.dec_stages[d]:
                h = block(h, temb)
            h = self.dec_attn[d](h)
            taps.append(FeatureTap(f"decoder_{i}", h))
        out = self.head(F.silu(self.head_norm(h)))
        return out, taps


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaLN-zero timestep conditioning."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, mlp_ratio * hidden), nn.GELU(),
            nn.Linear(mlp_ratio * hidden, hidden),
        )
        self.modulation = nn.Linear(hidden, 6 * hidden)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(temb)[:, None, :].chunk(6, dim=-1)
        h = self.norm1(x) * (1.0 + sc1) + sh1
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + g1 * h
        h = self.mlp(self.norm2(x) * (1.0 + sc2) + sh2)
        return x + g2 * h


class DiT(nn.Module):
    """Patch transformer denoiser with taps at configured blocks (1-based)."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        if cfg.sample_size % cfg.patch != 0:
            raise BackboneConfigError(
                f"sample size {cfg.sample_size} not divisible by patch {cfg.patch}"
            )
        if any(b < 1 or b > cfg.depth for b in cfg.tap_blocks):
            raise BackboneConfigError("tap_blocks out of range")
        self.cfg = cfg
        self.n_side = cfg.sample_size // cfg.patch
        self.patchify = nn.Conv2d(cfg.in_channels, cfg.hidden, cfg.patch, stride=cfg.patch)
        self.pos = nn.Parameter(torch.zeros(1, self.n_side**2, cfg.hidden))
        nn.init.normal_(self.pos, std=0.02)
        self.temb = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.hidden), nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.hidden),
        )
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.hidden, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden, elementwise_affine=False)
        self.final_mod = nn.Linear(cfg.hidden, 2 * cfg.hidden)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        self.unpatch = nn.Linear(cfg.hidden, cfg.patch**2 * cfg.out_channels)
        nn.init.zeros_(self.unpatch.weight)
        nn.init.zeros_(self.unpatch.bias)

    def _tokens_to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, c = tokens.shape
        return tokens.transpose(1, 2).reshape(b, c, self.n_side, self.n_side)

    def forward(
        self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, list[FeatureTap]]:
        if cond is not None:
            x = torch.cat([x, cond], dim=1)
        if x.shape[1] != self.cfg.in_channels:
            raise BackboneConfigError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        t = torch.as_tensor(t, dtype=torch.float32, device=x.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        temb = self.temb(sinusoidal_embedding(t, self.cfg.hidden))
        tokens = self.patchify(x).flatten(2).transpose(1, 2) + self.pos
        taps: list[FeatureTap] = []
        for i, block in enumerate(self.blocks, start=1):
            tokens = block(tokens, temb)
            if i in self.cfg.tap_blocks:
                taps.append(FeatureTap(f"block_{i}", self._tokens_to_grid(tokens)))
        sh, sc = self.final_mod(temb)[:, None, :].chunk(2, dim=-1)
        tokens = self.unpatch(self.final_norm(tokens) * (1.0 + sc) + sh)
        b = tokens.shape[0]
        p, co = self.cfg.patch, self.cfg.out_channels
        out = tokens.reshape(b, self.n_side, self.n_side, p, p, co)
        out = out.permute(0, 5, 1, 3, 2, 4).reshape(
            b, co, self.cfg.sample_size, self.cfg.sample_size
        )
        return out, taps


def make_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "unet":
        return UNet(cfg)
    if cfg.kind == "dit":
        return DiT(cfg)
    raise BackboneConfigError(f"unknown backbone kind {cfg.kind!r}")


def count_parameters(obj: BackboneConfig | nn.Module) -> int:
    """Exact trainable-parameter count of a module or a config's network."""
    module = obj if isinstance(obj, nn.Module) else make_backbone(obj)
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def symmetrize_x_flip(module: nn.Module) -> nn.Module:
    """Average every conv kernel with its horizontal mirror, in place.

    After this, networks built from convs, pooling, nearest upsampling,
    pointwise nonlinearities, and content-only attention commute exactly
    with horizontal flips. Zero padding is flip-symmetric, so no padding
    caveat applies to flips (translations are still broken at borders).
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.copy_(0.5 * (m.weight + m.weight.flip(-1)))
    return module


def paper_unet_config(task: str) -> UNetConfig:
    """Published architecture table, one column per task."""
    if task == "darcy":
        return UNetConfig(in_channels=2, out_channels=2)
    if task == "topology":
        return UNetConfig(in_channels=4, out_channels=1, base=128, dropout=0.1)
    if task == "charge":
        return UNetConfig(in_channels=2, out_channels=1, mults=(1, 2, 4),
                          attn_resolutions=(16,))
    if task == "turbulence":
        return UNetConfig(in_channels=1, out_channels=1, sample_size=128)
    raise ValueError(f"unknown task {task!r}")


def paper_dit_config(in_channels: int = 2, out_channels: int = 2) -> DiTConfig:
    return DiTConfig(in_channels=in_channels, out_channels=out_channels)


def desk_unet_config(
    in_channels: int, out_channels: int, sample_size: int = 32
) -> UNetConfig:
    """Small config for acceptance runs: width 8, three stages, no attention."""
    return UNetConfig(
        in_channels=in_channels, out_channels=out_channels, base=8,
        mults=(1, 2, 4), attn_resolutions=(), res_blocks=1,
        sample_size=sample_size,
    )


def desk_dit_config(
    in_channels: int, out_channels: int, sample_size: int = 32
) -> DiTConfig:
    return DiTConfig(
        in_channels=in_channels, out_channels=out_channels, hidden=64,
        depth=4, heads=4, patch=4, sample_size=sample_size, tap_blocks=(2,),
    )
