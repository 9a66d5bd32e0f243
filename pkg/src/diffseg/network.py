"""Dual-encoder residual UNet noise predictor.

Two independent encoders process the conditioning image and the current
noisy mask. At configured stages the image features are enhanced by an
affinity-gated fusion with the mask features (optionally spectrally
filtered first). The two final embeddings are added and decoded back to a
noise prediction through a UNet decoder fed by the image encoder's skips.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .ffparser import SpectralFilter


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels_image: int = 1
    in_channels_mask: int = 1
    base_channels: int = 32
    stage_block_counts: tuple = (3, 4, 6)
    channel_multipliers: tuple = (1, 2, 4)
    time_embed_dim: int = 128
    fusion_stages: frozenset = frozenset({1, 2})
    use_dycond: bool = True
    use_ffparser: bool = True
    T: int = 1000
    time_embed_kind: str = "sinusoidal"  # or "table"

    def __post_init__(self):
        self.stage_block_counts = tuple(self.stage_block_counts)
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.fusion_stages = frozenset(self.fusion_stages)
        if len(self.stage_block_counts) != len(self.channel_multipliers):
            raise ValueError("stage_block_counts and channel_multipliers must have equal length")
        if len(self.stage_block_counts) < 3:
            raise ValueError("need at least 3 stages")
        n = len(self.stage_block_counts)
        if not self.fusion_stages <= set(range(n)):
            raise ValueError(f"fusion_stages {sorted(self.fusion_stages)} outside valid range 0..{n - 1}")
        if self.image_size % (2 ** (n - 1)) != 0:
            raise ValueError("image_size must be divisible by 2**(num_stages-1)")

    @property
    def num_stages(self) -> int:
        return len(self.stage_block_counts)

    def stage_channels(self, k: int) -> int:
        return self.base_channels * self.channel_multipliers[k]

    def stage_resolution(self, k: int) -> int:
        return self.image_size // (2 ** k)


TOY_PRESETS = {
    "S-toy": dict(base_channels=16, stage_block_counts=(1, 1, 1),
                  channel_multipliers=(1, 2, 4), fusion_stages=frozenset({1, 2})),
    "B-toy": dict(base_channels=16, stage_block_counts=(1, 1, 1, 1),
                  channel_multipliers=(1, 2, 2, 4), fusion_stages=frozenset({1, 2})),
}


def channel_layernorm(x: torch.Tensor, channel_dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Zero-mean unit-variance normalization over the channel axis at every
    spatial position. No learned affine, so the result is scale-invariant."""
    mean = x.mean(dim=channel_dim, keepdim=True)
    var = x.var(dim=channel_dim, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def dynamic_condition(m_I: torch.Tensor, m_x: torch.Tensor, channel_dim: int = -1) -> torch.Tensor:
    """Affinity-gated enhancement of condition features by mask features:
    (LN(m_I) * LN(m_x)) * m_I elementwise."""
    if m_I.shape != m_x.shape:
        raise ValueError(f"shape mismatch: {tuple(m_I.shape)} vs {tuple(m_x.shape)}")
    affinity = channel_layernorm(m_I, channel_dim) * channel_layernorm(m_x, channel_dim)
    return affinity * m_I


def _groups_for(channels: int) -> int:
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class TimeEmbedding(nn.Module):
    """Step-index embedding: sinusoidal basis (default) or a learned table
    of T rows, followed by a two-layer learned projection. Shared across
    every residual block."""

    def __init__(self, dim: int, T: int, kind: str = "sinusoidal"):
        super().__init__()
        if kind not in ("sinusoidal", "table"):
            raise ValueError(f"unknown time embedding kind {kind!r}")
        self.dim = dim
        self.T = T
        self.kind = kind
        if kind == "table":
            self.table = nn.Embedding(T, dim)
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def basis(self, t: torch.Tensor) -> torch.Tensor:
        if self.kind == "table":
            return self.table(t)
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
        ang = t.double()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        if self.dim % 2:
            emb = torch.nn.functional.pad(emb, (0, 1))
        return emb.to(next(self.proj.parameters()).dtype)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t[None]
        if bool((t < 0).any()) or bool((t >= self.T).any()):
            raise ValueError(f"step index out of range [0, {self.T})")
        return self.proj(self.basis(t))


class ResidualBlock(nn.Module):
    """Two (group-norm, SiLU, conv) sub-blocks with the projected time
    embedding added after the first, plus a channel-matching shortcut."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups_for(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Sequential(nn.Linear(time_dim, out_ch), nn.SiLU(),
                                       nn.Linear(out_ch, out_ch))
        self.norm2 = nn.GroupNorm(_groups_for(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.act = nn.SiLU()
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.shortcut(x) + h


class EncoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, num_blocks: int, time_dim: int,
                 downsample: bool):
        super().__init__()
        self.down = nn.Conv2d(in_ch, in_ch, 3, stride=2, padding=1) if downsample else nn.Identity()
        blocks = {}
        for j in range(num_blocks):
            blocks[f"block{j}"] = ResidualBlock(in_ch if j == 0 else out_ch, out_ch, time_dim)
        self.blocks = nn.ModuleDict(blocks)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        x = self.down(x)
        for block in self.blocks.values():
            x = block(x, t_emb)
        return x


class Encoder(nn.Module):
    def __init__(self, in_ch: int, cfg: ModelConfig):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, cfg.base_channels, 3, padding=1)
        stages = {}
        prev = cfg.base_channels
        for k in range(cfg.num_stages):
            out = cfg.stage_channels(k)
            stages[f"stage{k}"] = EncoderStage(prev, out, cfg.stage_block_counts[k],
                                               cfg.time_embed_dim, downsample=k > 0)
            prev = out
        self.stages = nn.ModuleDict(stages)


class Decoder(nn.Module):
    """Bottleneck residual blocks followed by upsampling stages, each
    consuming the matching image-encoder skip by concatenation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        last = cfg.stage_channels(cfg.num_stages - 1)
        self.mid0 = ResidualBlock(last, last, cfg.time_embed_dim)
        self.mid1 = ResidualBlock(last, last, cfg.time_embed_dim)
        ups = {}
        blocks = {}
        prev = last
        for k in range(cfg.num_stages - 2, -1, -1):
            skip_ch = cfg.stage_channels(k)
            ups[f"stage{k}"] = nn.ConvTranspose2d(prev, skip_ch, 4, stride=2, padding=1)
            blocks[f"stage{k}"] = ResidualBlock(2 * skip_ch, skip_ch, cfg.time_embed_dim)
            prev = skip_ch
        self.ups = nn.ModuleDict(ups)
        self.blocks = nn.ModuleDict(blocks)
        self.out_norm = nn.GroupNorm(_groups_for(prev), prev)
        self.out_act = nn.SiLU()
        self.out_conv = nn.Conv2d(prev, cfg.in_channels_mask, 3, padding=1)

    def forward(self, h: torch.Tensor, skips: list, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.mid0(h, t_emb)
        h = self.mid1(h, t_emb)
        n = len(skips)
        for k in range(n - 2, -1, -1):
            h = self.ups[f"stage{k}"](h)
            h = self.blocks[f"stage{k}"](torch.cat([h, skips[k]], dim=1), t_emb)
        return self.out_conv(self.out_act(self.out_norm(h)))


class NoisePredictor(nn.Module):
    """The full conditional noise-prediction network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimeEmbedding(cfg.time_embed_dim, cfg.T, cfg.time_embed_kind)
        self.encoder_image = Encoder(cfg.in_channels_image, cfg)
        self.encoder_mask = Encoder(cfg.in_channels_mask, cfg)
        if cfg.use_ffparser:
            filters = {}
            for k in sorted(cfg.fusion_stages):
                r = cfg.stage_resolution(k)
                filters[f"stage{k}"] = SpectralFilter(r, r, cfg.stage_channels(k))
            self.ffparser = nn.ModuleDict(filters)
        self.decoder = Decoder(cfg)

    def encode_mask(self, xt: torch.Tensor, t_emb: torch.Tensor):
        """Returns (final embedding, per-stage feature list)."""
        if xt.shape[-1] != self.cfg.image_size or xt.shape[-2] != self.cfg.image_size:
            raise ValueError(f"mask spatial size {tuple(xt.shape[-2:])} != "
                             f"configured {self.cfg.image_size}")
        h = self.encoder_mask.stem(xt)
        feats = []
        for k in range(self.cfg.num_stages):
            h = self.encoder_mask.stages[f"stage{k}"](h, t_emb)
            feats.append(h)
        return h, feats

    def encode_image(self, image: torch.Tensor, mask_feats, t_emb: torch.Tensor):
        """Returns (final embedding, per-stage skip list). mask_feats may be
        None when dynamic conditioning is disabled."""
        if image.shape[-1] != self.cfg.image_size or image.shape[-2] != self.cfg.image_size:
            raise ValueError(f"image spatial size {tuple(image.shape[-2:])} != "
                             f"configured {self.cfg.image_size}")
        h = self.encoder_image.stem(image)
        skips = []
        for k in range(self.cfg.num_stages):
            h = self.encoder_image.stages[f"stage{k}"](h, t_emb)
            if self.cfg.use_dycond and k in self.cfg.fusion_stages:
                if mask_feats is None or mask_feats[k] is None:
                    raise ValueError(f"fusion stage {k} requires mask features")
                mx = mask_feats[k]
                if self.cfg.use_ffparser:
                    mx = self.ffparser[f"stage{k}"].apply_nchw(mx)
                h = dynamic_condition(h, mx, channel_dim=1)
            skips.append(h)
        return h, skips

    def forward(self, xt: torch.Tensor, image: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, device=xt.device)
        if t.ndim == 0:
            t = t.expand(xt.shape[0])
        t_emb = self.time_embed(t)
        e_x, mask_feats = self.encode_mask(xt, t_emb)
        e_i, skips = self.encode_image(image, mask_feats if self.cfg.use_dycond else None, t_emb)
        return self.decoder(e_i + e_x, skips, t_emb)


def predict_noise(xt: torch.Tensor, image: torch.Tensor, t, model: NoisePredictor) -> torch.Tensor:
    return model(xt, image, t)


def count_parameters(model_or_config) -> int:
    if isinstance(model_or_config, ModelConfig):
        model_or_config = NoisePredictor(model_or_config)
    return sum(p.numel() for p in model_or_config.parameters())
